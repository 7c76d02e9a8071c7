// SPDX-License-Identifier: Apache-2.0
// Stdio server for the remote-client tests: one request line in, one response line out.

#include <unistd.h>

#include "fake_bridge.hpp"

int main() {
  const auto model = mdm::make_oracle(fake_bridge::demo_model());
  fake_bridge::serve_fd(STDIN_FILENO, STDOUT_FILENO, *model);
  return 0;
}
