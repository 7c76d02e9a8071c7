// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"
#include "harness.hpp"
#include "invariants.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "path_record.hpp"
#include "path_space.hpp"
#include "remote.hpp"
#include "reverse.hpp"
#include "search.hpp"
#include "stats.hpp"
