// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hhsplit/bench.hpp"
#include "hhsplit/compress.hpp"
#include "hhsplit/errors.hpp"
#include "hhsplit/ffn.hpp"
#include "hhsplit/io.hpp"
#include "hhsplit/linalg.hpp"
#include "hhsplit/plan.hpp"
#include "hhsplit/profiler.hpp"
#include "hhsplit/quant.hpp"
#include "hhsplit/rng.hpp"
