// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "feddlp/adapter.hpp"
#include "feddlp/config.hpp"
#include "feddlp/data.hpp"
#include "feddlp/error.hpp"
#include "feddlp/federation.hpp"
#include "feddlp/gradcheck.hpp"
#include "feddlp/linalg.hpp"
#include "feddlp/metrics.hpp"
#include "feddlp/model.hpp"
#include "feddlp/rng.hpp"
#include "feddlp/training.hpp"
