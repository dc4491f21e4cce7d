#pragma once

#include "mixsize/analysis.hpp"
#include "mixsize/bn_stats.hpp"
#include "mixsize/calib.hpp"
#include "mixsize/checkpoint.hpp"
#include "mixsize/config.hpp"
#include "mixsize/data.hpp"
#include "mixsize/error.hpp"
#include "mixsize/limits.hpp"
#include "mixsize/metrics.hpp"
#include "mixsize/model.hpp"
#include "mixsize/ops.hpp"
#include "mixsize/optim.hpp"
#include "mixsize/rng.hpp"
#include "mixsize/runtime.hpp"
#include "mixsize/sched.hpp"
#include "mixsize/tensor.hpp"
#include "mixsize/train.hpp"
