#pragma once

// Umbrella header for the whole library.

#include "ebwm/common.hpp"
#include "ebwm/tensor.hpp"
#include "ebwm/tape.hpp"
#include "ebwm/ops.hpp"
#include "ebwm/primitives.hpp"
#include "ebwm/gradcheck.hpp"
#include "ebwm/config.hpp"
#include "ebwm/params.hpp"
#include "ebwm/nn.hpp"
#include "ebwm/ebt.hpp"
#include "ebwm/objectives.hpp"
#include "ebwm/mcmc.hpp"
#include "ebwm/data.hpp"
#include "ebwm/optim.hpp"
#include "ebwm/metrics.hpp"
#include "ebwm/trainer.hpp"
#include "ebwm/report.hpp"
