// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "icl_lab/adamw.hpp"
#include "icl_lab/attention.hpp"
#include "icl_lab/autodiff.hpp"
#include "icl_lab/baselines.hpp"
#include "icl_lab/config.hpp"
#include "icl_lab/dynamics.hpp"
#include "icl_lab/episodes.hpp"
#include "icl_lab/error.hpp"
#include "icl_lab/evaluation.hpp"
#include "icl_lab/hyena.hpp"
#include "icl_lab/model.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"
#include "icl_lab/ssm.hpp"
#include "icl_lab/tasks.hpp"
#include "icl_lab/tensor.hpp"
#include "icl_lab/training.hpp"
