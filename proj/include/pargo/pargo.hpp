#pragma once

#include "pargo/adam.hpp"
#include "pargo/attention_mask.hpp"
#include "pargo/checkpoint.hpp"
#include "pargo/error.hpp"
#include "pargo/grad_check.hpp"
#include "pargo/kernels.hpp"
#include "pargo/masks.hpp"
#include "pargo/ops.hpp"
#include "pargo/projector.hpp"
#include "pargo/rng.hpp"
#include "pargo/tensor.hpp"
#include "pargo/toy.hpp"
#include "pargo/train.hpp"
#include "pargo/projector_check.hpp"
