#pragma once

#include "gsgn/autograd.hpp"
#include "gsgn/checkpoint.hpp"
#include "gsgn/config_io.hpp"
#include "gsgn/data.hpp"
#include "gsgn/gradcheck.hpp"
#include "gsgn/image.hpp"
#include "gsgn/layers.hpp"
#include "gsgn/losses.hpp"
#include "gsgn/metrics.hpp"
#include "gsgn/models.hpp"
#include "gsgn/ops.hpp"
#include "gsgn/optim.hpp"
#include "gsgn/rng.hpp"
#include "gsgn/tensor.hpp"
#include "gsgn/training.hpp"
