#pragma once

// Umbrella header.

#include "hma/error.hpp"
#include "hma/tensor.hpp"
#include "hma/rng.hpp"
#include "hma/hmat.hpp"
#include "hma/kernels.hpp"
#include "hma/tape.hpp"
#include "hma/batchnorm.hpp"
#include "hma/layers.hpp"
#include "hma/caa.hpp"
#include "hma/rsa.hpp"
#include "hma/network.hpp"
#include "hma/metrics.hpp"
#include "hma/synthetic.hpp"
#include "hma/train.hpp"
#include "hma/grad_check.hpp"
#include "hma/gradcheck_suite.hpp"
#include "hma/complexity.hpp"
