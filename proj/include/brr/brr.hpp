#pragma once

#include "brr/augmentation.hpp"
#include "brr/config.hpp"
#include "brr/core.hpp"
#include "brr/dgp.hpp"
#include "brr/divergences.hpp"
#include "brr/error.hpp"
#include "brr/evaluation.hpp"
#include "brr/experiment.hpp"
#include "brr/gbm.hpp"
#include "brr/kernel.hpp"
#include "brr/mlp.hpp"
#include "brr/plot.hpp"
#include "brr/random.hpp"
#include "brr/score.hpp"
#include "brr/search.hpp"
