#pragma once

#include "cffa/art.hpp"
#include "cffa/box.hpp"
#include "cffa/checkpoint.hpp"
#include "cffa/config.hpp"
#include "cffa/detector.hpp"
#include "cffa/domains.hpp"
#include "cffa/eval.hpp"
#include "cffa/ops.hpp"
#include "cffa/psa.hpp"
#include "cffa/rng.hpp"
#include "cffa/tensor.hpp"
#include "cffa/trainer.hpp"
