#pragma once

#include "lgm/checkpoint.hpp"
#include "lgm/clamping.hpp"
#include "lgm/data.hpp"
#include "lgm/exact.hpp"
#include "lgm/inference.hpp"
#include "lgm/model.hpp"
#include "lgm/pgm.hpp"
#include "lgm/tensor.hpp"
#include "lgm/train.hpp"
#include "lgm/verify.hpp"
