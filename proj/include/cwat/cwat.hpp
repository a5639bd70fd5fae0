#pragma once

#include "cwat/attacks.hpp"
#include "cwat/autodiff.hpp"
#include "cwat/box.hpp"
#include "cwat/checkpoint.hpp"
#include "cwat/data.hpp"
#include "cwat/detector.hpp"
#include "cwat/error.hpp"
#include "cwat/evaluation.hpp"
#include "cwat/image_io.hpp"
#include "cwat/losses.hpp"
#include "cwat/tensor.hpp"
#include "cwat/training.hpp"
