#pragma once

#include "abq/autodiff.hpp"
#include "abq/bitplane.hpp"
#include "abq/calibration.hpp"
#include "abq/core.hpp"
#include "abq/gemm.hpp"
#include "abq/io.hpp"
#include "abq/log.hpp"
#include "abq/losses.hpp"
#include "abq/quantizer.hpp"
#include "abq/toyblock.hpp"
#include "abq/tune.hpp"
