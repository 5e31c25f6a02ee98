#pragma once

#include "cct/augment.hpp"
#include "cct/config.hpp"
#include "cct/dataset.hpp"
#include "cct/errors.hpp"
#include "cct/filters.hpp"
#include "cct/grad_check.hpp"
#include "cct/gradcam.hpp"
#include "cct/graph.hpp"
#include "cct/image.hpp"
#include "cct/metrics.hpp"
#include "cct/model.hpp"
#include "cct/ops.hpp"
#include "cct/pipeline.hpp"
#include "cct/preprocess.hpp"
#include "cct/rng.hpp"
#include "cct/runtime.hpp"
#include "cct/selftest.hpp"
#include "cct/tensor.hpp"
#include "cct/train.hpp"

namespace cct {
inline constexpr const char* kVersion = "0.1.0";
}
