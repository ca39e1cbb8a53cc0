#pragma once

#include "urt/core_math.hpp"
#include "urt/error.hpp"
#include "urt/evaluation.hpp"
#include "urt/feature_store.hpp"
#include "urt/proto_head.hpp"
#include "urt/rng.hpp"
#include "urt/sampler.hpp"
#include "urt/training.hpp"
#include "urt/urt_layer.hpp"
#include "urt/gradcheck.hpp"
#include "urt/run_config.hpp"
