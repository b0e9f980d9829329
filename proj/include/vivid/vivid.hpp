// Umbrella header pulling in the whole library.
#pragma once

#include "vivid/checkpoint.hpp"
#include "vivid/common.hpp"
#include "vivid/dataset.hpp"
#include "vivid/metrics.hpp"
#include "vivid/model.hpp"
#include "vivid/optim.hpp"
#include "vivid/probe.hpp"
#include "vivid/spd.hpp"
#include "vivid/teacher.hpp"
#include "vivid/tensor.hpp"
#include "vivid/train.hpp"
#include "vivid/ums.hpp"
#include "vivid/vit.hpp"
