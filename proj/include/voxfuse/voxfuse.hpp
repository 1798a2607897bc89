#pragma once

// Umbrella header.

#include "voxfuse/adam.hpp"
#include "voxfuse/archive.hpp"
#include "voxfuse/binvox.hpp"
#include "voxfuse/common.hpp"
#include "voxfuse/dataset.hpp"
#include "voxfuse/fusion.hpp"
#include "voxfuse/gradcheck.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/layers.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/objective.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/run_config.hpp"
#include "voxfuse/synth.hpp"
#include "voxfuse/tensor.hpp"
#include "voxfuse/training.hpp"
#include "voxfuse/voxel.hpp"
