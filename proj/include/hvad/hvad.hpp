#pragma once

// Umbrella header for the whole library.

#include "hvad/checkpoint.hpp"
#include "hvad/data.hpp"
#include "hvad/errors.hpp"
#include "hvad/evaluation.hpp"
#include "hvad/filters.hpp"
#include "hvad/gradcheck.hpp"
#include "hvad/hash.hpp"
#include "hvad/image.hpp"
#include "hvad/layers.hpp"
#include "hvad/losses.hpp"
#include "hvad/model.hpp"
#include "hvad/ops.hpp"
#include "hvad/optim.hpp"
#include "hvad/scoring.hpp"
#include "hvad/synth.hpp"
#include "hvad/tensor.hpp"
#include "hvad/trainer.hpp"
