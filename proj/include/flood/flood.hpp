#pragma once

// Umbrella header: the whole library.

#include "flood/autograd.hpp"
#include "flood/bench.hpp"
#include "flood/checkpoint.hpp"
#include "flood/commands.hpp"
#include "flood/config.hpp"
#include "flood/denoiser.hpp"
#include "flood/error.hpp"
#include "flood/metrics.hpp"
#include "flood/motion.hpp"
#include "flood/optim.hpp"
#include "flood/rng.hpp"
#include "flood/schedule.hpp"
#include "flood/spsc.hpp"
#include "flood/stream.hpp"
#include "flood/tensor.hpp"
#include "flood/training.hpp"
#include "flood/vae.hpp"
