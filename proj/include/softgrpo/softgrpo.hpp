#pragma once

#include "softgrpo/advantages.hpp"
#include "softgrpo/autodiff.hpp"
#include "softgrpo/checkpoint.hpp"
#include "softgrpo/config.hpp"
#include "softgrpo/diagnostics.hpp"
#include "softgrpo/errors.hpp"
#include "softgrpo/experiment.hpp"
#include "softgrpo/metrics.hpp"
#include "softgrpo/model.hpp"
#include "softgrpo/objectives.hpp"
#include "softgrpo/parallel.hpp"
#include "softgrpo/rng.hpp"
#include "softgrpo/rollout.hpp"
#include "softgrpo/sampling.hpp"
#include "softgrpo/tasks.hpp"
#include "softgrpo/verify.hpp"
