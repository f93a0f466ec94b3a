#pragma once

#include "tkknn/data.hpp"
#include "tkknn/engine.hpp"
#include "tkknn/error.hpp"
#include "tkknn/log.hpp"
#include "tkknn/losses.hpp"
#include "tkknn/model.hpp"
#include "tkknn/optim.hpp"
#include "tkknn/report.hpp"
#include "tkknn/rng.hpp"
#include "tkknn/strategies.hpp"
#include "tkknn/synth.hpp"
