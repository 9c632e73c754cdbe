#pragma once

#include "fdi/attack.hpp"
#include "fdi/bdd.hpp"
#include "fdi/errors.hpp"
#include "fdi/game.hpp"
#include "fdi/grid_model.hpp"
#include "fdi/lp.hpp"
#include "fdi/parallel.hpp"
#include "fdi/rng.hpp"
#include "fdi/scenario.hpp"
