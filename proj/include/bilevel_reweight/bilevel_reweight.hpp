#pragma once

#include "error.hpp"
#include "rng.hpp"
#include "simplex.hpp"
#include "trace.hpp"
#include "dataset.hpp"
#include "loss_models.hpp"
#include "linear_solve.hpp"
#include "inner_solve.hpp"
#include "hypergradient.hpp"
#include "datagen.hpp"
#include "solvers.hpp"
#include "dynamics.hpp"
#include "experiments.hpp"
#include "io.hpp"
