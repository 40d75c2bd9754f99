#pragma once

// Umbrella header.

#include "arch.hpp"
#include "autograd.hpp"
#include "checkpoint.hpp"
#include "cli.hpp"
#include "cmaes.hpp"
#include "error.hpp"
#include "fitness.hpp"
#include "merge.hpp"
#include "mixture.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "router.hpp"
#include "runtime.hpp"
#include "search.hpp"
#include "similarity.hpp"
#include "tensor.hpp"
#include "toy_model.hpp"
