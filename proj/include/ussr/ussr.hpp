#pragma once

#include "ussr/bipartite.hpp"
#include "ussr/checkpoint.hpp"
#include "ussr/config.hpp"
#include "ussr/expansion.hpp"
#include "ussr/features.hpp"
#include "ussr/graph.hpp"
#include "ussr/metrics.hpp"
#include "ussr/optim.hpp"
#include "ussr/rng.hpp"
#include "ussr/synthetic.hpp"
#include "ussr/training.hpp"
#include "ussr/universal.hpp"
