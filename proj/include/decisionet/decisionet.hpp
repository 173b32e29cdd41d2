#pragma once

#include "decisionet/arch.hpp"
#include "decisionet/checkpoint.hpp"
#include "decisionet/clustering.hpp"
#include "decisionet/data.hpp"
#include "decisionet/experiment.hpp"
#include "decisionet/grad_check.hpp"
#include "decisionet/nn.hpp"
#include "decisionet/ops.hpp"
#include "decisionet/routing.hpp"
#include "decisionet/tensor.hpp"
#include "decisionet/training.hpp"
#include "decisionet/tree_network.hpp"
