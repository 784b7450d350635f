#pragma once

#include "vtn/config.hpp"
#include "vtn/convergence.hpp"
#include "vtn/dataset.hpp"
#include "vtn/hungarian.hpp"
#include "vtn/layout.hpp"
#include "vtn/metrics.hpp"
#include "vtn/model.hpp"
#include "vtn/optim.hpp"
#include "vtn/sampling.hpp"
#include "vtn/svg.hpp"
#include "vtn/tensor.hpp"
#include "vtn/training.hpp"
#include "vtn/transformer.hpp"
