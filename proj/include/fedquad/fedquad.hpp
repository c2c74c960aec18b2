#pragma once

#include "fedquad/checkpoint.hpp"
#include "fedquad/configuration.hpp"
#include "fedquad/experiment.hpp"
#include "fedquad/federation.hpp"
#include "fedquad/model.hpp"
#include "fedquad/quant.hpp"
#include "fedquad/resource.hpp"
#include "fedquad/rng.hpp"
#include "fedquad/scheduler.hpp"
#include "fedquad/tensor.hpp"
#include "fedquad/workload.hpp"
