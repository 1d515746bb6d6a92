#pragma once

#include "nnleak/cema.hpp"
#include "nnleak/error.hpp"
#include "nnleak/extraction.hpp"
#include "nnleak/float_codec.hpp"
#include "nnleak/harness.hpp"
#include "nnleak/mlp.hpp"
#include "nnleak/trace_set.hpp"
#include "nnleak/trace_sim.hpp"
