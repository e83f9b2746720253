#pragma once

#include "ccnf/autodiff.hpp"
#include "ccnf/errors.hpp"
#include "ccnf/eval.hpp"
#include "ccnf/flow.hpp"
#include "ccnf/io.hpp"
#include "ccnf/ode.hpp"
#include "ccnf/synthdata.hpp"
#include "ccnf/tensor.hpp"
#include "ccnf/training.hpp"
#include "ccnf/vector_field.hpp"
