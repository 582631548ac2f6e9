#pragma once

#include "parabart/adamw.hpp"
#include "parabart/checkpoint.hpp"
#include "parabart/data.hpp"
#include "parabart/errors.hpp"
#include "parabart/eval.hpp"
#include "parabart/grad_check.hpp"
#include "parabart/grad_suite.hpp"
#include "parabart/model.hpp"
#include "parabart/ops.hpp"
#include "parabart/syntax.hpp"
#include "parabart/tensor.hpp"
#include "parabart/training.hpp"
