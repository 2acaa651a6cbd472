#pragma once

#include "wat/bench.hpp"
#include "wat/checkpoint.hpp"
#include "wat/config.hpp"
#include "wat/data.hpp"
#include "wat/gradcheck.hpp"
#include "wat/gradcheck_suite.hpp"
#include "wat/models.hpp"
#include "wat/runs.hpp"
#include "wat/train.hpp"
