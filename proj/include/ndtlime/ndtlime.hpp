#pragma once

#include "ndtlime/core.hpp"
#include "ndtlime/data.hpp"
#include "ndtlime/blackbox.hpp"
#include "ndtlime/tree.hpp"
#include "ndtlime/ndt.hpp"
#include "ndtlime/metrics.hpp"
#include "ndtlime/explain.hpp"
#include "ndtlime/bench.hpp"
