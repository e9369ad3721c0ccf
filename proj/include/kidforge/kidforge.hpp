#pragma once

// Umbrella header: the whole library in dependency order.

#include "kidforge/common.hpp"
#include "kidforge/parallel.hpp"
#include "kidforge/schema.hpp"
#include "kidforge/features.hpp"
#include "kidforge/image.hpp"
#include "kidforge/expert.hpp"
#include "kidforge/team.hpp"
#include "kidforge/cluster.hpp"
#include "kidforge/kid.hpp"
#include "kidforge/synth.hpp"
#include "kidforge/eval.hpp"
