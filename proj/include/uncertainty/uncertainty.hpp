#pragma once

#include "attention.hpp"
#include "behavior.hpp"
#include "entropy.hpp"
#include "error.hpp"
#include "report.hpp"
#include "stats.hpp"
#include "synth.hpp"
#include "syntax.hpp"
#include "trace.hpp"
