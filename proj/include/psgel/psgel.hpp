#pragma once

#include "psgel/error.hpp"
#include "psgel/numeric.hpp"
#include "psgel/dgp.hpp"
#include "psgel/sieve.hpp"
#include "psgel/moments.hpp"
#include "psgel/gel.hpp"
#include "psgel/estimator.hpp"
#include "psgel/inference.hpp"
#include "psgel/bound.hpp"
#include "psgel/harness.hpp"
