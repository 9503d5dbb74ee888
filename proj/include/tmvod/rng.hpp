#pragma once

#include <random>

namespace tmvod {

// The engine is fully specified by the standard, so a seed reproduces the
// same stream everywhere.
using Rng = std::mt19937_64;

}  // namespace tmvod
