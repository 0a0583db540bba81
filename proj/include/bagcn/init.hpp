#pragma once

#include "bagcn/tensor.hpp"

#include <random>

namespace bagcn {

using Rng = std::mt19937_64;

/// Zero-mean normal with std sqrt(2 / fan_in); the default for projections
/// and convolutions.
Tensor kaiming_init(Shape shape, Index fan_in, Rng& rng);

/// Uniform in [-bound, bound]; used for recurrent weights with
/// bound = 1 / sqrt(hidden).
Tensor uniform_init(Shape shape, Scalar bound, Rng& rng);

Tensor normal_init(Shape shape, Scalar stddev, Rng& rng);

}  // namespace bagcn
