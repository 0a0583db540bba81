#include "bagcn/init.hpp"

#include <cmath>

namespace bagcn {

Tensor normal_init(Shape shape, Scalar stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<Scalar> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t.array()[i] = dist(rng);
  return t;
}

Tensor kaiming_init(Shape shape, Index fan_in, Rng& rng) {
  require(fan_in >= 1, "kaiming_init: fan_in must be positive");
  return normal_init(std::move(shape), std::sqrt(2.0 / Scalar(fan_in)), rng);
}

Tensor uniform_init(Shape shape, Scalar bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  for (Index i = 0; i < t.numel(); ++i) t.array()[i] = dist(rng);
  return t;
}

}  // namespace bagcn
