#pragma once

// Central finite-difference gradient checking. The oracle is independent of
// the backward pass it verifies: it perturbs leaf values and re-runs the
// forward function with no tape.

#include <functional>

#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

// f re-evaluates the scalar objective from the current values of `leaves`.
// Checked coordinates per leaf can be capped (coords_per_leaf > 0) with a
// seeded deterministic sample; -1 checks every coordinate.
//
// Returns max over checked coordinates of
//   |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
template <Scalar T>
double finite_difference_gradcheck(const std::function<Tensor<T>()>& f,
                                   std::vector<Tensor<T>> leaves, T step,
                                   int coords_per_leaf = -1,
                                   std::uint64_t seed = 0x9e3779b9) {
  if (step <= T(0)) throw ContractError("gradcheck: step must be positive");

  // Determinism gate: two tape-free evaluations must agree bitwise.
  const T probe1 = f().item();
  const T probe2 = f().item();
  if (std::memcmp(&probe1, &probe2, sizeof(T)) != 0) {
    throw ContractError("gradcheck: objective is not deterministic");
  }

  for (auto& leaf : leaves) leaf.set_requires_grad(true);
  for (auto& leaf : leaves) leaf.zero_grad();
  Tape<T> tape;
  {
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = f();
    if (loss.size() != 1) throw ContractError("gradcheck: objective must be scalar");
    tape.backward(loss);
  }

  double max_rel = 0.0;
  Rng pick(seed);
  for (auto& leaf : leaves) {
    const std::int64_t n = leaf.size();
    std::vector<std::int64_t> coords;
    if (coords_per_leaf <= 0 || coords_per_leaf >= n) {
      coords.resize(n);
      for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < coords_per_leaf; ++i)
        coords.push_back(pick.uniform_int(0, n - 1));
    }
    for (std::int64_t ci : coords) {
      const T keep = leaf.values()[ci];
      leaf.values()[ci] = keep + step;
      const double up = static_cast<double>(f().item());
      leaf.values()[ci] = keep - step;
      const double down = static_cast<double>(f().item());
      leaf.values()[ci] = keep;
      const double numeric = (up - down) / (2.0 * static_cast<double>(step));
      const double analytic = static_cast<double>(leaf.grad()[ci]);
      const double rel = std::abs(analytic - numeric) /
                         std::max(1e-12, std::abs(analytic) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace voxfuse
