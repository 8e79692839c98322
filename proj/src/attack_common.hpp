#pragma once

// Helpers shared by the attack implementations. Not installed.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "proxattack/attacks.hpp"
#include "proxattack/core.hpp"

namespace proxattack::detail {

/// Snapshot of the model counters; `finish` writes the difference into a result.
class CallCounter {
public:
  explicit CallCounter(const SegmentationModel& model)
      : model_(model), forwards_(model.forward_calls()), backwards_(model.backward_calls()) {}

  void finish(AttackResult& result) const {
    result.forwards = model_.forward_calls() - forwards_;
    result.backwards = model_.backward_calls() - backwards_;
  }

private:
  const SegmentationModel& model_;
  std::size_t forwards_;
  std::size_t backwards_;
};

inline TensorGrid add(const TensorGrid& x, const TensorGrid& delta) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + delta[i];
  return TensorGrid(x.shape(), std::move(out));
}

/// Clamps delta so that x + delta lies in [0, 1] exactly in floating point.
inline void clamp_to_image(std::span<double> delta, const TensorGrid& x) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double xi = x[i];
    double d = std::clamp(delta[i], -xi, 1.0 - xi);
    if (xi + d > 1.0) d = std::nextafter(d, -2.0);
    if (xi + d < 0.0) d = std::nextafter(d, 2.0);
    delta[i] = d;
  }
}

/// Clamps to the eps ball and then to the image box.
inline void project_ball_and_box(std::span<double> delta, const TensorGrid& x, double eps) {
  for (double& d : delta) d = std::clamp(d, -eps, eps);
  clamp_to_image(delta, x);
}

inline double linf(std::span<const double> v) {
  double m = 0.0;
  for (double a : v) m = std::max(m, std::abs(a));
  return m;
}

inline double l1(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += std::abs(a);
  return s;
}

inline double l2(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double a : v) {
    if (!std::isfinite(a)) throw NumericError(std::string(what) + ": non-finite gradient");
  }
}

}  // namespace proxattack::detail
