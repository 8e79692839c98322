#include "proxattack/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "proxattack/objective.hpp"

namespace proxattack {
namespace {

void check_shapes(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask) {
  const Shape& s = logits.shape();
  if (labels.height() != s.height || labels.width() != s.width || mask.height() != s.height ||
      mask.width() != s.width) {
    throw ConfigError("loss: labels/mask do not match logits " + s.str());
  }
}

}  // namespace

double masked_cross_entropy(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask,
                            TensorGrid* upstream) {
  check_shapes(logits, labels, mask);
  const Shape& s = logits.shape();
  const double scale = 1.0 / static_cast<double>(mask.count());
  if (upstream) *upstream = TensorGrid(s);
  std::vector<double> prob(s.channels);
  double total = 0.0;
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    if (!mask[i]) continue;
    double top = logits.at(0, i);
    for (std::size_t k = 1; k < s.channels; ++k) top = std::max(top, logits.at(k, i));
    double sum = 0.0;
    for (std::size_t k = 0; k < s.channels; ++k) {
      prob[k] = std::exp(logits.at(k, i) - top);
      sum += prob[k];
    }
    const std::size_t y = labels[i];
    total += (std::log(sum) + top - logits.at(y, i)) * scale;
    if (upstream) {
      for (std::size_t k = 0; k < s.channels; ++k) {
        upstream->at(k, i) = (prob[k] / sum - (k == y ? 1.0 : 0.0)) * scale;
      }
    }
  }
  return total;
}

double masked_dlr(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask,
                  bool targeted, TensorGrid* upstream) {
  check_shapes(logits, labels, mask);
  const Shape& s = logits.shape();
  const double scale = 1.0 / static_cast<double>(mask.count());
  if (upstream) *upstream = TensorGrid(s);
  std::vector<double> z(s.channels), g(s.channels);
  double total = 0.0;
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t k = 0; k < s.channels; ++k) z[k] = logits.at(k, i);
    total += constraint_with_grad(z, labels[i], targeted, g) * scale;
    if (upstream) {
      for (std::size_t k = 0; k < s.channels; ++k) upstream->at(k, i) = g[k] * scale;
    }
  }
  return total;
}

double masked_logit_margin(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask,
                           bool targeted, TensorGrid* upstream) {
  check_shapes(logits, labels, mask);
  const Shape& s = logits.shape();
  const double scale = 1.0 / static_cast<double>(mask.count());
  const double sign = targeted ? -1.0 : 1.0;
  if (upstream) *upstream = TensorGrid(s);
  double total = 0.0;
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    if (!mask[i]) continue;
    const std::size_t y = labels[i];
    std::size_t runner = y == 0 ? 1 : 0;
    for (std::size_t k = 0; k < s.channels; ++k) {
      if (k != y && logits.at(k, i) > logits.at(runner, i)) runner = k;
    }
    total += sign * (logits.at(y, i) - logits.at(runner, i)) * scale;
    if (upstream) {
      upstream->at(y, i) = sign * scale;
      upstream->at(runner, i) = -sign * scale;
    }
  }
  return total;
}

}  // namespace proxattack
