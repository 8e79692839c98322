#pragma once

#include "proxattack/core.hpp"

namespace proxattack {

/// Per-pixel cross-entropy averaged over the mask. When `upstream` is given
/// it receives dLoss/dlogits, shape (K, H, W).
double masked_cross_entropy(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask,
                            TensorGrid* upstream = nullptr);

/// Mean of the DLR constraint over the mask (dlr_plus, or dlr_targeted when
/// targeted). Gradient w.r.t. logits written to `upstream` when given.
double masked_dlr(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask,
                  bool targeted, TensorGrid* upstream = nullptr);

/// Mean logit margin over the mask: z_y - max_{j != y} z_j (untargeted) or
/// max_{j != t} z_j - z_t (targeted). Positive while the pixel is not fooled.
double masked_logit_margin(const TensorGrid& logits, const LabelMap& labels, const BinaryMask& mask,
                           bool targeted, TensorGrid* upstream = nullptr);

}  // namespace proxattack
