#pragma once

#include <filesystem>
#include <optional>

#include "proxattack/core.hpp"

namespace proxattack {

// Container: one JSON header line, e.g. {"dims":[c,h,w],"dtype":"f32"}, then
// little-endian row-major payload. Labels use dtype "u16" with dims [h,w]
// and an optional "num_classes" key. Masks are labels with K = 2.

TensorGrid load_tensor(const std::filesystem::path& path);
void save_tensor(const std::filesystem::path& path, const TensorGrid& tensor);

/// K comes from the header when present, otherwise from `num_classes`,
/// otherwise max label + 1 (at least 2).
LabelMap load_labels(const std::filesystem::path& path,
                     std::optional<std::size_t> num_classes = std::nullopt);
void save_labels(const std::filesystem::path& path, const LabelMap& labels);

BinaryMask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const BinaryMask& mask);

}  // namespace proxattack
