#pragma once

#include <cstdint>
#include <span>

namespace pfrouter {

/// Mann–Whitney ROC-AUC with average ranks for tied scores. Throws DataError
/// when only one class is present.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Mean squared error between probabilities and 0/1 outcomes.
double brier(std::span<const double> probabilities, std::span<const std::uint8_t> labels);

}  // namespace pfrouter
