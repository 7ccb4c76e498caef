#pragma once

// Grouping of identical design rows. Likelihoods over discrete covariates
// are evaluated once per distinct row and weighted by the group total.

#include <vector>

#include "sortsel/mvn.hpp"

namespace sortsel {

struct RowGroups {
  std::vector<int> group_of;        // observation -> group
  std::vector<int> representative;  // group -> first observation
  int count() const { return static_cast<int>(representative.size()); }
};

/// Groups rows of `m` that are bitwise equal. Group order follows the first
/// occurrence in the input, so the result is deterministic.
RowGroups group_rows(const Mat& m);

/// Sums `weights` (empty = unit weights) within groups.
Vec group_totals(const RowGroups& groups, const Vec& weights);

}  // namespace sortsel
