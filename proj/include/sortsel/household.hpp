#pragma once

// Column-oriented household sample. One row per married couple.
//
// Observation rule: wages are observed (finite) exactly when both spouses
// work; otherwise they are NaN.

#include <string>
#include <vector>

#include "sortsel/mvn.hpp"

namespace sortsel {

struct HouseholdData {
  Vec d_w, d_h;    // participation, 0 or 1
  Vec y_w, y_h;    // wages; NaN unless d_w = d_h = 1
  Vec weight;      // nonnegative
  std::vector<int> period;
  Mat x;           // wage covariates (no intercept)
  Mat z_only;      // excluded participation covariates (no intercept)
  std::vector<std::string> x_names;
  std::vector<std::string> z_only_names;

  int size() const { return static_cast<int>(d_w.size()); }
  bool works(int i) const { return d_w(i) > 0.5 && d_h(i) > 0.5; }

  /// Rows that satisfy `pred(i)`, preserving order.
  template <class Pred>
  std::vector<int> rows_where(Pred pred) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      if (pred(i)) out.push_back(i);
    }
    return out;
  }
  std::vector<int> working() const {
    return rows_where([this](int i) { return works(i); });
  }
  std::vector<int> in_period(int p) const {
    return rows_where([&](int i) { return period[i] == p; });
  }

  HouseholdData subset(const std::vector<int>& rows) const;

  /// Throws std::invalid_argument naming the first offending row.
  void validate() const;
};

/// Which X columns enter each spouse's wage index. Empty means all of X.
/// Participation indices always use [1, X, Z-only] for both spouses.
struct DesignSpec {
  std::vector<std::string> wage_w;
  std::vector<std::string> wage_h;
};

/// [1, selected X columns] for one spouse.
Mat wage_design(const HouseholdData& data, const std::vector<std::string>& columns);
/// [1, X, Z-only].
Mat participation_design(const HouseholdData& data);
/// Column positions of `columns` inside the participation design.
std::vector<int> wage_columns_in_participation(const HouseholdData& data,
                                               const std::vector<std::string>& columns);

}  // namespace sortsel
