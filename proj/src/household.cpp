#include "sortsel/household.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sortsel {

HouseholdData HouseholdData::subset(const std::vector<int>& rows) const {
  HouseholdData out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.d_w.resize(n);
  out.d_h.resize(n);
  out.y_w.resize(n);
  out.y_h.resize(n);
  out.weight.resize(n);
  out.period.resize(rows.size());
  out.x.resize(n, x.cols());
  out.z_only.resize(n, z_only.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    const int i = rows[k];
    out.d_w(k) = d_w(i);
    out.d_h(k) = d_h(i);
    out.y_w(k) = y_w(i);
    out.y_h(k) = y_h(i);
    out.weight(k) = weight(i);
    out.period[k] = period[i];
    out.x.row(k) = x.row(i);
    out.z_only.row(k) = z_only.row(i);
  }
  out.x_names = x_names;
  out.z_only_names = z_only_names;
  return out;
}

void HouseholdData::validate() const {
  const int n = size();
  if (d_h.size() != n || y_w.size() != n || y_h.size() != n || weight.size() != n ||
      static_cast<int>(period.size()) != n || x.rows() != n || z_only.rows() != n) {
    throw std::invalid_argument("household data: column lengths differ");
  }
  if (static_cast<int>(x_names.size()) != x.cols() ||
      static_cast<int>(z_only_names.size()) != z_only.cols()) {
    throw std::invalid_argument("household data: covariate names do not match columns");
  }
  for (int i = 0; i < n; ++i) {
    const std::string at = "household row " + std::to_string(i) + ": ";
    for (double d : {d_w(i), d_h(i)}) {
      if (d != 0.0 && d != 1.0) throw std::invalid_argument(at + "participation must be 0 or 1");
    }
    if (!(weight(i) >= 0.0) || !std::isfinite(weight(i))) {
      throw std::invalid_argument(at + "weight must be finite and nonnegative");
    }
    if (works(i)) {
      if (!(y_w(i) > 0.0) || !std::isfinite(y_w(i))) {
        throw std::invalid_argument(at + "both spouses work but y_w is missing or not positive");
      }
      if (!(y_h(i) > 0.0) || !std::isfinite(y_h(i))) {
        throw std::invalid_argument(at + "both spouses work but y_h is missing or not positive");
      }
    } else if (!std::isnan(y_w(i)) || !std::isnan(y_h(i))) {
      throw std::invalid_argument(at + "wage present although a spouse does not work");
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (!std::isfinite(x(i, j))) throw std::invalid_argument(at + x_names[j] + " is not finite");
    }
    for (Eigen::Index j = 0; j < z_only.cols(); ++j) {
      if (!std::isfinite(z_only(i, j))) {
        throw std::invalid_argument(at + z_only_names[j] + " is not finite");
      }
    }
  }
}

namespace {

std::vector<int> resolve(const HouseholdData& data, const std::vector<std::string>& columns) {
  std::vector<int> idx;
  if (columns.empty()) {
    for (int j = 0; j < data.x.cols(); ++j) idx.push_back(j);
    return idx;
  }
  for (const auto& name : columns) {
    const auto it = std::find(data.x_names.begin(), data.x_names.end(), name);
    if (it == data.x_names.end()) {
      throw std::invalid_argument("wage design: unknown X column '" + name + "'");
    }
    idx.push_back(static_cast<int>(it - data.x_names.begin()));
  }
  return idx;
}

}  // namespace

Mat wage_design(const HouseholdData& data, const std::vector<std::string>& columns) {
  const std::vector<int> idx = resolve(data, columns);
  Mat d(data.size(), static_cast<Eigen::Index>(idx.size()) + 1);
  d.col(0).setOnes();
  for (std::size_t k = 0; k < idx.size(); ++k) d.col(k + 1) = data.x.col(idx[k]);
  return d;
}

Mat participation_design(const HouseholdData& data) {
  Mat d(data.size(), 1 + data.x.cols() + data.z_only.cols());
  d << Vec::Ones(data.size()), data.x, data.z_only;
  return d;
}

std::vector<int> wage_columns_in_participation(const HouseholdData& data,
                                               const std::vector<std::string>& columns) {
  std::vector<int> out{0};
  for (int j : resolve(data, columns)) out.push_back(j + 1);
  return out;
}

}  // namespace sortsel
