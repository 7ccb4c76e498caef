#include "sortsel/rows.hpp"

#include <algorithm>
#include <numeric>

namespace sortsel {

RowGroups group_rows(const Mat& m) {
  const int n = static_cast<int>(m.rows());
  const int p = static_cast<int>(m.cols());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](int a, int b) {
    for (int j = 0; j < p; ++j) {
      if (m(a, j) != m(b, j)) return m(a, j) < m(b, j);
    }
    return a < b;
  };
  auto same = [&](int a, int b) {
    for (int j = 0; j < p; ++j) {
      if (m(a, j) != m(b, j)) return false;
    }
    return true;
  };
  std::sort(order.begin(), order.end(), less);

  // Label runs by their first (smallest index) member, then renumber groups
  // in order of first occurrence.
  std::vector<int> first(n);
  for (int k = 0; k < n;) {
    int e = k + 1;
    while (e < n && same(order[k], order[e])) ++e;
    for (int t = k; t < e; ++t) first[order[t]] = order[k];
    k = e;
  }
  RowGroups g;
  g.group_of.assign(n, -1);
  std::vector<int> id_of_first(n, -1);
  for (int i = 0; i < n; ++i) {
    int& id = id_of_first[first[i]];
    if (id < 0) {
      id = g.count();
      g.representative.push_back(i);
    }
    g.group_of[i] = id;
  }
  return g;
}

Vec group_totals(const RowGroups& groups, const Vec& weights) {
  Vec tot = Vec::Zero(groups.count());
  for (std::size_t i = 0; i < groups.group_of.size(); ++i) {
    tot(groups.group_of[i]) += weights.size() ? weights(static_cast<Eigen::Index>(i)) : 1.0;
  }
  return tot;
}

}  // namespace sortsel
