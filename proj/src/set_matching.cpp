#include "bevkd/set_matching.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

namespace bevkd {

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> costs)
    : rows_(rows), cols_(cols), costs_(std::move(costs)) {
  if (costs_.size() != rows_ * cols_) throw std::invalid_argument("CostMatrix: size mismatch");
  for (double c : costs_) {
    if (!std::isfinite(c)) throw std::invalid_argument("CostMatrix: non-finite cost");
  }
}

CostMatrix::CostMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), costs_(rows * cols, fill) {}

long Assignment::col_for_row(std::size_t row) const {
  for (const auto& [r, c] : pairs)
    if (r == row) return static_cast<long>(c);
  return -1;
}

long Assignment::row_for_col(std::size_t col) const {
  for (const auto& [r, c] : pairs)
    if (c == col) return static_cast<long>(r);
  return -1;
}

double normalized_box_l1(const BevBox& a, const BevBox& b, double extent) {
  const auto va = normalized_box_vector(a, extent);
  const auto vb = normalized_box_vector(b, extent);
  double s = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) s += std::fabs(va[i] - vb[i]);
  return s;
}

double pair_match_cost(const ClassDistribution& teacher_class, const BevBox& teacher_box,
                       const ClassDistribution& student_class, const BevBox& student_box,
                       double extent) {
  if (teacher_class.size() != student_class.size()) {
    throw std::invalid_argument("pair_match_cost: class distributions differ in length");
  }
  const double p = student_class[teacher_class.argmax()];
  return -std::log(std::max(p, kMatchProbFloor)) + normalized_box_l1(teacher_box, student_box, extent);
}

namespace {

double tie_tolerance(const CostMatrix& m) {
  double mx = 1.0;
  for (double c : m.data()) mx = std::max(mx, std::fabs(c));
  return 1e-9 * mx;
}

Assignment finalize(const CostMatrix& costs, std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  Assignment a;
  a.total_cost = 0.0;
  for (const auto& [r, c] : pairs) a.total_cost += costs(r, c);
  a.pairs = std::move(pairs);
  return a;
}

}  // namespace

Assignment hungarian_assign(const CostMatrix& costs) {
  if (costs.empty()) return {};
  const std::size_t R = costs.rows(), C = costs.cols();
  const std::size_t n = std::max(R, C);
  double pad = 0.0;
  for (double c : costs.data()) pad = std::max(pad, std::fabs(c));
  pad += 1.0;
  auto cost = [&](std::size_t i, std::size_t j) { return (i < R && j < C) ? costs(i, j) : pad; };

  // Shortest augmenting path formulation, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  // row_of[col], col_of[row], 0-based over the padded square problem.
  std::vector<std::size_t> col_of(n), row_of(n);
  for (std::size_t j = 1; j <= n; ++j) {
    row_of[j - 1] = p[j] - 1;
    col_of[p[j] - 1] = j - 1;
  }

  // Every optimal assignment uses only edges that are tight under the final
  // potentials, so the lexicographically smallest optimum is the
  // lexicographically smallest perfect matching of the tight subgraph.
  const double tol = tie_tolerance(costs) * static_cast<double>(n);
  auto tight = [&](std::size_t i, std::size_t j) {
    return std::fabs(cost(i, j) - u[i + 1] - v[j + 1]) <= tol;
  };
  std::vector<char> fixed_col(n, 0);
  std::vector<char> visited(n, 0);
  // Finds an alternating path that rematches `row` to some column reachable
  // through tight edges, ending in `target` (the column left free).
  std::function<bool(std::size_t, std::size_t)> reroute = [&](std::size_t row, std::size_t target) {
    for (std::size_t j = 0; j < n; ++j) {
      if (fixed_col[j] || visited[j] || !tight(row, j)) continue;
      visited[j] = 1;
      if (j == target || reroute(row_of[j], target)) {
        col_of[row] = j;
        row_of[j] = row;
        return true;
      }
    }
    return false;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (fixed_col[j] || !tight(i, j)) continue;
      if (col_of[i] == j) break;
      const std::size_t freed = col_of[i];
      const std::size_t displaced = row_of[j];
      std::fill(visited.begin(), visited.end(), 0);
      visited[j] = 1;
      // Temporarily commit (i, j) and try to rehome the displaced row.
      fixed_col[j] = 1;
      const auto saved_col_of = col_of;
      const auto saved_row_of = row_of;
      col_of[i] = j;
      row_of[j] = i;
      row_of[freed] = displaced;  // placeholder owner until rerouted
      if (reroute(displaced, freed)) break;
      col_of = saved_col_of;
      row_of = saved_row_of;
      fixed_col[j] = 0;
    }
    fixed_col[col_of[i]] = 1;
  }

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < R; ++i)
    if (col_of[i] < C) pairs.emplace_back(i, col_of[i]);
  return finalize(costs, std::move(pairs));
}

Assignment brute_force_assign(const CostMatrix& costs) {
  if (costs.empty()) return {};
  const std::size_t R = costs.rows(), C = costs.cols();
  if (std::min(R, C) > 8) {
    throw std::invalid_argument("brute_force_assign: min dimension " + std::to_string(std::min(R, C)) +
                                " exceeds 8");
  }
  const std::size_t need = std::min(R, C);
  const double tol = tie_tolerance(costs) * static_cast<double>(std::max(R, C));
  constexpr std::size_t kSkip = std::numeric_limits<std::size_t>::max();

  std::vector<std::size_t> choice(R, kSkip), best_choice;
  std::vector<char> used(C, 0);
  double best = std::numeric_limits<double>::infinity();

  // Rows in order; columns ascending then "unmatched", which enumerates pair
  // lists in lexicographic order, so the first optimum found wins ties.
  std::function<void(std::size_t, std::size_t, double)> visit = [&](std::size_t row, std::size_t matched,
                                                                     double partial) {
    if (matched == need) {
      if (partial < best - tol) {
        best = partial;
        best_choice = choice;
      }
      return;
    }
    if (row == R) return;
    for (std::size_t j = 0; j < C; ++j) {
      if (used[j]) continue;
      used[j] = 1;
      choice[row] = j;
      visit(row + 1, matched + 1, partial + costs(row, j));
      choice[row] = kSkip;
      used[j] = 0;
    }
    if (R - row - 1 >= need - matched) visit(row + 1, matched, partial);
  };
  visit(0, 0, 0.0);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < R; ++i)
    if (best_choice[i] != kSkip) pairs.emplace_back(i, best_choice[i]);
  return finalize(costs, std::move(pairs));
}

CostMatrix build_cost_matrix(const PredictionSet& teacher, const PredictionSet& student, double extent) {
  CostMatrix m(teacher.size(), student.size());
  for (std::size_t i = 0; i < teacher.size(); ++i)
    for (std::size_t j = 0; j < student.size(); ++j)
      m(i, j) = pair_match_cost(teacher.class_dists[i], teacher.boxes[i], student.class_dists[j],
                                student.boxes[j], extent);
  return m;
}

}  // namespace bevkd
