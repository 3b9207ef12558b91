#pragma once

// One-to-one correspondence between prediction sets.

#include <cstddef>
#include <utility>
#include <vector>

#include "bevkd/types.hpp"

namespace bevkd {

class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> costs);
  CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0 || cols_ == 0; }
  double operator()(std::size_t r, std::size_t c) const { return costs_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return costs_[r * cols_ + c]; }
  const std::vector<double>& data() const { return costs_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> costs_;
};

struct Assignment {
  /// (row, col) pairs sorted by row.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;

  /// Column matched to `row`, or -1.
  long col_for_row(std::size_t row) const;
  /// Row matched to `col`, or -1.
  long row_for_col(std::size_t col) const;
};

/// Floor on probabilities entering -log in the match cost.
inline constexpr double kMatchProbFloor = 1e-12;

/// L1 distance between normalized box vectors.
double normalized_box_l1(const BevBox& a, const BevBox& b, double extent);

/// -log(max(p, 1e-12)) + L1(normalized boxes), where p is the student's
/// probability at the teacher's argmax class.
double pair_match_cost(const ClassDistribution& teacher_class, const BevBox& teacher_box,
                       const ClassDistribution& student_class, const BevBox& student_box,
                       double extent);

/// Minimum-cost assignment (Kuhn-Munkres with shortest augmenting paths).
/// Rectangular inputs are padded with a constant; among optimal assignments
/// the lexicographically smallest pair list is returned.
Assignment hungarian_assign(const CostMatrix& costs);

/// Exhaustive enumeration with the same optimum and tie rule; requires
/// min(rows, cols) <= 8.
Assignment brute_force_assign(const CostMatrix& costs);

/// costs[i][j] = pair_match_cost(teacher i, student j).
CostMatrix build_cost_matrix(const PredictionSet& teacher, const PredictionSet& student,
                             double extent);

}  // namespace bevkd
