#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bevkd::testing {

std::string GradCheckResult::describe() const {
  std::ostringstream os;
  os << "max rel error " << max_rel_error << " at input " << worst_input << " element " << worst_index
     << " (analytic " << analytic << ", numeric " << numeric << ", " << checked << " entries)";
  return os.str();
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

namespace {

double evaluate(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return build(tape, leaves).item();
}

}  // namespace

GradCheckResult check_gradients(const LossBuilder& build, const std::vector<Tensor>& inputs, double h) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    Var loss = build(tape, leaves);
    tape.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto g = leaves[i].grad();
      if (g.empty()) g.assign(inputs[i].numel(), 0.0);
      analytic.push_back(std::move(g));
    }
  }
  GradCheckResult r;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t k = 0; k < inputs[i].numel(); ++k) {
      const double x0 = inputs[i].data[k];
      probe[i].data[k] = x0 + h;
      const double fp = evaluate(build, probe);
      probe[i].data[k] = x0 - h;
      const double fm = evaluate(build, probe);
      probe[i].data[k] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[i][k], numeric);
      ++r.checked;
      if (err > r.max_rel_error || r.checked == 1) {
        if (err >= r.max_rel_error) {
          r.max_rel_error = err;
          r.worst_input = i;
          r.worst_index = k;
          r.analytic = analytic[i][k];
          r.numeric = numeric;
        }
      }
    }
  }
  return r;
}

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace bevkd::testing
