#include "wayrvs/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace wayrvs {

bool GradCheckReport::passed() const {
  return std::all_of(blocks.begin(), blocks.end(), [](const auto& b) { return b.passed; });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& b : blocks) worst = std::max(worst, b.max_rel_error);
  return worst;
}

namespace {

struct Evaluation {
  double loss;
  std::uint64_t pattern;
};

Evaluation evaluate(const LossBuilder& build, const GradCheckOptions& options) {
  Graph g(options.mode, options.dropout_seed);
  Var loss = build(g);
  return {loss.value().item(), g.relu_pattern()};
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, const std::vector<NamedParam>& params,
                                  const GradCheckOptions& options) {
  for (const auto& p : params) p.tensor->zero_grad();
  std::uint64_t base_pattern = 0;
  {
    Graph g(options.mode, options.dropout_seed);
    Var l = loss(g);
    base_pattern = g.relu_pattern();
    g.backward(l);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    auto gr = p.tensor->grad();
    analytic.emplace_back(gr.begin(), gr.end());
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = *params[k].tensor;
    GradCheckBlock block;
    block.name = params[k].name;
    std::vector<std::size_t> order(w.numel());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t want = std::min(options.coords_per_block, w.numel());
    for (std::size_t idx : order) {
      if (block.checked == want) break;
      const double original = w[idx];
      w[idx] = original + options.step;
      const Evaluation plus = evaluate(loss, options);
      w[idx] = original - options.step;
      const Evaluation minus = evaluate(loss, options);
      w[idx] = original;
      if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
        ++block.skipped_kinks;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * options.step);
      const double a = analytic[k][idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      block.max_rel_error = std::max(block.max_rel_error, std::abs(a - numeric) / denom);
      ++block.checked;
    }
    block.passed = block.max_rel_error < options.tolerance && block.checked > 0;
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace wayrvs
