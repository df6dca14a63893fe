#include "wayrvs/layers.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace wayrvs {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : weight_(Shape{in_features, out_features}), bias_(Shape{out_features}) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& w : weight_.values()) w = dist(rng);
  weight_.set_requires_grad(true);
  bias_.set_requires_grad(true);
}

Var Linear::operator()(Var x) {
  Graph& g = x.graph();
  return add_row(matmul(x, g.param(weight_)), g.param(bias_));
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", &weight_});
  out.push_back({prefix + ".bias", &bias_});
}

LayerNorm::LayerNorm(std::size_t features) : gamma_(Shape{features}, 1.0), beta_(Shape{features}) {
  gamma_.set_requires_grad(true);
  beta_.set_requires_grad(true);
}

Var LayerNorm::operator()(Var x) {
  Graph& g = x.graph();
  return layer_norm(x, g.param(gamma_), g.param(beta_));
}

void LayerNorm::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".gamma", &gamma_});
  out.push_back({prefix + ".beta", &beta_});
}

Embedding::Embedding(std::size_t count, std::size_t features, Rng& rng)
    : table_(Shape{count, features}) {
  std::normal_distribution<double> dist(0.0, 0.02);
  for (double& w : table_.values()) w = dist(rng);
  table_.set_requires_grad(true);
}

Var Embedding::operator()(Graph& g, std::span<const std::size_t> indices) {
  return embedding(g.param(table_), indices);
}

void Embedding::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".table", &table_});
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t hidden_layers, std::size_t out,
         Rng& rng) {
  std::size_t width = in;
  for (std::size_t i = 0; i < hidden_layers; ++i) {
    layers_.emplace_back(width, hidden, rng);
    width = hidden;
  }
  layers_.emplace_back(width, out, rng);
}

Var Mlp::operator()(Var x) {
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) x = relu(layers_[i](x));
  return layers_.back()(x);
}

Tensor Mlp::infer(const Tensor& x) const {
  if (x.cols() != in_features()) {
    throw ShapeError("mlp: input shape " + shape_str(x.shape()) + " vs " + std::to_string(in_features()) +
                     " features");
  }
  using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Tensor out(Shape{x.rows(), out_features()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    RowVec h = Eigen::Map<const RowVec>(x.data() + r * x.cols(), static_cast<Eigen::Index>(x.cols()));
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Tensor& w = layers_[i].weight();
      const auto rows = static_cast<Eigen::Index>(w.dim(0));
      const auto cols = static_cast<Eigen::Index>(w.dim(1));
      RowVec next = h * Eigen::Map<const Mat>(w.data(), rows, cols);
      next += Eigen::Map<const RowVec>(layers_[i].bias().data(), cols);
      if (i + 1 < layers_.size()) next = next.cwiseMax(0.0);
      h = std::move(next);
    }
    std::copy(h.data(), h.data() + h.size(), out.data() + r * out.cols());
  }
  return out;
}

void Mlp::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(prefix + ".fc" + std::to_string(i), out);
  }
}

std::size_t count_parameters(const std::vector<NamedParam>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor->numel();
  return total;
}

}  // namespace wayrvs
