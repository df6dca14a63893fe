#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "wayrvs/autodiff.hpp"

namespace wayrvs {

using Rng = std::mt19937_64;

// splitmix64 mix of (base, stream); used to derive independent sub-seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias. Weight stored
// (in, out) so the forward pass is x * W + b.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  Var operator()(Var x);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t features);

  Var operator()(Var x);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

 private:
  Tensor gamma_;
  Tensor beta_;
};

// Lookup table initialised from N(0, 0.02).
class Embedding {
 public:
  Embedding() = default;
  Embedding(std::size_t count, std::size_t features, Rng& rng);

  Var operator()(Graph& g, std::span<const std::size_t> indices);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  std::size_t count() const { return table_.dim(0); }

 private:
  Tensor table_;
};

// Feed-forward ReLU network: `hidden_layers` hidden layers of width `hidden`.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t hidden_layers, std::size_t out, Rng& rng);

  Var operator()(Var x);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  std::size_t in_features() const { return layers_.front().in_features(); }
  std::size_t out_features() const { return layers_.back().out_features(); }
  const std::vector<Linear>& layers() const { return layers_; }
  // Graph-free forward pass, one row at a time so that a batch query is
  // bit-identical to the stacked single-row queries.
  Tensor infer(const Tensor& x) const;

 private:
  std::vector<Linear> layers_;
};

std::size_t count_parameters(const std::vector<NamedParam>& params);

}  // namespace wayrvs
