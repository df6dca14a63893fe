#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wayrvs/tensor.hpp"

namespace wayrvs {

enum class OpKind {
  kConstant,
  kParameter,
  kMatMul,
  kAdd,
  kAddRow,
  kMul,
  kScale,
  kRelu,
  kSoftmax,
  kLayerNorm,
  kEmbedding,
  kConcat,
  kDropout,
  kMse,
  kNll,
  kSum,
  kCausalAttention,
  kReshape,
};

const char* op_name(OpKind kind);

enum class Mode { kEval, kTrain };

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while the graph
// lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const;
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Tape of operations in topological (recording) order. A graph is built by a
// single forward pass and consumed by one call to backward().
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<int> inputs;
    Tensor value;
    std::vector<double> grad;  // empty until a gradient reaches the node
    bool needs_grad = false;
    Tensor* param = nullptr;
    std::vector<double> saved;
    std::vector<std::size_t> saved_index;
    BackwardFn backward;
  };

  explicit Graph(Mode mode = Mode::kEval, std::uint64_t dropout_seed = 0);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const noexcept { return mode_ == Mode::kTrain; }
  std::mt19937_64& rng() noexcept { return rng_; }

  Var constant(Tensor value);
  // Binds a parameter; backward() accumulates into parameter.grad().
  Var param(Tensor& parameter);

  const Tensor& value(Var v) const;
  // Gradient of the loss w.r.t. a node, available after backward(). Nodes
  // the loss does not depend on report zeros.
  std::vector<double> grad(Var v) const;

  void backward(Var loss);
  bool consumed() const noexcept { return consumed_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }

  // Records an op output. Inputs must already be on this graph.
  Var record(OpKind kind, std::vector<int> inputs, Tensor value,
             BackwardFn backward);
  // Zero-initialised gradient buffer of a node, allocated on first use.
  std::vector<double>& grad_buffer(int id);

  // Fingerprint of every ReLU input's sign seen so far; two forward passes
  // with equal fingerprints crossed no kink.
  std::uint64_t relu_pattern() const noexcept { return relu_pattern_; }
  void mix_relu_pattern(std::uint64_t bits) noexcept;

  Var wrap(int id) { return Var(this, id); }

 private:
  Mode mode_;
  std::mt19937_64 rng_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t relu_pattern_ = 1469598103934665603ULL;
};

// --- forward primitives ----------------------------------------------------
// Shapes: the last axis is contracted/normalised; leading axes are rows.

Var matmul(Var a, Var b);                  // (..., k) x (k, n) -> (..., n)
Var add(Var a, Var b);                     // exact shape match
Var add_row(Var x, Var row);               // (..., n) + (n)
Var mul(Var a, Var b);                     // elementwise, exact shape match
Var scale(Var x, double factor);
Var relu(Var x);
Var softmax(Var x);                        // over last axis
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var embedding(Var table, std::span<const std::size_t> indices);  // -> (n, d)
Var concat(std::span<const Var> parts);    // along last axis
// Inverted dropout; the identity in evaluation mode or when p == 0.
Var dropout(Var x, double p);
Var mse(Var prediction, Var target);       // mean over all elements
// Mean negative log-likelihood over rows whose target is >= 0; rows with a
// negative target are ignored.
Var nll(Var logits, std::span<const int> targets);
Var sum(Var x);
// Same row-major buffer under a new shape of equal element count.
Var reshape(Var x, Shape shape);
// Multi-head causal self-attention over packed (batch*seq, 3*d) q|k|v rows;
// returns (batch*seq, d). Attention probabilities receive dropout p.
Var causal_attention(Var qkv, std::size_t batch, std::size_t seq,
                     std::size_t heads, double p_drop);

}  // namespace wayrvs
