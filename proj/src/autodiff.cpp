#include "wayrvs/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace wayrvs {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Graph& same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different graphs");
  }
  return a.graph();
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
}

Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kConcat: return "concat";
    case OpKind::kDropout: return "dropout";
    case OpKind::kMse: return "mse";
    case OpKind::kNll: return "nll";
    case OpKind::kSum: return "sum";
    case OpKind::kCausalAttention: return "causal_attention";
    case OpKind::kReshape: return "reshape";
  }
  return "unknown";
}

Graph& Var::graph() const {
  if (graph_ == nullptr) throw std::logic_error("use of an unbound Var");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(*this); }

Graph::Graph(Mode mode, std::uint64_t dropout_seed) : mode_(mode), rng_(dropout_seed) {}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NumericFault("constant: non-finite input");
  Node n;
  n.kind = OpKind::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Tensor& parameter) {
  if (!parameter.all_finite()) throw NumericFault("parameter: non-finite value");
  Node n;
  n.kind = OpKind::kParameter;
  n.value = parameter;  // snapshot; ops read node values only
  n.value.clear_grad();
  n.needs_grad = parameter.requires_grad();
  n.param = &parameter;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Tensor& Graph::value(Var v) const {
  if (v.graph_ != this) throw std::invalid_argument("Var belongs to another graph");
  return node(v.id()).value;
}

std::vector<double> Graph::grad(Var v) const {
  const Node& n = node(v.id());
  if (n.grad.empty()) return std::vector<double>(n.value.numel(), 0.0);
  return n.grad;
}

Var Graph::record(OpKind kind, std::vector<int> inputs, Tensor value, BackwardFn backward) {
  if (consumed_) throw std::logic_error(std::string(op_name(kind)) + ": graph already consumed");
  if (!value.all_finite()) {
    throw NumericFault(std::string(op_name(kind)) + ": non-finite result");
  }
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  for (int id : inputs) n.needs_grad = n.needs_grad || node(id).needs_grad;
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

std::vector<double>& Graph::grad_buffer(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

void Graph::mix_relu_pattern(std::uint64_t bits) noexcept {
  relu_pattern_ ^= bits;
  relu_pattern_ *= 1099511628211ULL;
}

void Graph::backward(Var loss) {
  if (consumed_) throw std::logic_error("backward: graph already consumed");
  const Node& root = node(loss.id());
  if (root.value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  consumed_ = true;
  grad_buffer(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.param != nullptr) {
      if (!n.param->has_grad()) n.param->zero_grad();
      auto dst = n.param->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      if (!std::all_of(dst.begin(), dst.end(), [](double g) { return std::isfinite(g); })) {
        throw NumericFault("backward: non-finite gradient for a parameter");
      }
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(av.rows());
  const auto inner = static_cast<Eigen::Index>(av.cols());
  const auto cols = static_cast<Eigen::Index>(bv.dim(1));
  Tensor out(with_last(av.shape(), bv.dim(1)));
  MutMap(out.data(), rows, cols).noalias() =
      ConstMap(av.data(), rows, inner) * ConstMap(bv.data(), inner, cols);
  return g.record(OpKind::kMatMul, {a.id(), b.id()}, std::move(out),
                  [rows, inner, cols](Graph& gr, int id) {
                    const auto& n = gr.node(id);
                    const int ia = n.inputs[0];
                    const int ib = n.inputs[1];
                    ConstMap dout(n.grad.data(), rows, cols);
                    if (gr.node(ia).needs_grad) {
                      auto& ga = gr.grad_buffer(ia);
                      MutMap(ga.data(), rows, inner).noalias() +=
                          dout * ConstMap(gr.node(ib).value.data(), inner, cols).transpose();
                    }
                    if (gr.node(ib).needs_grad) {
                      auto& gb = gr.grad_buffer(ib);
                      MutMap(gb.data(), inner, cols).noalias() +=
                          ConstMap(gr.node(ia).value.data(), rows, inner).transpose() * dout;
                    }
                  });
}

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b, "add");
  require_same_shape("add", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return g.record(OpKind::kAdd, {a.id(), b.id()}, std::move(out), [](Graph& gr, int id) {
    const auto& n = gr.node(id);
    for (int in : n.inputs) {
      if (!gr.node(in).needs_grad) continue;
      auto& gi = gr.grad_buffer(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += n.grad[i];
    }
  });
}

Var add_row(Var x, Var row) {
  Graph& g = same_graph(x, row, "add_row");
  const Tensor& rv = row.value();
  if (rv.rank() != 1 || rv.numel() != x.value().cols()) {
    throw ShapeError("add_row: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(rv.shape()));
  }
  Tensor out = x.value();
  const std::size_t cols = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += rv[c];
  }
  return g.record(OpKind::kAddRow, {x.id(), row.id()}, std::move(out),
                  [cols](Graph& gr, int id) {
                    const auto& n = gr.node(id);
                    if (gr.node(n.inputs[0]).needs_grad) {
                      auto& gx = gr.grad_buffer(n.inputs[0]);
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i];
                    }
                    if (gr.node(n.inputs[1]).needs_grad) {
                      auto& gb = gr.grad_buffer(n.inputs[1]);
                      const std::size_t rows = n.grad.size() / cols;
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += n.grad[r * cols + c];
                      }
                    }
                  });
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b, "mul");
  require_same_shape("mul", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return g.record(OpKind::kMul, {a.id(), b.id()}, std::move(out), [](Graph& gr, int id) {
    const auto& n = gr.node(id);
    const int ia = n.inputs[0];
    const int ib = n.inputs[1];
    if (gr.node(ia).needs_grad) {
      auto& ga = gr.grad_buffer(ia);
      const Tensor& bv2 = gr.node(ib).value;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * bv2[i];
    }
    if (gr.node(ib).needs_grad) {
      auto& gb = gr.grad_buffer(ib);
      const Tensor& av2 = gr.node(ia).value;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * av2[i];
    }
  });
}

Var scale(Var x, double factor) {
  Graph& g = x.graph();
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return g.record(OpKind::kScale, {x.id()}, std::move(out), [factor](Graph& gr, int id) {
    const auto& n = gr.node(id);
    auto& gx = gr.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * n.grad[i];
  });
}

Var reshape(Var x, Shape shape) {
  Graph& g = x.graph();
  if (shape_numel(shape) != x.value().numel()) {
    throw ShapeError("reshape: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(shape));
  }
  Tensor out = x.value().reshaped(std::move(shape));
  return g.record(OpKind::kReshape, {x.id()}, std::move(out), [](Graph& gr, int id) {
    const auto& n = gr.node(id);
    auto& gx = gr.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i];
  });
}

Var relu(Var x) {
  Graph& g = x.graph();
  Tensor out = x.value();
  std::uint64_t bits = 0;
  int nbits = 0;
  for (double& v : out.values()) {
    const bool positive = v > 0.0;
    bits = (bits << 1) | (positive ? 1u : 0u);
    if (++nbits == 64) {
      g.mix_relu_pattern(bits);
      bits = 0;
      nbits = 0;
    }
    if (!positive) v = 0.0;
  }
  g.mix_relu_pattern(bits ^ static_cast<std::uint64_t>(nbits));
  return g.record(OpKind::kRelu, {x.id()}, std::move(out), [](Graph& gr, int id) {
    const auto& n = gr.node(id);
    const Tensor& in = gr.node(n.inputs[0]).value;
    auto& gx = gr.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (in[i] > 0.0) gx[i] += n.grad[i];
    }
  });
}

Var softmax(Var x) {
  Graph& g = x.graph();
  Tensor out = x.value();
  const std::size_t cols = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
  return g.record(OpKind::kSoftmax, {x.id()}, std::move(out), [cols](Graph& gr, int id) {
    const auto& n = gr.node(id);
    auto& gx = gr.grad_buffer(n.inputs[0]);
    const std::size_t rows = gx.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * cols;
      const double* dy = n.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (dy[c] - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = same_graph(x, gamma, "layer_norm");
  same_graph(x, beta, "layer_norm");
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (gamma.value().numel() != cols || beta.value().numel() != cols) {
    throw ShapeError("layer_norm: shape mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(gamma.shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.numel());
  std::vector<double> rstd(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (row[c] - mean) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = gv[c] * h + bv[c];
    }
  }
  Var y = g.record(OpKind::kLayerNorm, {x.id(), gamma.id(), beta.id()}, std::move(out),
                   [rows, cols](Graph& gr, int id) {
                     auto& n = gr.node(id);
                     const std::vector<double>& xh = n.saved;
                     const double* rs = xh.data() + rows * cols;
                     const Tensor& gv2 = gr.node(n.inputs[1]).value;
                     if (gr.node(n.inputs[1]).needs_grad) {
                       auto& gg = gr.grad_buffer(n.inputs[1]);
                       for (std::size_t i = 0; i < rows * cols; ++i) gg[i % cols] += n.grad[i] * xh[i];
                     }
                     if (gr.node(n.inputs[2]).needs_grad) {
                       auto& gb = gr.grad_buffer(n.inputs[2]);
                       for (std::size_t i = 0; i < rows * cols; ++i) gb[i % cols] += n.grad[i];
                     }
                     if (gr.node(n.inputs[0]).needs_grad) {
                       auto& gx = gr.grad_buffer(n.inputs[0]);
                       std::vector<double> dxhat(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_d = 0.0;
                         double mean_dx = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           dxhat[c] = n.grad[r * cols + c] * gv2[c];
                           mean_d += dxhat[c];
                           mean_dx += dxhat[c] * xh[r * cols + c];
                         }
                         mean_d /= static_cast<double>(cols);
                         mean_dx /= static_cast<double>(cols);
                         for (std::size_t c = 0; c < cols; ++c) {
                           gx[r * cols + c] +=
                               rs[r] * (dxhat[c] - mean_d - xh[r * cols + c] * mean_dx);
                         }
                       }
                     }
                   });
  auto& saved = g.node(y.id()).saved;
  saved = std::move(xhat);
  saved.insert(saved.end(), rstd.begin(), rstd.end());
  return y;
}

Var embedding(Var table, std::span<const std::size_t> indices) {
  Graph& g = table.graph();
  const Tensor& tv = table.value();
  if (tv.rank() != 2) {
    throw ShapeError("embedding: table must be 2-d, got " + shape_str(tv.shape()));
  }
  if (indices.empty()) throw ShapeError("embedding: empty index list");
  const std::size_t d = tv.dim(1);
  Tensor out(Shape{indices.size(), d});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= tv.dim(0)) {
      throw ShapeError("embedding: index " + std::to_string(indices[r]) +
                       " out of range for table " + shape_str(tv.shape()));
    }
    std::copy_n(tv.data() + indices[r] * d, d, out.data() + r * d);
  }
  Var y = g.record(OpKind::kEmbedding, {table.id()}, std::move(out), [d](Graph& gr, int id) {
    const auto& n = gr.node(id);
    auto& gt = gr.grad_buffer(n.inputs[0]);
    for (std::size_t r = 0; r < n.saved_index.size(); ++r) {
      const std::size_t row = n.saved_index[r];
      for (std::size_t c = 0; c < d; ++c) gt[row * d + c] += n.grad[r * d + c];
    }
  });
  g.node(y.id()).saved_index.assign(indices.begin(), indices.end());
  return y;
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Graph& g = parts[0].graph();
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    same_graph(parts[0], p, "concat");
    const Tensor& v = p.value();
    if (v.rows() != rows) {
      throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(v.shape()));
    }
    widths.push_back(v.cols());
    ids.push_back(p.id());
    total += v.cols();
  }
  Tensor out(with_last(parts[0].shape(), total));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  return g.record(OpKind::kConcat, std::move(ids), std::move(out),
                  [widths, rows, total](Graph& gr, int id) {
                    const auto& n = gr.node(id);
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                      if (gr.node(n.inputs[k]).needs_grad) {
                        auto& gk = gr.grad_buffer(n.inputs[k]);
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t c = 0; c < widths[k]; ++c) {
                            gk[r * widths[k] + c] += n.grad[r * total + off + c];
                          }
                        }
                      }
                      off += widths[k];
                    }
                  });
}

Var dropout(Var x, double p) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  Graph& g = x.graph();
  if (!g.training() || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double factor = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().numel());
  Tensor out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = keep(g.rng()) ? factor : 0.0;
    out[i] *= mask[i];
  }
  Var y = g.record(OpKind::kDropout, {x.id()}, std::move(out), [](Graph& gr, int id) {
    const auto& n = gr.node(id);
    auto& gx = gr.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i] * n.saved[i];
  });
  g.node(y.id()).saved = std::move(mask);
  return y;
}

Var mse(Var prediction, Var target) {
  Graph& g = same_graph(prediction, target, "mse");
  require_same_shape("mse", prediction.shape(), target.shape());
  const Tensor& pv = prediction.value();
  const Tensor& tv = target.value();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.numel(); ++i) total += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const double count = static_cast<double>(pv.numel());
  return g.record(OpKind::kMse, {prediction.id(), target.id()}, Tensor::scalar(total / count),
                  [count](Graph& gr, int id) {
                    const auto& n = gr.node(id);
                    const Tensor& p = gr.node(n.inputs[0]).value;
                    const Tensor& t = gr.node(n.inputs[1]).value;
                    const double k = 2.0 * n.grad[0] / count;
                    if (gr.node(n.inputs[0]).needs_grad) {
                      auto& gp = gr.grad_buffer(n.inputs[0]);
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += k * (p[i] - t[i]);
                    }
                    if (gr.node(n.inputs[1]).needs_grad) {
                      auto& gt = gr.grad_buffer(n.inputs[1]);
                      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= k * (p[i] - t[i]);
                    }
                  });
}

Var nll(Var logits, std::span<const int> targets) {
  Graph& g = logits.graph();
  const Tensor& lv = logits.value();
  const std::size_t cols = lv.cols();
  const std::size_t rows = lv.rows();
  if (targets.size() != rows) {
    throw ShapeError("nll: shape mismatch " + shape_str(lv.shape()) + " vs targets [" +
                     std::to_string(targets.size()) + "]");
  }
  std::vector<double> probs(lv.numel());
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(row[c] - mx) / z;
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= cols) {
      throw ShapeError("nll: target " + std::to_string(targets[r]) + " out of range for " +
                       shape_str(lv.shape()));
    }
    total += -(row[targets[r]] - mx - std::log(z));
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("nll: every target is masked");
  const double count = static_cast<double>(valid);
  Var y = g.record(OpKind::kNll, {logits.id()}, Tensor::scalar(total / count),
                   [cols, count](Graph& gr, int id) {
                     const auto& n = gr.node(id);
                     auto& gl = gr.grad_buffer(n.inputs[0]);
                     const std::size_t rows2 = gl.size() / cols;
                     const double k = n.grad[0] / count;
                     for (std::size_t r = 0; r < rows2; ++r) {
                       const auto t = static_cast<std::ptrdiff_t>(n.saved_index[r]) - 1;
                       if (t < 0) continue;
                       for (std::size_t c = 0; c < cols; ++c) {
                         const double onehot = static_cast<std::ptrdiff_t>(c) == t ? 1.0 : 0.0;
                         gl[r * cols + c] += k * (n.saved[r * cols + c] - onehot);
                       }
                     }
                   });
  auto& node = g.node(y.id());
  node.saved = std::move(probs);
  node.saved_index.resize(rows);
  // stored shifted by one so that masked rows map to 0
  for (std::size_t r = 0; r < rows; ++r) {
    node.saved_index[r] = targets[r] < 0 ? 0 : static_cast<std::size_t>(targets[r]) + 1;
  }
  return y;
}

Var sum(Var x) {
  Graph& g = x.graph();
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return g.record(OpKind::kSum, {x.id()}, Tensor::scalar(total), [](Graph& gr, int id) {
    const auto& n = gr.node(id);
    auto& gx = gr.grad_buffer(n.inputs[0]);
    for (double& v : gx) v += n.grad[0];
  });
}

Var causal_attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                     double p_drop) {
  Graph& g = qkv.graph();
  const Tensor& xv = qkv.value();
  if (xv.cols() % 3 != 0 || xv.rows() != batch * seq || heads == 0 ||
      (xv.cols() / 3) % heads != 0) {
    throw ShapeError("causal_attention: shape mismatch " + shape_str(xv.shape()) + " vs [" +
                     std::to_string(batch * seq) + ", 3*d] with " + std::to_string(heads) +
                     " heads");
  }
  if (p_drop < 0.0 || p_drop >= 1.0) {
    throw std::invalid_argument("causal_attention: dropout must lie in [0, 1)");
  }
  const std::size_t d = xv.cols() / 3;
  const std::size_t width = 3 * d;
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool drop = g.training() && p_drop > 0.0;
  const std::size_t block = seq * seq;
  std::vector<double> probs(batch * heads * block, 0.0);
  std::vector<double> mask;
  if (drop) mask.assign(probs.size(), 0.0);
  std::bernoulli_distribution keep(1.0 - p_drop);
  const double keep_scale = drop ? 1.0 / (1.0 - p_drop) : 1.0;

  Tensor out(Shape{batch * seq, d});
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* pb = probs.data() + (b * heads + h) * block;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* q = xv.data() + (b * seq + i) * width + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* k = xv.data() + (b * seq + j) * width + d + h * dh;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += q[e] * k[e];
          scores[j] = s * scl;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* o = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const double p = scores[j] / z;
          pb[i * seq + j] = p;
          double w = p;
          if (drop) {
            const double m = keep(g.rng()) ? keep_scale : 0.0;
            mask[(b * heads + h) * block + i * seq + j] = m;
            w *= m;
          }
          const double* v = xv.data() + (b * seq + j) * width + 2 * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) o[e] += w * v[e];
        }
      }
    }
  }

  Var y = g.record(
      OpKind::kCausalAttention, {qkv.id()}, std::move(out),
      [batch, seq, heads, d, dh, width, scl, block, drop](Graph& gr, int id) {
        const auto& n = gr.node(id);
        const Tensor& x = gr.node(n.inputs[0]).value;
        auto& gx = gr.grad_buffer(n.inputs[0]);
        const double* pr = n.saved.data();
        const double* mk = drop ? n.saved.data() + batch * heads * block : nullptr;
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = (b * heads + h) * block;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* dout = n.grad.data() + (b * seq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t vrow = (b * seq + j) * width + 2 * d + h * dh;
                const double p = pr[base + i * seq + j];
                const double m = drop ? mk[base + i * seq + j] : 1.0;
                double dpd = 0.0;
                for (std::size_t e = 0; e < dh; ++e) {
                  dpd += dout[e] * x[vrow + e];
                  gx[vrow + e] += p * m * dout[e];
                }
                dp[j] = dpd * m;
                dot += dp[j] * p;
              }
              const std::size_t qrow = (b * seq + i) * width + h * dh;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = pr[base + i * seq + j] * (dp[j] - dot) * scl;
                if (ds == 0.0) continue;
                const std::size_t krow = (b * seq + j) * width + d + h * dh;
                for (std::size_t e = 0; e < dh; ++e) {
                  gx[qrow + e] += ds * x[krow + e];
                  gx[krow + e] += ds * x[qrow + e];
                }
              }
            }
          }
        }
      });
  auto& saved = g.node(y.id()).saved;
  saved = std::move(probs);
  saved.insert(saved.end(), mask.begin(), mask.end());
  return y;
}

}  // namespace wayrvs
