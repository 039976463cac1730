#include "compostruct/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "compostruct/kernels.hpp"

namespace compostruct {

namespace {

kernels::MatView view(const Tensor& t) { return {t.values().data(), t.rows(), t.cols()}; }

kernels::MatView view(std::span<const double> data, std::size_t rows, std::size_t cols) {
  return {data.data(), rows, cols};
}

kernels::MutMatView mut_view(std::span<double> data, std::size_t rows, std::size_t cols) {
  return {data.data(), rows, cols};
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(a.shape()));
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw TapeError("tape: variable does not belong to this tape");
  return nodes_[v.id];
}

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw TapeError("tape: variable does not belong to this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }

std::span<const double> Tape::grad(Var v) const { return node(v).grad; }

std::span<double> Tape::grad_of(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0);
  return n.grad;
}

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, Node&)> back,
               const char* primitive) {
  if (backward_done_) throw TapeError(std::string(primitive) + ": tape already consumed by backward()");
  value.check_finite(primitive);
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, {}, "constant"); }

Var Tape::constant_ref(const Tensor& value) {
  value.check_finite("constant");
  Node n;
  n.ext = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(Tensor& param) {
  param.check_finite("parameter");
  Node n;
  n.ext = &param;
  n.param = &param;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_rank2("matmul", av);
  require_rank2("matmul", bv);
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions differ: " + shape_to_string(av.shape()) + " x " +
                     shape_to_string(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(Shape{m, n});
  kernels::gemm_nn_acc(view(av), view(bv), mut_view(out.values(), m, n));
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg,
              [a, b, m, k, n](Tape& t, Node& self) {
                const auto g = view(self.grad, m, n);
                if (t.requires_grad(a))
                  kernels::gemm_nt_acc(g, view(t.value(b)), mut_view(t.grad_of(a), m, k));
                if (t.requires_grad(b))
                  kernels::gemm_tn_acc(view(t.value(a)), g, mut_view(t.grad_of(b), k, n));
              },
              "matmul");
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same_shape("add", av, bv);
  Tensor out = av;
  out.clear_grad();
  auto o = out.values();
  auto bs = bv.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bs[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t, Node& self) {
                for (Var v : {a, b}) {
                  if (!t.requires_grad(v)) continue;
                  auto g = t.grad_of(v);
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                }
              },
              "add");
}

Var Tape::add_bias(Var x, Var b) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(b);
  require_rank2("add_bias", xv);
  if (bv.size() != xv.cols())
    throw ShapeError("add_bias: bias " + shape_to_string(bv.shape()) + " does not match columns of " +
                     shape_to_string(xv.shape()));
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape(), std::vector<double>(xv.values().begin(), xv.values().end()));
  auto o = out.values();
  auto bs = bv.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += bs[j];
  return push(std::move(out), requires_grad(x) || requires_grad(b),
              [x, b, m, n](Tape& t, Node& self) {
                if (t.requires_grad(x)) {
                  auto g = t.grad_of(x);
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                }
                if (t.requires_grad(b)) {
                  auto g = t.grad_of(b);
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                }
              },
              "add_bias");
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require_same_shape("mul", av, bv);
  Tensor out(av.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t, Node& self) {
                if (t.requires_grad(a)) {
                  auto g = t.grad_of(a);
                  const auto& other = t.value(b);
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
                }
                if (t.requires_grad(b)) {
                  auto g = t.grad_of(b);
                  const auto& other = t.value(a);
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
                }
              },
              "mul");
}

Var Tape::scale(Var a, double c) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = c * av[i];
  return push(std::move(out), requires_grad(a),
              [a, c](Tape& t, Node& self) {
                auto g = t.grad_of(a);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
              },
              "scale");
}

Var Tape::relu(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > 0.0 ? av[i] : 0.0;
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, Node& self) {
                auto g = t.grad_of(a);
                const auto& in = t.value(a);
                for (std::size_t i = 0; i < g.size(); ++i)
                  if (in[i] > 0.0) g[i] += self.grad[i];
              },
              "relu");
}

Var Tape::sigmoid(Var a) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-av[i]));
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, Node& self) {
                auto g = t.grad_of(a);
                const auto& y = self.own;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
              },
              "sigmoid");
}

Var Tape::embedding(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = value(table);
  require_rank2("embedding", tv);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  for (auto id : ids)
    if (id >= vocab)
      throw ShapeError("embedding: id " + std::to_string(id) + " outside table " + shape_to_string(tv.shape()));
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(tv.values().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * d));
  std::vector<std::size_t> kept(ids.begin(), ids.end());
  return push(std::move(out), requires_grad(table),
              [table, kept = std::move(kept), d](Tape& t, Node& self) {
                auto g = t.grad_of(table);
                for (std::size_t r = 0; r < kept.size(); ++r)
                  for (std::size_t j = 0; j < d; ++j) g[kept[r] * d + j] += self.grad[r * d + j];
              },
              "embedding");
}

Var Tape::reshape(Var a, Shape shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, Node& self) {
                auto g = t.grad_of(a);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
              },
              "reshape");
}

Var Tape::sum(Var a) {
  const Tensor& av = value(a);
  double acc = 0.0;
  for (double v : av.values()) acc += v;
  return push(Tensor::scalar(acc), requires_grad(a),
              [a](Tape& t, Node& self) {
                auto g = t.grad_of(a);
                const double up = self.grad[0];
                for (auto& x : g) x += up;
              },
              "sum");
}

Var Tape::odd_one_out_logits(Var e, std::size_t group) {
  const Tensor& ev = value(e);
  require_rank2("odd_one_out_logits", ev);
  if (group < 2 || ev.rows() % group != 0)
    throw ShapeError("odd_one_out_logits: " + std::to_string(ev.rows()) + " rows do not split into groups of " +
                     std::to_string(group));
  const std::size_t groups = ev.rows() / group, d = ev.cols();
  Tensor out(Shape{groups, group});
  kernels::odd_one_out_logits(view(ev), group, out.values());
  return push(std::move(out), requires_grad(e),
              [e, group, groups, d](Tape& t, Node& self) {
                // logit_i = -e_i.(T - e_i) with T the group sum, so
                // d logit_i / d e_k = -(T - e_i) for k = i and -e_i otherwise.
                // Hence grad_k = -(g_k (T - e_k) + sum_{i != k} g_i e_i).
                auto g = t.grad_of(e);
                const auto& ev = t.value(e);
                std::vector<double> total(d), weighted(d);
                for (std::size_t b = 0; b < groups; ++b) {
                  std::fill(total.begin(), total.end(), 0.0);
                  std::fill(weighted.begin(), weighted.end(), 0.0);
                  for (std::size_t r = 0; r < group; ++r) {
                    const double gr = self.grad[b * group + r];
                    const double* row = ev.values().data() + (b * group + r) * d;
                    for (std::size_t j = 0; j < d; ++j) {
                      total[j] += row[j];
                      weighted[j] += gr * row[j];
                    }
                  }
                  for (std::size_t k = 0; k < group; ++k) {
                    const double gk = self.grad[b * group + k];
                    const double* row = ev.values().data() + (b * group + k) * d;
                    double* out = &g[(b * group + k) * d];
                    for (std::size_t j = 0; j < d; ++j)
                      out[j] -= gk * (total[j] - row[j]) + (weighted[j] - gk * row[j]);
                  }
                }
              },
              "odd_one_out_logits");
}

Var Tape::softmax_cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& lv = value(logits);
  std::size_t rows = 0, classes = 0;
  if (lv.rank() == 1) {
    rows = 1;
    classes = lv.size();
  } else if (lv.rank() == 2) {
    rows = lv.rows();
    classes = lv.cols();
  } else {
    throw ShapeError("softmax_cross_entropy: expected rank 1 or 2 logits, got " + shape_to_string(lv.shape()));
  }
  if (targets.size() != rows)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  std::vector<double> probs(rows * classes);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= classes)
      throw ShapeError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " out of " +
                       std::to_string(classes) + " classes");
    const double* z = lv.values().data() + r * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(z[c] - zmax - log_denom);
    total += -(z[targets[r]] - zmax - log_denom);
  }
  std::vector<std::size_t> kept(targets.begin(), targets.end());
  return push(Tensor::scalar(total / static_cast<double>(rows)), requires_grad(logits),
              [logits, rows, classes, probs = std::move(probs), kept = std::move(kept)](Tape& t, Node& self) {
                auto g = t.grad_of(logits);
                const double up = self.grad[0] / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t c = 0; c < classes; ++c)
                    g[r * classes + c] += up * (probs[r * classes + c] - (c == kept[r] ? 1.0 : 0.0));
              },
              "softmax_cross_entropy");
}

Var Tape::soft_mask(Var w, Var s, double beta) {
  const Tensor& wv = value(w);
  const Tensor& sv = value(s);
  require_same_shape("soft_mask", wv, sv);
  Tensor out(wv.shape());
  std::vector<double> gate(wv.size());
  kernels::soft_mask(wv.values(), sv.values(), beta, gate, out.values());
  return push(std::move(out), requires_grad(w) || requires_grad(s),
              [w, s, beta, gate = std::move(gate)](Tape& t, Node& self) {
                if (t.requires_grad(w)) {
                  auto g = t.grad_of(w);
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * gate[i];
                }
                if (t.requires_grad(s)) {
                  auto g = t.grad_of(s);
                  const auto& wv = t.value(w);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += self.grad[i] * wv[i] * beta * gate[i] * (1.0 - gate[i]);
                }
              },
              "soft_mask");
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw TapeError("backward: nothing recorded, run a forward pass first");
  if (backward_done_) throw TapeError("backward: called twice on one tape; re-run the forward pass");
  Node& root = node(loss);
  if (root.value().size() != 1)
    throw TapeError("backward: loss must be a scalar, got " + shape_to_string(root.value().shape()));
  backward_done_ = true;
  for (auto& n : nodes_) n.grad.clear();
  root.grad.assign(1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this, n);
    if (n.param) {
      for (double g : n.grad)
        if (!std::isfinite(g)) throw NonFiniteError("backward: non-finite gradient reached a parameter");
      auto dst = n.param->grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
    }
  }
}

}  // namespace compostruct
