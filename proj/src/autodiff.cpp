#include "lmas/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lmas/error.hpp"

namespace lmas {

void check_unique_names(const ParameterList& params) {
  std::set<std::string> seen;
  for (const Parameter* p : params) {
    if (!seen.insert(p->name).second) fail(ErrorCategory::Contract, "duplicate parameter name '" + p->name + "'");
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  Var v = variable(p.value);
  nodes_[v.id()].param = &p;
  bound_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    if (&in.tape() != this) fail(ErrorCategory::Contract, "operation mixes variables from different tapes");
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.grad.empty()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) fail(ErrorCategory::Contract, "backward() on a variable from another tape");
  if (loss.value().size() != 1) {
    fail(ErrorCategory::Contract, "backward() requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor();
  backward_order_.clear();

  grad_buffer(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.empty()) continue;
    backward_order_.push_back(i);
    if (node.backward) node.backward(*this, i);
  }

  for (auto& [param, id] : bound_) {
    Parameter* p = nodes_[id].param;
    p->grad = nodes_[id].grad.empty() ? Tensor(p->value.shape(), 0.0) : nodes_[id].grad;
  }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

Tensor matrix_of(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCategory::Dimension, std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                       shape_string(b.shape()));
  }
}

template <typename Forward, typename Derivative>
Var unary(Var a, Forward f, Derivative df_from_output) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(std::move(y), inputs, [ia, df_from_output](Tape& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    const Tensor& out = t.value(self);
    const Tensor& in = t.value(ia);
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df_from_output(in[i], out[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) {
    fail(ErrorCategory::Dimension,
         "matmul: inner dimensions differ for " + shape_string(A.shape()) + " and " + shape_string(B.shape()));
  }
  Tensor C = matrix_of(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(C), inputs, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& GA = t.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          GA[i * k + p] += acc;
        }
    }
    if (t.requires_grad(ib)) {
      Tensor& GB = t.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  if (B.cols() != k) {
    fail(ErrorCategory::Dimension,
         "matmul_nt: inner dimensions differ for " + shape_string(A.shape()) + " and " + shape_string(B.shape()) + "^T");
  }
  Tensor C = matrix_of(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      C[i * n + j] = acc;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(C), inputs, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& GA = t.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += g * B[j * k + p];
        }
    }
    if (t.requires_grad(ib)) {
      Tensor& GB = t.grad_buffer(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) GB[j * k + p] += g * A[i * k + p];
        }
    }
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor T = matrix_of(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T[j * m + i] = A[i * n + j];
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(std::move(T), inputs, [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    Tensor& GA = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) GA[i * n + j] += G[j * m + i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out(std::move(shape), a.value().values());
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [ia](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    Tensor& GA = t.grad_buffer(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Tensor& GX = t.grad_buffer(id);
      for (std::size_t i = 0; i < G.size(); ++i) GX[i] += G[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    if (t.requires_grad(ia)) {
      Tensor& GA = t.grad_buffer(ia);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& GB = t.grad_buffer(ib);
      for (std::size_t i = 0; i < G.size(); ++i) GB[i] -= G[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    if (t.requires_grad(ia)) {
      const Tensor& B = t.value(ib);
      Tensor& GA = t.grad_buffer(ia);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      const Tensor& A = t.value(ia);
      Tensor& GB = t.grad_buffer(ib);
      for (std::size_t i = 0; i < G.size(); ++i) GB[i] += G[i] * A[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [ia, factor](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    Tensor& GA = t.grad_buffer(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * factor;
  });
}

Var add_row(Var a, Var row) {
  const std::size_t m = a.rows(), n = a.cols();
  if (row.rows() != 1 || row.cols() != n) {
    fail(ErrorCategory::Dimension,
         "add_row: cannot broadcast " + shape_string(row.shape()) + " over " + shape_string(a.shape()));
  }
  Tensor out = a.value();
  const Tensor& R = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += R[j];
  const std::size_t ia = a.id(), ir = row.id();
  const Var inputs[] = {a, row};
  return a.tape().record(std::move(out), inputs, [ia, ir, m, n](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    if (t.requires_grad(ia)) {
      Tensor& GA = t.grad_buffer(ia);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
    }
    if (t.requires_grad(ir)) {
      Tensor& GR = t.grad_buffer(ir);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) GR[j] += G[i * n + j];
    }
  });
}

Var mul_row(Var a, Var row) {
  const std::size_t m = a.rows(), n = a.cols();
  if (row.rows() != 1 || row.cols() != n) {
    fail(ErrorCategory::Dimension,
         "mul_row: cannot broadcast " + shape_string(row.shape()) + " over " + shape_string(a.shape()));
  }
  Tensor out = a.value();
  const Tensor& R = row.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= R[j];
  const std::size_t ia = a.id(), ir = row.id();
  const Var inputs[] = {a, row};
  return a.tape().record(std::move(out), inputs, [ia, ir, m, n](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    const Tensor& A = t.value(ia);
    const Tensor& R = t.value(ir);
    if (t.requires_grad(ia)) {
      Tensor& GA = t.grad_buffer(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) GA[i * n + j] += G[i * n + j] * R[j];
    }
    if (t.requires_grad(ir)) {
      Tensor& GR = t.grad_buffer(ir);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) GR[j] += G[i * n + j] * A[i * n + j];
    }
  });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var elementwise_apply(Elementwise kind, std::span<const Var> args) {
  const bool binary = kind == Elementwise::Add || kind == Elementwise::Mul;
  const std::size_t expected = binary ? 2 : 1;
  if (args.size() != expected) {
    fail(ErrorCategory::Contract, "elementwise_apply expects " + std::to_string(expected) + " argument(s), got " +
                                      std::to_string(args.size()));
  }
  switch (kind) {
    case Elementwise::Tanh: return tanh(args[0]);
    case Elementwise::Sigmoid: return sigmoid(args[0]);
    case Elementwise::Relu: return relu(args[0]);
    case Elementwise::Add: return add(args[0], args[1]);
    case Elementwise::Mul: return mul(args[0], args[1]);
  }
  fail(ErrorCategory::Contract, "unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(Tensor::scalar(total), inputs, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    Tensor& GA = t.grad_buffer(ia);
    for (double& v : GA.values()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Softmax family

Var masked_softmax_rows(Var a, std::span<const std::size_t> lengths) {
  const Tensor& X = a.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (lengths.size() != m) {
    fail(ErrorCategory::Contract, "masked_softmax_rows: " + std::to_string(lengths.size()) + " lengths for " +
                                      std::to_string(m) + " rows");
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  Tensor Y = matrix_of(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t len = lens[i];
    if (len == 0 || len > n) {
      fail(ErrorCategory::Contract, "masked_softmax_rows: row " + std::to_string(i) + " length " + std::to_string(len) +
                                        " outside [1, " + std::to_string(n) + "]");
    }
    double hi = X[i * n];
    for (std::size_t j = 1; j < len; ++j) hi = std::max(hi, X[i * n + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      Y[i * n + j] = std::exp(X[i * n + j] - hi);
      total += Y[i * n + j];
    }
    for (std::size_t j = 0; j < len; ++j) Y[i * n + j] /= total;
  }
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(std::move(Y), inputs, [ia, m, n, lens = std::move(lens)](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    const Tensor& Y = t.value(self);
    Tensor& GA = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < lens[i]; ++j) dot += G[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j < lens[i]; ++j) GA[i * n + j] += Y[i * n + j] * (G[i * n + j] - dot);
    }
  });
}

Var softmax_rows(Var a) {
  std::vector<std::size_t> lengths(a.rows(), a.cols());
  return masked_softmax_rows(a, lengths);
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& X = logits.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (targets.size() != m) {
    fail(ErrorCategory::Contract,
         "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) + " rows");
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  Tensor probs = matrix_of(m, n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (tgt[i] >= n) {
      fail(ErrorCategory::Index, "cross_entropy: target " + std::to_string(tgt[i]) + " at row " + std::to_string(i) +
                                     " out of range for " + std::to_string(n) + " classes");
    }
    double hi = X[i * n];
    for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, X[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(X[i * n + j] - hi);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    total += (hi + std::log(z)) - X[i * n + tgt[i]];
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  const std::size_t ia = logits.id();
  const Var inputs[] = {logits};
  return logits.tape().record(
      Tensor::scalar(total * inv_m), inputs,
      [ia, m, n, inv_m, tgt = std::move(tgt), probs = std::move(probs)](Tape& t, std::size_t self) {
        const double g = t.grad_buffer(self)[0] * inv_m;
        Tensor& GA = t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) GA[i * n + j] += g * probs[i * n + j];
          GA[i * n + tgt[i]] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Row selection

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& A = a.value();
  const std::size_t n = A.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  if (idx.empty()) fail(ErrorCategory::Contract, "gather_rows: empty row selection");
  Tensor out = matrix_of(idx.size(), n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= A.rows()) {
      fail(ErrorCategory::Index,
           "gather_rows: row " + std::to_string(idx[r]) + " out of range for " + shape_string(A.shape()));
    }
    std::copy_n(A.values().begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t ia = a.id();
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [ia, n, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& G = t.grad_buffer(self);
    Tensor& GA = t.grad_buffer(ia);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) GA[idx[r] * n + j] += G[r * n + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCategory::Contract, "concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != n) {
      fail(ErrorCategory::Dimension, "concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                                         shape_string(p.shape()));
    }
    total += p.rows();
  }
  Tensor out = matrix_of(total, n);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto& v = p.value().values();
    std::copy(v.begin(), v.end(), out.values().begin() + static_cast<std::ptrdiff_t>(offset));
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += v.size();
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, std::size_t self) {
        const Tensor& G = t.grad_buffer(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& GP = t.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < GP.size(); ++i) GP[i] += G[offsets[k] + i];
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization

Var batch_norm_train(Var x, Var gamma, Var beta, double eps, Tensor* batch_mean, Tensor* batch_var) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (m < 2) {
    fail(ErrorCategory::Contract, "batch_norm_train: batch of size " + std::to_string(m) +
                                      " has degenerate variance; training mode needs at least 2 rows");
  }
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    fail(ErrorCategory::Dimension, "batch_norm_train: gamma " + shape_string(gamma.shape()) + " / beta " +
                                       shape_string(beta.shape()) + " do not match input " + shape_string(X.shape()));
  }
  Tensor mu = matrix_of(1, n), var = matrix_of(1, n), inv_std = matrix_of(1, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mu[j] += X[i * n + j];
  for (std::size_t j = 0; j < n; ++j) mu[j] /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = X[i * n + j] - mu[j];
      var[j] += d * d;
    }
  for (std::size_t j = 0; j < n; ++j) {
    var[j] /= static_cast<double>(m);
    inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  }
  Tensor xhat = matrix_of(m, n), Y = matrix_of(m, n);
  const Tensor& Gm = gamma.value();
  const Tensor& Bt = beta.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (X[i * n + j] - mu[j]) * inv_std[j];
      Y[i * n + j] = Gm[j] * xhat[i * n + j] + Bt[j];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;

  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const Var inputs[] = {x, gamma, beta};
  return x.tape().record(
      std::move(Y), inputs,
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& G = t.grad_buffer(self);
        const Tensor& Gm = t.value(ig);
        if (t.requires_grad(ib)) {
          Tensor& GB = t.grad_buffer(ib);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) GB[j] += G[i * n + j];
        }
        if (t.requires_grad(ig)) {
          Tensor& GG = t.grad_buffer(ig);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) GG[j] += G[i * n + j] * xhat[i * n + j];
        }
        if (t.requires_grad(ix)) {
          Tensor& GX = t.grad_buffer(ix);
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t j = 0; j < n; ++j) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              const double d = G[i * n + j] * Gm[j];
              sum_d += d;
              sum_dx += d * xhat[i * n + j];
            }
            for (std::size_t i = 0; i < m; ++i) {
              const double d = G[i * n + j] * Gm[j];
              GX[i * n + j] += inv_std[j] * inv_m * (static_cast<double>(m) * d - sum_d - xhat[i * n + j] * sum_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Verification helpers

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor grad(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + step;
    const double up = f(probe);
    probe[i] = original - step;
    const double down = f(probe);
    probe[i] = original;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.size() != b.size()) {
    fail(ErrorCategory::Dimension,
         "max_relative_error shapes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace lmas
