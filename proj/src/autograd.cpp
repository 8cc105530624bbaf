#include "bllm/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "bllm/error.hpp"

namespace bllm {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::Map<RowMajor, 0, Eigen::OuterStride<>>;
using ConstStrided = Eigen::Map<const RowMajor, 0, Eigen::OuterStride<>>;

// Column block [col, col+width) of a row-major matrix.
Strided block(Matrix& m, std::size_t col, std::size_t width) {
  return Strided(m.data().data() + col, static_cast<Eigen::Index>(m.rows()),
                 static_cast<Eigen::Index>(width),
                 Eigen::OuterStride<>(static_cast<Eigen::Index>(m.cols())));
}

ConstStrided block(const Matrix& m, std::size_t col, std::size_t width) {
  return ConstStrided(m.data().data() + col, static_cast<Eigen::Index>(m.rows()),
                      static_cast<Eigen::Index>(width),
                      Eigen::OuterStride<>(static_cast<Eigen::Index>(m.cols())));
}

void accumulate(Matrix& dst, const Matrix& src) {
  auto& d = dst.data();
  const auto& s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void require_same(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                     b.shape_string());
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_slope(double x) {
  const double inner = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

}  // namespace

void Parameter::zero_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix(value.rows(), value.cols());
  } else {
    grad.fill(0.0);
  }
}

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Matrix& Tape::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  const Matrix& v = n.borrowed != nullptr ? *n.borrowed : n.value;
  if (n.grad.rows() != v.rows() || n.grad.cols() != v.cols()) n.grad = Matrix(v.rows(), v.cols());
  return n.grad;
}

bool Tape::any_grad(std::initializer_list<Var> vars) const {
  return std::any_of(vars.begin(), vars.end(),
                     [this](Var v) { return nodes_[v.id].requires_grad; });
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::constant_ref(const Matrix& value) {
  Var v = push(Matrix(), false, {});
  nodes_[v.id].borrowed = &value;
  return v;
}

Var Tape::param(Parameter& p) {
  Var v = push(Matrix(), p.trainable, [](Tape&, std::size_t) {});
  nodes_[v.id].borrowed = &p.value;
  nodes_[v.id].param = p.trainable ? &p : nullptr;
  return v;
}

Var Tape::matmul(Var a, Var b) {
  Matrix out = bllm::matmul(value(a), value(b));
  return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) accumulate(t.grad_of(a.id), bllm::matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) accumulate(t.grad_of(b.id), bllm::matmul_tn(t.value(a), g));
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  Matrix out = bllm::matmul_nt(value(a), value(b));
  return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) accumulate(t.grad_of(a.id), bllm::matmul(g, t.value(b)));
    if (t.requires_grad(b)) accumulate(t.grad_of(b.id), bllm::matmul_tn(g, t.value(a)));
  });
}

Var Tape::add(Var a, Var b) {
  require_same("add", value(a), value(b));
  Matrix out = value(a);
  accumulate(out, value(b));
  return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) accumulate(t.grad_of(a.id), g);
    if (t.requires_grad(b)) accumulate(t.grad_of(b.id), g);
  });
}

Var Tape::add_row(Var x, Var bias) {
  const Matrix& xv = value(x);
  const Matrix& bv = value(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_row: bias " + bv.shape_string() + " does not broadcast over " +
                     xv.shape_string());
  }
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv(0, c);
  }
  return push(std::move(out), any_grad({x, bias}), [x, bias](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(x)) accumulate(t.grad_of(x.id), g);
    if (t.requires_grad(bias)) {
      Matrix& gb = t.grad_of(bias.id);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
      }
    }
  });
}

Var Tape::scale(Var x, double s) {
  Matrix out = value(x);
  for (double& v : out.data()) v *= s;
  return push(std::move(out), any_grad({x}), [x, s](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gx = t.grad_of(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data()[i] += s * g.data()[i];
  });
}

Var Tape::hadamard(Var a, Var b) {
  require_same("hadamard", value(a), value(b));
  Matrix out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= value(b).data()[i];
  return push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.requires_grad(a)) {
      Matrix& ga = t.grad_of(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * t.value(b).data()[i];
    }
    if (t.requires_grad(b)) {
      Matrix& gb = t.grad_of(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * t.value(a).data()[i];
    }
  });
}

Var Tape::elementwise(Var x, std::function<double(double)> f, std::function<double(double)> df) {
  Matrix out = value(x);
  for (double& v : out.data()) v = f(v);
  return push(std::move(out), any_grad({x}),
              [x, df = std::move(df)](Tape& t, std::size_t self) {
                const Matrix& g = t.nodes_[self].grad;
                const Matrix& in = t.value(x);
                Matrix& gx = t.grad_of(x.id);
                for (std::size_t i = 0; i < g.size(); ++i) {
                  gx.data()[i] += g.data()[i] * df(in.data()[i]);
                }
              });
}

Var Tape::gelu(Var x) { return elementwise(x, gelu_value, gelu_slope); }

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = value(x);
  const std::size_t n = xv.cols();
  if (value(gamma).cols() != n || value(beta).cols() != n || value(gamma).rows() != 1 ||
      value(beta).rows() != 1) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(n));
  }
  Matrix normalized(xv.rows(), n);
  std::vector<double> inv_std(xv.rows());
  Matrix out(xv.rows(), n);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      normalized(r, c) = (in[c] - mean) * inv_std[r];
      out(r, c) = normalized(r, c) * value(gamma)(0, c) + value(beta)(0, c);
    }
  }
  return push(std::move(out), any_grad({x, gamma, beta}),
              [x, gamma, beta, normalized = std::move(normalized),
               inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                const Matrix& g = t.nodes_[self].grad;
                const std::size_t cols = g.cols();
                const Matrix& gain = t.value(gamma);
                if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                  for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      if (t.requires_grad(gamma)) t.grad_of(gamma.id)(0, c) += g(r, c) * normalized(r, c);
                      if (t.requires_grad(beta)) t.grad_of(beta.id)(0, c) += g(r, c);
                    }
                  }
                }
                if (!t.requires_grad(x)) return;
                Matrix& gx = t.grad_of(x.id);
                std::vector<double> dhat(cols);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                  double mean_d = 0.0;
                  double mean_dx = 0.0;
                  for (std::size_t c = 0; c < cols; ++c) {
                    dhat[c] = g(r, c) * gain(0, c);
                    mean_d += dhat[c];
                    mean_dx += dhat[c] * normalized(r, c);
                  }
                  mean_d /= static_cast<double>(cols);
                  mean_dx /= static_cast<double>(cols);
                  for (std::size_t c = 0; c < cols; ++c) {
                    gx(r, c) += inv_std[r] * (dhat[c] - mean_d - normalized(r, c) * mean_dx);
                  }
                }
              });
}

Var Tape::attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  if (kv.rows() != vv.rows() || qv.cols() != kv.cols() || kv.cols() != vv.cols()) {
    throw ShapeError("attention: q " + qv.shape_string() + ", k " + kv.shape_string() + ", v " +
                     vv.shape_string());
  }
  if (heads == 0 || qv.cols() % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(qv.cols()) +
                     " not divisible by head count " + std::to_string(heads));
  }
  if (causal && qv.rows() != kv.rows()) throw ShapeError("attention: causal mask needs square scores");
  const std::size_t tq = qv.rows();
  const std::size_t tk = kv.rows();
  const std::size_t hd = qv.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix out(tq, qv.cols());
  std::vector<Matrix> probs;
  probs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Matrix scores(tq, tk);
    Eigen::Map<RowMajor> s(scores.data().data(), static_cast<Eigen::Index>(tq),
                           static_cast<Eigen::Index>(tk));
    s.noalias() = block(qv, h * hd, hd) * block(kv, h * hd, hd).transpose();
    s *= inv_sqrt;
    if (causal) {
      for (std::size_t i = 0; i < tq; ++i) {
        for (std::size_t j = i + 1; j < tk; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
      }
    }
    Matrix p = softmax_rows(scores);
    Eigen::Map<const RowMajor> pm(p.data().data(), static_cast<Eigen::Index>(tq),
                                  static_cast<Eigen::Index>(tk));
    block(out, h * hd, hd).noalias() = pm * block(vv, h * hd, hd);
    probs.push_back(std::move(p));
  }

  return push(std::move(out), any_grad({q, k, v}),
              [q, k, v, heads, hd, inv_sqrt, probs = std::move(probs)](Tape& t, std::size_t self) {
                const Matrix& g = t.nodes_[self].grad;
                const Matrix& qv2 = t.value(q);
                const Matrix& kv2 = t.value(k);
                const Matrix& vv2 = t.value(v);
                const auto tq2 = static_cast<Eigen::Index>(qv2.rows());
                const auto tk2 = static_cast<Eigen::Index>(kv2.rows());
                for (std::size_t h = 0; h < heads; ++h) {
                  Eigen::Map<const RowMajor> p(probs[h].data().data(), tq2, tk2);
                  auto go = block(g, h * hd, hd);
                  if (t.requires_grad(v)) {
                    block(t.grad_of(v.id), h * hd, hd).noalias() += p.transpose() * go;
                  }
                  if (!t.requires_grad(q) && !t.requires_grad(k)) continue;
                  RowMajor dp = go * block(vv2, h * hd, hd).transpose();
                  // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                  RowMajor ds = dp;
                  for (Eigen::Index i = 0; i < tq2; ++i) {
                    const double dot = (dp.row(i).array() * p.row(i).array()).sum();
                    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                  }
                  ds *= inv_sqrt;
                  if (t.requires_grad(q)) {
                    block(t.grad_of(q.id), h * hd, hd).noalias() += ds * block(kv2, h * hd, hd);
                  }
                  if (t.requires_grad(k)) {
                    block(t.grad_of(k.id), h * hd, hd).noalias() +=
                        ds.transpose() * block(qv2, h * hd, hd);
                  }
                }
              });
}

Var Tape::gather_rows(Var table, std::span<const std::size_t> rows) {
  const Matrix& tv = value(table);
  Matrix out(rows.size(), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= tv.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside table " +
                       tv.shape_string());
    }
    std::copy(tv.row(rows[i]).begin(), tv.row(rows[i]).end(), out.row(i).begin());
  }
  std::vector<std::size_t> ids(rows.begin(), rows.end());
  return push(std::move(out), any_grad({table}),
              [table, ids = std::move(ids)](Tape& t, std::size_t self) {
                const Matrix& g = t.nodes_[self].grad;
                Matrix& gt = t.grad_of(table.id);
                for (std::size_t i = 0; i < ids.size(); ++i) {
                  auto dst = gt.row(ids[i]);
                  auto src = g.row(i);
                  for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                }
              });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  bool needs_grad = false;
  for (Var p : parts) {
    if (value(p).cols() != cols) {
      throw ShapeError("concat_rows: width " + std::to_string(value(p).cols()) + " vs " +
                       std::to_string(cols));
    }
    rows += value(p).rows();
    needs_grad = needs_grad || requires_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const auto& src = value(p).data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset * cols));
    offset += value(p).rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(std::move(out), needs_grad, [inputs = std::move(inputs)](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    std::size_t offset = 0;
    for (Var p : inputs) {
      const std::size_t n = t.value(p).size();
      if (t.requires_grad(p)) {
        Matrix& gp = t.grad_of(p.id);
        for (std::size_t i = 0; i < n; ++i) gp.data()[i] += g.data()[offset + i];
      }
      offset += n;
    }
  });
}

Var Tape::slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = value(x);
  if (begin + count > xv.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + xv.shape_string());
  }
  const std::size_t cols = xv.cols();
  Matrix out(count, cols,
             std::vector<double>(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                 xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols)));
  return push(std::move(out), any_grad({x}), [x, begin, cols](Tape& t, std::size_t self) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gx = t.grad_of(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data()[begin * cols + i] += g.data()[i];
  });
}

Var Tape::reshape(Var x, std::size_t rows, std::size_t cols) {
  Matrix out = value(x).reshaped(rows, cols);
  return push(std::move(out), any_grad({x}), [x](Tape& t, std::size_t self) {
    accumulate(t.grad_of(x.id), t.nodes_[self].grad.reshaped(t.value(x).rows(), t.value(x).cols()));
  });
}

Var Tape::cross_entropy(Var logits, std::span<const std::size_t> targets, double normalizer) {
  const Matrix& lv = value(logits);
  if (targets.size() != lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(lv.rows()) + " logit rows");
  }
  for (std::size_t t : targets) {
    if (t >= lv.cols()) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(lv.cols()));
    }
  }
  const double norm = normalizer > 0.0 ? normalizer : static_cast<double>(lv.rows());
  Matrix probs = softmax_rows(lv);
  double total = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    // log-softmax computed directly for accuracy when p is tiny
    auto row = lv.row(r);
    const double peak = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - peak);
    total += -(row[targets[r]] - peak - std::log(z));
  }
  std::vector<std::size_t> ids(targets.begin(), targets.end());
  return push(Matrix(1, 1, total / norm), any_grad({logits}),
              [logits, ids = std::move(ids), probs = std::move(probs), norm](Tape& t, std::size_t self) {
                const double g = t.nodes_[self].grad(0, 0) / norm;
                Matrix& gl = t.grad_of(logits.id);
                for (std::size_t r = 0; r < probs.rows(); ++r) {
                  for (std::size_t c = 0; c < probs.cols(); ++c) {
                    gl(r, c) += g * (probs(r, c) - (c == ids[r] ? 1.0 : 0.0));
                  }
                }
              });
}

void Tape::backward(Var loss) {
  if (value(loss).rows() != 1 || value(loss).cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + value(loss).shape_string());
  }
  if (!requires_grad(loss)) return;
  grad_of(loss.id)(0, 0) = 1.0;
  // Nodes never reached from the loss keep an empty grad and are skipped.
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.param->value.rows() || n.param->grad.cols() != n.param->value.cols()) {
        n.param->zero_grad();
      }
      accumulate(n.param->grad, n.grad);
    }
  }
}

std::vector<std::string> GradCheckReport::failing_groups() const {
  std::vector<std::string> out;
  for (const auto& g : groups) {
    if (!g.passed) out.push_back(g.name);
  }
  return out;
}

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss,
                           std::span<Parameter* const> params, GradCheckOptions options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
  }
  auto evaluate = [&loss]() {
    Tape tape;
    return tape.value(loss(tape))(0, 0);
  };

  GradCheckReport report;
  for (Parameter* p : params) {
    GradCheckGroup group;
    group.name = p->name;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + options.delta;
      const double up = evaluate();
      x = saved - options.delta;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * options.delta);
      const double analytic = p->grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (i == 0 || rel > group.max_rel_error) {
        group.max_rel_error = rel;
        group.worst_index = i;
        group.analytic = analytic;
        group.numeric = numeric;
      }
    }
    group.passed = group.max_rel_error <= options.tol;
    report.max_rel_error = std::max(report.max_rel_error, group.max_rel_error);
    report.passed = report.passed && group.passed;
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace bllm
