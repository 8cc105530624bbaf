#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bllm/matrix.hpp"

namespace bllm {

// A named tensor owned by a model. Only trainable parameters receive
// gradients; everything else enters the tape as a constant.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = false;

  void zero_grad();
};

struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order and backward()
// walks them in exact reverse order; gradients land in Parameter::grad.
class Tape {
 public:
  Var constant(Matrix value);
  // Borrows `value`, which must outlive the tape and stay unmodified.
  Var constant_ref(const Matrix& value);
  // Borrows the parameter's value; records a gradient only if trainable.
  Var param(Parameter& p);

  const Matrix& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.borrowed != nullptr ? *n.borrowed : n.value;
  }
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  // a · bᵀ, the layout used for weights stored as (out x in).
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  // x + bias, with bias a 1 x cols row broadcast over every row of x.
  Var add_row(Var x, Var bias);
  Var scale(Var x, double s);
  Var hadamard(Var a, Var b);
  Var elementwise(Var x, std::function<double(double)> f, std::function<double(double)> df);
  Var gelu(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  // Multi-head scaled dot-product attention over (T x d) inputs; heads split
  // the column dimension evenly.
  Var attention(Var q, Var k, Var v, std::size_t heads, bool causal);
  Var gather_rows(Var table, std::span<const std::size_t> rows);
  Var concat_rows(std::span<const Var> parts);
  Var slice_rows(Var x, std::size_t begin, std::size_t count);
  Var reshape(Var x, std::size_t rows, std::size_t cols);
  // sum_i -log softmax(logits_i)[target_i] / normalizer (normalizer 0 = row count).
  Var cross_entropy(Var logits, std::span<const std::size_t> targets, double normalizer = 0.0);

  // Seeds d(loss)/d(loss) = 1; loss must be 1x1.
  void backward(Var loss);

 private:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Matrix value;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward backward);
  Matrix& grad_of(std::size_t id);
  bool any_grad(std::initializer_list<Var> vars) const;

  std::vector<Node> nodes_;
};

struct GradCheckGroup {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;
  bool passed = true;

  std::vector<std::string> failing_groups() const;
};

struct GradCheckOptions {
  double delta = 1e-3;
  double tol = 1e-4;
  // Denominator floor for the relative error, so entries whose true gradient
  // is ~0 are judged on absolute error.
  double floor = 1e-6;
};

// Central finite differences against the tape gradient for every element of
// every listed parameter. The loss builder must be deterministic.
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss,
                           std::span<Parameter* const> params, GradCheckOptions options = {});

}  // namespace bllm
