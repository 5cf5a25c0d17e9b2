#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gelm/tensor.hpp"

namespace gelm {

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
  friend bool operator==(Var, Var) = default;
};

class Gradients;

// Reverse-mode tape. Nodes are appended in creation order, so ids are a
// topological order and backward is a single reverse sweep.
//
// A tape is built by one thread; once construction is finished it is never
// mutated and backward() may be called concurrently.
class Tape {
 public:
  // Backward rule for custom ops: receives the upstream gradient and the
  // input values, returns one gradient per input (same shapes).
  using BackwardFn =
      std::function<std::vector<Tensor>(const Tensor& upstream, std::span<const Tensor* const> inputs)>;

  Var leaf(Tensor value);

  Var add(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double factor);
  Var scale_rows(Var a, std::vector<double> factors);  // row r times factors[r]
  Var matmul(Var a, Var b);
  Var matmul_bt(Var a, Var b);  // a * b^T

  // Row-wise softmax of (factor * a) with entries above the diagonal excluded
  // (set to exactly zero) when `causal` is true.
  Var softmax_rows(Var a, double factor, bool causal);
  Var rms_norm_rows(Var a, Var gain, double eps);
  Var gelu(Var a);  // tanh approximation

  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var concat_cols(std::span<const Var> parts);
  Var select(Var a, std::size_t row, std::size_t col);  // -> scalar
  Var sum(Var a);                                        // -> scalar
  Var dot(Var a, Var b);                                 // -> scalar, same shapes

  Var custom(std::vector<Var> inputs, Tensor value, BackwardFn backward, std::string name = "custom");

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a scalar node with respect to every node on the tape.
  Gradients backward(Var target) const;
  // Same, seeded with an explicit upstream gradient of the root's shape.
  Gradients backward(Var root, const Tensor& seed) const;

 private:
  enum class Op {
    kLeaf, kAdd, kMul, kScale, kScaleRows, kMatmul, kMatmulBt, kSoftmaxRows,
    kRmsNormRows, kGelu, kSliceCols, kConcatCols, kSelect, kSum, kDot, kCustom,
  };

  struct Node {
    Op op = Op::kLeaf;
    std::vector<Var> inputs;
    Tensor value;
    // Op-specific saved state.
    std::vector<double> saved;       // scale_rows factors, rms inverse norms
    double factor = 0.0;             // scale / softmax factor / norm eps
    std::size_t a = 0, b = 0;        // slice range, select coordinates
    bool flag = false;               // softmax causal
    BackwardFn custom_backward;
    std::string name;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void propagate(const Node& n, const Tensor& upstream, std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
};

class Gradients {
 public:
  // Gradient of the root with respect to `v`; zeros if `v` does not reach it.
  const Tensor& operator[](Var v) const { return grads_.at(v.id); }

 private:
  friend class Tape;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  std::vector<Tensor> grads_;
};

// Builds a scalar function of one tensor onto a fresh tape.
using TapeFunction = std::function<Var(Tape&, Var input)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool finite = true;                          // every probe evaluated finite
  std::optional<std::size_t> non_finite_index; // first offending coordinate
  Tensor autodiff_grad;
  Tensor numeric_grad;

  bool passed(double tolerance) const { return finite && max_rel_error <= tolerance; }
};

// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h,
// coordinate by coordinate. Relative error is |g_auto - g_fd| / (|g_fd| + 1e-8).
FiniteDiffReport finite_diff_check(const TapeFunction& f, const Tensor& x, double h = 1e-5);

// Evaluates f at x without differentiating.
double evaluate(const TapeFunction& f, const Tensor& x);

}  // namespace gelm
