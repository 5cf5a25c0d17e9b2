#include "gelm/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "gelm/errors.hpp"

namespace gelm {
namespace {

constexpr double kGeluCubic = 0.044715;
const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

void accumulate(std::vector<Tensor>& grads, Var v, const Tensor& g) {
  Tensor& slot = grads[v.id];
  if (slot.empty()) {
    slot = g;
  } else {
    slot += g;
  }
}

}  // namespace

Var Tape::push(Node node) {
  if (!node.value.all_finite()) {
    throw NumericalError("non-finite value produced by tape op" +
                         (node.name.empty() ? std::string() : " '" + node.name + "'"));
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  n.value = gelm::add(value(a), value(b));
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  Node n;
  n.op = Op::kMul;
  n.inputs = {a, b};
  n.value = hadamard(value(a), value(b));
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {a};
  n.factor = factor;
  n.value = scaled(value(a), factor);
  return push(std::move(n));
}

Var Tape::scale_rows(Var a, std::vector<double> factors) {
  const Tensor& x = value(a);
  if (x.rank() != 2 || factors.size() != x.rows()) {
    throw DomainError("scale_rows: need one factor per row of " + shape_string(x.shape()));
  }
  Node n;
  n.op = Op::kScaleRows;
  n.inputs = {a};
  n.value = x;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (double& e : n.value.row(r)) e *= factors[r];
  n.saved = std::move(factors);
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a, b};
  n.value = gelm::matmul(value(a), value(b));
  return push(std::move(n));
}

Var Tape::matmul_bt(Var a, Var b) {
  Node n;
  n.op = Op::kMatmulBt;
  n.inputs = {a, b};
  n.value = gelm::matmul_bt(value(a), value(b));
  return push(std::move(n));
}

Var Tape::softmax_rows(Var a, double factor, bool causal) {
  const Tensor& x = value(a);
  if (x.rank() != 2) throw DomainError("softmax_rows: expected a matrix");
  if (causal && x.rows() > x.cols()) throw DomainError("softmax_rows: causal mask needs rows <= cols");
  Node n;
  n.op = Op::kSoftmaxRows;
  n.inputs = {a};
  n.factor = factor;
  n.flag = causal;
  n.value = Tensor(x.shape());
  std::vector<double> buf;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t width = causal ? r + 1 : x.cols();
    buf.assign(width, 0.0);
    for (std::size_t c = 0; c < width; ++c) buf[c] = factor * x.at(r, c);
    const auto probs = gelm::softmax(buf);
    for (std::size_t c = 0; c < width; ++c) n.value.at(r, c) = probs[c];
  }
  return push(std::move(n));
}

Var Tape::rms_norm_rows(Var a, Var gain, double eps) {
  const Tensor& x = value(a);
  const Tensor& g = value(gain);
  if (x.rank() != 2 || g.size() != x.cols()) {
    throw DomainError("rms_norm_rows: gain length must equal column count");
  }
  Node n;
  n.op = Op::kRmsNormRows;
  n.inputs = {a, gain};
  n.factor = eps;
  n.value = Tensor(x.shape());
  n.saved.resize(x.rows());
  const double width = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const double inv = 1.0 / std::sqrt(gelm::dot(row, row) / width + eps);
    n.saved[r] = inv;
    for (std::size_t c = 0; c < x.cols(); ++c) n.value.at(r, c) = row[c] * inv * g[c];
  }
  return push(std::move(n));
}

Var Tape::gelu(Var a) {
  Node n;
  n.op = Op::kGelu;
  n.inputs = {a};
  n.value = value(a);
  for (double& x : n.value.data()) {
    x = 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
  }
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, std::size_t begin, std::size_t end) {
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {a};
  n.a = begin;
  n.b = end;
  n.value = gelm::slice_cols(value(a), begin, end);
  return push(std::move(n));
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DomainError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t total = 0;
  for (Var p : parts) {
    if (value(p).rank() != 2 || value(p).rows() != rows) {
      throw DomainError("concat_cols: row count mismatch");
    }
    total += value(p).cols();
  }
  Node n;
  n.op = Op::kConcatCols;
  n.inputs.assign(parts.begin(), parts.end());
  n.value = Tensor({rows, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) n.value.at(r, offset + c) = t.at(r, c);
    offset += t.cols();
  }
  return push(std::move(n));
}

Var Tape::select(Var a, std::size_t row, std::size_t col) {
  const Tensor& x = value(a);
  if (row >= x.rows() || col >= x.cols()) throw DomainError("select: index out of range");
  Node n;
  n.op = Op::kSelect;
  n.inputs = {a};
  n.a = row;
  n.b = col;
  n.value = Tensor::scalar(x.at(row, col));
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  Node n;
  n.op = Op::kSum;
  n.inputs = {a};
  n.value = Tensor::scalar(gelm::sum(value(a).data()));
  return push(std::move(n));
}

Var Tape::dot(Var a, Var b) {
  require_same_shape(value(a), value(b), "dot");
  Node n;
  n.op = Op::kDot;
  n.inputs = {a, b};
  n.value = Tensor::scalar(gelm::dot(value(a).data(), value(b).data()));
  return push(std::move(n));
}

Var Tape::custom(std::vector<Var> inputs, Tensor value, BackwardFn backward, std::string name) {
  for (Var v : inputs) node(v);
  Node n;
  n.op = Op::kCustom;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.custom_backward = std::move(backward);
  n.name = std::move(name);
  return push(std::move(n));
}

Gradients Tape::backward(Var target) const {
  const Tensor& v = value(target);
  if (v.size() != 1) {
    throw ContractError("backward target must be a scalar, got shape " + shape_string(v.shape()));
  }
  return backward(target, Tensor(v.shape(), {1.0}));
}

Gradients Tape::backward(Var root, const Tensor& seed) const {
  require_same_shape(value(root), seed, "backward seed");
  std::vector<Tensor> grads(nodes_.size());
  grads[root.id] = seed;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    if (grads[id].empty()) continue;
    propagate(nodes_[id], grads[id], grads);
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (grads[id].empty()) grads[id] = Tensor::zeros_like(nodes_[id].value);
  }
  return Gradients(std::move(grads));
}

void Tape::propagate(const Node& n, const Tensor& up, std::vector<Tensor>& grads) const {
  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kAdd:
      accumulate(grads, n.inputs[0], up);
      accumulate(grads, n.inputs[1], up);
      return;
    case Op::kMul:
      accumulate(grads, n.inputs[0], hadamard(up, value(n.inputs[1])));
      accumulate(grads, n.inputs[1], hadamard(up, value(n.inputs[0])));
      return;
    case Op::kScale:
      accumulate(grads, n.inputs[0], scaled(up, n.factor));
      return;
    case Op::kScaleRows: {
      Tensor g = up;
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (double& e : g.row(r)) e *= n.saved[r];
      accumulate(grads, n.inputs[0], g);
      return;
    }
    case Op::kMatmul:
      accumulate(grads, n.inputs[0], gelm::matmul_bt(up, value(n.inputs[1])));
      accumulate(grads, n.inputs[1], matmul_at(value(n.inputs[0]), up));
      return;
    case Op::kMatmulBt:
      accumulate(grads, n.inputs[0], gelm::matmul(up, value(n.inputs[1])));
      accumulate(grads, n.inputs[1], matmul_at(up, value(n.inputs[0])));
      return;
    case Op::kSoftmaxRows: {
      const Tensor& y = n.value;
      Tensor g(y.shape());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        const double inner = gelm::dot(up.row(r), y.row(r));
        for (std::size_t c = 0; c < y.cols(); ++c) {
          g.at(r, c) = n.factor * y.at(r, c) * (up.at(r, c) - inner);
        }
      }
      accumulate(grads, n.inputs[0], g);
      return;
    }
    case Op::kRmsNormRows: {
      const Tensor& x = value(n.inputs[0]);
      const Tensor& gain = value(n.inputs[1]);
      const double width = static_cast<double>(x.cols());
      Tensor dx(x.shape());
      Tensor dgain(gain.shape());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const double inv = n.saved[r];
        double proj = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
          proj += up.at(r, c) * gain[c] * x.at(r, c);
          dgain[c] += up.at(r, c) * x.at(r, c) * inv;
        }
        const double coeff = inv * inv * inv * proj / width;
        for (std::size_t c = 0; c < x.cols(); ++c) {
          dx.at(r, c) = inv * up.at(r, c) * gain[c] - coeff * x.at(r, c);
        }
      }
      accumulate(grads, n.inputs[0], dx);
      accumulate(grads, n.inputs[1], dgain);
      return;
    }
    case Op::kGelu: {
      const Tensor& x = value(n.inputs[0]);
      Tensor g(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double t = std::tanh(kGeluScale * (xi + kGeluCubic * xi * xi * xi));
        const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * xi * xi);
        g[i] = up[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
      }
      accumulate(grads, n.inputs[0], g);
      return;
    }
    case Op::kSliceCols: {
      Tensor g(value(n.inputs[0]).shape());
      for (std::size_t r = 0; r < up.rows(); ++r)
        for (std::size_t c = 0; c < up.cols(); ++c) g.at(r, n.a + c) = up.at(r, c);
      accumulate(grads, n.inputs[0], g);
      return;
    }
    case Op::kConcatCols: {
      std::size_t offset = 0;
      for (Var in : n.inputs) {
        const std::size_t width = value(in).cols();
        accumulate(grads, in, gelm::slice_cols(up, offset, offset + width));
        offset += width;
      }
      return;
    }
    case Op::kSelect: {
      Tensor g(value(n.inputs[0]).shape());
      g.at(n.a, n.b) = up.item();
      accumulate(grads, n.inputs[0], g);
      return;
    }
    case Op::kSum: {
      Tensor g(value(n.inputs[0]).shape());
      for (double& e : g.data()) e = up.item();
      accumulate(grads, n.inputs[0], g);
      return;
    }
    case Op::kDot:
      accumulate(grads, n.inputs[0], scaled(value(n.inputs[1]), up.item()));
      accumulate(grads, n.inputs[1], scaled(value(n.inputs[0]), up.item()));
      return;
    case Op::kCustom: {
      std::vector<const Tensor*> inputs;
      inputs.reserve(n.inputs.size());
      for (Var in : n.inputs) inputs.push_back(&value(in));
      auto parts = n.custom_backward(up, inputs);
      if (parts.size() != n.inputs.size()) {
        throw ContractError("custom op '" + n.name + "' returned wrong gradient count");
      }
      for (std::size_t i = 0; i < parts.size(); ++i) {
        require_same_shape(parts[i], value(n.inputs[i]), "custom op gradient");
        accumulate(grads, n.inputs[i], parts[i]);
      }
      return;
    }
  }
}

double evaluate(const TapeFunction& f, const Tensor& x) {
  Tape tape;
  const Var out = f(tape, tape.leaf(x));
  return tape.value(out).item();
}

FiniteDiffReport finite_diff_check(const TapeFunction& f, const Tensor& x, double h) {
  FiniteDiffReport report;
  {
    Tape tape;
    const Var input = tape.leaf(x);
    const Var out = f(tape, input);
    report.autodiff_grad = tape.backward(out)[input];
  }
  report.numeric_grad = Tensor::zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double plus = 0.0, minus = 0.0;
    try {
      probe[i] = x[i] + h;
      plus = evaluate(f, probe);
      probe[i] = x[i] - h;
      minus = evaluate(f, probe);
    } catch (const NumericalError&) {
      plus = std::numeric_limits<double>::quiet_NaN();
    }
    probe[i] = x[i];
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      report.finite = false;
      if (!report.non_finite_index) report.non_finite_index = i;
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * h);
    report.numeric_grad[i] = numeric;
    const double rel = std::abs(report.autodiff_grad[i] - numeric) / (std::abs(numeric) + 1e-8);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace gelm
