#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lgms/nn_ops.hpp"
#include "lgms/tensor.hpp"

namespace lgms::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  maxelem,
  matmul,
  reshape,
  permute,
  slice,
  concat,
  sum,
  mean,
  conv2d,
  maxpool2x2,
  upsample2x,
  group_norm,
  layer_norm,
  batch_norm,
  silu,
  sigmoid,
  softmax,
  unfold,
  fold,
  bce_logits,
  opaque,
};

const char* op_name(Op op);

class Tape;

// Handle into a tape node. Cheap to copy; valid while the tape lives.
struct Var {
  std::int32_t id = -1;
  Tape* tape = nullptr;
  bool defined() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

using GradMap = std::unordered_map<std::int32_t, Tensor>;

// Reverse-mode tape. Records one forward pass in topological order; backward
// walks it once and is looked up per op-tag in a fixed rule registry. A tape
// is confined to a single training step and discarded afterwards.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var scalar_const(double v, DType dt) { return constant(Tensor::scalar(v, dt)); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var maxelem(Var a, Var b);  // ties propagate gradient to the first operand
  Var matmul(Var a, Var b);

  Var reshape(Var x, Shape shape);
  Var permute(Var x, std::vector<int> axes);
  Var slice(Var x, int axis, std::int64_t start, std::int64_t len);
  std::vector<Var> split(Var x, int axis, const std::vector<std::int64_t>& sizes);
  Var concat(std::span<const Var> parts, int axis);

  Var sum(Var x);
  Var mean(Var x);

  Var conv2d(Var x, const nn::ConvSpec& spec, Var weight, std::optional<Var> bias);
  Var maxpool2x2(Var x);
  Var upsample_bilinear_2x(Var x);
  Var group_norm(Var x, int num_groups, Var gamma, Var beta, double epsilon);
  Var layer_norm(Var x, Var gamma, Var beta, double epsilon);
  // Running statistics are inputs in inference mode and outputs (via
  // batch_mean/batch_var) in training mode; folding them into running
  // buffers is the caller's job.
  Var batch_norm(Var x, Var gamma, Var beta, const Tensor& running_mean,
                 const Tensor& running_var, double epsilon, bool training,
                 Tensor* batch_mean = nullptr, Tensor* batch_var = nullptr);
  Var silu(Var x);
  Var sigmoid(Var x);
  Var softmax(Var x, int axis);
  Var unfold_patches(Var x, int p);
  Var fold_patches(Var tokens, int p, std::int64_t channels, std::int64_t h, std::int64_t w);
  Var bce_with_logits(Var logits, Var target);

  // Identity wrapper with no registered backward rule; lets callers splice in
  // externally computed values that must never be differentiated through.
  Var opaque(Var x);

  // Output must hold exactly one element. Returns gradients for every
  // requires_grad leaf; leaves the output does not depend on get zeros.
  GradMap backward(Var output);

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  friend struct BackwardRules;

  struct Node {
    Op op = Op::leaf;
    std::vector<std::int32_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<Tensor> saved;
    std::vector<std::int64_t> iattrs;
    std::vector<double> dattrs;
    std::vector<std::int64_t> index_ctx;  // maxpool argmax
  };

  Var push(Node node);
  Var emit(Op op, Tensor value, std::vector<std::int32_t> inputs);
  Node& node(Var v);
  const Node& node(Var v) const;
  void accumulate(std::int32_t id, const Tensor& g);

  // deque: node references stay valid while new nodes are recorded
  std::deque<Node> nodes_;
};

// --- finite-difference verification -------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  double step = 0.0;
  struct PerInput {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t coords_checked = 0;
  };
  std::vector<PerInput> inputs;
};

using TapeFn = std::function<Var(Tape&, std::span<const Var>)>;

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h against backward().
// Relative error uses |ad - fd| / max(|ad|, |fd|, 1e-8). Inputs must be
// float64. When max_coords_per_input > 0, a deterministic random subset of
// coordinates is checked per input (full sweep otherwise).
GradCheckReport gradcheck(const TapeFn& f, std::span<const Tensor> inputs, double step,
                          double tol, std::int64_t max_coords_per_input = 0,
                          std::uint64_t seed = 0x9d2c5680);

}  // namespace lgms::ad
