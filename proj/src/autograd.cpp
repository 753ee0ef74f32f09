#include "lgms/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace lgms::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::maxelem: return "max";
    case Op::matmul: return "matmul";
    case Op::reshape: return "reshape";
    case Op::permute: return "permute";
    case Op::slice: return "slice";
    case Op::concat: return "concat";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::conv2d: return "conv2d";
    case Op::maxpool2x2: return "maxpool2x2";
    case Op::upsample2x: return "upsample_bilinear_2x";
    case Op::group_norm: return "group_norm";
    case Op::layer_norm: return "layer_norm";
    case Op::batch_norm: return "batch_norm";
    case Op::silu: return "silu";
    case Op::sigmoid: return "sigmoid";
    case Op::softmax: return "softmax";
    case Op::unfold: return "unfold_patches";
    case Op::fold: return "fold_patches";
    case Op::bce_logits: return "bce_with_logits";
    case Op::opaque: return "opaque";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!defined()) throw std::logic_error("use of an undefined Var");
  return tape->value(*this);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<std::int32_t>(nodes_.size()))
    throw std::logic_error("Var does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  return const_cast<Tape*>(this)->node(v);
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1), this};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::emit(Op op, Tensor value, std::vector<std::int32_t> inputs) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (auto i : n.inputs) n.requires_grad |= nodes_[static_cast<std::size_t>(i)].requires_grad;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  return emit(Op::add, elementwise(EwOp::add, node(a).value, node(b).value), {a.id, b.id});
}

Var Tape::sub(Var a, Var b) {
  return emit(Op::sub, elementwise(EwOp::sub, node(a).value, node(b).value), {a.id, b.id});
}

Var Tape::mul(Var a, Var b) {
  return emit(Op::mul, elementwise(EwOp::mul, node(a).value, node(b).value), {a.id, b.id});
}

Var Tape::div(Var a, Var b) {
  return emit(Op::div, elementwise(EwOp::div, node(a).value, node(b).value), {a.id, b.id});
}

Var Tape::maxelem(Var a, Var b) {
  return emit(Op::maxelem, elementwise(EwOp::max, node(a).value, node(b).value), {a.id, b.id});
}

Var Tape::matmul(Var a, Var b) {
  return emit(Op::matmul, lgms::matmul(node(a).value, node(b).value), {a.id, b.id});
}

Var Tape::reshape(Var x, Shape shape) {
  return emit(Op::reshape, lgms::reshape(node(x).value, shape), {x.id});
}

Var Tape::permute(Var x, std::vector<int> axes) {
  Var v = emit(Op::permute, lgms::permute(node(x).value, axes), {x.id});
  node(v).iattrs.assign(axes.begin(), axes.end());
  return v;
}

Var Tape::slice(Var x, int axis, std::int64_t start, std::int64_t len) {
  const Tensor& xv = node(x).value;
  if (axis < 0) axis += xv.rank();
  std::int64_t extent = xv.dim(axis);
  if (start < 0 || len < 0 || start + len > extent)
    throw std::invalid_argument("slice [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") outside axis of extent " +
                                std::to_string(extent));
  auto parts = lgms::split(xv, axis, {start, len, extent - start - len});
  Var v = emit(Op::slice, parts[1], {x.id});
  node(v).iattrs = {axis, start};
  return v;
}

std::vector<Var> Tape::split(Var x, int axis, const std::vector<std::int64_t>& sizes) {
  const Tensor& xv = node(x).value;
  if (axis < 0) axis += xv.rank();
  std::int64_t total = 0;
  for (auto s : sizes) total += s;
  if (total != xv.dim(axis))
    throw std::invalid_argument("split sizes sum to " + std::to_string(total) +
                                " but axis extent is " + std::to_string(xv.dim(axis)));
  std::vector<Var> out;
  std::int64_t off = 0;
  for (auto s : sizes) {
    out.push_back(slice(x, axis, off, s));
    off += s;
  }
  return out;
}

Var Tape::concat(std::span<const Var> parts, int axis) {
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (Var p : parts) values.push_back(node(p).value);
  Node n;
  n.op = Op::concat;
  n.value = lgms::concat(values, axis);
  if (axis < 0) axis += n.value.rank();
  n.iattrs = {axis};
  for (Var p : parts) {
    n.inputs.push_back(p.id);
    n.requires_grad |= node(p).requires_grad;
    n.iattrs.push_back(node(p).value.dim(axis));
  }
  return push(std::move(n));
}

Var Tape::sum(Var x) { return emit(Op::sum, sum_all(node(x).value), {x.id}); }

Var Tape::mean(Var x) { return emit(Op::mean, mean_all(node(x).value), {x.id}); }

Var Tape::conv2d(Var x, const nn::ConvSpec& spec, Var weight, std::optional<Var> bias) {
  if (spec.has_bias != bias.has_value())
    throw std::invalid_argument("conv2d bias presence disagrees with spec");
  const Tensor* b = bias ? &node(*bias).value : nullptr;
  std::vector<std::int32_t> inputs = {x.id, weight.id};
  if (bias) inputs.push_back(bias->id);
  Var v = emit(Op::conv2d, nn::conv2d(node(x).value, spec, node(weight).value, b),
               std::move(inputs));
  node(v).iattrs = {spec.in_channels, spec.out_channels, spec.kernel, spec.groups,
                    spec.has_bias ? 1 : 0};
  return v;
}

Var Tape::maxpool2x2(Var x) {
  std::vector<std::int64_t> argmax;
  Tensor y = nn::maxpool2x2(node(x).value, &argmax);
  Var v = emit(Op::maxpool2x2, std::move(y), {x.id});
  node(v).index_ctx = std::move(argmax);
  return v;
}

Var Tape::upsample_bilinear_2x(Var x) {
  return emit(Op::upsample2x, nn::upsample_bilinear_2x(node(x).value), {x.id});
}

Var Tape::group_norm(Var x, int num_groups, Var gamma, Var beta, double epsilon) {
  auto r = nn::group_norm(node(x).value, num_groups, node(gamma).value, node(beta).value,
                          epsilon);
  Var v = emit(Op::group_norm, std::move(r.y), {x.id, gamma.id, beta.id});
  node(v).saved = {std::move(r.xhat), std::move(r.inv_std)};
  node(v).iattrs = {num_groups};
  return v;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double epsilon) {
  auto r = nn::layer_norm(node(x).value, node(gamma).value, node(beta).value, epsilon);
  Var v = emit(Op::layer_norm, std::move(r.y), {x.id, gamma.id, beta.id});
  node(v).saved = {std::move(r.xhat), std::move(r.inv_std)};
  return v;
}

Var Tape::batch_norm(Var x, Var gamma, Var beta, const Tensor& running_mean,
                     const Tensor& running_var, double epsilon, bool training,
                     Tensor* batch_mean, Tensor* batch_var) {
  auto r = nn::batch_norm(node(x).value, node(gamma).value, node(beta).value, running_mean,
                          running_var, epsilon, training);
  if (training) {
    if (batch_mean) *batch_mean = r.batch_mean;
    if (batch_var) *batch_var = r.batch_var;
  }
  Var v = emit(Op::batch_norm, std::move(r.y), {x.id, gamma.id, beta.id});
  node(v).saved = {std::move(r.xhat), std::move(r.inv_std)};
  node(v).iattrs = {training ? 1 : 0};
  return v;
}

Var Tape::silu(Var x) { return emit(Op::silu, nn::silu(node(x).value), {x.id}); }

Var Tape::sigmoid(Var x) { return emit(Op::sigmoid, nn::sigmoid(node(x).value), {x.id}); }

Var Tape::softmax(Var x, int axis) {
  Var v = emit(Op::softmax, nn::softmax(node(x).value, axis), {x.id});
  node(v).iattrs = {axis};
  return v;
}

Var Tape::unfold_patches(Var x, int p) {
  const Tensor& xv = node(x).value;
  std::vector<std::int64_t> geom = {p, xv.dim(1), xv.dim(2), xv.dim(3)};
  Var v = emit(Op::unfold, nn::unfold_patches(xv, p), {x.id});
  node(v).iattrs = std::move(geom);
  return v;
}

Var Tape::fold_patches(Var tokens, int p, std::int64_t channels, std::int64_t h,
                       std::int64_t w) {
  Var v = emit(Op::fold, nn::fold_patches(node(tokens).value, p, channels, h, w), {tokens.id});
  node(v).iattrs = {p};
  return v;
}

Var Tape::bce_with_logits(Var logits, Var target) {
  if (node(target).requires_grad)
    throw std::invalid_argument("bce_with_logits target must not require gradients");
  return emit(Op::bce_logits, nn::bce_with_logits(node(logits).value, node(target).value),
              {logits.id, target.id});
}

Var Tape::opaque(Var x) { return emit(Op::opaque, node(x).value, {x.id}); }

void Tape::accumulate(std::int32_t id, const Tensor& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad = elementwise(EwOp::add, n.grad, g);
  }
}

// --- backward rules -----------------------------------------------------------

struct BackwardRules {
  using Fn = void (*)(Tape&, std::int32_t);

  static const Tensor& in_val(Tape& t, const Tape::Node& n, std::size_t k) {
    return t.nodes_[static_cast<std::size_t>(n.inputs[k])].value;
  }

  static void ew_binary(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    const Tensor& a = in_val(t, n, 0);
    const Tensor& b = in_val(t, n, 1);
    const Tensor& g = n.grad;
    Tensor ga, gb;
    switch (n.op) {
      case Op::add:
        ga = g;
        gb = g;
        break;
      case Op::sub:
        ga = g;
        gb = elementwise(EwOp::mul, g, -1.0);
        break;
      case Op::mul:
        ga = elementwise(EwOp::mul, g, b);
        gb = elementwise(EwOp::mul, g, a);
        break;
      case Op::div: {
        ga = elementwise(EwOp::div, g, b);
        Tensor q = elementwise(EwOp::div, n.value, b);  // a / b^2 = value / b
        gb = elementwise(EwOp::mul, elementwise(EwOp::mul, g, q), -1.0);
        break;
      }
      case Op::maxelem: {
        // Tie convention: the first operand takes the gradient.
        Tensor zero = Tensor::zeros(n.value.shape(), n.value.dtype());
        Tensor ab = elementwise(EwOp::add, a, zero);  // broadcast to output shape
        Tensor bb = elementwise(EwOp::add, b, zero);
        Tensor ma = Tensor::zeros(n.value.shape(), n.value.dtype());
        Tensor mb = Tensor::zeros(n.value.shape(), n.value.dtype());
        for (std::int64_t i = 0; i < n.value.numel(); ++i) {
          bool first = ab.at_flat(i) >= bb.at_flat(i);
          ma.set_flat(i, first ? 1.0 : 0.0);
          mb.set_flat(i, first ? 0.0 : 1.0);
        }
        ga = elementwise(EwOp::mul, g, ma);
        gb = elementwise(EwOp::mul, g, mb);
        break;
      }
      default: return;
    }
    t.accumulate(n.inputs[0], sum_to_shape(ga, a.shape()));
    t.accumulate(n.inputs[1], sum_to_shape(gb, b.shape()));
  }

  static Tensor transpose_last2(const Tensor& x) {
    if (x.rank() == 2) return permute(x, {1, 0});
    return permute(x, {0, 2, 1});
  }

  static void matmul_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    const Tensor& a = in_val(t, n, 0);
    const Tensor& b = in_val(t, n, 1);
    const Tensor& g = n.grad;
    Tensor da = sum_to_shape(lgms::matmul(g, transpose_last2(b)), a.shape());
    Tensor db = sum_to_shape(lgms::matmul(transpose_last2(a), g), b.shape());
    t.accumulate(n.inputs[0], da);
    t.accumulate(n.inputs[1], db);
  }

  static void reshape_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0], lgms::reshape(n.grad, in_val(t, n, 0).shape()));
  }

  static void permute_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    std::vector<int> inv(n.iattrs.size());
    for (std::size_t i = 0; i < n.iattrs.size(); ++i)
      inv[static_cast<std::size_t>(n.iattrs[i])] = static_cast<int>(i);
    t.accumulate(n.inputs[0], lgms::permute(n.grad, inv));
  }

  static void slice_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    const Tensor& x = in_val(t, n, 0);
    int axis = static_cast<int>(n.iattrs[0]);
    std::int64_t start = n.iattrs[1];
    std::int64_t len = n.value.dim(axis);
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    std::int64_t ax = x.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t l = 0; l < len; ++l)
        for (std::int64_t in = 0; in < inner; ++in)
          gx.set_flat((o * ax + start + l) * inner + in,
                      n.grad.at_flat((o * len + l) * inner + in));
    t.accumulate(n.inputs[0], gx);
  }

  static void concat_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    int axis = static_cast<int>(n.iattrs[0]);
    std::vector<std::int64_t> sizes(n.iattrs.begin() + 1, n.iattrs.end());
    auto parts = lgms::split(n.grad, axis, sizes);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) t.accumulate(n.inputs[i], parts[i]);
  }

  static void sum_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    const Tensor& x = in_val(t, n, 0);
    t.accumulate(n.inputs[0], Tensor::full(x.shape(), n.grad.item(), x.dtype()));
  }

  static void mean_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    const Tensor& x = in_val(t, n, 0);
    t.accumulate(n.inputs[0],
                 Tensor::full(x.shape(), n.grad.item() / static_cast<double>(x.numel()),
                              x.dtype()));
  }

  static void conv2d_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    nn::ConvSpec spec;
    spec.in_channels = n.iattrs[0];
    spec.out_channels = n.iattrs[1];
    spec.kernel = static_cast<int>(n.iattrs[2]);
    spec.groups = static_cast<int>(n.iattrs[3]);
    spec.has_bias = n.iattrs[4] != 0;
    auto grads = nn::conv2d_backward(n.grad, in_val(t, n, 0), in_val(t, n, 1), spec);
    t.accumulate(n.inputs[0], grads.input);
    t.accumulate(n.inputs[1], grads.weight);
    if (spec.has_bias) t.accumulate(n.inputs[2], grads.bias);
  }

  static void maxpool_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0],
                 nn::maxpool2x2_backward(n.grad, n.index_ctx, in_val(t, n, 0).shape()));
  }

  static void upsample_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0],
                 nn::upsample_bilinear_2x_backward(n.grad, in_val(t, n, 0).shape()));
  }

  static void group_norm_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    auto g = nn::group_norm_backward(n.grad, n.saved[0], n.saved[1], in_val(t, n, 1),
                                     static_cast<int>(n.iattrs[0]));
    t.accumulate(n.inputs[0], g.input);
    t.accumulate(n.inputs[1], g.gamma);
    t.accumulate(n.inputs[2], g.beta);
  }

  static void layer_norm_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    auto g = nn::layer_norm_backward(n.grad, n.saved[0], n.saved[1], in_val(t, n, 1));
    t.accumulate(n.inputs[0], g.input);
    t.accumulate(n.inputs[1], g.gamma);
    t.accumulate(n.inputs[2], g.beta);
  }

  static void batch_norm_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    auto g = nn::batch_norm_backward(n.grad, n.saved[0], n.saved[1], in_val(t, n, 1),
                                     n.iattrs[0] != 0);
    t.accumulate(n.inputs[0], g.input);
    t.accumulate(n.inputs[1], g.gamma);
    t.accumulate(n.inputs[2], g.beta);
  }

  static void silu_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0], nn::silu_backward(n.grad, in_val(t, n, 0)));
  }

  static void sigmoid_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0], nn::sigmoid_backward(n.grad, n.value));
  }

  static void softmax_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0],
                 nn::softmax_backward(n.grad, n.value, static_cast<int>(n.iattrs[0])));
  }

  static void unfold_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0], nn::fold_patches(n.grad, static_cast<int>(n.iattrs[0]),
                                               n.iattrs[1], n.iattrs[2], n.iattrs[3]));
  }

  static void fold_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0], nn::unfold_patches(n.grad, static_cast<int>(n.iattrs[0])));
  }

  static void bce_bw(Tape& t, std::int32_t id) {
    Tape::Node& n = t.nodes_[static_cast<std::size_t>(id)];
    t.accumulate(n.inputs[0],
                 nn::bce_with_logits_backward(n.grad, in_val(t, n, 0), in_val(t, n, 1)));
  }

  static const std::unordered_map<Op, Fn>& registry() {
    static const std::unordered_map<Op, Fn> rules = {
        {Op::add, &ew_binary},       {Op::sub, &ew_binary},
        {Op::mul, &ew_binary},       {Op::div, &ew_binary},
        {Op::maxelem, &ew_binary},   {Op::matmul, &matmul_bw},
        {Op::reshape, &reshape_bw},  {Op::permute, &permute_bw},
        {Op::slice, &slice_bw},      {Op::concat, &concat_bw},
        {Op::sum, &sum_bw},          {Op::mean, &mean_bw},
        {Op::conv2d, &conv2d_bw},    {Op::maxpool2x2, &maxpool_bw},
        {Op::upsample2x, &upsample_bw},
        {Op::group_norm, &group_norm_bw},
        {Op::layer_norm, &layer_norm_bw},
        {Op::batch_norm, &batch_norm_bw},
        {Op::silu, &silu_bw},        {Op::sigmoid, &sigmoid_bw},
        {Op::softmax, &softmax_bw},  {Op::unfold, &unfold_bw},
        {Op::fold, &fold_bw},        {Op::bce_logits, &bce_bw},
    };
    return rules;
  }
};

GradMap Tape::backward(Var output) {
  Node& out = node(output);
  if (out.value.numel() != 1)
    throw std::invalid_argument("backward requires a scalar output, got shape " +
                                shape_str(out.value.shape()));
  // Reset any state from a previous call on this tape.
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  out.grad = Tensor::full(out.value.shape(), 1.0, out.value.dtype());
  out.has_grad = true;

  const auto& rules = BackwardRules::registry();
  for (std::int32_t id = output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.requires_grad || n.op == Op::leaf) continue;
    auto it = rules.find(n.op);
    if (it == rules.end())
      throw std::runtime_error(std::string("no backward rule registered for op '") +
                               op_name(n.op) + "'");
    it->second(*this, id);
  }

  GradMap grads;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::leaf && n.requires_grad) {
      grads[static_cast<std::int32_t>(i)] =
          n.has_grad ? n.grad : Tensor::zeros(n.value.shape(), n.value.dtype());
    }
  }
  return grads;
}

// --- gradcheck -------------------------------------------------------------------

GradCheckReport gradcheck(const TapeFn& f, std::span<const Tensor> inputs, double step,
                          double tol, std::int64_t max_coords_per_input, std::uint64_t seed) {
  if (step <= 0) throw std::invalid_argument("gradcheck step must be > 0");
  for (const Tensor& in : inputs)
    if (in.dtype() != DType::f64)
      throw std::invalid_argument("gradcheck inputs must be float64");

  auto eval = [&](std::span<const Tensor> xs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const Tensor& x : xs) vars.push_back(tape.leaf(x, true));
    Var out = f(tape, vars);
    double v = out.value().item();
    if (!std::isfinite(v)) throw std::runtime_error("gradcheck: non-finite function value");
    return v;
  };

  // Analytic gradients from one recorded pass.
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& x : inputs) vars.push_back(tape.leaf(x, true));
  Var out = f(tape, vars);
  if (out.value().numel() != 1)
    throw std::invalid_argument("gradcheck function must return a scalar");
  if (!std::isfinite(out.value().item()))
    throw std::runtime_error("gradcheck: non-finite function value at base point");
  GradMap grads = tape.backward(out);

  GradCheckReport report;
  report.step = step;
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  Rng rng(seed);

  for (std::size_t i = 0; i < work.size(); ++i) {
    const Tensor& ad = grads.at(vars[i].id);
    std::int64_t n = work[i].numel();
    std::vector<std::int64_t> coords;
    if (max_coords_per_input > 0 && n > max_coords_per_input) {
      std::set<std::int64_t> pick;
      while (static_cast<std::int64_t>(pick.size()) < max_coords_per_input)
        pick.insert(rng.below(n));
      coords.assign(pick.begin(), pick.end());
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t j = 0; j < n; ++j) coords[static_cast<std::size_t>(j)] = j;
    }

    GradCheckReport::PerInput per;
    per.name = "input" + std::to_string(i);
    per.coords_checked = static_cast<std::int64_t>(coords.size());
    for (std::int64_t j : coords) {
      double orig = work[i].at_flat(j);
      work[i].set_flat(j, orig + step);
      double fp = eval(work);
      work[i].set_flat(j, orig - step);
      double fm = eval(work);
      work[i].set_flat(j, orig);
      double fd = (fp - fm) / (2.0 * step);
      double av = ad.at_flat(j);
      if (!std::isfinite(fd) || !std::isfinite(av))
        throw std::runtime_error("gradcheck: non-finite gradient at input " + std::to_string(i) +
                                 " coordinate " + std::to_string(j));
      double rel = std::abs(av - fd) / std::max({std::abs(av), std::abs(fd), 1e-8});
      per.max_rel_err = std::max(per.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, per.max_rel_err);
    report.inputs.push_back(std::move(per));
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace lgms::ad
