#include "lgms/arch.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lgms::arch {

using ad::Tape;
using ad::Var;
using json = nlohmann::json;

// --- ModelConfig -------------------------------------------------------------

bool ModelConfig::is_gms_stage(int stage) const {
  return std::find(gms_stages.begin(), gms_stages.end(), stage) != gms_stages.end();
}

std::int64_t ModelConfig::expanded_channels(int stage) const {
  return gms_expansion * stage_channels[static_cast<std::size_t>(stage - 1)];
}

std::int64_t ModelConfig::transformer_channels(int stage) const {
  return expanded_channels(stage) * tc_ratio.t / tc_ratio.sum();
}

std::int64_t ModelConfig::conv_branch_channels(int stage) const {
  return expanded_channels(stage) - transformer_channels(stage);
}

std::int64_t ModelConfig::token_dim(int stage) const {
  return transformer_channels(stage) * patch_size * patch_size;
}

namespace {

[[noreturn]] void cfg_error(const std::string& field, const std::string& msg) {
  throw std::invalid_argument("config field " + field + ": " + msg);
}

}  // namespace

void ModelConfig::validate() const {
  if (stage_channels.size() != 5) cfg_error("stage_channels", "expected 5 stage widths");
  for (std::size_t i = 0; i < 5; ++i) {
    std::string field = "stage_channels[" + std::to_string(i) + "]";
    if (stage_channels[i] <= 0) cfg_error(field, "must be positive");
    if (stage_channels[i] % 4 != 0) cfg_error(field, "must be divisible by 4");
  }
  if (lms_kernels.size() != 4) cfg_error("lms_kernels", "expected 4 kernel sizes");
  for (std::size_t i = 0; i < 4; ++i) {
    std::string field = "lms_kernels[" + std::to_string(i) + "]";
    if (lms_kernels[i] < 1 || lms_kernels[i] % 2 == 0) cfg_error(field, "must be odd and >= 1");
    if (i > 0 && lms_kernels[i] < lms_kernels[i - 1])
      cfg_error(field, "kernel sizes must be non-decreasing");
  }
  if (tc_ratio.t < 0 || tc_ratio.c < 0 || tc_ratio.sum() < 1)
    cfg_error("tc_ratio", "both parts must be >= 0 with a positive sum");
  if (patch_size < 1) cfg_error("patch_size", "must be >= 1");
  if (gms_expansion < 1) cfg_error("gms_expansion", "must be >= 1");
  if (attention.num_heads < 1) cfg_error("attention.num_heads", "must be >= 1");
  if (attention.depth < 1) cfg_error("attention.depth", "must be >= 1");
  if (attention.mlp_ratio <= 0) cfg_error("attention.mlp_ratio", "must be positive");
  if (input_channels < 1) cfg_error("input_channels", "must be >= 1");
  if (num_classes < 1) cfg_error("num_classes", "must be >= 1");
  for (int s : gms_stages)
    if (s < 1 || s > 5) cfg_error("gms_stages", "stage indices must lie in [1, 5]");
  for (int s = 1; s <= 5; ++s) {
    if (!is_gms_stage(s)) continue;
    std::string field = "stage_channels[" + std::to_string(s - 1) + "]";
    std::int64_t c = stage_channels[static_cast<std::size_t>(s - 1)];
    if (c % tc_ratio.sum() != 0)
      cfg_error(field, "GMS stage width must be divisible by the tc_ratio sum " +
                           std::to_string(tc_ratio.sum()));
    if (expanded_channels(s) % tc_ratio.sum() != 0)
      cfg_error(field, "expanded width not divisible by the tc_ratio sum");
    if (tc_ratio.t > 0 && token_dim(s) % attention.num_heads != 0)
      cfg_error(field, "transformer token dim " + std::to_string(token_dim(s)) +
                           " not divisible by attention.num_heads");
  }
}

json ModelConfig::to_json() const {
  json j;
  j["stage_channels"] = stage_channels;
  j["lms_kernels"] = lms_kernels;
  j["tc_ratio"] = {tc_ratio.t, tc_ratio.c};
  j["patch_size"] = patch_size;
  j["gms_expansion"] = gms_expansion;
  j["attention"] = {{"num_heads", attention.num_heads},
                    {"mlp_ratio", attention.mlp_ratio},
                    {"depth", attention.depth}};
  j["gms_stages"] = gms_stages;
  j["input_channels"] = input_channels;
  j["num_classes"] = num_classes;
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  static const std::set<std::string> known = {
      "stage_channels", "lms_kernels",    "tc_ratio",  "patch_size", "gms_expansion",
      "attention",      "gms_stages",     "input_channels", "num_classes"};
  if (!j.is_object()) throw std::invalid_argument("config field <root>: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) cfg_error(it.key(), "unknown config field");

  ModelConfig cfg;
  try {
    if (j.contains("stage_channels"))
      cfg.stage_channels = j.at("stage_channels").get<std::vector<std::int64_t>>();
    if (j.contains("lms_kernels"))
      cfg.lms_kernels = j.at("lms_kernels").get<std::vector<int>>();
    if (j.contains("tc_ratio")) {
      auto v = j.at("tc_ratio").get<std::vector<int>>();
      if (v.size() != 2) cfg_error("tc_ratio", "expected [transformer, conv]");
      cfg.tc_ratio = {v[0], v[1]};
    }
    if (j.contains("patch_size")) cfg.patch_size = j.at("patch_size").get<int>();
    if (j.contains("gms_expansion")) cfg.gms_expansion = j.at("gms_expansion").get<int>();
    if (j.contains("attention")) {
      const json& a = j.at("attention");
      static const std::set<std::string> attn_known = {"num_heads", "mlp_ratio", "depth"};
      for (auto it = a.begin(); it != a.end(); ++it)
        if (!attn_known.count(it.key())) cfg_error("attention." + it.key(), "unknown config field");
      if (a.contains("num_heads")) cfg.attention.num_heads = a.at("num_heads").get<int>();
      if (a.contains("mlp_ratio")) cfg.attention.mlp_ratio = a.at("mlp_ratio").get<double>();
      if (a.contains("depth")) cfg.attention.depth = a.at("depth").get<int>();
    }
    if (j.contains("gms_stages"))
      cfg.gms_stages = j.at("gms_stages").get<std::vector<int>>();
    if (j.contains("input_channels"))
      cfg.input_channels = j.at("input_channels").get<std::int64_t>();
    if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  return cfg;
}

// --- ParamStore ----------------------------------------------------------------

void ParamStore::add(std::string name, Tensor t, bool requires_grad) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), std::move(t), requires_grad});
}

bool ParamStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

const Tensor& ParamStore::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].tensor;
}

bool ParamStore::requires_grad(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].requires_grad;
}

void ParamStore::set(std::string_view name, Tensor t) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  Entry& e = entries_[it->second];
  if (e.tensor.shape() != t.shape() || e.tensor.dtype() != t.dtype())
    throw std::invalid_argument("parameter " + e.name + " shape/dtype mismatch on set");
  e.tensor = std::move(t);
}

std::int64_t ParamStore::trainable_elements() const {
  std::int64_t n = 0;
  for (const Entry& e : entries_)
    if (e.requires_grad) n += e.tensor.numel();
  return n;
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const Entry& e : entries_) n += e.tensor.numel();
  return n;
}

ParamStore ParamStore::astype(DType dt) const {
  ParamStore out;
  for (const Entry& e : entries_) out.add(e.name, e.tensor.astype(dt), e.requires_grad);
  return out;
}

void ParamStore::save_lgck(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write("LGCK", 4);
  f.put(1);
  std::uint32_t count = static_cast<std::uint32_t>(entries_.size());
  unsigned char cb[4] = {static_cast<unsigned char>(count), static_cast<unsigned char>(count >> 8),
                         static_cast<unsigned char>(count >> 16),
                         static_cast<unsigned char>(count >> 24)};
  f.write(reinterpret_cast<const char*>(cb), 4);
  for (const Entry& e : entries_) {
    if (e.name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long for LGCK");
    std::uint16_t len = static_cast<std::uint16_t>(e.name.size());
    unsigned char lb[2] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8)};
    f.write(reinterpret_cast<const char*>(lb), 2);
    f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_lgts(e.tensor, f);
  }
  if (!f) throw std::runtime_error("LGCK: write failed");
}

void ParamStore::load_lgck(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "LGCK", 4) != 0) throw std::runtime_error("LGCK: bad magic");
  int ver = f.get();
  if (ver != 1) throw std::runtime_error("LGCK: unsupported version " + std::to_string(ver));
  unsigned char cb[4];
  f.read(reinterpret_cast<char*>(cb), 4);
  if (!f) throw std::runtime_error("LGCK: truncated header");
  std::uint32_t count = static_cast<std::uint32_t>(cb[0]) | (static_cast<std::uint32_t>(cb[1]) << 8) |
                        (static_cast<std::uint32_t>(cb[2]) << 16) |
                        (static_cast<std::uint32_t>(cb[3]) << 24);
  if (count != entries_.size())
    throw std::runtime_error("LGCK: checkpoint has " + std::to_string(count) +
                             " entries, model expects " + std::to_string(entries_.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    unsigned char lb[2];
    f.read(reinterpret_cast<char*>(lb), 2);
    if (!f) throw std::runtime_error("LGCK: truncated entry");
    std::uint16_t len = static_cast<std::uint16_t>(lb[0] | (lb[1] << 8));
    std::string name(len, '\0');
    f.read(name.data(), len);
    Tensor t = read_lgts(f);
    if (name != entries_[i].name)
      throw std::runtime_error("LGCK: entry " + std::to_string(i) + " is '" + name +
                               "', model expects '" + entries_[i].name + "'");
    if (t.shape() != entries_[i].tensor.shape() || t.dtype() != entries_[i].tensor.dtype())
      throw std::runtime_error("LGCK: entry '" + name + "' has shape " + shape_str(t.shape()) +
                               ", model expects " + shape_str(entries_[i].tensor.shape()));
    set(name, std::move(t));
  }
}

// --- Forward context --------------------------------------------------------------

Var Forward::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape.leaf(store.at(name), store.requires_grad(name));
  bound_.emplace(name, v);
  return v;
}

void Forward::preset(const std::string& name, ad::Var v) { bound_[name] = v; }

void Forward::pend_stats(const std::string& mean_name, const std::string& var_name,
                         const Tensor& batch_mean, const Tensor& batch_var, double momentum) {
  Tensor m0 = store.at(mean_name);
  Tensor v0 = store.at(var_name);
  Tensor m = add(mul(m0, Tensor::scalar(1.0 - momentum, m0.dtype())),
                 mul(batch_mean, Tensor::scalar(momentum, m0.dtype())));
  Tensor v = add(mul(v0, Tensor::scalar(1.0 - momentum, v0.dtype())),
                 mul(batch_var, Tensor::scalar(momentum, v0.dtype())));
  pending_.push_back({mean_name, std::move(m)});
  pending_.push_back({var_name, std::move(v)});
}

void Forward::commit_stats() {
  for (Pending& p : pending_) store.set(p.name, std::move(p.value));
  pending_.clear();
}

std::unordered_map<std::string, Tensor> Forward::named_grads(const ad::GradMap& grads) const {
  std::unordered_map<std::string, Tensor> out;
  for (const auto& [name, var] : bound_) {
    auto it = grads.find(var.id);
    if (it != grads.end()) out.emplace(name, it->second);
  }
  return out;
}

// --- layers ---------------------------------------------------------------------------

namespace {

struct ConvLayer {
  nn::ConvSpec spec;
  std::string base;

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    double fan_in = static_cast<double>(spec.in_channels / spec.groups) *
                    static_cast<double>(spec.kernel) * static_cast<double>(spec.kernel);
    st.add(base + ".w",
           random_normal(rng, spec.weight_shape(), 0.0, std::sqrt(2.0 / fan_in), dt), true);
    if (spec.has_bias) st.add(base + ".b", Tensor::zeros({spec.out_channels}, dt), true);
  }

  Var fwd(Forward& ctx, Var x) const {
    std::optional<Var> b;
    if (spec.has_bias) b = ctx.param(base + ".b");
    return ctx.tape.conv2d(x, spec, ctx.param(base + ".w"), b);
  }

  std::int64_t params() const {
    return spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel * spec.kernel +
           (spec.has_bias ? spec.out_channels : 0);
  }

  std::int64_t flops(std::int64_t h, std::int64_t w) const {
    std::int64_t macs =
        h * w * spec.out_channels * (spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
    return 2 * macs + (spec.has_bias ? h * w * spec.out_channels : 0);
  }
};

ConvLayer make_conv(std::string base, std::int64_t in, std::int64_t out, int k, int groups,
                    bool bias) {
  return ConvLayer{nn::ConvSpec{in, out, k, groups, bias}, std::move(base)};
}

struct BnLayer {
  std::int64_t channels = 0;
  std::string base;
  double epsilon = 1e-5;
  double momentum = 0.1;

  void reg(ParamStore& st, Rng&, DType dt) const {
    st.add(base + ".gamma", Tensor::full({channels}, 1.0, dt), true);
    st.add(base + ".beta", Tensor::zeros({channels}, dt), true);
    st.add(base + ".running_mean", Tensor::zeros({channels}, dt), false);
    st.add(base + ".running_var", Tensor::full({channels}, 1.0, dt), false);
  }

  Var fwd(Forward& ctx, Var x) const {
    Tensor bm, bv;
    Var y = ctx.tape.batch_norm(x, ctx.param(base + ".gamma"), ctx.param(base + ".beta"),
                                ctx.store.at(base + ".running_mean"),
                                ctx.store.at(base + ".running_var"), epsilon, ctx.training,
                                &bm, &bv);
    if (ctx.training)
      ctx.pend_stats(base + ".running_mean", base + ".running_var", bm, bv, momentum);
    return y;
  }

  std::int64_t params() const { return 2 * channels; }  // running stats are buffers
};

struct GnLayer {
  std::int64_t channels = 0;
  int groups = 1;
  std::string base;
  double epsilon = 1e-5;

  void reg(ParamStore& st, Rng&, DType dt) const {
    st.add(base + ".gamma", Tensor::full({channels}, 1.0, dt), true);
    st.add(base + ".beta", Tensor::zeros({channels}, dt), true);
  }

  Var fwd(Forward& ctx, Var x) const {
    return ctx.tape.group_norm(x, groups, ctx.param(base + ".gamma"), ctx.param(base + ".beta"),
                               epsilon);
  }

  std::int64_t params() const { return 2 * channels; }
};

// conv (no bias) -> batch norm -> SiLU; the stem and every stage transition.
struct ConvBnSilu {
  ConvLayer conv;
  BnLayer bn;

  static ConvBnSilu make(std::string base, std::int64_t in, std::int64_t out, int k) {
    return {make_conv(base + ".conv", in, out, k, 1, false), BnLayer{out, base + ".bn"}};
  }

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    conv.reg(st, rng, dt);
    bn.reg(st, rng, dt);
  }

  Var fwd(Forward& ctx, Var x) const { return ctx.tape.silu(bn.fwd(ctx, conv.fwd(ctx, x))); }

  std::int64_t params() const { return conv.params() + bn.params(); }
  std::int64_t flops(std::int64_t h, std::int64_t w) const { return conv.flops(h, w); }
};

struct MhsaStack {
  nn::AttentionSpec spec;
  std::string base;

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    std::int64_t d = spec.embed_dim, hid = spec.hidden_dim();
    double ws = std::sqrt(2.0 / static_cast<double>(d));
    double hs = std::sqrt(2.0 / static_cast<double>(hid));
    for (int l = 0; l < spec.depth; ++l) {
      std::string p = base + ".l" + std::to_string(l);
      st.add(p + ".ln1.gamma", Tensor::full({d}, 1.0, dt), true);
      st.add(p + ".ln1.beta", Tensor::zeros({d}, dt), true);
      for (const char* nm : {".wq", ".wk", ".wv", ".wo"})
        st.add(p + nm, random_normal(rng, {d, d}, 0.0, ws, dt), true);
      for (const char* nm : {".bq", ".bv", ".bo"})  // no key bias, see MhsaLayerVars
        st.add(p + nm, Tensor::zeros({d}, dt), true);
      st.add(p + ".ln2.gamma", Tensor::full({d}, 1.0, dt), true);
      st.add(p + ".ln2.beta", Tensor::zeros({d}, dt), true);
      st.add(p + ".w1", random_normal(rng, {d, hid}, 0.0, ws, dt), true);
      st.add(p + ".b1", Tensor::zeros({hid}, dt), true);
      st.add(p + ".w2", random_normal(rng, {hid, d}, 0.0, hs, dt), true);
      st.add(p + ".b2", Tensor::zeros({d}, dt), true);
    }
  }

  Var fwd(Forward& ctx, Var tokens) const {
    std::vector<nn::MhsaLayerVars> layers;
    layers.reserve(static_cast<std::size_t>(spec.depth));
    for (int l = 0; l < spec.depth; ++l) {
      std::string p = base + ".l" + std::to_string(l);
      nn::MhsaLayerVars v;
      v.ln1_gamma = ctx.param(p + ".ln1.gamma");
      v.ln1_beta = ctx.param(p + ".ln1.beta");
      v.wq = ctx.param(p + ".wq");
      v.bq = ctx.param(p + ".bq");
      v.wk = ctx.param(p + ".wk");
      v.wv = ctx.param(p + ".wv");
      v.bv = ctx.param(p + ".bv");
      v.wo = ctx.param(p + ".wo");
      v.bo = ctx.param(p + ".bo");
      v.ln2_gamma = ctx.param(p + ".ln2.gamma");
      v.ln2_beta = ctx.param(p + ".ln2.beta");
      v.w1 = ctx.param(p + ".w1");
      v.b1 = ctx.param(p + ".b1");
      v.w2 = ctx.param(p + ".w2");
      v.b2 = ctx.param(p + ".b2");
      layers.push_back(v);
    }
    return nn::mhsa_block(ctx.tape, tokens, spec, layers);
  }

  std::int64_t params() const {
    std::int64_t d = spec.embed_dim, hid = spec.hidden_dim();
    std::int64_t per = 2 * d + 4 * d * d + 3 * d  // q/k/v/o weights, q/v/o biases
                       + 2 * d + (d * hid + hid) + (hid * d + d);
    return per * spec.depth;
  }

  // 2*MAC for the QKVO projections, attention matmuls and the MLP; softmax
  // and layer norms excluded by convention.
  std::int64_t flops(std::int64_t tokens) const {
    std::int64_t d = spec.embed_dim, hid = spec.hidden_dim(), t = tokens;
    std::int64_t proj = 4 * 2 * t * d * d + 3 * t * d;  // k projection is bias-free
    std::int64_t attn = 4 * t * t * d;                  // QK^T and AV, summed over heads
    std::int64_t mlp = (2 * t * d * hid + t * hid) + (2 * t * hid * d + t * d);
    return (proj + attn + mlp) * spec.depth;
  }
};

struct LmsBlock {
  std::int64_t channels = 0;
  std::array<ConvLayer, 4> dw;
  GnLayer gn;
  ConvLayer bottleneck;
  BnLayer bn;
  ConvLayer restore;

  static LmsBlock make(const std::string& base, std::int64_t c,
                       const std::vector<int>& kernels) {
    LmsBlock b;
    b.channels = c;
    std::int64_t q = c / 4;
    for (int i = 0; i < 4; ++i)
      b.dw[static_cast<std::size_t>(i)] =
          make_conv(base + ".dw" + std::to_string(i), q, q, kernels[static_cast<std::size_t>(i)],
                    static_cast<int>(q), false);
    b.gn = GnLayer{c, 4, base + ".gn"};
    b.bottleneck = make_conv(base + ".squeeze", c, c / 4, 1, 1, false);
    b.bn = BnLayer{c / 4, base + ".bn"};
    b.restore = make_conv(base + ".restore", c / 4, c, 3, 1, true);
    return b;
  }

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    for (const auto& d : dw) d.reg(st, rng, dt);
    gn.reg(st, rng, dt);
    bottleneck.reg(st, rng, dt);
    bn.reg(st, rng, dt);
    restore.reg(st, rng, dt);
  }

  Var fwd(Forward& ctx, Var x) const {
    std::int64_t q = channels / 4;
    auto parts = ctx.tape.split(x, 1, {q, q, q, q});
    std::vector<Var> outs;
    for (int i = 0; i < 4; ++i)
      outs.push_back(dw[static_cast<std::size_t>(i)].fwd(ctx, parts[static_cast<std::size_t>(i)]));
    Var cat = ctx.tape.concat(outs, 1);
    Var h = ctx.tape.add(ctx.tape.silu(gn.fwd(ctx, cat)), x);
    Var b = ctx.tape.silu(bn.fwd(ctx, bottleneck.fwd(ctx, h)));
    return restore.fwd(ctx, b);
  }

  std::int64_t params() const {
    std::int64_t p = 0;
    for (const auto& d : dw) p += d.params();
    return p + gn.params() + bottleneck.params() + bn.params() + restore.params();
  }

  std::int64_t flops(std::int64_t h, std::int64_t w) const {
    std::int64_t f = 0;
    for (const auto& d : dw) f += d.flops(h, w);
    return f + bottleneck.flops(h, w) + restore.flops(h, w);
  }
};

struct GmsBlock {
  std::int64_t channels = 0, expanded = 0, t_channels = 0, c_channels = 0;
  int patch = 2;
  ConvLayer local3;
  ConvLayer expand1;
  ConvLayer dwc;     // conv branch; absent when c_channels == 0
  MhsaStack attn;    // transformer branch; absent when t_channels == 0
  ConvLayer fuse1;
  ConvLayer out3;

  static GmsBlock make(const std::string& base, const ModelConfig& cfg, int stage) {
    GmsBlock b;
    b.channels = cfg.stage_channels[static_cast<std::size_t>(stage - 1)];
    b.expanded = cfg.expanded_channels(stage);
    b.t_channels = cfg.transformer_channels(stage);
    b.c_channels = cfg.conv_branch_channels(stage);
    b.patch = cfg.patch_size;
    b.local3 = make_conv(base + ".local", b.channels, b.channels, 3, 1, true);
    b.expand1 = make_conv(base + ".expand", b.channels, b.expanded, 1, 1, true);
    if (b.c_channels > 0)
      b.dwc = make_conv(base + ".dwconv", b.c_channels, b.c_channels, 3,
                        static_cast<int>(b.c_channels), true);
    if (b.t_channels > 0) {
      b.attn.spec = nn::AttentionSpec{cfg.token_dim(stage), cfg.attention.num_heads,
                                      cfg.attention.mlp_ratio, cfg.attention.depth};
      b.attn.base = base + ".attn";
    }
    b.fuse1 = make_conv(base + ".fuse", b.expanded, b.channels, 1, 1, true);
    b.out3 = make_conv(base + ".out", 2 * b.channels, b.channels, 3, 1, true);
    return b;
  }

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    local3.reg(st, rng, dt);
    expand1.reg(st, rng, dt);
    if (c_channels > 0) dwc.reg(st, rng, dt);
    if (t_channels > 0) attn.reg(st, rng, dt);
    fuse1.reg(st, rng, dt);
    out3.reg(st, rng, dt);
  }

  Var fwd(Forward& ctx, Var x) const {
    const Tensor& xv = x.value();
    std::int64_t h = xv.dim(2), w = xv.dim(3);
    if (t_channels > 0 && (h % patch != 0 || w % patch != 0))
      throw std::invalid_argument("GMS stage input " + shape_str(xv.shape()) +
                                  " not divisible by patch size " + std::to_string(patch));
    Var e = expand1.fwd(ctx, local3.fwd(ctx, x));
    std::vector<Var> branches;
    if (c_channels > 0 && t_channels > 0) {
      auto parts = ctx.tape.split(e, 1, {c_channels, t_channels});
      branches.push_back(dwc.fwd(ctx, parts[0]));
      branches.push_back(transformer(ctx, parts[1], h, w));
    } else if (c_channels > 0) {
      branches.push_back(dwc.fwd(ctx, e));
    } else {
      branches.push_back(transformer(ctx, e, h, w));
    }
    Var mixed = branches.size() == 1 ? branches[0] : ctx.tape.concat(branches, 1);
    Var fused = fuse1.fwd(ctx, mixed);
    std::vector<Var> both = {fused, x};
    return out3.fwd(ctx, ctx.tape.concat(both, 1));
  }

  Var transformer(Forward& ctx, Var xt, std::int64_t h, std::int64_t w) const {
    Var tok = ctx.tape.unfold_patches(xt, patch);
    tok = attn.fwd(ctx, tok);
    return ctx.tape.fold_patches(tok, patch, t_channels, h, w);
  }

  std::int64_t params() const {
    std::int64_t p = local3.params() + expand1.params() + fuse1.params() + out3.params();
    if (c_channels > 0) p += dwc.params();
    if (t_channels > 0) p += attn.params();
    return p;
  }

  std::int64_t flops(std::int64_t h, std::int64_t w) const {
    std::int64_t f = local3.flops(h, w) + expand1.flops(h, w) + fuse1.flops(h, w) +
                     out3.flops(h, w);
    if (c_channels > 0) f += dwc.flops(h, w);
    if (t_channels > 0) f += attn.flops((h / patch) * (w / patch));
    return f;
  }
};

// Skip-connection merger: a 3x3 convolution per source (the blocked
// equivalent of a groups=2 convolution whose group boundary sits exactly at
// the encoder/decoder seam, also valid when the two widths differ), then
// norm + SiLU and a pointwise projection to the stage width + norm + SiLU.
struct FusionBlock {
  std::int64_t c_enc = 0, c_dec = 0, c_out = 0;
  ConvLayer conv_enc, conv_dec;
  BnLayer bn1;
  ConvLayer pw;
  BnLayer bn2;

  static FusionBlock make(const std::string& base, std::int64_t ce, std::int64_t cd,
                          std::int64_t out) {
    FusionBlock f;
    f.c_enc = ce;
    f.c_dec = cd;
    f.c_out = out;
    f.conv_enc = make_conv(base + ".genc", ce, ce, 3, 1, false);
    f.conv_dec = make_conv(base + ".gdec", cd, cd, 3, 1, false);
    f.bn1 = BnLayer{ce + cd, base + ".bn1"};
    f.pw = make_conv(base + ".pw", ce + cd, out, 1, 1, false);
    f.bn2 = BnLayer{out, base + ".bn2"};
    return f;
  }

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    conv_enc.reg(st, rng, dt);
    conv_dec.reg(st, rng, dt);
    bn1.reg(st, rng, dt);
    pw.reg(st, rng, dt);
    bn2.reg(st, rng, dt);
  }

  Var fwd(Forward& ctx, Var enc, Var dec) const {
    const Tensor& ev = enc.value();
    const Tensor& dv = dec.value();
    if (ev.dim(0) != dv.dim(0) || ev.dim(2) != dv.dim(2) || ev.dim(3) != dv.dim(3))
      throw std::invalid_argument("fusion inputs disagree spatially: " + shape_str(ev.shape()) +
                                  " vs " + shape_str(dv.shape()));
    std::vector<Var> parts = {conv_enc.fwd(ctx, enc), conv_dec.fwd(ctx, dec)};
    Var h = ctx.tape.silu(bn1.fwd(ctx, ctx.tape.concat(parts, 1)));
    return ctx.tape.silu(bn2.fwd(ctx, pw.fwd(ctx, h)));
  }

  std::int64_t params() const {
    return conv_enc.params() + conv_dec.params() + bn1.params() + pw.params() + bn2.params();
  }

  std::int64_t flops(std::int64_t h, std::int64_t w) const {
    return conv_enc.flops(h, w) + conv_dec.flops(h, w) + pw.flops(h, w);
  }
};

struct StageBlock {
  bool gms = false;
  LmsBlock lms;
  GmsBlock g;

  void reg(ParamStore& st, Rng& rng, DType dt) const {
    if (gms)
      g.reg(st, rng, dt);
    else
      lms.reg(st, rng, dt);
  }
  Var fwd(Forward& ctx, Var x) const { return gms ? g.fwd(ctx, x) : lms.fwd(ctx, x); }
  std::int64_t params() const { return gms ? g.params() : lms.params(); }
  std::int64_t flops(std::int64_t h, std::int64_t w) const {
    return gms ? g.flops(h, w) : lms.flops(h, w);
  }
  const char* kind() const { return gms ? "gms" : "lms"; }
};

StageBlock make_stage_block(const std::string& base, const ModelConfig& cfg, int stage) {
  StageBlock b;
  b.gms = cfg.is_gms_stage(stage);
  std::int64_t c = cfg.stage_channels[static_cast<std::size_t>(stage - 1)];
  if (b.gms)
    b.g = GmsBlock::make(base + ".gms", cfg, stage);
  else
    b.lms = LmsBlock::make(base + ".lms", c, cfg.lms_kernels);
  return b;
}

}  // namespace

// --- standalone block wrappers ---------------------------------------------

LmsBlockOp::LmsBlockOp(std::string prefix, std::int64_t channels, std::vector<int> kernels)
    : prefix_(std::move(prefix)), channels_(channels), kernels_(std::move(kernels)) {
  if (channels_ <= 0 || channels_ % 4 != 0)
    throw std::invalid_argument("LMS block channels must be a positive multiple of 4, got " +
                                std::to_string(channels_));
  if (kernels_.size() != 4) throw std::invalid_argument("LMS block expects 4 kernel sizes");
}

void LmsBlockOp::init_params(ParamStore& store, Rng& rng, DType dt) const {
  LmsBlock::make(prefix_, channels_, kernels_).reg(store, rng, dt);
}

Var LmsBlockOp::forward(Forward& ctx, Var x) const {
  return LmsBlock::make(prefix_, channels_, kernels_).fwd(ctx, x);
}

Tensor LmsBlockOp::eval(ParamStore& store, const Tensor& x) const {
  ad::Tape tape;
  Forward ctx(tape, store, false);
  return forward(ctx, tape.constant(x)).value();
}

std::int64_t LmsBlockOp::param_count() const {
  return LmsBlock::make(prefix_, channels_, kernels_).params();
}

std::int64_t LmsBlockOp::flop_count(std::int64_t h, std::int64_t w) const {
  return LmsBlock::make(prefix_, channels_, kernels_).flops(h, w);
}

GmsBlockOp::GmsBlockOp(std::string prefix, ModelConfig cfg, int stage)
    : prefix_(std::move(prefix)), cfg_(std::move(cfg)), stage_(stage) {
  cfg_.validate();
  if (stage_ < 1 || stage_ > 5) throw std::invalid_argument("GMS stage must lie in [1, 5]");
}

void GmsBlockOp::init_params(ParamStore& store, Rng& rng, DType dt) const {
  GmsBlock::make(prefix_, cfg_, stage_).reg(store, rng, dt);
}

Var GmsBlockOp::forward(Forward& ctx, Var x) const {
  return GmsBlock::make(prefix_, cfg_, stage_).fwd(ctx, x);
}

Tensor GmsBlockOp::eval(ParamStore& store, const Tensor& x) const {
  ad::Tape tape;
  Forward ctx(tape, store, false);
  return forward(ctx, tape.constant(x)).value();
}

std::int64_t GmsBlockOp::param_count() const {
  return GmsBlock::make(prefix_, cfg_, stage_).params();
}

std::int64_t GmsBlockOp::flop_count(std::int64_t h, std::int64_t w) const {
  return GmsBlock::make(prefix_, cfg_, stage_).flops(h, w);
}

FusionBlockOp::FusionBlockOp(std::string prefix, std::int64_t enc_channels,
                             std::int64_t dec_channels, std::int64_t out_channels)
    : prefix_(std::move(prefix)), c_enc_(enc_channels), c_dec_(dec_channels),
      c_out_(out_channels) {
  if (c_enc_ <= 0 || c_dec_ <= 0 || c_out_ <= 0)
    throw std::invalid_argument("fusion block channel counts must be positive");
}

void FusionBlockOp::init_params(ParamStore& store, Rng& rng, DType dt) const {
  FusionBlock::make(prefix_, c_enc_, c_dec_, c_out_).reg(store, rng, dt);
}

Var FusionBlockOp::forward(Forward& ctx, Var enc, Var dec) const {
  return FusionBlock::make(prefix_, c_enc_, c_dec_, c_out_).fwd(ctx, enc, dec);
}

Tensor FusionBlockOp::eval(ParamStore& store, const Tensor& enc, const Tensor& dec) const {
  ad::Tape tape;
  Forward ctx(tape, store, false);
  return forward(ctx, tape.constant(enc), tape.constant(dec)).value();
}

std::int64_t FusionBlockOp::param_count() const {
  return FusionBlock::make(prefix_, c_enc_, c_dec_, c_out_).params();
}

std::int64_t FusionBlockOp::flop_count(std::int64_t h, std::int64_t w) const {
  return FusionBlock::make(prefix_, c_enc_, c_dec_, c_out_).flops(h, w);
}

struct LgmsNet::Layers {
  ConvBnSilu stem;
  std::array<ConvBnSilu, 4> enc_trans;  // into stages 2..5
  std::array<StageBlock, 5> enc;
  std::array<FusionBlock, 4> fuse;  // decoder levels 4..1 (index s-1)
  std::array<StageBlock, 4> dec;    // decoder levels 4..1 (index s-1)
  ConvLayer head;
};

LgmsNet::LgmsNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  auto L = std::make_shared<Layers>();
  const auto& w = cfg_.stage_channels;
  L->stem = ConvBnSilu::make("stem", cfg_.input_channels, w[0], 3);
  for (int s = 2; s <= 5; ++s)
    L->enc_trans[static_cast<std::size_t>(s - 2)] = ConvBnSilu::make(
        "enc" + std::to_string(s) + ".trans", w[static_cast<std::size_t>(s - 2)],
        w[static_cast<std::size_t>(s - 1)], 3);
  for (int s = 1; s <= 5; ++s)
    L->enc[static_cast<std::size_t>(s - 1)] =
        make_stage_block("enc" + std::to_string(s), cfg_, s);
  for (int s = 4; s >= 1; --s) {
    L->fuse[static_cast<std::size_t>(s - 1)] = FusionBlock::make(
        "dec" + std::to_string(s) + ".fuse", w[static_cast<std::size_t>(s - 1)],
        w[static_cast<std::size_t>(s)], w[static_cast<std::size_t>(s - 1)]);
    L->dec[static_cast<std::size_t>(s - 1)] =
        make_stage_block("dec" + std::to_string(s), cfg_, s);
  }
  L->head = make_conv("head", w[0], cfg_.num_classes, 1, 1, true);
  layers_ = std::move(L);
}

void LgmsNet::init_params(ParamStore& store, Rng& rng, DType dt) const {
  const Layers& L = *layers_;
  L.stem.reg(store, rng, dt);
  for (int s = 1; s <= 5; ++s) {
    if (s >= 2) L.enc_trans[static_cast<std::size_t>(s - 2)].reg(store, rng, dt);
    L.enc[static_cast<std::size_t>(s - 1)].reg(store, rng, dt);
  }
  for (int s = 4; s >= 1; --s) {
    L.fuse[static_cast<std::size_t>(s - 1)].reg(store, rng, dt);
    L.dec[static_cast<std::size_t>(s - 1)].reg(store, rng, dt);
  }
  L.head.reg(store, rng, dt);
}

Var LgmsNet::forward(Forward& ctx, Var x, StageTrace* trace) const {
  const Layers& L = *layers_;
  const Tensor& xv = x.value();
  if (xv.rank() != 4)
    throw std::invalid_argument("model input must be (N,C,H,W), got " + shape_str(xv.shape()));
  if (xv.dim(1) != cfg_.input_channels)
    throw std::invalid_argument("model input has " + std::to_string(xv.dim(1)) +
                                " channels, config expects " +
                                std::to_string(cfg_.input_channels));
  if (xv.dim(2) % 16 != 0 || xv.dim(3) % 16 != 0)
    throw std::invalid_argument("input spatial extents must be divisible by 16, got " +
                                shape_str(xv.shape()));

  std::array<Var, 5> skips;
  Var h = L.stem.fwd(ctx, x);
  for (int s = 1; s <= 5; ++s) {
    if (s >= 2) {
      h = ctx.tape.maxpool2x2(h);
      h = L.enc_trans[static_cast<std::size_t>(s - 2)].fwd(ctx, h);
    }
    h = L.enc[static_cast<std::size_t>(s - 1)].fwd(ctx, h);
    skips[static_cast<std::size_t>(s - 1)] = h;
    if (trace) trace->encoder[static_cast<std::size_t>(s - 1)] = h.value();
  }

  Var d = skips[4];
  for (int s = 4; s >= 1; --s) {
    Var up = ctx.tape.upsample_bilinear_2x(d);
    Var f = L.fuse[static_cast<std::size_t>(s - 1)].fwd(
        ctx, skips[static_cast<std::size_t>(s - 1)], up);
    d = L.dec[static_cast<std::size_t>(s - 1)].fwd(ctx, f);
  }
  return L.head.fwd(ctx, d);
}

Tensor LgmsNet::predict_logits(ParamStore& store, const Tensor& x, StageTrace* trace) const {
  ad::Tape tape;
  Forward ctx{tape, store, false};
  Var out = forward(ctx, tape.constant(x), trace);
  return out.value();
}

CountReport LgmsNet::count(std::int64_t h, std::int64_t w) const {
  const Layers& L = *layers_;
  CountReport r;
  auto item = [&](const std::string& name, std::int64_t params, std::int64_t flops) {
    r.items.push_back({name, params, flops});
    r.total_params += params;
    r.total_flops += flops;
  };
  std::int64_t hs = h, ws = w;
  item("stem", L.stem.params(), L.stem.flops(hs, ws));
  for (int s = 1; s <= 5; ++s) {
    if (s >= 2) {
      hs /= 2;
      ws /= 2;
      const auto& t = L.enc_trans[static_cast<std::size_t>(s - 2)];
      item("enc" + std::to_string(s) + ".trans", t.params(), t.flops(hs, ws));
    }
    const auto& b = L.enc[static_cast<std::size_t>(s - 1)];
    item("enc" + std::to_string(s) + "." + b.kind(), b.params(), b.flops(hs, ws));
  }
  for (int s = 4; s >= 1; --s) {
    hs *= 2;
    ws *= 2;
    const auto& f = L.fuse[static_cast<std::size_t>(s - 1)];
    item("dec" + std::to_string(s) + ".fuse", f.params(), f.flops(hs, ws));
    const auto& b = L.dec[static_cast<std::size_t>(s - 1)];
    item("dec" + std::to_string(s) + "." + b.kind(), b.params(), b.flops(hs, ws));
  }
  item("head", L.head.params(), L.head.flops(h, w));
  return r;
}

CountReport count_params_flops(const ModelConfig& cfg, std::int64_t h, std::int64_t w) {
  return LgmsNet(cfg).count(h, w);
}

}  // namespace lgms::arch
