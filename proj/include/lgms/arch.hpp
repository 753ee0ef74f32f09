#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "lgms/attention.hpp"
#include "lgms/autograd.hpp"
#include "lgms/nn_ops.hpp"
#include "lgms/tensor.hpp"

namespace lgms::arch {

// Transformer:conv channel split applied to the expanded width inside a GMS
// block. 0 on either side disables that branch.
struct TcRatio {
  int t = 3;
  int c = 1;
  int sum() const { return t + c; }
};

struct AttnConfig {
  int num_heads = 4;
  double mlp_ratio = 2.0;
  int depth = 2;
};

struct ModelConfig {
  std::vector<std::int64_t> stage_channels = {16, 32, 64, 128, 160};
  std::vector<int> lms_kernels = {3, 5, 7, 9};  // odd, non-decreasing
  TcRatio tc_ratio;
  int patch_size = 2;
  int gms_expansion = 2;
  AttnConfig attention;
  std::vector<int> gms_stages = {4, 5};
  std::int64_t input_channels = 1;
  std::int64_t num_classes = 1;

  bool is_gms_stage(int stage) const;  // 1-based
  std::int64_t expanded_channels(int stage) const;
  std::int64_t transformer_channels(int stage) const;
  std::int64_t conv_branch_channels(int stage) const;
  std::int64_t token_dim(int stage) const;  // transformer_channels * p^2

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Named, ordered collection of tensors. requires_grad distinguishes learnable
// parameters from buffers (batch-norm running statistics). Iteration order is
// construction order and is the checkpoint order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool requires_grad = true;
  };

  void add(std::string name, Tensor t, bool requires_grad);
  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  bool requires_grad(std::string_view name) const;
  void set(std::string_view name, Tensor t);  // shape and dtype must match
  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t trainable_elements() const;
  std::int64_t total_elements() const;
  ParamStore astype(DType dt) const;

  // LGCK checkpoint: magic "LGCK" | version u8 (=1) | entry count u32 LE |
  // per entry: name length u16 LE, name bytes, embedded LGTS blob.
  void save_lgck(const std::string& path) const;
  // Overwrites tensors of an already-constructed store; the file must carry
  // exactly the same entry names with matching shapes and dtypes.
  void load_lgck(const std::string& path);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-call forward context: binds store entries to tape leaves on demand and
// collects pending batch-norm statistics. Updates are only folded into the
// store when commit_stats() is called (the training loop does; gradient
// checking never does).
struct Forward {
  ad::Tape& tape;
  ParamStore& store;
  bool training = false;

  Forward(ad::Tape& t, ParamStore& s, bool train) : tape(t), store(s), training(train) {}

  ad::Var param(const std::string& name);
  // Replaces the binding for `name`; lets a verification harness route its
  // own leaves into the network.
  void preset(const std::string& name, ad::Var v);
  void pend_stats(const std::string& mean_name, const std::string& var_name,
                  const Tensor& batch_mean, const Tensor& batch_var, double momentum);
  void commit_stats();
  // Re-keys a backward() result from tape ids to parameter names.
  std::unordered_map<std::string, Tensor> named_grads(const ad::GradMap& grads) const;

 private:
  std::unordered_map<std::string, ad::Var> bound_;
  struct Pending {
    std::string name;
    Tensor value;
  };
  std::vector<Pending> pending_;
};

struct CountReport {
  struct Item {
    std::string name;
    std::int64_t params = 0;
    std::int64_t flops = 0;
  };
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::vector<Item> items;
};

// --- standalone blocks ---------------------------------------------------
//
// The three building blocks are usable on their own; `prefix` scopes their
// parameter names inside a store. eval() is an inference-mode convenience.

class LmsBlockOp {
 public:
  LmsBlockOp(std::string prefix, std::int64_t channels, std::vector<int> kernels);
  void init_params(ParamStore& store, Rng& rng, DType dt = DType::f32) const;
  ad::Var forward(Forward& ctx, ad::Var x) const;
  Tensor eval(ParamStore& store, const Tensor& x) const;
  std::int64_t param_count() const;
  std::int64_t flop_count(std::int64_t h, std::int64_t w) const;

 private:
  std::string prefix_;
  std::int64_t channels_;
  std::vector<int> kernels_;
};

class GmsBlockOp {
 public:
  // Geometry (widths, expansion, tc split, patch, attention) comes from the
  // config entry for `stage`.
  GmsBlockOp(std::string prefix, ModelConfig cfg, int stage);
  void init_params(ParamStore& store, Rng& rng, DType dt = DType::f32) const;
  ad::Var forward(Forward& ctx, ad::Var x) const;
  Tensor eval(ParamStore& store, const Tensor& x) const;
  std::int64_t param_count() const;
  std::int64_t flop_count(std::int64_t h, std::int64_t w) const;

 private:
  std::string prefix_;
  ModelConfig cfg_;
  int stage_;
};

class FusionBlockOp {
 public:
  FusionBlockOp(std::string prefix, std::int64_t enc_channels, std::int64_t dec_channels,
                std::int64_t out_channels);
  void init_params(ParamStore& store, Rng& rng, DType dt = DType::f32) const;
  ad::Var forward(Forward& ctx, ad::Var enc, ad::Var dec) const;
  Tensor eval(ParamStore& store, const Tensor& enc, const Tensor& dec) const;
  std::int64_t param_count() const;
  std::int64_t flop_count(std::int64_t h, std::int64_t w) const;

 private:
  std::string prefix_;
  std::int64_t c_enc_, c_dec_, c_out_;
};

// Encoder activations captured during a forward pass (stage s output before
// pooling, 1-based indexing in [1, 5]).
struct StageTrace {
  std::array<Tensor, 5> encoder;
};

class LgmsNet {
 public:
  explicit LgmsNet(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  // Registers every parameter and buffer in deterministic order.
  void init_params(ParamStore& store, Rng& rng, DType dt = DType::f32) const;

  ad::Var forward(Forward& ctx, ad::Var x, StageTrace* trace = nullptr) const;

  // Inference-mode convenience: records a throwaway tape internally.
  Tensor predict_logits(ParamStore& store, const Tensor& x, StageTrace* trace = nullptr) const;

  CountReport count(std::int64_t h = 256, std::int64_t w = 256) const;

 private:
  struct Layers;
  ModelConfig cfg_;
  std::shared_ptr<const Layers> layers_;
};

CountReport count_params_flops(const ModelConfig& cfg, std::int64_t h = 256,
                               std::int64_t w = 256);

}  // namespace lgms::arch
