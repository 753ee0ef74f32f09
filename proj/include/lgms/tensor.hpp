#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lgms {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

const char* dtype_name(DType dt);
std::size_t dtype_size(DType dt);

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element.
// Tensors are immutable once handed to a caller; operations return new
// tensors. `mutable_data` exists for kernels filling a freshly constructed
// tensor before it escapes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt = DType::f32);
  static Tensor full(Shape shape, double value, DType dt = DType::f32);
  static Tensor scalar(double value, DType dt = DType::f32);
  static Tensor from_f32(Shape shape, std::vector<float> data);
  static Tensor from_f64(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return numel_; }
  std::int64_t dim(int axis) const;  // supports negative axes
  bool defined() const { return numel_ > 0 || rank() == 0; }

  template <typename T>
  std::span<const T> data() const;
  template <typename T>
  std::span<T> mutable_data();

  // Generic element access (converts through double). Row-major flat index.
  double at_flat(std::int64_t i) const;
  void set_flat(std::int64_t i, double v);
  double at(std::initializer_list<std::int64_t> idx) const;

  double item() const;  // single-element tensors only
  Tensor astype(DType dt) const;
  Tensor clone() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::int64_t numel_ = 0;
  DType dtype_ = DType::f32;
  std::vector<float> f32_;
  std::vector<double> f64_;
};

template <>
inline std::span<const float> Tensor::data<float>() const {
  return {f32_.data(), f32_.size()};
}
template <>
inline std::span<const double> Tensor::data<double>() const {
  return {f64_.data(), f64_.size()};
}
template <>
inline std::span<float> Tensor::mutable_data<float>() {
  return {f32_.data(), f32_.size()};
}
template <>
inline std::span<double> Tensor::mutable_data<double>() {
  return {f64_.data(), f64_.size()};
}

// --- broadcasting ------------------------------------------------------
//
// Trailing-dimension rule: shapes are right-aligned; each aligned pair of
// extents must be equal or have one side equal to 1 (missing leading axes
// count as 1). The result extent is the larger of the pair. Anything else
// throws. A rank-0 tensor broadcasts against everything.
bool broadcastable(const Shape& a, const Shape& b);
Shape broadcast_shape(const Shape& a, const Shape& b);

enum class EwOp { add, sub, mul, div, max };
const char* ew_op_name(EwOp op);

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(EwOp op, const Tensor& a, double b);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwOp::div, a, b); }
inline Tensor maximum(const Tensor& a, const Tensor& b) { return elementwise(EwOp::max, a, b); }

// Sums `x` down to `target` along broadcast axes (the adjoint of a
// broadcast from `target` up to x.shape()).
Tensor sum_to_shape(const Tensor& x, const Shape& target);

// --- linear algebra ----------------------------------------------------
//
// matmul accepts rank-2 and rank-3 (batched) operands; a rank-2 operand is
// broadcast across the other side's batch, as is a batch extent of 1.
// float32 inputs accumulate in float32 (documented trade-off: keeps the hot
// path vectorizable; float64 is available where tight accumulation matters).
Tensor matmul(const Tensor& a, const Tensor& b);

// --- shape ops ----------------------------------------------------------
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(std::span<const Tensor> parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::int64_t>& sizes);

// --- reductions ---------------------------------------------------------
Tensor sum_all(const Tensor& x);   // rank-0 result, dtype preserved
Tensor mean_all(const Tensor& x);
double sum_value(const Tensor& x);
double max_abs(const Tensor& x);

// --- RNG ----------------------------------------------------------------
//
// Deterministic generator: std::mt19937_64 (fully specified by the C++
// standard, identical sequences on every platform) with hand-rolled uniform
// and Box-Muller normal transforms so no library-dependent distribution code
// is involved. Derived streams are seeded via splitmix64 over the parent
// seed and a tag hash.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  std::int64_t below(std::int64_t n);    // unbiased [0, n)
  double normal();                       // standard normal
  Rng derive(std::string_view tag) const;

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

Tensor random_normal(Rng& rng, Shape shape, double mean, double std,
                     DType dt = DType::f32);
Tensor random_uniform(Rng& rng, Shape shape, double lo, double hi,
                      DType dt = DType::f32);

// --- LGTS binary tensor format ------------------------------------------
//
// magic "LGTS" | version u8 (=1) | dtype u8 (1=f32, 2=f64) | rank u8 |
// rank x extent u32 LE | row-major little-endian payload.
void write_lgts(const Tensor& t, std::ostream& out);
void write_lgts(const Tensor& t, const std::string& path);
Tensor read_lgts(std::istream& in);
Tensor read_lgts(const std::string& path);

// --- parallel helper ------------------------------------------------------
//
// Runs fn(begin, end) over a fixed partition of [0, n). Partitioning depends
// only on n and the worker count (LGMS_THREADS, 0/unset = hardware), never on
// timing, so any per-element work is assigned deterministically.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);
int worker_count();

}  // namespace lgms
