#include "lgms/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

static_assert(std::endian::native == std::endian::little,
              "LGTS serialization assumes a little-endian host");

namespace lgms {

const char* dtype_name(DType dt) {
  return dt == DType::f32 ? "float32" : "float64";
}

std::size_t dtype_size(DType dt) {
  return dt == DType::f32 ? sizeof(float) : sizeof(double);
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, DType dt) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = shape_numel(t.shape_);
  t.dtype_ = dt;
  if (dt == DType::f32)
    t.f32_.assign(static_cast<std::size_t>(t.numel_), 0.0f);
  else
    t.f64_.assign(static_cast<std::size_t>(t.numel_), 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  if (dt == DType::f32)
    std::fill(t.f32_.begin(), t.f32_.end(), static_cast<float>(value));
  else
    std::fill(t.f64_.begin(), t.f64_.end(), value);
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::from_f32(Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not fill shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<std::int64_t>(data.size());
  t.dtype_ = DType::f32;
  t.f32_ = std::move(data);
  return t;
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not fill shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<std::int64_t>(data.size());
  t.dtype_ = DType::f64;
  t.f64_ = std::move(data);
  return t;
}

std::int64_t Tensor::dim(int axis) const {
  int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::at_flat(std::int64_t i) const {
  return dtype_ == DType::f32 ? static_cast<double>(f32_[static_cast<std::size_t>(i)])
                              : f64_[static_cast<std::size_t>(i)];
}

void Tensor::set_flat(std::int64_t i, double v) {
  if (dtype_ == DType::f32)
    f32_[static_cast<std::size_t>(i)] = static_cast<float>(v);
  else
    f64_[static_cast<std::size_t>(i)] = v;
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank())
    throw std::invalid_argument("index rank mismatch for shape " + shape_str(shape_));
  std::int64_t flat = 0;
  int k = 0;
  for (auto i : idx) {
    auto extent = shape_[static_cast<std::size_t>(k)];
    if (i < 0 || i >= extent)
      throw std::invalid_argument("index out of bounds for shape " + shape_str(shape_));
    flat = flat * extent + i;
    ++k;
  }
  return at_flat(flat);
}

double Tensor::item() const {
  if (numel_ != 1)
    throw std::invalid_argument("item() requires a single-element tensor, got shape " +
                                shape_str(shape_));
  return at_flat(0);
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype_) return *this;
  Tensor t = zeros(shape_, dt);
  for (std::int64_t i = 0; i < numel_; ++i) t.set_flat(i, at_flat(i));
  return t;
}

Tensor Tensor::clone() const { return *this; }

bool Tensor::all_finite() const {
  if (dtype_ == DType::f32) {
    for (float v : f32_)
      if (!std::isfinite(v)) return false;
  } else {
    for (double v : f64_)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

// --- broadcasting --------------------------------------------------------

bool broadcastable(const Shape& a, const Shape& b) {
  std::size_t ra = a.size(), rb = b.size();
  std::size_t r = std::max(ra, rb);
  for (std::size_t i = 0; i < r; ++i) {
    std::int64_t da = i < ra ? a[ra - 1 - i] : 1;
    std::int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) return false;
  }
  return true;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (!broadcastable(a, b))
    throw std::invalid_argument("shapes " + shape_str(a) + " and " + shape_str(b) +
                                " are not broadcastable");
  std::size_t ra = a.size(), rb = b.size();
  std::size_t r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::int64_t da = i < ra ? a[ra - 1 - i] : 1;
    std::int64_t db = i < rb ? b[rb - 1 - i] : 1;
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

const char* ew_op_name(EwOp op) {
  switch (op) {
    case EwOp::add: return "add";
    case EwOp::sub: return "sub";
    case EwOp::mul: return "mul";
    case EwOp::div: return "div";
    case EwOp::max: return "max";
  }
  return "?";
}

namespace {

template <typename T>
T apply_ew(EwOp op, T a, T b) {
  switch (op) {
    case EwOp::add: return a + b;
    case EwOp::sub: return a - b;
    case EwOp::mul: return a * b;
    case EwOp::div: return a / b;
    case EwOp::max: return a > b ? a : b;
  }
  return T{};
}

// Row-major strides with 0 on broadcast (extent-1) axes, aligned to `out`.
std::vector<std::int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  std::size_t ri = in.size(), ro = out.size();
  for (std::size_t i = 0; i < ri; ++i) {
    std::size_t ai = ri - 1 - i;
    std::size_t ao = ro - 1 - i;
    strides[ao] = (in[ai] == 1 && out[ao] != 1) ? 0 : s;
    s *= in[ai];
  }
  return strides;
}

template <typename T>
void ew_kernel(EwOp op, const Tensor& a, const Tensor& b, Tensor& out) {
  auto pa = a.data<T>().data();
  auto pb = b.data<T>().data();
  auto po = out.mutable_data<T>().data();
  const Shape& os = out.shape();
  std::int64_t n = out.numel();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < n; ++i) po[i] = apply_ew(op, pa[i], pb[i]);
    return;
  }
  auto sa = bcast_strides(a.shape(), os);
  auto sb = bcast_strides(b.shape(), os);
  std::vector<std::int64_t> idx(os.size(), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = apply_ew(op, pa[ia], pb[ib]);
    for (int d = static_cast<int>(os.size()) - 1; d >= 0; --d) {
      idx[d]++;
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < os[static_cast<std::size_t>(d)]) break;
      ia -= sa[d] * os[static_cast<std::size_t>(d)];
      ib -= sb[d] * os[static_cast<std::size_t>(d)];
      idx[d] = 0;
    }
  }
}

DType promote(const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    throw std::invalid_argument(std::string("mixed dtypes: ") + dtype_name(a.dtype()) + " vs " +
                                dtype_name(b.dtype()));
  return a.dtype();
}

}  // namespace

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  DType dt = promote(a, b);
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(os, dt);
  if (dt == DType::f32)
    ew_kernel<float>(op, a, b, out);
  else
    ew_kernel<double>(op, a, b, out);
  return out;
}

Tensor elementwise(EwOp op, const Tensor& a, double b) {
  return elementwise(op, a, Tensor::scalar(b, a.dtype()));
}

Tensor sum_to_shape(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  Shape bs = broadcast_shape(x.shape(), target);
  if (bs != x.shape())
    throw std::invalid_argument("cannot reduce " + shape_str(x.shape()) + " to " +
                                shape_str(target));
  Tensor out = Tensor::zeros(target, x.dtype());
  auto st = bcast_strides(target, x.shape());
  const Shape& xs = x.shape();
  std::vector<std::int64_t> idx(xs.size(), 0);
  std::int64_t it = 0;
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    out.set_flat(it, out.at_flat(it) + x.at_flat(i));
    for (int d = static_cast<int>(xs.size()) - 1; d >= 0; --d) {
      idx[d]++;
      it += st[d];
      if (idx[d] < xs[static_cast<std::size_t>(d)]) break;
      it -= st[d] * xs[static_cast<std::size_t>(d)];
      idx[d] = 0;
    }
  }
  return out;
}

// --- matmul ---------------------------------------------------------------

namespace {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // c (m x n) += a (m x k) * b (k x n); c must be zeroed by the caller.
  // i-k-j order keeps the inner loop contiguous over both b and c.
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      T aik = arow[kk];
      const T* brow = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  DType dt = promote(a, b);
  int ra = a.rank(), rb = b.rank();
  if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3))
    throw std::invalid_argument("matmul expects rank-2 or rank-3 operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::int64_t ba = ra == 3 ? a.dim(0) : 1;
  std::int64_t bb = rb == 3 ? b.dim(0) : 1;
  std::int64_t m = a.dim(ra - 2), ka = a.dim(ra - 1);
  std::int64_t kb = b.dim(rb - 2), n = b.dim(rb - 1);
  if (ka != kb)
    throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  if (ba != bb && ba != 1 && bb != 1)
    throw std::invalid_argument("matmul batch extents disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::int64_t batch = std::max(ba, bb);
  bool batched_out = (ra == 3 || rb == 3);
  Shape os = batched_out ? Shape{batch, m, n} : Shape{m, n};
  Tensor out = Tensor::zeros(os, dt);

  auto run = [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* pc = out.mutable_data<T>().data();
    parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t bi = lo; bi < hi; ++bi) {
        const T* ab = pa + (ba == 1 ? 0 : bi) * m * ka;
        const T* bb_ = pb + (bb == 1 ? 0 : bi) * ka * n;
        gemm(ab, bb_, pc + bi * m * n, m, ka, n);
      }
    });
  };
  if (dt == DType::f32)
    run(float{});
  else
    run(double{});
  return out;
}

// --- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " +
                                shape_str(new_shape) + " changes element count");
  Tensor out = Tensor::zeros(new_shape, x.dtype());
  if (x.dtype() == DType::f32)
    std::copy_n(x.data<float>().data(), static_cast<std::size_t>(x.numel()),
                out.mutable_data<float>().data());
  else
    std::copy_n(x.data<double>().data(), static_cast<std::size_t>(x.numel()),
                out.mutable_data<double>().data());
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  int r = x.rank();
  if (static_cast<int>(axes.size()) != r)
    throw std::invalid_argument("permute axes rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)])
      throw std::invalid_argument("invalid permutation for " + shape_str(x.shape()));
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape os(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);
  Tensor out = Tensor::zeros(os, x.dtype());
  if (r == 0) {
    out.set_flat(0, x.at_flat(0));
    return out;
  }
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
  std::vector<std::int64_t> src_stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i)
    src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t src = 0;
  std::int64_t n = x.numel();
  auto run = [&](auto tag) {
    using T = decltype(tag);
    const T* pi = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < n; ++i) {
      po[i] = pi[src];
      for (int d = r - 1; d >= 0; --d) {
        idx[static_cast<std::size_t>(d)]++;
        src += src_stride[static_cast<std::size_t>(d)];
        if (idx[static_cast<std::size_t>(d)] < os[static_cast<std::size_t>(d)]) break;
        src -= src_stride[static_cast<std::size_t>(d)] * os[static_cast<std::size_t>(d)];
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
  };
  if (x.dtype() == DType::f32)
    run(float{});
  else
    run(double{});
  return out;
}

namespace {

// Views an axis split as (outer, axis, inner) with row-major inner stride.
void axis_geometry(const Shape& s, int axis, std::int64_t& outer, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

int check_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("invalid axis " + std::to_string(axis));
  return axis;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  int r = parts[0].rank();
  axis = check_axis(axis, r);
  Shape os = parts[0].shape();
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r || p.dtype() != parts[0].dtype())
      throw std::invalid_argument("concat inputs disagree in rank or dtype");
    for (int d = 0; d < r; ++d)
      if (d != axis && p.dim(d) != os[static_cast<std::size_t>(d)])
        throw std::invalid_argument("concat inputs disagree on non-concat axis: " +
                                    shape_str(p.shape()) + " vs " + shape_str(os));
    total += p.dim(axis);
  }
  os[static_cast<std::size_t>(axis)] = total;
  Tensor out = Tensor::zeros(os, parts[0].dtype());
  std::int64_t outer, inner;
  axis_geometry(os, axis, outer, inner);
  auto run = [&](auto tag) {
    using T = decltype(tag);
    T* po = out.mutable_data<T>().data();
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
      const T* pi = p.data<T>().data();
      std::int64_t pa = p.dim(axis);
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(pi + o * pa * inner, static_cast<std::size_t>(pa * inner),
                    po + (o * total + off) * inner);
      off += pa;
    }
  };
  if (out.dtype() == DType::f32)
    run(float{});
  else
    run(double{});
  return out;
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::int64_t>& sizes) {
  axis = check_axis(axis, x.rank());
  std::int64_t total = 0;
  for (auto s : sizes) {
    if (s < 0) throw std::invalid_argument("negative split size");
    total += s;
  }
  if (total != x.dim(axis))
    throw std::invalid_argument("split sizes sum to " + std::to_string(total) +
                                " but axis extent is " + std::to_string(x.dim(axis)));
  std::int64_t outer, inner;
  axis_geometry(x.shape(), axis, outer, inner);
  std::vector<Tensor> parts;
  parts.reserve(sizes.size());
  std::int64_t off = 0;
  std::int64_t ax = x.dim(axis);
  for (auto s : sizes) {
    Shape ps = x.shape();
    ps[static_cast<std::size_t>(axis)] = s;
    Tensor p = Tensor::zeros(ps, x.dtype());
    auto run = [&](auto tag) {
      using T = decltype(tag);
      const T* pi = x.data<T>().data();
      T* po = p.mutable_data<T>().data();
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(pi + (o * ax + off) * inner, static_cast<std::size_t>(s * inner),
                    po + o * s * inner);
    };
    if (x.dtype() == DType::f32)
      run(float{});
    else
      run(double{});
    parts.push_back(std::move(p));
    off += s;
  }
  return parts;
}

// --- reductions -------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  if (x.dtype() == DType::f32) {
    float acc = 0.0f;
    for (float v : x.data<float>()) acc += v;
    return Tensor::scalar(acc, DType::f32);
  }
  double acc = 0.0;
  for (double v : x.data<double>()) acc += v;
  return Tensor::scalar(acc, DType::f64);
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  Tensor s = sum_all(x);
  s.set_flat(0, s.at_flat(0) / static_cast<double>(x.numel()));
  return s;
}

double sum_value(const Tensor& x) { return sum_all(x.astype(DType::f64)).item(); }

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) m = std::max(m, std::abs(x.at_flat(i)));
  return m;
}

// --- RNG ---------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::below(std::int64_t n) {
  if (n <= 0) throw std::invalid_argument("Rng::below requires n > 0");
  std::uint64_t un = static_cast<std::uint64_t>(n);
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                        std::numeric_limits<std::uint64_t>::max() % un;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::int64_t>(x % un);
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  // Box-Muller; u1 is shifted into (0, 1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

Rng Rng::derive(std::string_view tag) const {
  std::uint64_t s = seed_ ^ fnv1a(tag);
  return Rng(splitmix64(s));
}

Tensor random_normal(Rng& rng, Shape shape, double mean, double std, DType dt) {
  if (std < 0) throw std::invalid_argument("random_normal requires std >= 0");
  Tensor t = Tensor::zeros(std::move(shape), dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, mean + std * rng.normal());
  return t;
}

Tensor random_uniform(Rng& rng, Shape shape, double lo, double hi, DType dt) {
  Tensor t = Tensor::zeros(std::move(shape), dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, rng.uniform(lo, hi));
  return t;
}

// --- LGTS ---------------------------------------------------------------------

namespace {

void put_u32_le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("LGTS: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_lgts(const Tensor& t, std::ostream& out) {
  out.write("LGTS", 4);
  unsigned char ver = 1;
  unsigned char code = static_cast<unsigned char>(t.dtype());
  unsigned char rank = static_cast<unsigned char>(t.rank());
  out.put(static_cast<char>(ver));
  out.put(static_cast<char>(code));
  out.put(static_cast<char>(rank));
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFll) throw std::invalid_argument("LGTS extent exceeds u32");
    put_u32_le(out, static_cast<std::uint32_t>(d));
  }
  if (t.dtype() == DType::f32) {
    auto d = t.data<float>();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(float)));
  } else {
    auto d = t.data<double>();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("LGTS: write failed");
}

void write_lgts(const Tensor& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_lgts(t, f);
}

Tensor read_lgts(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "LGTS", 4) != 0) throw std::runtime_error("LGTS: bad magic");
  int ver = in.get();
  int code = in.get();
  int rank = in.get();
  if (ver != 1) throw std::runtime_error("LGTS: unsupported version " + std::to_string(ver));
  if (code != 1 && code != 2) throw std::runtime_error("LGTS: bad dtype code " + std::to_string(code));
  if (rank < 0 || rank > 8) throw std::runtime_error("LGTS: bad rank");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = get_u32_le(in);
  DType dt = code == 1 ? DType::f32 : DType::f64;
  Tensor t = Tensor::zeros(std::move(shape), dt);
  if (dt == DType::f32) {
    auto d = t.mutable_data<float>();
    in.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
  } else {
    auto d = t.mutable_data<double>();
    in.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!in) throw std::runtime_error("LGTS: truncated payload");
  return t;
}

Tensor read_lgts(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_lgts(f);
}

// --- thread pool ----------------------------------------------------------------

namespace {

class Pool {
 public:
  explicit Pool(int workers) : run_flags_(static_cast<std::size_t>(workers), false) {
    for (int i = 0; i < workers; ++i)
      threads_.emplace_back([this, i] { worker(i); });
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()) + 1; }  // + caller

  void run(const std::function<void(int)>& task) {
    {
      std::lock_guard<std::mutex> lk(m_);
      task_ = &task;
      std::fill(run_flags_.begin(), run_flags_.end(), true);
      pending_ = static_cast<int>(threads_.size());
    }
    cv_.notify_all();
    task(static_cast<int>(threads_.size()));  // caller participates as the last worker
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    task_ = nullptr;
  }

 private:
  void worker(int id) {
    for (;;) {
      const std::function<void(int)>* task;
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [this, id] { return stop_ || run_flags_[static_cast<std::size_t>(id)]; });
        if (stop_) return;
        run_flags_[static_cast<std::size_t>(id)] = false;
        task = task_;
      }
      (*task)(id);
      {
        std::lock_guard<std::mutex> lk(m_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int)>* task_ = nullptr;
  std::vector<bool> run_flags_;
  int pending_ = 0;
  bool stop_ = false;
};

int configured_workers() {
  const char* env = std::getenv("LGMS_THREADS");
  int n = 0;
  if (env && *env) n = std::atoi(env);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, n);
}

Pool& pool() {
  static Pool p(configured_workers() - 1);
  return p;
}

}  // namespace

int worker_count() { return pool().size(); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  int workers = worker_count();
  if (workers == 1 || n == 1) {
    fn(0, n);
    return;
  }
  // Fixed partition: worker w gets [w*n/W, (w+1)*n/W).
  std::function<void(int)> task = [&](int w) {
    std::int64_t lo = n * w / workers;
    std::int64_t hi = n * (w + 1) / workers;
    if (lo < hi) fn(lo, hi);
  };
  pool().run(task);
}

}  // namespace lgms
