#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor<Scalar> is a cheap shared handle onto a flat buffer plus shape.
// Differentiable ops (see ops.hpp) record backward closures onto the
// innermost active GradTape; calling backward(loss) replays them in reverse
// and accumulates gradients additively into every tracked tensor, so a
// parameter used twice receives the sum of both contributions.
//
// Eigen supplies the matrix kernels: mat() exposes a 2-D tensor as an
// Eigen::Map over the flat storage, and mat_view(r, c) reinterprets any
// tensor of r*c elements as an r-by-c matrix without copying.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xf {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct TapeError : std::runtime_error {
  explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

struct ArchiveError : std::runtime_error {
  explicit ArchiveError(const std::string& what) : std::runtime_error(what) {}
};

inline void check(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// --- allocation probe ------------------------------------------------------
//
// Tests hook this to assert which intermediate shapes an op materializes
// (e.g. that the linear-attention path never allocates an NxN buffer).
// Probes see every element-buffer allocation made on the current thread.

namespace detail {
inline thread_local std::vector<const std::function<void(const Shape&)>*>
    alloc_probes;

inline void notify_alloc(const Shape& shape) {
  for (const auto* p : alloc_probes) (*p)(shape);
}
}  // namespace detail

class AllocProbe {
 public:
  explicit AllocProbe(std::function<void(const Shape&)> fn)
      : fn_(std::move(fn)) {
    detail::alloc_probes.push_back(&fn_);
  }
  ~AllocProbe() { detail::alloc_probes.pop_back(); }
  AllocProbe(const AllocProbe&) = delete;
  AllocProbe& operator=(const AllocProbe&) = delete;

 private:
  std::function<void(const Shape&)> fn_;
};

// --- tensor ----------------------------------------------------------------

template <typename Scalar>
struct TensorData {
  Shape shape;
  std::vector<Scalar> elems;
  std::vector<Scalar> grad;    // empty until first accumulation
  bool requires_grad = false;  // leaf parameter flag
  bool tracked = false;        // produced by a recorded op
};

template <typename Scalar>
class Tensor {
 public:
  using MatType =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<MatType>;
  using ConstMap = Eigen::Map<const MatType>;

  Tensor() = default;  // null handle

  explicit Tensor(Shape shape)
      : d_(std::make_shared<TensorData<Scalar>>()) {
    d_->shape = std::move(shape);
    for (int dim : d_->shape)
      check(dim > 0, "tensor dim must be positive, got " +
                         shape_str(d_->shape));
    d_->elems.assign(static_cast<std::size_t>(xf::numel(d_->shape)),
                     Scalar(0));
    detail::notify_alloc(d_->shape);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    std::fill(t.d_->elems.begin(), t.d_->elems.end(), value);
    return t;
  }

  static Tensor scalar(Scalar value) { return full({1}, value); }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Tensor t(std::move(shape));
    check(static_cast<std::int64_t>(values.size()) == t.numel(),
          "initializer size does not match shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.d_->elems.begin());
    return t;
  }

  static Tensor from_vec(Shape shape, std::vector<Scalar> values) {
    Tensor t(std::move(shape));
    check(static_cast<std::int64_t>(values.size()) == t.numel(),
          "value count does not match shape " + shape_str(t.shape()));
    t.d_->elems = std::move(values);
    return t;
  }

  bool valid() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return xf::numel(d_->shape); }

  Scalar* data() { return d_->elems.data(); }
  const Scalar* data() const { return d_->elems.data(); }
  std::vector<Scalar>& elems() { return d_->elems; }
  const std::vector<Scalar>& elems() const { return d_->elems; }

  Scalar item() const {
    check(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return d_->elems[0];
  }

  // 2-D element access (row, col); rank-1 tensors index as a single row.
  Scalar& operator()(int r, int c) {
    return d_->elems[static_cast<std::size_t>(r) * cols() + c];
  }
  Scalar operator()(int r, int c) const {
    return d_->elems[static_cast<std::size_t>(r) * cols() + c];
  }
  Scalar& operator[](std::int64_t i) {
    return d_->elems[static_cast<std::size_t>(i)];
  }
  Scalar operator[](std::int64_t i) const {
    return d_->elems[static_cast<std::size_t>(i)];
  }

  int rows() const { return rank() == 1 ? 1 : dim(0); }
  int cols() const { return rank() == 1 ? dim(0) : dim(rank() - 1); }

  // Eigen views. mat() demands an unambiguous 2-D (or 1-D row) layout;
  // mat_view reinterprets the flat buffer with explicit dimensions.
  Map mat() {
    check(rank() <= 2, "mat() needs rank <= 2, got " + shape_str(shape()));
    return Map(data(), rows(), cols());
  }
  ConstMap mat() const {
    check(rank() <= 2, "mat() needs rank <= 2, got " + shape_str(shape()));
    return ConstMap(data(), rows(), cols());
  }
  Map mat_view(int r, int c) {
    check(static_cast<std::int64_t>(r) * c == numel(),
          "mat_view(" + std::to_string(r) + "," + std::to_string(c) +
              ") does not cover " + shape_str(shape()));
    return Map(data(), r, c);
  }
  ConstMap mat_view(int r, int c) const {
    check(static_cast<std::int64_t>(r) * c == numel(),
          "mat_view(" + std::to_string(r) + "," + std::to_string(c) +
              ") does not cover " + shape_str(shape()));
    return ConstMap(data(), r, c);
  }

  // --- autodiff plumbing ---

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true) {
    d_->requires_grad = flag;
    return *this;
  }
  void mark_tracked() const { d_->tracked = true; }
  // Gradient must flow into this tensor: either a leaf parameter or an
  // intermediate the chain continues through.
  bool tracked() const { return d_->requires_grad || d_->tracked; }

  bool has_grad() const { return !d_->grad.empty(); }
  void ensure_grad() const {
    if (d_->grad.empty())
      d_->grad.assign(static_cast<std::size_t>(numel()), Scalar(0));
  }
  Scalar* grad_data() const { return d_->grad.data(); }
  Map grad_mat() const {
    ensure_grad();
    return Map(d_->grad.data(), rows(), cols());
  }
  Map grad_view(int r, int c) const {
    ensure_grad();
    check(static_cast<std::int64_t>(r) * c == numel(),
          "grad_view does not cover " + shape_str(shape()));
    return Map(d_->grad.data(), r, c);
  }
  std::vector<Scalar>& grad_buf() const {
    ensure_grad();
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  Tensor grad_tensor() const {
    check(has_grad(), "grad_tensor() before any accumulation");
    Tensor g(shape());
    g.d_->elems = d_->grad;
    return g;
  }

  Tensor clone() const {
    Tensor t(shape());
    t.d_->elems = d_->elems;
    return t;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  std::shared_ptr<TensorData<Scalar>> d_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

// --- gradient tape ----------------------------------------------------------
//
// Define-by-run: constructing a GradTape makes it the active tape for the
// current thread (and scalar type) until it is destroyed; ops append one
// closure per node. backward() seeds d(loss)/d(loss) = 1 and replays the
// closures newest-first, which is a valid reverse topological order because
// every op's inputs are recorded before its output is consumed downstream.
// With no tape alive, ops run forward-only and record nothing, so a frozen
// model can run concurrently from many threads.

template <typename Scalar>
class GradTape {
 public:
  GradTape() : prev_(active_) { active_ = this; }
  ~GradTape() { active_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor<Scalar>& loss) {
    check(loss.numel() == 1,
          "backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.tracked())
      throw TapeError("backward(): loss was not produced under this tape");
    loss.ensure_grad();
    loss.grad_buf()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static thread_local GradTape* active_;
  std::vector<std::function<void()>> nodes_;
  GradTape* prev_;
};

template <typename Scalar>
thread_local GradTape<Scalar>* GradTape<Scalar>::active_ = nullptr;

// Runs backward on the innermost active tape; throws TapeError without one.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  auto* tape = GradTape<Scalar>::active();
  if (!tape) throw TapeError("backward() called with no active tape");
  tape->backward(loss);
}

// --- deterministic RNG -------------------------------------------------------
//
// Gaussian samples come from an explicit Box-Muller transform over mt19937_64
// rather than std::normal_distribution, whose output sequence is not pinned
// by the standard and differs across library implementations.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(
                                             hi - lo + 1));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename Scalar>
  void fill_normal(Tensor<Scalar>& t, double mean, double stddev) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<Scalar>(normal(mean, stddev));
  }

  template <typename Scalar>
  void fill_uniform(Tensor<Scalar>& t, double lo, double hi) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<Scalar>(uniform(lo, hi));
  }

  // Decorrelated child stream: hash-mixes (seed, stream) so consumers can
  // draw per-step batches independent of how much the parent sequence moved.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace xf
