#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// The engine is deliberately small: only the ops the grounding model needs,
// no general broadcasting, no views. Everything is templated on the scalar
// type so the same code runs in float (training) and double (gradient
// checks). A Tape is confined to one thread; separate tapes may run
// concurrently on shared read-only parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace vg {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: shape entries must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// multiply-accumulate instrumentation

// Counts matmul multiply-accumulates. Scoped sinks let a caller attribute
// work to a region (e.g. one branch of the model) on top of the running total.
struct MacCounter {
  unsigned long long total = 0;
  std::vector<unsigned long long*> sinks;
};

inline MacCounter& mac_counter() {
  static thread_local MacCounter c;
  return c;
}

inline void count_macs(unsigned long long n) {
  MacCounter& c = mac_counter();
  c.total += n;
  for (unsigned long long* s : c.sinks) *s += n;
}

class MacScope {
 public:
  explicit MacScope(unsigned long long* sink) { mac_counter().sinks.push_back(sink); }
  ~MacScope() { mac_counter().sinks.pop_back(); }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;
};

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(Shape s, bool rg = false) {
    Tensor t;
    int n = shape_numel(s);
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(n, T(0));
    t.requires_grad = rg;
    if (rg) t.grad = std::make_shared<std::vector<T>>(n, T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> vals, bool rg = false) {
    if (shape_numel(s) != static_cast<int>(vals.size()))
      throw std::invalid_argument("tensor: data length does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(vals));
    t.requires_grad = rg;
    if (rg) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor scalar(T v, bool rg = false) { return from({1}, {v}, rg); }

  bool defined() const { return static_cast<bool>(data); }
  int numel() const { return data ? static_cast<int>(data->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }

  // last-dim/row helpers; rank-1 tensors count as a single row
  int cols() const { return shape.empty() ? 0 : shape.back(); }
  int rows() const { return cols() ? numel() / cols() : 0; }

  T& at(int i, int j) { return (*data)[static_cast<std::size_t>(i) * cols() + j]; }
  const T& at(int i, int j) const { return (*data)[static_cast<std::size_t>(i) * cols() + j]; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape));
    return (*data)[0];
  }

  // fresh constant copy, cut off from the graph
  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    return t;
  }

  void ensure_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }
};

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : *t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string(op) + ": non-finite value produced");
  }
}

// ---------------------------------------------------------------------------
// Tape: forward-ordered record of backward rules, replayed once in reverse.

template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays every recorded rule in reverse.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
    if (!loss.requires_grad)
      throw std::invalid_argument("backward: loss does not require grad");
    (*loss.grad)[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
};

template <typename T>
inline Tape<T>*& active_tape() {
  static thread_local Tape<T>* tape = nullptr;
  return tape;
}

// RAII scope making `tape` the recording target on this thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
inline bool tracks_grad(const Tensor<T>& t) {
  return active_tape<T>() != nullptr && t.requires_grad;
}

template <typename T>
inline Tensor<T> make_output(Shape s, bool rg) {
  Tensor<T> out = Tensor<T>::zeros(std::move(s), rg && active_tape<T>() != nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 operands");
  const int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape) + " x " +
                                shape_str(b.shape));
  Tensor<T> out = make_output<T>({m, n}, a.requires_grad || b.requires_grad);
  {
    const T* pa = a.data->data();
    const T* pb = b.data->data();
    T* po = out.data->data();
    for (int i = 0; i < m; ++i) {
      const T* arow = pa + static_cast<std::size_t>(i) * k;
      T* orow = po + static_cast<std::size_t>(i) * n;
      for (int l = 0; l < k; ++l) {
        const T av = arow[l];
        const T* brow = pb + static_cast<std::size_t>(l) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  count_macs(static_cast<unsigned long long>(m) * n * k);
  check_finite(out, "matmul");
  if (out.requires_grad && (tracks_grad(a) || tracks_grad(b))) {
    active_tape<T>()->record([a, b, out, m, n, k]() {
      const T* go = out.grad->data();
      if (a.requires_grad) {
        // dA = dC . B^T
        T* ga = a.grad->data();
        const T* pb = b.data->data();
        for (int i = 0; i < m; ++i) {
          const T* gorow = go + static_cast<std::size_t>(i) * n;
          T* garow = ga + static_cast<std::size_t>(i) * k;
          for (int l = 0; l < k; ++l) {
            const T* brow = pb + static_cast<std::size_t>(l) * n;
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += gorow[j] * brow[j];
            garow[l] += acc;
          }
        }
      }
      if (b.requires_grad) {
        // dB = A^T . dC
        T* gb = b.grad->data();
        const T* pa = a.data->data();
        for (int l = 0; l < k; ++l) {
          T* gbrow = gb + static_cast<std::size_t>(l) * n;
          for (int i = 0; i < m; ++i) {
            const T av = pa[static_cast<std::size_t>(i) * k + l];
            const T* gorow = go + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * gorow[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expects rank-2 operand");
  const int m = a.shape[0], n = a.shape[1];
  Tensor<T> out = make_output<T>({n, m}, a.requires_grad);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) (*out.data)[static_cast<std::size_t>(j) * m + i] = a.at(i, j);
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out, m, n]() {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + j] += (*out.grad)[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

namespace detail {

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

// elementwise binary op with per-element partials
template <typename T, typename Fwd, typename Bwd>
Tensor<T> ew_binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Bwd bwd) {
  check_same_shape(a, b, name);
  Tensor<T> out = make_output<T>(a.shape, a.requires_grad || b.requires_grad);
  const int n = a.numel();
  for (int i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
  check_finite(out, name);
  if (out.requires_grad && (tracks_grad(a) || tracks_grad(b))) {
    active_tape<T>()->record([a, b, out, n, bwd]() {
      for (int i = 0; i < n; ++i) {
        T da = 0, db = 0;
        bwd((*a.data)[i], (*b.data)[i], (*out.grad)[i], da, db);
        if (a.requires_grad) (*a.grad)[i] += da;
        if (b.requires_grad) (*b.grad)[i] += db;
      }
    });
  }
  return out;
}

// elementwise unary op: fwd(x) and dfdx(x, y)
template <typename T, typename Fwd, typename Dfdx>
Tensor<T> ew_unary(const Tensor<T>& a, const char* name, Fwd fwd, Dfdx dfdx) {
  Tensor<T> out = make_output<T>(a.shape, a.requires_grad);
  const int n = a.numel();
  for (int i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i]);
  check_finite(out, name);
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out, n, dfdx]() {
      for (int i = 0; i < n; ++i)
        (*a.grad)[i] += (*out.grad)[i] * dfdx((*a.data)[i], (*out.data)[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(a, b, "add",
                           [](T x, T y) { return x + y; },
                           [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(a, b, "sub",
                           [](T x, T y) { return x - y; },
                           [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(a, b, "mul",
                           [](T x, T y) { return x * y; },
                           [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(a, b, "div",
                           [](T x, T y) { return x / y; },
                           [](T x, T y, T g, T& da, T& db) {
                             da = g / y;
                             db = -g * x / (y * y);
                           });
}

// ties route to the first operand
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(a, b, "minimum",
                           [](T x, T y) { return x <= y ? x : y; },
                           [](T x, T y, T g, T& da, T& db) {
                             if (x <= y) da = g; else db = g;
                           });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(a, b, "maximum",
                           [](T x, T y) { return x >= y ? x : y; },
                           [](T x, T y, T g, T& da, T& db) {
                             if (x >= y) da = g; else db = g;
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::ew_unary(a, "scale", [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
  return detail::ew_unary(a, "add_const", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::ew_unary(a, "relu",
                          [](T x) { return x > T(0) ? x : T(0); },
                          [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return detail::ew_unary(
      a, "gelu",
      [](T x) {
        return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
      },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(kPi));
        return cdf + x * pdf;
      });
}

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::ew_unary(a, "sigmoid",
                          [](T x) { return sigmoid_scalar(x); },
                          [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::ew_unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::ew_unary(a, "abs",
                          [](T x) { return std::fabs(x); },
                          [](T x, T) { return x >= T(0) ? T(1) : T(-1); });
}

// stable binary cross entropy on logits; targets may be soft and carry no grad
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::check_same_shape(logits, targets, "bce_with_logits");
  Tensor<T> out = make_output<T>(logits.shape, logits.requires_grad);
  const int n = logits.numel();
  for (int i = 0; i < n; ++i) {
    const T x = (*logits.data)[i];
    const T y = (*targets.data)[i];
    (*out.data)[i] = std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::fabs(x)));
  }
  check_finite(out, "bce_with_logits");
  if (out.requires_grad && tracks_grad(logits)) {
    active_tape<T>()->record([logits, targets, out, n]() {
      for (int i = 0; i < n; ++i) {
        const T x = (*logits.data)[i];
        (*logits.grad)[i] += (*out.grad)[i] * (sigmoid_scalar(x) - (*targets.data)[i]);
      }
    });
  }
  return out;
}

// a [m x n] + v broadcast over rows; v is rank-1 [n] or [1 x n]
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  const int n = a.cols();
  if (v.numel() != n)
    throw std::invalid_argument("add_rowvec: vector length " + std::to_string(v.numel()) +
                                " does not match row width " + std::to_string(n));
  const int m = a.rows();
  Tensor<T> out = make_output<T>(a.shape, a.requires_grad || v.requires_grad);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      (*out.data)[static_cast<std::size_t>(i) * n + j] = a.at(i, j) + (*v.data)[j];
  check_finite(out, "add_rowvec");
  if (out.requires_grad && (tracks_grad(a) || tracks_grad(v))) {
    active_tape<T>()->record([a, v, out, m, n]() {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          const T g = (*out.grad)[static_cast<std::size_t>(i) * n + j];
          if (a.requires_grad) (*a.grad)[static_cast<std::size_t>(i) * n + j] += g;
          if (v.requires_grad) (*v.grad)[j] += g;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = make_output<T>({1}, a.requires_grad);
  T acc = 0;
  for (T v : *a.data) acc += v;
  (*out.data)[0] = acc;
  check_finite(out, "sum");
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out]() {
      const T g = (*out.grad)[0];
      for (auto& gv : *a.grad) gv += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int n = parts[0].cols();
  int m = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != n) throw std::invalid_argument("concat_rows: column widths differ");
    m += p.rows();
    rg = rg || p.requires_grad;
  }
  Tensor<T> out = make_output<T>({m, n}, rg);
  int row = 0;
  for (const auto& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.data->begin() + static_cast<std::size_t>(row) * n);
    row += p.rows();
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracks_grad(p);
  if (out.requires_grad && track) {
    active_tape<T>()->record([parts, out, n]() {
      int r = 0;
      for (const auto& p : parts) {
        if (p.requires_grad) {
          const std::size_t off = static_cast<std::size_t>(r) * n;
          for (int i = 0; i < p.numel(); ++i) (*p.grad)[i] += (*out.grad)[off + i];
        }
        r += p.rows();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int r0, int r1) {
  const int m = a.rows(), n = a.cols();
  if (r0 < 0 || r1 > m || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") for " + std::to_string(m) + " rows");
  Tensor<T> out = make_output<T>({r1 - r0, n}, a.requires_grad);
  std::copy(a.data->begin() + static_cast<std::size_t>(r0) * n,
            a.data->begin() + static_cast<std::size_t>(r1) * n, out.data->begin());
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out, r0, n]() {
      const std::size_t off = static_cast<std::size_t>(r0) * n;
      for (int i = 0; i < out.numel(); ++i) (*a.grad)[off + i] += (*out.grad)[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0].rows();
  int n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row counts differ");
    n += p.cols();
    rg = rg || p.requires_grad;
  }
  Tensor<T> out = make_output<T>({m, n}, rg);
  int col = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < m; ++i)
      std::copy(p.data->begin() + static_cast<std::size_t>(i) * pc,
                p.data->begin() + static_cast<std::size_t>(i + 1) * pc,
                out.data->begin() + static_cast<std::size_t>(i) * n + col);
    col += pc;
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracks_grad(p);
  if (out.requires_grad && track) {
    active_tape<T>()->record([parts, out, m, n]() {
      int c = 0;
      for (const auto& p : parts) {
        const int pc = p.cols();
        if (p.requires_grad) {
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < pc; ++j)
              (*p.grad)[static_cast<std::size_t>(i) * pc + j] +=
                  (*out.grad)[static_cast<std::size_t>(i) * n + c + j];
        }
        c += pc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int c1) {
  const int m = a.rows(), n = a.cols();
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + std::to_string(n) + " cols");
  const int w = c1 - c0;
  Tensor<T> out = make_output<T>({m, w}, a.requires_grad);
  for (int i = 0; i < m; ++i)
    std::copy(a.data->begin() + static_cast<std::size_t>(i) * n + c0,
              a.data->begin() + static_cast<std::size_t>(i) * n + c1,
              out.data->begin() + static_cast<std::size_t>(i) * w);
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out, m, n, c0, w]() {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          (*a.grad)[static_cast<std::size_t>(i) * n + c0 + j] +=
              (*out.grad)[static_cast<std::size_t>(i) * w + j];
    });
  }
  return out;
}

// table [V x C], ids -> [len(ids) x C]; backward scatter-adds into rows
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank-2");
  const int v = table.shape[0], c = table.shape[1];
  for (int id : ids) {
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(v));
  }
  const int k = static_cast<int>(ids.size());
  Tensor<T> out = make_output<T>({k, c}, table.requires_grad);
  for (int i = 0; i < k; ++i)
    std::copy(table.data->begin() + static_cast<std::size_t>(ids[i]) * c,
              table.data->begin() + static_cast<std::size_t>(ids[i] + 1) * c,
              out.data->begin() + static_cast<std::size_t>(i) * c);
  if (out.requires_grad && tracks_grad(table)) {
    active_tape<T>()->record([table, out, ids, c]() {
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < c; ++j)
          (*table.grad)[static_cast<std::size_t>(ids[i]) * c + j] += (*out.grad)[i * c + j];
    });
  }
  return out;
}

// Row-wise softmax over the last dim; key positions with mask==1 get
// probability exactly 0. Throws if every position is masked.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, const std::vector<std::uint8_t>& mask) {
  const int n = a.cols();
  if (static_cast<int>(mask.size()) != n)
    throw std::invalid_argument("masked_softmax: mask length does not match last dim");
  bool any_open = false;
  for (std::uint8_t m : mask) {
    if (m != 0 && m != 1) throw std::invalid_argument("masked_softmax: mask entries must be 0/1");
    any_open = any_open || m == 0;
  }
  if (!any_open) throw std::runtime_error("masked_softmax: degenerate mask, every position masked");
  const int rows = a.rows();
  Tensor<T> out = make_output<T>(a.shape, a.requires_grad);
  for (int i = 0; i < rows; ++i) {
    const T* x = a.data->data() + static_cast<std::size_t>(i) * n;
    T* y = out.data->data() + static_cast<std::size_t>(i) * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j)
      if (!mask[j]) mx = std::max(mx, x[j]);
    T z = 0;
    for (int j = 0; j < n; ++j) {
      y[j] = mask[j] ? T(0) : std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= z;
  }
  check_finite(out, "masked_softmax");
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out, mask, rows, n]() {
      for (int i = 0; i < rows; ++i) {
        const T* y = out.data->data() + static_cast<std::size_t>(i) * n;
        const T* gy = out.grad->data() + static_cast<std::size_t>(i) * n;
        T dot = 0;
        for (int j = 0; j < n; ++j)
          if (!mask[j]) dot += gy[j] * y[j];
        T* gx = a.grad->data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j)
          if (!mask[j]) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  return masked_softmax(a, std::vector<std::uint8_t>(a.cols(), 0));
}

// Per-row normalization over the last dim, then affine by gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const int d = a.cols();
  if (gain.numel() != d || bias.numel() != d)
    throw std::invalid_argument("layer_norm: gain/bias length does not match last dim");
  const int rows = a.rows();
  Tensor<T> out =
      make_output<T>(a.shape, a.requires_grad || gain.requires_grad || bias.requires_grad);
  std::vector<T> inv_sd(rows), xhat(static_cast<std::size_t>(rows) * d);
  for (int i = 0; i < rows; ++i) {
    const T* x = a.data->data() + static_cast<std::size_t>(i) * d;
    T mu = 0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    T var = 0;
    for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= d;
    const T is = T(1) / std::sqrt(var + eps);
    inv_sd[i] = is;
    T* y = out.data->data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      const T xh = (x[j] - mu) * is;
      xhat[static_cast<std::size_t>(i) * d + j] = xh;
      y[j] = (*gain.data)[j] * xh + (*bias.data)[j];
    }
  }
  check_finite(out, "layer_norm");
  if (out.requires_grad && (tracks_grad(a) || tracks_grad(gain) || tracks_grad(bias))) {
    active_tape<T>()->record([a, gain, bias, out, rows, d, inv_sd = std::move(inv_sd),
                              xhat = std::move(xhat)]() {
      for (int i = 0; i < rows; ++i) {
        const T* gy = out.grad->data() + static_cast<std::size_t>(i) * d;
        const T* xh = xhat.data() + static_cast<std::size_t>(i) * d;
        if (gain.requires_grad || bias.requires_grad) {
          for (int j = 0; j < d; ++j) {
            if (gain.requires_grad) (*gain.grad)[j] += gy[j] * xh[j];
            if (bias.requires_grad) (*bias.grad)[j] += gy[j];
          }
        }
        if (a.requires_grad) {
          T mean_g = 0, mean_gx = 0;
          for (int j = 0; j < d; ++j) {
            const T gj = gy[j] * (*gain.data)[j];
            mean_g += gj;
            mean_gx += gj * xh[j];
          }
          mean_g /= d;
          mean_gx /= d;
          T* gx = a.grad->data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            const T gj = gy[j] * (*gain.data)[j];
            gx[j] += (gj - mean_g - xh[j] * mean_gx) * inv_sd[i];
          }
        }
      }
    });
  }
  return out;
}

// Masked rows are zeroed before a per-channel max over rows (the zeroed rows
// still participate). Gradient routes to the winning unmasked entry; ties go
// to the lowest row index.
template <typename T>
Tensor<T> masked_max_pool(const Tensor<T>& a, const std::vector<std::uint8_t>& mask) {
  if (a.rank() != 2) throw std::invalid_argument("masked_max_pool: expects rank-2 input");
  const int k = a.shape[0], c = a.shape[1];
  if (static_cast<int>(mask.size()) != k)
    throw std::invalid_argument("masked_max_pool: mask length does not match rows");
  bool any_open = false;
  for (std::uint8_t m : mask) any_open = any_open || m == 0;
  if (!any_open) throw std::runtime_error("masked_max_pool: degenerate mask, every row masked");
  Tensor<T> out = make_output<T>({1, c}, a.requires_grad);
  std::vector<int> argmax(c, -1);  // -1: a zeroed masked row won
  for (int j = 0; j < c; ++j) {
    T best = -std::numeric_limits<T>::infinity();
    int bi = -1;
    for (int i = 0; i < k; ++i) {
      const T v = mask[i] ? T(0) : a.at(i, j);
      if (v > best) {
        best = v;
        bi = mask[i] ? -1 : i;
      }
    }
    (*out.data)[j] = best;
    argmax[j] = bi;
  }
  check_finite(out, "masked_max_pool");
  if (out.requires_grad && tracks_grad(a)) {
    active_tape<T>()->record([a, out, argmax = std::move(argmax), c]() {
      for (int j = 0; j < c; ++j)
        if (argmax[j] >= 0)
          (*a.grad)[static_cast<std::size_t>(argmax[j]) * c + j] += (*out.grad)[j];
    });
  }
  return out;
}

}  // namespace vg
