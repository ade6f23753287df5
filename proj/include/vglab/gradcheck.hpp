#pragma once

// Central finite-difference checking of recorded gradients.

#include <functional>
#include <string>
#include <vector>

#include "vglab/tensor.hpp"

namespace vg {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;  // "param[i]" of the worst coordinate
  int probes = 0;
};

namespace detail {

inline double rel_err(double a, double b) {
  const double scale = std::max({std::fabs(a), std::fabs(b), 1e-3});
  return std::fabs(a - b) / scale;
}

}  // namespace detail

// f must rebuild its graph on the active tape each call and return a scalar
// loss. Checks every coordinate of every listed parameter unless
// max_probes_per_param > 0, in which case coordinates are strided. Throws if
// two evaluations of f disagree bitwise (non-determinism).
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           const std::vector<Tensor<T>*>& params, double step, double tol,
                           int max_probes_per_param = 0) {
  const T base = [&] {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    return f().item();
  }();
  const T again = [&] {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    return f().item();
  }();
  if (base != again)
    throw std::runtime_error("grad_check: function is not deterministic across evaluations");

  for (Tensor<T>* p : params) p->zero_grad();
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f();
    tape.backward(loss);
  }

  GradCheckReport report;
  int pi = 0;
  for (Tensor<T>* p : params) {
    const int n = p->numel();
    int stride = 1;
    if (max_probes_per_param > 0 && n > max_probes_per_param) stride = n / max_probes_per_param;
    for (int i = 0; i < n; i += stride) {
      const T keep = (*p->data)[i];
      (*p->data)[i] = keep + static_cast<T>(step);
      const double up = [&] {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        return static_cast<double>(f().item());
      }();
      (*p->data)[i] = keep - static_cast<T>(step);
      const double dn = [&] {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        return static_cast<double>(f().item());
      }();
      (*p->data)[i] = keep;
      const double numeric = (up - dn) / (2.0 * step);
      const double analytic = static_cast<double>((*p->grad)[i]);
      const double err = detail::rel_err(analytic, numeric);
      ++report.probes;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = "param" + std::to_string(pi) + "[" + std::to_string(i) + "]";
      }
    }
    ++pi;
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace vg
