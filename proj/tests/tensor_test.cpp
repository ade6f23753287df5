#include <doctest.h>

#include <cmath>

#include "vglab/gradcheck.hpp"
#include "vglab/rng.hpp"
#include "vglab/tensor.hpp"

using namespace vg;

namespace {

Tensor<double> rand_tensor(Shape s, Rng& rng, bool rg = false) {
  Tensor<double> t = Tensor<double>::zeros(std::move(s), rg);
  for (auto& v : *t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("tensor shape and data invariants") {
  Tensor<double> t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>::zeros({0, 2}), std::invalid_argument);
}

TEST_CASE("matmul forced arithmetic") {
  Tensor<double> i2 = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  Tensor<double> r = matmul(i2, i2);
  CHECK(r.at(0, 0) == 1.0);
  CHECK(r.at(0, 1) == 0.0);
  CHECK(r.at(1, 1) == 1.0);

  Tensor<double> a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  Tensor<double> b = Tensor<double>::from({2, 1}, {0, 1});
  Tensor<double> c = matmul(a, b);
  CHECK(c.at(0, 0) == 2.0);
  CHECK(c.at(1, 0) == 4.0);

  CHECK_THROWS_AS(matmul(a, Tensor<double>::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("matmul matches a scalar triple-loop oracle") {
  Rng rng(11);
  Tensor<double> a = rand_tensor({5, 7}, rng);
  Tensor<double> b = rand_tensor({7, 3}, rng);
  Tensor<double> c = matmul(a, b);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int l = 0; l < 7; ++l) acc += a.at(i, l) * b.at(l, j);
      CHECK(std::fabs(c.at(i, j) - acc) < 1e-12);
    }
  }
}

TEST_CASE("masked_softmax forced cases") {
  Tensor<double> x = Tensor<double>::from({1, 2}, {0, 0});
  Tensor<double> y = masked_softmax(x, {0, 0});
  CHECK(y.at(0, 0) == doctest::Approx(0.5));
  CHECK(y.at(0, 1) == doctest::Approx(0.5));

  Tensor<double> x2 = Tensor<double>::from({1, 2}, {3.7, -123.0});
  Tensor<double> y2 = masked_softmax(x2, {0, 1});
  CHECK(y2.at(0, 0) == 1.0);
  CHECK(y2.at(0, 1) == 0.0);

  // hand exp/normalize of [1,2], slot 3 masked
  Tensor<double> x3 = Tensor<double>::from({1, 3}, {1, 2, 3});
  Tensor<double> y3 = masked_softmax(x3, {0, 0, 1});
  const double e1 = std::exp(1.0 - 2.0), e2 = std::exp(0.0);
  CHECK(y3.at(0, 0) == doctest::Approx(e1 / (e1 + e2)).epsilon(1e-12));
  CHECK(y3.at(0, 1) == doctest::Approx(e2 / (e1 + e2)).epsilon(1e-12));
  CHECK(y3.at(0, 2) == 0.0);

  CHECK_THROWS_AS(masked_softmax(x3, {1, 1, 1}), std::runtime_error);
}

TEST_CASE("masked_softmax rows sum to one over unmasked slots") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(2, 9);
    Tensor<double> x = rand_tensor({4, n}, rng);
    std::vector<std::uint8_t> mask(n, 0);
    for (int j = 0; j < n; ++j) mask[j] = rng.uniform() < 0.4 ? 1 : 0;
    mask[rng.uniform_int(0, n - 1)] = 0;
    Tensor<double> y = masked_softmax(x, mask);
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < n; ++j) {
        if (mask[j]) CHECK(y.at(i, j) == 0.0);
        s += y.at(i, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("layer_norm forced cases") {
  Tensor<double> gain = Tensor<double>::full({4}, 1.0);
  Tensor<double> bias = Tensor<double>::zeros({4});
  Tensor<double> constant = Tensor<double>::full({1, 4}, 3.25);
  Tensor<double> y = layer_norm(constant, gain, bias, 1e-5);
  for (int j = 0; j < 4; ++j) CHECK(std::fabs(y.at(0, j)) < 1e-9);

  Tensor<double> g2 = Tensor<double>::full({2}, 1.0);
  Tensor<double> b2 = Tensor<double>::zeros({2});
  Tensor<double> x = Tensor<double>::from({1, 2}, {1, -1});
  Tensor<double> y2 = layer_norm(x, g2, b2, 1e-14);
  CHECK(y2.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y2.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm normalizes random rows") {
  Rng rng(17);
  Tensor<double> gain = Tensor<double>::full({16}, 1.0);
  Tensor<double> bias = Tensor<double>::zeros({16});
  Tensor<double> x = rand_tensor({3, 16}, rng);
  Tensor<double> y = layer_norm(x, gain, bias, 1e-12);
  for (int i = 0; i < 3; ++i) {
    double m = 0, v = 0;
    for (int j = 0; j < 16; ++j) m += y.at(i, j);
    m /= 16;
    for (int j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    v /= 16;
    CHECK(std::fabs(m) < 1e-6);
    CHECK(std::fabs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("backward basics") {
  // loss = sum(w) -> grad all ones
  Tensor<double> w = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = sum(w);
    tape.backward(loss);
  }
  for (double g : *w.grad) CHECK(g == 1.0);

  // loss = sum(w * w) -> grad 2w, accumulated on top of the previous ones
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = sum(mul(w, w));
    tape.backward(loss);
  }
  for (int i = 0; i < w.numel(); ++i)
    CHECK((*w.grad)[i] == doctest::Approx(1.0 + 2.0 * (*w.data)[i]));

  // non-scalar loss is a contract violation
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> y = mul(w, w);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("non-finite forward output is a hard error") {
  Tensor<double> big = Tensor<double>::full({1, 2}, 1e308);
  CHECK_THROWS_WITH_AS(add(big, big), doctest::Contains("non-finite"), std::runtime_error);
  Tensor<double> zero = Tensor<double>::zeros({1, 2});
  CHECK_THROWS_AS(div(big, zero), std::runtime_error);
}

TEST_CASE("per-op gradients match central finite differences") {
  Rng rng(29);
  const double step = 1e-6, tol = 1e-5;

  auto check_unary = [&](auto op, Shape s, double lo, double hi) {
    Tensor<double> x = Tensor<double>::zeros(s, true);
    for (auto& v : *x.data) v = rng.uniform(lo, hi);
    auto f = [&]() { return sum(op(x)); };
    GradCheckReport r = grad_check<double>(f, {&x}, step, tol);
    CHECK(r.probes >= static_cast<int>(x.numel()));
    CHECK_MESSAGE(r.pass, "unary op max_rel_err=", r.max_rel_err);
  };
  check_unary([](const Tensor<double>& x) { return relu(x); }, {10, 11}, 0.05, 1.0);
  check_unary([](const Tensor<double>& x) { return gelu(x); }, {10, 11}, -2.0, 2.0);
  check_unary([](const Tensor<double>& x) { return sigmoid(x); }, {10, 11}, -3.0, 3.0);
  check_unary([](const Tensor<double>& x) { return vg::log(x); }, {10, 11}, 0.2, 3.0);
  check_unary([](const Tensor<double>& x) { return vg::abs(x); }, {10, 11}, 0.05, 1.0);
  check_unary([](const Tensor<double>& x) { return scale(x, -1.7); }, {10, 11}, -1.0, 1.0);
  check_unary([](const Tensor<double>& x) { return add_const(x, 0.3); }, {10, 11}, -1.0, 1.0);
  check_unary([](const Tensor<double>& x) { return transpose(x); }, {10, 11}, -1.0, 1.0);
  check_unary([](const Tensor<double>& x) { return softmax(x); }, {10, 11}, -2.0, 2.0);

  auto check_binary = [&](auto op, Shape s, double lo, double hi) {
    Tensor<double> a = Tensor<double>::zeros(s, true);
    Tensor<double> b = Tensor<double>::zeros(s, true);
    for (auto& v : *a.data) v = rng.uniform(lo, hi);
    for (auto& v : *b.data) v = rng.uniform(lo, hi) + 1.3;  // keep div well away from 0
    auto f = [&]() { return sum(op(a, b)); };
    GradCheckReport r = grad_check<double>(f, {&a, &b}, step, tol);
    CHECK(r.probes >= 2 * a.numel());
    CHECK_MESSAGE(r.pass, "binary op max_rel_err=", r.max_rel_err);
  };
  check_binary([](const Tensor<double>& a, const Tensor<double>& b) { return add(a, b); },
               {8, 9}, -1, 1);
  check_binary([](const Tensor<double>& a, const Tensor<double>& b) { return sub(a, b); },
               {8, 9}, -1, 1);
  check_binary([](const Tensor<double>& a, const Tensor<double>& b) { return mul(a, b); },
               {8, 9}, -1, 1);
  check_binary([](const Tensor<double>& a, const Tensor<double>& b) { return div(a, b); },
               {8, 9}, 0.5, 1.5);
  check_binary([](const Tensor<double>& a, const Tensor<double>& b) { return minimum(a, b); },
               {8, 9}, -1, 1);
  check_binary([](const Tensor<double>& a, const Tensor<double>& b) { return maximum(a, b); },
               {8, 9}, -1, 1);

  // matmul, both operands
  {
    Tensor<double> a = rand_tensor({10, 8}, rng, true);
    Tensor<double> b = rand_tensor({8, 9}, rng, true);
    auto f = [&]() { return sum(matmul(a, b)); };
    GradCheckReport r = grad_check<double>(f, {&a, &b}, step, tol);
    CHECK(r.probes >= 100);
    CHECK_MESSAGE(r.pass, "matmul max_rel_err=", r.max_rel_err);
  }
  // layer_norm including gain/bias
  {
    Tensor<double> x = rand_tensor({6, 12}, rng, true);
    Tensor<double> g = rand_tensor({12}, rng, true);
    Tensor<double> b = rand_tensor({12}, rng, true);
    auto f = [&]() { return sum(mul(layer_norm(x, g, b, 1e-5), layer_norm(x, g, b, 1e-5))); };
    GradCheckReport r = grad_check<double>(f, {&x, &g, &b}, step, tol);
    CHECK_MESSAGE(r.pass, "layer_norm max_rel_err=", r.max_rel_err);
  }
  // masked softmax through a weighted sum so every column matters
  {
    Tensor<double> x = rand_tensor({7, 6}, rng, true);
    Tensor<double> wts = rand_tensor({7, 6}, rng);
    const std::vector<std::uint8_t> mask = {0, 1, 0, 0, 1, 0};
    auto f = [&]() { return sum(mul(masked_softmax(x, mask), wts)); };
    GradCheckReport r = grad_check<double>(f, {&x}, step, tol);
    CHECK_MESSAGE(r.pass, "masked_softmax max_rel_err=", r.max_rel_err);
  }
  // masked max pool (probes away from ties)
  {
    Tensor<double> x = rand_tensor({6, 9}, rng, true);
    Tensor<double> wts = rand_tensor({1, 9}, rng);
    const std::vector<std::uint8_t> mask = {0, 1, 0, 0, 1, 0};
    auto f = [&]() { return sum(mul(masked_max_pool(x, mask), wts)); };
    GradCheckReport r = grad_check<double>(f, {&x}, 1e-7, tol);
    CHECK_MESSAGE(r.pass, "masked_max_pool max_rel_err=", r.max_rel_err);
  }
  // bce_with_logits
  {
    Tensor<double> x = rand_tensor({9, 3}, rng, true);
    Tensor<double> t = Tensor<double>::zeros({9, 3});
    for (auto& v : *t.data) v = rng.uniform(0.0, 1.0);
    auto f = [&]() { return sum(bce_with_logits(x, t)); };
    GradCheckReport r = grad_check<double>(f, {&x}, step, tol);
    CHECK_MESSAGE(r.pass, "bce max_rel_err=", r.max_rel_err);
  }
  // rowvec broadcast, slices, concats, embedding
  {
    Tensor<double> a = rand_tensor({6, 5}, rng, true);
    Tensor<double> v = rand_tensor({5}, rng, true);
    auto f = [&]() {
      Tensor<double> y = add_rowvec(a, v);
      Tensor<double> c =
          concat_cols<double>({slice_cols(y, 0, 2), slice_cols(y, 2, 5)});
      Tensor<double> r =
          concat_rows<double>({slice_rows(c, 0, 3), slice_rows(c, 3, 6)});
      return sum(mul(r, r));
    };
    GradCheckReport r = grad_check<double>(f, {&a, &v}, step, tol);
    CHECK_MESSAGE(r.pass, "slice/concat max_rel_err=", r.max_rel_err);
  }
  {
    Tensor<double> table = rand_tensor({7, 4}, rng, true);
    const std::vector<int> ids = {1, 3, 3, 0, 6};
    auto f = [&]() { return sum(mul(embedding(table, ids), embedding(table, ids))); };
    GradCheckReport r = grad_check<double>(f, {&table}, step, tol);
    CHECK_MESSAGE(r.pass, "embedding max_rel_err=", r.max_rel_err);
  }
}

TEST_CASE("grad_check harness behaviour") {
  // quadratic form: essentially exact at a tiny step
  Tensor<double> x = Tensor<double>::from({3, 1}, {0.3, -0.7, 1.1}, true);
  auto quad = [&]() { return sum(mul(x, x)); };
  GradCheckReport r = grad_check<double>(quad, {&x}, 1e-5, 1e-8);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-8);

  // composite masked_softmax(matmul) under 1e-6
  Rng rng(5);
  Tensor<double> a = rand_tensor({4, 5}, rng, true);
  Tensor<double> b = rand_tensor({5, 6}, rng);
  Tensor<double> wts = rand_tensor({4, 6}, rng);
  const std::vector<std::uint8_t> mask = {0, 0, 1, 0, 0, 1};
  auto comp = [&]() { return sum(mul(masked_softmax(matmul(a, b), mask), wts)); };
  GradCheckReport rc = grad_check<double>(comp, {&a}, 1e-6, 1e-6);
  CHECK(rc.pass);

  // negative control: an op with a deliberately wrong backward rule fails
  Tensor<double> w = Tensor<double>::from({2, 1}, {0.4, -0.2}, true);
  auto broken = [&]() {
    Tensor<double> out = Tensor<double>::zeros({1}, true);
    (*out.data)[0] = (*w.data)[0] * (*w.data)[0] + (*w.data)[1];
    active_tape<double>()->record([w, out]() {
      (*w.grad)[0] += 17.0 * (*out.grad)[0];  // wrong on purpose
      (*w.grad)[1] += (*out.grad)[0];
    });
    return out;
  };
  GradCheckReport rb = grad_check<double>(broken, {&w}, 1e-6, 1e-4);
  CHECK_FALSE(rb.pass);

  // non-determinism is detected
  int calls = 0;
  auto flaky = [&]() {
    ++calls;
    return Tensor<double>::scalar(static_cast<double>(calls), true);
  };
  CHECK_THROWS_WITH_AS(grad_check<double>(flaky, {}, 1e-6, 1e-4),
                       doctest::Contains("deterministic"), std::runtime_error);
}

TEST_CASE("graph replay determinism") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> a = rand_tensor({6, 6}, rng, true);
    Tensor<double> b = rand_tensor({6, 6}, rng, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> y = sum(sigmoid(matmul(a, gelu(b))));
    tape.backward(y);
    std::vector<double> out = *y.data;
    out.insert(out.end(), a.grad->begin(), a.grad->end());
    out.insert(out.end(), b.grad->begin(), b.grad->end());
    return out;
  };
  CHECK(run(99) == run(99));
}

TEST_CASE("mac counter scopes") {
  const unsigned long long before = mac_counter().total;
  unsigned long long bucket = 0;
  {
    MacScope scope(&bucket);
    Tensor<double> a = Tensor<double>::zeros({3, 4});
    Tensor<double> b = Tensor<double>::zeros({4, 5});
    matmul(a, b);
  }
  Tensor<double> c = Tensor<double>::zeros({2, 2});
  matmul(c, c);
  CHECK(bucket == 3ull * 4 * 5);
  CHECK(mac_counter().total - before == 3ull * 4 * 5 + 2ull * 2 * 2);
}
