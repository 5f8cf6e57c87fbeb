#include <doctest.h>

#include <cmath>
#include <sstream>

#include "arvsr/core/errors.hpp"
#include "arvsr/core/grad_check.hpp"
#include "arvsr/core/image.hpp"
#include "arvsr/core/io.hpp"
#include "arvsr/core/ops.hpp"
#include "arvsr/core/optim.hpp"
#include "arvsr/core/rng.hpp"

using namespace arvsr;

namespace {

constexpr DType f64 = DType::kF64;

Tensor rand64(Shape s, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng, 1.0, f64);
}

// Naive reference: zero-padded conv via explicit index arithmetic.
std::vector<double> conv_ref(const Tensor& x, const Tensor& w, const Conv3dOptions& o) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const Shape os = conv3d_output_shape(xs, ws, o);
  std::vector<double> out(shape_numel(os), 0.0);
  auto X = [&](int64_t b, int64_t c, int64_t t, int64_t h, int64_t ww) -> double {
    if (t < 0 || t >= xs[2] || h < 0 || h >= xs[3] || ww < 0 || ww >= xs[4]) return 0.0;
    return x.data()[(((b * xs[1] + c) * xs[2] + t) * xs[3] + h) * xs[4] + ww];
  };
  size_t idx = 0;
  for (int64_t b = 0; b < os[0]; ++b)
    for (int64_t co = 0; co < os[1]; ++co)
      for (int64_t t = 0; t < os[2]; ++t)
        for (int64_t h = 0; h < os[3]; ++h)
          for (int64_t q = 0; q < os[4]; ++q, ++idx) {
            double s = 0.0;
            for (int64_t ci = 0; ci < ws[1]; ++ci)
              for (int64_t a = 0; a < ws[2]; ++a)
                for (int64_t bb = 0; bb < ws[3]; ++bb)
                  for (int64_t c = 0; c < ws[4]; ++c)
                    s += w.data()[(((co * ws[1] + ci) * ws[2] + a) * ws[3] + bb) * ws[4] + c] *
                         X(b, ci, t * o.stride[0] - o.pad_t_front + a, h * o.stride[1] - o.pad_h + bb,
                           q * o.stride[2] - o.pad_w + c);
            out[idx] = s;
          }
  return out;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tensor y = softmax(Tensor::zeros({3}));
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("identity matmul") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1}, f64);
  Tensor m = rand64({2, 5}, 3);
  Tensor y = matmul(eye, m);
  for (int64_t i = 0; i < m.numel(); ++i) CHECK(y.data()[i] == m.data()[i]);
}

TEST_CASE("conv3d stride arithmetic") {
  Conv3dOptions o;
  o.stride = {1, 2, 2};
  o.pad_t_front = o.pad_t_back = o.pad_h = o.pad_w = 1;
  Tensor x = rand64({1, 2, 3, 8, 8}, 1);
  Tensor w = rand64({4, 2, 3, 3, 3}, 2);
  Tensor y = conv3d(x, w, Tensor(), o);
  CHECK(y.shape() == Shape{1, 4, 3, 4, 4});
  auto ref = conv_ref(x, w, o);
  for (size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv3d matches naive reference across strides and paddings") {
  Rng rng(11);
  for (int trial = 0; trial < 12; ++trial) {
    Conv3dOptions o;
    o.stride = {static_cast<int>(rng.uniform_int(1, 3)), static_cast<int>(rng.uniform_int(1, 2)),
                static_cast<int>(rng.uniform_int(1, 3))};
    o.pad_t_front = static_cast<int>(rng.uniform_int(0, 3));
    o.pad_t_back = static_cast<int>(rng.uniform_int(0, 1));
    o.pad_h = static_cast<int>(rng.uniform_int(0, 2));
    o.pad_w = static_cast<int>(rng.uniform_int(0, 2));
    const int64_t kt = rng.uniform_int(1, 3), kh = rng.uniform_int(1, 3), kw = rng.uniform_int(1, 4);
    Tensor x = rand64({2, 2, 4, 7, 9}, 100 + trial);
    Tensor w = rand64({3, 2, kt, kh, kw}, 200 + trial);
    Tensor y = conv3d(x, w, Tensor(), o);
    auto ref = conv_ref(x, w, o);
    REQUIRE(static_cast<size_t>(y.numel()) == ref.size());
    for (size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("grad_check on sum of squares") {
  Tensor x = Tensor::from_data({2}, {1, 2}, f64);
  CHECK(grad_check([](const Tensor& t) { return sum(square(t)); }, x) <= 1e-6);
}

TEST_CASE("gradients of exported ops match finite differences") {
  auto weights = rand64({2, 3, 4}, 77);
  auto check = [&](const char* name, auto f, Shape shape, double lo = -1.0, double hi = 1.0) {
    Rng rng(std::hash<std::string>{}(name));
    Tensor x = Tensor::uniform(shape, rng, lo, hi, f64);
    INFO(std::string(name));
    CHECK(grad_check(f, x) <= 1e-4);
  };
  Tensor w3 = rand64({2, 3, 4}, 5);
  check("mul_broadcast", [&](const Tensor& x) { return sum(mul(x, Tensor::from_data({4}, {1, -2, 3, 0.5}, f64)) * w3); }, {2, 3, 4});
  check("div", [&](const Tensor& x) { return sum(div(w3, x)); }, {2, 3, 4}, 0.5, 2.0);
  check("sub_bcast_lhs", [&](const Tensor& x) { return sum(square(sub(x, w3))); }, {3, 1});
  check("exp_log", [&](const Tensor& x) { return sum(log(exp(x) + 1.0) * w3); }, {2, 3, 4});
  check("sqrt", [&](const Tensor& x) { return sum(sqrt(x) * w3); }, {2, 3, 4}, 0.5, 2.0);
  check("silu_sigmoid_tanh", [&](const Tensor& x) { return sum((silu(x) + sigmoid(x) * tanh(x)) * w3); }, {2, 3, 4});
  check("abs_relu", [&](const Tensor& x) { return sum((abs(x) + relu(x)) * w3); }, {2, 3, 4}, 0.1, 1.0);
  check("sum_dim", [&](const Tensor& x) { return sum(square(sum_dim(x, 1))); }, {2, 3, 4});
  check("mean_dim_keep", [&](const Tensor& x) { return sum(mul(mean_dim(x, -1, true), x)); }, {2, 3, 4});
  check("permute", [&](const Tensor& x) { return sum(permute(x, {2, 0, 1}) * permute(w3, {2, 0, 1})); }, {2, 3, 4});
  check("slice_concat", [&](const Tensor& x) {
    Tensor a = slice(x, 1, 0, 2), b = slice(x, 1, 1, 3);
    return sum(square(concat({b, slice(a, 1, 0, 1)}, 1)) * w3);
  }, {2, 3, 4});
  check("reshape_upsample", [&](const Tensor& x) { return sum(square(upsample_nearest2d(reshape(x, {1, 2, 3, 4}), 2))); }, {2, 3, 4});
  check("matmul_shared", [&](const Tensor& x) { return sum(square(matmul(x, rand64({4, 5}, 9)))); }, {2, 3, 4});
  check("matmul_batched", [&](const Tensor& x) { return sum(square(matmul(rand64({2, 5, 3}, 8), x))); }, {2, 3, 4});
  check("matmul_rhs_shared", [&](const Tensor& x) { return sum(square(matmul(w3, x))); }, {4, 2});
  check("softmax", [&](const Tensor& x) { return sum(softmax(x) * w3); }, {2, 3, 4});
  check("layer_norm", [&](const Tensor& x) { return sum(layer_norm(x) * w3); }, {2, 3, 4});
  check("clamp", [&](const Tensor& x) { return sum(square(clamp(x, -0.5, 0.5))); }, {2, 3, 4}, -0.45, 0.45);
  check("rotary", [&](const Tensor& x) {
    std::vector<int64_t> pos = {0, 3, 7};
    return sum(rotary_embed(reshape(x, {3, 2, 4}), pos, 10000.0) * reshape(w3, {3, 2, 4}));
  }, {2, 3, 4});
  Conv3dOptions o;
  o.stride = {2, 1, 2};
  o.pad_t_front = 2;
  o.pad_h = o.pad_w = 1;
  Tensor cw = rand64({3, 2, 2, 3, 3}, 31);
  Tensor cb = rand64({3}, 32);
  check("conv3d_input", [&](const Tensor& x) { return sum(square(conv3d(x, cw, cb, o))); }, {1, 2, 4, 5, 6});
  Tensor cx = rand64({1, 2, 4, 5, 6}, 33);
  check("conv3d_weight", [&](const Tensor& w) { return sum(square(conv3d(cx, w, cb, o))); }, {3, 2, 2, 3, 3});
  check("conv3d_bias", [&](const Tensor& b) { return sum(square(conv3d(cx, cw, b, o))); }, {3});
  (void)weights;
}

TEST_CASE("attention output sum gradient on a 4-token sequence") {
  Tensor wq = rand64({8, 8}, 41), wk = rand64({8, 8}, 42), wv = rand64({8, 8}, 43);
  auto attn = [&](const Tensor& x) {
    Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
    Tensor a = softmax(mul_scalar(matmul(q, transpose(k, 0, 1)), 1.0 / std::sqrt(8.0)));
    return sum(matmul(a, v));
  };
  Tensor x = rand64({4, 8}, 44);
  CHECK(grad_check(attn, x) <= 1e-4);
}

TEST_CASE("randomized gradient property on larger shapes") {
  Rng rng(123);
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t a = rng.uniform_int(1, 20), b = rng.uniform_int(1, 20), c = rng.uniform_int(4, 20);
    Tensor w = rand64({a, b, c}, 500 + trial);
    Tensor x = rand64({a, b, c}, 600 + trial);
    auto f = [&](const Tensor& t) { return sum(mul(layer_norm(silu(t)), w)); };
    CHECK(grad_check_sampled(f, x, 200) <= 1e-4);
  }
}

TEST_CASE("non-finite outputs are rejected") {
  CHECK_THROWS_AS(log(Tensor::from_data({1}, {-1.0}, f64)), NumericalError);
  CHECK_THROWS_AS(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), NumericalError);
}

TEST_CASE("shape mismatches are rejected") {
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ShapeError);
  CHECK_THROWS_AS(reshape(Tensor::zeros({6}), {4}), ShapeError);
}

TEST_CASE("f32 tensors hold float-rounded values") {
  Tensor a = Tensor::from_data({1}, {0.1});
  CHECK(a.data()[0] == static_cast<double>(0.1f));
  Tensor b = a * 3.0;
  CHECK(b.data()[0] == static_cast<double>(static_cast<float>(static_cast<double>(0.1f) * 3.0)));
}

TEST_CASE("determinism: same seed gives bit-identical results") {
  auto run = [] {
    Rng rng(9);
    Tensor x = Tensor::randn({3, 16}, rng);
    Tensor w = Tensor::randn({16, 16}, rng);
    return softmax(layer_norm(matmul(x, w)));
  };
  Tensor a = run(), b = run();
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("rng forks are independent of parent draws") {
  Rng a(5);
  Rng child1 = a.fork(3);
  a.next_u64();
  Rng child2 = a.fork(3);
  CHECK(child1.next_u64() == child2.next_u64());
  Rng other = a.fork(4);
  Rng c3 = a.fork(3);
  CHECK(other.next_u64() != c3.next_u64());
}

TEST_CASE("rng normal moments") {
  Rng rng(17);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::fabs(s / n) < 0.01);
  CHECK(std::fabs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("TNSR1 round trip and byte layout") {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6.5});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 5 + 1 + 1 + 2 * 8 + 6 * 4);
  CHECK(bytes.substr(0, 5) == "TNSR1");
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  CHECK(static_cast<uint8_t>(bytes[7]) == 2);
  Tensor r = read_tensor(ss);
  CHECK(r.shape() == t.shape());
  CHECK(r.dtype() == DType::kF32);
  for (int i = 0; i < 6; ++i) CHECK(r.data()[i] == t.data()[i]);

  Tensor d = rand64({4}, 1);
  std::stringstream s2;
  write_tensor(s2, d);
  Tensor rd = read_tensor(s2);
  CHECK(rd.dtype() == f64);
  for (int i = 0; i < 4; ++i) CHECK(rd.data()[i] == d.data()[i]);

  std::stringstream bad("TNSRX");
  CHECK_THROWS_AS(read_tensor(bad), DataError);
}

TEST_CASE("AdamW first step moves each coordinate by lr against the gradient sign") {
  ParamStore ps;
  Tensor p = ps.add("w", Tensor::from_data({3}, {1.0, -1.0, 0.5}, f64));
  AdamW opt(ps, {0.1, 0.9, 0.999, 1e-12, 0.0});
  sum(mul(p, Tensor::from_data({3}, {2.0, -3.0, 0.25}, f64))).backward();
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(0.9));
  CHECK(p.data()[1] == doctest::Approx(-0.9));
  CHECK(p.data()[2] == doctest::Approx(0.4));
}

TEST_CASE("AdamW minimizes a quadratic") {
  ParamStore ps;
  Tensor p = ps.add("w", Tensor::from_data({2}, {3.0, -2.0}, f64));
  AdamW opt(ps, {0.05, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 600; ++i) {
    opt.zero_grad();
    sum(square(p)).backward();
    opt.step();
  }
  CHECK(std::fabs(p.data()[0]) < 1e-2);
  CHECK(std::fabs(p.data()[1]) < 1e-2);
}

TEST_CASE("no-grad guard records no history") {
  Tensor x = rand64({3}, 1).set_requires_grad();
  NoGradGuard g;
  Tensor y = square(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("every requires_grad leaf receives a gradient") {
  Tensor a = rand64({2}, 1).set_requires_grad();
  Tensor b = rand64({2}, 2).set_requires_grad();
  Tensor c = rand64({2}, 3);
  sum(a * b + c).backward();
  CHECK(a.has_grad());
  CHECK(b.has_grad());
  CHECK_FALSE(c.has_grad());
}

TEST_CASE("bilinear resize keeps constants and linear ramps") {
  Tensor c = Tensor::full({1, 2, 4, 4}, 0.3, f64);
  const Tensor r = resize_bilinear(c, 16, 12);
  for (double v : r.data()) CHECK(v == doctest::Approx(0.3));
  std::vector<double> ramp(8 * 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) ramp[y * 8 + x] = x;
  Tensor up = resize_bilinear(Tensor::from_data({8, 8}, ramp, f64), 8, 16);
  // Interior samples of a 2x upscale land at x/2 - 0.25.
  CHECK(up.data()[5] == doctest::Approx(5 * 0.5 - 0.25));
  CHECK(downsample_area(Tensor::from_data({2, 2}, {1, 2, 3, 6}, f64), 2).item() == doctest::Approx(3.0));
}
