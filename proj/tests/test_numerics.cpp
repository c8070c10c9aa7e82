#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "sa/finite_diff.hpp"
#include "sa/rng.hpp"
#include "sa/tape.hpp"

using namespace sa;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Tensor random_tensor(std::vector<int> shape, Rng&& rng, double lo = -1.0, double hi = 1.0) {
  Rng r = rng;
  return random_tensor(std::move(shape), r, lo, hi);
}

int t2(TapeD& t, int x) { return t.tanh_(t.scale(x, 1.3)); }

}  // namespace

TEST_CASE("bilinear_sample at grid points and identity grid") {
  TapeD tape;
  Rng rng(7);
  Tensor src = random_tensor({2, 4, 5}, rng);
  int s = tape.leaf(src);

  // integer coords (x=3, y=2) -> exact value src[:,2,3]
  Tensor coords({2, 1, 1});
  coords.at(0, 0, 0) = 3.0;
  coords.at(1, 0, 0) = 2.0;
  Tensor mask;
  int out = tape.bilinear_sample(s, tape.leaf(coords), &mask);
  CHECK(tape.val(out).at(0, 0, 0) == doctest::Approx(src.at(0, 2, 3)).epsilon(1e-15));
  CHECK(tape.val(out).at(1, 0, 0) == doctest::Approx(src.at(1, 2, 3)).epsilon(1e-15));
  CHECK(mask.at(0, 0, 0) == 1.0);

  // identity grid -> output equals src, mask all-valid
  Tensor grid({2, 4, 5});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      grid.at(0, i, j) = j;
      grid.at(1, i, j) = i;
    }
  Tensor mask2;
  int out2 = tape.bilinear_sample(s, tape.leaf(grid), &mask2);
  for (size_t i = 0; i < src.data.size(); ++i)
    CHECK(tape.val(out2).data[i] == doctest::Approx(src.data[i]).epsilon(1e-15));
  for (double m : mask2.data) CHECK(m == 1.0);
}

TEST_CASE("bilinear_sample center of 2x2 block") {
  // src = 1x2x2 with values [[0,1],[2,3]], coord (0.5,0.5) -> 1.5
  TapeD tape;
  Tensor src({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  Tensor coords({2, 1, 1}, {0.5, 0.5});
  int out = tape.bilinear_sample(tape.leaf(src), tape.leaf(coords), nullptr);
  CHECK(tape.val(out).at(0, 0, 0) == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("bilinear_sample out-of-bounds gives value 0 and mask 0") {
  TapeD tape;
  Rng rng(3);
  Tensor src = random_tensor({1, 4, 4}, rng, 0.5, 1.0);
  Tensor coords({2, 1, 2}, {-0.5, 3.5, 1.0, 1.0});  // x=-0.5 out, x=3.5 out (W-1=3)
  Tensor mask;
  int out = tape.bilinear_sample(tape.leaf(src), tape.leaf(coords), &mask);
  CHECK(tape.val(out).at(0, 0, 0) == 0.0);
  CHECK(tape.val(out).at(0, 0, 1) == 0.0);
  CHECK(mask.at(0, 0, 0) == 0.0);
  CHECK(mask.at(0, 0, 1) == 0.0);
}

TEST_CASE("avg_pool2d examples") {
  TapeD tape;
  // 2x2 block [1,2;3,4], k=2 -> 2.5
  Tensor x({1, 2, 2}, {1, 2, 3, 4});
  int out = tape.avg_pool2d(tape.leaf(x), 2);
  CHECK(tape.val(out).data[0] == doctest::Approx(2.5).epsilon(1e-15));

  // constant input -> constant output; k=1 identity
  Tensor c = Tensor::full({3, 4, 4}, 0.7);
  int oc = tape.avg_pool2d(tape.leaf(c), 2);
  for (double v : tape.val(oc).data) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  int oid = tape.avg_pool2d(tape.leaf(c), 1);
  CHECK(tape.val(oid).data == c.data);

  Tensor bad({1, 3, 3}, std::vector<double>(9, 0.0));
  int b = tape.leaf(bad);
  CHECK_THROWS(tape.avg_pool2d(b, 2));
}

TEST_CASE("avg_pool followed by nearest upsampling preserves global mean") {
  Rng rng(11);
  Tensor x = random_tensor({2, 8, 8}, rng);
  TapeD tape;
  int xi = tape.leaf(x);
  int up = tape.upsample_nearest2(tape.avg_pool2d(xi, 2));
  double m0 = 0, m1 = 0;
  for (double v : x.data) m0 += v;
  for (double v : tape.val(up).data) m1 += v;
  CHECK(m0 / x.numel() == doctest::Approx(m1 / tape.val(up).numel()).epsilon(1e-12));
}

TEST_CASE("finite_diff_check examples") {
  Rng rng(5);
  Tensor x = random_tensor({3, 2}, rng);

  // f(x)=sum(x^2): analytic gradient 2x, max_rel_err < 1e-7
  auto f = [](const Tensor& v) {
    double s = 0;
    for (double a : v.data) s += a * a;
    return s;
  };
  auto g = [](const Tensor& v) {
    Tensor out = v;
    for (double& a : out.data) a *= 2.0;
    return out;
  };
  CHECK(finite_diff_check(f, g, x, 1e-5) < 1e-7);

  // constant f -> both gradients 0
  auto fc = [](const Tensor&) { return 3.0; };
  auto gc = [](const Tensor& v) { return Tensor(v.shape); };
  CHECK(finite_diff_check(fc, gc, x, 1e-5) == doctest::Approx(0.0));

  CHECK_THROWS(finite_diff_check(f, g, x, 1e-2));
}

TEST_CASE("gradients of every primitive op pass finite differences") {
  Rng rng(42);
  const double tol = 1e-6;

  auto check = [&](const char* name, const Tensor& x,
                   const std::function<int(TapeD&, int)>& build) {
    double err = finite_diff_check_tape(build, x, 1e-5);
    INFO(name);
    CHECK(err < tol);
  };

  Tensor x = random_tensor({2, 4, 4}, rng);
  Tensor y = random_tensor({2, 4, 4}, rng, 0.5, 1.5);

  check("add", x, [&](TapeD& t, int xi) { return t.mean(t.add(xi, t.leaf(y))); });
  check("sub", x, [&](TapeD& t, int xi) { return t.mean(t.sub(t.leaf(y), xi)); });
  check("mul", x, [&](TapeD& t, int xi) { return t.mean(t.mul(xi, t.mul(xi, t.leaf(y)))); });
  check("div", x, [&](TapeD& t, int xi) { return t.mean(t.div(xi, t.leaf(y))); });
  check("div_b", y, [&](TapeD& t, int yi) { return t.mean(t.div(t.leaf(x), yi)); });
  check("scale", x, [&](TapeD& t, int xi) { return t.sum(t.scale(xi, -1.7)); });
  check("add_scalar", x, [&](TapeD& t, int xi) { return t.mean(t.add_scalar(xi, 0.3)); });
  check("relu", y, [&](TapeD& t, int xi) { return t.mean(t.relu(xi)); });
  check("abs", y, [&](TapeD& t, int xi) { return t.mean(t.abs(xi)); });
  check("tanh", x, [&](TapeD& t, int xi) { return t.mean(t.tanh_(xi)); });
  check("sigmoid", x, [&](TapeD& t, int xi) { return t.mean(t.sigmoid(xi)); });
  check("exp", x, [&](TapeD& t, int xi) { return t.mean(t.exp_(xi)); });
  check("mean_channels", x, [&](TapeD& t, int xi) { return t.mean(t.mean_channels(xi)); });
  check("div_scalar_node", x, [&](TapeD& t, int xi) {
    return t.mean(t.div_scalar_node(t.leaf(y), t.add_scalar(t.mean(xi), 2.0)));
  });
  check("avg_pool2d", x, [&](TapeD& t, int xi) { return t.mean(t.avg_pool2d(xi, 2)); });
  Tensor up_w = random_tensor({2, 8, 8}, rng);
  check("upsample_nearest2", x, [&](TapeD& t, int xi) {
    return t.mean(t.mul(t.upsample_nearest2(xi), t.leaf(up_w)));
  });
  check("concat", x, [&](TapeD& t, int xi) {
    int c = t.concat({xi, t.leaf(y), xi});
    return t.mean(t.mul(c, c));
  });
  check("dx", x, [&](TapeD& t, int xi) { return t.mean(t.abs(t.dx(xi))); });
  check("dy", x, [&](TapeD& t, int xi) { return t.mean(t.abs(t.dy(xi))); });
  check("mean3x3", x, [&](TapeD& t, int xi) {
    int m = t.mean3x3(xi);
    return t.mean(t.mul(m, m));
  });
  Tensor sm_x = random_tensor({6, 2, 2}, rng);
  Tensor sm_w = random_tensor({6, 2, 2}, rng);
  check("softmax_groups", sm_x, [&](TapeD& t, int xi) {
    return t.mean(t.mul(t.softmax_groups(xi, 3), t.leaf(sm_w)));
  });

  // matmul / scale_columns
  check("matmul_a", random_tensor({3, 4}, rng), [&](TapeD& t, int xi) {
    return t.mean(t.matmul(xi, t.leaf(random_tensor({4, 2}, Rng(1)))));
  });
  check("matmul_b", random_tensor({4, 2}, rng), [&](TapeD& t, int xi) {
    return t.mean(t.matmul(t.leaf(random_tensor({3, 4}, Rng(2))), xi));
  });
  check("scale_columns_B", random_tensor({4, 3}, rng), [&](TapeD& t, int xi) {
    return t.mean(t.scale_columns(xi, t.leaf(random_tensor({3}, Rng(3)))));
  });
  check("scale_columns_w", random_tensor({3}, rng), [&](TapeD& t, int xi) {
    int m = t.scale_columns(t.leaf(random_tensor({4, 3}, Rng(4))), xi);
    return t.mean(t.mul(m, m));
  });

  // conv2d: wrt input, weight, bias
  Tensor cw = random_tensor({3, 2 * 9}, rng, -0.4, 0.4);
  Tensor cb = random_tensor({3}, rng);
  check("conv2d_x", x, [&](TapeD& t, int xi) {
    int o = t.conv2d(xi, t.leaf(cw), t.leaf(cb), 3, 1, 1);
    return t.mean(t.mul(o, o));
  });
  check("conv2d_w", cw, [&](TapeD& t, int wi) {
    int o = t.conv2d(t.leaf(x), wi, t.leaf(cb), 3, 2, 1);
    return t.mean(t.mul(o, o));
  });
  check("conv2d_b", cb, [&](TapeD& t, int bi) {
    int o = t.conv2d(t.leaf(x), t.leaf(cw), bi, 3, 1, 1);
    return t.mean(t.mul(o, o));
  });

  // bilinear_sample wrt src and coords (coords away from integers)
  Tensor coords({2, 3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      coords.at(0, i, j) = 0.3 + 0.83 * j;
      coords.at(1, i, j) = 0.4 + 0.77 * i;
    }
  check("bilinear_src", x, [&](TapeD& t, int xi) {
    int o = t.bilinear_sample(xi, t.leaf(coords), nullptr);
    return t.mean(t.mul(o, o));
  });
  check("bilinear_coords", coords, [&](TapeD& t, int ci) {
    int o = t.bilinear_sample(t.leaf(x), ci, nullptr);
    return t.mean(t.mul(o, o));
  });

  // correlation volume / pooling / lookup
  Tensor fl = random_tensor({3, 3, 6}, rng);
  Tensor fr = random_tensor({3, 3, 6}, rng);
  check("corr_volume_l", fl, [&](TapeD& t, int li) {
    int v = t.corr_volume(li, t.leaf(fr), 3);
    return t.mean(t.mul(v, v));
  });
  check("corr_volume_r", fr, [&](TapeD& t, int ri) {
    int v = t.corr_volume(t.leaf(fl), ri, 3);
    return t.mean(t.mul(v, v));
  });
  Tensor vol = random_tensor({3, 6, 8}, rng);
  check("pool_disparity2", vol, [&](TapeD& t, int vi) {
    int p = t.pool_disparity2(vi);
    return t.mean(t.mul(p, p));
  });
  Tensor disp = random_tensor({1, 3, 6}, rng, 1.2, 4.3);
  check("corr_lookup_vol", vol, [&](TapeD& t, int vi) {
    int o = t.corr_lookup(vi, t.leaf(disp), 0.5, 2);
    return t.mean(t.mul(o, o));
  });
  check("corr_lookup_disp", disp, [&](TapeD& t, int di) {
    int o = t.corr_lookup(t.leaf(vol), di, 0.5, 2);
    return t.mean(t.mul(o, o));
  });

  // convex upsample wrt d and mask (through softmax so mask is normalized)
  Tensor dlow = random_tensor({1, 3, 4}, rng, 0.5, 2.0);
  Tensor rawmask = random_tensor({9 * 4, 3, 4}, rng);
  check("convex_upsample_d", dlow, [&](TapeD& t, int di) {
    int m = t.softmax_groups(t.leaf(rawmask), 9);
    int o = t.convex_upsample(di, m, 2);
    return t.mean(t.mul(o, o));
  });
  check("convex_upsample_mask", rawmask, [&](TapeD& t, int mi) {
    int o = t.convex_upsample(t.leaf(dlow), t.softmax_groups(mi, 9), 2);
    return t.mean(t.mul(o, o));
  });
}

TEST_CASE("determinism: identical seeds give bit-identical forward and gradients") {
  auto run = [](std::vector<double>& grads) {
    Rng rng(123);
    Tensor x = random_tensor({3, 8, 8}, rng);
    Tensor w = random_tensor({4, 3 * 9}, rng, -0.3, 0.3);
    TapeD tape;
    int xi = tape.leaf(x, true);
    int o = tape.conv2d(xi, tape.leaf(w, true), -1, 3, 1, 1);
    o = tape.tanh_(o);
    int loss = tape.mean(tape.mul(o, o));
    tape.backward(loss);
    grads.assign(tape.grad(xi).data.begin(), tape.grad(xi).data.end());
    return tape.val(loss).data[0];
  };
  std::vector<double> g1, g2;
  double v1 = run(g1), v2 = run(g2);
  CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("two backward passes over the same inputs yield identical gradients") {
  Rng rng(9);
  Tensor x = random_tensor({2, 4, 4}, rng);
  auto run = [&]() {
    TapeD tape;
    int xi = tape.leaf(x, true);
    int loss = tape.mean(tape.mul(t2(tape, xi), t2(tape, xi)));
    tape.backward(loss);
    return tape.grad(xi).data;
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}

TEST_CASE("non-finite values are an error, not a value") {
  TapeD tape;
  Tensor x({2}, {1.0, 0.0});
  int xi = tape.leaf(x);
  CHECK_THROWS(tape.div(tape.leaf(Tensor({2}, {1.0, 1.0})), xi));
}
