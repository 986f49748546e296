// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "protonmt/optimizer.hpp"
#include "protonmt/tensor.hpp"
#include "testutil.hpp"

using namespace protonmt;
using testutil::finite_diff_max_rel_err;
using testutil::random_tensor;

namespace {
template <typename Real>
Tensor<Real> tensor2(std::vector<Real> v, int r, int c) {
  return Tensor<Real>::from(std::move(v), {r, c});
}
}  // namespace

TEST_CASE("tensor shape and data invariants") {
  auto t = Tensor<float>::zeros({2, 3});
  REQUIRE(t.numel() == 6);
  REQUIRE(Tensor<float>::scalar(2.5f).numel() == 1);  // empty shape -> 1
  REQUIRE_THROWS_AS(Tensor<float>::from({1.f, 2.f}, {3}), std::invalid_argument);
  t.set_requires_grad(true);
  REQUIRE(t.grad().size() == t.value().size());
}

TEST_CASE("matmul identity and scalar cases") {
  Rng rng(7);
  auto x = random_tensor<float>({3, 3}, rng);
  auto eye = Tensor<float>::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  auto y = matmul<float>(nullptr, eye, x);
  for (size_t i = 0; i < x.numel(); ++i) REQUIRE(y.value()[i] == x.value()[i]);

  auto a = tensor2<float>({2.0f}, 1, 1);
  auto b = tensor2<float>({3.0f}, 1, 1);
  REQUIRE(matmul<float>(nullptr, a, b).at(0, 0) == 6.0f);
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(11);
  auto a = random_tensor<float>({3, 4}, rng);
  auto b = random_tensor<float>({4, 2}, rng);
  auto c = matmul<float>(nullptr, a, b);
  auto want = testutil::naive_matmul(a.value(), b.value(), 3, 4, 2);
  for (size_t i = 0; i < want.size(); ++i)
    REQUIRE_THAT(c.value()[i], Catch::Matchers::WithinAbs(want[i], 1e-6));
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
  auto a = Tensor<float>::zeros({3, 4});
  auto b = Tensor<float>::zeros({5, 2});
  try {
    matmul<float>(nullptr, a, b);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("3x4") != std::string::npos);
    REQUIRE(msg.find("5x2") != std::string::npos);
  }
}

TEST_CASE("matmul associativity") {
  SECTION("32-bit within 1e-4") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_tensor<float>({4, 5}, rng);
      auto b = random_tensor<float>({5, 3}, rng);
      auto c = random_tensor<float>({3, 6}, rng);
      auto ab_c = matmul<float>(nullptr, matmul<float>(nullptr, a, b), c);
      auto a_bc = matmul<float>(nullptr, a, matmul<float>(nullptr, b, c));
      for (size_t i = 0; i < ab_c.numel(); ++i)
        REQUIRE_THAT(ab_c.value()[i],
                     Catch::Matchers::WithinAbs(a_bc.value()[i], 1e-4));
    }
  }
  SECTION("64-bit within 1e-10") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_tensor<double>({4, 5}, rng);
      auto b = random_tensor<double>({5, 3}, rng);
      auto c = random_tensor<double>({3, 6}, rng);
      auto ab_c = matmul<double>(nullptr, matmul<double>(nullptr, a, b), c);
      auto a_bc = matmul<double>(nullptr, a, matmul<double>(nullptr, b, c));
      for (size_t i = 0; i < ab_c.numel(); ++i)
        REQUIRE_THAT(ab_c.value()[i],
                     Catch::Matchers::WithinAbs(a_bc.value()[i], 1e-10));
    }
  }
}

TEST_CASE("softmax_rows analytic cases") {
  auto x = tensor2<double>({0, 0, 0, 0, std::log(2.0), 0, 5, 5 + std::log(2.0), 5},
                           3, 3);
  auto s = softmax_rows<double>(nullptr, x);
  REQUIRE_THAT(s.at(0, 0), Catch::Matchers::WithinAbs(1.0 / 3, 1e-12));
  REQUIRE_THAT(s.at(0, 2), Catch::Matchers::WithinAbs(1.0 / 3, 1e-12));
  // row [0, ln 2, 0]: probabilities 1/4, 1/2, 1/4
  REQUIRE_THAT(s.at(1, 1), Catch::Matchers::WithinAbs(0.5, 1e-12));
  // shifted copy of the same row
  for (int j = 0; j < 3; ++j)
    REQUIRE_THAT(s.at(2, j), Catch::Matchers::WithinAbs(s.at(1, j), 1e-12));
}

TEST_CASE("softmax_rows two-entry analytic values") {
  auto x = tensor2<double>({0, std::log(2.0)}, 1, 2);
  auto s = softmax_rows<double>(nullptr, x);
  REQUIRE_THAT(s.at(0, 0), Catch::Matchers::WithinAbs(1.0 / 3, 1e-12));
  REQUIRE_THAT(s.at(0, 1), Catch::Matchers::WithinAbs(2.0 / 3, 1e-12));
  auto y = tensor2<double>({5, 5 + std::log(2.0)}, 1, 2);
  auto sy = softmax_rows<double>(nullptr, y);
  REQUIRE_THAT(sy.at(0, 0), Catch::Matchers::WithinAbs(1.0 / 3, 1e-12));
  REQUIRE_THAT(sy.at(0, 1), Catch::Matchers::WithinAbs(2.0 / 3, 1e-12));
}

TEST_CASE("softmax_rows sums to one and is shift invariant") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    int cols = 2 + static_cast<int>(rng.uniform_int(6));
    auto x = random_tensor<float>({3, cols}, rng, -8.0, 8.0);
    auto s = softmax_rows<float>(nullptr, x);
    REQUIRE(all_finite(s));
    auto shifted = x;
    float c = static_cast<float>(rng.uniform(-5.0, 5.0));
    auto x2 = Tensor<float>::zeros({3, cols});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < cols; ++j) x2.at(i, j) = shifted.at(i, j) + c;
    auto s2 = softmax_rows<float>(nullptr, x2);
    for (int i = 0; i < 3; ++i) {
      float sum = 0;
      for (int j = 0; j < cols; ++j) {
        REQUIRE(s.at(i, j) >= 0.0f);
        sum += s.at(i, j);
        REQUIRE_THAT(s2.at(i, j), Catch::Matchers::WithinAbs(s.at(i, j), 1e-6));
      }
      REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
  }
}

TEST_CASE("masked softmax zeroes fully masked rows") {
  auto x = tensor2<float>({1, 2, 3, 4}, 2, 2);
  auto mask = AttentionMask::none(2, 2);
  mask.set(0, 1, true);
  auto s = softmax_rows<float>(nullptr, x, &mask);
  REQUIRE(s.at(0, 0) == 0.0f);
  REQUIRE(s.at(0, 1) == 1.0f);
  REQUIRE(s.at(1, 0) == 0.0f);
  REQUIRE(s.at(1, 1) == 0.0f);
}

TEST_CASE("layer_norm analytic cases") {
  auto gain = Tensor<double>::from({1, 1}, {2});
  auto bias = Tensor<double>::from({0, 0}, {2});
  auto constant = tensor2<double>({3, 3}, 1, 2);
  auto z = layer_norm<double>(nullptr, constant, gain, bias);
  REQUIRE_THAT(z.at(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-9));
  REQUIRE_THAT(z.at(0, 1), Catch::Matchers::WithinAbs(0.0, 1e-9));

  auto pm = tensor2<double>({1, -1}, 1, 2);
  auto z2 = layer_norm<double>(nullptr, pm, gain, bias);
  REQUIRE_THAT(z2.at(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-4));
  REQUIRE_THAT(z2.at(0, 1), Catch::Matchers::WithinAbs(-1.0, 1e-4));
}

TEST_CASE("layer_norm output has zero mean and unit variance") {
  Rng rng(9);
  int d = 16;
  auto gain = Tensor<double>::zeros({d});
  auto bias = Tensor<double>::zeros({d});
  for (int j = 0; j < d; ++j) gain.at(j) = 1.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<double>({4, d}, rng, -3.0, 3.0);
    auto y = layer_norm<double>(nullptr, x, gain, bias);
    for (int i = 0; i < 4; ++i) {
      double mean = 0, var = 0;
      for (int j = 0; j < d; ++j) mean += y.at(i, j);
      mean /= d;
      for (int j = 0; j < d; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
      var /= d;
      REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-4));
      REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));
    }
  }
}

TEST_CASE("backward on sum gives all-ones gradient") {
  auto x = Tensor<double>::zeros({2, 3}).set_requires_grad(true);
  Tape<double> tape;
  auto loss = sum_all(&tape, x);
  tape.backward(loss);
  for (double g : x.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("backward leaves unrelated tensors with zero gradient") {
  Rng rng(2);
  auto x = random_tensor<double>({2, 2}, rng).set_requires_grad(true);
  auto y = random_tensor<double>({2, 2}, rng).set_requires_grad(true);
  Tape<double> tape;
  auto loss = sum_all(&tape, mul(&tape, y, y));
  tape.backward(loss);
  for (double g : x.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("backward errors: non-scalar loss and double consumption") {
  auto x = Tensor<double>::zeros({2, 2}).set_requires_grad(true);
  {
    Tape<double> tape;
    auto y = mul(&tape, x, x);
    REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  {
    Tape<double> tape;
    auto loss = sum_all(&tape, x);
    tape.backward(loss);
    REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);
  }
}

TEST_CASE("two-layer network gradients match central differences") {
  Rng rng(31);
  auto x = random_tensor<double>({3, 5}, rng);
  auto w1 = random_tensor<double>({5, 7}, rng).set_requires_grad(true);
  auto b1 = random_tensor<double>({7}, rng).set_requires_grad(true);
  auto w2 = random_tensor<double>({7, 2}, rng).set_requires_grad(true);
  auto b2 = random_tensor<double>({2}, rng).set_requires_grad(true);
  auto make_loss = [&](Tape<double>* tape) {
    auto h = relu(tape, add_row_bias(tape, matmul(tape, x, w1), b1));
    auto y = add_row_bias(tape, matmul(tape, h, w2), b2);
    return sum_all(tape, mul(tape, y, y));
  };
  double err = finite_diff_max_rel_err(make_loss, {w1, b1, w2, b2});
  REQUIRE(err < 1e-6);
}

TEST_CASE("every differentiable op passes finite-difference checks") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    auto a = random_tensor<double>({3, 4}, rng).set_requires_grad(true);
    auto b = random_tensor<double>({4, 3}, rng).set_requires_grad(true);
    auto sq = random_tensor<double>({3, 4}, rng).set_requires_grad(true);
    auto gain = random_tensor<double>({4}, rng, 0.5, 1.5).set_requires_grad(true);
    auto bias = random_tensor<double>({4}, rng).set_requires_grad(true);

    SECTION("seed " + std::to_string(seed)) {}

    auto check = [&](const std::function<Tensor<double>(Tape<double>*)>& f,
                     std::vector<Tensor<double>> leaves) {
      REQUIRE(finite_diff_max_rel_err(f, std::move(leaves)) < 1e-6);
    };

    check([&](Tape<double>* t) {
      return sum_all(t, mul(t, matmul(t, a, b), matmul(t, a, b)));
    }, {a, b});
    check([&](Tape<double>* t) {
      auto y = matmul_nt(t, a, sq);
      return sum_all(t, mul(t, y, y));
    }, {a, sq});
    check([&](Tape<double>* t) {
      auto y = softmax_rows(t, a);
      return sum_all(t, mul(t, y, matmul(t, softmax_rows(t, a), Tensor<double>::from({1,2,0,1, 0,1,1,2, 2,0,1,1, 1,1,2,0}, {4,4}))));
    }, {a});
    check([&](Tape<double>* t) {
      auto y = layer_norm(t, a, gain, bias);
      return sum_all(t, mul(t, y, y));
    }, {a, gain, bias});
    check([&](Tape<double>* t) {
      auto y = add(t, scale(t, relu(t, a), 1.7), a);
      return sum_all(t, mul(t, y, y));
    }, {a});
    check([&](Tape<double>* t) {
      auto parts = split_cols(t, a, 2);
      auto y = concat_cols(t, {parts[1], parts[0]});
      auto z = concat_rows(t, {y, y});
      return sum_all(t, mul(t, z, z));
    }, {a});
    check([&](Tape<double>* t) {
      return cross_entropy_label_smoothed(t, a, {0, 3, 1}, 0.1);
    }, {a});

    // embedding: gather rows then square
    auto table = random_tensor<double>({5, 3}, rng).set_requires_grad(true);
    check([&](Tape<double>* t) {
      auto e = embedding_rows(t, table, {1, 4, 1, 0});
      return sum_all(t, mul(t, e, e));
    }, {table});

    // block-local attention path: 3 queries, 2 slots per query
    auto q = random_tensor<double>({3, 4}, rng).set_requires_grad(true);
    auto kv = random_tensor<double>({6, 4}, rng).set_requires_grad(true);
    std::vector<uint8_t> enabled{1, 1, 1};
    check([&](Tape<double>* t) {
      auto sc = block_scores(t, q, kv, 2, enabled, 0.5);
      auto pm = softmax_rows(t, sc);
      auto out = block_mix(t, pm, kv);
      return sum_all(t, mul(t, out, out));
    }, {q, kv});

    // dropout with a fixed mask stream
    check([&](Tape<double>* t) {
      Rng drop_rng(12345);
      auto y = dropout(t, a, 0.3, drop_rng);
      return sum_all(t, mul(t, y, y));
    }, {a});

    // fused affine
    check([&](Tape<double>* t) {
      auto y = affine(t, a, b, Tensor<double>::from({0.3, -0.2, 0.7}, {3}));
      return sum_all(t, mul(t, y, y));
    }, {a, b});

    // fused multi-head attention core (2 heads, causal mask)
    auto fq = random_tensor<double>({3, 4}, rng).set_requires_grad(true);
    auto fk = random_tensor<double>({5, 4}, rng).set_requires_grad(true);
    auto fv = random_tensor<double>({5, 4}, rng).set_requires_grad(true);
    check([&](Tape<double>* t) {
      auto y = mha_core(t, fq, fk, fv, 2, nullptr);
      return sum_all(t, mul(t, y, y));
    }, {fq, fk, fv});
    auto mask = AttentionMask::causal(3);
    auto selfq = random_tensor<double>({3, 4}, rng).set_requires_grad(true);
    check([&](Tape<double>* t) {
      auto y = mha_core(t, selfq, selfq, selfq, 2, &mask);
      return sum_all(t, mul(t, y, y));
    }, {selfq});
    check([&](Tape<double>* t) {
      Rng drop_rng(777);
      auto y = mha_core(t, fq, fk, fv, 2, nullptr, 0.25, &drop_rng);
      return sum_all(t, mul(t, y, y));
    }, {fq, fk, fv});

    // fused block-local core (group 2, one disabled row)
    auto pq = random_tensor<double>({3, 4}, rng).set_requires_grad(true);
    auto pk = random_tensor<double>({6, 4}, rng).set_requires_grad(true);
    auto pv = random_tensor<double>({6, 4}, rng).set_requires_grad(true);
    std::vector<uint8_t> present{1, 0, 1};
    check([&](Tape<double>* t) {
      auto y = proto_mha_core(t, pq, pk, pv, 2, 2, present);
      return sum_all(t, mul(t, y, y));
    }, {pq, pk, pv});
  }
}

TEST_CASE("fused attention cores match the primitive-op composition") {
  Rng rng(1234);
  int d = 8, h = 2, tq = 4, tk = 5;
  auto q = testutil::random_tensor<double>({tq, d}, rng);
  auto k = testutil::random_tensor<double>({tk, d}, rng);
  auto v = testutil::random_tensor<double>({tk, d}, rng);
  auto mask = AttentionMask::all(tq, tk);
  mask.set(0, 3, false);
  mask.set(2, 0, false);
  for (int j = 0; j < tk; ++j) mask.set(1, j, false);  // fully masked query

  auto fused = mha_core<double>(nullptr, q, k, v, h, &mask);

  auto qh = split_cols<double>(nullptr, q, h);
  auto kh = split_cols<double>(nullptr, k, h);
  auto vh = split_cols<double>(nullptr, v, h);
  std::vector<Tensor<double>> heads;
  for (int i = 0; i < h; ++i) {
    double inv_sqrt = 1.0 / std::sqrt(d / (double)h);
    auto scores = scale<double>(nullptr, matmul_nt<double>(nullptr, qh[i], kh[i]),
                                inv_sqrt);
    auto probs = softmax_rows<double>(nullptr, scores, &mask);
    heads.push_back(matmul<double>(nullptr, probs, vh[i]));
  }
  auto composed = concat_cols<double>(nullptr, heads);
  for (size_t i = 0; i < fused.numel(); ++i)
    REQUIRE_THAT(fused.value()[i],
                 Catch::Matchers::WithinAbs(composed.value()[i], 1e-12));

  // block-local core against block_scores/softmax/block_mix
  int group = 3, t_len = 3;
  auto bq = testutil::random_tensor<double>({t_len, d}, rng);
  auto bk = testutil::random_tensor<double>({t_len * group, d}, rng);
  auto bv = testutil::random_tensor<double>({t_len * group, d}, rng);
  std::vector<uint8_t> present{1, 0, 1};
  auto bfused = proto_mha_core<double>(nullptr, bq, bk, bv, h, group, present);

  AttentionMask bmask = AttentionMask::none(t_len, group);
  for (int t = 0; t < t_len; ++t)
    if (present[t])
      for (int j = 0; j < group; ++j) bmask.set(t, j, true);
  auto bqh = split_cols<double>(nullptr, bq, h);
  auto bkh = split_cols<double>(nullptr, bk, h);
  auto bvh = split_cols<double>(nullptr, bv, h);
  std::vector<Tensor<double>> bheads;
  for (int i = 0; i < h; ++i) {
    auto sc = block_scores<double>(nullptr, bqh[i], bkh[i], group, present,
                                   1.0 / std::sqrt(d / (double)h));
    auto probs = softmax_rows<double>(nullptr, sc, &bmask);
    bheads.push_back(block_mix<double>(nullptr, probs, bvh[i]));
  }
  auto bcomposed = concat_cols<double>(nullptr, bheads);
  for (size_t i = 0; i < bfused.numel(); ++i)
    REQUIRE_THAT(bfused.value()[i],
                 Catch::Matchers::WithinAbs(bcomposed.value()[i], 1e-12));
}

TEST_CASE("adam leaves parameters unchanged under zero gradient") {
  ParamStore<float> params;
  auto p = params.add("w", Tensor<float>::from({1.0f, -2.0f}, {2}));
  Adam<float> adam;
  adam.step(params);
  REQUIRE(p.value()[0] == 1.0f);
  REQUIRE(p.value()[1] == -2.0f);
}

TEST_CASE("adam first step moves by -lr * sign(g)") {
  AdamConfig cfg;
  cfg.lr = 1e-3;
  ParamStore<float> params;
  auto p = params.add("w", Tensor<float>::from({0.5f, -0.25f, 3.0f}, {3}));
  p.grad() = {0.2f, -0.7f, 1e-4f};
  Adam<float> adam(cfg);
  adam.step(params);
  REQUIRE_THAT(p.value()[0], Catch::Matchers::WithinAbs(0.5 - 1e-3, 1e-6));
  REQUIRE_THAT(p.value()[1], Catch::Matchers::WithinAbs(-0.25 + 1e-3, 1e-6));
  REQUIRE_THAT(p.value()[2], Catch::Matchers::WithinAbs(3.0 - 1e-3, 1e-5));
}

TEST_CASE("adam matches a hand-rolled scalar oracle over two steps") {
  AdamConfig cfg;
  cfg.lr = 0.01;
  ParamStore<double> params;
  auto p = params.add("w", Tensor<double>::from({1.0}, {1}));
  Adam<double> adam(cfg);

  // Scalar oracle.
  double w = 1.0, m = 0.0, v = 0.0;
  auto grad_of = [](double w) { return 2.0 * w + 0.5; };
  for (int t = 1; t <= 2; ++t) {
    double g = grad_of(p.value()[0]);
    p.grad() = {g};
    adam.step(params);

    double go = grad_of(w);
    m = cfg.beta1 * m + (1 - cfg.beta1) * go;
    v = cfg.beta2 * v + (1 - cfg.beta2) * go * go;
    double mhat = m / (1 - std::pow(cfg.beta1, t));
    double vhat = v / (1 - std::pow(cfg.beta2, t));
    w -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    REQUIRE_THAT(p.value()[0], Catch::Matchers::WithinAbs(w, 1e-7));
  }
}

TEST_CASE("adam requires gradients on trainable parameters") {
  ParamStore<double> params;
  auto t = Tensor<double>::from({1.0}, {1});
  params.add("w", t);
  params.get("w").set_requires_grad(false);  // simulate a missing gradient
  Adam<double> adam;
  REQUIRE_THROWS_AS(adam.step(params), std::logic_error);
}

TEST_CASE("learning-rate schedule: linear warmup then inverse sqrt") {
  REQUIRE_THAT(lr_schedule(1.0, 400, 100), Catch::Matchers::WithinAbs(0.25, 1e-12));
  REQUIRE_THAT(lr_schedule(1.0, 400, 400), Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(lr_schedule(1.0, 400, 1600), Catch::Matchers::WithinAbs(0.5, 1e-12));
}
