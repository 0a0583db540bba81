#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bagcn/focus_diffuse.hpp"
#include "oracles.hpp"

#include <numeric>

using namespace bagcn;
using namespace bagcn::testing;

namespace {

FocusDiffuseParams make_params(FocusMode focus, ContextMode context, Index c_mid, Index c_hat,
                               uint64_t seed) {
  Rng rng(seed);
  return make_focus_diffuse_params("fd", focus, context, c_mid, c_hat, rng);
}

Tensor permute_joints(const Tensor& x, const std::vector<Index>& perm) {
  Tensor out(x.shape());
  const Index v = x.extent(0), cols = x.extent(1) * x.extent(2);
  for (Index j = 0; j < v; ++j)
    for (Index k = 0; k < cols; ++k)
      out.array()[perm[static_cast<size_t>(j)] * cols + k] = x.array()[j * cols + k];
  return out;
}

}  // namespace

TEST_CASE("attention scores") {
  SUBCASE("zero scorer gives 0.5 everywhere") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 4, 1);
    p.score_w.value = Tensor({3, 1});
    p.score_b.value = Tensor({1});
    Tape tape;
    Var s = attention_scores(constant(tape, Tensor::full({4, 5, 3}, 0.7)), p);
    for (Index i = 0; i < s.value().numel(); ++i) CHECK(s.value().array()[i] == 0.5);
  }
  SUBCASE("any input lands in [0, 1]") {
    Rng rng(2);
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 4, 2);
    Tape tape;
    Var s = attention_scores(constant(tape, random_tensor({4, 5, 3}, rng, -50.0, 50.0)), p);
    CHECK(s.value().array().minCoeff() >= 0.0);
    CHECK(s.value().array().maxCoeff() <= 1.0);
  }
  SUBCASE("hand case: sigma(2)") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 1, 4, 3);
    p.score_w.value = Tensor::full({1, 1}, 1.0);
    p.score_b.value = Tensor({1});
    Tape tape;
    Var s = attention_scores(constant(tape, Tensor::full({1, 1, 1}, 2.0)), p);
    CHECK(s.value()(Index{0}, Index{0}, Index{0}) ==
          doctest::Approx(0.8807970779778823).epsilon(1e-12));
  }
}

TEST_CASE("focus modes") {
  FocusDiffuseParams p = make_params(FocusMode::avg, ContextMode::bi, 1, 4, 4);
  p.w1.value = Tensor::full({1, 1}, 1.0);
  p.score_w.value = Tensor({1, 1});
  p.score_b.value = Tensor({1});
  Tensor f = Tensor::of({3, 1, 1}, {1, 2, 3});

  SUBCASE("avg with identity embedding is the mean") {
    Tape tape;
    Var scores = attention_scores(constant(tape, f), p);
    Var g = focus(constant(tape, f), scores, p);
    CHECK(g.value()(Index{0}, Index{0}, Index{0}) == 2.0);
  }
  SUBCASE("max picks the per-channel maximum") {
    p.focus = FocusMode::max;
    Tape tape;
    Var scores = attention_scores(constant(tape, f), p);
    Var g = focus(constant(tape, f), scores, p);
    CHECK(g.value()(Index{0}, Index{0}, Index{0}) == 3.0);
  }
  SUBCASE("att with uniform scores equals avg exactly") {
    Rng rng(5);
    FocusDiffuseParams patt = make_params(FocusMode::att, ContextMode::bi, 3, 4, 5);
    patt.score_w.value = Tensor({3, 1});  // zero scorer -> all scores 0.5
    patt.score_b.value = Tensor({1});
    FocusDiffuseParams pavg = patt;
    pavg.focus = FocusMode::avg;

    Tensor x = random_tensor({5, 4, 3}, rng);
    Tape tape;
    Var xin = constant(tape, x);
    Var scores = attention_scores(xin, patt);
    Var g_att = focus(xin, scores, patt);
    Var g_avg = focus(xin, scores, pavg);
    for (Index i = 0; i < g_att.value().numel(); ++i)
      CHECK(g_att.value().array()[i] == g_avg.value().array()[i]);  // bitwise
  }
}

TEST_CASE("focus convexity: attention pooling stays inside the joint hull") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({6, 4, 3}, rng);
    Tensor raw = random_tensor({6, 4, 1}, rng, -3.0, 3.0);
    Tape tape;
    Var pooled = attention_pool(sigmoid(constant(tape, raw)), constant(tape, x));
    for (Index t = 0; t < 4; ++t)
      for (Index c = 0; c < 3; ++c) {
        Scalar lo = x(Index{0}, t, c), hi = lo;
        for (Index v = 1; v < 6; ++v) {
          lo = std::min(lo, x(v, t, c));
          hi = std::max(hi, x(v, t, c));
        }
        const Scalar g = pooled.value()(Index{0}, t, c);
        CHECK(g >= lo - 1e-12);
        CHECK(g <= hi + 1e-12);
      }
  }
}

TEST_CASE("lstm cell") {
  SUBCASE("zero weights and state give the resting gates") {
    Parameter w{"w", Tensor({5, 12})};  // in=2, hidden=3
    Parameter b{"b", Tensor({12})};
    Tape tape;
    LstmState state{constant(tape, Tensor({1, 3})), constant(tape, Tensor({1, 3}))};
    LstmState next = lstm_cell(constant(tape, Tensor({1, 2})), state, tape.watch(w),
                               tape.watch(b), 3);
    for (Index i = 0; i < 3; ++i) {
      CHECK(next.c.value()(Index{0}, i) == 0.0);  // c = f*0 + i*tanh(0) = 0
      CHECK(next.h.value()(Index{0}, i) == 0.0);
    }
  }
  SUBCASE("saturated forget gate carries the memory") {
    Parameter w{"w", Tensor({4, 12})};  // in=1, hidden=3
    Parameter b{"b", Tensor({12})};
    // forget bias -> +40 (f ~ 1), input bias -> -40 (i ~ 0)
    for (Index i = 0; i < 3; ++i) b.value.array()[i] = -40.0;
    for (Index i = 3; i < 6; ++i) b.value.array()[i] = 40.0;
    Tape tape;
    Tensor c0({1, 3});
    c0(0, 0) = 0.3;
    c0(0, 1) = -0.8;
    c0(0, 2) = 0.55;
    LstmState state{constant(tape, Tensor({1, 3})), constant(tape, c0)};
    LstmState next = lstm_cell(constant(tape, Tensor::full({1, 1}, 0.4)), state, tape.watch(w),
                               tape.watch(b), 3);
    for (Index i = 0; i < 3; ++i)
      CHECK(next.c.value()(Index{0}, i) == doctest::Approx(c0(Index{0}, i)).epsilon(1e-3));
  }
  SUBCASE("gradient through five unrolled steps matches finite differences") {
    Rng rng(8);
    Parameter w{"w", random_tensor({6, 12}, rng)};  // in=3, hidden=3
    Parameter b{"b", random_tensor({12}, rng)};
    Tensor seq = random_tensor({2, 5, 3}, rng);
    Tensor lw = random_tensor({2, 5, 3}, rng);
    auto build = [&](Tape& tape) {
      Var s = constant(tape, seq);
      LstmState state{constant(tape, Tensor({2, 3})), constant(tape, Tensor({2, 3}))};
      std::vector<Var> hs;
      for (Index t = 0; t < 5; ++t) {
        state = lstm_cell(slice_time(s, t), state, tape.watch(w), tape.watch(b), 3);
        hs.push_back(state.h);
        // hidden states stay tanh-bounded
        CHECK(state.h.value().array().abs().maxCoeff() < 1.0);
      }
      return sum(mul(stack_time(hs), constant(tape, lw)));
    };
    auto loss_fn = [&]() {
      Tape tape;
      return build(tape).value()(Index{0});
    };
    const Scalar worst = fd_check_all(
        loss_fn,
        [&]() {
          Tape tape;
          tape.backward(build(tape));
        },
        {&w, &b});
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("context-aware module") {
  SUBCASE("T=1 bidirectional output has the full context width") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 6, 9);
    Tape tape;
    Var out = cam_forward(constant(tape, Tensor::full({1, 1, 3}, 0.5)), p);
    CHECK(out.shape() == Shape{1, 1, 6});
  }
  SUBCASE("all-zero weights give zero context") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 4, 10);
    p.w2.value = Tensor({3, 3});
    for (auto& layer : p.cam) {
      layer.forward.w.value = Tensor(layer.forward.w.value.shape());
      layer.forward.b.value = Tensor(layer.forward.b.value.shape());
      layer.backward.w.value = Tensor(layer.backward.w.value.shape());
      layer.backward.b.value = Tensor(layer.backward.b.value.shape());
    }
    Rng rng(10);
    Tape tape;
    Var out = cam_forward(constant(tape, random_tensor({1, 7, 3}, rng)), p);
    CHECK(out.value().array().abs().maxCoeff() == 0.0);
  }
  SUBCASE("uni mode keeps the context width") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::uni, 3, 6, 11);
    Rng rng(11);
    Tape tape;
    Var out = cam_forward(constant(tape, random_tensor({2, 1, 5, 3}, rng)), p);
    CHECK(out.shape() == Shape{2, 1, 5, 6});
  }
  SUBCASE("time reversal swaps the direction halves") {
    // Construct direction-symmetric weights: layer 1 shares fwd/bwd weights;
    // layer 2's backward cell swaps the two input-half row blocks.
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 4, 12);
    p.w2.value = Tensor::of({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    p.cam[0].backward.w.value = p.cam[0].forward.w.value;
    p.cam[0].backward.b.value = p.cam[0].forward.b.value;
    Tensor w2f = p.cam[1].forward.w.value;  // [(4 + 2), 8]
    Tensor w2b = w2f;
    for (Index col = 0; col < 8; ++col) {
      std::swap(w2b.array()[0 * 8 + col], w2b.array()[2 * 8 + col]);
      std::swap(w2b.array()[1 * 8 + col], w2b.array()[3 * 8 + col]);
    }
    p.cam[1].backward.w.value = w2b;
    p.cam[1].backward.b.value = p.cam[1].forward.b.value;

    Rng rng(12);
    const Index frames = 6;
    Tensor x = random_tensor({1, frames, 3}, rng);
    Tensor xrev({1, frames, 3});
    for (Index t = 0; t < frames; ++t)
      for (Index c = 0; c < 3; ++c) xrev(Index{0}, t, c) = x(Index{0}, frames - 1 - t, c);

    Tape tape;
    Var base = cam_forward(constant(tape, x), p);
    Var reversed = cam_forward(constant(tape, xrev), p);
    for (Index t = 0; t < frames; ++t)
      for (Index c = 0; c < 4; ++c) {
        const Scalar got = reversed.value()(Index{0}, t, c);
        // reversed time, halves swapped: [bwd, fwd] -> [fwd, bwd]
        const Scalar want = base.value()(Index{0}, frames - 1 - t, (c + 2) % 4);
        CHECK(std::abs(got - want) <= 1e-12);
      }
  }
}

TEST_CASE("diffusion") {
  SUBCASE("zero gates absorb nothing") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::none, 2, 3, 13);
    Rng rng(13);
    Tensor f = random_tensor({3, 4, 2}, rng);
    Tensor ctx = random_tensor({1, 4, 3}, rng);
    Tape tape;
    Var zero_scores = constant(tape, Tensor({3, 4, 1}));
    Var out = diffuse(constant(tape, f), constant(tape, ctx), zero_scores, p);
    // expected: [f_in, 0] W3 = f_in . W3[0:2, :]
    Tensor w_top({2, 2}, ArrayX(p.w3.value.array().head(4)));
    Tape t2;
    Var expected = matmul(constant(t2, f), constant(t2, w_top));
    for (Index i = 0; i < out.value().numel(); ++i)
      CHECK(out.value().array()[i] ==
            doctest::Approx(expected.value().array()[i]).epsilon(1e-14));
  }
  SUBCASE("unit gate on one joint with a projection that keeps f_in") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::none, 2, 3, 14);
    // W3 = [I; 0]: context channels dropped entirely
    p.w3.value = Tensor({5, 2});
    p.w3.value(0, 0) = 1.0;
    p.w3.value(1, 1) = 1.0;
    Rng rng(14);
    Tensor f = random_tensor({3, 4, 2}, rng);
    Tensor ctx = random_tensor({1, 4, 3}, rng);
    Tensor gates({3, 4, 1});
    for (Index t = 0; t < 4; ++t) gates(Index{1}, t, Index{0}) = 1.0;
    Tape tape;
    Var out = diffuse(constant(tape, f), constant(tape, ctx), constant(tape, gates), p);
    for (Index v = 0; v < 3; ++v)
      for (Index t = 0; t < 4; ++t)
        for (Index c = 0; c < 2; ++c) CHECK(out.value()(v, t, c) == f(v, t, c));
  }
  SUBCASE("random tiny case equals the brute-force loop") {
    Rng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
      FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 2, 4, 15 + trial);
      Tensor f = random_tensor({3, 2, 2}, rng);
      Tensor ctx = random_tensor({1, 2, 4}, rng);
      Tensor scores = random_tensor({3, 2, 1}, rng, 0.05, 0.95);
      Tape tape;
      Var out =
          diffuse(constant(tape, f), constant(tape, ctx), constant(tape, scores), p);
      Tensor expected = brute_force_diffuse(f, scores, ctx, p.w3.value);
      CHECK((out.value().array() - expected.array()).abs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("width mismatch rejected") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::none, 2, 3, 16);
    Tape tape;
    CHECK_THROWS_AS(diffuse(constant(tape, Tensor({3, 4, 2})),
                            constant(tape, Tensor({1, 4, 5})),  // context too wide for w3
                            constant(tape, Tensor({3, 4, 1})), p),
                    std::invalid_argument);
  }
}

TEST_CASE("gate monotonicity: a larger raw score absorbs more context") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor raw = random_tensor({4, 3, 1}, rng, -2.0, 2.0);
    Tensor ctx = random_tensor({1, 3, 5}, rng, 0.2, 1.0);  // nonzero per frame
    std::uniform_int_distribution<Index> pick_v(0, 3), pick_t(0, 2);
    const Index v = pick_v(rng), t = pick_t(rng);

    auto gated_norm = [&](const Tensor& raw_scores) {
      Tape tape;
      Var fg = gate_broadcast(sigmoid(constant(tape, raw_scores)), constant(tape, ctx));
      Scalar norm = 0.0;
      for (Index c = 0; c < 5; ++c) norm += fg.value()(v, t, c) * fg.value()(v, t, c);
      return norm;
    };
    Tensor bumped = raw;
    bumped(v, t, Index{0}) += 0.5;
    CHECK(gated_norm(bumped) > gated_norm(raw));
  }
}

TEST_CASE("fd_forward") {
  SUBCASE("off mode is a strict identity") {
    FocusDiffuseParams p = make_params(FocusMode::off, ContextMode::bi, 3, 4, 18);
    Rng rng(18);
    Tape tape;
    Var x = constant(tape, random_tensor({4, 5, 3}, rng));
    Var out = fd_forward(x, p);
    CHECK(out.id == x.id);  // the very same tape node
  }
  SUBCASE("shape closure at paper scale for every mode") {
    Rng rng(19);
    Tensor x = random_tensor({25, 300, 32}, rng);
    for (FocusMode focus : {FocusMode::max, FocusMode::avg, FocusMode::att}) {
      for (ContextMode context : {ContextMode::none, ContextMode::uni, ContextMode::bi}) {
        FocusDiffuseParams p = make_params(focus, context, 32, 128, 19);
        Tape tape;
        Var out = fd_forward(constant(tape, x), p);
        CHECK(out.shape() == Shape{25, 300, 32});
      }
    }
  }
  SUBCASE("gradient matches finite differences") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 4, 20);
    Rng rng(20);
    Tensor x = random_tensor({4, 5, 3}, rng);
    Tensor lw = random_tensor({4, 5, 3}, rng);
    std::vector<Parameter*> params;
    p.collect(params);
    auto build = [&](Tape& tape) {
      return sum(mul(fd_forward(constant(tape, x), p), constant(tape, lw)));
    };
    auto loss_fn = [&]() {
      Tape tape;
      return build(tape).value()(Index{0});
    };
    const Scalar worst = fd_check_all(
        loss_fn,
        [&]() {
          Tape tape;
          tape.backward(build(tape));
        },
        params);
    CHECK(worst < 1e-4);
  }
  SUBCASE("wo/Ca diffuses the per-frame latent node") {
    FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::none, 3, 6, 21);
    CHECK(p.cam.empty());
    Rng rng(21);
    Tape tape;
    Var out = fd_forward(constant(tape, random_tensor({4, 5, 3}, rng)), p);
    CHECK(out.shape() == Shape{4, 5, 3});
  }
  SUBCASE("joint permutation equivariance") {
    Rng rng(22);
    for (int trial = 0; trial < 20; ++trial) {
      FocusDiffuseParams p = make_params(FocusMode::att, ContextMode::bi, 3, 4, 22 + trial);
      Tensor x = random_tensor({5, 4, 3}, rng);
      std::vector<Index> perm = {0, 1, 2, 3, 4};
      std::shuffle(perm.begin(), perm.end(), rng);

      Tape tape;
      Var base = fd_forward(constant(tape, x), p);
      Var permuted = fd_forward(constant(tape, permute_joints(x, perm)), p);
      Tensor expected = permute_joints(base.value(), perm);
      CHECK((permuted.value().array() - expected.array()).abs().maxCoeff() <= 1e-12);
    }
  }
}
