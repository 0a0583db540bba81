#include "bagcn/focus_diffuse.hpp"

namespace bagcn {

FocusMode parse_focus_mode(const std::string& s) {
  if (s == "off") return FocusMode::off;
  if (s == "max") return FocusMode::max;
  if (s == "avg") return FocusMode::avg;
  if (s == "att") return FocusMode::att;
  fail("unknown focus mode '" + s + "' (expected off|max|avg|att)");
}

ContextMode parse_context_mode(const std::string& s) {
  if (s == "none") return ContextMode::none;
  if (s == "uni") return ContextMode::uni;
  if (s == "bi") return ContextMode::bi;
  fail("unknown context mode '" + s + "' (expected none|uni|bi)");
}

const char* to_string(FocusMode m) {
  switch (m) {
    case FocusMode::off: return "off";
    case FocusMode::max: return "max";
    case FocusMode::avg: return "avg";
    case FocusMode::att: return "att";
  }
  return "?";
}

const char* to_string(ContextMode m) {
  switch (m) {
    case ContextMode::none: return "none";
    case ContextMode::uni: return "uni";
    case ContextMode::bi: return "bi";
  }
  return "?";
}

namespace {

LstmCellParams make_cell(const std::string& prefix, Index input, Index hidden, Rng& rng) {
  LstmCellParams cell;
  cell.hidden = hidden;
  const Scalar bound = 1.0 / std::sqrt(Scalar(hidden));
  cell.w = Parameter{prefix + ".w", uniform_init({input + hidden, 4 * hidden}, bound, rng)};
  Tensor bias({4 * hidden});
  for (Index i = hidden; i < 2 * hidden; ++i) bias.array()[i] = 1.0;  // forget gate open
  cell.b = Parameter{prefix + ".b", std::move(bias), /*decay=*/false};
  return cell;
}

}  // namespace

FocusDiffuseParams make_focus_diffuse_params(const std::string& prefix, FocusMode focus,
                                             ContextMode context, Index c_mid, Index c_hat,
                                             Rng& rng) {
  FocusDiffuseParams p;
  p.focus = focus;
  p.context = context;
  p.c_mid = c_mid;
  p.c_hat = c_hat;
  if (focus == FocusMode::off) return p;

  require(c_hat >= 1, "focus-diffuse: c_hat must be positive");
  // The scorer reads post-ReLU features, so a non-negative start ranks
  // joints by feature energy instead of by an arbitrary sign draw.
  Tensor score_init = kaiming_init({c_mid, 1}, c_mid, rng);
  score_init.array() = score_init.array().abs();
  p.score_w = Parameter{prefix + ".score_w", std::move(score_init)};
  p.score_b = Parameter{prefix + ".score_b", Tensor({1}), /*decay=*/false};
  p.w1 = Parameter{prefix + ".w1", kaiming_init({c_mid, c_mid}, c_mid, rng)};
  p.w2 = Parameter{prefix + ".w2", kaiming_init({c_mid, c_mid}, c_mid, rng)};
  p.w3 = Parameter{prefix + ".w3", kaiming_init({c_mid + c_hat, c_mid}, c_mid + c_hat, rng)};

  if (context != ContextMode::none) {
    // bi mode splits the context width across the two directions; uni keeps
    // the full width so downstream shapes match across ablations.
    const bool bi = context == ContextMode::bi;
    Index hidden = c_hat;
    if (bi) {
      require(c_hat % 2 == 0, "focus-diffuse: bi context needs an even c_hat");
      hidden = c_hat / 2;
    }
    Index input = c_mid;
    for (int layer = 0; layer < 2; ++layer) {
      const std::string lp = prefix + ".cam.l" + std::to_string(layer);
      LstmLayerParams lparams;
      lparams.forward = make_cell(lp + ".fwd", input, hidden, rng);
      if (bi) lparams.backward = make_cell(lp + ".bwd", input, hidden, rng);
      p.cam.push_back(std::move(lparams));
      input = c_hat;
    }
  }
  return p;
}

void FocusDiffuseParams::collect(std::vector<Parameter*>& out) {
  if (focus == FocusMode::off) return;
  out.push_back(&score_w);
  out.push_back(&score_b);
  out.push_back(&w1);
  out.push_back(&w2);
  out.push_back(&w3);
  for (auto& layer : cam) {
    out.push_back(&layer.forward.w);
    out.push_back(&layer.forward.b);
    if (context == ContextMode::bi) {
      out.push_back(&layer.backward.w);
      out.push_back(&layer.backward.b);
    }
  }
}

Var attention_scores(const Var& f_in, FocusDiffuseParams& p) {
  Tape& tape = *f_in.tape;
  Var raw = add_bias(matmul(f_in, tape.watch(p.score_w)), tape.watch(p.score_b));
  return sigmoid(raw);
}

Var focus(const Var& f_in, const Var& scores, FocusDiffuseParams& p) {
  Tape& tape = *f_in.tape;
  Var pooled;
  switch (p.focus) {
    case FocusMode::att: pooled = attention_pool(scores, f_in); break;
    case FocusMode::avg: pooled = mean_joints(f_in); break;
    case FocusMode::max: pooled = max_joints(f_in); break;
    case FocusMode::off: fail("focus: mode off must be bypassed by the caller");
  }
  return matmul(pooled, tape.watch(p.w1));
}

LstmState lstm_cell(const Var& x_t, const LstmState& prev, const Var& w, const Var& b,
                    Index hidden) {
  Var z = add_bias(matmul(concat_channels(x_t, prev.h), w), b);
  Var i = sigmoid(slice_channels(z, 0, hidden));
  Var f = sigmoid(slice_channels(z, hidden, hidden));
  Var o = sigmoid(slice_channels(z, 2 * hidden, hidden));
  Var g = tanh(slice_channels(z, 3 * hidden, hidden));
  Var c = add(mul(f, prev.c), mul(i, g));
  Var h = mul(o, tanh(c));
  return {h, c};
}

namespace {

// Unroll one direction over the sequence [N, T, D]; returns [N, T, H].
Var run_direction(const Var& seq, LstmCellParams& cell, bool reverse) {
  Tape& tape = *seq.tape;
  const Index n = seq.value().extent(0);
  const Index frames = seq.value().extent(1);
  Var w = tape.watch(cell.w);
  Var b = tape.watch(cell.b);
  LstmState state{constant(tape, Tensor({n, cell.hidden})),
                  constant(tape, Tensor({n, cell.hidden}))};
  std::vector<Var> hidden(static_cast<size_t>(frames));
  for (Index step = 0; step < frames; ++step) {
    const Index t = reverse ? frames - 1 - step : step;
    state = lstm_cell(slice_time(seq, t), state, w, b, cell.hidden);
    hidden[static_cast<size_t>(t)] = state.h;
  }
  return stack_time(hidden);
}

}  // namespace

Var cam_forward(const Var& latent, FocusDiffuseParams& p) {
  Tape& tape = *latent.tape;
  require(p.context != ContextMode::none, "cam_forward: context module disabled");
  const Tensor& lv = latent.value();
  const bool batched = lv.rank() == 4;
  const Index n = batched ? lv.extent(0) : 1;
  const Index frames = lv.extent(-2);
  const Index c = lv.extent(-1);
  require(lv.extent(batched ? 1 : 0) == 1, "cam_forward: latent joint axis must be singleton");
  require(frames >= 1, "cam_forward: empty sequence");

  Var seq = reshape(matmul(latent, tape.watch(p.w2)), {n, frames, c});
  for (auto& layer : p.cam) {
    Var fwd = run_direction(seq, layer.forward, /*reverse=*/false);
    if (p.context == ContextMode::bi) {
      Var bwd = run_direction(seq, layer.backward, /*reverse=*/true);
      seq = concat_channels(bwd, fwd);  // [reverse-direction, forward-direction]
    } else {
      seq = fwd;
    }
  }
  Shape out_shape = batched ? Shape{n, 1, frames, p.c_hat} : Shape{1, frames, p.c_hat};
  return reshape(seq, std::move(out_shape));
}

Var diffuse(const Var& f_in, const Var& context, const Var& scores, FocusDiffuseParams& p) {
  Tape& tape = *f_in.tape;
  Var absorbed = gate_broadcast(scores, context);
  return matmul(concat_channels(f_in, absorbed), tape.watch(p.w3));
}

Var fd_forward(const Var& x, FocusDiffuseParams& p, AttentionRecorder* recorder,
               int block_index) {
  if (p.focus == FocusMode::off) return x;
  Tape& tape = *x.tape;
  Var scores = attention_scores(x, p);
  if (recorder != nullptr) recorder->records.emplace_back(block_index, scores.value());
  Var latent = focus(x, scores, p);
  Var context;
  if (p.context == ContextMode::none) {
    // No temporal mixing: each frame diffuses its own projected latent node,
    // zero-padded so w3 keeps the same shape across ablations.
    context = pad_channels(matmul(latent, tape.watch(p.w2)), p.c_hat);
  } else {
    context = cam_forward(latent, p);
  }
  return diffuse(x, context, scores, p);
}

}  // namespace bagcn
