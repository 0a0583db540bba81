#include "bagcn/gradcheck.hpp"

#include "bagcn/block.hpp"
#include "bagcn/ops.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

namespace bagcn {

GradCheckReport check_gradients(const GradCheckCase& c, Scalar h, Scalar tolerance,
                                Index min_probes, Rng& rng) {
  for (Parameter* p : c.params) p->value.zero_grad();
  {
    Tape tape;
    Var loss = c.loss(tape);
    tape.backward(loss);
  }
  std::vector<ArrayX> taped;
  taped.reserve(c.params.size());
  for (Parameter* p : c.params) taped.push_back(p->value.grad());

  std::vector<std::pair<size_t, Index>> entries;
  for (size_t pi = 0; pi < c.params.size(); ++pi)
    for (Index i = 0; i < c.params[pi]->numel(); ++i) entries.emplace_back(pi, i);
  std::shuffle(entries.begin(), entries.end(), rng);
  const size_t probe_count = std::min<size_t>(entries.size(), static_cast<size_t>(min_probes));

  auto eval_loss = [&]() {
    Tape tape;
    return c.loss(tape).value()(Index{0});
  };

  GradCheckReport report;
  report.name = c.name;
  report.probes = static_cast<Index>(probe_count);
  for (size_t e = 0; e < probe_count; ++e) {
    auto [pi, i] = entries[e];
    Scalar& theta = c.params[pi]->value.array()[i];
    const Scalar saved = theta;
    theta = saved + h;
    const Scalar up = eval_loss();
    theta = saved - h;
    const Scalar down = eval_loss();
    theta = saved;

    const Scalar fd = (up - down) / (2.0 * h);
    const Scalar an = taped[pi][i];
    const Scalar rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = c.params[pi]->name + "[" + std::to_string(i) + "]";
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

namespace {

// Everything a battery case needs to stay alive through the checks.
struct CaseState {
  std::vector<Parameter> params;
  std::vector<Tensor> consts;
  PartitionedAdjacency adjacency;
  FocusDiffuseParams fd;
  BlockParams block;
  BatchNormState bn_state;
};

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<Scalar> dist(-1.0, 1.0);
  for (Index i = 0; i < t.numel(); ++i) t.array()[i] = dist(rng);
  return t;
}

// loss = sum(out ⊗ fixed random weights); asymmetric so symmetric backward
// bugs cannot cancel.
Var weighted_loss(Tape& tape, const Var& out, const Tensor& weights) {
  return sum(mul(out, constant(tape, weights)));
}

SkeletonTopology chain4() {
  SkeletonTopology topo{"chain4", 4, {{0, 1}, {1, 2}, {2, 3}}, 0};
  return topo;
}

GradCheckCase make_graph_conv_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->adjacency = build_directed_graphs(chain4());
  st->consts.push_back(random_tensor({4, 6, 3}, rng));  // x
  GraphConvParams gc = {{Parameter{"gc.w0", random_tensor({3, 5}, rng)},
                         Parameter{"gc.w1", random_tensor({3, 5}, rng)},
                         Parameter{"gc.w2", random_tensor({3, 5}, rng)}},
                        {Parameter{"gc.m0", random_tensor({4, 4}, rng)},
                         Parameter{"gc.m1", random_tensor({4, 4}, rng)},
                         Parameter{"gc.m2", random_tensor({4, 4}, rng)}}};
  auto gcp = std::make_shared<GraphConvParams>(std::move(gc));
  st->consts.push_back(random_tensor({4, 6, 5}, rng));  // loss weights

  GradCheckCase c;
  c.name = "graph_conv_mask";
  for (size_t s = 0; s < 3; ++s) {
    c.params.push_back(&gcp->w[s]);
    c.params.push_back(&gcp->m[s]);
  }
  struct Storage {
    std::shared_ptr<CaseState> st;
    std::shared_ptr<GraphConvParams> gcp;
  };
  auto storage = std::make_shared<Storage>(Storage{st, gcp});
  c.storage = storage;
  c.loss = [storage](Tape& tape) {
    Var x = constant(tape, storage->st->consts[0]);
    Var out = spatial_graph_conv(x, storage->st->adjacency.focus_norm, *storage->gcp);
    return weighted_loss(tape, out, storage->st->consts[1]);
  };
  return c;
}

GradCheckCase make_temporal_conv_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->consts.push_back(random_tensor({4, 6, 3}, rng));
  st->params.push_back(Parameter{"tcn.w", random_tensor({4, 3, 3}, rng)});
  st->consts.push_back(random_tensor({4, 3, 4}, rng));  // T_out = 3 at stride 2

  GradCheckCase c;
  c.name = "temporal_conv";
  c.params.push_back(&st->params[0]);
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var x = constant(tape, st->consts[0]);
    Var out = conv_temporal(x, tape.watch(st->params[0]), 2);
    return weighted_loss(tape, out, st->consts[1]);
  };
  return c;
}

GradCheckCase make_batch_norm_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->consts.push_back(random_tensor({2, 4, 6, 3}, rng));
  st->params.push_back(Parameter{"bn.gamma", random_tensor({3}, rng)});
  st->params.push_back(Parameter{"bn.beta", random_tensor({3}, rng)});
  st->bn_state.reset(3);
  st->consts.push_back(random_tensor({2, 4, 6, 3}, rng));

  GradCheckCase c;
  c.name = "batch_norm";
  c.params.push_back(&st->params[0]);
  c.params.push_back(&st->params[1]);
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var x = constant(tape, st->consts[0]);
    Var out = batch_norm(x, tape.watch(st->params[0]), tape.watch(st->params[1]), st->bn_state,
                         Mode::train);
    return weighted_loss(tape, out, st->consts[1]);
  };
  return c;
}

GradCheckCase make_focus_case(uint64_t seed, FocusMode mode) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->fd = make_focus_diffuse_params("fd", mode, ContextMode::bi, 3, 4, rng);
  st->consts.push_back(random_tensor({4, 6, 3}, rng));
  st->consts.push_back(random_tensor({4, 6, 3}, rng));

  GradCheckCase c;
  c.name = std::string("focusing_") + to_string(mode);
  st->fd.collect(c.params);
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var x = constant(tape, st->consts[0]);
    Var out = fd_forward(x, st->fd);
    return weighted_loss(tape, out, st->consts[1]);
  };
  return c;
}

GradCheckCase make_lstm_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  const Index hidden = 4;
  st->consts.push_back(random_tensor({2, 5, 3}, rng));  // [N, T, C] inputs
  st->params.push_back(Parameter{"lstm.w", random_tensor({3 + hidden, 4 * hidden}, rng)});
  st->params.push_back(Parameter{"lstm.b", random_tensor({4 * hidden}, rng)});
  st->consts.push_back(random_tensor({2, 5, hidden}, rng));

  GradCheckCase c;
  c.name = "lstm_cell";
  c.params.push_back(&st->params[0]);
  c.params.push_back(&st->params[1]);
  c.storage = st;
  c.loss = [st, hidden](Tape& tape) {
    Var seq = constant(tape, st->consts[0]);
    Var w = tape.watch(st->params[0]);
    Var b = tape.watch(st->params[1]);
    LstmState state{constant(tape, Tensor({2, hidden})), constant(tape, Tensor({2, hidden}))};
    std::vector<Var> hs;
    for (Index t = 0; t < 5; ++t) {
      state = lstm_cell(slice_time(seq, t), state, w, b, hidden);
      hs.push_back(state.h);
    }
    return weighted_loss(tape, stack_time(hs), st->consts[1]);
  };
  return c;
}

GradCheckCase make_bi_cam_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->fd = make_focus_diffuse_params("fd", FocusMode::att, ContextMode::bi, 3, 4, rng);
  st->consts.push_back(random_tensor({2, 1, 6, 3}, rng));  // latent sequence
  st->consts.push_back(random_tensor({2, 1, 6, 4}, rng));

  GradCheckCase c;
  c.name = "bi_cam";
  c.params.push_back(&st->fd.w2);
  for (auto& layer : st->fd.cam) {
    c.params.push_back(&layer.forward.w);
    c.params.push_back(&layer.forward.b);
    c.params.push_back(&layer.backward.w);
    c.params.push_back(&layer.backward.b);
  }
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var latent = constant(tape, st->consts[0]);
    Var out = cam_forward(latent, st->fd);
    return weighted_loss(tape, out, st->consts[1]);
  };
  return c;
}

GradCheckCase make_diffusion_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->fd = make_focus_diffuse_params("fd", FocusMode::att, ContextMode::bi, 3, 4, rng);
  st->consts.push_back(random_tensor({4, 6, 3}, rng));  // f_in
  st->consts.push_back(random_tensor({1, 6, 4}, rng));  // context
  st->consts.push_back(random_tensor({4, 6, 3}, rng));

  GradCheckCase c;
  c.name = "diffusion";
  c.params.push_back(&st->fd.score_w);
  c.params.push_back(&st->fd.score_b);
  c.params.push_back(&st->fd.w3);
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var x = constant(tape, st->consts[0]);
    Var scores = attention_scores(x, st->fd);
    Var out = diffuse(x, constant(tape, st->consts[1]), scores, st->fd);
    return weighted_loss(tape, out, st->consts[2]);
  };
  return c;
}

GradCheckCase make_classifier_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->consts.push_back(random_tensor({4, 6}, rng));  // pooled features
  st->params.push_back(Parameter{"clf.w", random_tensor({6, 5}, rng)});
  st->params.push_back(Parameter{"clf.b", random_tensor({5}, rng)});

  GradCheckCase c;
  c.name = "classifier";
  c.params.push_back(&st->params[0]);
  c.params.push_back(&st->params[1]);
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var features = constant(tape, st->consts[0]);
    Var logits = add_bias(matmul(features, tape.watch(st->params[0])),
                          tape.watch(st->params[1]));
    return softmax_cross_entropy(logits, {0, 2, 4, 1});
  };
  return c;
}

GradCheckCase make_block_case(uint64_t seed) {
  auto st = std::make_shared<CaseState>();
  Rng rng(seed);
  st->adjacency = build_directed_graphs(chain4());
  BlockConfig cfg = make_block_config(4, 8, 2, 3, ResidualKind::conv, FocusMode::att,
                                      ContextMode::bi);
  st->block = make_block_params("block", cfg, 4, 4, rng);
  st->consts.push_back(random_tensor({2, 4, 6, 4}, rng));
  st->consts.push_back(random_tensor({2, 4, 3, 8}, rng));  // T 6 -> 3 at stride 2

  GradCheckCase c;
  c.name = "block_full";
  st->block.collect(c.params);
  c.storage = st;
  c.loss = [st](Tape& tape) {
    Var x = constant(tape, st->consts[0]);
    Var out = block_forward(x, st->block, st->adjacency, Mode::train);
    return weighted_loss(tape, out, st->consts[1]);
  };
  return c;
}

}  // namespace

std::vector<GradCheckCase> standard_gradcheck_cases(uint64_t seed) {
  std::vector<GradCheckCase> cases;
  cases.push_back(make_graph_conv_case(seed + 1));
  cases.push_back(make_temporal_conv_case(seed + 2));
  cases.push_back(make_batch_norm_case(seed + 3));
  cases.push_back(make_focus_case(seed + 4, FocusMode::att));
  cases.push_back(make_focus_case(seed + 5, FocusMode::avg));
  cases.push_back(make_focus_case(seed + 6, FocusMode::max));
  cases.push_back(make_lstm_case(seed + 7));
  cases.push_back(make_bi_cam_case(seed + 8));
  cases.push_back(make_diffusion_case(seed + 9));
  cases.push_back(make_classifier_case(seed + 10));
  cases.push_back(make_block_case(seed + 11));
  return cases;
}

int run_gradcheck(std::ostream& out, uint64_t seed, Scalar tolerance, Scalar h,
                  Index min_probes) {
  std::vector<GradCheckCase> cases = standard_gradcheck_cases(seed);
  Rng rng(seed ^ 0xABCDEF12345ULL);

  bool all_pass = true;
  size_t worst = 0;
  Scalar worst_err = -1.0;
  out << std::left << std::setw(18) << "layer" << std::right << std::setw(8) << "probes"
      << std::setw(14) << "max_rel_err" << "  " << std::left << "status\n";
  std::vector<GradCheckReport> reports;
  for (size_t i = 0; i < cases.size(); ++i) {
    GradCheckReport r = check_gradients(cases[i], h, tolerance, min_probes, rng);
    out << std::left << std::setw(18) << r.name << std::right << std::setw(8) << r.probes
        << std::setw(14) << std::scientific << std::setprecision(3) << r.max_rel_err
        << std::defaultfloat << "  " << (r.pass ? "pass" : "FAIL (worst: " + r.worst_param + ")")
        << "\n";
    if (r.max_rel_err > worst_err) {
      worst_err = r.max_rel_err;
      worst = i;
    }
    all_pass = all_pass && r.pass;
    reports.push_back(std::move(r));
  }

  out << "\nh sweep for worst layer '" << cases[worst].name << "':\n";
  for (Scalar hs : {1e-5, 1e-6, 1e-7}) {
    Rng sweep_rng(seed ^ 0x5555AAAAULL);
    GradCheckReport r = check_gradients(cases[worst], hs, tolerance, min_probes, sweep_rng);
    out << "  h = " << std::scientific << std::setprecision(1) << hs
        << "  max_rel_err = " << std::setprecision(3) << r.max_rel_err << std::defaultfloat
        << "\n";
  }
  out << (all_pass ? "gradcheck: PASS\n" : "gradcheck: FAIL\n");
  return all_pass ? 0 : 2;
}

}  // namespace bagcn
