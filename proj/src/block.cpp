#include "bagcn/block.hpp"

namespace bagcn {

namespace {

Tensor tensor_from_matrix(const MatrixRM& m) {
  Tensor t({m.rows(), m.cols()});
  MapMat(t.data(), m.rows(), m.cols()) = m;
  return t;
}

}  // namespace

void GraphConvParams::collect(std::vector<Parameter*>& out) {
  for (size_t s = 0; s < 3; ++s) {
    out.push_back(&w[s]);
    out.push_back(&m[s]);
  }
}

void BatchNormParams::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNormParams::collect_states(
    std::vector<std::pair<std::string, BatchNormState*>>& out) {
  out.emplace_back(prefix, &state);
}

BatchNormParams make_batch_norm_params(const std::string& prefix, Index channels) {
  BatchNormParams bn;
  bn.prefix = prefix;
  bn.gamma = Parameter{prefix + ".gamma", Tensor::full({channels}, 1.0), /*decay=*/false};
  bn.beta = Parameter{prefix + ".beta", Tensor({channels}), /*decay=*/false};
  bn.state.reset(channels);
  return bn;
}

BlockConfig make_block_config(Index c_in, Index c_out, Index stride, Index temporal_kernel,
                              ResidualKind residual, FocusMode focus, ContextMode context) {
  require(c_in >= 1 && c_out >= 1, "block config: channel widths must be positive");
  require(c_out % 4 == 0, "block config: C_out must be divisible by 4, got " +
                              std::to_string(c_out));
  require(stride == 1 || stride == 2, "block config: stride must be 1 or 2");
  require(temporal_kernel % 2 == 1, "block config: temporal kernel must be odd");
  if (residual == ResidualKind::identity)
    require(c_in == c_out && stride == 1,
            "block config: identity residual requires matching channels and stride 1");
  BlockConfig cfg;
  cfg.c_in = c_in;
  cfg.c_mid = c_out / 4;
  cfg.c_out = c_out;
  cfg.temporal_kernel = temporal_kernel;
  cfg.stride = stride;
  cfg.residual = residual;
  cfg.focus = focus;
  cfg.context = context;
  return cfg;
}

namespace {

GraphConvParams make_graph_conv(const std::string& prefix, Index c_in, Index c_out,
                                Index joints, Rng& rng) {
  GraphConvParams p;
  for (size_t s = 0; s < 3; ++s) {
    p.w[s] = Parameter{prefix + ".w" + std::to_string(s),
                       kaiming_init({c_in, c_out}, c_in, rng)};
    p.m[s] = Parameter{prefix + ".m" + std::to_string(s),
                       Tensor::full({joints, joints}, 1.0)};
  }
  return p;
}

}  // namespace

BlockParams make_block_params(const std::string& prefix, const BlockConfig& cfg, Index joints,
                              Index c_hat, Rng& rng) {
  BlockParams p;
  p.cfg = cfg;
  p.gcn_focus = make_graph_conv(prefix + ".gcn_f", cfg.c_in, cfg.c_mid, joints, rng);
  p.bn_mid = make_batch_norm_params(prefix + ".bn_mid", cfg.c_mid);
  p.fd = make_focus_diffuse_params(prefix + ".fd", cfg.focus, cfg.context, cfg.c_mid, c_hat,
                                   rng);
  p.gcn_diffusion = make_graph_conv(prefix + ".gcn_d", cfg.c_mid, cfg.c_out, joints, rng);
  p.bn_out = make_batch_norm_params(prefix + ".bn_out", cfg.c_out);
  p.tcn_w = Parameter{prefix + ".tcn.w",
                      kaiming_init({cfg.c_out, cfg.c_out, cfg.temporal_kernel},
                                   cfg.c_out * cfg.temporal_kernel, rng)};
  p.bn_tcn = make_batch_norm_params(prefix + ".bn_tcn", cfg.c_out);
  if (cfg.residual == ResidualKind::conv) {
    p.res_w = Parameter{prefix + ".res.w", kaiming_init({cfg.c_out, cfg.c_in, 1}, cfg.c_in, rng)};
    p.res_bn = make_batch_norm_params(prefix + ".res_bn", cfg.c_out);
  }
  return p;
}

void BlockParams::collect(std::vector<Parameter*>& out) {
  gcn_focus.collect(out);
  bn_mid.collect(out);
  fd.collect(out);
  gcn_diffusion.collect(out);
  bn_out.collect(out);
  out.push_back(&tcn_w);
  bn_tcn.collect(out);
  if (cfg.residual == ResidualKind::conv) {
    out.push_back(&res_w);
    res_bn.collect(out);
  }
}

void BlockParams::collect_states(
    std::vector<std::pair<std::string, BatchNormState*>>& out) {
  bn_mid.collect_states(out);
  bn_out.collect_states(out);
  bn_tcn.collect_states(out);
  if (cfg.residual == ResidualKind::conv) res_bn.collect_states(out);
}

Var spatial_graph_conv(const Var& x, const std::array<MatrixRM, 3>& adjacency,
                       GraphConvParams& params) {
  Tape& tape = *x.tape;
  Var out;
  for (size_t s = 0; s < 3; ++s) {
    Var masked = mul(tape.watch(params.m[s]), constant(tape, tensor_from_matrix(adjacency[s])));
    Var projected = matmul(x, tape.watch(params.w[s]));
    Var term = graph_matmul(masked, projected);
    out = s == 0 ? term : add(out, term);
  }
  return out;
}

Var block_forward(const Var& x, BlockParams& params, const PartitionedAdjacency& adjacency,
                  Mode mode, AttentionRecorder* recorder, int block_index) {
  Tape& tape = *x.tape;
  const BlockConfig& cfg = params.cfg;
  require(x.value().extent(-1) == cfg.c_in,
          "block_forward: input has " + std::to_string(x.value().extent(-1)) +
              " channels, config expects " + std::to_string(cfg.c_in));

  Var h = spatial_graph_conv(x, adjacency.focus_norm, params.gcn_focus);
  h = relu(batch_norm(h, tape.watch(params.bn_mid.gamma), tape.watch(params.bn_mid.beta),
                      params.bn_mid.state, mode));
  h = fd_forward(h, params.fd, recorder, block_index);
  h = spatial_graph_conv(h, adjacency.diffusion_norm, params.gcn_diffusion);
  h = batch_norm(h, tape.watch(params.bn_out.gamma), tape.watch(params.bn_out.beta),
                 params.bn_out.state, mode);
  h = conv_temporal(h, tape.watch(params.tcn_w), cfg.stride);
  h = batch_norm(h, tape.watch(params.bn_tcn.gamma), tape.watch(params.bn_tcn.beta),
                 params.bn_tcn.state, mode);

  switch (cfg.residual) {
    case ResidualKind::none: break;
    case ResidualKind::identity: h = add(h, x); break;
    case ResidualKind::conv: {
      Var r = conv_temporal(x, tape.watch(params.res_w), cfg.stride);
      r = batch_norm(r, tape.watch(params.res_bn.gamma), tape.watch(params.res_bn.beta),
                     params.res_bn.state, mode);
      h = add(h, r);
      break;
    }
  }
  return relu(h);
}

}  // namespace bagcn
