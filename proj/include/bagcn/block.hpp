#pragma once

#include "bagcn/focus_diffuse.hpp"
#include "bagcn/graph.hpp"
#include "bagcn/ops.hpp"

namespace bagcn {

/// One graph convolution: a 1x1 channel projection and a learnable V x V
/// edge-importance mask per spatial subset.
struct GraphConvParams {
  std::array<Parameter, 3> w;  // [C_in, C_out]
  std::array<Parameter, 3> m;  // [V, V], initialized to ones

  void collect(std::vector<Parameter*>& out);
};

enum class ResidualKind { none, identity, conv };

struct BlockConfig {
  Index c_in = 0;
  Index c_mid = 0;  // bottleneck width of the enhancement, C_out / 4
  Index c_out = 0;
  Index temporal_kernel = 9;
  Index stride = 1;
  ResidualKind residual = ResidualKind::none;
  FocusMode focus = FocusMode::att;
  ContextMode context = ContextMode::bi;
};

/// Validates the C_mid = C_out / 4 bottleneck, the stride domain, and the
/// residual kind against the channel/stride combination.
BlockConfig make_block_config(Index c_in, Index c_out, Index stride, Index temporal_kernel,
                              ResidualKind residual, FocusMode focus, ContextMode context);

struct BatchNormParams {
  std::string prefix;
  Parameter gamma;
  Parameter beta;
  BatchNormState state;

  void collect(std::vector<Parameter*>& out);
  void collect_states(std::vector<std::pair<std::string, BatchNormState*>>& out);
};

BatchNormParams make_batch_norm_params(const std::string& prefix, Index channels);

/// All learnable state of one building block.
struct BlockParams {
  BlockConfig cfg;
  GraphConvParams gcn_focus;      // C_in -> C_mid over the focus graph
  BatchNormParams bn_mid;
  FocusDiffuseParams fd;
  GraphConvParams gcn_diffusion;  // C_mid -> C_out over the diffusion graph
  BatchNormParams bn_out;
  Parameter tcn_w;                // [C_out, C_out, K_t]
  BatchNormParams bn_tcn;
  Parameter res_w;                // [C_out, C_in, 1] when residual == conv
  BatchNormParams res_bn;

  void collect(std::vector<Parameter*>& out);
  void collect_states(std::vector<std::pair<std::string, BatchNormState*>>& out);
};

BlockParams make_block_params(const std::string& prefix, const BlockConfig& cfg, Index joints,
                              Index c_hat, Rng& rng);

/// sum_s (M_s o A_s) (X W_s) for one directed graph's three subsets.
Var spatial_graph_conv(const Var& x, const std::array<MatrixRM, 3>& adjacency,
                       GraphConvParams& params);

/// Focus-graph conv -> BN + ReLU -> focusing/diffusion enhancement ->
/// diffusion-graph conv -> BN -> temporal conv -> BN -> residual -> ReLU.
Var block_forward(const Var& x, BlockParams& params, const PartitionedAdjacency& adjacency,
                  Mode mode, AttentionRecorder* recorder = nullptr, int block_index = 0);

}  // namespace bagcn
