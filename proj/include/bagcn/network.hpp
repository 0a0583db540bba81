#pragma once

#include "bagcn/block.hpp"

#include <memory>
#include <string>
#include <vector>

namespace bagcn {

/// Full-network description: topology, channel schedule, and the enhancement
/// modes applied in every block.
struct ModelConfig {
  SkeletonTopology topology;
  Index in_channels = 6;
  Index num_classes = 0;
  Index c_hat = 128;
  Index temporal_kernel = 9;
  FocusMode focus = FocusMode::att;
  ContextMode context = ContextMode::bi;

  struct BlockSpec {
    Index c_out = 0;
    Index stride = 1;
  };
  std::vector<BlockSpec> blocks;

  void validate() const;
};

/// The 9-block schedule: 64-channel entry, channel doubling with temporal
/// stride 2 at blocks 4 and 7.
std::vector<ModelConfig::BlockSpec> default_block_schedule();

ModelConfig parse_model_config_json(const std::string& json_text,
                                    const std::string& base_dir = "");
ModelConfig load_model_config(const std::string& path);
std::string model_config_to_json(const ModelConfig& cfg);

/// Assembled network. Parameters register in construction order under unique
/// names; the registry drives optimization, checkpointing, and grad checks.
struct BAGCNModel {
  ModelConfig cfg;
  PartitionedAdjacency adjacency;
  BatchNormParams data_bn;
  std::vector<BlockParams> blocks;
  Parameter classifier_w;  // [C_final, num_classes]
  Parameter classifier_b;  // [num_classes]

  std::vector<Parameter*> parameters;                          // registration order
  std::vector<std::pair<std::string, BatchNormState*>> states;  // running statistics

  BAGCNModel() = default;
  BAGCNModel(const BAGCNModel&) = delete;
  BAGCNModel& operator=(const BAGCNModel&) = delete;
  BAGCNModel(BAGCNModel&&) = delete;
  BAGCNModel& operator=(BAGCNModel&&) = delete;

  Index parameter_count() const;
  void zero_grads();
  Parameter* find(const std::string& name);
};

/// Deterministic initialization from the seed; edge-importance masks start
/// at ones.
std::unique_ptr<BAGCNModel> build_model(const ModelConfig& cfg, uint64_t seed);

/// Data BN -> blocks -> global average pooling -> classifier.
/// batch: [N, V, T, C_in]. When `body_groups` is given (one id per batch row,
/// ids in [0, num_groups)), pooled features of rows sharing an id are averaged
/// before the classifier and logits come out per group.
Var forward(BAGCNModel& model, Tape& tape, const Tensor& batch, Mode mode,
            AttentionRecorder* recorder = nullptr,
            const std::vector<int>* body_groups = nullptr, Index num_groups = 0);

/// Row-wise softmax of raw logits.
Tensor softmax_rows(const Tensor& logits);

/// Late fusion: element-wise sum of two softmax score tensors.
Tensor fuse_two_stream(const Tensor& scores_a, const Tensor& scores_b);

std::vector<int> argmax_rows(const Tensor& scores);

}  // namespace bagcn
