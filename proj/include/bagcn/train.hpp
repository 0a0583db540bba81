#pragma once

#include "bagcn/checkpoint.hpp"
#include "bagcn/data.hpp"
#include "bagcn/network.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace bagcn {

/// Raised on NaN/Inf losses or gradients; the CLI maps it to exit code 2.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  std::string train_manifest;
  std::string test_manifest;
  Stream stream = Stream::spatial;

  Scalar lr = 0.1;
  Scalar momentum = 0.9;
  Scalar weight_decay = 1e-4;
  Index epochs = 50;
  std::vector<Index> lr_decay_epochs = {30, 40};
  Scalar lr_decay_factor = 0.1;
  Index batch_size = 8;
  uint64_t seed = 1;
  Index target_frames = 0;  // 0 keeps the native sequence length
  std::string out_dir;      // empty: keep everything in memory
};

TrainConfig parse_train_config_json(const std::string& json_text,
                                    const std::string& base_dir = "");
TrainConfig load_train_config(const std::string& path);

struct Metrics {
  Scalar top1 = 0.0;
  Scalar top5 = 0.0;
  Scalar mean_loss = 0.0;
  std::vector<Scalar> per_class;
};

/// Top-1 / top-min(5, K) accuracy and per-class breakdown from per-sample
/// score rows; ties resolve toward the lower class index.
Metrics metrics_from_scores(const std::vector<ArrayX>& scores, const std::vector<int>& labels);

/// SGD with momentum: v <- mu v + (g + lambda theta); theta <- theta - lr v.
/// Weight decay skips parameters flagged decay = false (biases, BN affine).
/// Gradients must be populated; NaN gradients abort with the parameter name.
struct SgdState {
  std::vector<ArrayX> velocity;  // registry order
};

void sgd_step(const std::vector<Parameter*>& params, SgdState& state, Scalar lr,
              Scalar momentum, Scalar weight_decay);

/// One sample ready for batching: per-body model inputs [V, T, C_model].
struct PreparedSample {
  std::string id;
  int label = 0;
  std::vector<Tensor> bodies;
};

std::vector<PreparedSample> prepare_dataset(const Dataset& dataset, Stream stream,
                                            Index target_frames);

/// Deterministic eval-mode pass; optionally returns per-sample softmax rows.
Metrics evaluate(BAGCNModel& model, const std::vector<PreparedSample>& data,
                 Index batch_size, std::vector<ArrayX>* softmax_scores = nullptr);

struct EpochRecord {
  Index epoch = 0;
  Scalar lr = 0.0;
  Scalar train_loss = 0.0;
  Scalar train_top1 = 0.0;
  Metrics test;
};

struct TrainResult {
  std::vector<Scalar> step_losses;
  std::vector<EpochRecord> epochs;
  Scalar best_test_top1 = 0.0;
  Index best_epoch = -1;
  std::string best_checkpoint;
  std::string final_checkpoint;
  std::string last_checkpoint;
};

/// Full training run: seeded shuffling, per-step JSONL loss lines, per-epoch
/// metrics, best-by-test-top1 / last / final checkpoints under out_dir.
TrainResult train(const TrainConfig& cfg, std::ostream* log = nullptr);

// ---- ablation harness ----

struct AblationVariant {
  std::string name;
  FocusMode focus;
  ContextMode context;
};

/// The named rows: wo/F, max, avg, att (= 2-Ca), 1-Ca, wo/Ca.
std::vector<AblationVariant> default_ablation_grid();

struct AblationRow {
  std::string variant;
  uint64_t seed = 0;
  Scalar top1 = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string csv;    // variant,seed,top1
  std::string table;  // aligned text with per-variant mean and sd
};

/// Trains every variant with identical seeds and batch streams.
AblationResult run_ablation(const TrainConfig& base, const std::vector<AblationVariant>& grid,
                            const std::vector<uint64_t>& seeds, std::ostream* log = nullptr);

}  // namespace bagcn
