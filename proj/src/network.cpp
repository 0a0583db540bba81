#include "bagcn/network.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace bagcn {

using nlohmann::json;

void ModelConfig::validate() const {
  topology.validate();
  require(in_channels >= 1, "model config: in_channels must be positive");
  require(num_classes >= 2, "model config: need at least two classes");
  require(!blocks.empty(), "model config: empty block schedule");
  for (const auto& b : blocks) {
    require(b.c_out >= 4 && b.c_out % 4 == 0,
            "model config: block channels must be positive multiples of 4, got " +
                std::to_string(b.c_out));
    require(b.stride == 1 || b.stride == 2, "model config: block stride must be 1 or 2");
  }
  if (context == ContextMode::bi)
    require(c_hat % 2 == 0, "model config: bi context needs an even c_hat");
}

std::vector<ModelConfig::BlockSpec> default_block_schedule() {
  return {{64, 1}, {64, 1}, {64, 1}, {128, 2}, {128, 1}, {128, 1}, {256, 2}, {256, 1}, {256, 1}};
}

ModelConfig parse_model_config_json(const std::string& json_text, const std::string& base_dir) {
  json j = json::parse(json_text);
  ModelConfig cfg;
  const auto& topo = j.at("topology");
  if (topo.is_string()) {
    std::filesystem::path p = topo.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
    cfg.topology = load_topology(p.string());
  } else {
    cfg.topology = parse_topology_json(topo.dump());
  }
  cfg.in_channels = j.at("in_channels").get<Index>();
  cfg.num_classes = j.at("num_classes").get<Index>();
  cfg.c_hat = j.value("c_hat", Index{128});
  cfg.temporal_kernel = j.value("temporal_kernel", Index{9});
  cfg.focus = parse_focus_mode(j.value("focus_mode", "att"));
  cfg.context = parse_context_mode(j.value("context_mode", "bi"));
  if (j.contains("blocks")) {
    for (const auto& b : j.at("blocks"))
      cfg.blocks.push_back({b.at("out").get<Index>(), b.value("stride", Index{1})});
  } else {
    cfg.blocks = default_block_schedule();
  }
  cfg.validate();
  return cfg;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open model config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model_config_json(buf.str(),
                                 std::filesystem::path(path).parent_path().string());
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["topology"] = json::parse(topology_to_json(cfg.topology));
  j["in_channels"] = cfg.in_channels;
  j["num_classes"] = cfg.num_classes;
  j["c_hat"] = cfg.c_hat;
  j["temporal_kernel"] = cfg.temporal_kernel;
  j["focus_mode"] = to_string(cfg.focus);
  j["context_mode"] = to_string(cfg.context);
  j["blocks"] = json::array();
  for (const auto& b : cfg.blocks) j["blocks"].push_back({{"out", b.c_out}, {"stride", b.stride}});
  return j.dump(2);
}

Index BAGCNModel::parameter_count() const {
  Index count = 0;
  for (const Parameter* p : parameters) count += p->numel();
  return count;
}

void BAGCNModel::zero_grads() {
  for (Parameter* p : parameters) p->value.zero_grad();
}

Parameter* BAGCNModel::find(const std::string& name) {
  for (Parameter* p : parameters)
    if (p->name == name) return p;
  return nullptr;
}

std::unique_ptr<BAGCNModel> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  auto model = std::make_unique<BAGCNModel>();
  model->cfg = cfg;
  model->adjacency = build_directed_graphs(cfg.topology);

  Rng rng(seed);
  model->data_bn = make_batch_norm_params("data_bn", cfg.in_channels);

  Index c_in = cfg.in_channels;
  for (size_t i = 0; i < cfg.blocks.size(); ++i) {
    const auto& spec = cfg.blocks[i];
    ResidualKind residual = ResidualKind::conv;
    if (i == 0)
      residual = ResidualKind::none;
    else if (c_in == spec.c_out && spec.stride == 1)
      residual = ResidualKind::identity;
    BlockConfig bc = make_block_config(c_in, spec.c_out, spec.stride, cfg.temporal_kernel,
                                       residual, cfg.focus, cfg.context);
    model->blocks.push_back(make_block_params("block" + std::to_string(i + 1), bc,
                                              cfg.topology.num_joints, cfg.c_hat, rng));
    c_in = spec.c_out;
  }

  model->classifier_w =
      Parameter{"classifier.w", kaiming_init({c_in, cfg.num_classes}, c_in, rng)};
  model->classifier_b = Parameter{"classifier.b", Tensor({cfg.num_classes}), /*decay=*/false};

  model->data_bn.collect(model->parameters);
  for (auto& block : model->blocks) block.collect(model->parameters);
  model->parameters.push_back(&model->classifier_w);
  model->parameters.push_back(&model->classifier_b);

  model->data_bn.collect_states(model->states);
  for (auto& block : model->blocks) block.collect_states(model->states);

  std::set<std::string> names;
  for (const Parameter* p : model->parameters)
    require(names.insert(p->name).second, "duplicate parameter name: " + p->name);
  return model;
}

Var forward(BAGCNModel& model, Tape& tape, const Tensor& batch, Mode mode,
            AttentionRecorder* recorder, const std::vector<int>* body_groups,
            Index num_groups) {
  require(batch.rank() == 4, "forward: batch must be [N, V, T, C]");
  require(batch.extent(1) == model.cfg.topology.num_joints,
          "forward: batch has " + std::to_string(batch.extent(1)) + " joints, topology has " +
              std::to_string(model.cfg.topology.num_joints));
  require(batch.extent(3) == model.cfg.in_channels,
          "forward: batch has " + std::to_string(batch.extent(3)) +
              " channels, model expects " + std::to_string(model.cfg.in_channels));

  Var x = constant(tape, batch);
  x = batch_norm(x, tape.watch(model.data_bn.gamma), tape.watch(model.data_bn.beta),
                 model.data_bn.state, mode);
  for (size_t i = 0; i < model.blocks.size(); ++i)
    x = block_forward(x, model.blocks[i], model.adjacency, mode, recorder,
                      static_cast<int>(i + 1));
  Var pooled = global_avg_pool(x);
  if (body_groups != nullptr) pooled = mean_rows_by_group(pooled, *body_groups, num_groups);
  return add_bias(matmul(pooled, tape.watch(model.classifier_w)),
                  tape.watch(model.classifier_b));
}

Tensor softmax_rows(const Tensor& logits) {
  require(logits.rank() == 2, "softmax_rows: expected [N, K]");
  const Index n = logits.extent(0), k = logits.extent(1);
  Tensor out({n, k});
  for (Index r = 0; r < n; ++r) {
    ArrayX row = logits.matrix(n, k).row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    out.matrix(n, k).row(r).array() = row / row.sum();
  }
  return out;
}

Tensor fuse_two_stream(const Tensor& scores_a, const Tensor& scores_b) {
  require(scores_a.rank() == 2 && scores_b.rank() == 2, "fuse_two_stream: expected [N, K]");
  require(scores_a.same_shape(scores_b),
          "fuse_two_stream: shape mismatch " +
              shape_string(std::span<const Index>(scores_a.shape())) + " vs " +
              shape_string(std::span<const Index>(scores_b.shape())));
  return Tensor(scores_a.shape(), scores_a.array() + scores_b.array());
}

std::vector<int> argmax_rows(const Tensor& scores) {
  require(scores.rank() == 2, "argmax_rows: expected [N, K]");
  const Index n = scores.extent(0), k = scores.extent(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (Index r = 0; r < n; ++r) {
    Index best = 0;
    scores.matrix(n, k).row(r).maxCoeff(&best);
    out[static_cast<size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace bagcn
