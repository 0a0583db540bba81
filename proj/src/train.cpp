#include "bagcn/train.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

namespace bagcn {

using nlohmann::json;
namespace fs = std::filesystem;

TrainConfig parse_train_config_json(const std::string& json_text, const std::string& base_dir) {
  json j = json::parse(json_text);
  TrainConfig cfg;

  const auto& model = j.at("model");
  if (model.is_string()) {
    fs::path p = model.get<std::string>();
    if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
    cfg.model = load_model_config(p.string());
  } else {
    cfg.model = parse_model_config_json(model.dump(), base_dir);
  }

  auto resolve = [&](const std::string& path) {
    fs::path p = path;
    if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
    return p.string();
  };
  cfg.train_manifest = resolve(j.at("train_manifest").get<std::string>());
  cfg.test_manifest = resolve(j.at("test_manifest").get<std::string>());
  cfg.stream = parse_stream(j.value("stream", "spatial"));
  cfg.lr = j.value("lr", 0.1);
  cfg.momentum = j.value("momentum", 0.9);
  cfg.weight_decay = j.value("weight_decay", 1e-4);
  cfg.epochs = j.value("epochs", Index{50});
  if (j.contains("lr_decay_epochs"))
    cfg.lr_decay_epochs = j.at("lr_decay_epochs").get<std::vector<Index>>();
  cfg.lr_decay_factor = j.value("lr_decay_factor", 0.1);
  cfg.batch_size = j.value("batch_size", Index{8});
  cfg.seed = j.value("seed", uint64_t{1});
  cfg.target_frames = j.value("target_frames", Index{0});
  if (j.contains("out_dir")) cfg.out_dir = resolve(j.at("out_dir").get<std::string>());
  require(cfg.lr > 0.0 && cfg.batch_size >= 1 && cfg.epochs >= 1,
          "train config: lr, batch_size and epochs must be positive");
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open train config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_train_config_json(buf.str(), fs::path(path).parent_path().string());
}

void sgd_step(const std::vector<Parameter*>& params, SgdState& state, Scalar lr,
              Scalar momentum, Scalar weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Parameter* p : params) state.velocity.push_back(ArrayX::Zero(p->numel()));
  }
  require(state.velocity.size() == params.size(), "sgd_step: state does not match registry");
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    require(p.value.has_grad(), "sgd_step: gradient missing for " + p.name);
    const ArrayX& g = p.value.grad();
    if (!g.allFinite()) throw NumericalError("non-finite gradient in parameter " + p.name);
    ArrayX& v = state.velocity[i];
    if (p.decay && weight_decay != 0.0)
      v = momentum * v + (g + weight_decay * p.value.array());
    else
      v = momentum * v + g;
    p.value.array() -= lr * v;
  }
}

// ---- data preparation ----

namespace {

std::vector<SkeletonSequence> split_bodies(const SkeletonSequence& seq) {
  if (seq.body_count <= 1) return {seq};
  require(seq.frames() % seq.body_count == 0,
          "sample '" + seq.id + "': frame count is not a multiple of body_count");
  const Index per_body = seq.frames() / seq.body_count;
  const Index per_frame = seq.joints() * seq.channels();
  std::vector<SkeletonSequence> bodies;
  for (int b = 0; b < seq.body_count; ++b) {
    SkeletonSequence body = seq;
    body.body_count = 1;
    body.coords = Tensor({per_body, seq.joints(), seq.channels()});
    for (Index t = 0; t < per_body; ++t)
      for (Index k = 0; k < per_frame; ++k)
        body.coords.array()[t * per_frame + k] =
            seq.coords.array()[(b * per_body + t) * per_frame + k];
    bodies.push_back(std::move(body));
  }
  return bodies;
}

}  // namespace

std::vector<PreparedSample> prepare_dataset(const Dataset& dataset, Stream stream,
                                            Index target_frames) {
  std::vector<PreparedSample> out;
  out.reserve(static_cast<size_t>(dataset.size()));
  for (Index i = 0; i < dataset.size(); ++i) {
    SkeletonSequence seq = dataset.load(i);
    PreparedSample ps;
    ps.id = seq.id;
    ps.label = seq.label;
    for (const SkeletonSequence& body : split_bodies(seq)) {
      SkeletonSequence resized =
          target_frames > 0 ? pad_resize(body, target_frames) : body;
      ps.bodies.push_back(build_input(resized, dataset.topology(), stream,
                                      dataset.manifest().layout));
    }
    out.push_back(std::move(ps));
  }
  return out;
}

namespace {

struct Batch {
  Tensor rows;               // [R, V, T, C]
  std::vector<int> groups;   // row -> sample slot
  std::vector<int> labels;   // per sample slot
  std::vector<Index> which;  // sample indices in `data`
};

Batch assemble_batch(const std::vector<PreparedSample>& data, std::span<const Index> indices) {
  require(!indices.empty(), "assemble_batch: empty batch");
  const Tensor& first = data[static_cast<size_t>(indices[0])].bodies.at(0);
  const Index v = first.extent(0), t = first.extent(1), c = first.extent(2);

  Index rows = 0;
  for (Index idx : indices)
    rows += static_cast<Index>(data[static_cast<size_t>(idx)].bodies.size());

  Batch batch;
  batch.rows = Tensor({rows, v, t, c});
  Index row = 0;
  int slot = 0;
  for (Index idx : indices) {
    const PreparedSample& ps = data[static_cast<size_t>(idx)];
    batch.which.push_back(idx);
    batch.labels.push_back(ps.label);
    for (const Tensor& body : ps.bodies) {
      require(body.extent(0) == v && body.extent(1) == t && body.extent(2) == c,
              "assemble_batch: sample '" + ps.id + "' shape " +
                  shape_string(std::span<const Index>(body.shape())) +
                  " differs from the batch shape; resize sequences to a common length");
      std::copy(body.data(), body.data() + body.numel(),
                batch.rows.data() + row * body.numel());
      batch.groups.push_back(slot);
      ++row;
    }
    ++slot;
  }
  return batch;
}

}  // namespace

Metrics metrics_from_scores(const std::vector<ArrayX>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "metrics_from_scores: one label per score row");
  Metrics metrics;
  if (scores.empty()) return metrics;
  const Index k = scores.front().size();
  const Index top_k = std::min<Index>(5, k);

  std::vector<Index> class_total(static_cast<size_t>(k), 0);
  std::vector<Index> class_hit(static_cast<size_t>(k), 0);
  Index hit1 = 0, hit5 = 0;
  for (size_t r = 0; r < scores.size(); ++r) {
    const ArrayX& row = scores[r];
    require(row.size() == k, "metrics_from_scores: ragged score rows");
    const int label = labels[r];
    require(label >= 0 && label < k, "metrics_from_scores: label out of range");
    std::vector<Index> order(static_cast<size_t>(k));
    for (Index j = 0; j < k; ++j) order[static_cast<size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return row[a] > row[b]; });
    ++class_total[static_cast<size_t>(label)];
    if (order[0] == label) {
      ++hit1;
      ++class_hit[static_cast<size_t>(label)];
    }
    for (Index j = 0; j < top_k; ++j)
      if (order[static_cast<size_t>(j)] == label) {
        ++hit5;
        break;
      }
  }
  const Scalar total = Scalar(scores.size());
  metrics.top1 = Scalar(hit1) / total;
  metrics.top5 = Scalar(hit5) / total;
  metrics.per_class.resize(static_cast<size_t>(k), 0.0);
  for (Index c = 0; c < k; ++c)
    if (class_total[static_cast<size_t>(c)] > 0)
      metrics.per_class[static_cast<size_t>(c)] =
          Scalar(class_hit[static_cast<size_t>(c)]) / Scalar(class_total[static_cast<size_t>(c)]);
  return metrics;
}

Metrics evaluate(BAGCNModel& model, const std::vector<PreparedSample>& data, Index batch_size,
                 std::vector<ArrayX>* softmax_scores) {
  if (softmax_scores != nullptr) softmax_scores->clear();
  if (data.empty()) return Metrics{};

  std::vector<ArrayX> scores;
  std::vector<int> labels;
  Scalar loss_sum = 0.0;
  const Index n = static_cast<Index>(data.size());
  for (Index start = 0; start < n; start += batch_size) {
    std::vector<Index> indices;
    for (Index i = start; i < std::min(start + batch_size, n); ++i) indices.push_back(i);
    Batch batch = assemble_batch(data, indices);

    Tape tape;
    Var logits = forward(model, tape, batch.rows, Mode::eval, nullptr, &batch.groups,
                         static_cast<Index>(batch.labels.size()));
    Var loss = softmax_cross_entropy(logits, batch.labels);
    loss_sum += loss.value()(Index{0}) * Scalar(batch.labels.size());

    const Tensor probs = softmax_rows(logits.value());
    const Index rows = probs.extent(0), k = probs.extent(1);
    for (Index r = 0; r < rows; ++r) {
      scores.push_back(probs.matrix(rows, k).row(r).array().transpose());
      labels.push_back(batch.labels[static_cast<size_t>(r)]);
    }
  }

  Metrics metrics = metrics_from_scores(scores, labels);
  metrics.mean_loss = loss_sum / Scalar(n);
  if (softmax_scores != nullptr) *softmax_scores = std::move(scores);
  return metrics;
}

namespace {

Scalar lr_at_epoch(const TrainConfig& cfg, Index epoch) {
  Scalar lr = cfg.lr;
  for (Index decay : cfg.lr_decay_epochs)
    if (epoch >= decay) lr *= cfg.lr_decay_factor;
  return lr;
}

void log_line(std::ostream* log, const json& j) {
  if (log != nullptr) *log << j.dump() << "\n";
}

json metrics_json(const Metrics& m) {
  return {{"top1", m.top1}, {"top5", m.top5}, {"mean_loss", m.mean_loss}};
}

}  // namespace

TrainResult train(const TrainConfig& cfg, std::ostream* log) {
  Dataset train_ds = Dataset::open(cfg.train_manifest);
  Dataset test_ds = Dataset::open(cfg.test_manifest);
  require(static_cast<Index>(train_ds.num_classes()) == cfg.model.num_classes,
          "train: manifest declares " + std::to_string(train_ds.num_classes()) +
              " classes, model expects " + std::to_string(cfg.model.num_classes));

  std::vector<PreparedSample> train_data =
      prepare_dataset(train_ds, cfg.stream, cfg.target_frames);
  std::vector<PreparedSample> test_data =
      prepare_dataset(test_ds, cfg.stream, cfg.target_frames);
  require(!train_data.empty(), "train: empty training split");

  auto model = build_model(cfg.model, cfg.seed);
  SgdState sgd;
  TrainResult result;

  const bool persist = !cfg.out_dir.empty();
  if (persist) fs::create_directories(cfg.out_dir);
  const std::string best_path = persist ? (fs::path(cfg.out_dir) / "best.ckpt").string() : "";
  const std::string last_path = persist ? (fs::path(cfg.out_dir) / "last.ckpt").string() : "";
  const std::string final_path = persist ? (fs::path(cfg.out_dir) / "final.ckpt").string() : "";

  log_line(log, {{"event", "start"},
                 {"seed", cfg.seed},
                 {"stream", to_string(cfg.stream)},
                 {"parameters", model->parameter_count()},
                 {"train_samples", train_data.size()},
                 {"test_samples", test_data.size()}});

  const Index n = static_cast<Index>(train_data.size());
  Index step = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Scalar lr = lr_at_epoch(cfg, epoch);

    // The shuffle stream depends only on (seed, epoch, n) so every ablation
    // variant sees identical batch sequences.
    std::vector<Index> order(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) + 1);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    Scalar epoch_loss = 0.0;
    Index epoch_hits = 0;
    Index batches = 0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      std::span<const Index> indices(order.data() + start,
                                     static_cast<size_t>(std::min(cfg.batch_size, n - start)));
      Batch batch = assemble_batch(train_data, indices);

      Tape tape;
      Var logits = forward(*model, tape, batch.rows, Mode::train, nullptr, &batch.groups,
                           static_cast<Index>(batch.labels.size()));
      Var loss = softmax_cross_entropy(logits, batch.labels);
      const Scalar loss_value = loss.value()(Index{0});
      if (!std::isfinite(loss_value))
        throw NumericalError("non-finite loss at step " + std::to_string(step));

      model->zero_grads();
      tape.backward(loss);
      sgd_step(model->parameters, sgd, lr, cfg.momentum, cfg.weight_decay);

      const std::vector<int> predicted = argmax_rows(logits.value());
      for (size_t r = 0; r < predicted.size(); ++r)
        if (predicted[r] == batch.labels[r]) ++epoch_hits;

      result.step_losses.push_back(loss_value);
      epoch_loss += loss_value;
      ++batches;
      log_line(log, {{"event", "step"},
                     {"epoch", epoch},
                     {"step", step},
                     {"lr", lr},
                     {"loss", loss_value}});
      ++step;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.train_loss = epoch_loss / Scalar(batches);
    record.train_top1 = Scalar(epoch_hits) / Scalar(n);
    record.test = evaluate(*model, test_data, cfg.batch_size);
    result.epochs.push_back(record);

    if (persist) {
      save_checkpoint(last_path, *model);
      result.last_checkpoint = last_path;
    }
    const bool improved = record.test.top1 > result.best_test_top1 || result.best_epoch < 0;
    if (improved) {
      result.best_test_top1 = record.test.top1;
      result.best_epoch = epoch;
      if (persist) {
        save_checkpoint(best_path, *model);
        result.best_checkpoint = best_path;
      }
    }
    log_line(log, {{"event", "epoch"},
                   {"epoch", epoch},
                   {"lr", lr},
                   {"train_loss", record.train_loss},
                   {"train_top1", record.train_top1},
                   {"test", metrics_json(record.test)},
                   {"best_top1", result.best_test_top1}});
  }

  if (persist) {
    save_checkpoint(final_path, *model);
    result.final_checkpoint = final_path;
  }
  log_line(log, {{"event", "done"},
                 {"best_epoch", result.best_epoch},
                 {"best_top1", result.best_test_top1}});
  return result;
}

// ---- ablation harness ----

std::vector<AblationVariant> default_ablation_grid() {
  return {{"wo/F", FocusMode::off, ContextMode::bi},
          {"max", FocusMode::max, ContextMode::bi},
          {"avg", FocusMode::avg, ContextMode::bi},
          {"att", FocusMode::att, ContextMode::bi},
          {"1-Ca", FocusMode::att, ContextMode::uni},
          {"wo/Ca", FocusMode::att, ContextMode::none}};
}

AblationResult run_ablation(const TrainConfig& base, const std::vector<AblationVariant>& grid,
                            const std::vector<uint64_t>& seeds, std::ostream* log) {
  require(!grid.empty() && !seeds.empty(), "run_ablation: empty grid or seed list");
  AblationResult result;
  std::ostringstream csv;
  csv << "variant,seed,top1\n";

  for (const AblationVariant& variant : grid) {
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.model.focus = variant.focus;
      cfg.model.context = variant.context;
      cfg.seed = seed;
      if (!base.out_dir.empty()) {
        std::string slug = variant.name;
        for (char& ch : slug)
          if (ch == '/') ch = '_';
        cfg.out_dir =
            (fs::path(base.out_dir) / (slug + "_seed" + std::to_string(seed))).string();
      }
      log_line(log, {{"event", "ablation_run"},
                     {"variant", variant.name},
                     {"focus", to_string(variant.focus)},
                     {"context", to_string(variant.context)},
                     {"seed", seed}});
      TrainResult run = train(cfg, log);
      result.rows.push_back({variant.name, seed, run.best_test_top1});
      csv << variant.name << "," << seed << "," << std::setprecision(17) << run.best_test_top1
          << "\n";
    }
  }
  result.csv = csv.str();

  std::ostringstream table;
  table << std::left << std::setw(10) << "variant" << std::right << std::setw(8) << "runs"
        << std::setw(12) << "mean" << std::setw(12) << "sd" << "\n";
  for (const AblationVariant& variant : grid) {
    std::vector<Scalar> values;
    for (const AblationRow& row : result.rows)
      if (row.variant == variant.name) values.push_back(row.top1);
    Scalar mean = 0.0;
    for (Scalar v : values) mean += v;
    mean /= Scalar(values.size());
    Scalar var = 0.0;
    for (Scalar v : values) var += (v - mean) * (v - mean);
    const Scalar sd = values.size() > 1 ? std::sqrt(var / Scalar(values.size() - 1)) : 0.0;
    table << std::left << std::setw(10) << variant.name << std::right << std::setw(8)
          << values.size() << std::setw(12) << std::fixed << std::setprecision(4) << mean
          << std::setw(12) << sd << "\n";
    table.unsetf(std::ios::fixed);
  }
  result.table = table.str();
  return result;
}

}  // namespace bagcn
