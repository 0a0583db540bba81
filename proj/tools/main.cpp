// bagcn command-line interface: training, evaluation, ablation grids,
// gradient checking, attention inspection, two-stream fusion, and dataset
// tooling. Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bagcn/gradcheck.hpp"
#include "bagcn/inspect.hpp"
#include "bagcn/train.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

using namespace bagcn;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open file: " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct ScoreRecord {
  std::string id;
  int label = 0;
  ArrayX scores;
};

std::vector<ScoreRecord> read_score_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open score file: " + path);
  std::vector<ScoreRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    ScoreRecord r;
    r.id = j.at("id").get<std::string>();
    r.label = j.at("label").get<int>();
    const auto values = j.at("scores").get<std::vector<Scalar>>();
    r.scores = Eigen::Map<const ArrayX>(values.data(), static_cast<Index>(values.size()));
    records.push_back(std::move(r));
  }
  return records;
}

void write_score_file(const std::string& path, const std::vector<ScoreRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write score file: " + path);
  for (const ScoreRecord& r : records) {
    json j = {{"id", r.id}, {"label", r.label}};
    j["scores"] = std::vector<Scalar>(r.scores.data(), r.scores.data() + r.scores.size());
    out << j.dump() << "\n";
  }
}

json metrics_to_json(const Metrics& m) {
  return {{"top1", m.top1},
          {"top5", m.top5},
          {"mean_loss", m.mean_loss},
          {"per_class", m.per_class}};
}

// Flag overrides applied on top of --config.
struct TrainOverrides {
  std::optional<Scalar> lr, momentum, weight_decay, lr_decay_factor;
  std::optional<Index> epochs, batch_size, target_frames;
  std::optional<uint64_t> seed;
  std::optional<std::string> stream, focus, context, out_dir, train_manifest, test_manifest;
  std::optional<std::vector<Index>> lr_decay_epochs;

  void apply(TrainConfig& cfg) const {
    if (lr) cfg.lr = *lr;
    if (momentum) cfg.momentum = *momentum;
    if (weight_decay) cfg.weight_decay = *weight_decay;
    if (lr_decay_factor) cfg.lr_decay_factor = *lr_decay_factor;
    if (lr_decay_epochs) cfg.lr_decay_epochs = *lr_decay_epochs;
    if (epochs) cfg.epochs = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (target_frames) cfg.target_frames = *target_frames;
    if (seed) cfg.seed = *seed;
    if (stream) cfg.stream = parse_stream(*stream);
    if (focus) cfg.model.focus = parse_focus_mode(*focus);
    if (context) cfg.model.context = parse_context_mode(*context);
    if (out_dir) cfg.out_dir = *out_dir;
    if (train_manifest) cfg.train_manifest = *train_manifest;
    if (test_manifest) cfg.test_manifest = *test_manifest;
  }
};

void add_train_overrides(CLI::App* cmd, TrainOverrides& ov) {
  cmd->add_option("--lr", ov.lr, "base learning rate");
  cmd->add_option("--momentum", ov.momentum);
  cmd->add_option("--weight-decay", ov.weight_decay);
  cmd->add_option("--lr-decay-factor", ov.lr_decay_factor);
  cmd->add_option("--lr-decay-epochs", ov.lr_decay_epochs, "epochs at which lr decays");
  cmd->add_option("--epochs", ov.epochs);
  cmd->add_option("--batch-size", ov.batch_size);
  cmd->add_option("--target-frames", ov.target_frames, "resize sequences (0 = native)");
  cmd->add_option("--seed", ov.seed);
  cmd->add_option("--stream", ov.stream, "spatial|motion");
  cmd->add_option("--focus-mode", ov.focus, "off|max|avg|att");
  cmd->add_option("--context-mode", ov.context, "none|uni|bi");
  cmd->add_option("--out-dir", ov.out_dir, "checkpoint/log directory");
  cmd->add_option("--train-manifest", ov.train_manifest);
  cmd->add_option("--test-manifest", ov.test_manifest);
}

std::vector<PreparedSample> prepared_from_manifest(const std::string& manifest,
                                                   Stream stream, Index target_frames) {
  Dataset ds = Dataset::open(manifest);
  return prepare_dataset(ds, stream, target_frames);
}

int cmd_train(const std::string& config_path, const TrainOverrides& ov,
              const std::string& log_path) {
  TrainConfig cfg = load_train_config(config_path);
  ov.apply(cfg);
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    require(log_file.good(), "cannot open log file: " + log_path);
    log = &log_file;
  }
  TrainResult result = train(cfg, log);
  json summary = {{"event", "summary"},
                  {"best_epoch", result.best_epoch},
                  {"best_top1", result.best_test_top1},
                  {"final_checkpoint", result.final_checkpoint},
                  {"best_checkpoint", result.best_checkpoint}};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, Index batch_size,
             const std::string& stream_name, Index target_frames,
             const std::string& scores_path) {
  auto model = load_checkpoint(checkpoint);
  Dataset ds = Dataset::open(manifest);
  require(ds.num_classes() == 0 || ds.num_classes() == model->cfg.num_classes,
          "eval: manifest classes do not match the checkpoint");
  auto data = prepare_dataset(ds, parse_stream(stream_name), target_frames);
  std::vector<ArrayX> scores;
  Metrics m = evaluate(*model, data, batch_size, scores_path.empty() ? nullptr : &scores);
  if (!scores_path.empty()) {
    std::vector<ScoreRecord> records;
    for (size_t i = 0; i < data.size(); ++i)
      records.push_back({data[i].id, data[i].label, scores[i]});
    write_score_file(scores_path, records);
  }
  std::cout << metrics_to_json(m).dump() << "\n";
  return 0;
}

int cmd_fuse(const std::string& spatial_path, const std::string& motion_path,
             const std::string& out_path) {
  const auto spatial = read_score_file(spatial_path);
  const auto motion = read_score_file(motion_path);
  require(spatial.size() == motion.size(), "fuse: score files differ in length");
  std::vector<ScoreRecord> fused;
  std::vector<ArrayX> rows;
  std::vector<int> labels;
  for (size_t i = 0; i < spatial.size(); ++i) {
    const ScoreRecord& a = spatial[i];
    const ScoreRecord& b = motion[i];
    require(a.id == b.id, "fuse: sample order mismatch at '" + a.id + "' vs '" + b.id + "'");
    require(a.label == b.label, "fuse: label mismatch for sample '" + a.id + "'");
    Tensor ta({1, a.scores.size()}, a.scores);
    Tensor tb({1, b.scores.size()}, b.scores);
    Tensor sum = fuse_two_stream(ta, tb);
    fused.push_back({a.id, a.label, sum.array()});
    rows.push_back(sum.array());
    labels.push_back(a.label);
  }
  if (!out_path.empty()) write_score_file(out_path, fused);
  Metrics m = metrics_from_scores(rows, labels);
  std::cout << json({{"top1", m.top1}, {"top5", m.top5}, {"samples", rows.size()}}).dump()
            << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const TrainOverrides& ov,
               const std::vector<std::string>& variant_names,
               const std::vector<uint64_t>& seeds, const std::string& csv_path,
               const std::string& log_path) {
  TrainConfig base = load_train_config(config_path);
  ov.apply(base);

  std::vector<AblationVariant> grid;
  const auto all = default_ablation_grid();
  if (variant_names.empty()) {
    grid = all;
  } else {
    for (const std::string& name : variant_names) {
      bool found = false;
      for (const AblationVariant& v : all)
        if (v.name == name) {
          grid.push_back(v);
          found = true;
        }
      require(found, "unknown ablation variant '" + name +
                         "' (expected wo/F, max, avg, att, 1-Ca, wo/Ca)");
    }
  }

  std::ofstream log_file;
  std::ostream* log = nullptr;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    require(log_file.good(), "cannot open log file: " + log_path);
    log = &log_file;
  }
  AblationResult result = run_ablation(base, grid, seeds.empty() ? std::vector<uint64_t>{1, 2, 3}
                                                                 : seeds,
                                       log);
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path, std::ios::trunc);
    require(csv.good(), "cannot write csv: " + csv_path);
    csv << result.csv;
  }
  std::cout << result.table;
  return 0;
}

int cmd_dump_attn(const std::string& checkpoint, const std::string& manifest,
                  const std::string& layer, Scalar threshold, Index max_samples,
                  const std::string& stream_name, Index target_frames,
                  const std::string& out_path, const std::string& report_path) {
  auto model = load_checkpoint(checkpoint);
  auto data = prepared_from_manifest(manifest, parse_stream(stream_name), target_frames);
  if (max_samples > 0 && static_cast<Index>(data.size()) > max_samples)
    data.resize(static_cast<size_t>(max_samples));
  const auto layers = resolve_layer_selector(layer, static_cast<int>(model->blocks.size()));
  const auto maps = collect_attention(*model, data, layers);

  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    require(out.good(), "cannot write attention records: " + out_path);
    write_attention_jsonl(maps, out);
  } else {
    write_attention_jsonl(maps, std::cout);
  }
  if (!report_path.empty()) {
    std::ofstream report(report_path, std::ios::trunc);
    require(report.good(), "cannot write activation report: " + report_path);
    write_activation_report(maps, threshold, report);
  }
  std::cerr << "dumped " << maps.size() << " attention maps (threshold " << threshold << ")\n";
  return 0;
}

int cmd_generate_synth(const std::string& spec_path, const std::string& out_dir) {
  SynthSpec spec;
  if (!spec_path.empty()) spec = parse_synth_spec_json(read_text(spec_path));
  SynthOutput out = synth_generate(spec, out_dir);
  std::cout << json({{"train_manifest", out.train_manifest},
                     {"test_manifest", out.test_manifest},
                     {"topology", out.topology}})
                   .dump()
            << "\n";
  return 0;
}

int cmd_inspect(const std::string& manifest) {
  Dataset ds = Dataset::open(manifest);
  std::vector<Index> per_class(ds.manifest().classes.empty()
                                   ? 0
                                   : ds.manifest().classes.size(),
                               0);
  Index min_frames = -1, max_frames = 0, invalid = 0;
  for (Index i = 0; i < ds.size(); ++i) {
    SkeletonSequence seq = ds.load(i);
    if (static_cast<size_t>(seq.label) >= per_class.size())
      per_class.resize(static_cast<size_t>(seq.label) + 1, 0);
    ++per_class[static_cast<size_t>(seq.label)];
    if (min_frames < 0 || seq.frames() < min_frames) min_frames = seq.frames();
    max_frames = std::max(max_frames, seq.frames());
    invalid += seq.invalid_frames;
  }
  json j = {{"split", ds.manifest().split},
            {"samples", ds.size()},
            {"joints", ds.topology().num_joints},
            {"layout", to_string(ds.manifest().layout)},
            {"classes", ds.manifest().classes},
            {"per_class_counts", per_class},
            {"min_frames", min_frames},
            {"max_frames", max_frames},
            {"invalid_frames_zero_filled", invalid}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_convert(const std::string& input, const std::string& topology,
                const std::string& out_dir, const std::string& split,
                const std::string& layout) {
  SkeletonTopology topo = load_topology(topology);
  std::ifstream in(input);
  require(in.good(), "cannot open input: " + input);

  std::vector<SkeletonSequence> samples;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line);
    SkeletonSequence seq;
    seq.id = j.value("id", split + "/" + std::to_string(samples.size()));
    seq.label = j.at("label").get<int>();
    seq.body_count = j.value("body_count", 1);
    const auto& frames = j.at("frames");
    require(frames.is_array() && !frames.empty(),
            "convert: line " + std::to_string(line_no) + " has no frames");
    const Index t = static_cast<Index>(frames.size());
    const Index v = static_cast<Index>(frames[0].size());
    const Index c = static_cast<Index>(frames[0][0].size());
    require(v == topo.num_joints, "convert: line " + std::to_string(line_no) + " has " +
                                      std::to_string(v) + " joints, topology has " +
                                      std::to_string(topo.num_joints));
    seq.coords = Tensor({t, v, c});
    for (Index ti = 0; ti < t; ++ti)
      for (Index vi = 0; vi < v; ++vi)
        for (Index ci = 0; ci < c; ++ci)
          seq.coords(ti, vi, ci) =
              static_cast<Scalar>(static_cast<float>(frames[ti][vi][ci].get<Scalar>()));
    samples.push_back(std::move(seq));
  }

  fs::create_directories(out_dir);
  fs::copy_file(topology, fs::path(out_dir) / "topology.json",
                fs::copy_options::overwrite_existing);
  DatasetManifest manifest;
  manifest.split = split;
  manifest.topology_path = "topology.json";
  manifest.blob_path = split + ".blob";
  manifest.layout = parse_channel_layout(layout);
  const std::string manifest_path =
      (fs::path(out_dir) / (split + "_manifest.json")).string();
  write_dataset(manifest_path, manifest, samples);
  std::cout << json({{"manifest", manifest_path}, {"samples", samples.size()}}).dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bidirectional attentive graph convolutional network toolkit"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a config");
  std::string train_config, train_log;
  TrainOverrides train_ov;
  train_cmd->add_option("--config", train_config, "train config JSON")->required();
  train_cmd->add_option("--log", train_log, "JSONL log file (default stdout)");
  add_train_overrides(train_cmd, train_ov);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string eval_ckpt, eval_manifest, eval_scores, eval_stream = "spatial";
  Index eval_batch = 8, eval_frames = 0;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--batch-size", eval_batch);
  eval_cmd->add_option("--stream", eval_stream, "spatial|motion");
  eval_cmd->add_option("--target-frames", eval_frames);
  eval_cmd->add_option("--save-scores", eval_scores, "write per-sample softmax rows (JSONL)");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "run the focus/context ablation grid");
  std::string ablate_config, ablate_csv, ablate_log;
  std::vector<std::string> ablate_variants;
  std::vector<uint64_t> ablate_seeds;
  TrainOverrides ablate_ov;
  ablate_cmd->add_option("--config", ablate_config, "base train config JSON")->required();
  ablate_cmd->add_option("--variants", ablate_variants,
                         "subset of: wo/F max avg att 1-Ca wo/Ca (default all)");
  ablate_cmd->add_option("--seeds", ablate_seeds, "seeds per variant (default 1 2 3)");
  ablate_cmd->add_option("--csv", ablate_csv, "write variant,seed,top1 rows");
  ablate_cmd->add_option("--log", ablate_log, "JSONL training log file");
  add_train_overrides(ablate_cmd, ablate_ov);

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  uint64_t grad_seed = 2024;
  Scalar grad_tol = 1e-4, grad_h = 1e-6;
  Index grad_probes = 200;
  grad_cmd->add_option("--seed", grad_seed);
  grad_cmd->add_option("--tolerance", grad_tol);
  grad_cmd->add_option("--fd-step", grad_h, "central-difference step");
  grad_cmd->add_option("--probes", grad_probes, "parameter probes per layer type");

  // dump-attn
  auto* attn_cmd = app.add_subcommand("dump-attn", "dump attention maps from a checkpoint");
  std::string attn_ckpt, attn_manifest, attn_layer = "last", attn_out, attn_report,
                                        attn_stream = "spatial";
  Scalar attn_threshold = 0.8;
  Index attn_samples = 0, attn_frames = 0;
  attn_cmd->add_option("--checkpoint", attn_ckpt)->required();
  attn_cmd->add_option("--manifest", attn_manifest)->required();
  attn_cmd->add_option("--layer", attn_layer, "last|all|<block index>");
  attn_cmd->add_option("--threshold", attn_threshold, "activation threshold");
  attn_cmd->add_option("--samples", attn_samples, "limit to the first N samples");
  attn_cmd->add_option("--stream", attn_stream);
  attn_cmd->add_option("--target-frames", attn_frames);
  attn_cmd->add_option("--out", attn_out, "records JSONL (default stdout)");
  attn_cmd->add_option("--report", attn_report, "activated-joint report JSONL");

  // fuse
  auto* fuse_cmd = app.add_subcommand("fuse", "late fusion of two score files");
  std::string fuse_spatial, fuse_motion, fuse_out;
  fuse_cmd->add_option("--spatial", fuse_spatial)->required();
  fuse_cmd->add_option("--motion", fuse_motion)->required();
  fuse_cmd->add_option("--out", fuse_out, "write fused score rows");

  // data
  auto* data_cmd = app.add_subcommand("data", "dataset tooling");
  data_cmd->require_subcommand(1);
  auto* synth_cmd = data_cmd->add_subcommand("generate-synth", "generate a synthetic dataset");
  std::string synth_spec, synth_out;
  synth_cmd->add_option("--spec", synth_spec, "SynthSpec JSON (defaults when omitted)");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  auto* inspect_cmd = data_cmd->add_subcommand("inspect", "summarize a manifest");
  std::string inspect_manifest;
  inspect_cmd->add_option("--manifest", inspect_manifest)->required();
  auto* convert_cmd = data_cmd->add_subcommand("convert", "convert JSONL samples to a blob");
  std::string conv_input, conv_topology, conv_out, conv_split = "train", conv_layout = "xyz";
  convert_cmd->add_option("--input", conv_input, "JSONL samples")->required();
  convert_cmd->add_option("--topology", conv_topology)->required();
  convert_cmd->add_option("--out", conv_out)->required();
  convert_cmd->add_option("--split", conv_split, "train|test");
  convert_cmd->add_option("--layout", conv_layout, "xyz|xy_conf");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_config, train_ov, train_log);
    if (*eval_cmd)
      return cmd_eval(eval_ckpt, eval_manifest, eval_batch, eval_stream, eval_frames,
                      eval_scores);
    if (*ablate_cmd)
      return cmd_ablate(ablate_config, ablate_ov, ablate_variants, ablate_seeds, ablate_csv,
                        ablate_log);
    if (*grad_cmd) return run_gradcheck(std::cout, grad_seed, grad_tol, grad_h, grad_probes);
    if (*attn_cmd)
      return cmd_dump_attn(attn_ckpt, attn_manifest, attn_layer, attn_threshold, attn_samples,
                           attn_stream, attn_frames, attn_out, attn_report);
    if (*fuse_cmd) return cmd_fuse(fuse_spatial, fuse_motion, fuse_out);
    if (*synth_cmd) return cmd_generate_synth(synth_spec, synth_out);
    if (*inspect_cmd) return cmd_inspect(inspect_manifest);
    if (*convert_cmd)
      return cmd_convert(conv_input, conv_topology, conv_out, conv_split, conv_layout);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
