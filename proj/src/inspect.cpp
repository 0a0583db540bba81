#include "bagcn/inspect.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <ostream>

namespace bagcn {

using nlohmann::json;

std::vector<int> resolve_layer_selector(const std::string& selector, int num_blocks) {
  require(num_blocks >= 1, "layer selector: model has no blocks");
  if (selector == "last" || selector.empty()) return {num_blocks};
  if (selector == "all") {
    std::vector<int> all(static_cast<size_t>(num_blocks));
    for (int i = 0; i < num_blocks; ++i) all[static_cast<size_t>(i)] = i + 1;
    return all;
  }
  const bool numeric =
      !selector.empty() && selector.find_first_not_of("0123456789") == std::string::npos;
  if (!numeric)
    fail("layer selector: expected 'last', 'all' or a block index, got '" + selector + "'");
  const int layer = std::stoi(selector);
  require(layer >= 1 && layer <= num_blocks, "layer selector: block " + selector +
                                                 " outside [1, " + std::to_string(num_blocks) +
                                                 "]");
  return {layer};
}

std::vector<AttentionMap> collect_attention(BAGCNModel& model,
                                            const std::vector<PreparedSample>& data,
                                            const std::vector<int>& layers) {
  require(model.cfg.focus == FocusMode::att,
          "attention dump requires a model built with focus mode att; this checkpoint uses "
          "focus mode " + std::string(to_string(model.cfg.focus)));

  std::vector<AttentionMap> maps;
  for (const PreparedSample& sample : data) {
    for (size_t b = 0; b < sample.bodies.size(); ++b) {
      const Tensor& body = sample.bodies[b];
      Tensor batch({1, body.extent(0), body.extent(1), body.extent(2)}, body.array());

      Tape tape;
      AttentionRecorder recorder;
      forward(model, tape, batch, Mode::eval, &recorder);

      for (const auto& [block_index, scores] : recorder.records) {
        if (std::find(layers.begin(), layers.end(), block_index) == layers.end()) continue;
        // scores: [1, V, T', 1] -> frames x joints
        const Index joints = scores.extent(1);
        const Index frames = scores.extent(2);
        AttentionMap map;
        map.sample_id = sample.bodies.size() > 1
                            ? sample.id + "#b" + std::to_string(b)
                            : sample.id;
        map.layer = block_index;
        map.frames = frames;
        map.joints = joints;
        map.scores = MatrixRM(frames, joints);
        for (Index v = 0; v < joints; ++v)
          for (Index t = 0; t < frames; ++t) map.scores(t, v) = scores(Index{0}, v, t, Index{0});
        maps.push_back(std::move(map));
      }
    }
  }
  return maps;
}

void write_attention_jsonl(const std::vector<AttentionMap>& maps, std::ostream& out) {
  for (const AttentionMap& map : maps) {
    json rows = json::array();
    for (Index t = 0; t < map.frames; ++t) {
      json row = json::array();
      for (Index v = 0; v < map.joints; ++v) row.push_back(map.scores(t, v));
      rows.push_back(std::move(row));
    }
    json record = {{"sample_id", map.sample_id},
                   {"layer", map.layer},
                   {"T", map.frames},
                   {"V", map.joints},
                   {"scores", std::move(rows)}};
    out << record.dump() << "\n";
  }
}

void write_activation_report(const std::vector<AttentionMap>& maps, Scalar threshold,
                             std::ostream& out) {
  for (const AttentionMap& map : maps) {
    for (Index t = 0; t < map.frames; ++t) {
      json active = json::array();
      for (Index v = 0; v < map.joints; ++v)
        if (map.scores(t, v) > threshold) active.push_back(v);
      json record = {{"sample_id", map.sample_id},
                     {"layer", map.layer},
                     {"frame", t},
                     {"active", std::move(active)}};
      out << record.dump() << "\n";
    }
  }
}

}  // namespace bagcn
