#include "bagcn/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace bagcn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as raw little-endian doubles");

namespace {

constexpr char kMagic[8] = {'B', 'A', 'G', 'C', 'N', 'C', 'K', '1'};

}  // namespace

void save_checkpoint(const std::string& path, const BAGCNModel& model) {
  json header;
  header["format"] = "bagcn-checkpoint-v1";
  header["model_config"] = json::parse(model_config_to_json(model.cfg));

  std::vector<std::pair<std::string, const ArrayX*>> buffers;
  for (const Parameter* p : model.parameters) buffers.emplace_back(p->name, &p->value.array());
  std::vector<ArrayX> state_copies;
  state_copies.reserve(model.states.size() * 2);
  for (const auto& [prefix, state] : model.states) {
    state_copies.push_back(state->running_mean);
    buffers.emplace_back(prefix + ".running_mean", &state_copies.back());
    state_copies.push_back(state->running_var);
    buffers.emplace_back(prefix + ".running_var", &state_copies.back());
  }

  json tensors = json::object();
  uint64_t offset = 0;
  for (const Parameter* p : model.parameters) {
    json entry;
    entry["shape"] = p->value.shape();
    entry["offset"] = offset;
    tensors[p->name] = entry;
    offset += static_cast<uint64_t>(p->value.numel()) * sizeof(Scalar);
  }
  for (const auto& [prefix, state] : model.states) {
    for (const char* kind : {".running_mean", ".running_var"}) {
      json entry;
      entry["shape"] = {state->running_mean.size()};
      entry["offset"] = offset;
      tensors[prefix + kind] = entry;
      offset += static_cast<uint64_t>(state->running_mean.size()) * sizeof(Scalar);
    }
  }
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    const uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, buf] : buffers) {
      (void)name;
      out.write(reinterpret_cast<const char*>(buf->data()),
                static_cast<std::streamsize>(buf->size() * sizeof(Scalar)));
    }
    require(out.good(), "write failed for checkpoint: " + path);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
          "not a checkpoint file: " + path);
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  require(in.good(), "truncated checkpoint header: " + path);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  require(in.good(), "truncated checkpoint header: " + path);
  return json::parse(text);
}

void read_buffer(std::ifstream& in, std::streampos payload_start, uint64_t offset,
                 ArrayX& target, const std::string& name, const std::string& path) {
  in.seekg(payload_start + static_cast<std::streamoff>(offset));
  in.read(reinterpret_cast<char*>(target.data()),
          static_cast<std::streamsize>(target.size() * sizeof(Scalar)));
  require(in.good(), "checkpoint payload truncated at tensor '" + name + "': " + path);
}

void load_tensors(std::ifstream& in, const json& header, BAGCNModel& model,
                  const std::string& path) {
  const json& tensors = header.at("tensors");
  const std::streampos payload_start = in.tellg();

  auto fetch = [&](const std::string& name, ArrayX& target, const Shape& shape) {
    require(tensors.contains(name), "checkpoint missing tensor '" + name + "': " + path);
    const json& entry = tensors.at(name);
    Shape stored = entry.at("shape").get<Shape>();
    require(stored == shape, "checkpoint tensor '" + name + "' has shape " +
                                 shape_string(std::span<const Index>(stored)) +
                                 ", model expects " +
                                 shape_string(std::span<const Index>(shape)));
    read_buffer(in, payload_start, entry.at("offset").get<uint64_t>(), target, name, path);
  };

  for (Parameter* p : model.parameters) fetch(p->name, p->value.array(), p->value.shape());
  for (auto& [prefix, state] : model.states) {
    Shape shape{state->running_mean.size()};
    fetch(prefix + ".running_mean", state->running_mean, shape);
    fetch(prefix + ".running_var", state->running_var, shape);
  }
}

}  // namespace

void load_checkpoint_into(const std::string& path, BAGCNModel& model) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  json header = read_header(in, path);
  load_tensors(in, header, model, path);
}

std::unique_ptr<BAGCNModel> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  json header = read_header(in, path);
  ModelConfig cfg = parse_model_config_json(header.at("model_config").dump());
  auto model = build_model(cfg, /*seed=*/0);
  load_tensors(in, header, *model, path);
  return model;
}

}  // namespace bagcn
