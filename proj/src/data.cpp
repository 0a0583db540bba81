#include "bagcn/data.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace bagcn {

using nlohmann::json;
namespace fs = std::filesystem;

Stream parse_stream(const std::string& s) {
  if (s == "spatial") return Stream::spatial;
  if (s == "motion") return Stream::motion;
  fail("unknown stream '" + s + "' (expected spatial|motion)");
}

const char* to_string(Stream s) { return s == Stream::spatial ? "spatial" : "motion"; }

ChannelLayout parse_channel_layout(const std::string& s) {
  if (s == "xyz") return ChannelLayout::xyz;
  if (s == "xy_conf") return ChannelLayout::xy_conf;
  fail("unknown channel layout '" + s + "' (expected xyz|xy_conf)");
}

const char* to_string(ChannelLayout layout) {
  return layout == ChannelLayout::xyz ? "xyz" : "xy_conf";
}

// ---- manifest / blob ----

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["format"] = "bagcn-dataset-v1";
  j["split"] = m.split;
  j["topology"] = m.topology_path;
  j["blob"] = m.blob_path;
  j["layout"] = to_string(m.layout);
  j["classes"] = m.classes;
  j["samples"] = json::array();
  for (const auto& e : m.samples) {
    j["samples"].push_back({{"id", e.id},
                            {"offset", e.offset},
                            {"bytes", e.bytes},
                            {"frames", e.frames},
                            {"joints", e.joints},
                            {"channels", e.channels},
                            {"label", e.label},
                            {"body_count", e.body_count}});
  }
  return j.dump(2);
}

DatasetManifest parse_manifest_json(const std::string& json_text) {
  json j = json::parse(json_text);
  DatasetManifest m;
  m.split = j.value("split", "train");
  m.topology_path = j.at("topology").get<std::string>();
  m.blob_path = j.at("blob").get<std::string>();
  m.layout = parse_channel_layout(j.value("layout", "xyz"));
  if (j.contains("classes")) m.classes = j.at("classes").get<std::vector<std::string>>();
  std::set<std::string> ids;
  for (const auto& s : j.at("samples")) {
    ManifestEntry e;
    e.id = s.at("id").get<std::string>();
    e.offset = s.at("offset").get<uint64_t>();
    e.bytes = s.at("bytes").get<uint64_t>();
    e.frames = s.at("frames").get<Index>();
    e.joints = s.at("joints").get<Index>();
    e.channels = s.at("channels").get<Index>();
    e.label = s.at("label").get<int>();
    e.body_count = s.value("body_count", 1);
    require(ids.insert(e.id).second, "manifest: duplicate sample id '" + e.id + "'");
    m.samples.push_back(std::move(e));
  }
  return m;
}

namespace {

std::string read_file(const std::string& path, bool binary) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  require(in.good(), "cannot open file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void check_record(const ManifestEntry& e, const std::string& blob) {
  const uint64_t expected = static_cast<uint64_t>(e.frames) * e.joints * e.channels * 4;
  require(e.bytes == expected, "sample '" + e.id + "': manifest declares " +
                                   std::to_string(e.bytes) + " bytes, shape needs " +
                                   std::to_string(expected));
  require(e.offset + 8 <= blob.size(),
          "sample '" + e.id + "': blob truncated before the record header");
  uint64_t stored = 0;
  std::memcpy(&stored, blob.data() + e.offset, 8);
  require(stored == e.bytes, "sample '" + e.id + "': record header says " +
                                 std::to_string(stored) + " bytes, manifest says " +
                                 std::to_string(e.bytes));
  require(e.offset + 8 + e.bytes <= blob.size(),
          "sample '" + e.id + "': blob truncated inside the payload");
}

}  // namespace

Dataset::Dataset(DatasetManifest manifest, std::string blob, SkeletonTopology topology)
    : manifest_(std::move(manifest)), blob_(std::move(blob)), topology_(std::move(topology)) {
  for (const auto& e : manifest_.samples) {
    check_record(e, blob_);
    require(e.joints == topology_.num_joints,
            "sample '" + e.id + "': " + std::to_string(e.joints) +
                " joints do not match topology with " + std::to_string(topology_.num_joints));
  }
}

Dataset Dataset::open(const std::string& manifest_path) {
  DatasetManifest manifest = parse_manifest_json(read_file(manifest_path, false));
  const fs::path dir = fs::path(manifest_path).parent_path();
  SkeletonTopology topo = load_topology((dir / manifest.topology_path).string());
  std::string blob;
  if (!manifest.samples.empty()) blob = read_file((dir / manifest.blob_path).string(), true);
  return Dataset(std::move(manifest), std::move(blob), std::move(topo));
}

SkeletonSequence Dataset::load(Index index) const {
  require(index >= 0 && index < size(), "dataset index out of range");
  const ManifestEntry& e = manifest_.samples[static_cast<size_t>(index)];
  SkeletonSequence seq;
  seq.id = e.id;
  seq.label = e.label;
  seq.body_count = e.body_count;
  seq.coords = Tensor({e.frames, e.joints, e.channels});

  const char* payload = blob_.data() + e.offset + 8;
  const Index per_frame = e.joints * e.channels;
  for (Index t = 0; t < e.frames; ++t) {
    bool bad = false;
    for (Index k = 0; k < per_frame; ++k) {
      float v = 0.0f;
      std::memcpy(&v, payload + (t * per_frame + k) * 4, 4);
      if (!std::isfinite(v)) bad = true;
      seq.coords.array()[t * per_frame + k] = static_cast<Scalar>(v);
    }
    if (bad) {  // invalid frames are zero-filled and flagged
      for (Index k = 0; k < per_frame; ++k) seq.coords.array()[t * per_frame + k] = 0.0;
      ++seq.invalid_frames;
    }
  }
  return seq;
}

void write_dataset(const std::string& manifest_path, DatasetManifest manifest,
                   const std::vector<SkeletonSequence>& samples) {
  const fs::path dir = fs::path(manifest_path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);

  std::string blob;
  manifest.samples.clear();
  for (const auto& seq : samples) {
    ManifestEntry e;
    e.id = seq.id;
    e.frames = seq.frames();
    e.joints = seq.joints();
    e.channels = seq.channels();
    e.label = seq.label;
    e.body_count = seq.body_count;
    e.bytes = static_cast<uint64_t>(seq.coords.numel()) * 4;
    e.offset = blob.size();

    uint64_t len = e.bytes;
    blob.append(reinterpret_cast<const char*>(&len), 8);
    for (Index i = 0; i < seq.coords.numel(); ++i) {
      const float v = static_cast<float>(seq.coords.array()[i]);
      blob.append(reinterpret_cast<const char*>(&v), 4);
    }
    manifest.samples.push_back(std::move(e));
  }

  {
    std::ofstream out(dir / manifest.blob_path, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot write blob for manifest: " + manifest_path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  std::ofstream out(manifest_path, std::ios::trunc);
  require(out.good(), "cannot write manifest: " + manifest_path);
  out << manifest_to_json(manifest) << "\n";
}

// ---- preprocessing ----

SkeletonSequence pad_resize(const SkeletonSequence& seq, Index target_frames) {
  require(target_frames >= 1, "pad_resize: target length must be positive");
  const Index frames = seq.frames();
  if (frames == target_frames) return seq;

  SkeletonSequence out = seq;
  out.coords = Tensor({target_frames, seq.joints(), seq.channels()});
  const Index per_frame = seq.joints() * seq.channels();
  for (Index t = 0; t < target_frames; ++t) {
    const Index src = t % frames;  // cyclic repeat; truncation falls out
    for (Index k = 0; k < per_frame; ++k)
      out.coords.array()[t * per_frame + k] = seq.coords.array()[src * per_frame + k];
  }
  return out;
}

namespace {

// [T, V, C] -> [V, T, C]
Tensor joints_first(const Tensor& coords) {
  const Index frames = coords.extent(0), joints = coords.extent(1), c = coords.extent(2);
  Tensor out({joints, frames, c});
  for (Index t = 0; t < frames; ++t)
    for (Index v = 0; v < joints; ++v)
      for (Index k = 0; k < c; ++k) out(v, t, k) = coords(t, v, k);
  return out;
}

// frame differences along T of a [V, T, C] tensor; the last frame is zero.
Tensor frame_diff(const Tensor& x) {
  const Index joints = x.extent(0), frames = x.extent(1), c = x.extent(2);
  Tensor out({joints, frames, c});
  for (Index v = 0; v < joints; ++v)
    for (Index t = 0; t + 1 < frames; ++t)
      for (Index k = 0; k < c; ++k) out(v, t, k) = x(v, t + 1, k) - x(v, t, k);
  return out;
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  const Index rows = a.numel() / a.extent(-1);
  Shape shape = a.shape();
  shape.back() = a.extent(-1) + b.extent(-1);
  Tensor out(std::move(shape));
  MapMat om = out.matrix(rows, out.extent(-1));
  om.leftCols(a.extent(-1)) = a.matrix(rows, a.extent(-1));
  om.rightCols(b.extent(-1)) = b.matrix(rows, b.extent(-1));
  return out;
}

}  // namespace

Tensor build_input(const SkeletonSequence& seq, const SkeletonTopology& topo, Stream stream,
                   ChannelLayout layout) {
  require(seq.joints() == topo.num_joints, "build_input: sample joints " +
                                               std::to_string(seq.joints()) +
                                               " do not match topology " +
                                               std::to_string(topo.num_joints));
  Tensor bones_tv = compute_bones(seq.coords, topo);
  if (layout == ChannelLayout::xy_conf) {
    // Confidence is not a coordinate: a bone is only as reliable as its
    // weaker endpoint.
    require(seq.channels() == 3, "build_input: xy_conf layout needs 3 channels");
    const std::vector<Index> hops = hop_distances(topo);
    for (auto [i, j] : topo.bones) {
      Index closer = i, farther = j;
      const Index di = hops[static_cast<size_t>(i)], dj = hops[static_cast<size_t>(j)];
      if (dj < di || (di == dj && j < i)) std::swap(closer, farther);
      for (Index t = 0; t < seq.frames(); ++t)
        bones_tv(t, farther, 2) = std::min(seq.coords(t, closer, 2), seq.coords(t, farther, 2));
    }
  }

  Tensor joints_vt = joints_first(seq.coords);
  Tensor bones_vt = joints_first(bones_tv);
  if (stream == Stream::spatial) return concat_last(joints_vt, bones_vt);
  return concat_last(frame_diff(joints_vt), frame_diff(bones_vt));
}

// ---- synthetic benchmark ----

void SynthSpec::validate() const {
  require(joints >= 2, "synth spec: need at least two joints");
  require(frames >= 2, "synth spec: need at least two frames");
  require(classes >= 1, "synth spec: need at least one class");
  require(train_per_class >= 1 && test_per_class >= 0, "synth spec: sample counts invalid");
  require(noise >= 0.0, "synth spec: noise must be non-negative");
  if (!signatures.empty())
    require(static_cast<Index>(signatures.size()) == classes,
            "synth spec: expected one signature per class");
}

SynthSpec parse_synth_spec_json(const std::string& json_text) {
  json j = json::parse(json_text);
  SynthSpec spec;
  spec.joints = j.value("joints", Index{9});
  spec.frames = j.value("frames", Index{32});
  spec.classes = j.value("classes", Index{4});
  spec.train_per_class = j.value("train_per_class", Index{80});
  spec.test_per_class = j.value("test_per_class", Index{20});
  spec.noise = j.value("noise", 0.05);
  spec.seed = j.value("seed", uint64_t{7});
  if (j.contains("signatures")) {
    for (const auto& s : j.at("signatures")) {
      SynthSignature sig;
      sig.joints = s.at("joints").get<std::vector<Index>>();
      sig.frequency = s.at("frequency").get<Scalar>();
      sig.axis = s.value("axis", Index{0});
      sig.amplitude = s.value("amplitude", 1.0);
      spec.signatures.push_back(std::move(sig));
    }
  }
  spec.validate();
  return spec;
}

std::string synth_spec_to_json(const SynthSpec& spec) {
  json j;
  j["joints"] = spec.joints;
  j["frames"] = spec.frames;
  j["classes"] = spec.classes;
  j["train_per_class"] = spec.train_per_class;
  j["test_per_class"] = spec.test_per_class;
  j["noise"] = spec.noise;
  j["seed"] = spec.seed;
  if (!spec.signatures.empty()) {
    j["signatures"] = json::array();
    for (const auto& s : spec.signatures)
      j["signatures"].push_back({{"joints", s.joints},
                                 {"frequency", s.frequency},
                                 {"axis", s.axis},
                                 {"amplitude", s.amplitude}});
  }
  return j.dump(2);
}

std::vector<SynthSignature> resolve_signatures(const SynthSpec& spec) {
  if (!spec.signatures.empty()) {
    for (const auto& s : spec.signatures)
      for (Index j : s.joints)
        require(j >= 0 && j < spec.joints, "synth spec: signature joint out of range");
    return spec.signatures;
  }
  require(spec.joints == 9,
          "synth spec: default signatures exist only for the 9-joint topology; "
          "provide explicit signatures");
  // Non-adjacent pairs of the synth9 tree, so telling classes apart needs
  // information flow past one-hop neighbours. Pairs stay off the high-degree
  // hub joint so a moving joint's energy does not smear over half the graph.
  const std::vector<std::vector<Index>> pairs = {{2, 4}, {6, 7}, {3, 8}, {5, 2}};
  std::vector<SynthSignature> sigs;
  for (Index c = 0; c < spec.classes; ++c) {
    SynthSignature sig;
    sig.joints = pairs[static_cast<size_t>(c % 4)];
    sig.frequency = Scalar(1 + c);
    sig.axis = c % 3;
    sig.amplitude = 1.0;
    sigs.push_back(std::move(sig));
  }
  return sigs;
}

namespace {

std::vector<std::array<Scalar, 3>> rest_pose(Index joints) {
  if (joints == 9) {
    return {{0.0, 0.0, 0.0},  {0.0, 0.5, 0.0},  {0.0, 0.9, 0.0},
            {-0.3, 0.6, 0.0}, {-0.6, 0.3, 0.0}, {0.3, 0.6, 0.0},
            {0.6, 0.3, 0.0},  {-0.2, -0.7, 0.0}, {0.2, -0.7, 0.0}};
  }
  std::vector<std::array<Scalar, 3>> pose(static_cast<size_t>(joints));
  for (Index v = 0; v < joints; ++v) {
    const Scalar angle = 2.0 * std::numbers::pi * Scalar(v) / Scalar(joints);
    pose[static_cast<size_t>(v)] = {std::cos(angle), std::sin(angle), 0.0};
  }
  return pose;
}

// Quantize through float so blob round-trips are lossless.
Scalar q32(Scalar v) { return static_cast<Scalar>(static_cast<float>(v)); }

SkeletonSequence make_sample(const SynthSpec& spec, const SynthSignature& sig,
                             const std::vector<std::array<Scalar, 3>>& pose,
                             const std::string& id, Index label, Rng& rng) {
  SkeletonSequence seq;
  seq.id = id;
  seq.label = static_cast<int>(label);
  seq.coords = Tensor({spec.frames, spec.joints, 3});

  std::uniform_real_distribution<Scalar> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<Scalar> noise_dist(0.0, 1.0);
  const Scalar phase = phase_dist(rng);

  for (Index t = 0; t < spec.frames; ++t) {
    const Scalar wave =
        sig.amplitude *
        std::sin(2.0 * std::numbers::pi * sig.frequency * Scalar(t) / Scalar(spec.frames) +
                 phase);
    for (Index v = 0; v < spec.joints; ++v) {
      for (Index k = 0; k < 3; ++k) {
        Scalar value = pose[static_cast<size_t>(v)][static_cast<size_t>(k)];
        if (k == sig.axis &&
            std::find(sig.joints.begin(), sig.joints.end(), v) != sig.joints.end())
          value += wave;
        if (spec.noise > 0.0) value += spec.noise * noise_dist(rng);
        seq.coords(t, v, k) = q32(value);
      }
    }
  }
  return seq;
}

}  // namespace

SynthOutput synth_generate(const SynthSpec& spec, const std::string& out_dir) {
  spec.validate();
  const std::vector<SynthSignature> sigs = resolve_signatures(spec);
  fs::create_directories(out_dir);

  SkeletonTopology topo = spec.joints == 9 ? synth9_topology() : SkeletonTopology{};
  if (spec.joints != 9) {
    topo.name = "synth-chain";
    topo.num_joints = spec.joints;
    for (Index v = 0; v + 1 < spec.joints; ++v) topo.bones.emplace_back(v, v + 1);
    topo.center = 0;
    topo.validate();
  }

  SynthOutput out;
  out.topology = (fs::path(out_dir) / "topology.json").string();
  {
    std::ofstream f(out.topology, std::ios::trunc);
    require(f.good(), "cannot write topology: " + out.topology);
    f << topology_to_json(topo) << "\n";
  }

  Rng rng(spec.seed);
  const std::vector<std::array<Scalar, 3>> pose = rest_pose(spec.joints);

  auto generate_split = [&](const std::string& split, Index per_class) {
    std::vector<SkeletonSequence> samples;
    Index counter = 0;
    for (Index c = 0; c < spec.classes; ++c) {
      for (Index k = 0; k < per_class; ++k) {
        char id[64];
        std::snprintf(id, sizeof(id), "%s/%04lld", split.c_str(),
                      static_cast<long long>(counter++));
        samples.push_back(
            make_sample(spec, sigs[static_cast<size_t>(c)], pose, id, c, rng));
      }
    }
    DatasetManifest manifest;
    manifest.split = split;
    manifest.topology_path = "topology.json";
    manifest.blob_path = split + ".blob";
    manifest.layout = ChannelLayout::xyz;
    for (Index c = 0; c < spec.classes; ++c)
      manifest.classes.push_back("class" + std::to_string(c));
    const std::string manifest_path =
        (fs::path(out_dir) / (split + "_manifest.json")).string();
    write_dataset(manifest_path, std::move(manifest), samples);
    return manifest_path;
  };

  out.train_manifest = generate_split("train", spec.train_per_class);
  out.test_manifest = generate_split("test", spec.test_per_class);
  return out;
}

}  // namespace bagcn
