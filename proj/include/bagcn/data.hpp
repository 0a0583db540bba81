#pragma once

#include "bagcn/graph.hpp"
#include "bagcn/init.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bagcn {

enum class Stream { spatial, motion };
Stream parse_stream(const std::string& s);
const char* to_string(Stream s);

enum class ChannelLayout { xyz, xy_conf };
ChannelLayout parse_channel_layout(const std::string& s);
const char* to_string(ChannelLayout layout);

/// One sample: per-frame, per-joint raw channel vectors plus its label.
/// Frames containing non-finite values are zero-filled during decoding and
/// counted in `invalid_frames`.
struct SkeletonSequence {
  std::string id;
  Tensor coords;  // [T, V, C_raw]
  int label = 0;
  int body_count = 1;
  Index invalid_frames = 0;

  Index frames() const { return coords.extent(0); }
  Index joints() const { return coords.extent(1); }
  Index channels() const { return coords.extent(2); }
};

struct ManifestEntry {
  std::string id;
  uint64_t offset = 0;  // byte offset of the sample record in the blob
  uint64_t bytes = 0;   // payload length, excluding the record's length header
  Index frames = 0;
  Index joints = 0;
  Index channels = 0;
  int label = 0;
  int body_count = 1;
};

/// Split-level index over one binary blob of float32 sample payloads.
struct DatasetManifest {
  std::string split;  // "train" or "test"
  std::string topology_path;
  std::string blob_path;  // relative to the manifest file
  ChannelLayout layout = ChannelLayout::xyz;
  std::vector<std::string> classes;
  std::vector<ManifestEntry> samples;
};

/// Lazily decoding reader; the blob is held in memory, samples decode on
/// access. Iteration order is the manifest order.
class Dataset {
 public:
  Dataset(DatasetManifest manifest, std::string blob, SkeletonTopology topology);

  static Dataset open(const std::string& manifest_path);

  Index size() const { return static_cast<Index>(manifest_.samples.size()); }
  SkeletonSequence load(Index index) const;
  const DatasetManifest& manifest() const { return manifest_; }
  const SkeletonTopology& topology() const { return topology_; }
  Index num_classes() const { return static_cast<Index>(manifest_.classes.size()); }

 private:
  DatasetManifest manifest_;
  std::string blob_;
  SkeletonTopology topology_;
};

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest parse_manifest_json(const std::string& json_text);

/// Writes manifest + blob; blob records are [u64 LE payload length][float32
/// LE payload, row-major (T, V, C_raw)].
void write_dataset(const std::string& manifest_path, DatasetManifest manifest,
                   const std::vector<SkeletonSequence>& samples);

/// Cyclic-repeat shorter sequences to target_T; truncate longer ones.
SkeletonSequence pad_resize(const SkeletonSequence& seq, Index target_frames);

/// Model input for one sample: joints ⊕ bones (spatial) or their frame
/// differences (motion), laid out [V, T, 2 * C_raw].
Tensor build_input(const SkeletonSequence& seq, const SkeletonTopology& topo, Stream stream,
                   ChannelLayout layout = ChannelLayout::xyz);

/// Synthetic benchmark description. Classes move designated non-adjacent
/// joint pairs with class-specific sinusoidal signatures; per-sample phase is
/// random, so class identity lives in (joints, frequency, axis).
struct SynthSignature {
  std::vector<Index> joints;
  Scalar frequency = 1.0;  // cycles per sequence
  Index axis = 0;
  Scalar amplitude = 1.0;
};

struct SynthSpec {
  Index joints = 9;
  Index frames = 32;
  Index classes = 4;
  Index train_per_class = 80;
  Index test_per_class = 20;
  Scalar noise = 0.05;
  uint64_t seed = 7;
  std::vector<SynthSignature> signatures;  // defaulted per class when empty

  void validate() const;
};

SynthSpec parse_synth_spec_json(const std::string& json_text);
std::string synth_spec_to_json(const SynthSpec& spec);

/// The per-class signatures actually used (fills defaults when unset).
std::vector<SynthSignature> resolve_signatures(const SynthSpec& spec);

struct SynthOutput {
  std::string train_manifest;
  std::string test_manifest;
  std::string topology;
};

/// Deterministically generate train/test manifests + blobs under out_dir.
SynthOutput synth_generate(const SynthSpec& spec, const std::string& out_dir);

}  // namespace bagcn
