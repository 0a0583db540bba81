#include "bagcn/graph.hpp"

#include <nlohmann/json.hpp>

#include <deque>
#include <fstream>
#include <set>
#include <sstream>

namespace bagcn {

using nlohmann::json;

void SkeletonTopology::validate() const {
  require(num_joints >= 1, "topology: need at least one joint");
  require(center >= 0 && center < num_joints,
          "topology: center joint " + std::to_string(center) + " outside [0, " +
              std::to_string(num_joints) + ")");
  std::set<std::pair<Index, Index>> seen;
  for (auto [i, j] : bones) {
    require(i >= 0 && i < num_joints && j >= 0 && j < num_joints,
            "topology: bone (" + std::to_string(i) + ", " + std::to_string(j) +
                ") references a missing joint");
    require(i != j, "topology: self-loop bone at joint " + std::to_string(i));
    auto key = std::minmax(i, j);
    require(seen.insert(key).second, "topology: duplicate bone (" + std::to_string(key.first) +
                                         ", " + std::to_string(key.second) + ")");
  }
  // connectivity via the hop search
  hop_distances(*this);
}

SkeletonTopology parse_topology_json(const std::string& json_text) {
  json j = json::parse(json_text);
  SkeletonTopology topo;
  topo.name = j.value("name", "");
  topo.num_joints = j.at("num_joints").get<Index>();
  topo.center = j.at("center").get<Index>();
  for (const auto& bone : j.at("bones")) {
    require(bone.is_array() && bone.size() == 2, "topology: bones must be [i, j] pairs");
    topo.bones.emplace_back(bone[0].get<Index>(), bone[1].get<Index>());
  }
  topo.validate();
  return topo;
}

SkeletonTopology load_topology(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open topology file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_topology_json(buf.str());
}

std::string topology_to_json(const SkeletonTopology& topo) {
  json j;
  if (!topo.name.empty()) j["name"] = topo.name;
  j["num_joints"] = topo.num_joints;
  j["center"] = topo.center;
  j["bones"] = json::array();
  for (auto [i, jt] : topo.bones) j["bones"].push_back({i, jt});
  return j.dump(2);
}

namespace {

SkeletonTopology make_topology(std::string name, Index joints,
                               std::vector<std::pair<Index, Index>> bones, Index center) {
  SkeletonTopology topo{std::move(name), joints, std::move(bones), center};
  topo.validate();
  return topo;
}

}  // namespace

SkeletonTopology ntu25_topology() {
  // Kinect v2 joint tree, 0-based; center = spine-shoulder joint.
  return make_topology(
      "ntu25", 25,
      {{0, 1},   {1, 20},  {2, 20},  {3, 2},   {4, 20},  {5, 4},   {6, 5},   {7, 6},
       {8, 20},  {9, 8},   {10, 9},  {11, 10}, {12, 0},  {13, 12}, {14, 13}, {15, 14},
       {16, 0},  {17, 16}, {18, 17}, {19, 18}, {21, 22}, {22, 7},  {23, 24}, {24, 11}},
      20);
}

SkeletonTopology kinetics18_topology() {
  // OpenPose 18-joint layout; center = neck.
  return make_topology("kinetics18", 18,
                       {{4, 3},   {3, 2},   {7, 6},  {6, 5},  {13, 12}, {12, 11},
                        {10, 9},  {9, 8},   {11, 5}, {8, 2},  {5, 1},   {2, 1},
                        {0, 1},   {15, 0},  {14, 0}, {17, 15}, {16, 14}},
                       1);
}

SkeletonTopology synth9_topology() {
  // Nine-joint stick figure used by the synthetic benchmark.
  return make_topology(
      "synth9", 9, {{0, 1}, {1, 2}, {1, 3}, {3, 4}, {1, 5}, {5, 6}, {0, 7}, {0, 8}}, 0);
}

std::vector<Index> hop_distances(const SkeletonTopology& topo) {
  std::vector<std::vector<Index>> neighbours(static_cast<size_t>(topo.num_joints));
  for (auto [i, j] : topo.bones) {
    neighbours[static_cast<size_t>(i)].push_back(j);
    neighbours[static_cast<size_t>(j)].push_back(i);
  }
  std::vector<Index> dist(static_cast<size_t>(topo.num_joints), -1);
  std::deque<Index> queue{topo.center};
  dist[static_cast<size_t>(topo.center)] = 0;
  while (!queue.empty()) {
    Index v = queue.front();
    queue.pop_front();
    for (Index u : neighbours[static_cast<size_t>(v)]) {
      if (dist[static_cast<size_t>(u)] >= 0) continue;
      dist[static_cast<size_t>(u)] = dist[static_cast<size_t>(v)] + 1;
      queue.push_back(u);
    }
  }
  for (Index v = 0; v < topo.num_joints; ++v)
    require(dist[static_cast<size_t>(v)] >= 0,
            "topology: joint " + std::to_string(v) + " is not connected to the center");
  return dist;
}

namespace {

// The bone end nearer the center sends in the focus graph; ties by hop count
// break toward the lower joint index.
std::pair<Index, Index> orient_bone(std::pair<Index, Index> bone,
                                    const std::vector<Index>& hops) {
  auto [i, j] = bone;
  const Index di = hops[static_cast<size_t>(i)];
  const Index dj = hops[static_cast<size_t>(j)];
  if (di < dj || (di == dj && i < j)) return {i, j};  // (closer, farther)
  return {j, i};
}

}  // namespace

PartitionedAdjacency build_directed_graphs(const SkeletonTopology& topo) {
  const std::vector<Index> hops = hop_distances(topo);
  const Index v = topo.num_joints;

  PartitionedAdjacency adj;
  adj.num_joints = v;
  for (auto* side : {&adj.focus, &adj.diffusion})
    for (auto& m : *side) m = MatrixRM::Zero(v, v);
  adj.focus[size_t(Subset::root)] = MatrixRM::Identity(v, v);
  adj.diffusion[size_t(Subset::root)] = MatrixRM::Identity(v, v);

  for (auto bone : topo.bones) {
    auto [closer, farther] = orient_bone(bone, hops);
    // focus: closer -> farther, so the receiver row is the farther joint and
    // the sender sits closer to the center ("closer" subset).
    adj.focus[size_t(Subset::closer)](farther, closer) = 1.0;
    // diffusion: farther -> closer; the sender is farther out ("far" subset).
    adj.diffusion[size_t(Subset::far)](closer, farther) = 1.0;
  }

  for (size_t s = 0; s < 3; ++s) {
    adj.focus_norm[s] = normalize_adjacency(adj.focus[s]);
    adj.diffusion_norm[s] = normalize_adjacency(adj.diffusion[s]);
  }
  return adj;
}

MatrixRM normalize_adjacency(const MatrixRM& raw, Scalar alpha) {
  MatrixRM out = raw;
  for (Index r = 0; r < raw.rows(); ++r) {
    const Scalar degree = raw.row(r).sum();
    if (degree == 0.0) continue;  // no incoming messages
    out.row(r) /= degree + alpha;
  }
  return out;
}

Tensor compute_bones(const Tensor& coords, const SkeletonTopology& topo) {
  require(coords.rank() == 3, "compute_bones: coords must be [T, V, C]");
  const Index frames = coords.extent(0);
  const Index v = coords.extent(1);
  const Index c = coords.extent(2);
  require(v == topo.num_joints, "compute_bones: coords joints " + std::to_string(v) +
                                    " do not match topology " +
                                    std::to_string(topo.num_joints));
  const std::vector<Index> hops = hop_distances(topo);

  Tensor bones({frames, v, c});
  for (auto bone : topo.bones) {
    auto [closer, farther] = orient_bone(bone, hops);
    for (Index t = 0; t < frames; ++t)
      for (Index k = 0; k < c; ++k)
        bones(t, farther, k) += coords(t, farther, k) - coords(t, closer, k);
  }
  return bones;
}

}  // namespace bagcn
