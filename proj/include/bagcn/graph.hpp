#pragma once

#include "bagcn/tensor.hpp"

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace bagcn {

/// Undirected skeleton: joints, bones, and the designated center joint used
/// for the spatial-configuration partitioning.
struct SkeletonTopology {
  std::string name;
  Index num_joints = 0;
  std::vector<std::pair<Index, Index>> bones;
  Index center = 0;

  void validate() const;  // indices, duplicates, self-loops, connectivity
};

SkeletonTopology load_topology(const std::string& path);
SkeletonTopology parse_topology_json(const std::string& json_text);
std::string topology_to_json(const SkeletonTopology& topo);

/// Shipped presets.
SkeletonTopology ntu25_topology();
SkeletonTopology kinetics18_topology();
SkeletonTopology synth9_topology();

/// Breadth-first hop count from the center joint, one entry per joint.
std::vector<Index> hop_distances(const SkeletonTopology& topo);

enum class Subset { root = 0, closer = 1, far = 2 };
inline constexpr std::array<const char*, 3> kSubsetNames = {"root", "closer", "far"};

/// The six per-subset adjacency matrices of the paired directed graphs.
/// Convention: A[receiver][sender] = 1. Focus edges run from center-proximal
/// joints outward; diffusion edges run the opposite way. Root subsets are the
/// identity; focus non-root edges live in "closer", diffusion non-root edges
/// in "far" (sender position relative to the receiver).
struct PartitionedAdjacency {
  Index num_joints = 0;
  std::array<MatrixRM, 3> focus;      // raw {0,1} matrices per subset
  std::array<MatrixRM, 3> diffusion;
  std::array<MatrixRM, 3> focus_norm;      // degree-inverse normalized
  std::array<MatrixRM, 3> diffusion_norm;
};

PartitionedAdjacency build_directed_graphs(const SkeletonTopology& topo);

/// Row-normalize a raw {0,1} subset matrix: each row is divided by its sum
/// plus alpha; all-zero rows stay zero.
MatrixRM normalize_adjacency(const MatrixRM& raw, Scalar alpha = 1e-4);

/// Per-frame bone vectors from per-frame joint coordinates.
/// coords: [T, V, C]; result: [T, V, C] where each joint's row carries the
/// vector of the bone arriving from its center-proximal neighbour (farther
/// coordinates minus closer coordinates); the center joint stays zero. When
/// several bones share a far joint their vectors are summed.
Tensor compute_bones(const Tensor& coords, const SkeletonTopology& topo);

}  // namespace bagcn
