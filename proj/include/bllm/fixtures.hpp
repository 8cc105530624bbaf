#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "bllm/bev.hpp"
#include "bllm/scene.hpp"

namespace bllm {

// Deterministic synthetic corpus in the native scene/point-cloud formats.
struct FixtureOptions {
  std::size_t train = 8;
  std::size_t test = 2;
  std::uint64_t seed = 7;
};

// Frame `index` of the corpus for `seed`; the visibility condition cycles
// through all five conditions so any five consecutive frames cover them.
SceneRecord synthetic_scene(std::uint64_t seed, std::size_t index);
PointCloud synthetic_point_cloud(const SceneRecord& scene, std::uint64_t seed);

struct FixtureSet {
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> test;
};

FixtureSet synthetic_fixtures(const FixtureOptions& opts);

// Writes manifest.json, <frame_id>.json and clouds/<frame_id>.bin under dir.
FixtureSet write_fixtures(const std::filesystem::path& dir, const FixtureOptions& opts);

// Resolves scene.point_cloud relative to the corpus root; empty cloud if unset.
PointCloud load_scene_cloud(const std::filesystem::path& root, const SceneRecord& scene);

}  // namespace bllm
