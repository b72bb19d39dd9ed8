#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "mpcseg/pipeline.hpp"
#include "mpcseg/pointcloud.hpp"

namespace mpcseg {

/// Run file with sections scene, sampling, network, loss and train. Every
/// section and key is optional; missing keys keep their defaults.
struct RunConfig {
  std::optional<SceneSpec> scene;
  ExperimentConfig experiment;
};

/// Throws ValidationError on unknown keys, wrong types or invalid values.
SceneSpec parse_scene_spec(const std::string& json_text);
RunConfig parse_run_config(const std::string& json_text);

std::string scene_spec_json(const SceneSpec& spec);
std::string run_config_json(const RunConfig& config);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

RunConfig load_run_config(const std::filesystem::path& path);
SceneSpec load_scene_spec(const std::filesystem::path& path);

}  // namespace mpcseg
