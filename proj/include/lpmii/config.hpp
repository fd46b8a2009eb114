#pragma once
//
// TOML configuration files.
//
// A generator spec holds the SynthSpec keys at top level with [blobs],
// [spurious] and [[domains]] tables. A training config holds the TrainConfig
// keys at top level with an [optimizer] table, and may add a [lodo] table
// (methods, seeds, fluid_classes, jobs). Unknown keys are errors.
//

#include "lpmii/data.hpp"
#include "lpmii/harness.hpp"
#include "lpmii/trainer.hpp"

#include <filesystem>
#include <string>

namespace lpmii::config {

data::SynthSpec parse_synth_spec(const std::string& toml_text, const std::string& source = "<string>");
data::SynthSpec load_synth_spec(const std::filesystem::path& path);
std::string to_toml(const data::SynthSpec& spec);

train::TrainConfig parse_train_config(const std::string& toml_text, const std::string& source = "<string>");
train::TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_toml(const train::TrainConfig& config);

/// Training keys plus the optional [lodo] table.
harness::LodoConfig parse_lodo_config(const std::string& toml_text, const std::string& source = "<string>");
harness::LodoConfig load_lodo_config(const std::filesystem::path& path);
std::string to_toml(const harness::LodoConfig& config);

}  // namespace lpmii::config
