#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tfformer/data.hpp"
#include "tfformer/model.hpp"
#include "tfformer/training.hpp"

namespace tfformer::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kDataError = 2, kVerificationFailure = 3 };

/// Everything a subcommand needs, resolved from defaults, then the config
/// file, then command-line overrides.
struct RunConfig {
  std::uint64_t seed = 7;
  std::filesystem::path out = "out";
  ModelConfig model;
  TrainConfig train;
  CurationOptions curation;
  std::string corpus;
  std::string val_corpus;
  bool synthetic = false;
  std::size_t synthetic_count = 1;
  std::size_t synthetic_size = 0;  // 0 means the training patch size
  bool model_explicit = false;     // any model.* key was set

  /// Applies one key; throws ConfigError naming the key and its allowed range.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;
  std::string to_text() const;
  static std::vector<std::string> keys();
};

/// Reads `key = value` lines ('#' starts a comment) into `cfg`.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Runs the command line `args` (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tfformer::cli
