#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tfformer/model.hpp"

namespace tfformer {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One named tensor as stored on disk.
struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Binary container layout (all integers little-endian):
///   magic[4]
///   u64 header length, header bytes (key = value text)
///   u64 record count
///   per record: u32 name length, name bytes, u32 rank, u64 extents[rank],
///               f64 values[product(extents)]
struct Container {
  std::string magic;
  std::string header;
  std::vector<TensorRecord> records;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path, const std::string& expected_magic);

inline constexpr const char* kCheckpointMagic = "TFF1";
inline constexpr int kCheckpointVersion = 1;

/// Saves parameters and batch-norm buffers with the config header.
void save_checkpoint(const TfFormerModel& model, const std::filesystem::path& path);
TfFormerModel load_checkpoint(const std::filesystem::path& path);
/// Refuses a checkpoint whose config differs from `expected`, listing each field.
TfFormerModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

/// Field-by-field differences, one "key: a -> b" line each; empty when equal.
std::string config_diff(const ModelConfig& a, const ModelConfig& b);

}  // namespace tfformer
