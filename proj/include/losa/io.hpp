#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>

#include "losa/config.hpp"
#include "losa/tensor.hpp"

namespace losa {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor blob: "LSTN" | u32 rank | u64 element count | rank x u64 dims | float32 data, all little-endian.
void write_tensor(std::ostream& out, const Tensor<float>& t);
Tensor<float> read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> load_tensor(const std::filesystem::path& path);

/// Writes to a sibling temporary and renames, so a failed write leaves no partial file. The parent
/// directory must exist.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

/// Checkpoint: "LSCK" | u64 meta length | meta JSON | u64 count | count x (u64 name length | name | tensor blob).
struct Checkpoint {
  Json meta;
  std::map<std::string, Tensor<float>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace losa
