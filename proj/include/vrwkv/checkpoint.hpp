#pragma once

#include "vrwkv/tensor.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace vrwkv {

/// Named tensors plus string metadata.
///
/// On disk: a text header
///
///   vrwkv-checkpoint 1
///   meta <key> <value>
///   tensor <name> <shape> <offset> <bytes>
///   end
///
/// followed by the tensors in the binary tensor format. Offsets count from
/// the first byte after the `end` line. Shapes print as `2x3` (`-` for rank 0).
/// Names and keys may not contain whitespace; values run to end of line.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, Tensor t);
  bool contains(const std::string& name) const;
  /// Throws IoError when `name` is missing.
  const Tensor& at(const std::string& name) const;
  const std::string& meta_at(const std::string& key) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vrwkv
