#include "vrwkv/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace vrwkv {

namespace {

constexpr const char* kMagic = "vrwkv-checkpoint 1";

bool bare_word(const std::string& s) {
  return !s.empty() && std::none_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string shape_token(const Shape& shape) {
  if (shape.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "x" : "") + std::to_string(shape[i]);
  return out;
}

Shape parse_shape(const std::string& token) {
  Shape shape;
  if (token == "-") return shape;
  std::stringstream ss(token);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      shape.push_back(std::stoull(part, &used));
      if (used != part.size()) throw IoError("");
    } catch (const std::exception&) {
      throw IoError("checkpoint: bad shape '" + token + "'");
    }
  }
  return shape;
}

struct Entry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t bytes = 0;
};

}  // namespace

void Checkpoint::add(std::string name, Tensor t) {
  if (!bare_word(name)) throw ConfigError("checkpoint: tensor name '" + name + "' must be one word");
  if (contains(name)) throw ConfigError("checkpoint: duplicate tensor '" + name + "'");
  tensors.emplace_back(std::move(name), std::move(t));
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw IoError("checkpoint: no tensor named '" + name + "'");
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint: no metadata key '" + key + "'");
  return it->second;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out << kMagic << '\n';
  for (const auto& [key, value] : ckpt.meta) {
    if (!bare_word(key) || value.find('\n') != std::string::npos) {
      throw ConfigError("checkpoint: bad metadata entry '" + key + "'");
    }
    out << "meta " << key << ' ' << value << '\n';
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const std::size_t bytes = serialized_size(t);
    out << "tensor " << name << ' ' << shape_token(t.shape()) << ' ' << offset << ' ' << bytes << '\n';
    offset += bytes;
  }
  out << "end\n";
  for (const auto& [name, t] : ckpt.tensors) write_tensor(out, t);
  if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw IoError("checkpoint: missing header");
  Checkpoint ckpt;
  std::vector<Entry> entries;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream fields(line);
    std::string kind;
    fields >> kind;
    if (kind == "meta") {
      std::string key;
      fields >> key;
      std::string value;
      std::getline(fields >> std::ws, value);
      ckpt.meta[key] = value;
    } else if (kind == "tensor") {
      Entry e;
      std::string shape;
      if (!(fields >> e.name >> shape >> e.offset >> e.bytes)) throw IoError("checkpoint: bad tensor line: " + line);
      e.shape = parse_shape(shape);
      entries.push_back(std::move(e));
    } else {
      throw IoError("checkpoint: unexpected header line: " + line);
    }
  }
  if (!ended) throw IoError("checkpoint: header not terminated");

  std::size_t position = 0;
  for (const auto& e : entries) {
    if (e.offset != position) throw IoError("checkpoint: tensor '" + e.name + "' is not at its recorded offset");
    Tensor t = read_tensor(in);
    if (t.shape() != e.shape || serialized_size(t) != e.bytes) {
      throw IoError("checkpoint: tensor '" + e.name + "' disagrees with the manifest");
    }
    position += e.bytes;
    ckpt.tensors.emplace_back(e.name, std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace vrwkv
