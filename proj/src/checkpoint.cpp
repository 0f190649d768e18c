#include "tfformer/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>

namespace tfformer {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  std::string str(std::uint64_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::uint64_t read_le(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  void need(std::uint64_t n) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(path_.string() + ": file is truncated or corrupt (needed " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ")");
    }
  }

  const std::string& bytes_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

std::map<std::string, std::string> header_fields(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto key = line.substr(0, eq);
    auto value = line.substr(eq + 1);
    const auto strip = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
    };
    strip(key);
    strip(value);
    out[key] = value;
  }
  return out;
}

}  // namespace

void write_container(const std::filesystem::path& path, const Container& c) {
  if (c.magic.size() != 4) throw CheckpointError("container magic must be 4 bytes");
  std::string out = c.magic;
  put_u64(out, c.header.size());
  out += c.header;
  put_u64(out, c.records.size());
  for (const auto& r : c.records) {
    if (numel(r.shape) != r.values.size()) throw CheckpointError("record " + r.name + ": shape/value count mismatch");
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) put_u64(out, e);
    for (double v : r.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path, const std::string& expected_magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);
  Container c;
  c.magic = r.str(4);
  if (c.magic != expected_magic) {
    throw CheckpointError(path.string() + ": bad magic '" + c.magic + "', expected '" + expected_magic + "'");
  }
  c.header = r.str(r.u64());
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError(path.string() + ": record " + rec.name + " has implausible rank");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t e = r.u64();
      if (e == 0) throw CheckpointError(path.string() + ": record " + rec.name + " has a zero extent");
      rec.shape.push_back(e);
      n *= e;
    }
    if (n > r.remaining() / 8) throw CheckpointError(path.string() + ": file is truncated or corrupt in record " + rec.name);
    rec.values.resize(n);
    for (auto& v : rec.values) v = r.f64();
    c.records.push_back(std::move(rec));
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes after last record");
  return c;
}

std::string config_diff(const ModelConfig& a, const ModelConfig& b) {
  const auto fa = header_fields(a.to_text());
  const auto fb = header_fields(b.to_text());
  std::string out;
  for (const auto& [k, v] : fa) {
    const auto it = fb.find(k);
    if (it == fb.end() || it->second != v) out += k + ": " + v + " -> " + (it == fb.end() ? "<missing>" : it->second) + "\n";
  }
  return out;
}

void save_checkpoint(const TfFormerModel& model, const std::filesystem::path& path) {
  Container c;
  c.magic = kCheckpointMagic;
  c.header = "format_version = " + std::to_string(kCheckpointVersion) + "\n" + model.config().to_text();
  for (const auto* group : {&model.parameters(), &model.buffers()}) {
    for (const auto& p : *group) {
      c.records.push_back({p.name, p.value.shape(), std::vector<double>(p.value.data().begin(), p.value.data().end())});
    }
  }
  write_container(path, c);
}

namespace {

TfFormerModel load_impl(const std::filesystem::path& path, const ModelConfig* expected) {
  const Container c = read_container(path, kCheckpointMagic);
  auto fields = header_fields(c.header);
  const auto version = fields.find("format_version");
  if (version == fields.end()) throw CheckpointError(path.string() + ": missing field format_version");
  if (version->second != std::to_string(kCheckpointVersion)) {
    throw CheckpointError(path.string() + ": unsupported format_version " + version->second + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig cfg;
  for (const auto& [k, v] : fields) {
    if (k == "format_version") continue;
    try {
      if (!cfg.set(k, v)) throw CheckpointError(path.string() + ": unknown config field " + k);
    } catch (const ConfigError& e) {
      throw CheckpointError(path.string() + ": invalid config field " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": invalid config: " + e.what());
  }
  if (expected && !(cfg == *expected)) {
    throw CheckpointError(path.string() + ": checkpoint config differs from the requested config:\n" +
                          config_diff(cfg, *expected));
  }

  TfFormerModel model(cfg, 0);
  std::map<std::string, Tensor> slots;
  for (const auto* group : {&model.parameters(), &model.buffers()}) {
    for (const auto& p : *group) slots.emplace(p.name, p.value);
  }
  std::map<std::string, bool> seen;
  for (const auto& rec : c.records) {
    const auto it = slots.find(rec.name);
    if (it == slots.end()) throw CheckpointError(path.string() + ": unexpected tensor " + rec.name);
    if (seen[rec.name]) throw CheckpointError(path.string() + ": duplicate tensor " + rec.name);
    seen[rec.name] = true;
    Tensor t = it->second;
    if (t.shape() != rec.shape) {
      throw CheckpointError(path.string() + ": tensor " + rec.name + " has shape " + shape_str(rec.shape) +
                            ", model expects " + shape_str(t.shape()));
    }
    std::copy(rec.values.begin(), rec.values.end(), t.mutable_data().begin());
  }
  for (const auto& [name, t] : slots) {
    if (!seen.count(name)) throw CheckpointError(path.string() + ": missing tensor " + name);
  }
  return model;
}

}  // namespace

TfFormerModel load_checkpoint(const std::filesystem::path& path) { return load_impl(path, nullptr); }

TfFormerModel load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  return load_impl(path, &expected);
}

}  // namespace tfformer
