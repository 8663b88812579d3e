#include "svqa/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace svqa {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(source_ + ": truncated checkpoint");
  }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(std::string name, Array value) {
  for (auto& [n, v] : records_) {
    if (n == name) {
      v = std::move(value);
      return;
    }
  }
  records_.emplace_back(std::move(name), std::move(value));
}

bool Checkpoint::contains(std::string_view name) const {
  for (const auto& [n, v] : records_) {
    if (n == name) return true;
  }
  return false;
}

const Array& Checkpoint::get(std::string_view name) const {
  for (const auto& [n, v] : records_) {
    if (n == name) return v;
  }
  throw CheckpointError("checkpoint has no record named '" + std::string(name) + "'");
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::string out = "SVQA";
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(records_.size()));
  for (const auto& [name, value] : records_) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (auto e : value.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : value.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());
  if (r.str(4) != "SVQA") throw CheckpointError(path.string() + ": bad magic, not an SVQA checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw CheckpointError(path.string() + ": unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    const auto n = static_cast<std::size_t>(shape_size(shape));
    r.need(n * 4);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f32();
    ck.records_.emplace_back(std::move(name), Array(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes after last record");
  return ck;
}

void Checkpoint::put_params(const ParameterStore& store, std::string_view prefix, bool with_optimizer) {
  for (const Parameter* p : store.all()) {
    if (!p->name.starts_with(prefix)) continue;
    put(p->name, p->value);
    if (with_optimizer) {
      put(p->name + "@m", p->adam_m);
      put(p->name + "@v", p->adam_v);
      put_scalar(p->name + "@step", static_cast<double>(p->step));
    }
  }
}

void Checkpoint::load_params(ParameterStore& store, std::string_view prefix) const {
  for (Parameter* p : store.with_prefix(prefix)) {
    const Array& v = get(p->name);
    if (v.shape() != p->value.shape()) {
      throw CheckpointError("parameter '" + p->name + "' has shape " + shape_str(v.shape()) + ", model expects " +
                            shape_str(p->value.shape()));
    }
    p->value = v;
    if (contains(p->name + "@m")) {
      p->adam_m = get(p->name + "@m");
      p->adam_v = get(p->name + "@v");
      p->step = static_cast<std::int64_t>(get_scalar(p->name + "@step"));
    }
  }
}

}  // namespace svqa
