#include "liaf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace liaf {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'I', 'A', 'F', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(std::vector<double>& out, std::size_t n) {
    need(n * sizeof(double));
    out.resize(n);
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw std::runtime_error("checkpoint: missing array '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, Checkpoint::kVersion);
  const std::string meta = ckpt.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    std::int64_t count = 1;
    for (auto d : a.shape) count *= d;
    if (count != static_cast<std::int64_t>(a.data.size()))
      throw std::invalid_argument("checkpoint: array '" + a.name + "' shape does not match data size");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put<std::int64_t>(out, d);
    out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes));
  if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
    throw std::runtime_error("'" + path + "' is not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " not supported");
  Checkpoint ckpt;
  ckpt.meta = nlohmann::json::parse(r.str(r.get<std::uint64_t>()));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::int64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      a.shape.push_back(r.get<std::int64_t>());
      if (a.shape.back() < 0) throw std::runtime_error("checkpoint: negative dimension");
      n *= a.shape.back();
    }
    r.doubles(a.data, static_cast<std::size_t>(n));
    ckpt.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

}  // namespace liaf
