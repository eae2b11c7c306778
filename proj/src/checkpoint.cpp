#include "avit/checkpoint.hpp"

#include "avit/errors.hpp"
#include "avit/hashing.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace avit::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'V', 'I', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_str(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& b, std::size_t end) : b_(b), end_(end) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put_str(out, c.tag);
  put_str(out, c.config.dump());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, m] : c.tensors) {
    put_str(out, name);
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  out += sha256_hex(out);
  return out;
}

Checkpoint deserialize(const std::string& bytes, const std::string& expected_tag) {
  if (bytes.size() < 4 + 64 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an AVIT checkpoint");
  const std::size_t body = bytes.size() - 64;
  if (sha256_hex(std::string_view(bytes.data(), body)) != bytes.substr(body)) {
    throw FormatError("checkpoint hash mismatch");
  }
  Reader r(bytes, body);
  char magic[4];
  r.raw(magic, 4);
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.tag = r.str();
  if (!expected_tag.empty() && c.tag != expected_tag) {
    throw FormatError("checkpoint tag '" + c.tag + "' where '" + expected_tag + "' was expected");
  }
  try {
    c.config = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    if (r.get<std::uint8_t>() != kDtypeF64) throw FormatError("unsupported tensor dtype");
    if (r.get<std::uint32_t>() != 2) throw FormatError("only 2-D tensors are supported");
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows > (1u << 28) || cols > (1u << 28)) throw FormatError("tensor too large");
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.raw(m.data(), static_cast<std::size_t>(rows * cols) * sizeof(double));
    c.tensors.emplace(name, std::move(m));
  }
  if (!r.done()) throw FormatError("trailing bytes in checkpoint");
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void save(const std::filesystem::path& path, const Checkpoint& c) { write_file(path, serialize(c)); }

Checkpoint load(const std::filesystem::path& path, const std::string& expected_tag) {
  return deserialize(read_file(path), expected_tag);
}

std::string file_hash(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

void put_params(Checkpoint& c, const ParamSet& params) {
  for (const auto& name : params.names()) c.tensors[name] = params.get(name).value();
}

void get_params(const Checkpoint& c, ParamSet& params) {
  for (const auto& name : params.names()) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
    const auto& cur = params.get(name).value();
    if (it->second.rows() != cur.rows() || it->second.cols() != cur.cols()) {
      throw FormatError("tensor '" + name + "' has an incompatible shape");
    }
    params.assign(name, it->second);
  }
}

}  // namespace avit::ckpt
