#include "posewarp/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace posewarp {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'P', 'G', 'W', '1'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* out, std::size_t n) {
    if (data_.size() - pos_ < n) throw TruncatedCheckpointError("checkpoint " + path_ + " is truncated");
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::vector<char> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.put<std::uint32_t>(ckpt.version);
  w.put<std::uint64_t>(ckpt.iteration);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name);
    if (t.rank() > 0xFF) throw CheckpointError("tensor rank too large: " + name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.bytes(t.raw(), t.numel() * sizeof(float));
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointIoError("cannot open " + tmp.string() + " for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw CheckpointIoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointIoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointIoError("cannot open checkpoint " + path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw CheckpointIoError("failed reading checkpoint " + path.string());
  Reader r(std::move(data), path.string());

  std::array<char, 4> magic{};
  try {
    r.bytes(magic.data(), magic.size());
  } catch (const TruncatedCheckpointError&) {
    throw BadMagicError("bad magic in " + path.string() + ": file too short");
  }
  if (magic != kMagic) throw BadMagicError("bad magic in " + path.string());
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint " + path.string() + " has version " + std::to_string(ckpt.version) +
                               ", expected " + std::to_string(kCheckpointVersion));
  }
  ckpt.iteration = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint16_t>(), '\0');
    r.bytes(name.data(), name.size());
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    std::vector<float> values(shape_numel(shape));
    r.bytes(values.data(), values.size() * sizeof(float));
    ckpt.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after tensor table in " + path.string());
  return ckpt;
}

void put_params(Checkpoint& ckpt, const NetworkParams& params) {
  const std::vector<float> arch = encode_arch(params.arch);
  ckpt.tensors[kArchTensor] = Tensor({static_cast<int>(arch.size())}, arch);
  for (const auto& [name, t] : params.tensors) ckpt.tensors[name] = t.detach();
}

NetworkParams params_from(const Checkpoint& ckpt) {
  auto it = ckpt.tensors.find(kArchTensor);
  if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint has no architecture descriptor");
  NetworkParams p;
  p.arch = decode_arch(it->second.data());
  for (const char* ns : {kGenerator, kDiscriminator, kPoseRegressor, kFeatureNet}) {
    const std::string prefix = std::string(ns) + ".";
    for (const auto& [name, t] : ckpt.tensors) {
      if (name.compare(0, prefix.size(), prefix) == 0) p.tensors[name] = t;
    }
  }
  return p;
}

}  // namespace posewarp
