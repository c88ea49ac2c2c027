#include "robtok/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace robtok {

VersionMismatchError::VersionMismatchError(std::uint32_t found_version, std::uint32_t expected_version)
    : CheckpointError("checkpoint version " + std::to_string(found_version) + " is not supported (expected version " +
                      std::to_string(expected_version) + ")"),
      found(found_version),
      expected(expected_version) {}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

namespace {

constexpr char kMagic[4] = {'R', 'T', 'O', 'K'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes.insert(bytes.end(), raw, raw + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) {
      throw TruncatedFileError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const ViTConfig& c) {
  for (int v : {c.image_size, c.patch_size, c.channels, c.dim, c.depth, c.heads, c.mlp_ratio, c.num_registers,
                c.num_classes}) {
    w.put<std::int32_t>(v);
  }
  w.put<double>(c.ln_eps);
  w.put<double>(c.pixel_mean);
  w.put<double>(c.pixel_std);
}

ViTConfig read_config(Reader& r) {
  ViTConfig c;
  for (int* field : {&c.image_size, &c.patch_size, &c.channels, &c.dim, &c.depth, &c.heads, &c.mlp_ratio,
                     &c.num_registers, &c.num_classes}) {
    *field = r.get<std::int32_t>("config record");
  }
  c.ln_eps = r.get<double>("config record");
  c.pixel_mean = r.get<double>("config record");
  c.pixel_std = r.get<double>("config record");
  return c;
}

}  // namespace

std::uint64_t config_hash(const ViTConfig& config) {
  Writer w;
  write_config(w, config);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : w.bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  write_config(w, ckpt.config);
  w.put<std::uint64_t>(ckpt.seed);
  w.put<std::uint64_t>(config_hash(ckpt.config));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (Index e : t.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(e));
    for (double v : t.data()) w.put<double>(v);
  }
  return std::move(w.bytes);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(sizeof kMagic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw BadMagicError("not a checkpoint: bad magic bytes");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw VersionMismatchError(version, kCheckpointVersion);

  Checkpoint ckpt;
  ckpt.config = read_config(r);
  ckpt.seed = r.get<std::uint64_t>("seed");
  ckpt.config_hash = r.get<std::uint64_t>("config hash");
  if (ckpt.config_hash != config_hash(ckpt.config)) throw CheckpointError("checkpoint config hash does not match its config");

  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    const std::uint8_t* name = r.take(name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 16) throw ExtentOverflowError("tensor rank " + std::to_string(rank) + " is implausible");
    Shape shape;
    std::uint64_t total = 1;
    constexpr std::uint64_t kMaxElements = std::numeric_limits<std::uint64_t>::max() / 8 / 2;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto e = r.get<std::uint64_t>("tensor extent");
      if (e != 0 && total > kMaxElements / e) throw ExtentOverflowError("tensor extents overflow the element count");
      total *= e;
      shape.push_back(static_cast<Index>(e));
    }
    if (total > r.remaining() / sizeof(double)) {
      throw TruncatedFileError("checkpoint truncated inside tensor data (" + std::to_string(total) + " values declared)");
    }
    Vector values(static_cast<Index>(total));
    for (std::uint64_t k = 0; k < total; ++k) values[static_cast<Index>(k)] = r.get<double>("tensor data");
    ckpt.tensors.emplace_back(std::string(reinterpret_cast<const char*>(name), name_len),
                              Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

Checkpoint model_checkpoint(const ModelWeights& model, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.seed = seed;
  ckpt.config_hash = config_hash(model.config);
  for (auto& [name, t] : model.named_tensors()) ckpt.tensors.emplace_back(name, t.detach());
  return ckpt;
}

ModelWeights model_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, Tensor>> named;
  for (const auto& entry : ckpt.tensors) {
    if (entry.first.rfind("rob.", 0) == 0 || entry.first.rfind("probe.", 0) == 0) continue;
    named.push_back(entry);
  }
  return ModelWeights::from_named(ckpt.config, named);
}

}  // namespace robtok
