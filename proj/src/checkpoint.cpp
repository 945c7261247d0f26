#include "moon/checkpoint.hpp"

#include "moon/hash.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace moon {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "MOON-CKPT v";

class Writer {
 public:
  void bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  void bytes(void* out, std::size_t n) {
    if (data_.size() - pos_ < n) throw ParseError(0, "checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (data_.size() - pos_ < n) throw ParseError(0, "checkpoint truncated at byte " + std::to_string(pos_));
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

KvConfig meta_to_kv(const CheckpointMeta& meta) {
  KvConfig kv;
  kv.set("config_hash", meta.config_hash);
  kv.set("step", meta.step);
  kv.set("format_version", meta.format_version);
  for (const auto& [k, v] : meta.metrics) kv.set("metric." + k, v);
  return kv;
}

CheckpointMeta meta_from_kv(const KvConfig& kv) {
  CheckpointMeta meta;
  meta.config_hash = kv.get_string("config_hash");
  meta.step = static_cast<std::int64_t>(kv.get_u64("step"));
  meta.format_version = kv.get_int("format_version");
  for (const auto& [k, v] : kv.entries())
    if (k.rfind("metric.", 0) == 0) meta.metrics[k.substr(7)] = kv.get_double(k);
  return meta;
}

}  // namespace

std::string config_hash(const KvConfig& config) { return hex64(fnv1a64(config.to_string())); }

void save_checkpoint(const std::filesystem::path& path, const ParameterStore<float>& params, const KvConfig& config,
                     CheckpointMeta meta) {
  meta.config_hash = config_hash(config);
  meta.format_version = kCheckpointVersion;
  Writer w;
  const std::string header = std::string(kMagic) + std::to_string(kCheckpointVersion) + "\n";
  w.bytes(header.data(), header.size());
  w.str(config.to_string());
  w.str(meta_to_kv(meta).to_string());
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const MatrixF& v = params.value(i);
    w.str(params.name(i));
    w.u32(static_cast<std::uint32_t>(v.rows()));
    w.u32(static_cast<std::uint32_t>(v.cols()));
    w.bytes(v.data(), static_cast<std::size_t>(v.size()) * sizeof(float));
  }
  const std::string& body = w.data();
  const std::uint64_t sum = fnv1a64(body);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  out.write(reinterpret_cast<const char*>(&sum), sizeof sum);
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();

  const auto nl = data.find('\n');
  if (nl == std::string::npos || data.compare(0, kMagic.size(), kMagic) != 0)
    throw ParseError(1, "not a checkpoint file: " + path.string());
  const std::string version = data.substr(kMagic.size(), nl - kMagic.size());
  if (version != std::to_string(kCheckpointVersion))
    throw ParseError(1, "unsupported checkpoint version " + version + " (expected " + std::to_string(kCheckpointVersion) + ")");
  if (data.size() < nl + 1 + sizeof(std::uint64_t)) throw ParseError(0, "checkpoint truncated");

  const std::string_view body(data.data(), data.size() - sizeof(std::uint64_t));
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, data.data() + body.size(), sizeof stored_sum);

  Reader r(body.substr(nl + 1));
  Checkpoint ck;
  ck.config = KvConfig::parse(r.str());
  ck.meta = meta_from_kv(KvConfig::parse(r.str()));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols * sizeof(float) > r.remaining())
      throw ParseError(0, "checkpoint truncated in tensor " + t.name);
    t.value.resize(rows, cols);
    r.bytes(t.value.data(), static_cast<std::size_t>(rows) * cols * sizeof(float));
    ck.parameters.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw ParseError(0, "trailing bytes in checkpoint");
  if (fnv1a64(body) != stored_sum) throw ParseError(0, "checkpoint checksum mismatch");
  if (config_hash(ck.config) != ck.meta.config_hash)
    throw IntegrityError("checkpoint config hash " + ck.meta.config_hash + " does not match its config");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const KvConfig& expected,
                           const std::vector<std::string>& prefixes) {
  Checkpoint ck = load_checkpoint(path);
  auto selected = [&](const std::string& key) {
    for (const auto& p : prefixes)
      if (key.rfind(p, 0) == 0) return true;
    return prefixes.empty();
  };
  for (const auto& [key, value] : expected.entries()) {
    if (!selected(key)) continue;
    if (!ck.config.has(key)) throw IntegrityError("checkpoint config lacks field " + key);
    const std::string stored = ck.config.get_string(key);
    if (stored != value) throw IntegrityError("checkpoint config field " + key + " is " + stored + ", expected " + value);
  }
  for (const auto& [key, value] : ck.config.entries())
    if (selected(key) && !expected.has(key)) throw IntegrityError("checkpoint config has unexpected field " + key);
  return ck;
}

void apply_checkpoint(const Checkpoint& ckpt, Encoder<float>& encoder) {
  auto& store = encoder.parameters();
  if (ckpt.parameters.size() != store.size())
    throw IntegrityError("checkpoint holds " + std::to_string(ckpt.parameters.size()) + " tensors, encoder has " +
                         std::to_string(store.size()));
  for (const NamedTensor& t : ckpt.parameters) {
    if (!store.contains(t.name)) throw IntegrityError("checkpoint tensor " + t.name + " unknown to encoder");
    MatrixF& dst = store.value(store.find(t.name));
    if (dst.rows() != t.value.rows() || dst.cols() != t.value.cols())
      throw IntegrityError("checkpoint tensor " + t.name + " has a different shape");
    dst = t.value;
  }
}

Encoder<float> encoder_from_checkpoint(const Checkpoint& ckpt) {
  Encoder<float> enc(EncoderConfig::from_kv(ckpt.config), 0);
  apply_checkpoint(ckpt, enc);
  return enc;
}

}  // namespace moon
