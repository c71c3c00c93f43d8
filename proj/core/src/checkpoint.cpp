#include "rwmn/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <sstream>

#include "bytes.hpp"
#include "rwmn/error.hpp"

namespace rwmn {

namespace {

constexpr char kMagic[4] = {'R', 'W', 'M', 'P'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const RwmnModel& model) {
  const auto tensors = model.trainable();
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.le(kVersion);
  w.le(model.config().digest());
  w.le(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.le(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.le(static_cast<std::uint64_t>(e));
    for (double v : t.values()) w.f64(v);
  }
  return w.take();
}

void decode_checkpoint(std::span<const std::uint8_t> bytes, RwmnModel& model) {
  detail::ByteReader r(bytes, "checkpoint");
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw ParseError("bad checkpoint magic at byte offset 0", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.le<std::uint16_t>("version");
  if (version != kVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " at byte offset " +
                         std::to_string(version_at),
                     version_at);
  }
  const auto digest = r.le<std::uint64_t>("config digest");
  if (digest != model.config().digest()) {
    throw ConfigError("checkpoint config digest " + std::to_string(digest) + " does not match model config " +
                      std::to_string(model.config().digest()));
  }
  auto tensors = model.trainable();
  const std::size_t count_at = r.offset();
  const auto count = r.le<std::uint32_t>("tensor count");
  if (count != tensors.size()) {
    throw ParseError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                         std::to_string(tensors.size()) + " (byte offset " + std::to_string(count_at) + ")",
                     count_at);
  }
  // Decode everything before touching the model.
  std::vector<std::vector<double>> values(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto len = r.le<std::uint32_t>("name length");
    const auto name_bytes = r.take(len, "tensor name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    const auto& [expected_name, t] = tensors[i];
    if (name != expected_name) {
      throw ParseError("tensor " + std::to_string(i) + " is '" + name + "', expected '" + expected_name +
                           "' at byte offset " + std::to_string(at),
                       at);
    }
    const std::size_t rank_at = r.offset();
    const auto rank = r.le<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.le<std::uint64_t>("extent"));
    if (shape != t.shape()) {
      throw ParseError("tensor '" + name + "' has shape " + to_string(shape) + ", model expects " +
                           to_string(t.shape()) + " at byte offset " + std::to_string(rank_at),
                       rank_at);
    }
    values[i].resize(t.size());
    for (double& v : values[i]) v = r.f64("tensor value");
  }
  if (r.remaining() != 0) {
    throw ParseError(std::to_string(r.remaining()) + " trailing bytes at byte offset " + std::to_string(r.offset()),
                     r.offset());
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto dst = tensors[i].second.mutable_values();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

void save_checkpoint(const RwmnModel& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, RwmnModel& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  decode_checkpoint(bytes, model);
}

}  // namespace rwmn
