#include <bit>
#include <cstring>
#include <fstream>

#include "rpnt/errors.hpp"
#include "rpnt/model.hpp"

namespace rpnt::model {

namespace {

constexpr char kMagic[4] = {'R', 'P', 'N', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), sizeof b);
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof b)) {
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
  return s;
}

}  // namespace

void save_checkpoint(const Rpnt& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kVersion);
  std::string cfg = to_json(model.config()).dump();
  put_le<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_le<std::uint32_t>(os, model.has_task_head() ? 1u : 0u);
  auto params = model.parameters();
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_string(os, name);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
    for (std::size_t e : t.shape()) put_le<std::uint64_t>(os, e);
    for (double v : t.data()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Rpnt load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  if (get_bytes(is, 4, "magic") != std::string(kMagic, 4)) {
    throw IoError(path.string() + " is not an RPNT checkpoint");
  }
  auto version = get_le<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  auto cfg_len = get_le<std::uint64_t>(is, "config length");
  json cfg_json;
  try {
    cfg_json = json::parse(get_bytes(is, cfg_len, "config"));
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt checkpoint config: ") + e.what());
  }
  RpntConfig cfg = config_from_json(cfg_json);
  if (cfg_json.contains("rope_groups") && cfg_json.at("rope_groups") != to_json(cfg).at("rope_groups")) {
    throw IoError("checkpoint rope groups do not match its configuration");
  }
  Rpnt model(cfg, 0);
  if (get_le<std::uint32_t>(is, "task head flag") != 0) model.attach_task_head(0);
  auto params = model.parameters();
  auto count = get_le<std::uint32_t>(is, "parameter count");
  if (count != params.size()) {
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, the configuration needs " +
                  std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    auto len = get_le<std::uint32_t>(is, "name length");
    std::string stored = get_bytes(is, len, "name");
    if (stored != name) throw IoError("checkpoint tensor '" + stored + "' where '" + name + "' was expected");
    auto rank = get_le<std::uint32_t>(is, "rank");
    ad::Shape shape(rank);
    for (auto& e : shape) e = get_le<std::uint64_t>(is, "extent");
    if (shape != t.shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                    ad::shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    for (double& v : dst) v = std::bit_cast<double>(get_le<std::uint64_t>(is, "tensor data"));
  }
  return model;
}

}  // namespace rpnt::model
