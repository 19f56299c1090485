#include "mmchat/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mmchat/error.hpp"

namespace mmchat::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hash_;
    return os.str();
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

void hash_tensor(Fnv1a& h, const std::string& name, const Tensor& t) {
  h.update(name);
  for (int d : t.shape()) h.update(&d, sizeof d);
  h.update(t.data(), t.size() * sizeof(float));
}

}  // namespace

const Tensor* Container::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  nlohmann::json header = container.extra.is_object() ? container.extra : nlohmann::json::object();
  header["names"] = nlohmann::json::array();
  header["shapes"] = nlohmann::json::array();
  for (const auto& [name, t] : container.tensors) {
    header["names"].push_back(name);
    header["shapes"].push_back(t.shape());
  }
  header["dtype"] = "f32";
  header["config"] = container.config;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(kCheckpointMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : container.tensors) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw ParseError(path.string() + ": not an MMCKPT01 container");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 32)) throw ParseError(path.string() + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": header: " + e.what());
  }
  if (header.value("dtype", "") != "f32") throw ParseError(path.string() + ": unsupported dtype");

  Container c;
  c.config = header.value("config", nlohmann::json::object());
  const auto names = header.at("names").get<std::vector<std::string>>();
  const auto shapes = header.at("shapes").get<std::vector<std::vector<int>>>();
  if (names.size() != shapes.size()) throw ParseError(path.string() + ": names/shapes length mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor t(shapes[i]);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw ParseError(path.string() + ": truncated payload for " + names[i]);
    c.tensors.emplace_back(names[i], std::move(t));
  }
  header.erase("names");
  header.erase("shapes");
  header.erase("dtype");
  header.erase("config");
  c.extra = std::move(header);
  return c;
}

Container snapshot(const ParameterSet& params, nlohmann::json config) {
  Container c;
  c.config = std::move(config);
  for (const auto& p : params.items()) c.tensors.emplace_back(p.name, p.var.value());
  return c;
}

void restore(ParameterSet& params, const Container& container) {
  for (auto& p : params.items()) {
    const Tensor* t = container.find(p.name);
    if (!t) throw ParseError("checkpoint is missing parameter " + p.name);
    if (!t->same_shape(p.var.value())) {
      throw DimensionError("checkpoint parameter " + p.name + " has shape " + t->shape_string() + ", model expects " +
                           p.var.value().shape_string());
    }
    p.var.value() = *t;
  }
}

std::string fingerprint(const ParameterSet& params) {
  Fnv1a h;
  for (const auto& p : params.items()) hash_tensor(h, p.name, p.var.value());
  return h.hex();
}

std::string fingerprint(const Container& container) {
  Fnv1a h;
  for (const auto& [name, t] : container.tensors) hash_tensor(h, name, t);
  return h.hex();
}

}  // namespace mmchat::nn
