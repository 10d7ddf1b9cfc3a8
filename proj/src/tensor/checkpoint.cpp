#include "chart/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "chart/error.hpp"

namespace chart {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

void Checkpoint::load_into(ParamRegistry& registry, const std::string& prefix) const {
  for (const auto& e : registry.entries()) {
    const Tensor* src = find(prefix + e.name);
    if (src == nullptr) throw ConfigError("checkpoint has no tensor named " + prefix + e.name);
    if (src->shape() != e.tensor.shape()) {
      throw ConfigError("checkpoint tensor " + prefix + e.name + " has shape " + shape_str(src->shape()) +
                        ", model expects " + shape_str(e.tensor.shape()));
    }
    Tensor dst = e.tensor;
    std::copy(src->data().begin(), src->data().end(), dst.mutable_data().begin());
  }
}

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors, const nlohmann::json& config) {
  nlohmann::json header;
  header["config"] = config;
  header["tensors"] = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (header["tensors"].contains(t.name)) throw InputError("duplicate checkpoint tensor " + t.name);
    header["tensors"][t.name] = {{"shape", t.tensor.shape()}, {"offset", offset}};
    offset += t.tensor.numel() * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  put_u64(out, text.size());
  out += text;
  for (const auto& t : tensors)
    for (double v : t.tensor.data()) put_f64(out, v);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw InputError("checkpoint truncated: missing header length");
  const std::uint64_t header_len = get_u64(bytes, 0);
  if (8 + header_len > bytes.size()) throw InputError("checkpoint truncated: header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 8 + header_len;
  Checkpoint ckpt;
  ckpt.config = header.value("config", nlohmann::json::object());
  // Payload order follows offsets so round trips reproduce the writer's order.
  std::vector<std::pair<std::uint64_t, std::string>> order;
  for (const auto& [name, meta] : header.at("tensors").items()) order.emplace_back(meta.at("offset").get<std::uint64_t>(), name);
  std::sort(order.begin(), order.end());
  for (const auto& [offset, name] : order) {
    const auto& meta = header["tensors"][name];
    Shape shape = meta.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (payload + offset + n * 8 > bytes.size()) throw InputError("checkpoint truncated: tensor " + name);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<double>(get_u64(bytes, payload + offset + 8 * i));
    ckpt.tensors.push_back({name, Tensor::from(std::move(shape), std::move(values))});
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(tensors, config);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace chart
