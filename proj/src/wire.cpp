#include "fcil/wire.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace fcil::wire {

namespace {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

template <class U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <class U>
U get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(U) > bytes.size()) throw std::runtime_error("truncated tensor payload");
  U v;
  std::memcpy(&v, bytes.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace

std::string encode_tensors(const std::vector<NamedTensor>& tensors, const nlohmann::json& extra) {
  nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
  const std::string h = header.dump();

  std::string out;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (const auto& t : tensors) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.values.size() * sizeof(float)));
    for (double v : t.values) put<float>(out, static_cast<float>(v));
  }
  return out;
}

Decoded decode_tensors(std::string_view bytes) {
  std::size_t pos = 0;
  const auto hlen = get<std::uint32_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw std::runtime_error("truncated tensor header");
  Decoded out;
  out.header = nlohmann::json::parse(bytes.substr(pos, hlen));
  pos += hlen;
  for (const auto& entry : out.header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t expected = 1;
    for (auto s : t.shape) expected *= s;
    const auto nbytes = get<std::uint64_t>(bytes, pos);
    if (nbytes != expected * sizeof(float)) throw std::runtime_error("tensor '" + t.name + "' payload size mismatch");
    t.values.resize(expected);
    for (auto& v : t.values) v = get<float>(bytes, pos);
    out.tensors.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw std::runtime_error("trailing bytes after tensor payload");
  return out;
}

std::string frame(std::string_view payload) {
  std::string out;
  put<std::uint64_t>(out, static_cast<std::uint64_t>(payload.size()));
  out.append(payload);
  return out;
}

std::string_view unframe(std::string_view bytes) {
  std::size_t pos = 0;
  const auto len = get<std::uint64_t>(bytes, pos);
  if (pos + len != bytes.size()) throw std::runtime_error("round message length prefix does not match");
  return bytes.substr(pos);
}

std::vector<double> to_wire_precision(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

}  // namespace fcil::wire
