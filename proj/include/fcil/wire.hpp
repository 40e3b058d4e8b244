#pragma once

// Byte layout shared by parameter checkpoints, round messages and memory
// snapshots:
//
//   u32 LE  header length H
//   H bytes JSON header {"tensors": [{"name", "shape"}...], ...extra fields}
//   per tensor, in header order:
//     u64 LE  payload byte length (4 * element count)
//     f32 LE  values
//
// A round message prefixes this block with its own u64 LE total length.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fcil/model_zoo.hpp"
#include "json.hpp"

namespace fcil::wire {

struct Decoded {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;
};

std::string encode_tensors(const std::vector<NamedTensor>& tensors, const nlohmann::json& extra = nlohmann::json::object());
Decoded decode_tensors(std::string_view bytes);

// Length-prefixed framing for round messages.
std::string frame(std::string_view payload);
std::string_view unframe(std::string_view bytes);

// Rounds every value through f32, the precision of the wire format.
std::vector<double> to_wire_precision(const std::vector<double>& v);

}  // namespace fcil::wire
