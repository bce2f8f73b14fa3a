#pragma once

#include <iosfwd>

#include "json.hpp"
#include "moelab/ndgrad/tensor.hpp"

namespace moelab::ndgrad {

// Binary layout, all little-endian:
//   u32 rank | u64 extent x rank | f64 value x product(extents)
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

// {"shape": [..], "values": [..]} for small fixtures.
nlohmann::json to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

// Little-endian primitive IO shared with the checkpoint format.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);

}  // namespace moelab::ndgrad
