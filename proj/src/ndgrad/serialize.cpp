#include "moelab/ndgrad/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "moelab/errors.hpp"

namespace moelab::ndgrad {

namespace {

constexpr std::uint32_t kMaxRank = 8;

template <class T>
void put(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
  if (!out) throw IoError("tensor write failed");
}

template <class T>
T get(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw IoError("truncated tensor stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void write_f64(std::ostream& out, double v) { put(out, v); }
std::uint32_t read_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return get<std::uint64_t>(in); }
double read_f64(std::istream& in) { return get<double>(in); }

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u64(out, e);
  for (double v : t.values()) write_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  const auto rank = read_u32(in);
  if (rank > kMaxRank) throw IoError("tensor rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  for (auto& e : shape) e = read_u64(in);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = read_f64(in);
  return Tensor::from(std::move(shape), std::move(values));
}

nlohmann::json to_json(const Tensor& t) {
  return {{"shape", t.shape()},
          {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
  try {
    return Tensor::from(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed tensor json: ") + e.what());
  }
}

}  // namespace moelab::ndgrad
