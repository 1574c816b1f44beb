#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "accvit/tensor.hpp"

// Portable tensor files: one ASCII header line
//   TSR1 <ndims> <d0> <d1> ... <dtype>\n
// with dtype "f32" or "f64", followed by the raw little-endian scalars in
// row-major order.

namespace accvit {
namespace io {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (sizeof(T) == 4)
    return "f32";
  else
    return "f64";
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out << "TSR1 " << t.rank();
  for (int i = 0; i < t.rank(); ++i) out << " " << t.dim(i);
  out << " " << dtype_name<T>() << "\n";
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.data().size_bytes()));
}

template <typename T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  write_tensor(out, t);
  if (!out) throw UsageError("short write to '" + path + "'");
}

struct LoadedTensor {
  Shape shape;
  bool is_f64 = false;
  std::vector<double> values;  // f32 payloads converted exactly

  template <typename T>
  Tensor<T> as() const {
    std::vector<T> v(values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(values[i]);
    return Tensor<T>(shape, std::move(v));
  }
};

inline LoadedTensor read_tensor(std::istream& in, const std::string& origin = "<stream>") {
  std::string header;
  if (!std::getline(in, header)) throw UsageError("'" + origin + "': missing TSR1 header");
  std::istringstream hs(header);
  std::string magic, dtype;
  int ndims = 0;
  hs >> magic >> ndims;
  if (!hs || magic != "TSR1" || ndims < 1 || ndims > 4)
    throw UsageError("'" + origin + "': malformed TSR1 header '" + header + "'");
  std::vector<std::int64_t> dims(static_cast<std::size_t>(ndims));
  for (auto& d : dims) hs >> d;
  hs >> dtype;
  if (!hs || (dtype != "f32" && dtype != "f64"))
    throw UsageError("'" + origin + "': malformed TSR1 header '" + header + "'");
  LoadedTensor t;
  t.shape = Shape(dims);
  t.is_f64 = dtype == "f64";
  const std::size_t n = static_cast<std::size_t>(t.shape.numel());
  t.values.resize(n);
  if (t.is_f64) {
    in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    for (std::size_t i = 0; i < n; ++i) t.values[i] = static_cast<double>(buf[i]);
  }
  if (!in) throw UsageError("'" + origin + "': truncated payload");
  return t;
}

inline LoadedTensor read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open tensor file '" + path + "'");
  return read_tensor(in, path);
}

// Named parameter container: "AVP1 <count>\n" then, per entry, a "<name>\n"
// line followed by one TSR1 block.
template <typename T>
void save_parameters(const std::string& path, const ParamList<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  out << "AVP1 " << params.size() << "\n";
  for (const auto& p : params) {
    out << p.name << "\n";
    write_tensor(out, p.tensor);
  }
  if (!out) throw UsageError("short write to '" + path + "'");
}

// Loads values into an existing registry by name; shapes must match.
template <typename T>
void load_parameters(const std::string& path, ParamList<T>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open parameter file '" + path + "'");
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic;
  std::size_t count = 0;
  hs >> magic >> count;
  if (!hs || magic != "AVP1") throw UsageError("'" + path + "': not a parameter file");
  if (count != params.size())
    throw UsageError("'" + path + "': holds " + std::to_string(count) + " tensors, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    if (!std::getline(in, name)) throw UsageError("'" + path + "': truncated at entry " + std::to_string(i));
    if (name != params[i].name)
      throw UsageError("'" + path + "': entry '" + name + "' does not match model parameter '" + params[i].name + "'");
    const LoadedTensor t = read_tensor(in, path);
    if (t.shape != params[i].tensor.shape())
      throw UsageError("'" + path + "': shape " + t.shape.str() + " for '" + name + "' vs model " + params[i].tensor.shape().str());
    auto dst = params[i].tensor.data_mut();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(t.values[j]);
  }
}

}  // namespace io
}  // namespace accvit
