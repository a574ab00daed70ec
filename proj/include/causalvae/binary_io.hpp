#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Length-prefixed little-endian arrays: u64 rank, u64 dims[rank], f64 values.
namespace causalvae::binary_io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("unexpected end of file");
  return v;
}

inline void write_header(std::ostream& os, const std::vector<std::uint64_t>& dims) {
  write_u64(os, dims.size());
  for (auto d : dims) write_u64(os, d);
}

inline std::vector<std::uint64_t> read_header(std::istream& is) {
  const std::uint64_t rank = read_u64(is);
  if (rank > 8) throw FormatError("implausible array rank " + std::to_string(rank));
  std::vector<std::uint64_t> dims(rank);
  for (auto& d : dims) d = read_u64(is);
  return dims;
}

inline void write_values(std::ostream& os, std::span<const double> values) {
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline void read_values(std::istream& is, std::span<double> out) {
  if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(double)))) {
    throw FormatError("unexpected end of file while reading values");
  }
}

inline void write_array(std::ostream& os, const std::vector<std::uint64_t>& dims, std::span<const double> values) {
  write_header(os, dims);
  write_values(os, values);
}

inline std::vector<double> read_array(std::istream& is, const std::vector<std::uint64_t>& expected_dims) {
  const auto dims = read_header(is);
  if (dims != expected_dims) throw FormatError("array shape does not match the manifest");
  std::uint64_t count = 1;
  for (auto d : dims) count *= d;
  std::vector<double> out(count);
  read_values(is, out);
  return out;
}

}  // namespace causalvae::binary_io
