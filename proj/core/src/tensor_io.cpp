#include "moekit/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace moekit {

namespace {

constexpr char kMagic[4] = {'H', 'X', 'T', '1'};
// Dims with more elements than this are rejected before any allocation.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 33;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
  return true;
}

bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return true;
}

void write_payload(std::ostream& os, const std::vector<double>& data) {
  for (double v : data) put_f64(os, v);
}

std::vector<double> read_payload(std::istream& is, std::uint64_t count,
                                 const std::string& path) {
  std::vector<double> data(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t bits;
    if (!get_u64(is, bits)) {
      throw TensorIoError(TensorIoError::Code::kTruncated,
                          path + ": payload shorter than header dims imply");
    }
    double v;
    std::memcpy(&v, &bits, 8);
    if (!std::isfinite(v)) {
      throw TensorIoError(TensorIoError::Code::kNonFinite,
                          path + ": non-finite value at payload index " +
                              std::to_string(i));
    }
    data[i] = v;
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw TensorIoError(TensorIoError::Code::kTrailingBytes,
                        path + ": payload longer than header dims imply");
  }
  return data;
}

}  // namespace

TensorValue tensor_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw TensorIoError(TensorIoError::Code::kOpenFailed,
                        path + ": cannot open for reading");
  }
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw TensorIoError(TensorIoError::Code::kBadMagic,
                        path + ": missing HXT1 magic");
  }
  std::uint32_t rank;
  if (!get_u32(is, rank)) {
    throw TensorIoError(TensorIoError::Code::kTruncated,
                        path + ": header ends before rank");
  }
  if (rank != 2 && rank != 3) {
    throw TensorIoError(TensorIoError::Code::kBadRank,
                        path + ": rank " + std::to_string(rank) +
                            " not supported (expected 2 or 3)");
  }
  std::uint64_t dims[3] = {0, 0, 0};
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    if (!get_u64(is, dims[i])) {
      throw TensorIoError(TensorIoError::Code::kTruncated,
                          path + ": header ends before dims");
    }
    if (dims[i] != 0 && count > kMaxElements / std::max<std::uint64_t>(dims[i], 1)) {
      throw TensorIoError(TensorIoError::Code::kDimOverflow,
                          path + ": dims product overflows element budget");
    }
    count *= dims[i];
  }
  if (count > kMaxElements) {
    throw TensorIoError(TensorIoError::Code::kDimOverflow,
                        path + ": dims product overflows element budget");
  }
  std::vector<double> data = read_payload(is, count, path);
  if (rank == 2) {
    return Matrix2D(static_cast<std::size_t>(dims[0]),
                    static_cast<std::size_t>(dims[1]), std::move(data));
  }
  return Tensor3D(static_cast<std::size_t>(dims[0]),
                  static_cast<std::size_t>(dims[1]),
                  static_cast<std::size_t>(dims[2]), std::move(data));
}

namespace {

void write_header(std::ostream& os, std::uint32_t rank,
                  const std::uint64_t* dims) {
  os.write(kMagic, 4);
  put_u32(os, rank);
  for (std::uint32_t i = 0; i < rank; ++i) put_u64(os, dims[i]);
}

}  // namespace

void tensor_write(const std::string& path, const Matrix2D& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw TensorIoError(TensorIoError::Code::kOpenFailed,
                        path + ": cannot open for writing");
  }
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  write_header(os, 2, dims);
  write_payload(os, m.data());
  if (!os) {
    throw TensorIoError(TensorIoError::Code::kWriteFailed,
                        path + ": write failed");
  }
}

void tensor_write(const std::string& path, const Tensor3D& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw TensorIoError(TensorIoError::Code::kOpenFailed,
                        path + ": cannot open for writing");
  }
  const std::uint64_t dims[3] = {t.dim0(), t.dim1(), t.dim2()};
  write_header(os, 3, dims);
  write_payload(os, t.data());
  if (!os) {
    throw TensorIoError(TensorIoError::Code::kWriteFailed,
                        path + ": write failed");
  }
}

void tensor_write(const std::string& path, const TensorValue& t) {
  if (std::holds_alternative<Matrix2D>(t)) {
    tensor_write(path, std::get<Matrix2D>(t));
  } else {
    tensor_write(path, std::get<Tensor3D>(t));
  }
}

}  // namespace moekit
