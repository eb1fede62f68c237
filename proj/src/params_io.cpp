#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "chanssl/detector.hpp"
#include "chanssl/errors.hpp"

namespace chanssl {

namespace {

constexpr std::array<char, 8> kMagic{'C', 'H', 'S', 'S', 'L', 'P', 'R', 'M'};
constexpr std::uint32_t kVersion = 1;

const std::vector<std::vector<std::uint32_t>>& expected_dims() {
  static const std::vector<std::vector<std::uint32_t>> dims{
      {kNumClasses + 1, kFeatureDim},
      {kNumClasses, kFeatureDim},
      {kNumClasses, kResidualDim, kFeatureDim}};
  return dims;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size())
      throw IoError("params file truncated at byte " + std::to_string(pos_));
  }
  const std::string& data_;
  std::size_t pos_ = 8;
};

}  // namespace

void save_params(const DetectorParams& params, const std::filesystem::path& path) {
  std::string out(kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(expected_dims().size()));
  for (const auto& dims : expected_dims()) {
    put_u32(out, static_cast<std::uint32_t>(dims.size()));
    for (std::uint32_t d : dims) put_u32(out, d);
  }
  put_f64(out, params.learning_rate);
  for (double v : params.values) put_f64(out, v);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write params file " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing params file " + path.string());
}

DetectorParams load_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read params file " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 16 || std::memcmp(data.data(), kMagic.data(), kMagic.size()) != 0)
    throw IoError("not a params file: " + path.string());

  Reader in(data);
  const std::uint32_t version = in.u32();
  if (version != kVersion)
    throw ModelCompatibilityError("unsupported params version " + std::to_string(version));
  const std::uint32_t n_tensors = in.u32();
  std::vector<std::vector<std::uint32_t>> dims(n_tensors);
  for (auto& d : dims) {
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw IoError("corrupt dimension table in " + path.string());
    for (std::uint32_t k = 0; k < rank; ++k) d.push_back(in.u32());
  }
  if (dims != expected_dims())
    throw ModelCompatibilityError("params shape does not match the detector: " + path.string());

  DetectorParams params;
  params.learning_rate = in.f64();
  for (double& v : params.values) v = in.f64();
  if (!in.done()) throw IoError("trailing bytes in params file " + path.string());
  return params;
}

}  // namespace chanssl
