#include "densesiam/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "densesiam/errors.hpp"

namespace dsiam {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* field) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
      throw ParseError(std::string("PPM: missing or invalid ") + field);
    }
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (v > 1'000'000) throw ParseError(std::string("PPM: ") + field + " too large");
    }
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::vector<std::uint8_t>& bytes_;
};

}  // namespace

TensorF decode_ppm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ParseError("PPM: bad magic (expected \"P6\")");
  }
  HeaderReader r(bytes);
  r.pos_ = 2;
  const long w = r.number("width");
  const long h = r.number("height");
  const long maxval = r.number("maxval");
  if (w < 1) throw ParseError("PPM: width must be positive");
  if (h < 1) throw ParseError("PPM: height must be positive");
  if (maxval != 255) throw ParseError("PPM: maxval must be 255, got " + std::to_string(maxval));
  if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) {
    throw ParseError("PPM: missing whitespace after maxval");
  }
  ++r.pos_;
  const std::size_t npix = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - r.pos_ < 3 * npix) {
    throw ParseError("PPM: truncated payload (expected " + std::to_string(3 * npix) + " bytes, got " +
                     std::to_string(bytes.size() - r.pos_) + ")");
  }
  std::vector<float> values(3 * npix);
  const std::uint8_t* p = bytes.data() + r.pos_;
  for (std::size_t i = 0; i < npix; ++i)
    for (std::size_t c = 0; c < 3; ++c) values[c * npix + i] = static_cast<float>(p[3 * i + c]) / 255.0f;
  return TensorF(Shape{3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, std::move(values));
}

std::vector<std::uint8_t> encode_ppm(const TensorF& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("save_ppm: expected a [3,H,W] tensor, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), npix = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * npix);
  auto v = image.data();
  for (std::size_t i = 0; i < npix; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float x = std::clamp(v[c * npix + i], 0.0f, 1.0f);
      out.push_back(static_cast<std::uint8_t>(std::lround(x * 255.0f)));
    }
  return out;
}

LabelMap decode_pgm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw ParseError("PGM: bad magic (expected \"P5\")");
  }
  HeaderReader r(bytes);
  r.pos_ = 2;
  const long w = r.number("width");
  const long h = r.number("height");
  const long maxval = r.number("maxval");
  if (w < 1 || h < 1) throw ParseError("PGM: size must be positive");
  if (maxval < 1 || maxval > 255) throw ParseError("PGM: maxval must be in [1,255], got " + std::to_string(maxval));
  if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) {
    throw ParseError("PGM: missing whitespace after maxval");
  }
  ++r.pos_;
  LabelMap out;
  out.width = static_cast<std::size_t>(w);
  out.height = static_cast<std::size_t>(h);
  const std::size_t npix = out.width * out.height;
  if (bytes.size() - r.pos_ < npix) throw ParseError("PGM: truncated payload");
  out.labels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_),
                    bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_ + npix));
  return out;
}

std::vector<std::uint8_t> encode_pgm(const LabelMap& map) {
  if (map.labels.size() != map.width * map.height) throw DimensionError("save_pgm: label count does not match size");
  std::int64_t top = 1;
  for (auto l : map.labels) {
    if (l < 0 || l > 255) throw InputError("save_pgm: label " + std::to_string(l) + " does not fit in 8 bits");
    top = std::max(top, l);
  }
  const std::string header =
      "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n" + std::to_string(top) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (auto l : map.labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TensorF load_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }
void save_ppm(const TensorF& image, const std::filesystem::path& path) { write_file(path, encode_ppm(image)); }
LabelMap load_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path)); }
void save_pgm(const LabelMap& map, const std::filesystem::path& path) { write_file(path, encode_pgm(map)); }

}  // namespace dsiam
