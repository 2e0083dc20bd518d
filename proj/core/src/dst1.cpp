#include "densesiam/dst1.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "densesiam/errors.hpp"

namespace dsiam::dst1 {

static_assert(std::endian::native == std::endian::little, "DST1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'S', 'T', '1'};

template <typename U>
void put(std::vector<std::uint8_t>& out, U value) {
  std::uint8_t buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.insert(out.end(), buf, buf + sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  void copy(void* dst, std::size_t n, const std::string& what) {
    need(n, what.c_str());
    if (n) std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("DST1: truncated while reading ") + what);
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t Entry::count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Entry Entry::floats(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values) {
  Entry e;
  e.name = std::move(name);
  e.dtype = DType::F32;
  e.dims = std::move(dims);
  e.f32 = std::move(values);
  if (e.count() != e.f32.size()) throw DimensionError("DST1 entry '" + e.name + "': dims do not match values");
  return e;
}

Entry Entry::ints(std::string name, std::vector<std::uint32_t> dims, std::vector<std::int64_t> values) {
  Entry e;
  e.name = std::move(name);
  e.dtype = DType::I64;
  e.dims = std::move(dims);
  e.i64 = std::move(values);
  if (e.count() != e.i64.size()) throw DimensionError("DST1 entry '" + e.name + "': dims do not match values");
  return e;
}

Entry Entry::text(std::string name, std::string_view utf8) {
  Entry e;
  e.name = std::move(name);
  e.dtype = DType::U8;
  e.dims = {static_cast<std::uint32_t>(utf8.size())};
  e.u8.assign(utf8.begin(), utf8.end());
  return e;
}

std::string Entry::as_text() const {
  if (dtype != DType::U8) throw ParseError("DST1 entry '" + name + "' is not a byte entry");
  return std::string(u8.begin(), u8.end());
}

void Container::add(Entry entry) {
  if (entry.name.size() > 0xFFFF) throw UsageError("DST1 entry name too long");
  if (entry.dims.size() > 0xFF) throw UsageError("DST1 entry rank too large");
  for (auto& e : entries_) {
    if (e.name == entry.name) {
      e = std::move(entry);
      return;
    }
  }
  entries_.push_back(std::move(entry));
}

bool Container::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Entry& Container::get(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ParseError("DST1: missing entry '" + std::string(name) + "'");
}

std::vector<std::uint8_t> Container::encode() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put<std::uint32_t>(out, d);
    const std::uint8_t* payload = nullptr;
    std::size_t bytes = 0;
    switch (e.dtype) {
      case DType::F32:
        payload = reinterpret_cast<const std::uint8_t*>(e.f32.data());
        bytes = e.f32.size() * sizeof(float);
        break;
      case DType::I64:
        payload = reinterpret_cast<const std::uint8_t*>(e.i64.data());
        bytes = e.i64.size() * sizeof(std::int64_t);
        break;
      case DType::U8:
        payload = e.u8.data();
        bytes = e.u8.size();
        break;
    }
    if (bytes) out.insert(out.end(), payload, payload + bytes);
  }
  return out;
}

Container Container::decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ParseError("DST1: bad magic (expected \"DST1\")");
  }
  Reader r(bytes);
  r.get<std::uint32_t>("magic");
  const auto count = r.get<std::uint32_t>("entry count");
  Container c;
  for (std::uint32_t k = 0; k < count; ++k) {
    Entry e;
    const auto name_len = r.get<std::uint16_t>("name length");
    e.name.resize(name_len);
    r.copy(e.name.data(), name_len, "entry name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 2) throw ParseError("DST1: entry '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t i = 0; i < rank; ++i) e.dims.push_back(r.get<std::uint32_t>("dims"));
    const std::size_t n = e.count();
    const std::string what = "payload of '" + e.name + "'";
    switch (e.dtype) {
      case DType::F32:
        e.f32.resize(n);
        r.copy(e.f32.data(), n * sizeof(float), what);
        break;
      case DType::I64:
        e.i64.resize(n);
        r.copy(e.i64.data(), n * sizeof(std::int64_t), what);
        break;
      case DType::U8:
        e.u8.resize(n);
        r.copy(e.u8.data(), n, what);
        break;
    }
    c.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw ParseError("DST1: trailing bytes after last entry");
  return c;
}

void Container::save(const std::filesystem::path& path) const {
  const auto bytes = encode();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace dsiam::dst1
