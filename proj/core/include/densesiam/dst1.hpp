#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

// DST1 tensor container.
//
//   "DST1" | u32 entry count | entries...
//   entry: u16 name length | UTF-8 name | u8 dtype | u8 rank | rank x u32 dims | payload
//
// All integers little-endian; payloads row-major little-endian. dtype 0 is
// f32, 1 is i64 and 2 is raw bytes (used for UTF-8 text such as meta.config).
namespace dsiam::dst1 {

enum class DType : std::uint8_t { F32 = 0, I64 = 1, U8 = 2 };

struct Entry {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<std::int64_t> i64;
  std::vector<std::uint8_t> u8;

  std::size_t count() const;
  static Entry floats(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values);
  static Entry ints(std::string name, std::vector<std::uint32_t> dims, std::vector<std::int64_t> values);
  static Entry text(std::string name, std::string_view utf8);
  std::string as_text() const;
};

class Container {
 public:
  void add(Entry entry);  // replaces an entry of the same name
  bool contains(std::string_view name) const;
  const Entry& get(std::string_view name) const;  // ParseError when missing
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::uint8_t> encode() const;
  static Container decode(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  std::vector<Entry> entries_;
};

}  // namespace dsiam::dst1
