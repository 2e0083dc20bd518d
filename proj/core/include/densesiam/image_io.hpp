#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "densesiam/tensor.hpp"

namespace dsiam {

// Binary PPM ("P6", maxval 255) <-> [3,H,W] tensor with values in [0,1].
TensorF decode_ppm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_ppm(const TensorF& image);

TensorF load_ppm(const std::filesystem::path& path);
void save_ppm(const TensorF& image, const std::filesystem::path& path);

// Binary PGM ("P5") holding one 8-bit label per pixel.
struct LabelMap {
  std::size_t width = 0, height = 0;
  std::vector<std::int64_t> labels;  // row-major
};

LabelMap decode_pgm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_pgm(const LabelMap& map);
LabelMap load_pgm(const std::filesystem::path& path);
void save_pgm(const LabelMap& map, const std::filesystem::path& path);

}  // namespace dsiam
