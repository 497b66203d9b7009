#pragma once
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ekp/tensor.hpp"

namespace ekp::io {

// NumPy .npy (v1.0, '<f8', C order) — the portable weight array format.
void write_npy(const std::filesystem::path& path, const ad::Tensor& t);
ad::Tensor read_npy(const std::filesystem::path& path);

// Flat binary array for memory-bank logits: magic, u64 ndim, u64 dims,
// little-endian float64 payload, 8-byte aligned so it can be mapped directly.
void write_arr(const std::filesystem::path& path, const ad::Tensor& t);

// Read-only memory map over an .arr file.
class MappedArray {
 public:
  MappedArray() = default;
  explicit MappedArray(const std::filesystem::path& path);
  ~MappedArray();
  MappedArray(MappedArray&&) noexcept;
  MappedArray& operator=(MappedArray&&) noexcept;
  MappedArray(const MappedArray&) = delete;
  MappedArray& operator=(const MappedArray&) = delete;

  const std::vector<int>& shape() const { return shape_; }
  std::span<const double> data() const { return data_; }
  bool mapped() const { return base_ != nullptr; }

 private:
  void* base_ = nullptr;
  std::size_t length_ = 0;
  std::vector<int> shape_;
  std::span<const double> data_;
};

}  // namespace ekp::io
