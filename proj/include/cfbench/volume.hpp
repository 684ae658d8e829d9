#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace cfbench {

struct Dims {
  int x = 0, y = 0, z = 0;

  bool operator==(const Dims&) const = default;
  std::size_t count() const { return std::size_t(x) * y * z; }
};

struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense scalar voxel grid, values in [0,1], C-order (x slowest, z fastest).
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims d, float fill = 0.0f) : dims_(d), data_(d.count(), fill) {}
  Volume3D(Dims d, std::vector<float> data) : dims_(d), data_(std::move(data)) {
    if (data_.size() != dims_.count()) throw ShapeMismatch("volume data size != dims");
  }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  float& at(int i, int j, int k) { return data_[index(i, j, k)]; }
  float at(int i, int j, int k) const { return data_[index(i, j, k)]; }

  std::size_t index(int i, int j, int k) const {
    return (std::size_t(i) * dims_.y + j) * dims_.z + k;
  }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& raw() { return data_; }
  const std::vector<float>& raw() const { return data_; }

  bool operator==(const Volume3D&) const = default;

 private:
  Dims dims_;
  std::vector<float> data_;
};

// Integer voxel labeling paired with a Volume3D; codes 0..8.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(Dims d, std::uint8_t fill = 0) : dims_(d), data_(d.count(), fill) {}

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t& at(int i, int j, int k) { return data_[index(i, j, k)]; }
  std::uint8_t at(int i, int j, int k) const { return data_[index(i, j, k)]; }

  std::size_t index(int i, int j, int k) const {
    return (std::size_t(i) * dims_.y + j) * dims_.z + k;
  }

  std::uint8_t* data() { return data_.data(); }
  const std::uint8_t* data() const { return data_.data(); }
  std::vector<std::uint8_t>& raw() { return data_; }
  const std::vector<std::uint8_t>& raw() const { return data_; }

  bool operator==(const LabelMap&) const = default;

 private:
  Dims dims_;
  std::vector<std::uint8_t> data_;
};

// 2x average-pooling; dims must be even.
Volume3D avg_pool2(const Volume3D& v);
// Repeated 2x pooling until each axis <= target (target must divide evenly).
Volume3D avg_pool_to(const Volume3D& v, Dims target);
// Nearest-neighbor 2x upsampling.
Volume3D upsample2_nearest(const Volume3D& v);
// 3D crop at origin (ox,oy,oz) with the given extent.
Volume3D crop(const Volume3D& v, int ox, int oy, int oz, Dims extent);

}  // namespace cfbench
