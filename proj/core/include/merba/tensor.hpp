#pragma once
// Dense row-major tensor. 4-D feature maps use N x H x W x C layout so a
// 7x7 window is a contiguous slab once the window grid axes are hoisted.
//
// Data is held behind a shared_ptr and treated as immutable after
// construction; copies are shallow. In F32 mode every element is rounded to
// float32 at creation so values survive a 32-bit file round trip bit-exactly.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "merba/common.hpp"

namespace merba {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shape_eq(const Shape& a, const Shape& b);

class Tape;

class Tensor {
  public:
    Tensor() = default;
    // Zero-filled.
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);
    Tensor(Shape shape, std::vector<double> data, Dtype dtype);

    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor normal(Shape shape, Rng& rng, double stddev);

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return size_; }
    Dtype dtype() const { return dtype_; }
    bool defined() const { return static_cast<bool>(data_); }

    const double* data() const { return data_->data(); }
    const std::vector<double>& vec() const { return *data_; }
    double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    double item() const;

    bool all_finite() const;

    // Differentiation handle; -1 when the tensor is not on a tape.
    int node = -1;
    Tape* tape = nullptr;

    // Value-identical tensor detached from any tape.
    Tensor detached() const;

    // Round every element to float32. Applied automatically in F32 mode.
    static void quantize_f32(std::vector<double>& v);

  private:
    Shape shape_;
    int64_t size_ = 0;
    Dtype dtype_ = Dtype::F32;
    std::shared_ptr<const std::vector<double>> data_;
};

// Mutable staging buffer for op kernels; finalize() freezes it into a Tensor
// (applying f32 rounding when the global mode asks for it).
class TensorBuilder {
  public:
    explicit TensorBuilder(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<size_t>(numel(shape_)), 0.0) {}
    double* data() { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    std::vector<double>& vec() { return data_; }
    Tensor finalize();

  private:
    Shape shape_;
    std::vector<double> data_;
};

// "MERT" container: magic 'M','E','R','T', version byte 0x01, dtype byte
// (0 = f32, 1 = f64), rank byte, rank little-endian u64 extents, then the
// row-major little-endian payload.
void save_mert(const Tensor& t, const std::string& path);
Tensor load_mert(const std::string& path);

}  // namespace merba
