#include "merba/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace merba {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

namespace {
void check_extents(const Shape& shape) {
    for (int64_t e : shape)
        MERBA_CHECK(e >= 1, "tensor extent must be >= 1, got shape ", shape_str(shape));
}
}  // namespace

Tensor::Tensor(Shape shape) : Tensor(std::move(shape), {}) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : Tensor(std::move(shape), std::move(data), default_dtype()) {}

Tensor::Tensor(Shape shape, std::vector<double> data, Dtype dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
    check_extents(shape_);
    size_ = numel(shape_);
    if (data.empty()) data.assign(static_cast<size_t>(size_), 0.0);
    MERBA_CHECK(static_cast<int64_t>(data.size()) == size_,
                "tensor data length ", data.size(), " does not match shape ",
                shape_str(shape_));
    if (dtype_ == Dtype::F32) quantize_f32(data);
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> d(static_cast<size_t>(numel(shape)), value);
    return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> d(static_cast<size_t>(numel(shape)));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::normal(Shape shape, Rng& rng, double stddev) {
    std::vector<double> d(static_cast<size_t>(numel(shape)));
    for (auto& x : d) x = rng.normal() * stddev;
    return Tensor(std::move(shape), std::move(d));
}

double Tensor::item() const {
    MERBA_CHECK(size_ == 1, "item() requires a scalar tensor, shape is ",
                shape_str(shape_));
    return (*data_)[0];
}

bool Tensor::all_finite() const {
    for (double x : *data_)
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.node = -1;
    t.tape = nullptr;
    return t;
}

void Tensor::quantize_f32(std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

Tensor TensorBuilder::finalize() {
    return Tensor(std::move(shape_), std::move(data_));
}

namespace {
template <typename T>
void write_le(std::ofstream& os, T v) {
    // assumes little-endian host, which this project targets
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_le(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void save_mert(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    MERBA_CHECK(os.good(), "cannot open for write: ", path);
    os.write("MERT", 4);
    write_le<uint8_t>(os, 0x01);
    write_le<uint8_t>(os, t.dtype() == Dtype::F32 ? 0 : 1);
    write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int64_t e : t.shape()) write_le<uint64_t>(os, static_cast<uint64_t>(e));
    if (t.dtype() == Dtype::F32) {
        for (int64_t i = 0; i < t.size(); ++i)
            write_le<float>(os, static_cast<float>(t.at(i)));
    } else {
        for (int64_t i = 0; i < t.size(); ++i) write_le<double>(os, t.at(i));
    }
    MERBA_CHECK(os.good(), "write failed: ", path);
}

Tensor load_mert(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    MERBA_CHECK(is.good(), "cannot open: ", path);
    char magic[4] = {};
    is.read(magic, 4);
    MERBA_CHECK(is.good() && std::memcmp(magic, "MERT", 4) == 0,
                "not a MERT file: ", path);
    const uint8_t version = read_le<uint8_t>(is);
    MERBA_CHECK(version == 0x01, "unsupported MERT version ", int(version),
                " in ", path);
    const uint8_t dtype_byte = read_le<uint8_t>(is);
    MERBA_CHECK(dtype_byte <= 1, "bad MERT dtype byte ", int(dtype_byte));
    const uint8_t rank = read_le<uint8_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<int64_t>(read_le<uint64_t>(is));
    const int64_t n = numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    if (dtype_byte == 0) {
        for (auto& x : data) x = static_cast<double>(read_le<float>(is));
    } else {
        for (auto& x : data) x = read_le<double>(is);
    }
    MERBA_CHECK(is.good(), "truncated MERT file: ", path);
    return Tensor(std::move(shape), std::move(data),
                  dtype_byte == 0 ? Dtype::F32 : Dtype::F64);
}

}  // namespace merba
