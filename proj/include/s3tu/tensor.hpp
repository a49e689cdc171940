#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <new>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace s3tu {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message always names the op and both shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for malformed or truncated files (tensor, checkpoint, PGM, manifest).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a computation produces NaN/Inf where finite values are required.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

/// 64-byte aligned storage. Eigen picks vectorized code paths by pointer alignment, so a
/// fixed base alignment keeps reductions bitwise identical wherever a buffer lands.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles. Value type; copies are deep.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_dims();
        data_.assign(s3tu::numel(shape_), fill);
    }

    Tensor(Shape shape, const std::vector<double>& data)
        : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

    Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != s3tu::numel(shape_))
            throw ShapeError("Tensor: shape " + to_string(shape_) + " needs " +
                             std::to_string(s3tu::numel(shape_)) + " values, got " +
                             std::to_string(data_.size()));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, Buffer{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return shape_.empty(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
    double& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }

    /// Same data under a new shape of equal element count.
    Tensor reshaped(Shape shape) const& {
        Tensor t(*this);
        return std::move(t).reshaped(std::move(shape));
    }
    Tensor reshaped(Shape shape) && {
        if (s3tu::numel(shape) != data_.size())
            throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
        shape_ = std::move(shape);
        return std::move(*this);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_dims() const {
        for (auto d : shape_)
            if (d == 0) throw ShapeError("Tensor: zero-sized dimension in " + to_string(shape_));
    }

    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != shape_.size())
            throw ShapeError("Tensor::at: rank " + std::to_string(index.size()) + " index into " +
                             to_string(shape_));
        std::size_t off = 0;
        std::size_t axis = 0;
        for (auto i : index) {
            if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    Buffer data_;
};

// ---------------------------------------------------------------------------
// Binary serialization: "S3TU", u32 version, u32 rank, rank x u64 dims,
// float64 payload. Everything little-endian.

namespace io {

inline constexpr char kTensorMagic[4] = {'S', '3', 'T', 'U'};
inline constexpr std::uint32_t kTensorVersion = 1;

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    std::array<unsigned char, sizeof(T)> bytes{};
    if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
        throw FormatError(std::string("unexpected end of stream while reading ") + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic, 4);
    write_le<std::uint32_t>(os, kTensorVersion);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_le<std::uint64_t>(os, d);
    for (double v : t.data()) write_le<double>(os, v);
    if (!os) throw FormatError("write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("read_tensor: missing magic");
    if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("read_tensor: bad magic (expected S3TU)");
    auto version = read_le<std::uint32_t>(is, "tensor version");
    if (version != kTensorVersion)
        throw FormatError("read_tensor: unsupported version " + std::to_string(version));
    auto rank = read_le<std::uint32_t>(is, "tensor rank");
    if (rank == 0 || rank > 16) throw FormatError("read_tensor: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = static_cast<std::size_t>(read_le<std::uint64_t>(is, "tensor dims"));
        if (d == 0 || d > (std::size_t{1} << 32)) throw FormatError("read_tensor: implausible dimension");
        count *= d;
        if (count > (std::size_t{1} << 34)) throw FormatError("read_tensor: tensor too large");
    }
    Buffer data(count);
    for (auto& v : data) v = read_le<double>(is, "tensor payload");
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    return read_tensor(is);
}

}  // namespace io
}  // namespace s3tu
