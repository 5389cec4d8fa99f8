#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uda {

using Real = double;
using Shape = std::vector<int>;

/// Thrown for any tensor shape or layout violation.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Cache-line aligned allocator. Eigen's vectorised reductions peel a
/// prefix that depends on the address, so a fixed alignment keeps sums
/// bit-reproducible across allocations.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

/// Dense row-major array. Images are NCHW, token grids are [B, N, D].
template <class T>
class BasicTensor {
public:
    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}
    using Storage = std::vector<T, AlignedAllocator<T>>;

    BasicTensor(Shape shape, const std::vector<T>& data) : BasicTensor(std::move(shape), Storage(data.begin(), data.end())) {}
    BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_))
            throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const {
        if (i < 0) i += rank();
        if (i < 0 || i >= rank()) throw ShapeError("dimension index out of range for " + shape_str(shape_));
        return shape_[static_cast<std::size_t>(i)];
    }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty() && shape_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(int n, int c, int h, int w) { return data_[offset4(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[offset4(n, c, h, w)]; }
    T& at(int a, int b) { return data_[static_cast<std::size_t>(a) * shape_[1] + b]; }
    const T& at(int a, int b) const { return data_[static_cast<std::size_t>(a) * shape_[1] + b]; }
    T& at(int a, int b, int c) { return data_[(static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c]; }
    const T& at(int a, int b, int c) const {
        return data_[(static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor reshaped(Shape shape) const {
        if (numel_of(shape) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return BasicTensor(std::move(shape), data_);
    }

    /// Contiguous slice [begin, end) along the leading axis.
    BasicTensor slice0(int begin, int end) const {
        if (begin < 0 || end > dim(0) || begin > end) throw ShapeError("slice0 out of range");
        const std::size_t inner = dim(0) ? numel() / static_cast<std::size_t>(dim(0)) : 0;
        Shape s = shape_;
        s[0] = end - begin;
        return BasicTensor(std::move(s), Storage(data_.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                                                        data_.begin() + static_cast<std::ptrdiff_t>(end * inner)));
    }

    bool operator==(const BasicTensor& other) const = default;

private:
    std::size_t offset4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    Shape shape_;
    Storage data_;
};

using Tensor = BasicTensor<Real>;
using LabelTensor = BasicTensor<int>;

/// Stacks equally-shaped tensors along a new leading axis.
template <class T>
BasicTensor<T> stack(std::span<const BasicTensor<T>> items) {
    if (items.empty()) throw ShapeError("stack of zero tensors");
    Shape s = items.front().shape();
    for (const auto& t : items)
        if (t.shape() != s) throw ShapeError("stack shape mismatch: " + shape_str(t.shape()) + " vs " + shape_str(s));
    typename BasicTensor<T>::Storage data;
    data.reserve(items.size() * items.front().numel());
    for (const auto& t : items) data.insert(data.end(), t.values().begin(), t.values().end());
    s.insert(s.begin(), static_cast<int>(items.size()));
    return BasicTensor<T>(std::move(s), std::move(data));
}

template <class T>
BasicTensor<T> stack(const std::vector<BasicTensor<T>>& items) {
    return stack(std::span<const BasicTensor<T>>(items));
}

/// Concatenates along the leading axis.
template <class T>
BasicTensor<T> concat0(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    Shape sa = a.shape(), sb = b.shape();
    sa[0] = sb[0] = 0;
    if (sa != sb) throw ShapeError("concat0 shape mismatch");
    Shape s = a.shape();
    s[0] += b.dim(0);
    typename BasicTensor<T>::Storage data(a.values().begin(), a.values().end());
    data.insert(data.end(), b.values().begin(), b.values().end());
    return BasicTensor<T>(std::move(s), std::move(data));
}

/// Mirrors the last axis (horizontal flip for NCHW / NHW layouts).
template <class T>
BasicTensor<T> flip_last(const BasicTensor<T>& t) {
    BasicTensor<T> out = t;
    const int w = t.dim(-1);
    const std::size_t rows = t.numel() / static_cast<std::size_t>(w);
    for (std::size_t r = 0; r < rows; ++r) std::reverse(out.data() + r * w, out.data() + (r + 1) * w);
    return out;
}

}  // namespace uda
