#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast {

#ifdef NOWCAST_REAL32
using Scalar = float;
#else
using Scalar = double;
#endif

// Dense shape of rank 1..4. Rank-4 tensors are [batch, height, width, channels],
// row-major with channels fastest.
struct Shape {
    std::array<std::int64_t, 4> d{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims) {
        rank = static_cast<int>(dims.size());
        if (rank < 1 || rank > 4)
            fail(ErrorCode::shape, "tensor rank must be 1..4");
        int i = 0;
        for (auto v : dims) d[i++] = v;
        for (; i < 4; ++i) d[i] = 1;
        validate();
    }

    void validate() const {
        for (int i = 0; i < rank; ++i)
            if (d[i] < 1)
                fail(ErrorCode::shape,
                     "shape extent must be >= 1, got " + std::to_string(d[i]));
    }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (d[i] != o.d[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank; ++i) {
            if (i) s += ",";
            s += std::to_string(d[i]);
        }
        return s + "]";
    }
};

// Owning dense tensor. Values are contiguous; invariant: data.size() == shape.numel().
struct Tensor {
    Shape shape;
    std::vector<Scalar> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.numel()), Scalar(0)) {}
    Tensor(Shape s, std::vector<Scalar> v) : shape(s), data(std::move(v)) {
        if (static_cast<std::int64_t>(data.size()) != shape.numel())
            fail(ErrorCode::shape, "tensor data length " + std::to_string(data.size()) +
                                       " does not match shape " + shape.str());
    }

    static Tensor zeros(Shape s) { return Tensor(s); }
    static Tensor full(Shape s, Scalar v) {
        Tensor t(s);
        for (auto& x : t.data) x = v;
        return t;
    }

    std::int64_t numel() const { return shape.numel(); }
    Scalar* ptr() { return data.data(); }
    const Scalar* ptr() const { return data.data(); }

    // Rank-4 accessors, for tests and cold paths.
    Scalar& at(std::int64_t b, std::int64_t y, std::int64_t x, std::int64_t c) {
        return data[static_cast<std::size_t>(
            ((b * shape.d[1] + y) * shape.d[2] + x) * shape.d[3] + c)];
    }
    Scalar at(std::int64_t b, std::int64_t y, std::int64_t x, std::int64_t c) const {
        return data[static_cast<std::size_t>(
            ((b * shape.d[1] + y) * shape.d[2] + x) * shape.d[3] + c)];
    }

    void fill(Scalar v) {
        for (auto& x : data) x = v;
    }
};

// FNV-1a over raw tensor bytes; used for replica-consistency hashing.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace nowcast
