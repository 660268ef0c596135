#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <vector>

namespace cmrssl {

/// 64-byte aligned storage. Vectorised reductions peel by address alignment,
/// so buffers handed to the kernels must have an alignment that depends on
/// their shape only; otherwise the summation order (and the low bits of the
/// result) would change from one allocation to the next.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// NCHW activation tensor.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    AlignedVector<T> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, T fill = T{})
        : n(n_), c(c_), h(h_), w(w_), data(std::size_t(n_) * c_ * h_ * w_, fill) {}

    std::size_t plane() const { return std::size_t(h) * w; }
    std::size_t sample_size() const { return std::size_t(c) * plane(); }
    std::size_t size() const { return data.size(); }

    T* sample(int i) { return data.data() + i * sample_size(); }
    const T* sample(int i) const { return data.data() + i * sample_size(); }
    T* channel(int i, int ch) { return sample(i) + ch * plane(); }
    const T* channel(int i, int ch) const { return sample(i) + ch * plane(); }

    T& at(int i, int ch, int y, int x) { return data[((std::size_t(i) * c + ch) * h + y) * w + x]; }
    const T& at(int i, int ch, int y, int x) const {
        return data[((std::size_t(i) * c + ch) * h + y) * w + x];
    }

    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

} // namespace cmrssl
