#pragma once

#include <cstddef>
#include <cstdlib>
#include <new>
#include <vector>

namespace pyramidat {

// All numeric buffers that Eigen maps over are 64-byte aligned. SIMD
// reductions peel differently for different base alignments, so without this
// the low bits of accumulated gradients would depend on heap layout and
// bitwise run-to-run determinism would be lost.
inline constexpr std::size_t kBufferAlign = 64;

template <class T>
struct AlignedAllocator {
    using value_type = T;

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        const std::size_t bytes = (n * sizeof(T) + kBufferAlign - 1) / kBufferAlign *
                                  kBufferAlign;
        void* p = std::aligned_alloc(kBufferAlign, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) noexcept { std::free(p); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const {
        return true;
    }
};

template <class T>
using AVector = std::vector<T, AlignedAllocator<T>>;

}  // namespace pyramidat
