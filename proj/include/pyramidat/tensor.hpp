#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "pyramidat/aligned.hpp"
#include "pyramidat/errors.hpp"

namespace pyramidat {

/// Dense row-major nd-array. Kept deliberately small: shape bookkeeping plus
/// raw storage; all heavy math happens through Eigen maps over data().
template <class S>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(compute_size(shape_), S(0));
    }

    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_.size(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    // Indexing helpers for the common ranks.
    S& at(int i, int j) { return data_[idx2(i, j)]; }
    const S& at(int i, int j) const { return data_[idx2(i, j)]; }
    S& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
    const S& at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
    S& at(int b, int i, int j, int c) { return data_[idx4(b, i, j, c)]; }
    const S& at(int b, int i, int j, int c) const { return data_[idx4(b, i, j, c)]; }

    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i) * shape_[1] + j;
    }
    std::size_t idx3(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
    }
    std::size_t idx4(int b, int i, int j, int c) const {
        return ((static_cast<std::size_t>(b) * shape_[1] + i) * shape_[2] + j) * shape_[3] + c;
    }

    void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
        return out;
    }

    static std::size_t compute_size(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ConfigError("tensor dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

  private:
    std::vector<int> shape_;
    AVector<S> data_;
};

}  // namespace pyramidat
