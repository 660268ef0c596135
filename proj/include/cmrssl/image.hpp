#pragma once

#include <cassert>
#include <cstdint>
#include <span>
#include <vector>

namespace cmrssl {

struct GridSize {
    int rows = 0;
    int cols = 0;
    friend bool operator==(const GridSize&, const GridSize&) = default;
    std::size_t count() const { return std::size_t(rows) * std::size_t(cols); }
};

/// Dense row-major 2D grid.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{})
        : size_{rows, cols}, data_(std::size_t(rows) * std::size_t(cols), fill) {}
    explicit Grid(GridSize s, T fill = T{}) : Grid(s.rows, s.cols, fill) {}

    int rows() const { return size_.rows; }
    int cols() const { return size_.cols; }
    GridSize size() const { return size_; }
    bool empty() const { return data_.empty(); }

    T& operator()(int r, int c) {
        assert(r >= 0 && r < size_.rows && c >= 0 && c < size_.cols);
        return data_[std::size_t(r) * size_.cols + c];
    }
    const T& operator()(int r, int c) const {
        assert(r >= 0 && r < size_.rows && c >= 0 && c < size_.cols);
        return data_[std::size_t(r) * size_.cols + c];
    }
    bool contains(int r, int c) const {
        return r >= 0 && r < size_.rows && c >= 0 && c < size_.cols;
    }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    GridSize size_;
    std::vector<T> data_;
};

using Image = Grid<float>;

/// Integer label image with a declared label count K; values live in [0, K-1].
struct LabelMap {
    Grid<std::uint8_t> grid;
    int num_labels = 0;

    LabelMap() = default;
    LabelMap(GridSize s, int k) : grid(s, 0), num_labels(k) {}

    GridSize size() const { return grid.size(); }
    bool valid() const {
        for (auto v : grid.values())
            if (int(v) >= num_labels) return false;
        return true;
    }
    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

} // namespace cmrssl
