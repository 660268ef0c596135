#include "cmrssl/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace cmrssl::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using CMapVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

// col[(ci*9 + ky*3 + kx)][y*w + x] = x[ci][y+ky-1][x+kx-1], zero outside.
template <typename T>
void im2col3x3(const T* x, int cin, int h, int w, T* col) {
    const std::size_t hw = std::size_t(h) * w;
    for (int ci = 0; ci < cin; ++ci) {
        const T* src = x + ci * hw;
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                T* dst = col + (std::size_t(ci) * 9 + ky * 3 + kx) * hw;
                const int dx = kx - 1;
                const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                for (int yy = 0; yy < h; ++yy) {
                    const int sy = yy + ky - 1;
                    T* row = dst + std::size_t(yy) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(row, row + w, T(0));
                        continue;
                    }
                    const T* srow = src + std::size_t(sy) * w;
                    std::fill(row, row + x0, T(0));
                    std::copy(srow + x0 + dx, srow + x1 + dx, row + x0);
                    std::fill(row + x1, row + w, T(0));
                }
            }
    }
}

template <typename T>
void col2im3x3(const T* col, int cin, int h, int w, T* dx) {
    const std::size_t hw = std::size_t(h) * w;
    std::fill(dx, dx + cin * hw, T(0));
    for (int ci = 0; ci < cin; ++ci) {
        T* dst = dx + ci * hw;
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const T* src = col + (std::size_t(ci) * 9 + ky * 3 + kx) * hw;
                const int ddx = kx - 1;
                const int x0 = std::max(0, -ddx), x1 = std::min(w, w - ddx);
                for (int yy = 0; yy < h; ++yy) {
                    const int sy = yy + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    const T* row = src + std::size_t(yy) * w;
                    T* drow = dst + std::size_t(sy) * w;
                    for (int xx = x0; xx < x1; ++xx) drow[xx + ddx] += row[xx];
                }
            }
    }
}

// Sums per-sample partial gradients into `out` in sample order.
template <typename T>
void reduce_ordered(const AlignedVector<T>& partial, int n, std::span<T> out) {
    const std::size_t len = out.size();
    for (int i = 0; i < n; ++i) {
        const T* p = partial.data() + i * len;
        for (std::size_t k = 0; k < len; ++k) out[k] += p[k];
    }
}

} // namespace

template <typename T>
void conv3x3_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                     Tensor<T>& y) {
    const int cin = x.c, h = x.h, wd = x.w;
    const int k = cin * 9;
    const std::size_t hw = x.plane();
    y = Tensor<T>(x.n, cout, h, wd);
    const CMapMat<T> W(w.data(), cout, k);
    const CMapVec<T> B(b.data(), cout);
#pragma omp parallel
    {
        AlignedVector<T> col(std::size_t(k) * hw);
#pragma omp for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            im2col3x3(x.sample(i), cin, h, wd, col.data());
            MapMat<T> Y(y.sample(i), cout, Eigen::Index(hw));
            Y.noalias() = W * CMapMat<T>(col.data(), k, Eigen::Index(hw));
            Y.colwise() += B;
        }
    }
}

template <typename T>
void conv3x3_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,
                      std::span<T> dw, std::span<T> db, Tensor<T>* dx) {
    const int cin = x.c, cout = dy.c, h = x.h, wd = x.w;
    const int k = cin * 9;
    const std::size_t hw = x.plane();
    const CMapMat<T> W(w.data(), cout, k);
    AlignedVector<T> dw_part(std::size_t(x.n) * cout * k);
    AlignedVector<T> db_part(std::size_t(x.n) * cout);
    if (dx) *dx = Tensor<T>(x.n, cin, h, wd);
#pragma omp parallel
    {
        AlignedVector<T> col(std::size_t(k) * hw);
#pragma omp for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            const CMapMat<T> dY(dy.sample(i), cout, Eigen::Index(hw));
            im2col3x3(x.sample(i), cin, h, wd, col.data());
            MapMat<T>(dw_part.data() + std::size_t(i) * cout * k, cout, k).noalias() =
                dY * CMapMat<T>(col.data(), k, Eigen::Index(hw)).transpose();
            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db_part.data() + std::size_t(i) * cout, cout) =
                dY.rowwise().sum();
            if (dx) {
                MapMat<T>(col.data(), k, Eigen::Index(hw)).noalias() = W.transpose() * dY;
                col2im3x3(col.data(), cin, h, wd, dx->sample(i));
            }
        }
    }
    reduce_ordered(dw_part, x.n, dw);
    reduce_ordered(db_part, x.n, db);
}

template <typename T>
void upconv2x2_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                       Tensor<T>& y) {
    const int cin = x.c, h = x.h, wd = x.w;
    const std::size_t hw = x.plane();
    y = Tensor<T>(x.n, cout, 2 * h, 2 * wd);
    const CMapMat<T> W(w.data(), cout * 4, cin);
#pragma omp parallel
    {
        RowMat<T> z(cout * 4, Eigen::Index(hw));
#pragma omp for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            z.noalias() = W * CMapMat<T>(x.sample(i), cin, Eigen::Index(hw));
            for (int co = 0; co < cout; ++co) {
                T* out = y.channel(i, co);
                for (int a = 0; a < 2; ++a)
                    for (int bb = 0; bb < 2; ++bb) {
                        const T* zr = z.data() + (std::size_t(co) * 4 + a * 2 + bb) * hw;
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < wd; ++xx)
                                out[std::size_t(2 * yy + a) * (2 * wd) + 2 * xx + bb] =
                                    zr[std::size_t(yy) * wd + xx] + b[co];
                    }
            }
        }
    }
}

template <typename T>
void upconv2x2_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,
                        std::span<T> dw, std::span<T> db, Tensor<T>* dx) {
    const int cin = x.c, cout = dy.c, h = x.h, wd = x.w;
    const std::size_t hw = x.plane();
    const CMapMat<T> W(w.data(), cout * 4, cin);
    AlignedVector<T> dw_part(std::size_t(x.n) * cout * 4 * cin);
    AlignedVector<T> db_part(std::size_t(x.n) * cout, T(0));
    if (dx) *dx = Tensor<T>(x.n, cin, h, wd);
#pragma omp parallel
    {
        RowMat<T> dz(cout * 4, Eigen::Index(hw));
#pragma omp for schedule(static)
        for (int i = 0; i < x.n; ++i) {
            for (int co = 0; co < cout; ++co) {
                const T* g = dy.channel(i, co);
                T bsum = 0;
                for (int a = 0; a < 2; ++a)
                    for (int bb = 0; bb < 2; ++bb) {
                        T* zr = dz.data() + (std::size_t(co) * 4 + a * 2 + bb) * hw;
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < wd; ++xx) {
                                const T v = g[std::size_t(2 * yy + a) * (2 * wd) + 2 * xx + bb];
                                zr[std::size_t(yy) * wd + xx] = v;
                                bsum += v;
                            }
                    }
                db_part[std::size_t(i) * cout + co] = bsum;
            }
            const CMapMat<T> X(x.sample(i), cin, Eigen::Index(hw));
            MapMat<T>(dw_part.data() + std::size_t(i) * cout * 4 * cin, cout * 4, cin).noalias() =
                dz * X.transpose();
            if (dx)
                MapMat<T>(dx->sample(i), cin, Eigen::Index(hw)).noalias() = W.transpose() * dz;
        }
    }
    reduce_ordered(dw_part, x.n, dw);
    reduce_ordered(db_part, x.n, db);
}

template <typename T>
void conv1x1_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                     Tensor<T>& y) {
    const std::size_t hw = x.plane();
    y = Tensor<T>(x.n, cout, x.h, x.w);
    const CMapMat<T> W(w.data(), cout, x.c);
    const CMapVec<T> B(b.data(), cout);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < x.n; ++i) {
        MapMat<T> Y(y.sample(i), cout, Eigen::Index(hw));
        Y.noalias() = W * CMapMat<T>(x.sample(i), x.c, Eigen::Index(hw));
        Y.colwise() += B;
    }
}

template <typename T>
void conv1x1_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,
                      std::span<T> dw, std::span<T> db, Tensor<T>* dx) {
    const int cin = x.c, cout = dy.c;
    const std::size_t hw = x.plane();
    const CMapMat<T> W(w.data(), cout, cin);
    AlignedVector<T> dw_part(std::size_t(x.n) * cout * cin);
    AlignedVector<T> db_part(std::size_t(x.n) * cout);
    if (dx) *dx = Tensor<T>(x.n, cin, x.h, x.w);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < x.n; ++i) {
        const CMapMat<T> dY(dy.sample(i), cout, Eigen::Index(hw));
        MapMat<T>(dw_part.data() + std::size_t(i) * cout * cin, cout, cin).noalias() =
            dY * CMapMat<T>(x.sample(i), cin, Eigen::Index(hw)).transpose();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db_part.data() + std::size_t(i) * cout, cout) =
            dY.rowwise().sum();
        if (dx) MapMat<T>(dx->sample(i), cin, Eigen::Index(hw)).noalias() = W.transpose() * dY;
    }
    reduce_ordered(dw_part, x.n, dw);
    reduce_ordered(db_part, x.n, db);
}

template <typename T>
void relu_forward(Tensor<T>& x) {
    T* p = x.data.data();
    const std::ptrdiff_t n = std::ptrdiff_t(x.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) p[i] = p[i] > T(0) ? p[i] : T(0);
}

template <typename T>
void relu_backward(const Tensor<T>& y, Tensor<T>& dy) {
    const T* out = y.data.data();
    T* g = dy.data.data();
    const std::ptrdiff_t n = std::ptrdiff_t(y.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        if (!(out[i] > T(0))) g[i] = T(0);
}

template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::uint8_t>& argmax) {
    const int oh = x.h / 2, ow = x.w / 2;
    y = Tensor<T>(x.n, x.c, oh, ow);
    argmax.assign(y.size(), 0);
    const int planes = x.n * x.c;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const T* src = x.data.data() + std::size_t(p) * x.plane();
        T* dst = y.data.data() + std::size_t(p) * y.plane();
        std::uint8_t* am = argmax.data() + std::size_t(p) * y.plane();
        for (int yy = 0; yy < oh; ++yy)
            for (int xx = 0; xx < ow; ++xx) {
                const T* q = src + std::size_t(2 * yy) * x.w + 2 * xx;
                const T v[4] = {q[0], q[1], q[x.w], q[x.w + 1]};
                int best = 0;
                for (int k = 1; k < 4; ++k)
                    if (v[k] > v[best]) best = k;
                dst[std::size_t(yy) * ow + xx] = v[best];
                am[std::size_t(yy) * ow + xx] = std::uint8_t(best);
            }
    }
}

template <typename T>
void maxpool2_backward(const Tensor<T>& dy, const std::vector<std::uint8_t>& argmax, Tensor<T>& dx) {
    const int planes = dy.n * dy.c;
    const int w2 = dy.w * 2;
    dx = Tensor<T>(dy.n, dy.c, dy.h * 2, w2);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const T* g = dy.data.data() + std::size_t(p) * dy.plane();
        const std::uint8_t* am = argmax.data() + std::size_t(p) * dy.plane();
        T* dst = dx.data.data() + std::size_t(p) * dx.plane();
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) {
                const std::size_t o = std::size_t(yy) * dy.w + xx;
                const int k = am[o];
                dst[std::size_t(2 * yy + k / 2) * w2 + 2 * xx + k % 2] = g[o];
            }
    }
}

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                             Tensor<T>* dlogits) {
    const int k = logits.c;
    const std::size_t hw = logits.plane();
    const double inv = 1.0 / double(std::size_t(logits.n) * hw);
    if (dlogits) *dlogits = Tensor<T>(logits.n, k, logits.h, logits.w);
    std::vector<double> per_sample(logits.n, 0.0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < logits.n; ++i) {
        const T* z = logits.sample(i);
        const std::uint8_t* lab = labels.data() + std::size_t(i) * hw;
        double acc = 0.0;
        std::vector<double> e(k);
        for (std::size_t p = 0; p < hw; ++p) {
            double m = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) m = std::max(m, double(z[c * hw + p]));
            double s = 0.0;
            for (int c = 0; c < k; ++c) s += (e[c] = std::exp(double(z[c * hw + p]) - m));
            const int y = lab[p];
            acc += std::log(s) - (double(z[y * hw + p]) - m);
            if (dlogits) {
                T* g = dlogits->sample(i);
                for (int c = 0; c < k; ++c) g[c * hw + p] = T((e[c] / s - (c == y ? 1.0 : 0.0)) * inv);
            }
        }
        per_sample[i] = acc;
    }
    double total = 0.0;
    for (double v : per_sample) total += v;
    return total * inv;
}

template <typename T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
    y = Tensor<T>(a.n, a.c + b.c, a.h, a.w);
    for (int i = 0; i < a.n; ++i) {
        std::copy(a.sample(i), a.sample(i) + a.sample_size(), y.sample(i));
        std::copy(b.sample(i), b.sample(i) + b.sample_size(), y.sample(i) + a.sample_size());
    }
}

template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>* da, Tensor<T>* db) {
    if (da) *da = Tensor<T>(dy.n, ca, dy.h, dy.w);
    if (db) *db = Tensor<T>(dy.n, dy.c - ca, dy.h, dy.w);
    const std::size_t na = std::size_t(ca) * dy.plane();
    for (int i = 0; i < dy.n; ++i) {
        const T* src = dy.sample(i);
        if (da) std::copy(src, src + na, da->sample(i));
        if (db) std::copy(src + na, src + dy.sample_size(), db->sample(i));
    }
}

#define CMRSSL_INSTANTIATE(T)                                                                     \
    template void conv3x3_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,   \
                                     int, Tensor<T>&);                                            \
    template void conv3x3_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&,    \
                                      std::span<T>, std::span<T>, Tensor<T>*);                    \
    template void upconv2x2_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, \
                                       int, Tensor<T>&);                                          \
    template void upconv2x2_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&,  \
                                        std::span<T>, std::span<T>, Tensor<T>*);                  \
    template void conv1x1_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,   \
                                     int, Tensor<T>&);                                            \
    template void conv1x1_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&,    \
                                      std::span<T>, std::span<T>, Tensor<T>*);                    \
    template void relu_forward<T>(Tensor<T>&);                                                    \
    template void relu_backward<T>(const Tensor<T>&, Tensor<T>&);                                 \
    template void maxpool2_forward<T>(const Tensor<T>&, Tensor<T>&, std::vector<std::uint8_t>&);  \
    template void maxpool2_backward<T>(const Tensor<T>&, const std::vector<std::uint8_t>&,        \
                                       Tensor<T>&);                                               \
    template double softmax_cross_entropy<T>(const Tensor<T>&, std::span<const std::uint8_t>,     \
                                             Tensor<T>*);                                         \
    template void concat_channels<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);             \
    template void split_channels<T>(const Tensor<T>&, int, Tensor<T>*, Tensor<T>*);

CMRSSL_INSTANTIATE(float)
CMRSSL_INSTANTIATE(double)
#undef CMRSSL_INSTANTIATE

} // namespace cmrssl::kernels
