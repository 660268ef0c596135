// Serial reference kernels: direct loops, no lowering, no threading.

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmrssl/kernels.hpp"

namespace cmrssl::reference {

template <typename T>
void conv3x3_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                     Tensor<T>& y) {
    y = Tensor<T>(x.n, cout, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int co = 0; co < cout; ++co)
            for (int yy = 0; yy < x.h; ++yy)
                for (int xx = 0; xx < x.w; ++xx) {
                    T acc = b[co];
                    for (int ci = 0; ci < x.c; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                                acc += w[((co * x.c + ci) * 3 + ky) * 3 + kx] * x.at(i, ci, sy, sx);
                            }
                    y.at(i, co, yy, xx) = acc;
                }
}

template <typename T>
void conv3x3_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,
                      std::span<T> dw, std::span<T> db, Tensor<T>* dx) {
    if (dx) *dx = Tensor<T>(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int co = 0; co < dy.c; ++co)
            for (int yy = 0; yy < x.h; ++yy)
                for (int xx = 0; xx < x.w; ++xx) {
                    const T g = dy.at(i, co, yy, xx);
                    db[co] += g;
                    for (int ci = 0; ci < x.c; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                                const std::size_t wi = ((co * x.c + ci) * 3 + ky) * 3 + kx;
                                dw[wi] += g * x.at(i, ci, sy, sx);
                                if (dx) dx->at(i, ci, sy, sx) += g * w[wi];
                            }
                }
}

template <typename T>
void upconv2x2_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                       Tensor<T>& y) {
    y = Tensor<T>(x.n, cout, 2 * x.h, 2 * x.w);
    for (int i = 0; i < x.n; ++i)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < y.h; ++oy)
                for (int ox = 0; ox < y.w; ++ox) {
                    const int a = oy % 2, bb = ox % 2;
                    T acc = b[co];
                    for (int ci = 0; ci < x.c; ++ci)
                        acc += w[((co * 2 + a) * 2 + bb) * x.c + ci] * x.at(i, ci, oy / 2, ox / 2);
                    y.at(i, co, oy, ox) = acc;
                }
}

template <typename T>
void upconv2x2_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,
                        std::span<T> dw, std::span<T> db, Tensor<T>* dx) {
    if (dx) *dx = Tensor<T>(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int co = 0; co < dy.c; ++co)
            for (int oy = 0; oy < dy.h; ++oy)
                for (int ox = 0; ox < dy.w; ++ox) {
                    const int a = oy % 2, bb = ox % 2;
                    const T g = dy.at(i, co, oy, ox);
                    db[co] += g;
                    for (int ci = 0; ci < x.c; ++ci) {
                        const std::size_t wi = ((co * 2 + a) * 2 + bb) * x.c + ci;
                        dw[wi] += g * x.at(i, ci, oy / 2, ox / 2);
                        if (dx) dx->at(i, ci, oy / 2, ox / 2) += g * w[wi];
                    }
                }
}

template <typename T>
void conv1x1_forward(const Tensor<T>& x, std::span<const T> w, std::span<const T> b, int cout,
                     Tensor<T>& y) {
    y = Tensor<T>(x.n, cout, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int co = 0; co < cout; ++co)
            for (int yy = 0; yy < x.h; ++yy)
                for (int xx = 0; xx < x.w; ++xx) {
                    T acc = b[co];
                    for (int ci = 0; ci < x.c; ++ci) acc += w[co * x.c + ci] * x.at(i, ci, yy, xx);
                    y.at(i, co, yy, xx) = acc;
                }
}

template <typename T>
void conv1x1_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy,
                      std::span<T> dw, std::span<T> db, Tensor<T>* dx) {
    if (dx) *dx = Tensor<T>(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int co = 0; co < dy.c; ++co)
            for (int yy = 0; yy < x.h; ++yy)
                for (int xx = 0; xx < x.w; ++xx) {
                    const T g = dy.at(i, co, yy, xx);
                    db[co] += g;
                    for (int ci = 0; ci < x.c; ++ci) {
                        dw[co * x.c + ci] += g * x.at(i, ci, yy, xx);
                        if (dx) dx->at(i, ci, yy, xx) += g * w[co * x.c + ci];
                    }
                }
}

template <typename T>
void relu_forward(Tensor<T>& x) {
    for (auto& v : x.data) v = std::max(v, T(0));
}

template <typename T>
void relu_backward(const Tensor<T>& y, Tensor<T>& dy) {
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y.data[i] <= T(0)) dy.data[i] = T(0);
}

template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::uint8_t>& argmax) {
    y = Tensor<T>(x.n, x.c, x.h / 2, x.w / 2);
    argmax.assign(y.size(), 0);
    std::size_t o = 0;
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c)
            for (int yy = 0; yy < y.h; ++yy)
                for (int xx = 0; xx < y.w; ++xx, ++o) {
                    int best = 0;
                    T bv = x.at(i, c, 2 * yy, 2 * xx);
                    for (int k = 1; k < 4; ++k) {
                        const T v = x.at(i, c, 2 * yy + k / 2, 2 * xx + k % 2);
                        if (v > bv) { bv = v; best = k; }
                    }
                    y.data[o] = bv;
                    argmax[o] = std::uint8_t(best);
                }
}

template <typename T>
void maxpool2_backward(const Tensor<T>& dy, const std::vector<std::uint8_t>& argmax, Tensor<T>& dx) {
    dx = Tensor<T>(dy.n, dy.c, 2 * dy.h, 2 * dy.w);
    std::size_t o = 0;
    for (int i = 0; i < dy.n; ++i)
        for (int c = 0; c < dy.c; ++c)
            for (int yy = 0; yy < dy.h; ++yy)
                for (int xx = 0; xx < dy.w; ++xx, ++o) {
                    const int k = argmax[o];
                    dx.at(i, c, 2 * yy + k / 2, 2 * xx + k % 2) += dy.data[o];
                }
}

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                             Tensor<T>* dlogits) {
    const double count = double(logits.n) * logits.h * logits.w;
    if (dlogits) *dlogits = Tensor<T>(logits.n, logits.c, logits.h, logits.w);
    double total = 0.0;
    std::size_t p = 0;
    for (int i = 0; i < logits.n; ++i)
        for (int yy = 0; yy < logits.h; ++yy)
            for (int xx = 0; xx < logits.w; ++xx, ++p) {
                double m = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < logits.c; ++c) m = std::max(m, double(logits.at(i, c, yy, xx)));
                double s = 0.0;
                for (int c = 0; c < logits.c; ++c) s += std::exp(double(logits.at(i, c, yy, xx)) - m);
                const int y = labels[p];
                total += -(double(logits.at(i, y, yy, xx)) - m - std::log(s));
                if (dlogits)
                    for (int c = 0; c < logits.c; ++c) {
                        const double prob = std::exp(double(logits.at(i, c, yy, xx)) - m) / s;
                        dlogits->at(i, c, yy, xx) = T((prob - (c == y)) / count);
                    }
            }
    return total / count;
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
                                             Tensor<T>*);

CMRSSL_INSTANTIATE(float)
CMRSSL_INSTANTIATE(double)
#undef CMRSSL_INSTANTIATE

} // namespace cmrssl::reference
