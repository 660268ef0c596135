#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <tuple>

#include <omp.h>

#include "cmrssl/kernels.hpp"

using namespace cmrssl;

namespace {

template <typename T>
Tensor<T> random_tensor(std::mt19937_64& rng, int n, int c, int h, int w) {
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor<T> t(n, c, h, w);
    for (auto& v : t.data) v = T(d(rng));
    return t;
}

template <typename T>
std::vector<T> random_vec(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> d(0.0, 0.5);
    std::vector<T> v(n);
    for (auto& x : v) x = T(d(rng));
    return v;
}

template <typename A, typename B>
double max_rel(const A& a, const B& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / (1.0 + std::abs(double(b[i]))));
    return worst;
}

struct Shape {
    int n, cin, cout, h, w;
};

Shape random_shape(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> batch(1, 3), ch(1, 6), half(1, 6);
    return {batch(rng), ch(rng), ch(rng), 2 * half(rng), 2 * half(rng)};
}

template <typename T>
void compare_layers(double tol) {
    std::mt19937_64 rng(sizeof(T));
    for (int trial = 0; trial < 25; ++trial) {
        const Shape s = random_shape(rng);
        const auto x = random_tensor<T>(rng, s.n, s.cin, s.h, s.w);

        // conv3x3
        {
            const auto w = random_vec<T>(rng, std::size_t(s.cout) * s.cin * 9);
            const auto b = random_vec<T>(rng, std::size_t(s.cout));
            Tensor<T> yf, yr;
            kernels::conv3x3_forward<T>(x, w, b, s.cout, yf);
            reference::conv3x3_forward<T>(x, w, b, s.cout, yr);
            CHECK(yf.same_shape(yr));
            CHECK(max_rel(yf.data, yr.data) < tol);
            const auto dy = random_tensor<T>(rng, s.n, s.cout, s.h, s.w);
            std::vector<T> dwf(w.size()), dbf(b.size()), dwr(w.size()), dbr(b.size());
            Tensor<T> dxf, dxr;
            kernels::conv3x3_backward<T>(x, w, dy, dwf, dbf, &dxf);
            reference::conv3x3_backward<T>(x, w, dy, dwr, dbr, &dxr);
            CHECK(max_rel(dwf, dwr) < tol);
            CHECK(max_rel(dbf, dbr) < tol);
            CHECK(max_rel(dxf.data, dxr.data) < tol);
        }
        // upconv2x2
        {
            const auto w = random_vec<T>(rng, std::size_t(s.cout) * 4 * s.cin);
            const auto b = random_vec<T>(rng, std::size_t(s.cout));
            Tensor<T> yf, yr;
            kernels::upconv2x2_forward<T>(x, w, b, s.cout, yf);
            reference::upconv2x2_forward<T>(x, w, b, s.cout, yr);
            CHECK(yf.h == 2 * s.h);
            CHECK(yf.w == 2 * s.w);
            CHECK(max_rel(yf.data, yr.data) < tol);
            const auto dy = random_tensor<T>(rng, s.n, s.cout, 2 * s.h, 2 * s.w);
            std::vector<T> dwf(w.size()), dbf(b.size()), dwr(w.size()), dbr(b.size());
            Tensor<T> dxf, dxr;
            kernels::upconv2x2_backward<T>(x, w, dy, dwf, dbf, &dxf);
            reference::upconv2x2_backward<T>(x, w, dy, dwr, dbr, &dxr);
            CHECK(max_rel(dwf, dwr) < tol);
            CHECK(max_rel(dbf, dbr) < tol);
            CHECK(max_rel(dxf.data, dxr.data) < tol);
        }
        // conv1x1
        {
            const auto w = random_vec<T>(rng, std::size_t(s.cout) * s.cin);
            const auto b = random_vec<T>(rng, std::size_t(s.cout));
            Tensor<T> yf, yr;
            kernels::conv1x1_forward<T>(x, w, b, s.cout, yf);
            reference::conv1x1_forward<T>(x, w, b, s.cout, yr);
            CHECK(max_rel(yf.data, yr.data) < tol);
            const auto dy = random_tensor<T>(rng, s.n, s.cout, s.h, s.w);
            std::vector<T> dwf(w.size()), dbf(b.size()), dwr(w.size()), dbr(b.size());
            Tensor<T> dxf, dxr;
            kernels::conv1x1_backward<T>(x, w, dy, dwf, dbf, &dxf);
            reference::conv1x1_backward<T>(x, w, dy, dwr, dbr, &dxr);
            CHECK(max_rel(dwf, dwr) < tol);
            CHECK(max_rel(dbf, dbr) < tol);
            CHECK(max_rel(dxf.data, dxr.data) < tol);
        }
        // relu, maxpool
        {
            Tensor<T> rf = x, rr = x;
            kernels::relu_forward(rf);
            reference::relu_forward(rr);
            CHECK(rf.data == rr.data);
            auto gf = random_tensor<T>(rng, s.n, s.cin, s.h, s.w), gr = gf;
            kernels::relu_backward(rf, gf);
            reference::relu_backward(rr, gr);
            CHECK(gf.data == gr.data);

            Tensor<T> pf, pr;
            std::vector<std::uint8_t> af, ar;
            kernels::maxpool2_forward(x, pf, af);
            reference::maxpool2_forward(x, pr, ar);
            CHECK(pf.data == pr.data);
            CHECK(af == ar);
            const auto dp = random_tensor<T>(rng, s.n, s.cin, s.h / 2, s.w / 2);
            Tensor<T> df, dr;
            kernels::maxpool2_backward(dp, af, df);
            reference::maxpool2_backward(dp, ar, dr);
            CHECK(df.data == dr.data);
        }
        // softmax cross-entropy
        {
            const auto logits = random_tensor<T>(rng, s.n, s.cout + 1, s.h, s.w);
            std::uniform_int_distribution<int> lab(0, s.cout);
            std::vector<std::uint8_t> labels(std::size_t(s.n) * s.h * s.w);
            for (auto& l : labels) l = std::uint8_t(lab(rng));
            Tensor<T> gf, gr;
            const double lf = kernels::softmax_cross_entropy<T>(logits, labels, &gf);
            const double lr = reference::softmax_cross_entropy<T>(logits, labels, &gr);
            CHECK(std::abs(lf - lr) < tol * (1 + std::abs(lr)));
            CHECK(max_rel(gf.data, gr.data) < tol);
        }
    }
}

} // namespace

TEST_CASE("parallel kernels agree with the serial reference (double)") { compare_layers<double>(1e-12); }

TEST_CASE("parallel kernels agree with the serial reference (float)") { compare_layers<float>(1e-4); }

TEST_CASE("conv3x3 on a hand-computed example") {
    // 1x1x3x3 input of ones, kernel of ones: output counts in-bounds neighbours.
    Tensor<double> x(1, 1, 3, 3, 1.0);
    const std::vector<double> w(9, 1.0), b{0.5};
    for (auto run : {&kernels::conv3x3_forward<double>, &reference::conv3x3_forward<double>}) {
        Tensor<double> y;
        run(x, w, b, 1, y);
        CHECK(y.at(0, 0, 0, 0) == 4.5);
        CHECK(y.at(0, 0, 0, 1) == 6.5);
        CHECK(y.at(0, 0, 1, 1) == 9.5);
    }
}

TEST_CASE("cross-entropy of uniform logits is ln K") {
    for (int k : {2, 4, 10}) {
        Tensor<double> logits(2, k, 4, 4, 0.3);
        std::vector<std::uint8_t> labels(32, 1);
        Tensor<double> g;
        CHECK(kernels::softmax_cross_entropy<double>(logits, labels, &g) == doctest::Approx(std::log(k)).epsilon(1e-12));
    }
}

TEST_CASE("kernel results do not depend on the thread count") {
    std::mt19937_64 rng(3);
    const auto x = random_tensor<float>(rng, 5, 4, 8, 8);
    const auto w = random_vec<float>(rng, 6 * 4 * 9);
    const auto b = random_vec<float>(rng, 6);
    const auto dy = random_tensor<float>(rng, 5, 6, 8, 8);
    auto run = [&](int threads) {
        omp_set_num_threads(threads);
        Tensor<float> y, dx;
        std::vector<float> dw(w.size()), db(b.size());
        kernels::conv3x3_forward<float>(x, w, b, 6, y);
        kernels::conv3x3_backward<float>(x, w, dy, dw, db, &dx);
        return std::make_tuple(y.data, dw, db, dx.data);
    };
    const int saved = omp_get_max_threads();
    const auto one = run(1), three = run(3);
    omp_set_num_threads(saved);
    CHECK(one == three);
}

TEST_CASE("concat/split channels round trip") {
    std::mt19937_64 rng(4);
    const auto a = random_tensor<float>(rng, 2, 3, 4, 4), b = random_tensor<float>(rng, 2, 5, 4, 4);
    Tensor<float> y, da, db;
    kernels::concat_channels(a, b, y);
    CHECK(y.c == 8);
    kernels::split_channels(y, 3, &da, &db);
    CHECK(da.data == a.data);
    CHECK(db.data == b.data);
}
