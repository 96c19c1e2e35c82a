#include <sstream>

#include "doctest.h"
#include "dn4/embedding.hpp"
#include "dn4/gradcheck.hpp"
#include "dn4/ops.hpp"
#include "dn4/serialize.hpp"
#include "test_util.hpp"

using namespace dn4;
using dn4::testing::max_abs_diff;
using dn4::testing::random_tensor;

namespace {

// Independent six-loop cross-correlation with zero padding 1.
TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD& b) {
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0);
    TensorD out(Shape{n, cout, h, wd});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < wd; ++xx) {
                    double acc = b[co];
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const long iy = long(y) + ky - 1, ix = long(xx) + kx - 1;
                                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                                acc += x[((i * cin + ci) * h + iy) * wd + ix] * w[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                    out[((i * cout + co) * h + y) * wd + xx] = acc;
                }
    return out;
}

TensorD naive_pool(const TensorD& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    TensorD out(Shape{n, c, h / 2, w / 2});
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t xx = 0; xx < w / 2; ++xx) {
                double best = -1e300;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx)
                        best = std::max(best, x[p * h * w + (2 * y + dy) * w + 2 * xx + dx]);
                out[p * (h / 2) * (w / 2) + y * (w / 2) + xx] = best;
            }
    return out;
}

TensorD naive_bn(const TensorD& x, double eps) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    TensorD out(x.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mu = 0, var = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) mu += x[(i * c + ch) * hw + j];
        mu /= double(n * hw);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) var += std::pow(x[(i * c + ch) * hw + j] - mu, 2);
        var /= double(n * hw);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j)
                out[(i * c + ch) * hw + j] = (x[(i * c + ch) * hw + j] - mu) / std::sqrt(var + eps);
    }
    return out;
}

template <class F>
TensorD forward(F&& f, std::vector<TensorD> inputs) {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (auto& t : inputs) vars.push_back(Var<double>::constant(t));
    return f(tape, vars).value();
}

// Weighted-sum reduction so that no gradient is identically zero.
Var<double> weighted_sum(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = Var<double>::constant(random_tensor(y.shape(), rng, 0.5, 1.5));
    return ops::sum(tape, ops::mul(tape, y, w));
}

}  // namespace

TEST_CASE("conv2d zero input yields broadcast bias") {
    Rng rng(1);
    auto x = Var<double>::constant(TensorD(Shape{1, 2, 4, 4}, 0.0));
    auto w = Var<double>::constant(random_tensor(Shape{3, 2, 3, 3}, rng));
    auto b = Var<double>::constant(TensorD(Shape{3}, std::vector<double>{0.5, -1.0, 2.0}));
    Tape<double> tape;
    auto y = ops::conv2d(tape, x, w, b);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < 16; ++j) CHECK(y.value()[c * 16 + j] == b.value()[c]);
}

TEST_CASE("conv2d impulse picks the kernel without flipping") {
    Rng rng(2);
    TensorD x(Shape{1, 1, 3, 3}, 0.0);
    x[4] = 1.0;
    auto w = random_tensor(Shape{1, 1, 3, 3}, rng);
    Tape<double> tape;
    auto y = ops::conv2d(tape, Var<double>::constant(x), Var<double>::constant(w),
                         Var<double>::constant(TensorD(Shape{1}, 0.0)));
    CHECK(y.value()[4] == w[4]);
    // Output (y, x) sees the impulse through tap (2 - y, 2 - x) of a cross-correlation.
    for (std::size_t yy = 0; yy < 3; ++yy)
        for (std::size_t xx = 0; xx < 3; ++xx) CHECK(y.value()[yy * 3 + xx] == w[(2 - yy) * 3 + (2 - xx)]);
}

TEST_CASE("conv2d matches the naive oracle") {
    Rng rng(3);
    auto x = random_tensor(Shape{2, 3, 8, 8}, rng);
    auto w = random_tensor(Shape{4, 3, 3, 3}, rng);
    auto b = random_tensor(Shape{4}, rng);
    auto y = forward([](Tape<double>& t, auto& v) { return ops::conv2d(t, v[0], v[1], v[2]); }, {x, w, b});
    CHECK(max_abs_diff(y, naive_conv(x, w, b)) <= 1e-6);
}

TEST_CASE("conv2d rejects channel mismatch and non-3x3 kernels") {
    Tape<double> tape;
    auto x = Var<double>::constant(TensorD(Shape{1, 2, 4, 4}));
    CHECK_THROWS_AS(ops::conv2d(tape, x, Var<double>::constant(TensorD(Shape{1, 3, 3, 3})),
                                Var<double>::constant(TensorD(Shape{1}))),
                    DimensionError);
    CHECK_THROWS_AS(ops::conv2d(tape, x, Var<double>::constant(TensorD(Shape{1, 2, 5, 5})),
                                Var<double>::constant(TensorD(Shape{1}))),
                    DimensionError);
}

TEST_CASE("oracle equivalence on 100 random small inputs") {
    Rng rng(4);
    double conv_err = 0, pool_err = 0, bn_err = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(3), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
        const std::size_t h = 2 * (1 + rng.below(4)), w = 2 * (1 + rng.below(4));
        auto x = random_tensor(Shape{n, cin, h, w}, rng);
        auto wt = random_tensor(Shape{cout, cin, 3, 3}, rng);
        auto b = random_tensor(Shape{cout}, rng);
        conv_err = std::max(conv_err, max_abs_diff(forward([](Tape<double>& t, auto& v) {
                                                       return ops::conv2d(t, v[0], v[1], v[2]);
                                                   }, {x, wt, b}),
                                                   naive_conv(x, wt, b)));
        pool_err = std::max(pool_err, max_abs_diff(forward([](Tape<double>& t, auto& v) {
                                                       return ops::maxpool2d(t, v[0]);
                                                   }, {x}),
                                                   naive_pool(x)));
        auto ones = TensorD(Shape{cin}, 1.0), zeros = TensorD(Shape{cin}, 0.0);
        bn_err = std::max(bn_err, max_abs_diff(forward([](Tape<double>& t, auto& v) {
                                                   return ops::batchnorm2d(t, v[0], v[1], v[2], nullptr, {});
                                               }, {x, ones, zeros}),
                                               naive_bn(x, 1e-5)));
    }
    CHECK(conv_err <= 1e-6);
    CHECK(pool_err <= 1e-6);
    CHECK(bn_err <= 1e-6);
}

TEST_CASE("batchnorm2d edge cases") {
    Rng rng(5);
    SUBCASE("constant channel normalizes to zero") {
        TensorD x(Shape{2, 2, 3, 3}, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (i / 9) % 2 == 0 ? 3.0 : -7.0;
        auto y = forward([](Tape<double>& t, auto& v) { return ops::batchnorm2d(t, v[0], v[1], v[2], nullptr, {}); },
                         {x, TensorD(Shape{2}, 1.0), TensorD(Shape{2}, 0.0)});
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("gamma zero collapses to beta") {
        auto x = random_tensor(Shape{2, 2, 3, 3}, rng);
        TensorD beta(Shape{2}, std::vector<double>{0.25, -4.0});
        auto y = forward([](Tape<double>& t, auto& v) { return ops::batchnorm2d(t, v[0], v[1], v[2], nullptr, {}); },
                         {x, TensorD(Shape{2}, 0.0), beta});
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == beta[(i / 9) % 2]);
    }
    SUBCASE("output statistics are zero-mean unit-variance") {
        auto x = random_tensor(Shape{4, 2, 5, 5}, rng, -3.0, 5.0);
        auto y = forward([](Tape<double>& t, auto& v) { return ops::batchnorm2d(t, v[0], v[1], v[2], nullptr, {}); },
                         {x, TensorD(Shape{2}, 1.0), TensorD(Shape{2}, 0.0)});
        for (std::size_t ch = 0; ch < 2; ++ch) {
            double mu = 0, var = 0;
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 25; ++j) mu += y[(i * 2 + ch) * 25 + j];
            mu /= 100;
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 25; ++j) var += std::pow(y[(i * 2 + ch) * 25 + j] - mu, 2);
            var /= 100;
            CHECK(std::abs(mu) <= 1e-6);
            CHECK(std::abs(var - 1.0) <= 1e-4);
        }
    }
    SUBCASE("single value per channel is rejected in batch mode") {
        Tape<double> tape;
        CHECK_THROWS_AS(ops::batchnorm2d(tape, Var<double>::constant(TensorD(Shape{1, 1, 1, 1})),
                                         Var<double>::constant(TensorD(Shape{1}, 1.0)),
                                         Var<double>::constant(TensorD(Shape{1}, 0.0)), nullptr, {}),
                        ContractError);
    }
    SUBCASE("running statistics update and running-stats mode") {
        auto x = random_tensor(Shape{3, 1, 4, 4}, rng);
        RunningStats<double> rs(1);
        BatchNormOptions opt;
        opt.update_running = true;
        Tape<double> tape;
        auto ones = Var<double>::constant(TensorD(Shape{1}, 1.0));
        auto zeros = Var<double>::constant(TensorD(Shape{1}, 0.0));
        ops::batchnorm2d(tape, Var<double>::constant(x), ones, zeros, &rs, opt);
        double mu = 0;
        for (double v : x.data()) mu += v;
        mu /= 48;
        CHECK(rs.mean[0] == doctest::Approx(0.1 * mu).epsilon(1e-12));
        BatchNormOptions run;
        run.mode = BatchNormMode::running_stats;
        auto y = ops::batchnorm2d(tape, Var<double>::constant(x), ones, zeros, &rs, run);
        CHECK(y.value()[0] == doctest::Approx((x[0] - rs.mean[0]) / std::sqrt(rs.var[0] + 1e-5)));
    }
}

TEST_CASE("leaky_relu definition") {
    Tape<double> tape;
    auto y = ops::leaky_relu(tape, Var<double>::constant(TensorD(Shape{3}, std::vector<double>{-1, 0, 2})), 0.2);
    CHECK(y.value()[0] == doctest::Approx(-0.2));
    CHECK(y.value()[1] == 0.0);
    CHECK(y.value()[2] == 2.0);
    Rng rng(6);
    auto x = random_tensor(Shape{50}, rng, 0.0, 3.0);
    CHECK(ops::leaky_relu(tape, Var<double>::constant(x), 0.2).value() == x);

    SUBCASE("gradient at zero uses the slope") {
        Tape<double> t;
        auto v = Var<double>::leaf(TensorD(Shape{1}, 0.0), true);
        t.backward(ops::sum(t, ops::leaky_relu(t, v, 0.2)));
        CHECK(v.grad()[0] == doctest::Approx(0.2));
    }
}

TEST_CASE("maxpool2d definition, tie-break and odd extents") {
    Tape<double> tape;
    auto x = Var<double>::leaf(TensorD(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), true);
    CHECK(ops::maxpool2d(tape, x).value()[0] == 4.0);

    Tape<double> t2;
    auto c = Var<double>::leaf(TensorD(Shape{1, 1, 4, 4}, 7.0), true);
    auto y = ops::maxpool2d(t2, c);
    for (double v : y.value().data()) CHECK(v == 7.0);
    t2.backward(ops::sum(t2, y));
    for (std::size_t yy = 0; yy < 4; ++yy)
        for (std::size_t xx = 0; xx < 4; ++xx)
            CHECK(c.grad()[yy * 4 + xx] == ((yy % 2 == 0 && xx % 2 == 0) ? 1.0 : 0.0));

    Rng rng(7);
    auto r = random_tensor(Shape{1, 1, 6, 6}, rng);
    CHECK(forward([](Tape<double>& t, auto& v) { return ops::maxpool2d(t, v[0]); }, {r}) == naive_pool(r));

    CHECK_THROWS_AS(ops::maxpool2d(tape, Var<double>::constant(TensorD(Shape{1, 1, 3, 4}))), DimensionError);
}

TEST_CASE("backward basics") {
    Rng rng(8);
    auto xv = random_tensor(Shape{3, 4}, rng);
    SUBCASE("sum gives ones") {
        Tape<double> tape;
        auto x = Var<double>::leaf(xv, true);
        tape.backward(ops::sum(tape, x));
        for (double g : x.grad().data()) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares gives 2x, and repeated calls accumulate") {
        Tape<double> tape;
        auto x = Var<double>::leaf(xv, true);
        auto loss = ops::sum(tape, ops::mul(tape, x, x));
        tape.backward(loss);
        for (std::size_t i = 0; i < xv.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * xv[i]));
        tape.backward(loss);
        for (std::size_t i = 0; i < xv.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(4 * xv[i]));
    }
    SUBCASE("non-scalar loss is a contract error") {
        Tape<double> tape;
        auto x = Var<double>::leaf(xv, true);
        CHECK_THROWS_AS(tape.backward(ops::scale(tape, x, 2.0)), ContractError);
    }
    SUBCASE("each node is visited once") {
        Tape<double> tape;
        auto x = Var<double>::leaf(xv, true);
        auto y = ops::add(tape, x, x);
        tape.backward(ops::sum(tape, ops::add(tape, y, y)));
        for (double g : x.grad().data()) CHECK(g == 4.0);
        CHECK(tape.size() == 3);
    }
}

TEST_CASE("linearity of backward") {
    Rng rng(9);
    auto xv = random_tensor(Shape{2, 5}, rng);
    auto wv = random_tensor(Shape{5, 3}, rng);
    const double a = 0.7, b = -1.3;
    auto f = [&](Tape<double>& t, const Var<double>& x) { return ops::sum(t, ops::softmax(t, ops::matmul(t, x, Var<double>::constant(wv)))); };
    auto g = [&](Tape<double>& t, const Var<double>& x) {
        return ops::sum(t, ops::log(t, ops::add(t, ops::mul(t, x, x), Var<double>::constant(TensorD(x.shape(), 1.0)))));
    };
    auto grad_of = [&](auto&& fn) {
        Tape<double> t;
        auto x = Var<double>::leaf(xv, true);
        t.backward(fn(t, x));
        return x.grad();
    };
    const auto gf = grad_of(f), gg = grad_of(g);
    const auto combo = grad_of([&](Tape<double>& t, const Var<double>& x) {
        return ops::add(t, ops::scale(t, f(t, x), a), ops::scale(t, g(t, x), b));
    });
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(std::abs(combo[i] - (a * gf[i] + b * gg[i])) <= 1e-6);
}

TEST_CASE("grad_check reports tiny error for sum") {
    Rng rng(10);
    const double err = grad_check([](Tape<double>& t, std::span<const Var<double>> v) { return ops::sum(t, v[0]); },
                                  {random_tensor(Shape{4, 3}, rng)});
    CHECK(err <= 1e-10);
}

TEST_CASE("gradient correctness of every op") {
    Rng rng(11);
    const double tol = 1e-4;
    auto x4 = random_tensor(Shape{2, 2, 4, 4}, rng);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::conv2d(t, v[0], v[1], v[2]), 1); },
                     {x4, random_tensor(Shape{3, 2, 3, 3}, rng), random_tensor(Shape{3}, rng)}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) {
              return weighted_sum(t, ops::batchnorm2d(t, v[0], v[1], v[2], nullptr, {}), 2);
          },
          {x4, random_tensor(Shape{2}, rng, 0.5, 1.5), random_tensor(Shape{2}, rng)}) <= tol);
    RunningStats<double> rs(2);
    rs.mean[0] = 0.3;
    rs.var[1] = 2.0;
    CHECK(grad_check([&rs](Tape<double>& t, auto v) {
              BatchNormOptions opt;
              opt.mode = BatchNormMode::running_stats;
              return weighted_sum(t, ops::batchnorm2d(t, v[0], v[1], v[2], &rs, opt), 3);
          },
          {x4, random_tensor(Shape{2}, rng, 0.5, 1.5), random_tensor(Shape{2}, rng)}) <= tol);
    // Off-kink: keep every entry at least 0.05 from zero.
    auto off = random_tensor(Shape{3, 5}, rng, 0.05, 1.0);
    for (std::size_t i = 0; i < off.size(); i += 2) off[i] = -off[i];
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::leaky_relu(t, v[0], 0.2), 4); }, {off}) <= tol);
    // Off-tie: distinct values.
    TensorD distinct(Shape{1, 2, 4, 4});
    for (std::size_t i = 0; i < distinct.size(); ++i) distinct[i] = 0.1 * double((i * 7) % 32);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::maxpool2d(t, v[0]), 5); }, {distinct}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::fully_connected(t, v[0], v[1], v[2]), 6); },
                     {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{5, 4}, rng), random_tensor(Shape{5}, rng)}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::matmul(t, v[0], v[1]), 7); },
                     {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{4, 2}, rng)}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::softmax(t, v[0]), 8); },
                     {random_tensor(Shape{3, 4}, rng)}) <= tol);
    const std::vector<int> labels{0, 3, 1};
    CHECK(grad_check([&](Tape<double>& t, auto v) { return ops::cross_entropy(t, v[0], labels); },
                     {random_tensor(Shape{3, 4}, rng, -2.0, 2.0)}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::log(t, v[0]), 9); },
                     {random_tensor(Shape{6}, rng, 0.5, 2.0)}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) { return ops::mean(t, ops::mul(t, v[0], v[1])); },
                     {random_tensor(Shape{6}, rng), random_tensor(Shape{6}, rng)}) <= tol);
    CHECK(grad_check([](Tape<double>& t, auto v) { return weighted_sum(t, ops::global_average_pool(t, v[0]), 10); },
                     {x4}) <= tol);
}

TEST_CASE("full embedding forward plus cross-entropy matches finite differences") {
    EmbeddingConfig cfg;
    cfg.filters_per_layer = 3;
    cfg.input_channels = 2;
    cfg.height = cfg.width = 8;
    Rng rng(12);
    auto params = init_params<double>(cfg, rng);
    auto images = random_tensor(Shape{3, 2, 8, 8}, rng);
    const std::vector<int> labels{0, 2, 1};
    std::vector<TensorD> inputs;
    for (const auto& p : params.parameters()) inputs.push_back(p.value());
    auto result = grad_check_detailed(
        [&](Tape<double>& t, std::span<const Var<double>> v) {
            EmbeddingParams<double> local = params;
            for (std::size_t b = 0; b < 4; ++b) {
                local.blocks[b].conv_weight = v[4 * b];
                local.blocks[b].conv_bias = v[4 * b + 1];
                local.blocks[b].bn_gamma = v[4 * b + 2];
                local.blocks[b].bn_beta = v[4 * b + 3];
            }
            auto f = embed_features(t, local, Var<double>::constant(images), {});
            return ops::cross_entropy(t, ops::global_average_pool(t, f), labels);
        },
        inputs);
    INFO("worst input " << result.worst_input << " index " << result.worst_index << " analytic " << result.analytic
                        << " numeric " << result.numeric);
    CHECK(result.max_rel_error <= 1e-4);
}

TEST_CASE("determinism of forward and backward") {
    auto run = [] {
        Rng rng(13);
        auto x = Var<float>::leaf(random_tensor<float>(Shape{2, 3, 8, 8}, rng), true);
        auto w = Var<float>::leaf(random_tensor<float>(Shape{4, 3, 3, 3}, rng), true);
        auto b = Var<float>::leaf(random_tensor<float>(Shape{4}, rng), true);
        Tape<float> tape;
        auto y = ops::leaky_relu(tape, ops::conv2d(tape, x, w, b), 0.2f);
        tape.backward(ops::sum(tape, ops::mul(tape, y, y)));
        return std::make_tuple(y.value(), x.grad(), w.grad());
    };
    CHECK(run() == run());
}

TEST_CASE("DN4T byte layout is bit-exact") {
    Tensor t(Shape{1, 2}, std::vector<float>{1.0f, -2.0f});
    std::ostringstream os;
    write_tensor(os, t);
    const std::string bytes = os.str();
    const std::string expected("DN4T\x01\x00\x02\x01\x00\x00\x00\x02\x00\x00\x00\x00\x00\x80\x3f\x00\x00\x00\xc0", 23);
    CHECK(bytes == expected);
    std::istringstream is(bytes);
    CHECK(read_tensor(is) == t);

    std::istringstream bad(std::string("DN4X\x01\x00\x00", 7));
    CHECK_THROWS_AS(read_tensor(bad), FormatError);
    std::istringstream truncated(bytes.substr(0, 20));
    CHECK_THROWS_AS(read_tensor(truncated), FormatError);
}

TEST_CASE("tensor round-trip through DN4T preserves arbitrary shapes and values") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        Shape shape(1 + rng.below(4));
        for (auto& e : shape) e = 1 + rng.below(5);
        auto t = random_tensor<float>(shape, rng, -1e3, 1e3);
        std::stringstream ss;
        write_tensor(ss, t);
        CHECK(read_tensor(ss) == t);
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>(3)), DimensionError);
    Tensor t(Shape{2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(t.reshaped(Shape{4}), DimensionError);
    t[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
}
