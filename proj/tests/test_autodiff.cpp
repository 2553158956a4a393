#include <catch2/catch_amalgamated.hpp>

#include <brasyn/nn.hpp>
#include <brasyn/optim.hpp>

#include "testing.hpp"

using namespace brasyn;
using ad::Var;
using btest::fd_grad;
using btest::rel_err;

namespace {

// Gradcheck one differentiable input of an arbitrary graph builder.
template <class Builder>
void check_grad(Tensor<double> x0, Builder build, double tol = 1e-7,
                double h = 1e-5) {
    auto x = ad::param(Tensor<double>(x0));
    auto loss = build(x);
    ad::backward(loss);
    Tensor<double> got = x->grad;

    auto want = fd_grad(
        [&](const Tensor<double>& xt) {
            ad::NoGradGuard off; // value-only replay
            auto xv = ad::constant(Tensor<double>(xt));
            return double(build(xv)->value[0]);
        },
        x0, h);
    INFO("rel err " << rel_err(got, want));
    REQUIRE(rel_err(got, want) < tol);
}

Tensor<double> rt(Shape s, std::uint64_t seed, double std = 1.0, double mean = 0.0) {
    return btest::randn(std::move(s), seed, std, mean);
}

} // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    auto c = ad::constant(rt({3, 4}, 7, 0.8, 0.1));
    check_grad(rt({3, 4}, 1), [&](Var<double> x) {
        return ad::mean_all(ad::mul(ad::add(x, c), ad::sub(x, c)));
    });
    check_grad(rt({3, 4}, 2, 0.5, 2.0), [&](Var<double> x) {
        return ad::mean_all(ad::div(c, x)); // x bounded away from 0
    });
    check_grad(rt({3, 4}, 3), [&](Var<double> x) {
        return ad::mean_all(ad::exp(ad::scale(x, 0.5)));
    });
    check_grad(rt({3, 4}, 4, 1.0, 4.0), [&](Var<double> x) {
        return ad::mean_all(ad::sqrt(x));
    });
    check_grad(rt({3, 4}, 5), [&](Var<double> x) {
        return ad::mean_all(ad::tanh(ad::sigmoid(x)));
    });
    check_grad(rt({3, 4}, 6, 1.0, 0.3), [&](Var<double> x) {
        return ad::mean_all(ad::abs(x));
    });
    check_grad(rt({3, 4}, 8, 1.0, 0.4), [&](Var<double> x) {
        return ad::mean_all(ad::leaky_relu(ad::relu(ad::add_scalar(x, 0.05))));
    });
    check_grad(rt({3, 4}, 9), [&](Var<double> x) {
        return ad::mean_all(ad::square(ad::neg(x)));
    });
}

TEST_CASE("matmul and linear gradients") {
    auto b = ad::constant(rt({4, 5}, 11));
    check_grad(rt({3, 4}, 10), [&](Var<double> x) {
        return ad::mean_all(ad::matmul(x, b));
    });
    auto w = ad::constant(rt({5, 4}, 12, 0.5));
    auto bias = ad::constant(rt({5}, 13, 0.1));
    check_grad(rt({3, 4}, 14), [&](Var<double> x) {
        return ad::mean_all(ad::tanh(nn::linear(x, w, bias)));
    });
    // weight path
    auto x0 = ad::constant(rt({3, 4}, 15));
    check_grad(rt({5, 4}, 16, 0.5), [&](Var<double> w_) {
        return ad::mean_all(ad::square(nn::linear(x0, w_, bias)));
    });
}

TEST_CASE("conv2d matches a direct convolution oracle") {
    Rng rng(21);
    auto x = ad::constant(Tensor<double>::randn({2, 3, 5, 6}, rng));
    auto w = ad::constant(Tensor<double>::randn({4, 3, 3, 3}, rng));
    auto b = ad::constant(Tensor<double>::randn({4}, rng));
    const int stride = 2, pad = 1;
    auto y = nn::conv2d(x, w, b, stride, pad);

    const auto& xs = x->value.shape();
    const std::size_t Ho = (xs[2] + 2 * pad - 3) / stride + 1;
    const std::size_t Wo = (xs[3] + 2 * pad - 3) / stride + 1;
    REQUIRE(y->value.shape() == Shape{2, 4, Ho, Wo});
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t co = 0; co < 4; ++co)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = b->value[co];
                    for (std::size_t ci = 0; ci < 3; ++ci)
                        for (int i = 0; i < 3; ++i)
                            for (int j = 0; j < 3; ++j) {
                                const long iy = long(oy) * stride + i - pad;
                                const long ix = long(ox) * stride + j - pad;
                                if (iy < 0 || iy >= long(xs[2]) || ix < 0 ||
                                    ix >= long(xs[3]))
                                    continue;
                                acc += x->value.at(n, ci, std::size_t(iy), std::size_t(ix)) *
                                       w->value.at(co, ci, std::size_t(i), std::size_t(j));
                            }
                    REQUIRE_THAT(double(y->value.at(n, co, oy, ox)),
                                 Catch::Matchers::WithinAbs(acc, 1e-12));
                }
}

TEST_CASE("conv gradients match finite differences") {
    auto w2 = ad::constant(rt({3, 2, 3, 3}, 31, 0.4));
    auto b2 = ad::constant(rt({3}, 32, 0.1));
    check_grad(rt({2, 2, 6, 6}, 30), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::conv2d(x, w2, b2, 1, 1)));
    });
    check_grad(rt({2, 2, 6, 6}, 33), [&](Var<double> x) {
        return ad::mean_all(ad::tanh(nn::conv2d(x, w2, b2, 2, 1)));
    });
    // weights
    auto x2 = ad::constant(rt({2, 2, 5, 5}, 34));
    check_grad(rt({3, 2, 3, 3}, 35, 0.4), [&](Var<double> w) {
        return ad::mean_all(ad::square(nn::conv2d(x2, w, b2, 2, 1)));
    });

    auto w3 = ad::constant(rt({2, 2, 3, 3, 3}, 41, 0.3));
    auto b3 = ad::constant(rt({2}, 42, 0.1));
    check_grad(rt({1, 2, 4, 4, 4}, 40), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::conv3d(x, w3, b3, 1, 1)));
    });
    check_grad(rt({1, 2, 5, 5, 5}, 43), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::conv3d(x, w3, b3, 2, 1)));
    });
    auto x3 = ad::constant(rt({1, 2, 4, 4, 4}, 44));
    check_grad(rt({2, 2, 3, 3, 3}, 45, 0.3), [&](Var<double> w) {
        return ad::mean_all(ad::square(nn::conv3d(x3, w, b3, 1, 1)));
    });

    auto wt = ad::constant(rt({3, 2, 4, 4}, 51, 0.3));
    auto bt = ad::constant(rt({2}, 52, 0.1));
    check_grad(rt({2, 3, 4, 4}, 50), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::conv_transpose2d(x, wt, bt, 2, 1)));
    });
    auto xt = ad::constant(rt({2, 3, 4, 4}, 53));
    check_grad(rt({3, 2, 4, 4}, 54, 0.3), [&](Var<double> w) {
        return ad::mean_all(ad::square(nn::conv_transpose2d(xt, w, bt, 2, 1)));
    });
}

TEST_CASE("conv_transpose2d output size and stride-2 identity checks") {
    Rng rng(60);
    auto x = ad::constant(Tensor<double>::randn({1, 2, 5, 5}, rng));
    auto w = ad::constant(Tensor<double>::randn({2, 3, 4, 4}, rng));
    auto b = ad::constant(Tensor<double>::zeros({3}));
    auto y = nn::conv_transpose2d(x, w, b, 2, 1);
    REQUIRE(y->value.shape() == Shape{1, 3, 10, 10});
}

TEST_CASE("normalization, modulation, pooling gradients") {
    auto gain = ad::constant(rt({3}, 71, 0.5, 1.0));
    auto bias = ad::constant(rt({3}, 72, 0.2));
    check_grad(rt({2, 3, 2, 2}, 70), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::layer_norm_channels(x, gain, bias)));
    }, 1e-6);
    // gain/bias path
    auto xn = ad::constant(rt({2, 3, 2, 2}, 73));
    check_grad(rt({3}, 74, 0.5, 1.0), [&](Var<double> g) {
        return ad::mean_all(ad::square(nn::layer_norm_channels(xn, g, bias)));
    }, 1e-6);

    auto gm = ad::constant(rt({2, 3}, 81, 0.5, 1.0));
    auto bt = ad::constant(rt({2, 3}, 82, 0.3));
    check_grad(rt({2, 3, 4}, 80), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::film(x, gm, bt)));
    });
    check_grad(rt({2, 3}, 83, 0.5, 1.0), [&](Var<double> g) {
        auto x = ad::constant(rt({2, 3, 4}, 84));
        return ad::mean_all(ad::square(nn::film(x, g, bt)));
    });

    check_grad(rt({2, 3, 4, 4}, 90), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::global_avg_pool(x)));
    });
    check_grad(rt({1, 2, 3, 3}, 91), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::upsample_nearest(x, 2)));
    });
    check_grad(rt({1, 2, 2, 2, 2}, 92), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::upsample_nearest(x, 2)));
    });
}

TEST_CASE("local_mean: values and gradients") {
    // window fully inside: plain average; at borders: clipped average
    Rng rng(100);
    auto x = ad::constant(Tensor<double>::randn({1, 1, 4, 5}, rng));
    auto y = nn::local_mean(x, 3);
    REQUIRE(y->value.shape() == x->value.shape());
    // interior point (1,1): 3x3 mean
    double acc = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) acc += x->value.at(0, 0, std::size_t(i), std::size_t(j));
    REQUIRE_THAT(double(y->value.at(0, 0, 1, 1)), Catch::Matchers::WithinAbs(acc / 9, 1e-12));
    // corner (0,0): 2x2 clipped mean
    double c = x->value.at(0, 0, 0, 0) + x->value.at(0, 0, 0, 1) +
               x->value.at(0, 0, 1, 0) + x->value.at(0, 0, 1, 1);
    REQUIRE_THAT(double(y->value.at(0, 0, 0, 0)), Catch::Matchers::WithinAbs(c / 4, 1e-12));
    // constant input stays constant
    auto ones = ad::constant(Tensor<double>::full({1, 1, 5, 5}, 3.25));
    auto ym = nn::local_mean(ones, 5);
    for (std::size_t i = 0; i < ym->value.size(); ++i)
        REQUIRE_THAT(double(ym->value[i]), Catch::Matchers::WithinAbs(3.25, 1e-12));

    check_grad(rt({1, 2, 4, 5}, 101), [&](Var<double> v) {
        return ad::mean_all(ad::square(nn::local_mean(v, 3)));
    });
    check_grad(rt({1, 1, 3, 4, 4}, 102), [&](Var<double> v) {
        return ad::mean_all(ad::square(nn::local_mean(v, 3)));
    });
}

TEST_CASE("shape ops and heads") {
    check_grad(rt({2, 3, 2, 2}, 110), [&](Var<double> x) {
        auto b = ad::constant(rt({2, 2, 2, 2}, 111));
        return ad::mean_all(ad::square(nn::concat_channels(x, b)));
    });
    check_grad(rt({2, 4, 3}, 112), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::select_channel(x, 2)));
    });
    check_grad(rt({3, 4}, 113), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::sum_per_sample(x)));
    });
    check_grad(rt({2, 4, 3}, 114), [&](Var<double> x) {
        return ad::mean_all(ad::square(nn::softmax_channels(x)));
    });
    std::vector<int> tgt{2, 0, 3};
    check_grad(rt({3, 4}, 115), [&](Var<double> x) {
        return nn::cross_entropy_logits(x, tgt);
    });
    check_grad(rt({2, 6}, 116), [&](Var<double> x) {
        return ad::mean_all(ad::square(ad::reshape(x, {2, 3, 2})));
    });
}

TEST_CASE("softmax_channels sums to one and matches direct computation") {
    Rng rng(120);
    auto x = ad::constant(Tensor<double>::randn({2, 4, 3}, rng, 2.0));
    auto y = nn::softmax_channels(x);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t v = 0; v < 3; ++v) {
            double s = 0;
            for (std::size_t k = 0; k < 4; ++k) s += y->value.at(n, k, v);
            REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
        }
}

TEST_CASE("backward accumulates through shared subexpressions") {
    auto x = ad::param(Tensor<double>({1}, {3.0}));
    auto y = ad::mul(x, x); // x^2, both inputs the same node
    auto z = ad::mul(y, x); // x^3
    ad::backward(z);
    REQUIRE_THAT(double(x->grad[0]), Catch::Matchers::WithinAbs(27.0, 1e-10));
}

TEST_CASE("NoGradGuard suppresses taping") {
    auto x = ad::param(Tensor<double>({2}, {1.0, 2.0}));
    ad::NoGradGuard off;
    auto y = ad::mul(x, x);
    REQUIRE_FALSE(y->requires_grad);
    REQUIRE(y->inputs.empty());
}

TEST_CASE("Adam reduces a quadratic") {
    auto x = ad::param(Tensor<double>({4}, {4.0, -3.0, 2.0, -1.0}));
    nn::Adam<double> opt({x}, 0.1);
    for (int it = 0; it < 200; ++it) {
        opt.zero_grad();
        auto loss = ad::mean_all(ad::square(x));
        ad::backward(loss);
        opt.step();
    }
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(x->value[i]) < 0.05);
}

TEST_CASE("frozen parameters receive no gradient but pass it through") {
    auto w = ad::param(Tensor<double>({1}, {2.0}));
    w->requires_grad = false; // frozen
    auto x = ad::param(Tensor<double>({1}, {3.0}));
    auto loss = ad::mul(w, x);
    ad::backward(loss);
    REQUIRE(w->grad.size() == 0);
    REQUIRE_THAT(double(x->grad[0]), Catch::Matchers::WithinAbs(2.0, 1e-12));
}
