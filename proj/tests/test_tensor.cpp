#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "core/tensor.hpp"
#include "gradcheck.hpp"

using namespace derain;
using testutil::max_grad_rel_error;
using testutil::random_tensor;

TEST_CASE("conv2d identity kernel reproduces the input") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({1, 1, 3, 3}, rng, false);
    std::vector<double> k(9, 0.0);
    k[4] = 1.0;  // center tap
    Tensor kernel = Tensor::from_data({1, 1, 3, 3}, k);
    Tensor bias = Tensor::zeros({1});
    Tensor y = conv2d(x, kernel, bias, 1, 1);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-14));
}

TEST_CASE("conv2d zero input gives zero output") {
    std::mt19937_64 rng(2);
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor kernel = random_tensor({3, 2, 3, 3}, rng, false);
    Tensor bias = Tensor::zeros({3});
    Tensor y = conv2d(x, kernel, bias, 1, 1);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d 2x2 window sum with all-ones kernel") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor kernel = Tensor::from_data({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    Tensor bias = Tensor::zeros({1});
    Tensor y = conv2d(x, kernel, bias, 1, 1);
    for (double v : y.data()) CHECK(v == doctest::Approx(10.0).epsilon(1e-14));
}

TEST_CASE("conv2d channel mismatch throws") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor kernel = Tensor::zeros({3, 5, 3, 3});
    Tensor bias = Tensor::zeros({3});
    CHECK_THROWS_AS(conv2d(x, kernel, bias, 1, 1), DimensionError);
}

TEST_CASE("transposed_conv2d zero input gives zero output") {
    std::mt19937_64 rng(3);
    Tensor x = Tensor::zeros({1, 2, 3, 3});
    Tensor kernel = random_tensor({2, 4, 2, 2}, rng, false);
    Tensor bias = Tensor::zeros({4});
    Tensor y = transposed_conv2d(x, kernel, bias, 2, 0);
    REQUIRE(y.shape() == std::vector<int>{1, 4, 6, 6});
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("transposed_conv2d single pixel scatter") {
    Tensor x = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor kernel = Tensor::from_data({1, 1, 2, 2}, {1, 1, 1, 1});
    Tensor bias = Tensor::zeros({1});
    Tensor y = transposed_conv2d(x, kernel, bias, 2, 0);
    REQUIRE(y.shape() == std::vector<int>{1, 1, 2, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("conv/transposed-conv adjoint identity") {
    // <conv(x), y> == <x, tconv(y)> for the same kernel, stride 2.
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({1, 3, 6, 6}, rng, false);
        Tensor kernel = random_tensor({2, 3, 2, 2}, rng, false);  // [Cout,Cin,kh,kw]
        Tensor zb_out = Tensor::zeros({2});
        Tensor zb_in = Tensor::zeros({3});
        Tensor cx = conv2d(x, kernel, zb_out, 2, 0);  // [1,2,3,3]
        Tensor y = random_tensor({1, 2, 3, 3}, rng, false);
        // the tconv kernel layout [Cin,Cout,kh,kw] lets the conv kernel
        // [Cout,Cin,kh,kw] be reused directly: its Cout is the tconv input
        Tensor ty = transposed_conv2d(y, Tensor::from_data({2, 3, 2, 2}, kernel.data()),
                                      zb_in, 2, 0);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * y.data()[i];
        for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * ty.data()[i];
        CHECK(std::abs(lhs - rhs) < 1e-10);
    }
}

TEST_CASE("maxpool2d basics") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2d(x).data()[0] == 4.0);

    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i;
    Tensor r = Tensor::from_data({1, 1, 4, 4}, ramp);
    Tensor pooled = maxpool2d(r);
    CHECK(pooled.data() == std::vector<double>{5, 7, 13, 15});

    CHECK_THROWS_AS(maxpool2d(Tensor::zeros({1, 1, 3, 4})), DimensionError);
}

TEST_CASE("maxpool2d ties route gradient to the first window element") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, std::vector<double>(4, 7.0), true);
    Tensor loss = sum(maxpool2d(x));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("relu forward and gradient") {
    Tensor x = Tensor::from_data({3}, {-1, 0, 2}, true);
    Tensor y = relu(x);
    CHECK(y.data() == std::vector<double>{0, 0, 2});
    Tensor loss = sum(mul(y, Tensor::from_data({3}, {5, 5, 5})));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{0, 0, 5});
}

TEST_CASE("concat_channels layout and slice round trip") {
    std::mt19937_64 rng(5);
    Tensor a = random_tensor({1, 2, 3, 3}, rng, false);
    Tensor b = random_tensor({1, 3, 3, 3}, rng, false);
    Tensor c = concat_channels(a, b);
    REQUIRE(c.shape() == std::vector<int>{1, 5, 3, 3});
    Tensor back = slice_channels(c, 0, 2);
    CHECK(back.data() == a.data());
    Tensor back_b = slice_channels(c, 2, 5);
    CHECK(back_b.data() == b.data());
    CHECK_THROWS_AS(concat_channels(a, Tensor::zeros({1, 1, 2, 2})), DimensionError);
}

TEST_CASE("backward on sum gives all-ones gradient") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({2, 3}, rng, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x*x) at [1,2]") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
}

TEST_CASE("gradient accumulation across reuse") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    // loss = sum(x) + sum(x*x) -> grad = 1 + 2x
    backward(add(sum(x), sum(mul(x, x))));
    CHECK(x.grad() == std::vector<double>{3, 5});
}

TEST_CASE("backward linearity in the loss scale") {
    std::mt19937_64 rng(7);
    Tensor x = random_tensor({4}, rng, true);
    backward(sum(mul(x, x)));
    std::vector<double> g1 = x.grad();
    x.zero_grad();
    backward(scale(sum(mul(x, x)), 3.0));
    for (std::size_t i = 0; i < g1.size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(3.0 * g1[i]).epsilon(1e-14));
}

TEST_CASE("finite-difference checks across the op set") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        {
            Tensor x = random_tensor({1, 2, 4, 4}, rng);
            Tensor k = random_tensor({3, 2, 3, 3}, rng);
            Tensor b = random_tensor({3}, rng);
            CHECK(max_grad_rel_error({x, k, b}, [&] {
                      return sum(mul(conv2d(x, k, b, 1, 1), conv2d(x, k, b, 1, 1)));
                  }) < 1e-4);
        }
        {
            Tensor x = random_tensor({1, 2, 3, 3}, rng);
            Tensor k = random_tensor({2, 3, 2, 2}, rng);
            Tensor b = random_tensor({3}, rng);
            CHECK(max_grad_rel_error({x, k, b}, [&] {
                      Tensor y = transposed_conv2d(x, k, b, 2, 0);
                      return sum(mul(y, y));
                  }) < 1e-4);
        }
        {
            // keep each pooling window's top two values separated so the
            // argmax cannot flip under the fd perturbation
            Tensor x = random_tensor({1, 2, 4, 4}, rng);
            bool ok = false;
            while (!ok) {
                ok = true;
                for (int c = 0; c < 2 && ok; ++c)
                    for (int wy = 0; wy < 2 && ok; ++wy)
                        for (int wx = 0; wx < 2 && ok; ++wx) {
                            double top = -1e300, second = -1e300;
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const double v = x.data()[static_cast<std::size_t>(
                                        ((c * 4) + wy * 2 + dy) * 4 + wx * 2 + dx)];
                                    if (v > top) {
                                        second = top;
                                        top = v;
                                    } else if (v > second) {
                                        second = v;
                                    }
                                }
                            if (top - second < 1e-3) ok = false;
                        }
                if (!ok) x = random_tensor({1, 2, 4, 4}, rng);
            }
            CHECK(max_grad_rel_error({x}, [&] {
                      Tensor y = maxpool2d(x);
                      return sum(mul(y, y));
                  }) < 1e-4);
        }
        {
            Tensor a = random_tensor({1, 2, 2, 2}, rng);
            Tensor b2 = random_tensor({1, 3, 2, 2}, rng);
            CHECK(max_grad_rel_error({a, b2}, [&] {
                      Tensor c = concat_channels(a, b2);
                      return sum(mul(c, c));
                  }) < 1e-4);
        }
        {
            Tensor x = random_tensor({6}, rng);
            // |x| is kinked at 0; shift away from it for a clean fd check
            for (double& v : x.data()) v += (v >= 0 ? 0.5 : -0.5);
            CHECK(max_grad_rel_error({x}, [&] { return mean(abs(x)); }) < 1e-4);
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor b = random_tensor({4, 2}, rng);
            CHECK(max_grad_rel_error({a, b}, [&] {
                      Tensor y = matmul(a, b);
                      return sum(mul(y, y));
                  }) < 1e-4);
        }
        {
            Tensor a = random_tensor({2, 5}, rng);
            CHECK(max_grad_rel_error({a}, [&] {
                      Tensor s = softmax_rows(a);
                      return sum(mul(s, s));
                  }) < 1e-4);
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            CHECK(max_grad_rel_error({a}, [&] {
                      Tensor n = row_l2_normalize(a);
                      Tensor c = center_rows(a);
                      return add(sum(mul(n, n)), sum(mul(c, c)));
                  }) < 1e-4);
        }
    }
}

TEST_CASE("nchw row reshuffle round trips") {
    std::mt19937_64 rng(9);
    Tensor x = random_tensor({2, 3, 2, 2}, rng, false);
    Tensor rows = nchw_to_rows(x);
    REQUIRE(rows.shape() == std::vector<int>{8, 3});
    Tensor back = rows_to_nchw(rows, 2, 3, 2, 2);
    CHECK(back.data() == x.data());
}
