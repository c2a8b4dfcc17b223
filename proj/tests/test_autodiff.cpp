#include <catch2/catch_amalgamated.hpp>

#include "sct/tape.hpp"
#include "test_helpers.hpp"

using namespace sct;
using sct_test::check_gradients;
using sct_test::random_tensor;

TEST_CASE("gradient of sum(W x) is the broadcast of x") {
    Rng rng(1);
    const Tensor x = random_tensor({3, 2}, rng);
    Tape t;
    int W = t.leaf(random_tensor({2, 3}, rng), "W", true);
    int xv = t.constant(x);
    int loss = t.sum_all(t.matmul(xv, W));
    auto grads = t.grad_of(loss);
    REQUIRE(grads.count("W") == 1);
    // d/dW[i,j] sum(x W) = sum_r x[r,i]
    for (std::size_t i = 0; i < 2; ++i) {
        double col = 0.0;
        for (std::size_t r = 0; r < 3; ++r) col += x.data[r * 2 + i];
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(grads.at("W").data[i * 3 + j] == Catch::Approx(col).margin(1e-6));
    }
}

TEST_CASE("frozen leaves are absent from the gradient map") {
    Rng rng(2);
    Tape t;
    int W = t.leaf(random_tensor({2, 2}, rng), "W", true);
    int F = t.leaf(random_tensor({2, 2}, rng), "F", false);
    int loss = t.sum_all(t.matmul(F, W));
    auto grads = t.grad_of(loss);
    CHECK(grads.count("W") == 1);
    CHECK(grads.count("F") == 0);
}

TEST_CASE("non-scalar loss is a contract error") {
    Tape t;
    int W = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}), "W", true);
    CHECK_THROWS_AS(t.grad_of(W), ValidationError);
}

TEST_CASE("finite-difference check: every primitive op") {
    Rng rng(42);

    SECTION("matmul, both operands") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.matmul(in[0], in[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
    }
    SECTION("batched matmul with broadcast") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.matmul(in[0], in[1]); },
                        {random_tensor({2, 2, 3}, rng), random_tensor({1, 3, 2}, rng)});
    }
    SECTION("add with broadcast") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.add(in[0], in[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({1, 4}, rng)});
    }
    SECTION("mul with broadcast") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.mul(in[0], in[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({3, 1}, rng)});
    }
    SECTION("scale_by_scalar") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) { return t.scale_by_scalar(in[0], 0.37f); },
            {random_tensor({4, 5}, rng)});
    }
    SECTION("reshape") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.reshape(in[0], {6}); },
                        {random_tensor({2, 3}, rng)});
    }
    SECTION("transpose") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) { return t.transpose(in[0], {2, 0, 1}); },
            {random_tensor({2, 3, 4}, rng)});
    }
    SECTION("slice_last") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) { return t.slice_last(in[0], 1, 3); },
            {random_tensor({2, 6}, rng)});
    }
    SECTION("concat") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) { return t.concat(in[0], in[1], 1); },
            {random_tensor({2, 2, 3}, rng), random_tensor({2, 4, 3}, rng)});
    }
    SECTION("broadcast_to") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) { return t.broadcast_to(in[0], {4, 2, 3}); },
            {random_tensor({1, 1, 3}, rng)});
    }
    SECTION("layernorm, all three inputs") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                return t.layernorm(in[0], in[1], in[2], 1e-6f);
            },
            {random_tensor({3, 8}, rng, 2.0), random_tensor({8}, rng), random_tensor({8}, rng)});
    }
    SECTION("softmax") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.softmax(in[0]); },
                        {random_tensor({3, 5}, rng, 2.0)});
    }
    SECTION("gelu") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.gelu(in[0]); },
                        {random_tensor({4, 6}, rng, 2.0)});
    }
    SECTION("gather_channels") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) { return t.gather_channels(in[0], {1, 3, 4}); },
            {random_tensor({2, 3, 6}, rng)});
    }
    SECTION("scatter_channels, both inputs") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                return t.scatter_channels(in[0], {0, 2}, in[1]);
            },
            {random_tensor({2, 2}, rng), random_tensor({2, 5}, rng)});
    }
    SECTION("reduce_l2_over_all_but_channel") {
        // keep values away from zero so the norm is differentiable
        Tensor x = random_tensor({2, 3, 4}, rng);
        for (float& v : x.data) v += (v >= 0 ? 1.0f : -1.0f);
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                return t.reduce_l2_over_all_but_channel(in[0]);
            },
            {x});
    }
    SECTION("sum_all") {
        check_gradients([](Tape& t, const std::vector<int>& in) { return t.sum_all(in[0]); },
                        {random_tensor({3, 3}, rng)});
    }
    SECTION("cross_entropy_mean") {
        check_gradients(
            [](Tape& t, const std::vector<int>& in) {
                return t.cross_entropy_mean(in[0], {1, 0, 2});
            },
            {random_tensor({3, 4}, rng, 2.0)});
    }
}

TEST_CASE("rng determinism across instances") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng c(124);
    bool differs = false;
    Rng a2(123);
    for (int i = 0; i < 10; ++i) differs |= (a2.next_u64() != c.next_u64());
    CHECK(differs);
}
