#include <catch2/catch_amalgamated.hpp>

#include "sct/tape.hpp"
#include "test_helpers.hpp"

using namespace sct;
using sct_test::matmul_oracle;
using sct_test::random_tensor;

TEST_CASE("matmul identity and scalar-multiple cases") {
    Tape t;
    int id2 = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    int v = t.constant(Tensor({2, 1}, {3, 4}));
    CHECK(t.val(t.matmul(id2, v)).data == std::vector<float>{3, 4});

    int two = t.constant(Tensor({2, 2}, {2, 0, 0, 2}));
    int ones = t.constant(Tensor({2, 2}, {1, 1, 1, 1}));
    CHECK(t.val(t.matmul(two, ones)).data == std::vector<float>{2, 2, 2, 2});
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        Tape t;
        const Tensor got = t.val(t.matmul(t.constant(a), t.constant(b)));
        const Tensor want = matmul_oracle(a, b);
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(std::abs(got.data[i] - want.data[i]) < 1e-6);
    }
}

TEST_CASE("matmul with identity is identity within 1e-6") {
    Rng rng(5);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor eye({6, 6});
    for (std::size_t i = 0; i < 6; ++i) eye.data[i * 6 + i] = 1.0f;
    Tape t;
    const Tensor y = t.val(t.matmul(t.constant(x), t.constant(eye)));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.data[i] - x.data[i]) < 1e-6);
}

TEST_CASE("matmul shape errors name both shapes") {
    Tape t;
    int a = t.constant(Tensor({2, 3}));
    int b = t.constant(Tensor({4, 2}));
    CHECK_THROWS_WITH(t.matmul(a, b),
                      Catch::Matchers::ContainsSubstring("[2,3]") &&
                          Catch::Matchers::ContainsSubstring("[4,2]"));
}

TEST_CASE("batched matmul broadcasts extent-1 batch axes") {
    Rng rng(13);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({1, 4, 5}, rng);
    Tape t;
    const Tensor c = t.val(t.matmul(t.constant(a), t.constant(b)));
    REQUIRE(c.shape == Shape{2, 3, 5});
    for (std::size_t bi = 0; bi < 2; ++bi) {
        Tensor ai({3, 4});
        std::copy_n(a.data.data() + bi * 12, 12, ai.data.data());
        Tensor bm({4, 5}, std::vector<float>(b.data.begin(), b.data.end()));
        const Tensor want = matmul_oracle(ai, bm);
        for (std::size_t i = 0; i < 15; ++i)
            CHECK(std::abs(c.data[bi * 15 + i] - want.data[i]) < 1e-6);
    }
}

TEST_CASE("layernorm basics") {
    SECTION("constant vector maps to zero under unit affine") {
        Tape t;
        int x = t.constant(Tensor({4}, {3, 3, 3, 3}));
        int g = t.constant(Tensor::full({4}, 1.0f));
        int b = t.constant(Tensor::zeros({4}));
        for (float v : t.val(t.layernorm(x, g, b, 1e-6f)).data) CHECK(std::abs(v) < 1e-3f);
    }
    SECTION("already-normalized input is unchanged as eps -> 0") {
        Tape t;
        int x = t.constant(Tensor({2}, {1, -1}));
        int g = t.constant(Tensor({2}, {1, 1}));
        int b = t.constant(Tensor({2}, {0, 0}));
        const Tensor y = t.val(t.layernorm(x, g, b, 1e-12f));
        CHECK(std::abs(y.data[0] - 1.0f) < 1e-4f);
        CHECK(std::abs(y.data[1] + 1.0f) < 1e-4f);
    }
    SECTION("random rows have mean ~0 and variance ~1") {
        Rng rng(3);
        Tensor x = random_tensor({6, 32}, rng, 2.0);
        Tape t;
        const Tensor y = t.val(t.layernorm(t.constant(x), t.constant(Tensor::full({32}, 1.0f)),
                                           t.constant(Tensor::zeros({32})), 1e-6f));
        for (std::size_t r = 0; r < 6; ++r) {
            double mean = 0.0, var = 0.0;
            for (std::size_t i = 0; i < 32; ++i) mean += y.data[r * 32 + i];
            mean /= 32;
            for (std::size_t i = 0; i < 32; ++i) {
                const double d = y.data[r * 32 + i] - mean;
                var += d * d;
            }
            var /= 32;
            CHECK(std::abs(mean) < 1e-5);
            CHECK(std::abs(var - 1.0) < 1e-3);
        }
    }
    SECTION("eps must be positive") {
        Tape t;
        int x = t.constant(Tensor({2}, {1, 2}));
        int g = t.constant(Tensor::full({2}, 1.0f));
        int b = t.constant(Tensor::zeros({2}));
        CHECK_THROWS_AS(t.layernorm(x, g, b, 0.0f), ValidationError);
    }
}

TEST_CASE("softmax rows sum to one and symmetric input splits evenly") {
    Tape t;
    const Tensor y = t.val(t.softmax(t.constant(Tensor({2}, {0, 0}))));
    CHECK(y.data[0] == Catch::Approx(0.5));
    CHECK(y.data[1] == Catch::Approx(0.5));

    Rng rng(9);
    const Tensor x = random_tensor({5, 7}, rng, 3.0);
    const Tensor s = t.val(t.softmax(t.constant(x)));
    for (std::size_t r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 7; ++i) sum += s.data[r * 7 + i];
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("gather/scatter channel routing") {
    Rng rng(21);
    const Tensor x = random_tensor({2, 3, 8}, rng);

    SECTION("full-index gather is the identity") {
        Tape t;
        const Tensor y = t.val(t.gather_channels(t.constant(x), {0, 1, 2, 3, 4, 5, 6, 7}));
        CHECK(y.data == x.data);
    }
    SECTION("scatter(gather(x,I), I, x) == x bitwise for random sorted index sets") {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            Rng r(seed);
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < 8; ++i)
                if (r.next_double() < 0.5) idx.push_back(i);
            if (idx.empty()) idx.push_back(0);
            Tape t;
            int xv = t.constant(x);
            int g = t.gather_channels(xv, idx);
            const Tensor y = t.val(t.scatter_channels(g, idx, xv));
            CHECK(y.data == x.data);
        }
    }
    SECTION("out-of-range index names the offender") {
        Tape t;
        CHECK_THROWS_WITH(t.gather_channels(t.constant(x), {0, 9}),
                          Catch::Matchers::ContainsSubstring("9"));
    }
    SECTION("unsorted or duplicate indices rejected") {
        Tape t;
        CHECK_THROWS_AS(t.gather_channels(t.constant(x), {3, 1}), IndexError);
        CHECK_THROWS_AS(t.gather_channels(t.constant(x), {1, 1}), IndexError);
    }
}

TEST_CASE("reduce_l2_over_all_but_channel hand case (3-4-5)") {
    // channel 0 holds [3,4] over two tokens -> norm 5
    Tape t;
    Tensor x({1, 2, 3});
    x.data = {3, 7, 1, 4, 0, 0}; // token0: ch=(3,7,1); token1: ch=(4,0,0)
    const Tensor z = t.val(t.reduce_l2_over_all_but_channel(t.constant(x)));
    REQUIRE(z.shape == Shape{3});
    CHECK(z.data[0] == Catch::Approx(5.0));
    CHECK(z.data[1] == Catch::Approx(7.0));
    CHECK(z.data[2] == Catch::Approx(1.0));
}

TEST_CASE("add broadcasting is exact-or-one only, no rank promotion") {
    Tape t;
    int a = t.constant(Tensor({2, 3}));
    int b = t.constant(Tensor({3}));
    CHECK_THROWS_AS(t.add(a, b), ShapeError);
    int c = t.constant(Tensor({1, 3}, {1, 2, 3}));
    const Tensor y = t.val(t.add(a, c));
    CHECK(y.shape == Shape{2, 3});
    CHECK(y.data == std::vector<float>{1, 2, 3, 1, 2, 3});
    int d = t.constant(Tensor({2, 2}));
    CHECK_THROWS_AS(t.add(a, d), ShapeError);
}

TEST_CASE("non-finite op results are an operation error") {
    Tape t;
    int big = t.constant(Tensor({2}, {1e30f, 1e30f}));
    CHECK_THROWS_AS(t.mul(big, big), NumericError);
}

TEST_CASE("ops are deterministic on identical inputs") {
    Rng rng(77);
    const Tensor a = random_tensor({8, 16}, rng);
    const Tensor b = random_tensor({16, 8}, rng);
    Tape t1, t2;
    const Tensor r1 = t1.val(t1.matmul(t1.constant(a), t1.constant(b)));
    const Tensor r2 = t2.val(t2.matmul(t2.constant(a), t2.constant(b)));
    CHECK(r1.data == r2.data);
}
