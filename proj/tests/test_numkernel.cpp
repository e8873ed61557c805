#include <doctest.h>

#include <cmath>
#include <numeric>

#include "maskgrid/grad_check.hpp"
#include "maskgrid/ops.hpp"
#include "maskgrid/rng.hpp"

using namespace maskgrid;
using nk::Tape;
using nk::Tensor;

namespace {

Tensor<double> random_tensor(nk::Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.mut_ptr()[i] = rng.normal(0.0, scale);
    return t;
}

// independent triple-loop reference
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<double> c = Tensor<double>::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a.at({i, kk}) * b.at({kk, j});
            c.mut_ptr()[i * n + j] = acc;
        }
    return c;
}

// reduces a graph output to a scalar so any op can be gradient-checked;
// the reshape shares data and gradient slot, so the fold stays on-tape
Tensor<double> weighted_sum(Tape<double>* tape, const Tensor<double>& x, const Tensor<double>& w) {
    Tensor<double> row = nk::mul(tape, x, w);
    const int64_t n = row.numel();
    row.shape = {1, n};
    Tensor<double> col = Tensor<double>::full({n, 1}, 1.0);
    return nk::matmul(tape, row, col);
}

}  // namespace

TEST_SUITE("numkernel") {

TEST_CASE("matmul identity and hand examples") {
    auto a = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto b = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
    auto c = nk::matmul<double>(nullptr, a, b);
    CHECK(c.at({0, 0}) == 3.0);
    CHECK(c.at({0, 1}) == 4.0);
    CHECK(c.at({1, 0}) == 5.0);
    CHECK(c.at({1, 1}) == 6.0);

    auto x = Tensor<double>::from({1, 2}, {1, 2});
    auto y = Tensor<double>::from({2, 1}, {3, 4});
    CHECK(nk::matmul<double>(nullptr, x, y).item() == 11.0);
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
    Rng rng(17);
    auto a = random_tensor({4, 5}, rng);
    auto b = random_tensor({5, 3}, rng);
    auto fast = nk::matmul<double>(nullptr, a, b);
    auto ref = naive_matmul(a, b);
    for (int64_t i = 0; i < fast.numel(); ++i)
        CHECK(std::abs(fast.ptr()[i] - ref.ptr()[i]) < 1e-12);
}

TEST_CASE("matmul rejects mismatched inner extents") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    CHECK_THROWS_AS(nk::matmul<double>(nullptr, a, b), dim_error);
}

TEST_CASE("gemm kernels agree with naive reference on odd sizes") {
    Rng rng(3);
    for (auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{7, 9, 5}, {1, 1, 1}, {13, 4, 17}}) {
        auto a = random_tensor({m, k}, rng);
        auto b = random_tensor({k, n}, rng);
        auto ref = naive_matmul(a, b);
        auto got = nk::matmul<double>(nullptr, a, b);
        for (int64_t i = 0; i < ref.numel(); ++i) CHECK(got.ptr()[i] == doctest::Approx(ref.ptr()[i]).epsilon(1e-12));
    }
}

TEST_CASE("log_softmax symmetry and stability") {
    auto x = Tensor<double>::from({2}, {0, 0});
    auto y = nk::log_softmax<double>(nullptr, x, 0);
    CHECK(y.ptr()[0] == doctest::Approx(std::log(0.5)));
    CHECK(y.ptr()[1] == doctest::Approx(std::log(0.5)));

    auto big = Tensor<double>::from({2}, {1000, 0});
    auto z = nk::log_softmax<double>(nullptr, big, 0);
    CHECK(std::isfinite(z.ptr()[0]));
    CHECK(z.ptr()[0] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(z.ptr()[1] == doctest::Approx(-1000.0));
}

TEST_CASE("log_softmax slices exponentiate to 1 on every slice") {
    Rng rng(5);
    auto x = random_tensor({3, 7, 2}, rng, 3.0);
    for (int axis : {0, 1, 2}) {
        auto y = nk::log_softmax<double>(nullptr, x, axis);
        // sum exp over the axis for every (outer, inner) pair
        nk::Shape s = x.shape;
        int ax = axis;
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < ax; ++i) outer *= s[i];
        for (size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                double total = 0;
                for (int64_t l = 0; l < s[ax]; ++l) total += std::exp(y.ptr()[o * s[ax] * inner + l * inner + in]);
                CHECK(std::abs(total - 1.0) < 1e-9);
            }
    }
}

TEST_CASE("cross_entropy_masked hand values") {
    // uniform logits over K=4, one masked row -> ln 4
    auto logits = Tensor<double>::zeros({2, 4});
    std::vector<int32_t> targets{1, 2};
    std::vector<uint8_t> mask{1, 0};
    auto loss = nk::cross_entropy_masked<double>(nullptr, logits, targets, mask);
    CHECK(loss.item() == doctest::Approx(std::log(4.0)));

    // delta logits on the target -> ~0
    auto delta = Tensor<double>::zeros({1, 4});
    delta.mut_ptr()[2] = 50.0;
    std::vector<int32_t> t2{2};
    std::vector<uint8_t> m2{1};
    CHECK(nk::cross_entropy_masked<double>(nullptr, delta, t2, m2).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross_entropy_masked equals -sum log p over known probabilities") {
    // three masked rows with hand-computed probabilities
    Rng rng(11);
    auto logits = random_tensor({3, 5}, rng, 2.0);
    std::vector<int32_t> targets{4, 0, 2};
    std::vector<uint8_t> mask{1, 1, 1};
    double expect = 0;
    for (int64_t r = 0; r < 3; ++r) {
        double mx = -1e300;
        for (int64_t j = 0; j < 5; ++j) mx = std::max(mx, logits.at({r, j}));
        double denom = 0;
        for (int64_t j = 0; j < 5; ++j) denom += std::exp(logits.at({r, j}) - mx);
        const double p = std::exp(logits.at({r, targets[r]}) - mx) / denom;
        expect -= std::log(p);
    }
    auto loss = nk::cross_entropy_masked<double>(nullptr, logits, targets, mask);
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cross_entropy_masked rejects an empty mask") {
    auto logits = Tensor<double>::zeros({2, 4});
    std::vector<int32_t> targets{0, 1};
    std::vector<uint8_t> mask{0, 0};
    CHECK_THROWS_AS(nk::cross_entropy_masked<double>(nullptr, logits, targets, mask), input_error);
}

TEST_CASE("cross_entropy_masked is additive over disjoint masks") {
    Rng rng(23);
    auto logits = random_tensor({6, 8}, rng, 1.5);
    std::vector<int32_t> targets(6);
    for (auto& t : targets) t = static_cast<int32_t>(rng.uniform_int(8));
    std::vector<uint8_t> m1{1, 0, 1, 0, 0, 0}, m2{0, 1, 0, 0, 1, 1}, mu{1, 1, 1, 0, 1, 1};
    const double l1 = nk::cross_entropy_masked<double>(nullptr, logits, targets, m1).item();
    const double l2 = nk::cross_entropy_masked<double>(nullptr, logits, targets, m2).item();
    const double lu = nk::cross_entropy_masked<double>(nullptr, logits, targets, mu).item();
    CHECK(lu == doctest::Approx(l1 + l2).epsilon(1e-12));
}

TEST_CASE("grad_check on f(x)=x^2 at x=3") {
    auto x = Tensor<double>::scalar(3.0);
    auto result = nk::grad_check(
        [&](Tape<double>* tape) { return nk::mul(tape, x, x); }, std::vector<Tensor<double>*>{&x}, 1e-5);
    CHECK(result.max_rel_err < 1e-9);
    CHECK(result.coords_checked == 1);
}

TEST_CASE("grad_check rejects out-of-range eps") {
    auto x = Tensor<double>::scalar(1.0);
    CHECK_THROWS_AS(nk::grad_check([&](Tape<double>* tape) { return nk::mul(tape, x, x); },
                                   std::vector<Tensor<double>*>{&x}, 1e-2),
                    input_error);
}

TEST_CASE("per-primitive gradients match central differences") {
    Rng rng(41);

    SUBCASE("add with broadcast bias") {
        auto x = random_tensor({3, 4}, rng);
        auto b = random_tensor({4}, rng);
        auto w = random_tensor({3, 4}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::add(tape, x, b), w); },
            std::vector<Tensor<double>*>{&x, &b}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("mul") {
        auto x = random_tensor({5}, rng);
        auto y = random_tensor({5}, rng);
        auto w = random_tensor({5}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::mul(tape, x, y), w); },
            std::vector<Tensor<double>*>{&x, &y}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("matmul") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        auto w = random_tensor({3, 2}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::matmul(tape, a, b), w); },
            std::vector<Tensor<double>*>{&a, &b}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("linear") {
        auto x = random_tensor({3, 4}, rng);
        auto wmat = random_tensor({4, 2}, rng);
        auto bias = random_tensor({2}, rng);
        auto w = random_tensor({3, 2}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::linear(tape, x, wmat, bias), w); },
            std::vector<Tensor<double>*>{&x, &wmat, &bias}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("gelu") {
        auto x = random_tensor({7}, rng);
        auto w = random_tensor({7}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::gelu(tape, x), w); },
            std::vector<Tensor<double>*>{&x}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("layer_norm") {
        auto x = random_tensor({3, 6}, rng);
        auto gamma = random_tensor({6}, rng);
        auto beta = random_tensor({6}, rng);
        auto w = random_tensor({3, 6}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::layer_norm(tape, x, gamma, beta), w); },
            std::vector<Tensor<double>*>{&x, &gamma, &beta}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("softmax and log_softmax") {
        auto x = random_tensor({4, 5}, rng, 2.0);
        auto w = random_tensor({4, 5}, rng);
        auto r1 = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::softmax(tape, x, 1), w); },
            std::vector<Tensor<double>*>{&x}, 1e-5);
        CHECK(r1.max_rel_err < 1e-5);
        auto r2 = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::log_softmax(tape, x, 1), w); },
            std::vector<Tensor<double>*>{&x}, 1e-5);
        CHECK(r2.max_rel_err < 1e-5);
    }
    SUBCASE("embedding_lookup") {
        auto table = random_tensor({6, 3}, rng);
        std::vector<int32_t> ids{1, 4, 1, 0};
        auto w = random_tensor({4, 3}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return weighted_sum(tape, nk::embedding_lookup(tape, table, ids), w); },
            std::vector<Tensor<double>*>{&table}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("concatenate and slice") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({4, 3}, rng);
        auto w = random_tensor({3, 3}, rng);
        auto r = nk::grad_check(
            [&](Tape<double>* tape) {
                std::vector<Tensor<double>> parts{a, b};
                auto cat = nk::concatenate(tape, std::span<const Tensor<double>>(parts), 0);
                auto sl = nk::slice(tape, cat, 0, 1, 3);
                return weighted_sum(tape, sl, w);
            },
            std::vector<Tensor<double>*>{&a, &b}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("cross_entropy_masked") {
        auto logits = random_tensor({4, 6}, rng, 1.5);
        std::vector<int32_t> targets{2, 0, 5, 3};
        std::vector<uint8_t> mask{1, 0, 1, 1};
        auto r = nk::grad_check(
            [&](Tape<double>* tape) { return nk::cross_entropy_masked(tape, logits, targets, mask); },
            std::vector<Tensor<double>*>{&logits}, 1e-5);
        CHECK(r.max_rel_err < 1e-5);
    }
    SUBCASE("attention bidirectional and causal") {
        const int heads = 2;
        auto q = random_tensor({5, 8}, rng, 0.7);
        auto k = random_tensor({5, 8}, rng, 0.7);
        auto v = random_tensor({5, 8}, rng, 0.7);
        auto w = random_tensor({5, 8}, rng);
        std::vector<int32_t> pos{0, 1, 2, 0, 1};
        std::vector<nk::SegRange> segs{{0, 3}, {3, 5}};
        for (bool causal : {false, true}) {
            auto r = nk::grad_check(
                [&](Tape<double>* tape) {
                    return weighted_sum(tape, nk::attention(tape, q, k, v, heads, pos, segs, causal), w);
                },
                std::vector<Tensor<double>*>{&q, &k, &v}, 1e-5);
            CHECK(r.max_rel_err < 1e-5);
        }
    }
}

TEST_CASE("argmax along axis") {
    auto x = Tensor<double>::from({2, 3}, {1, 5, 2, 9, 0, 3});
    auto idx = nk::argmax_along_axis(x, 1);
    CHECK(idx[0] == 1);
    CHECK(idx[1] == 0);
    auto idx0 = nk::argmax_along_axis(x, 0);
    CHECK(idx0[0] == 1);
    CHECK(idx0[1] == 0);
    CHECK(idx0[2] == 1);
}

TEST_CASE("debug finite checks flag NaN outputs") {
    nk::set_debug_checks(true);
    auto x = Tensor<double>::from({2}, {1e308, 1e308});
    CHECK_THROWS_AS(nk::add<double>(nullptr, x, x), numeric_error);
    nk::set_debug_checks(false);
    CHECK_NOTHROW(nk::add<double>(nullptr, x, x));
}

TEST_CASE("ops are deterministic given identical inputs") {
    Rng rng(77);
    auto a = random_tensor({6, 6}, rng);
    auto b = random_tensor({6, 6}, rng);
    auto c1 = nk::matmul<double>(nullptr, a, b);
    auto c2 = nk::matmul<double>(nullptr, a, b);
    for (int64_t i = 0; i < c1.numel(); ++i) CHECK(c1.ptr()[i] == c2.ptr()[i]);
}

TEST_CASE("rng state round-trips and streams are reproducible") {
    Rng a(123);
    (void)a.next_u64();
    const std::string state = a.save_state();
    Rng b;
    b.load_state(state);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng s1 = Rng::stream(9, "train");
    Rng s2 = Rng::stream(9, "train");
    Rng s3 = Rng::stream(9, "decode");
    CHECK(s1.next_u64() == s2.next_u64());
    CHECK(s1.next_u64() != s3.next_u64());
}

}  // TEST_SUITE
