#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vare/array.hpp"
#include "vare/grad_check.hpp"

using namespace vare;

namespace {

Array64 rand_arr(Shape s, Rng& rng, double stddev = 1.0) {
    return Array64::randn(std::move(s), rng, stddev);
}

// Scalar objective over an op output: sum(w ⊙ y) with weights fixed at the
// first evaluation, so repeated calls inside grad_check see one function.
struct WeightedSum {
    uint64_t seed;
    mutable Array64 w;
    Array64 operator()(const Array64& y) const {
        if (!w.defined()) {
            Rng r(seed);
            w = rand_arr(y.shape(), r);
        }
        return sum(mul(y, stop_gradient(w)));
    }
};

}  // namespace

TEST_CASE("sigmoid symmetry and softmax shift invariance") {
    auto s = sigmoid(Array64::scalar(0.0));
    CHECK(s.item() == doctest::Approx(0.5).epsilon(1e-12));

    auto sm = softmax_last(Array64::from({3}, {1.7, 1.7, 1.7}));
    for (double v : sm.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("bilinear resize reproduces constants at any resolution") {
    Rng rng(7);
    for (auto [h, w, h2, w2] : {std::tuple{2, 2, 8, 8}, {4, 4, 16, 16}, {3, 5, 7, 11}, {8, 8, 3, 3}}) {
        auto a = Array64::filled({h, w, 2}, 0.73);
        auto r = resize_bilinear(a, h2, w2);
        for (double v : r.values()) CHECK(v == doctest::Approx(0.73).epsilon(1e-12));
        auto rn = resize_nearest(a, h2, w2);
        for (double v : rn.values()) CHECK(v == doctest::Approx(0.73).epsilon(1e-12));
    }
}

TEST_CASE("backward: analytic derivative of sum(x*x)") {
    auto x = Array64::from({2}, {1.0, 2.0});
    x.set_requires_grad();
    auto loss = sum(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));

    // repeated backward over zeroed grads is idempotent
    x.zero_grad();
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("stop_gradient blocks adjoint flow and keeps values") {
    auto w = Array64::scalar(0.3);
    auto c = Array64::scalar(2.0);
    w.set_requires_grad();
    c.set_requires_grad();
    auto loss = mul(sigmoid(w), stop_gradient(c));
    CHECK(stop_gradient(c).values()[0] == 2.0);
    backward(loss);
    const double s = 1.0 / (1.0 + std::exp(-0.3));
    CHECK(w.grad()[0] == doctest::Approx(2.0 * s * (1.0 - s)).epsilon(1e-10));
    CHECK(c.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = Array64::from({2}, {1.0, 2.0});
    x.set_requires_grad();
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("shape mismatch and log domain errors are structured") {
    auto a = Array64::zeros({2, 3});
    auto b = Array64::zeros({2, 2});
    CHECK_THROWS_WITH_AS(add(a, b) /*unused*/, doctest::Contains("add"), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(vare::log(Array64::from({1}, {0.0})), DomainError);
    CHECK_THROWS_AS(vare::log(Array64::from({1}, {-2.0})), DomainError);
}

TEST_CASE("grad_check on x^2 at 3") {
    auto p = Array64::scalar(3.0);
    double err = grad_check([](Array64& x) { return mul(x, x); }, p, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check: per-bit BCE on random logits/targets") {
    Rng rng(11);
    auto logits = rand_arr({4, 6}, rng);
    std::vector<double> bits(24);
    for (auto& b : bits) b = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto target = Array64::from({4, 6}, bits);
    auto bce = [&](Array64& x) {
        auto p = clamp(sigmoid(x), 1e-6, 1.0 - 1e-6);
        auto one_minus = add_const(scale(p, -1.0), 1.0);
        auto ones = Array64::filled({4, 6}, 1.0);
        auto t2 = sub(ones, target);
        auto ll = add(mul(target, vare::log(p)), mul(t2, vare::log(one_minus)));
        return scale(mean(ll), -1.0);
    };
    CHECK(grad_check(bce, logits, 1e-5) < 1e-4);
}

TEST_CASE("grad_check: Bernoulli KL on random clamped probabilities") {
    Rng rng(13);
    std::vector<double> pv(12);
    for (auto& p : pv) p = 0.05 + 0.9 * rng.uniform();
    auto pt = Array64::from({12}, pv);  // teacher side, constant
    auto logits = rand_arr({12}, rng);
    auto kl = [&](Array64& x) {
        auto q = clamp(sigmoid(x), 1e-6, 1.0 - 1e-6);
        auto one = Array64::filled({12}, 1.0);
        auto qm = sub(one, q);
        auto pm = sub(one, pt);
        auto t1 = mul(pt, sub(vare::log(pt), vare::log(q)));
        auto t2 = mul(pm, sub(vare::log(pm), vare::log(qm)));
        return mean(add(t1, t2));
    };
    CHECK(grad_check(kl, logits, 1e-5) < 1e-4);
}

TEST_CASE("grad_check: random 3-layer MLP against finite differences") {
    Rng rng(17);
    auto w1 = rand_arr({6, 8}, rng, 0.5);
    auto w2 = rand_arr({8, 8}, rng, 0.5);
    auto w3 = rand_arr({8, 3}, rng, 0.5);
    auto x = rand_arr({4, 6}, rng);
    auto g = Array64::filled({8}, 1.0);
    auto b = Array64::zeros({8});
    auto run = [&](Array64& w) {
        auto h1 = layer_norm(matmul(x, w1), g, b);
        auto h1a = mul(h1, sigmoid(h1));
        auto h2 = matmul(h1a, w2);
        auto h2a = mul(h2, sigmoid(h2));
        auto out = matmul(h2a, w3);
        return mean(mul(out, out));
    };
    for (auto* w : {&w1, &w2, &w3}) {
        w1.set_requires_grad(false);
        w2.set_requires_grad(false);
        w3.set_requires_grad(false);
        CHECK(grad_check(run, *w, 1e-5) < 1e-4);
    }
}

TEST_CASE("every primitive matches central finite differences on random shapes") {
    // >= 100 (op, shape, seed) combinations across the registered primitive set
    int combos = 0;
    Rng wseed(999);
    auto fd = [&](auto&& op, Array64& point, uint64_t) {
        ++combos;
        WeightedSum ws{wseed.next()};
        auto fn = [&](Array64& v) { return ws(op(v)); };
        double err = grad_check(fn, point, 1e-5);
        CAPTURE(combos);
        CHECK(err < 1e-4);
    };

    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const int m = 2 + int(seed % 3), k = 3 + int(seed % 2), n = 2 + int(seed % 4);

        // add / mul / sub with equal, suffix, scalar broadcast
        {
            auto b = rand_arr({m, k}, rng);
            auto x = rand_arr({m, k}, rng);
            fd([&](Array64& v) { return add(v, b); }, x, seed);
            fd([&](Array64& v) { return mul(v, b); }, x, seed);
            fd([&](Array64& v) { return sub(b, v); }, x, seed);
            auto suf = rand_arr({k}, rng);
            fd([&](Array64& v) { return add(v, suf); }, x, seed);
            auto xs = rand_arr({k}, rng);
            fd([&](Array64& v) { return mul(b, v); }, xs, seed);  // rhs suffix grad
            auto sc = rand_arr({}, rng);
            fd([&](Array64& v) { return add(b, v); }, sc, seed);  // rhs scalar grad
        }
        // scale / add_const / sigmoid / exp / log / clamp
        {
            auto x = rand_arr({m, n}, rng);
            fd([&](Array64& v) { return scale(v, 1.7); }, x, seed);
            fd([&](Array64& v) { return add_const(v, -0.4); }, x, seed);
            fd([&](Array64& v) { return sigmoid(v); }, x, seed);
            fd([&](Array64& v) { return vare::exp(v); }, x, seed);
            auto pos = rand_arr({m, n}, rng);
            for (auto& p : pos.values()) p = std::abs(p) + 0.5;
            fd([&](Array64& v) { return vare::log(v); }, pos, seed);
            auto cl = rand_arr({m, n}, rng);
            for (auto& p : cl.values())  // keep clear of the clamp knees
                if (std::abs(std::abs(p) - 1.0) < 1e-3) p += 0.01;
            fd([&](Array64& v) { return clamp(v, -1.0, 1.0); }, cl, seed);
        }
        // matmul / bmm (both operands)
        {
            auto a = rand_arr({m, k}, rng);
            auto b = rand_arr({k, n}, rng);
            fd([&](Array64& v) { return matmul(v, b); }, a, seed);
            fd([&](Array64& v) { return matmul(a, v); }, b, seed);
            auto ba = rand_arr({2, m, k}, rng);
            auto bb = rand_arr({2, k, n}, rng);
            fd([&](Array64& v) { return bmm(v, bb); }, ba, seed);
            fd([&](Array64& v) { return bmm(ba, v); }, bb, seed);
        }
        // movement: permute / transpose / reshape / concat / slice
        {
            auto x = rand_arr({m, k, n}, rng);
            fd([&](Array64& v) { return permute(v, {2, 0, 1}); }, x, seed);
            auto x2 = rand_arr({m, k}, rng);
            fd([&](Array64& v) { return transpose(v); }, x2, seed);
            fd([&](Array64& v) { return reshape(v, {k, m}); }, x2, seed);
            auto other = rand_arr({m, k}, rng);
            fd([&](Array64& v) {
                return concat<double>({v, other}, 1);
            }, x2, seed);
            fd([&](Array64& v) {
                return slice(v, {0, 1}, {m, k - 1});
            }, x2, seed);
        }
        // reductions
        {
            auto x = rand_arr({m, k, n}, rng);
            fd([&](Array64& v) { return sum(v); }, x, seed);
            fd([&](Array64& v) { return mean(v); }, x, seed);
            fd([&](Array64& v) { return sum_axis(v, 1); }, x, seed);
            fd([&](Array64& v) { return mean_axis(v, 2); }, x, seed);
        }
        // softmax / layer_norm (x, gain, bias)
        {
            auto x = rand_arr({m, n}, rng);
            fd([&](Array64& v) { return softmax_last(v); }, x, seed);
            auto g = rand_arr({n}, rng, 0.5);
            for (auto& v : g.values()) v += 1.0;
            auto b = rand_arr({n}, rng, 0.2);
            auto xs = rand_arr({m, n}, rng);
            fd([&](Array64& v) { return layer_norm(v, g, b); }, xs, seed);
            fd([&](Array64& v) { return layer_norm(xs, v, b); }, g, seed);
            fd([&](Array64& v) { return layer_norm(xs, g, v); }, b, seed);
        }
        // embedding
        {
            auto table = rand_arr({5, n}, rng);
            std::vector<int> ids{0, 3, 3, 1};
            fd([&](Array64& v) { return embedding(v, ids); }, table, seed);
        }
        // resize
        {
            auto x = rand_arr({3, 4, 2}, rng);
            fd([&](Array64& v) { return resize_bilinear(v, 6, 8); }, x, seed);
            fd([&](Array64& v) { return resize_bilinear(v, 2, 3); }, x, seed);
            fd([&](Array64& v) { return resize_nearest(v, 5, 5); }, x, seed);
        }
        // attention (q, k, v) with additive mask
        {
            const int hq = 2, tq = 3, tk = 4, dh = 3;
            auto q = rand_arr({hq, tq, dh}, rng);
            auto kk = rand_arr({hq, tk, dh}, rng);
            auto vv = rand_arr({hq, tk, dh}, rng);
            auto mask = Array64::zeros({tq, tk});
            mask.values()[1] = -1e9;  // mask one key for one query
            fd([&](Array64& v) { return attention(v, kk, vv, mask).out; }, q, seed);
            fd([&](Array64& v) { return attention(q, v, vv, mask).out; }, kk, seed);
            fd([&](Array64& v) { return attention(q, kk, v, mask).out; }, vv, seed);
        }
        // fused multi-head attention on packed [B*T, D] projections
        {
            const int B = 2, H = 2, Tq = 3, Tk = 4, D = 6;
            auto q = rand_arr({B * Tq, D}, rng);
            auto kk = rand_arr({B * Tk, D}, rng);
            auto vv = rand_arr({B * Tk, D}, rng);
            auto mask = Array64::zeros({B * H, Tq, Tk});
            mask.values()[2] = -1e9;
            mask.values()[size_t((B * H - 1) * Tq * Tk + 5)] = -1e9;
            fd([&](Array64& v) { return multihead_attention(v, kk, vv, mask, B, H); }, q, seed);
            fd([&](Array64& v) { return multihead_attention(q, v, vv, mask, B, H); }, kk, seed);
            fd([&](Array64& v) { return multihead_attention(q, kk, v, mask, B, H); }, vv, seed);
        }
        // stop_gradient leaves values unchanged, blocks flow (checked exactly)
        {
            auto x = rand_arr({m}, rng);
            x.set_requires_grad();
            auto y = sum(mul(stop_gradient(x), x));
            backward(y);
            for (int64_t i = 0; i < x.size(); ++i)
                CHECK(x.grad()[size_t(i)] == doctest::Approx(x.values()[size_t(i)]));
        }
    }
    CHECK(combos >= 100);
    MESSAGE("primitive FD combinations checked: " << combos);
}

TEST_CASE("forward determinism: identical results for a fixed seed") {
    auto run = [] {
        Rng rng(42);
        auto a = Array::randn({16, 16}, rng, 1.0f);
        auto b = Array::randn({16, 16}, rng, 1.0f);
        auto c = matmul(a, softmax_last(b));
        return c.values();
    };
    auto v1 = run();
    auto v2 = run();
    CHECK(v1 == v2);
}

TEST_CASE("fused and composite attention agree") {
    Rng rng(19);
    const int B = 2, H = 2, Tq = 5, Tk = 3, D = 8, dh = D / H;
    auto q = Array64::randn({B * Tq, D}, rng, 1.0);
    auto k = Array64::randn({B * Tk, D}, rng, 1.0);
    auto v = Array64::randn({B * Tk, D}, rng, 1.0);
    auto mask = Array64::zeros({Tq, Tk});
    mask.values()[1] = -1e9;
    auto fused = multihead_attention(q, k, v, mask, B, H);

    auto split = [&](const Array64& t, int rows) {
        return reshape(permute(reshape(t, {B, rows, H, dh}), {0, 2, 1, 3}), {B * H, rows, dh});
    };
    auto att = attention(split(q, Tq), split(k, Tk), split(v, Tk), mask);
    auto merged = reshape(permute(reshape(att.out, {B, H, Tq, dh}), {0, 2, 1, 3}), {B * Tq, D});
    for (int64_t i = 0; i < fused.size(); ++i)
        CHECK(fused.values()[size_t(i)] ==
              doctest::Approx(merged.values()[size_t(i)]).epsilon(1e-10));
}

TEST_CASE("attention weights: rows sum to one, masked keys get zero weight") {
    Rng rng(3);
    auto q = Array64::randn({2, 3, 4}, rng, 1.0);
    auto k = Array64::randn({2, 5, 4}, rng, 1.0);
    auto v = Array64::randn({2, 5, 4}, rng, 1.0);
    auto mask = Array64::zeros({3, 5});
    for (int r = 0; r < 3; ++r) mask.values()[size_t(r * 5 + 4)] = -1e9f;
    auto att = attention(q, k, v, mask);
    const auto& w = att.attn.values();
    for (int b = 0; b < 2; ++b)
        for (int r = 0; r < 3; ++r) {
            double rowsum = 0;
            for (int c = 0; c < 5; ++c) rowsum += w[size_t((b * 3 + r) * 5 + c)];
            CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-9));
            CHECK(w[size_t((b * 3 + r) * 5 + 4)] == doctest::Approx(0.0).epsilon(1e-12));
        }
}
