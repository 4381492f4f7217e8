#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "lcg/tensor.hpp"

using namespace lcg;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::normal_distribution<double> dist(0.0, scl);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

// Dense single-head reference attention used as an oracle for the fused op.
std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, int len, int T, int d_model, int n_heads,
                                    std::optional<int> window) {
    std::vector<double> out(static_cast<size_t>(T) * d_model, 0.0);
    int dh = d_model / n_heads;
    for (int h = 0; h < n_heads; ++h) {
        for (int i = 0; i < len; ++i) {
            std::vector<double> s(static_cast<size_t>(len), -1e30);
            double mx = -1e30;
            for (int j = 0; j <= i; ++j) {
                if (window && i - j > *window) continue;
                double dot = 0.0;
                for (int e = 0; e < dh; ++e) dot += q[i * d_model + h * dh + e] * k[j * d_model + h * dh + e];
                s[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[static_cast<size_t>(j)]);
            }
            double z = 0.0;
            for (int j = 0; j <= i; ++j) {
                if (s[static_cast<size_t>(j)] <= -1e29) continue;
                z += std::exp(s[static_cast<size_t>(j)] - mx);
            }
            for (int j = 0; j <= i; ++j) {
                if (s[static_cast<size_t>(j)] <= -1e29) continue;
                double p = std::exp(s[static_cast<size_t>(j)] - mx) / z;
                for (int e = 0; e < dh; ++e) out[i * d_model + h * dh + e] += p * v[j * d_model + h * dh + e];
            }
        }
    }
    return out;
}

// Direct evaluation of the token-level contrastive objective from its
// definition, one token at a time.
double naive_lexi_contrastive(const Tensor& scores, const std::vector<int>& cap) {
    int64_t n = scores.rows(), T = scores.cols();
    double total = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        int64_t i = cap[static_cast<size_t>(t)];
        double own = scores.at(i, t);
        double za = 0.0;
        for (int64_t r = 0; r < n; ++r) za += std::exp(scores.at(r, t));
        double term_a = std::exp(own) / za;
        double zb = std::exp(own);
        for (int64_t o = 0; o < T; ++o) {
            if (cap[static_cast<size_t>(o)] == i) continue;
            zb += std::exp(scores.at(i, o));
        }
        double term_b = std::exp(own) / zb;
        total += -(0.5 * std::log(term_a) + 0.5 * std::log(term_b));
    }
    return total / static_cast<double>(T);
}

}  // namespace

TEST_CASE("matmul matches hand arithmetic") {
    Tape tape;
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = tape.matmul(a, b);
    CHECK(c.values() == std::vector<double>{19, 22, 43, 50});
    CHECK_THROWS_AS(tape.matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax normalises rows") {
    Tape tape;
    Tensor x = Tensor::from({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor y = tape.softmax(x);
    CHECK_THAT(y.values()[0], Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-15));
    CHECK_THAT(y.values()[1], Catch::Matchers::WithinAbs(2.0 / 6.0, 1e-15));
    CHECK_THAT(y.values()[2], Catch::Matchers::WithinAbs(3.0 / 6.0, 1e-15));

    Rng rng(7);
    Tensor big = random_tensor({17, 23}, rng, 30.0);
    Tensor sm = tape.softmax(big);
    for (int64_t r = 0; r < sm.rows(); ++r) {
        double s = 0.0;
        for (int64_t j = 0; j < sm.cols(); ++j) s += sm.at(r, j);
        CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("layer_norm matches a direct computation") {
    Rng rng(11);
    Tensor x = random_tensor({4, 8}, rng, 2.0);
    Tensor g = random_tensor({8}, rng);
    Tensor b = random_tensor({8}, rng);
    Tape tape;
    Tensor y = tape.layer_norm(x, g, b, 1e-5);
    for (int64_t r = 0; r < 4; ++r) {
        double mu = 0.0;
        for (int64_t j = 0; j < 8; ++j) mu += x.at(r, j);
        mu /= 8.0;
        double var = 0.0;
        for (int64_t j = 0; j < 8; ++j) var += (x.at(r, j) - mu) * (x.at(r, j) - mu);
        var /= 8.0;
        for (int64_t j = 0; j < 8; ++j) {
            double expect = g.values()[static_cast<size_t>(j)] * (x.at(r, j) - mu) / std::sqrt(var + 1e-5) +
                            b.values()[static_cast<size_t>(j)];
            CHECK_THAT(y.at(r, j), Catch::Matchers::WithinAbs(expect, 1e-12));
        }
    }
}

TEST_CASE("gelu endpoints and smoothness") {
    Tape tape;
    Tensor x = Tensor::from({1, 3}, {0.0, 10.0, -10.0});
    Tensor y = tape.gelu(x);
    CHECK(y.values()[0] == 0.0);
    CHECK_THAT(y.values()[1], Catch::Matchers::WithinAbs(10.0, 1e-6));
    CHECK_THAT(y.values()[2], Catch::Matchers::WithinAbs(0.0, 1e-6));
    // spot value of the tanh approximation at x = 1
    double u = 0.7978845608028654 * (1.0 + 0.044715);
    double expect = 0.5 * (1.0 + std::tanh(u));
    Tensor one = Tensor::from({1}, {1.0});
    CHECK_THAT(tape.gelu(one).values()[0], Catch::Matchers::WithinAbs(expect, 1e-15));
}

TEST_CASE("cross_entropy closed forms") {
    Tape tape;
    SECTION("uniform logits over 16 classes give ln 16") {
        Tensor logits = Tensor::zeros({3, 16});
        std::vector<int> targets{0, 5, 15};
        auto out = tape.cross_entropy(logits, targets);
        CHECK(out.counted == 3);
        CHECK_THAT(out.loss.item(), Catch::Matchers::WithinAbs(std::log(16.0), 1e-12));
    }
    SECTION("two-class margin of one") {
        Tensor logits = Tensor::from({1, 2}, {1.0, 0.0});
        std::vector<int> targets{0};
        auto out = tape.cross_entropy(logits, targets);
        CHECK_THAT(out.loss.item(), Catch::Matchers::WithinAbs(std::log(1.0 + std::exp(-1.0)), 1e-12));
    }
    SECTION("mask excludes rows and an all-masked batch is flagged") {
        Tensor logits = Tensor::from({2, 2}, {1.0, 0.0, 100.0, 0.0});
        std::vector<int> targets{0, 1};
        std::vector<uint8_t> mask{1, 0};
        auto out = tape.cross_entropy(logits, targets, mask);
        CHECK(out.counted == 1);
        CHECK_FALSE(out.all_masked);
        CHECK_THAT(out.loss.item(), Catch::Matchers::WithinAbs(std::log(1.0 + std::exp(-1.0)), 1e-12));

        std::vector<uint8_t> none{0, 0};
        auto empty = tape.cross_entropy(logits, targets, none);
        CHECK(empty.all_masked);
        CHECK(empty.loss.item() == 0.0);
    }
    SECTION("bad target index") {
        Tensor logits = Tensor::zeros({1, 4});
        std::vector<int> targets{4};
        CHECK_THROWS_AS(tape.cross_entropy(logits, targets), IndexError);
    }
}

TEST_CASE("gradients accumulate across backward calls") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad();
    for (int pass = 0; pass < 2; ++pass) {
        Tape tape;
        Tensor loss = tape.sum_all(tape.mul(x, x));
        tape.backward(loss);
    }
    // d/dx sum(x*x) = 2x, accumulated twice
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == 8.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("a tensor used twice receives both gradient paths") {
    Tensor x = Tensor::from({2}, {3.0, -1.0}).set_requires_grad();
    Tape tape;
    Tensor y = tape.add(tape.scale(x, 2.0), x);  // y = 3x
    tape.backward(tape.sum_all(y));
    CHECK(x.grad()[0] == 3.0);
    CHECK(x.grad()[1] == 3.0);
}

TEST_CASE("grad_check covers the elementwise and linear ops") {
    Rng rng(23);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    Tensor bias = random_tensor({5}, rng);
    Tensor g = random_tensor({5}, rng);
    Tensor be = random_tensor({5}, rng);

    auto f = [&](Tape& t) {
        Tensor h = t.add_bias(t.matmul(a, b), bias);
        h = t.gelu(h);
        h = t.layer_norm(h, g, be, 1e-5);
        Tensor s = t.softmax(h);
        return t.mean_all(t.mul(s, h));
    };
    CHECK(grad_check(f, {a, b, bias, g, be}) < 1e-4);
}

TEST_CASE("grad_check covers tanh exp clamp relu transpose slice concat") {
    Rng rng(29);
    Tensor a = random_tensor({4, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    auto f = [&](Tape& t) {
        Tensor x = t.concat_rows(t.relu(a), t.tanh_op(b));
        x = t.slice_rows(x, 1, 4);
        Tensor y = t.matmul(t.transpose(x), x);
        y = t.clamp_max(t.exp_op(y), 3.0);
        return t.mean_all(y);
    };
    CHECK(grad_check(f, {a, b}) < 1e-4);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
    Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21}).set_requires_grad();
    std::vector<int> ids{2, 0, 2};
    Tape tape;
    Tensor e = tape.embedding(table, ids);
    CHECK(e.values() == std::vector<double>{20, 21, 0, 1, 20, 21});
    tape.backward(tape.sum_all(e));
    CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
    std::vector<int> bad{3};
    CHECK_THROWS_AS(tape.embedding(table, bad), IndexError);
}

TEST_CASE("fused attention matches the dense reference") {
    Rng rng(31);
    const int T = 6, d_model = 8, heads = 2;
    for (std::optional<int> window : {std::optional<int>{}, std::optional<int>{1}, std::optional<int>{2}}) {
        Tensor q = random_tensor({T, d_model}, rng);
        Tensor k = random_tensor({T, d_model}, rng);
        Tensor v = random_tensor({T, d_model}, rng);
        SeqLayout lay{1, T, {4}};  // two trailing pad rows
        Tape tape;
        Tensor out = tape.self_attention(q, k, v, lay, heads, window);
        auto ref = naive_attention(q.values(), k.values(), v.values(), 4, T, d_model, heads, window);
        for (int i = 0; i < 4 * d_model; ++i) {
            CHECK_THAT(out.values()[static_cast<size_t>(i)], Catch::Matchers::WithinAbs(ref[static_cast<size_t>(i)], 1e-12));
        }
        for (int i = 4 * d_model; i < T * d_model; ++i) CHECK(out.values()[static_cast<size_t>(i)] == 0.0);
    }
}

TEST_CASE("attention gradients pass the finite-difference check") {
    Rng rng(37);
    const int T = 5, d_model = 6, heads = 3;
    Tensor q = random_tensor({2 * T, d_model}, rng);
    Tensor k = random_tensor({2 * T, d_model}, rng);
    Tensor v = random_tensor({2 * T, d_model}, rng);
    Tensor w = random_tensor({d_model, 2}, rng);
    SeqLayout lay{2, T, {5, 3}};
    auto f = [&](Tape& t) {
        Tensor out = t.self_attention(q, k, v, lay, heads, 2);
        return t.mean_all(t.matmul(out, w));
    };
    CHECK(grad_check(f, {q, k, v}) < 1e-4);
}

TEST_CASE("cross attention averages over all kv rows and checks gradients") {
    Rng rng(41);
    const int n = 2, Tq = 3, Tkv = 4, d_model = 6;
    Tensor q = random_tensor({n * Tq, d_model}, rng);
    Tensor k = random_tensor({n * Tkv, d_model}, rng);
    Tensor v = random_tensor({n * Tkv, d_model}, rng);

    // With equal keys the output is the mean of the values.
    Tensor keq = Tensor::zeros({n * Tkv, d_model});
    Tape tape;
    Tensor out = tape.cross_attention(q, keq, v, n, Tq, Tkv, 2, {});
    for (int c = 0; c < n; ++c) {
        for (int e = 0; e < d_model; ++e) {
            double mean = 0.0;
            for (int j = 0; j < Tkv; ++j) mean += v.at(c * Tkv + j, e);
            mean /= Tkv;
            CHECK_THAT(out.at(c * Tq, e), Catch::Matchers::WithinAbs(mean, 1e-12));
        }
    }

    auto f = [&](Tape& t) {
        Tensor o = t.cross_attention(q, k, v, n, Tq, Tkv, 2, {2, 3});
        return t.mean_all(o);
    };
    CHECK(grad_check(f, {q, k, v}) < 1e-4);
}

TEST_CASE("token contrastive loss equals the direct formula") {
    Rng rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> nd(2, 4), md(1, 5);
        int n = nd(rng);
        std::vector<int> cap;
        for (int i = 0; i < n; ++i) {
            int m = md(rng);
            for (int j = 0; j < m; ++j) cap.push_back(i);
        }
        Tensor scores = random_tensor({n, static_cast<int64_t>(cap.size())}, rng, 2.0);
        Tape tape;
        Tensor loss = tape.lexi_contrastive(scores, cap);
        CHECK_THAT(loss.item(), Catch::Matchers::WithinAbs(naive_lexi_contrastive(scores, cap), 1e-10));
    }
}

TEST_CASE("token contrastive loss closed forms") {
    SECTION("all-equal scores, two captions of three tokens") {
        std::vector<int> cap{0, 0, 0, 1, 1, 1};
        Tensor scores = Tensor::from({2, 6}, std::vector<double>(12, 0.7));
        Tape tape;
        CHECK_THAT(tape.lexi_contrastive(scores, cap).item(),
                   Catch::Matchers::WithinAbs(1.5 * std::log(2.0), 1e-12));
    }
    SECTION("single caption batch is exactly zero") {
        std::vector<int> cap{0, 0, 0, 0};
        Rng rng(47);
        Tensor scores = random_tensor({1, 4}, rng, 3.0);
        Tape tape;
        CHECK(tape.lexi_contrastive(scores, cap).item() == 0.0);
    }
}

TEST_CASE("token contrastive gradients pass the finite-difference check") {
    Rng rng(53);
    std::vector<int> cap{0, 0, 1, 1, 1, 2};
    Tensor scores = random_tensor({3, 6}, rng, 1.5);
    auto f = [&](Tape& t) { return t.lexi_contrastive(scores, cap); };
    CHECK(grad_check(f, {scores}) < 1e-4);
}

TEST_CASE("ops are deterministic") {
    Rng rng(59);
    Tensor a = random_tensor({7, 9}, rng);
    Tensor b = random_tensor({9, 5}, rng);
    Tape t1, t2;
    Tensor r1 = t1.softmax(t1.matmul(a, b));
    Tensor r2 = t2.softmax(t2.matmul(a, b));
    CHECK(r1.values() == r2.values());
}

TEST_CASE("backward rejects non-scalar targets and foreign tensors") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad();
    Tensor y = tape.scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
    Tape other;
    CHECK_THROWS_AS(other.backward(Tensor::scalar(1.0)), UsageError);
}

TEST_CASE("scale_by propagates into both operands") {
    Rng rng(61);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor s = Tensor::scalar(0.7);
    auto f = [&](Tape& t) { return t.mean_all(t.scale_by(t.exp_op(x), s)); };
    CHECK(grad_check(f, {x, s}) < 1e-4);
}
