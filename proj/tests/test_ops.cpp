#include "test_util.hpp"

#include <fstream>

#include "uda/nn.hpp"

using namespace uda;
using namespace uda::testing;

TEST_CASE("tensor helpers") {
    Tensor t({2, 3}, std::vector<Real>{1, 2, 3, 4, 5, 6});
    CHECK(t.at(1, 2) == 6);
    CHECK(flip_last(t).to_vector() == std::vector<Real>{3, 2, 1, 6, 5, 4});
    CHECK(flip_last(flip_last(t)) == t);
    CHECK(t.slice0(1, 2).to_vector() == std::vector<Real>{4, 5, 6});
    CHECK(concat0(t, t).shape() == Shape{4, 3});
    CHECK(stack(std::vector<Tensor>{t, t}).shape() == Shape{2, 2, 3});
    CHECK_THROWS_AS(t.reshaped({4, 2, 1}), ShapeError);
    CHECK_THROWS_AS(Tensor({2}, std::vector<Real>{1, 2, 3}), ShapeError);
}

TEST_CASE("no-grad mode builds no graph") {
    Var a(Tensor({3}, 1.0), true);
    {
        NoGradGuard g;
        Var b = ops::scale(a, 2.0);
        CHECK_FALSE(b.requires_grad());
        CHECK(b.node()->inputs.empty());
    }
    CHECK(grad_enabled());
    CHECK(ops::scale(a, 2.0).requires_grad());
}

TEST_CASE("gradients of elementwise and linear ops") {
    Rng rng(1);
    Var x(random_tensor({2, 5, 6}, rng), true);
    Var w(random_tensor({4, 6}, rng), true);
    Var b(random_tensor({4}, rng), true);
    Var pos(random_tensor({5, 6}, rng), true);
    SUBCASE("linear") {
        auto r = check_gradients(scalarised([&] { return ops::linear(x, w, b); }, {2, 5, 4}, 2), {x, w, b}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("add_broadcast, scale, add") {
        auto f = [&] { return ops::add(ops::scale(ops::add_broadcast(x, pos), 0.7), x); };
        auto r = check_gradients(scalarised(f, {2, 5, 6}, 3), {x, pos}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("gelu and relu") {
        auto r = check_gradients(scalarised([&] { return ops::gelu(x); }, {2, 5, 6}, 4), {x}, rng);
        CHECK(r.max_rel_error < 1e-3);
        r = check_gradients(scalarised([&] { return ops::relu(x); }, {2, 5, 6}, 5), {x}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("layer_norm") {
        Var g(random_tensor({6}, rng, 0.5, 1.5), true), be(random_tensor({6}, rng), true);
        auto r = check_gradients(scalarised([&] { return ops::layer_norm(x, g, be); }, {2, 5, 6}, 6), {x, g, be}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("self_attention") {
        Var qkv(random_tensor({2, 5, 12}, rng), true);
        auto r = check_gradients(scalarised([&] { return ops::self_attention(qkv, 2); }, {2, 5, 4}, 7), {qkv}, rng, 16);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("token/map reshapes") {
        Var t(random_tensor({2, 6, 3}, rng), true);
        auto f = [&] { return ops::map_to_tokens(ops::tokens_to_map(t, 2, 3)); };
        CHECK(f().value() == t.value());
        auto r = check_gradients(scalarised([&] { return ops::tokens_to_map(t, 2, 3); }, {2, 3, 2, 3}, 8), {t}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("gradients of spatial ops") {
    Rng rng(11);
    Var x(random_tensor({2, 3, 6, 6}, rng), true);
    SUBCASE("conv2d 3x3 stride 1 and 2, 1x1") {
        Var w3(random_tensor({4, 3, 3, 3}, rng), true), b3(random_tensor({4}, rng), true);
        auto r = check_gradients(scalarised([&] { return ops::conv2d(x, w3, b3, 1, 1); }, {2, 4, 6, 6}, 1), {x, w3, b3}, rng);
        CHECK(r.max_rel_error < 1e-3);
        r = check_gradients(scalarised([&] { return ops::conv2d(x, w3, b3, 2, 1); }, {2, 4, 3, 3}, 2), {x, w3, b3}, rng);
        CHECK(r.max_rel_error < 1e-3);
        Var w1(random_tensor({5, 3, 1, 1}, rng), true), b1(random_tensor({5}, rng), true);
        r = check_gradients(scalarised([&] { return ops::conv2d(x, w1, b1, 1, 0); }, {2, 5, 6, 6}, 3), {x, w1, b1}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("batch_norm2d training") {
        BatchNormState st{Tensor({3}, 0.0), Tensor({3}, 1.0)};
        Var g(random_tensor({3}, rng, 0.5, 1.5), true), b(random_tensor({3}, rng), true);
        auto r = check_gradients(scalarised([&] { return ops::batch_norm2d(x, g, b, st, true); }, {2, 3, 6, 6}, 4),
                                 {x, g, b}, rng, 12);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("upsample and bilinear resize") {
        auto r = check_gradients(scalarised([&] { return ops::upsample_nearest(x, 2); }, {2, 3, 12, 12}, 5), {x}, rng);
        CHECK(r.max_rel_error < 1e-3);
        r = check_gradients(scalarised([&] { return ops::resize_bilinear(x, 11, 4); }, {2, 3, 11, 4}, 6), {x}, rng);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("batch norm statistics") {
    Rng rng(2);
    Tensor xv = random_tensor({4, 2, 3, 3}, rng, 0, 2);
    BatchNormState st{Tensor({2}, 0.0), Tensor({2}, 1.0)};
    Var g(Tensor({2}, 1.0)), b(Tensor({2}, 0.0));
    const Tensor y = ops::batch_norm2d(Var(xv), g, b, st, true).value();
    // Channel 0 of the output is standardised.
    double m = 0, v = 0;
    for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 9; ++i) m += y[static_cast<std::size_t>(n) * 18 + i];
    m /= 36;
    for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 9; ++i) v += std::pow(y[static_cast<std::size_t>(n) * 18 + i] - m, 2);
    CHECK(m == doctest::Approx(0).epsilon(1e-12));
    CHECK(v / 36 == doctest::Approx(1).epsilon(1e-4));
    CHECK(st.running_mean[0] != 0.0);
    // Eval mode is a fixed affine map of the running statistics.
    const Tensor e1 = ops::batch_norm2d(Var(xv), g, b, st, false).value();
    const Tensor e2 = ops::batch_norm2d(Var(xv), g, b, st, false).value();
    CHECK(e1 == e2);
    CHECK(e1 != y);
    CHECK(e1[0] == doctest::Approx((xv[0] - st.running_mean[0]) / std::sqrt(st.running_var[0] + st.eps)));
}

TEST_CASE("bilinear resize with half-pixel centres") {
    Var x(Tensor({1, 1, 1, 2}, std::vector<Real>{0, 1}));
    const Tensor y = ops::resize_bilinear(x, 1, 4).value();
    CHECK(y.to_vector() == std::vector<Real>{0, 0.25, 0.75, 1});
    Var c(Tensor({1, 2, 3, 5}, 2.5));
    const Tensor r = ops::resize_bilinear(c, 7, 2).value();
    for (Real v : r.values()) CHECK(v == 2.5);
}

TEST_CASE("per-sample results do not depend on the batch") {
    Rng rng(5);
    Tensor a = random_tensor({1, 3, 8, 8}, rng), b = random_tensor({1, 3, 8, 8}, rng);
    Var w(random_tensor({4, 3, 3, 3}, rng)), bias(random_tensor({4}, rng));
    const Tensor alone = ops::conv2d(Var(a), w, bias, 1, 1).value();
    const Tensor batched = ops::conv2d(Var(concat0(b, a)), w, bias, 1, 1).value();
    CHECK(batched.slice0(1, 2) == alone);
    Var lw(random_tensor({5, 8}, rng)), lb(random_tensor({5}, rng));
    Tensor t1 = random_tensor({1, 7, 8}, rng), t2 = random_tensor({1, 7, 8}, rng);
    CHECK(ops::linear(Var(concat0(t2, t1)), lw, lb).value().slice0(1, 2) == ops::linear(Var(t1), lw, lb).value());
}

TEST_CASE("weighted cross-entropy") {
    Rng rng(3);
    const int B = 2, C = 4, H = 3, W = 5;
    Var logits(random_tensor({B, C, H, W}, rng, -2, 2), true);
    LabelTensor labels = random_labels({B, H, W}, C, rng);
    labels[0] = 255;
    labels[7] = 255;
    Tensor weights = random_tensor({B, H, W}, rng, 0, 1);

    SUBCASE("value matches a direct computation") {
        double sum = 0;
        int valid = 0;
        for (int b = 0; b < B; ++b)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int l = labels.at(b, y, x);
                    if (l == 255) continue;
                    double z = 0;
                    for (int c = 0; c < C; ++c) z += std::exp(logits.value().at(b, c, y, x));
                    sum += weights.at(b, y, x) * -(logits.value().at(b, l, y, x) - std::log(z));
                    ++valid;
                }
        CHECK(ops::weighted_cross_entropy(logits, labels, weights, 255).value()[0] ==
              doctest::Approx(sum / valid).epsilon(1e-12));
    }
    SUBCASE("gradient") {
        auto r = check_gradients([&] { return ops::weighted_cross_entropy(logits, labels, weights, 255); }, {logits}, rng, 20);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("all-zero weights give zero loss and zero gradient") {
        Var l2(logits.value(), true);
        Var loss = ops::weighted_cross_entropy(l2, labels, Tensor({B, H, W}, 0.0), 255);
        CHECK(loss.value()[0] == 0.0);
        backward(loss);
        for (Real g : l2.grad().values()) CHECK(g == 0.0);
    }
    SUBCASE("all pixels ignored") {
        LabelTensor ign({B, H, W}, 255);
        CHECK(ops::weighted_cross_entropy(logits, ign, weights, 255).value()[0] == 0.0);
    }
}

TEST_CASE("cosine feature distance") {
    Rng rng(9);
    SUBCASE("identical and antiparallel grids hit the extremes exactly") {
        Tensor t = random_tensor({2, 9, 4}, rng);
        CHECK(ops::cosine_distance(Var(t), t).value()[0] == 0.0);
        Tensor neg = t;
        for (auto& v : neg.values()) v = -v;
        CHECK(ops::cosine_distance(Var(neg), t).value()[0] == 2.0);
    }
    SUBCASE("brute force on random 3x3x4 grids") {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor s = random_tensor({1, 9, 4}, rng), t = random_tensor({1, 9, 4}, rng);
            double total = 0;
            for (int p = 0; p < 9; ++p) {
                double dot = 0, ns = 0, nt = 0;
                for (int i = 0; i < 4; ++i) {
                    dot += s[p * 4 + i] * t[p * 4 + i];
                    ns += s[p * 4 + i] * s[p * 4 + i];
                    nt += t[p * 4 + i] * t[p * 4 + i];
                }
                total += 1 - dot / (std::sqrt(ns) * std::sqrt(nt));
            }
            const double loss = ops::cosine_distance(Var(s), t).value()[0];
            CHECK(loss == doctest::Approx(total / 9).epsilon(1e-6));
            CHECK(loss >= 0.0);
            CHECK(loss <= 2.0);
        }
    }
    SUBCASE("zero vector is stabilised") {
        Tensor s({1, 1, 4}, 0.0), t({1, 1, 4}, 1.0);
        const double loss = ops::cosine_distance(Var(s), t).value()[0];
        CHECK(std::isfinite(loss));
        CHECK(loss == 1.0);
    }
    SUBCASE("gradient") {
        Var s(random_tensor({1, 9, 4}, rng), true);
        Tensor t = random_tensor({1, 9, 4}, rng);
        auto r = check_gradients([&] { return ops::cosine_distance(s, t); }, {s}, rng, 24);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("archive round trip") {
    const auto dir = temp_dir("archive");
    Rng rng(4);
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({4}, rng);
    save_archive(dir / "x.archive", {{"kind", "test"}, {"n", 2}}, {{"a", a}, {"b", b}});
    const Archive ar = load_archive(dir / "x.archive");
    CHECK(ar.meta.at("n") == 2);
    CHECK(ar.tensors.at("a") == a);
    CHECK(ar.tensors.at("b") == b);
    std::ofstream(dir / "bad.archive") << "not an archive";
    CHECK_THROWS(load_archive(dir / "bad.archive"));
}
