#include "test_util.hpp"

#include "uda/model.hpp"

using namespace uda;
using namespace uda::testing;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.encoder.embed_dim = 16;
    c.encoder.depth = 2;
    c.encoder.num_heads = 2;
    c.adapter.width = 8;
    c.decoder.channel_schedule = {16, 12, 8, 4};
    c.decoder.num_classes = 3;
    c.projector.teacher_dim = 12;
    return c;
}

Tensor random_images(int b, int h, int w, Rng& rng) { return random_tensor({b, 3, h, w}, rng, 0.0, 1.0); }

// Parameter count derived from layer shapes alone.
std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.encoder.embed_dim, p = c.encoder.patch_size, m = c.encoder.mlp_ratio * d;
    std::size_t n = 3 * p * p * d + d;
    n += c.encoder.depth * (2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d));
    n += 2 * d;
    const std::size_t w = c.adapter.width;
    if (c.adapter.spatial_prior) {
        const std::size_t io[5][2] = {{3, w / 2}, {w / 2, w}, {w, w}, {w, w}, {w, w}};
        for (auto [i, o] : io) n += i * o * 9 + o + 2 * o;
        n += 4 * (w * w + w);
    }
    n += 4 * (d * w + w);
    const auto& ch = c.decoder.channel_schedule;
    for (int i = 0; i < 4; ++i) n += w * ch[i] + ch[i];
    for (int i = 0; i < 3; ++i) n += ch[i] * ch[i + 1] * 9 + ch[i + 1] + 2 * ch[i + 1];
    n += ch[3] * c.decoder.num_classes + c.decoder.num_classes;
    const std::size_t t = c.projector.teacher_dim;
    n += d * t + t;
    if (c.projector.kind == "mlp") n += t * t + t;
    return n;
}

}  // namespace

TEST_CASE("encoder token grid shapes") {
    Rng rng(1);
    ModelConfig c = small_config();
    SegmentationModel m(c, 0);
    const TokenGrid g = m.encode(random_images(1, 64, 64, rng));
    CHECK(g.h == 4);
    CHECK(g.w == 4);
    CHECK(g.tokens.shape() == Shape{1, 16, 16});
    c.encoder.embed_dim = 192;
    c.encoder.num_heads = 4;
    c.encoder.depth = 1;
    SegmentationModel wide(c, 0);
    CHECK(wide.encode(random_images(1, 96, 96, rng)).tokens.shape() == Shape{1, 36, 192});
    CHECK_THROWS_AS(m.encode(random_images(1, 40, 64, rng)), ShapeError);
}

TEST_CASE("encoding is deterministic") {
    Rng rng(2);
    SegmentationModel m(small_config(), 0);
    const Tensor x = random_images(2, 32, 32, rng);
    CHECK(m.encode(x).tokens.value() == m.encode(x).tokens.value());
    SegmentationModel same_seed(small_config(), 0);
    CHECK(same_seed.encode(x).tokens.value() == m.encode(x).tokens.value());
}

TEST_CASE("adapter pyramid levels") {
    Rng rng(3);
    SegmentationModel m(small_config(), 0);
    const Tensor x = random_images(1, 96, 96, rng);
    const auto f = m.adapt(m.encode(x), x, false);
    const int sides[4] = {24, 12, 6, 3};
    for (int l = 0; l < 4; ++l) CHECK(f.levels[l].shape() == Shape{1, 8, sides[l], sides[l]});

    SUBCASE("zeroed fusion leaves resampled token features") {
        ModelConfig free_cfg = small_config();
        free_cfg.adapter.spatial_prior = false;
        SegmentationModel adapter_free(free_cfg, 0);
        // Share the token projections: copy every tensor the adapter-free model has.
        std::map<std::string, Tensor> st;
        for (auto& [k, v] : m.parameters().state()) st.emplace(k, v);
        adapter_free.parameters().load_state(st, true);
        m.adapter().zero_fusion();
        const auto fz = m.adapt(m.encode(x), x, false);
        const auto fp = adapter_free.adapt(adapter_free.encode(x), x, false);
        for (int l = 0; l < 4; ++l) CHECK(fz.levels[l].value() == fp.levels[l].value());
    }
    SUBCASE("mismatched token grid") {
        const Tensor other = random_images(1, 64, 32, rng);
        CHECK_THROWS_AS(m.adapt(m.encode(other), x, false), ShapeError);
    }
}

TEST_CASE("decoder") {
    Rng rng(4);
    SegmentationModel m(small_config(), 0);
    SUBCASE("full-resolution logits") {
        const auto out = m.forward(random_images(2, 96, 96, rng), false);
        CHECK(out.logits.shape() == Shape{2, 3, 96, 96});
        CHECK(out.tokens.tokens.shape() == Shape{2, 36, 16});
    }
    SUBCASE("channel schedule must strictly decrease") {
        PyramidDecoderConfig d;
        CHECK(d.channel_schedule == std::vector<int>{256, 128, 64, 32});
        CHECK_NOTHROW(d.validate());
        d.channel_schedule = {64, 64, 32, 16};
        CHECK_THROWS(d.validate());
        d.channel_schedule = {64, 32, 16};
        CHECK_THROWS(d.validate());
    }
    SUBCASE("constant-zero features give a uniform bias-only response") {
        MultiScaleFeatures zero;
        const int sides[4] = {64, 32, 16, 8};
        for (int l = 0; l < 4; ++l) zero.levels[l] = Var(Tensor({1, 8, sides[l], sides[l]}, 0.0));
        // Non-zero biases everywhere so the response is not trivially zero.
        for (auto& p : m.parameters().params())
            if (p.name.rfind("decoder.", 0) == 0 && p.name.find(".bias") != std::string::npos)
                for (auto& v : p.var.mutable_value().values()) v = rng.uniform(-1, 1);
        const Tensor y = m.decode(zero, 256, 256, false).value();
        // Away from zero-padded borders every pixel sees the same input.
        int off = 0;
        for (int c = 0; c < 3; ++c)
            for (int yy = 96; yy < 160; ++yy)
                for (int xx = 96; xx < 160; ++xx) off += std::abs(y.at(0, c, yy, xx) - y.at(0, c, 128, 128)) > 1e-12;
        CHECK(off == 0);
    }
}

TEST_CASE("projector") {
    Rng rng(5);
    ModelConfig c = small_config();
    SegmentationModel m(c, 0);
    const TokenGrid g = m.encode(random_images(1, 32, 32, rng));
    CHECK(m.project(g.tokens).shape() == Shape{1, 4, 12});

    c.projector.teacher_dim = 16;
    SegmentationModel sq(c, 0);
    for (auto& p : sq.parameters().params()) {
        if (p.name == "projector.layer.0.weight") {
            p.var.mutable_value().fill(0.0);
            for (int i = 0; i < 16; ++i) p.var.mutable_value().at(i, i) = 1.0;
        }
        if (p.name == "projector.layer.0.bias") p.var.mutable_value().fill(0.0);
    }
    const TokenGrid g2 = sq.encode(random_images(1, 32, 32, rng));
    CHECK(sq.project(g2.tokens).value() == g2.tokens.value());
}

TEST_CASE("parameter gradients match finite differences") {
    Rng rng(6);
    ModelConfig c = small_config();
    c.projector.kind = "mlp";
    SegmentationModel m(c, 0);
    const Tensor x = random_images(2, 32, 32, rng);
    Tensor w_out = random_tensor({2, 3, 32, 32}, rng);
    Tensor ref = random_tensor({2, 4, 12}, rng);

    auto group_leaves = [&](const std::string& prefix) {
        std::vector<Var> v;
        for (const auto& p : m.parameters().params())
            if (p.name.rfind(prefix, 0) == 0) v.push_back(p.var);
        return v;
    };
    auto logits_scalar = [&] { return ops::dot_const(m.forward(x, false).logits, w_out); };

    SUBCASE("adapter") {
        auto r = check_gradients(logits_scalar, group_leaves("adapter."), rng, 3);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("decoder") {
        auto r = check_gradients(logits_scalar, group_leaves("decoder."), rng, 3);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("encoder") {
        auto r = check_gradients(logits_scalar, group_leaves("encoder."), rng, 2);
        CHECK(r.max_rel_error < 1e-3);
    }
    SUBCASE("projector through the feature-distance loss") {
        auto f = [&] { return ops::cosine_distance(m.project(m.encode(x).tokens), ref); };
        auto r = check_gradients(f, group_leaves("projector."), rng, 6);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("train and eval normalisation differ; eval is deterministic") {
    Rng rng(7);
    SegmentationModel m(small_config(), 0);
    const Tensor x = random_images(2, 32, 32, rng);
    const Tensor e1 = m.forward(x, false).logits.value();
    const Tensor e2 = m.forward(x, false).logits.value();
    CHECK(e1 == e2);
    CHECK(m.forward(x, true).logits.value() != e1);
}

TEST_CASE("flip is not an architectural symmetry") {
    Rng rng(8);
    SegmentationModel m(small_config(), 0);
    const Tensor x = random_images(1, 32, 32, rng);
    const Tensor a = flip_last(m.forward(x, false).logits.value());
    const Tensor b = m.forward(flip_last(x), false).logits.value();
    CHECK(a != b);
}

TEST_CASE("arbitrary input sizes are padded and cropped") {
    Rng rng(9);
    SegmentationModel m(small_config(), 0);
    for (auto [h, w] : {std::pair{32, 32}, {45, 70}, {33, 31}}) {
        const auto out = m.forward(random_images(1, h, w, rng), false);
        CHECK(out.logits.shape() == Shape{1, 3, h, w});
    }
    const Tensor img = random_images(1, 5, 4, rng);
    const Tensor padded = reflect_pad(img, 9, 11);
    CHECK(padded.at(0, 0, 5, 0) == img.at(0, 0, 3, 0));
    CHECK(padded.at(0, 1, 0, 4) == img.at(0, 1, 0, 2));
}

TEST_CASE("parameter accounting") {
    ModelConfig c = small_config();
    SegmentationModel with(c, 0);
    CHECK(with.parameters().parameter_count() == expected_parameter_count(c));
    c.adapter.spatial_prior = false;
    SegmentationModel without(c, 0);
    CHECK(without.parameters().parameter_count() == expected_parameter_count(c));
    CHECK(with.parameters().parameter_count() > without.parameters().parameter_count());
    ModelConfig d;  // toy defaults
    CHECK(SegmentationModel(d, 0).parameters().parameter_count() == expected_parameter_count(d));
}

TEST_CASE("checkpoint round trip is bit-exact") {
    Rng rng(10);
    const auto dir = temp_dir("model_ckpt");
    SegmentationModel m(small_config(), 3);
    // Move batch-norm buffers away from their initial values.
    m.forward(random_images(2, 32, 32, rng), true);
    save_model(dir / "m.archive", m);
    const auto loaded = load_model(dir / "m.archive");
    const Tensor x = random_images(1, 64, 32, rng);
    CHECK(loaded->forward(x, false).logits.value() == m.forward(x, false).logits.value());
    CHECK(loaded->config().decoder.channel_schedule == m.config().decoder.channel_schedule);
}

TEST_CASE("external pretrained encoder") {
    const auto dir = temp_dir("pretrained");
    ModelConfig c = small_config();
    SegmentationModel donor(c, 42);
    std::vector<std::pair<std::string, Tensor>> enc;
    for (auto& [k, v] : donor.parameters().state())
        if (k.rfind("encoder.", 0) == 0) enc.emplace_back(k, v);
    save_archive(dir / "enc.archive", {{"kind", "encoder"}}, enc);

    c.encoder.kind = "external-pretrained";
    c.encoder.weights_path = (dir / "enc.archive").string();
    c.encoder.freeze = true;
    SegmentationModel m(c, 0);
    Rng rng(1);
    const Tensor x = random_images(1, 32, 32, rng);
    CHECK(m.encode(x).tokens.value() == donor.encode(x).tokens.value());
    for (const auto& p : m.parameters().params())
        if (p.name.rfind("encoder.", 0) == 0) CHECK_FALSE(p.var.requires_grad());

    enc.pop_back();
    save_archive(dir / "partial.archive", {{"kind", "encoder"}}, enc);
    c.encoder.weights_path = (dir / "partial.archive").string();
    CHECK_THROWS_AS(SegmentationModel(c, 0), StructureError);
}
