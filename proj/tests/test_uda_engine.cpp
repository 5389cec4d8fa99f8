#include "test_util.hpp"

#include <set>

#include "uda/uda_engine.hpp"

using namespace uda;
using namespace uda::testing;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.encoder.embed_dim = 16;
    c.encoder.depth = 2;
    c.encoder.num_heads = 2;
    c.adapter.width = 8;
    c.decoder.channel_schedule = {16, 12, 8, 4};
    c.decoder.num_classes = 6;
    c.projector.teacher_dim = 12;
    return c;
}

struct Fixture {
    ToyDomains toy;
    ModelConfig model = tiny_model();
    TrainConfig train;
    std::unique_ptr<ReferenceExtractor> reference;

    Fixture() {
        ToyConfig tc;
        tc.image_size = 64;
        tc.num_source = 6;
        tc.num_target_train = 6;
        tc.num_target_val = 2;
        toy = generate_toy_domains(tc, 11);
        train.schedule.crop_size = 32;
        train.schedule.batch_size = 2;
        train.schedule.warmup_iters = 5;
        train.schedule.total_iters = 200;
        EncoderConfig ec = model.encoder;
        ec.embed_dim = model.projector.teacher_dim;
        reference = std::make_unique<ReferenceExtractor>(ec, 0x5eed);
    }

    /// Runs `steps` steps from `state` with per-step streams derived from `seed`.
    std::vector<LossReport> run(TrainingState& state, int steps, std::uint64_t seed) const {
        BatchSampler src(toy.source, train.schedule.crop_size, train.schedule.batch_size);
        BatchSampler tgt(toy.target_train, train.schedule.crop_size, train.schedule.batch_size);
        std::vector<LossReport> out;
        for (int i = 0; i < steps; ++i) {
            const int s = state.step;
            Rng rs = Rng::derive(seed, {1, static_cast<std::uint64_t>(s)});
            Rng rt = Rng::derive(seed, {2, static_cast<std::uint64_t>(s)});
            Rng rr = Rng::derive(seed, {3, static_cast<std::uint64_t>(s)});
            const Batch sb = src.sample(rs);
            const Batch tb = tgt.sample(rt);
            out.push_back(train_step(state, reference.get(), sb, &tb, train, rr));
        }
        return out;
    }
};

bool same_state(const SegmentationModel& a, const SegmentationModel& b) {
    const auto sa = a.parameters().state(), sb = b.parameters().state();
    if (sa.size() != sb.size()) return false;
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (sa[i].first != sb[i].first || !(sa[i].second == sb[i].second)) return false;
    return true;
}

Tensor one_hot_probs(int b, int c, int h, int w, int cls) {
    Tensor p({b, c, h, w}, 0.0);
    for (int i = 0; i < b; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) p.at(i, cls, y, x) = 1.0;
    return p;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    ScheduleConfig s;
    const ParamGroup dec{ParamKind::decoder};
    const ParamGroup top{ParamKind::encoder_block, 3};
    CHECK(lr_at(s, 750, dec, 4) == doctest::Approx(7e-5).epsilon(1e-12));
    CHECK(lr_at(s, 1500, dec, 4) == doctest::Approx(1.4e-4).epsilon(1e-12));
    CHECK(lr_at(s, 1500, top, 4) == doctest::Approx(1.4e-5).epsilon(1e-12));
    CHECK(lr_at(s, 1500, {ParamKind::encoder_block, 0}, 4) == doctest::Approx(1.4e-5 * 0.729).epsilon(1e-12));
    CHECK(lr_at(s, 1500, {ParamKind::encoder_embed}, 4) == doctest::Approx(1.4e-5 * 0.6561).epsilon(1e-12));
    CHECK(lr_at(s, 1500, {ParamKind::encoder_head}, 4) == doctest::Approx(1.4e-5).epsilon(1e-12));
    CHECK(lr_at(s, 40000, dec, 4) == 0.0);
    CHECK(lr_at(s, 0, dec, 4) == 0.0);
    // Halfway through the decay phase.
    CHECK(lr_at(s, 20750, dec, 4) == doctest::Approx(7e-5).epsilon(1e-12));
    CHECK(lr_at(s, 1500, dec, 4, false) == doctest::Approx(1.4e-5).epsilon(1e-12));
    CHECK(lr_at(s, 1500, {ParamKind::projector}, 4, false) == doctest::Approx(1.4e-5).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(s, 40001, dec, 4), std::out_of_range);
    CHECK_THROWS_AS(lr_at(s, -1, dec, 4), std::out_of_range);

    ScheduleConfig bad;
    bad.warmup_iters = bad.total_iters;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("EMA teacher") {
    SegmentationModel student(tiny_model(), 1);
    SUBCASE("alpha 0 copies the student") {
        TeacherState t = make_teacher(SegmentationModel(tiny_model(), 2), 0.0);
        ema_update(t, student);
        CHECK(same_state(*t.model, student));
    }
    SUBCASE("alpha 1 freezes parameters but copies buffers") {
        SegmentationModel other(tiny_model(), 2);
        TeacherState t = make_teacher(other, 1.0);
        ema_update(t, student);
        for (std::size_t i = 0; i < other.parameters().params().size(); ++i)
            CHECK(t.model->parameters().params()[i].var.value() == other.parameters().params()[i].var.value());
        const auto tb = t.model->parameters().buffers();
        const auto sb = student.parameters().buffers();
        for (std::size_t i = 0; i < tb.size(); ++i) CHECK(*tb[i].second == *sb[i].second);
    }
    SUBCASE("closed form after n updates and geometric convergence") {
        SegmentationModel init(tiny_model(), 2);
        const double a = 0.9;
        TeacherState t = make_teacher(init, a);
        double prev_gap = 1e300;
        for (int n = 1; n <= 20; ++n) {
            ema_update(t, student);
            const double an = std::pow(a, n);
            double max_err = 0, gap = 0;
            for (std::size_t i = 0; i < student.parameters().params().size(); ++i) {
                const auto& th = t.model->parameters().params()[i].var.value();
                const auto& s = student.parameters().params()[i].var.value();
                const auto& t0 = init.parameters().params()[i].var.value();
                for (std::size_t k = 0; k < th.numel(); ++k) {
                    max_err = std::max(max_err, std::abs(th[k] - (an * t0[k] + (1 - an) * s[k])));
                    gap = std::max(gap, std::abs(th[k] - s[k]));
                }
            }
            CHECK(max_err < 1e-6);
            CHECK(gap <= prev_gap * a + 1e-12);
            prev_gap = gap;
        }
    }
    SUBCASE("structure mismatch") {
        ModelConfig other = tiny_model();
        other.adapter.width = 10;
        TeacherState t = make_teacher(SegmentationModel(other, 0), 0.5);
        CHECK_THROWS_AS(ema_update(t, student), StructureError);
    }
}

TEST_CASE("pseudo-label confidence weight") {
    const int C = 4;
    SUBCASE("uniform probabilities give q = 0 and ties go to class 0") {
        const auto pl = pseudo_labels_from_probabilities(Tensor({2, C, 3, 5}, 1.0 / C), 0.968);
        CHECK(pl.q == std::vector<double>{0.0, 0.0});
        for (int v : pl.labels.values()) CHECK(v == 0);
    }
    SUBCASE("one-hot probabilities give q = 1") {
        const auto pl = pseudo_labels_from_probabilities(one_hot_probs(2, C, 3, 5, 2), 0.968);
        CHECK(pl.q == std::vector<double>{1.0, 1.0});
        for (int v : pl.labels.values()) CHECK(v == 2);
        CHECK(pl.weights() == Tensor({2, 3, 5}, 1.0));
    }
    SUBCASE("q is non-increasing in tau and counts confidence >= tau") {
        Rng rng(3);
        Tensor logits = random_tensor({1, C, 8, 8}, rng, -4, 4);
        const Tensor p = softmax_channels(logits);
        double prev = 1.0;
        for (double tau = 0.05; tau < 1.0; tau += 0.05) {
            const auto pl = pseudo_labels_from_probabilities(p, tau);
            int n = 0;
            for (Real c : pl.confidence.values()) n += c >= tau;
            CHECK(pl.q[0] == doctest::Approx(n / 64.0));
            CHECK(pl.q[0] <= prev);
            prev = pl.q[0];
        }
    }
    SUBCASE("softmax sums to one") {
        Rng rng(4);
        const Tensor p = softmax_channels(random_tensor({2, C, 3, 3}, rng, -30, 30));
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < 3; ++y)
                for (int x = 0; x < 3; ++x) {
                    double s = 0;
                    for (int c = 0; c < C; ++c) s += p.at(b, c, y, x);
                    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
                }
    }
}

TEST_CASE("flip-aggregated pseudo-labels are flip-equivariant") {
    Rng rng(5);
    TeacherState t = make_teacher(SegmentationModel(tiny_model(), 3), 0.999);
    const Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);
    const auto a = generate_pseudo_labels(t, x, 0.5, true);
    const auto b = generate_pseudo_labels(t, flip_last(x), 0.5, true);
    CHECK(flip_last(a.labels) == b.labels);
    CHECK(flip_last(a.confidence) == b.confidence);
    CHECK(a.q == b.q);
    CHECK_THROWS_AS(generate_pseudo_labels(t, x, 1.0, true), std::invalid_argument);
    CHECK_THROWS_AS(generate_pseudo_labels(t, x, 0.0, true), std::invalid_argument);
}

TEST_CASE("class-mix") {
    const int H = 12, W = 10;
    Rng rng(6);
    SegmentationSample src;
    src.image = random_tensor({3, H, W}, rng, 0, 1);
    const Tensor tgt = random_tensor({3, H, W}, rng, 0, 1);
    const LabelTensor pseudo = random_labels({H, W}, 6, rng);

    SUBCASE("single class is always pasted") {
        LabelTensor l({H, W}, 3);
        l.at(0, 0) = 255;
        src.label = l;
        const auto m = dacs_mix(src, tgt, pseudo, 0.4, rng, 255);
        CHECK(m.selected_classes == std::vector<int>{3});
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) CHECK(m.mask.at(y, x) == ((y || x) ? 1 : 0));
    }
    SUBCASE("half the classes rounded up, with exact pixel provenance") {
        LabelTensor l({H, W});
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) l.at(y, x) = (y * W + x) % 5 == 4 ? 255 : (y * W + x) % 5;
        src.label = l;
        std::vector<int> hits(4, 0);
        for (int trial = 0; trial < 1000; ++trial) {
            const double q = rng.uniform();
            const auto m = dacs_mix(src, tgt, pseudo, q, rng, 255);
            REQUIRE(m.selected_classes.size() == 2);
            for (int c : m.selected_classes) ++hits[c];
            const std::set<int> sel(m.selected_classes.begin(), m.selected_classes.end());
            int bad = 0;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const bool from_src = sel.count(l.at(y, x)) > 0;
                    bad += m.mask.at(y, x) != (from_src ? 1 : 0);
                    if (from_src) {
                        bad += m.label.at(y, x) != l.at(y, x);
                        bad += m.weight.at(y, x) != 1.0;
                        for (int c = 0; c < 3; ++c) bad += m.image.at(c, y, x) != src.image.at(c, y, x);
                    } else {
                        bad += m.label.at(y, x) != pseudo.at(y, x);
                        bad += m.weight.at(y, x) != q;
                        for (int c = 0; c < 3; ++c) bad += m.image.at(c, y, x) != tgt.at(c, y, x);
                    }
                }
            CHECK(bad == 0);
        }
        // Each class is picked in half the mixes.
        for (int h : hits) CHECK(std::abs(h - 500) < 80);
    }
    SUBCASE("unlabeled source") {
        src.label = LabelTensor({H, W}, 255);
        CHECK_THROWS(dacs_mix(src, tgt, pseudo, 0.5, rng, 255));
    }
}

TEST_CASE("patch masking") {
    Rng rng(7);
    const Tensor img = random_tensor({3, 64, 64}, rng, 0.1, 1);
    SUBCASE("ratio 0 keeps everything") {
        const auto m = mask_image(img, 16, 0.0, rng);
        CHECK(m.image == img);
        CHECK(m.keep == LabelTensor({4, 4}, 1));
    }
    SUBCASE("ratio 1 drops everything") {
        const auto m = mask_image(img, 16, 1.0, rng);
        CHECK(m.image == Tensor({3, 64, 64}, 0.0));
        CHECK(m.keep == LabelTensor({4, 4}, 0));
    }
    SUBCASE("dropped fraction concentrates at the ratio") {
        long dropped = 0, total = 0;
        for (int i = 0; i < 625; ++i) {
            const auto m = mask_image(img, 16, 0.7, rng);
            for (int k : m.keep.values()) dropped += k == 0;
            total += 16;
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < 64; ++y)
                    for (int x = 0; x < 64; ++x) {
                        const bool kept = m.keep.at(y / 16, x / 16) == 1;
                        if (m.image.at(c, y, x) != (kept ? img.at(c, y, x) : 0.0)) FAIL("pixel disagrees with mask");
                    }
        }
        CHECK(total == 10000);
        CHECK(std::abs(double(dropped) / total - 0.7) <= 0.02);
    }
    SUBCASE("invalid arguments") {
        CHECK_THROWS_AS(mask_image(img, 16, 1.5, rng), std::invalid_argument);
        CHECK_THROWS_AS(mask_image(img, 16, -0.1, rng), std::invalid_argument);
        CHECK_THROWS_AS(mask_image(img, 24, 0.5, rng), ShapeError);
    }
}

TEST_CASE("colour augmentation of mixed images") {
    Rng rng(9);
    const Tensor img = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    CHECK(color_augment(img, 0.0, rng) == img);
    Rng a(5), b(5);
    const Tensor x = color_augment(img, 0.3, a);
    CHECK(x == color_augment(img, 0.3, b));
    CHECK(x.shape() == img.shape());
    CHECK_FALSE(x == img);
    for (double v : x.values()) CHECK((v >= 0.0 && v <= 1.0));
    for (int trial = 0; trial < 20; ++trial) {
        // A grey constant image stays constant; only brightness moves it.
        const Tensor g = color_augment(Tensor({3, 8, 8}, 0.5), 0.2, rng);
        for (double v : g.values()) {
            CHECK(v == doctest::Approx(g[0]).epsilon(1e-12));
            CHECK((v >= 0.4 - 1e-12 && v <= 0.6 + 1e-12));
        }
    }
    CHECK_THROWS_AS(color_augment(img, 1.5, rng), std::invalid_argument);
    CHECK_THROWS_AS(color_augment(Tensor({1, 8, 8}), 0.2, rng), ShapeError);
}

TEST_CASE("optimizer") {
    ParameterSet ps;
    Var w = ps.add("w", Tensor({2}, 1.0), {ParamKind::decoder});
    backward(ops::dot_const(w, Tensor({2}, 0.5)));
    OptimizerState st;
    adamw_step(ps, st, {0.1}, 0.01);
    // m_hat = g, v_hat = g^2 after one step.
    const double expect = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(w.value()[0] == doctest::Approx(expect).epsilon(1e-14));
    CHECK(st.steps == 1);

    ps.zero_grad();
    backward(ops::dot_const(w, Tensor({2}, 3.0)));
    const double norm = clip_grad_norm(ps, 1.0);
    CHECK(norm == doctest::Approx(std::sqrt(18.0)));
    const double g0 = w.grad()[0];
    CHECK(std::sqrt(2 * g0 * g0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("training step") {
    Fixture fx;
    SUBCASE("teacher receives no gradients and all components are reported") {
        TrainingState st = make_training_state(fx.model, 1, 0.99);
        const auto r = fx.run(st, 1, 9)[0];
        for (const auto& p : st.teacher.model->parameters().params()) CHECK_FALSE(p.var.has_grad());
        CHECK(r.ce_source);
        CHECK(r.ce_mixed);
        CHECK(r.ce_masked);
        CHECK(r.fd_source);
        CHECK(r.fd_target);
        CHECK(r.q_mean);
        CHECK(r.total == doctest::Approx(*r.ce_source + *r.ce_mixed + *r.ce_masked + 0.5 * (*r.fd_source + *r.fd_target)));
        CHECK(st.step == 1);
    }
    SUBCASE("toggles remove their components") {
        fx.train.toggles.dacs = false;
        fx.train.toggles.mic = false;
        fx.train.toggles.fd_loss = false;
        TrainingState st = make_training_state(fx.model, 1, 0.99);
        const auto r = fx.run(st, 1, 9)[0];
        CHECK_FALSE(r.ce_mixed);
        CHECK_FALSE(r.ce_masked);
        CHECK_FALSE(r.fd_source);
        CHECK_FALSE(r.fd_target);
        CHECK(r.total == *r.ce_source);
        CHECK(r.to_json()["ce_mixed"].is_null());
    }
    SUBCASE("source-only reports source CE only") {
        fx.train.mode = TrainMode::source_only;
        TrainingState st = make_training_state(fx.model, 1, 0.99);
        const auto r = fx.run(st, 1, 9)[0];
        CHECK_FALSE(r.q_mean);
        CHECK_FALSE(r.ce_mixed);
        CHECK(r.total == *r.ce_source);
    }
    SUBCASE("feature distance adds exactly lambda times its terms") {
        TrainingState on = make_training_state(fx.model, 1, 0.99);
        const auto r_on = fx.run(on, 1, 9)[0];
        fx.train.toggles.fd_loss = false;
        TrainingState off = make_training_state(fx.model, 1, 0.99);
        const auto r_off = fx.run(off, 1, 9)[0];
        CHECK(*r_on.ce_mixed == *r_off.ce_mixed);
        CHECK(r_on.total - r_off.total == doctest::Approx(0.5 * (*r_on.fd_source + *r_on.fd_target)).epsilon(1e-9));
    }
    SUBCASE("without EMA the teacher tracks the student") {
        fx.train.toggles.ema = false;
        TrainingState st = make_training_state(fx.model, 1, 0.99);
        fx.run(st, 2, 9);
        CHECK(same_state(*st.teacher.model, *st.student));
    }
    SUBCASE("non-finite loss names the component") {
        TrainingState st = make_training_state(fx.model, 1, 0.99);
        for (auto& p : st.student->parameters().params())
            if (p.name == "decoder.classifier.0.bias") p.var.mutable_value()[0] = std::nan("");
        try {
            fx.run(st, 1, 9);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(e.component() == "ce_source");
            CHECK(e.step() == 0);
            CHECK(std::string(e.what()).find("ce_source") != std::string::npos);
        }
    }
}

TEST_CASE("training is deterministic over 100 steps") {
    Fixture fx;
    TrainingState a = make_training_state(fx.model, 4, 0.99);
    TrainingState b = make_training_state(fx.model, 4, 0.99);
    const auto ra = fx.run(a, 100, 21);
    const auto rb = fx.run(b, 100, 21);
    CHECK(ra == rb);
    CHECK(same_state(*a.student, *b.student));
    CHECK(same_state(*a.teacher.model, *b.teacher.model));
}

TEST_CASE("checkpoint resume is bit-exact") {
    Fixture fx;
    const auto dir = temp_dir("engine_ckpt");
    TrainingState full = make_training_state(fx.model, 4, 0.99);
    const auto r_full = fx.run(full, 6, 21);

    TrainingState first = make_training_state(fx.model, 4, 0.99);
    fx.run(first, 3, 21);
    save_training_checkpoint(dir / "s.ckpt", first, {{"note", "x"}});

    TrainingState resumed;
    const auto meta = load_training_checkpoint(dir / "s.ckpt", resumed);
    CHECK(meta["step"] == 3);
    CHECK(meta["note"] == "x");
    resumed.step = meta["step"].get<int>();
    const auto r_rest = fx.run(resumed, 3, 21);
    for (int i = 0; i < 3; ++i) CHECK(r_rest[i] == r_full[3 + i]);
    CHECK(same_state(*resumed.student, *full.student));
    CHECK(same_state(*resumed.teacher.model, *full.teacher.model));
}

TEST_CASE("rare-class batches contain the drawn class") {
    ToyConfig tc;
    tc.image_size = 96;
    tc.num_source = 20;
    const auto toy = generate_toy_domains(tc, 2);
    const auto freqs = compute_class_frequencies(toy.source);
    BatchSampler s(toy.source, 64, 8, build_rare_class_index(freqs, toy.source, 0.01));
    Rng rng(1);
    const Batch b = s.sample(rng);
    CHECK(b.images.shape() == Shape{8, 3, 64, 64});
    REQUIRE(b.labels);
    // Rare classes dominate: most crops contain one of the three rarest classes.
    int with_rare = 0;
    for (int i = 0; i < 8; ++i) {
        bool found = false;
        for (int y = 0; y < 64 && !found; ++y)
            for (int x = 0; x < 64 && !found; ++x) found = b.labels->at(i, y, x) >= 3 && b.labels->at(i, y, x) < 6;
        with_rare += found;
    }
    CHECK(with_rare >= 6);
}
