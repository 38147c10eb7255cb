#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "matir/model.hpp"

using namespace matir;

TEST_CASE("config validation") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    CHECK_NOTHROW(cfg.validate());
    SUBCASE("depth below two") {
        cfg.depth = 1;
        cfg.pattern.clear();
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("scale/task coupling") {
        cfg.scale = 1;  // task is super-resolution
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        cfg.task = TaskHead::Denoise;
        cfg.scale = 2;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("pattern must match depth and alphabet") {
        cfg.pattern = "TMT";
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        cfg.pattern = "TMTX";
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("neighbor limit follows the window") {
        cfg.neighbors = 6;  // window 4 allows at most 5
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    }
    SUBCASE("default pattern alternates starting with T") {
        MatIrConfig d;
        d.depth = 6;
        CHECK(d.effective_pattern() == "TMTMTM");
    }
}

TEST_CASE("config text round trip and unknown keys") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.seed = 77;
    cfg.remove_cga = true;
    const MatIrConfig back = MatIrConfig::from_text(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.hash() == cfg.hash());
    CHECK_THROWS_AS(MatIrConfig::from_text("channels = 16\nwobble = 3\n"), ConfigError);
    CHECK_THROWS_AS(MatIrConfig::from_text("channels = sixteen\n"), ConfigError);
}

TEST_CASE("hand-counted parameter census of the tiny config") {
    // C=16, depth 4 (TMTM), window 4, k=3, N=8, geom d=16, expansion 2, x2 SR
    const int64_t c = 16, e = 32, n = 8, d = 16;
    const int64_t stem = 3 * c * 9 + c;  // 448
    const int64_t twla = 3 * c * c                    // QKV
                         + (2 * d + d) + (d * d + d)  // edge MLP 2->d->d
                         + (d + 1)                    // scalar projection u
                         + (5 * d + d) + (d * d + d)  // triangle MLP 5->d->d
                         + (d + 1);                   // scalar projection v
    const int64_t ffn = (c * 2 * c + 2 * c) + (2 * c * c + c);
    const int64_t norms = 4 * 2 * c;
    const int64_t transformer = norms + twla + 3 * c * c + 2 * ffn;
    const int64_t per_dir = (e * e + e) + 2 * (n * e + n) + e;
    const int64_t irss = 2 * c                      // norm
                         + 2 * (c * e + e)          // in + gate projections
                         + (9 * e + e)              // depthwise
                         + n                        // shared state diagonal
                         + 4 * per_dir + (e * c + c);
    const int64_t head = (c * (c * 4) * 9 + c * 4) + (c * 3 * 9 + 3);
    const int64_t expected = stem + 2 * transformer + 2 * irss + head;
    CHECK(expected == 36103);  // frozen hand total

    const MatIrModel model = build(MatIrConfig::preset("tiny"));
    CHECK(count_params(model) == expected);

    // the single 3x3 conv example: stem alone is 3*16*9 + 16
    int64_t stem_params = 0;
    for (const auto& [name, t] : named_params(model)) {
        if (name.rfind("stem.", 0) == 0) stem_params += t.numel();
    }
    CHECK(stem_params == 448);
}

TEST_CASE("census grows superlinearly in channels") {
    MatIrConfig small = MatIrConfig::preset("tiny");
    MatIrConfig big = small;
    big.channels = 32;
    const int64_t p_small = count_params(build(small));
    const int64_t p_big = count_params(build(big));
    CHECK(p_big > 2 * p_small);  // projection-dominated counts roughly quadruple
}

TEST_CASE("deterministic builds") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.seed = 42;
    const auto a = named_params(build(cfg));
    const auto b = named_params(build(cfg));
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second.data() == b[i].second.data());
    }
}

TEST_CASE("forward shape contract") {
    Rng rng(1);
    SUBCASE("x2 super-resolution doubles the spatial size") {
        const MatIrModel model = build(MatIrConfig::preset("tiny"));
        Tensor x = Tensor::randn({3, 32, 32}, rng, 0.3);
        CHECK(model_forward(model, x).shape() == Shape{3, 64, 64});
    }
    SUBCASE("all scales and sizes") {
        for (int64_t s : {2, 3, 4}) {
            MatIrConfig cfg = MatIrConfig::preset("tiny");
            cfg.scale = s;
            const MatIrModel model = build(cfg);
            for (int64_t hw : {8, 16}) {
                Tensor x = Tensor::randn({3, hw, hw}, rng, 0.3);
                CHECK(model_forward(model, x).shape() == Shape{3, s * hw, s * hw});
            }
        }
        MatIrConfig dn = MatIrConfig::preset("tiny");
        dn.task = TaskHead::Denoise;
        dn.scale = 1;
        const MatIrModel model = build(dn);
        Tensor x = Tensor::randn({3, 12, 20}, rng, 0.3);
        CHECK(model_forward(model, x).shape() == Shape{3, 12, 20});
    }
    SUBCASE("window-multiple requirement") {
        const MatIrModel model = build(MatIrConfig::preset("tiny"));
        Tensor x = Tensor::randn({3, 30, 30}, rng, 0.3);
        try {
            model_forward(model, x);
            FAIL("expected ContractError");
        } catch (const ContractError& e) {
            CHECK(std::string(e.what()).find("pad") != std::string::npos);
        }
    }
}

TEST_CASE("denoise head with zeroed weights is the identity") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.task = TaskHead::Denoise;
    cfg.scale = 1;
    MatIrModel model = build(cfg);
    for (auto& [name, t] : named_params(model)) {
        t.mutable_data().assign(t.data().size(), 0.0);
    }
    Rng rng(2);
    Tensor x = Tensor::randn({3, 8, 8}, rng, 0.25);
    CHECK(model_forward(model, x).data() == x.data());
}

TEST_CASE("forward determinism") {
    const MatIrModel model = build(MatIrConfig::preset("tiny"));
    Rng rng(3);
    Tensor x = Tensor::randn({3, 16, 16}, rng, 0.3);
    CHECK(model_forward(model, x).data() == model_forward(model, x).data());
}

TEST_CASE("flops estimates") {
    const MatIrModel model = build(MatIrConfig::preset("tiny"));
    SUBCASE("stem at 8x8 is the conv arithmetic") {
        const FlopsReport rep = estimate_flops(model, 8, 8);
        CHECK(rep.stem == 3 * 16 * 9 * 64);  // 27648
    }
    SUBCASE("irss term is exactly linear in H*W") {
        const FlopsReport a = estimate_flops(model, 8, 8);
        const FlopsReport b = estimate_flops(model, 16, 16);
        CHECK(b.irss == 4 * a.irss);
    }
    SUBCASE("stripping all deep blocks leaves stem plus head") {
        MatIrConfig cfg = MatIrConfig::preset("tiny");
        cfg.remove_twla = true;
        cfg.remove_cga = true;
        cfg.remove_irss = true;
        const MatIrModel bare = build(cfg);
        const FlopsReport rep = estimate_flops(bare, 8, 8);
        CHECK(rep.transformer == 0);
        CHECK(rep.irss == 0);
        CHECK(rep.total() == rep.stem + rep.head);
    }
}

TEST_CASE("ablation flags strictly reduce the census") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    const int64_t full = count_params(build(cfg));
    for (int which = 0; which < 3; ++which) {
        MatIrConfig ab = cfg;
        if (which == 0) ab.remove_twla = true;
        if (which == 1) ab.remove_cga = true;
        if (which == 2) ab.remove_irss = true;
        CHECK(count_params(build(ab)) < full);
    }
}

TEST_CASE("checkpoints") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.seed = 5;
    MatIrModel model = build(cfg);
    const std::string path = "/tmp/matir_test_model.matr";
    save_checkpoint(model, path);

    SUBCASE("round trip reproduces the forward pass within float32") {
        MatIrConfig other = cfg;
        other.seed = 999;
        const MatIrModel loaded = load_checkpoint(path, other);
        Rng rng(4);
        std::vector<double> v(static_cast<size_t>(3 * 16 * 16));
        for (double& y : v) y = rng.uniform(0.0, 1.0);
        Tensor x = Tensor::from({3, 16, 16}, v);
        const Tensor y1 = model_forward(model, x);
        const Tensor y2 = model_forward(loaded, x);
        double worst = 0.0;
        for (size_t i = 0; i < y1.data().size(); ++i) {
            worst = std::max(worst, std::fabs(y1.data()[i] - y2.data()[i]));
        }
        CHECK(worst < 1e-5);
    }
    SUBCASE("truncated checkpoint is rejected without a partial model") {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::string cut = "/tmp/matir_test_model_cut.matr";
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 3));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(cut, cfg), FormatError);
    }
    SUBCASE("census mismatch names the counts") {
        MatIrConfig bigger = cfg;
        bigger.channels = 32;
        try {
            load_checkpoint(path, bigger);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("expected") != std::string::npos);
            CHECK(msg.find("found") != std::string::npos);
        }
    }
}
