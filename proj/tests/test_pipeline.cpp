#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "matir/pipeline.hpp"
#include "matir/threads.hpp"
#include "oracles.hpp"

using namespace matir;
namespace fs = std::filesystem;

namespace {

ImagePlane noise_image(int64_t w, int64_t h, int64_t c, uint64_t seed) {
    Rng rng(seed);
    ImagePlane img = ImagePlane::create(w, h, c);
    for (auto& v : img.pixels) v = static_cast<uint8_t>(rng.below(256));
    return img;
}

// piecewise structure: gradients, rectangles, edges
ImagePlane structured_image(int64_t w, int64_t h, uint64_t seed) {
    Rng rng(seed);
    ImagePlane img = ImagePlane::create(w, h, 3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            img.at(y, x, 0) = static_cast<uint8_t>((x * 255) / std::max<int64_t>(w - 1, 1));
            img.at(y, x, 1) = static_cast<uint8_t>((y * 255) / std::max<int64_t>(h - 1, 1));
            img.at(y, x, 2) = static_cast<uint8_t>(((x / 4 + y / 4) % 2) * 200 + 25);
        }
    for (int rect = 0; rect < 4; ++rect) {
        const int64_t rw = 3 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(w / 2)));
        const int64_t rh = 3 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(h / 2)));
        const int64_t x0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(w - rw)));
        const int64_t y0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(h - rh)));
        const uint8_t val = static_cast<uint8_t>(rng.below(256));
        for (int64_t y = y0; y < y0 + rh; ++y)
            for (int64_t x = x0; x < x0 + rw; ++x) img.at(y, x, rng.below(3)) = val;
    }
    return img;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("image io round trips") {
    const ImagePlane rgb = noise_image(13, 9, 3, 1);
    const ImagePlane gray = noise_image(6, 11, 1, 2);
    SUBCASE("png") {
        write_image("/tmp/matir_t.png", rgb);
        CHECK(read_image("/tmp/matir_t.png").pixels == rgb.pixels);
        write_image("/tmp/matir_tg.png", gray);
        const ImagePlane back = read_image("/tmp/matir_tg.png");
        CHECK(back.channels == 1);
        CHECK(back.pixels == gray.pixels);
    }
    SUBCASE("ppm and pgm") {
        write_image("/tmp/matir_t.ppm", rgb);
        CHECK(read_image("/tmp/matir_t.ppm").pixels == rgb.pixels);
        write_image("/tmp/matir_t.pgm", gray);
        CHECK(read_image("/tmp/matir_t.pgm").pixels == gray.pixels);
    }
    SUBCASE("corrupt png is rejected") {
        std::ofstream os("/tmp/matir_bad.png", std::ios::binary);
        os << "not a png at all";
        os.close();
        CHECK_THROWS_AS(read_image("/tmp/matir_bad.png"), FormatError);
    }
    SUBCASE("tensor conversion round trip") {
        const Tensor t = image_to_tensor(rgb);
        CHECK(t.shape() == Shape{3, 9, 13});
        CHECK(tensor_to_image(t).pixels == rgb.pixels);
    }
}

TEST_CASE("degrade") {
    SUBCASE("zero sigma is the identity") {
        const ImagePlane img = noise_image(16, 16, 3, 3);
        CHECK(degrade(img, DegradationSpec::gaussian_noise(0.0, 9)).pixels == img.pixels);
    }
    SUBCASE("bicubic downscale preserves constants") {
        const ImagePlane img = ImagePlane::create(24, 24, 3, 131);
        for (auto v : degrade(img, DegradationSpec::bicubic_down(3)).pixels) CHECK(v == 131);
    }
    SUBCASE("indivisible dimensions are rejected") {
        const ImagePlane img = ImagePlane::create(25, 24, 3, 10);
        CHECK_THROWS_AS(degrade(img, DegradationSpec::bicubic_down(2)), ContractError);
    }
    SUBCASE("noise sample std within 10 percent at mid-gray") {
        const ImagePlane img = ImagePlane::create(128, 128, 1, 128);
        const ImagePlane noisy = degrade(img, DegradationSpec::gaussian_noise(25.0, 4));
        double mean = 0.0;
        for (size_t i = 0; i < noisy.pixels.size(); ++i) {
            mean += static_cast<double>(noisy.pixels[i]) - 128.0;
        }
        mean /= static_cast<double>(noisy.pixels.size());
        double var = 0.0;
        for (size_t i = 0; i < noisy.pixels.size(); ++i) {
            const double d = static_cast<double>(noisy.pixels[i]) - 128.0 - mean;
            var += d * d;
        }
        var /= static_cast<double>(noisy.pixels.size() - 1);
        CHECK(std::sqrt(var) == doctest::Approx(25.0).epsilon(0.10));
    }
    SUBCASE("deterministic under the seed") {
        const ImagePlane img = noise_image(20, 20, 3, 5);
        const auto a = degrade(img, DegradationSpec::gaussian_noise(15.0, 77));
        const auto b = degrade(img, DegradationSpec::gaussian_noise(15.0, 77));
        CHECK(a.pixels == b.pixels);
    }
}

TEST_CASE("psnr") {
    SUBCASE("identical images hit the cap") {
        const ImagePlane img = noise_image(12, 12, 3, 6);
        CHECK(psnr(img, img, true) == 100.0);
    }
    SUBCASE("uniform off-by-one") {
        ImagePlane a = ImagePlane::create(16, 16, 3, 100);
        ImagePlane b = ImagePlane::create(16, 16, 3, 101);
        CHECK(psnr(a, b, true) == doctest::Approx(48.1308).epsilon(0.0002));
        CHECK(psnr(a, b, false) == doctest::Approx(48.1308).epsilon(0.0002));
    }
    SUBCASE("black versus white is zero") {
        CHECK(psnr(ImagePlane::create(8, 8, 3, 0), ImagePlane::create(8, 8, 3, 255), false) ==
              doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(psnr(ImagePlane::create(8, 8, 3, 0), ImagePlane::create(8, 9, 3, 0), true),
                        DimensionError);
    }
    SUBCASE("monotone in the noise level") {
        const ImagePlane img = structured_image(48, 48, 7);
        double last = 1e9;
        for (double sigma : {5.0, 15.0, 25.0, 50.0}) {
            const double v = psnr(degrade(img, DegradationSpec::gaussian_noise(sigma, 11)), img, true);
            CHECK(v < last);
            last = v;
        }
    }
}

TEST_CASE("ssim") {
    SUBCASE("identity and symmetry") {
        const ImagePlane a = structured_image(32, 32, 8);
        const ImagePlane b = degrade(a, DegradationSpec::gaussian_noise(20.0, 12));
        CHECK(ssim(a, a) == 1.0);
        CHECK(ssim(a, b) == ssim(b, a));  // bitwise
    }
    SUBCASE("constant shift against the direct-formula reference") {
        ImagePlane a = structured_image(24, 24, 9);
        ImagePlane b = a;
        for (auto& v : b.pixels) v = static_cast<uint8_t>(std::min(255, v + 10));
        std::vector<double> ya(a.pixels.size() / 3), yb(a.pixels.size() / 3);
        for (size_t p = 0; p < ya.size(); ++p) {
            ya[p] = 0.299 * a.pixels[p * 3] + 0.587 * a.pixels[p * 3 + 1] + 0.114 * a.pixels[p * 3 + 2];
            yb[p] = 0.299 * b.pixels[p * 3] + 0.587 * b.pixels[p * 3 + 1] + 0.114 * b.pixels[p * 3 + 2];
        }
        const double ref = oracles::ssim_reference(ya, yb, 24, 24);
        CHECK(ssim(a, b) == doctest::Approx(ref).epsilon(1e-9));
        CHECK(ssim(a, b) < 1.0);
    }
    SUBCASE("independent noise scores near zero") {
        const ImagePlane a = noise_image(64, 64, 1, 10);
        const ImagePlane b = noise_image(64, 64, 1, 11);
        CHECK(std::fabs(ssim(a, b)) < 0.1);
    }
    SUBCASE("too-small images are rejected") {
        CHECK_THROWS_AS(ssim(ImagePlane::create(8, 8, 1, 0), ImagePlane::create(8, 8, 1, 0)),
                        ContractError);
    }
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    Rng rng(13);
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    MatIrModel model = build(cfg);
    auto params = named_params(model);
    std::vector<std::vector<double>> before;
    for (const auto& [n, t] : params) before.push_back(t.data());
    Adam opt(0.9, 0.999);
    opt.step(params, 2e-4);  // no gradients anywhere
    for (size_t i = 0; i < params.size(); ++i) CHECK(params[i].second.data() == before[i]);
}

TEST_CASE("training") {
    TempDir dir("matir_train_test");
    write_image((dir.path / "img0.png").string(), structured_image(40, 40, 21));
    write_image((dir.path / "img1.png").string(), structured_image(40, 40, 22));

    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.task = TaskHead::Denoise;
    cfg.scale = 1;
    cfg.seed = 3;

    TrainSpec ts;
    ts.patch = 16;
    ts.batch = 2;
    ts.max_steps = 6;
    ts.seed = 3;
    ts.sigma = 15.0;
    ts.val_interval = 3;

    SUBCASE("zero steps returns the initial validation only") {
        MatIrModel model = build(cfg);
        TrainSpec z = ts;
        z.max_steps = 0;
        const TrainReport rep = train(model, dir.path.string(), TaskHead::Denoise, z);
        CHECK(rep.rows.empty());
        CHECK(rep.final_val_psnr == rep.initial_val_psnr);
        CHECK(rep.to_text().find("# initial_val_psnr=") != std::string::npos);
    }
    SUBCASE("same seed, byte-identical reports") {
        MatIrModel m1 = build(cfg);
        MatIrModel m2 = build(cfg);
        const std::string r1 = train(m1, dir.path.string(), TaskHead::Denoise, ts).to_text();
        const std::string r2 = train(m2, dir.path.string(), TaskHead::Denoise, ts).to_text();
        CHECK(r1 == r2);
    }
    SUBCASE("thread count does not change the result") {
        MatIrModel m1 = build(cfg);
        MatIrModel m2 = build(cfg);
        set_max_threads(1);
        const std::string r1 = train(m1, dir.path.string(), TaskHead::Denoise, ts).to_text();
        set_max_threads(2);
        const std::string r2 = train(m2, dir.path.string(), TaskHead::Denoise, ts).to_text();
        set_max_threads(0);
        CHECK(r1 == r2);
    }
    SUBCASE("empty dataset fails") {
        TempDir empty("matir_train_empty");
        MatIrModel model = build(cfg);
        CHECK_THROWS_AS(train(model, empty.path.string(), TaskHead::Denoise, ts), TrainError);
    }
    SUBCASE("non-finite loss aborts with the step index") {
        const bool prev = set_debug_checks(false);
        MatIrModel model = build(cfg);
        model.stem_w.mutable_data()[0] = std::nan("");
        try {
            train(model, dir.path.string(), TaskHead::Denoise, ts);
            FAIL("expected TrainError");
        } catch (const TrainError& e) {
            CHECK(std::string(e.what()).find("step 1") != std::string::npos);
        }
        set_debug_checks(prev);
    }
    SUBCASE("learning rate halves at the milestones") {
        MatIrModel model = build(cfg);
        TrainSpec sched = ts;
        sched.max_steps = 8;
        sched.milestones = {0.5};
        const TrainReport rep = train(model, dir.path.string(), TaskHead::Denoise, sched);
        REQUIRE(rep.rows.size() == 8);
        CHECK(rep.rows[3].lr == doctest::Approx(2e-4));
        CHECK(rep.rows[7].lr == doctest::Approx(1e-4));
    }
}

TEST_CASE("evaluate") {
    TempDir dir("matir_eval_test");
    write_image((dir.path / "a.png").string(), structured_image(24, 24, 31));
    write_image((dir.path / "b.png").string(), structured_image(24, 24, 32));
    {
        std::ofstream bad(dir.path / "broken.png", std::ios::binary);
        bad << "garbage";
    }

    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.task = TaskHead::Denoise;
    cfg.scale = 1;
    MatIrModel model = build(cfg);
    for (auto& [n, t] : named_params(model)) t.mutable_data().assign(t.data().size(), 0.0);

    SUBCASE("identity model on zero noise hits the cap, bad file is skipped") {
        const EvalResult res = evaluate(model, dir.path.string(), DegradationSpec::gaussian_noise(0.0, 1));
        REQUIRE(res.rows.size() == 2);
        CHECK(res.skipped == 1);
        for (const auto& row : res.rows) CHECK(row.metrics.psnr_db == 100.0);
        // csv: header plus one line per image
        const std::string csv = res.to_csv();
        CHECK(csv.rfind("image,psnr_db,ssim\n", 0) == 0);
        int64_t lines = 0;
        for (char ch : csv)
            if (ch == '\n') ++lines;
        CHECK(lines == 3);
    }
    SUBCASE("super-resolution includes the bicubic baseline") {
        MatIrConfig sr = MatIrConfig::preset("tiny");
        const MatIrModel sm = build(sr);
        const EvalResult res = evaluate(sm, dir.path.string(), DegradationSpec::bicubic_down(2));
        REQUIRE(res.rows.size() == 2);
        for (const auto& row : res.rows) CHECK(row.baseline_psnr.has_value());
        CHECK(res.mean_baseline_psnr.has_value());
    }
}

TEST_CASE("restore pads and crops to the original size") {
    MatIrConfig cfg = MatIrConfig::preset("tiny");
    cfg.task = TaskHead::Denoise;
    cfg.scale = 1;
    MatIrModel model = build(cfg);
    const ImagePlane img = structured_image(22, 17, 41);  // not a window multiple
    const ImagePlane out = restore_image(model, img);
    CHECK(out.width == 22);
    CHECK(out.height == 17);
}
