// Drives the installed binary end to end through std::system.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "matir/image.hpp"
#include "matir/model.hpp"
#include "matir/pipeline.hpp"

using namespace matir;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
};

RunResult run(const std::string& args) {
    const std::string out_path = "/tmp/matir_cli_out.txt";
    const std::string cmd = std::string(MATIR_CLI_PATH) + " " + args + " > " + out_path + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(out_path);
    std::stringstream ss;
    ss << is.rdbuf();
    r.out = ss.str();
    return r;
}

std::string read_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ImagePlane test_image(int64_t w, int64_t h, uint64_t seed) {
    Rng rng(seed);
    ImagePlane img = ImagePlane::create(w, h, 3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            img.at(y, x, 0) = static_cast<uint8_t>((x * 255) / std::max<int64_t>(w - 1, 1));
            img.at(y, x, 1) = static_cast<uint8_t>(rng.below(256));
            img.at(y, x, 2) = static_cast<uint8_t>(((x / 3 + y / 3) % 2) * 220);
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

TEST_CASE("usage errors exit with code 2") {
    CHECK(run("definitely-not-a-command").exit_code == 2);
    CHECK(run("train --dataset /tmp --task sr --wobble 3").exit_code == 2);
    CHECK(run("info --config /tmp/matir_no_such_config.cfg").exit_code == 2);
}

TEST_CASE("verify subcommand") {
    SUBCASE("filtered run passes and prints one line per property") {
        const RunResult r = run("verify --filter ssm");
        CHECK(r.exit_code == 0);
        int64_t pass_lines = 0;
        std::istringstream is(r.out);
        std::string line;
        while (std::getline(is, line)) {
            if (line.rfind("PASS", 0) == 0) ++pass_lines;
            CHECK(line.rfind("FAIL", 0) != 0);
        }
        CHECK(pass_lines >= 8);
    }
    SUBCASE("unknown filter is a usage error") {
        CHECK(run("verify --filter nonexistent_suite").exit_code == 2);
    }
}

TEST_CASE("info reports the census and scan-term scaling") {
    const RunResult r = run("info --config tiny --resolution 64");
    CHECK(r.exit_code == 0);
    const MatIrModel model = build(MatIrConfig::preset("tiny"));
    {
        std::ostringstream expect;
        expect << "params=" << count_params(model);
        CHECK(r.out.find(expect.str()) != std::string::npos);
    }
    auto irss_term = [](const std::string& text) {
        const size_t pos = text.find("irss=");
        REQUIRE(pos != std::string::npos);
        return std::stoll(text.substr(pos + 5));
    };
    const RunResult r2 = run("info --config tiny --resolution 128");
    CHECK(irss_term(r2.out) == 4 * irss_term(r.out));
}

TEST_CASE("restore") {
    TempDir dir("matir_cli_restore");
    const std::string cfg_path = (dir.path / "cfg.txt").string();
    {
        MatIrConfig cfg = MatIrConfig::preset("tiny");
        cfg.task = TaskHead::Denoise;
        cfg.scale = 1;
        std::ofstream os(cfg_path);
        os << cfg.to_text();
    }
    // identity checkpoint: all-zero weights with the residual head
    const std::string ckpt = (dir.path / "identity.matr").string();
    {
        MatIrConfig cfg = MatIrConfig::from_file(cfg_path);
        MatIrModel model = build(cfg);
        for (auto& [n, t] : named_params(model)) t.mutable_data().assign(t.data().size(), 0.0);
        save_checkpoint(model, ckpt);
    }
    const std::string in_path = (dir.path / "in.png").string();
    write_image(in_path, test_image(20, 12, 7));

    SUBCASE("identity checkpoint reproduces the input and runs are byte-identical") {
        const std::string out1 = (dir.path / "out1.png").string();
        const std::string out2 = (dir.path / "out2.png").string();
        const RunResult r1 = run("restore --config " + cfg_path + " --model " + ckpt +
                                 " --input " + in_path + " --output " + out1 +
                                 " --reference " + in_path);
        CHECK(r1.exit_code == 0);
        CHECK(r1.out.find("psnr_vs_reference_db=100.0000") != std::string::npos);
        CHECK(read_image(out1).pixels == read_image(in_path).pixels);
        const RunResult r2 = run("restore --config " + cfg_path + " --model " + ckpt +
                                 " --input " + in_path + " --output " + out2);
        CHECK(r2.exit_code == 0);
        CHECK(read_bytes(out1) == read_bytes(out2));
    }
    SUBCASE("x2 super-resolution doubles the dimensions") {
        const std::string in48 = (dir.path / "in48.png").string();
        write_image(in48, test_image(48, 48, 8));
        const std::string out = (dir.path / "sr.png").string();
        const RunResult r = run("restore --config tiny --input " + in48 + " --output " + out);
        CHECK(r.exit_code == 0);
        const ImagePlane img = read_image(out);
        CHECK(img.width == 96);
        CHECK(img.height == 96);
    }
    SUBCASE("mismatched checkpoint census exits 2") {
        const RunResult r = run("restore --config tiny --model " + ckpt + " --input " + in_path +
                                " --output " + (dir.path / "x.png").string());
        CHECK(r.exit_code == 2);
        CHECK(r.out.find("census") != std::string::npos);
    }
    SUBCASE("task flag must agree with the config") {
        const RunResult r = run("restore --config " + cfg_path + " --task sr --input " + in_path +
                                " --output " + (dir.path / "x.png").string());
        CHECK(r.exit_code == 2);
    }
}

TEST_CASE("train, evaluate and ablate smoke paths") {
    TempDir dir("matir_cli_train");
    for (int i = 0; i < 3; ++i) {
        write_image((dir.path / ("img" + std::to_string(i) + ".png")).string(),
                    test_image(40, 40, 100 + static_cast<uint64_t>(i)));
    }
    const std::string report = (dir.path / "report.txt").string();
    const std::string ckpt = (dir.path / "trained.matr").string();

    SUBCASE("train writes a deterministic report and loadable checkpoint") {
        const std::string cmd = "train --config tiny --task denoise --dataset " + dir.path.string() +
                                " --steps 4 --patch 16 --batch 2 --sigma 15 --seed 5 --out " +
                                report + " --save-model " + ckpt;
        const RunResult r1 = run(cmd);
        CHECK(r1.exit_code == 0);
        const std::string rep1 = read_bytes(report);
        CHECK(rep1.find("# matir train report") != std::string::npos);
        CHECK(rep1.find("config_hash=") != std::string::npos);
        CHECK(rep1.find("seed=5") != std::string::npos);
        const RunResult r2 = run(cmd);
        CHECK(r2.exit_code == 0);
        CHECK(read_bytes(report) == rep1);

        MatIrConfig cfg = MatIrConfig::preset("tiny");
        cfg.task = TaskHead::Denoise;
        cfg.scale = 1;
        cfg.seed = 5;
        CHECK_NOTHROW(load_checkpoint(ckpt, cfg));
    }
    SUBCASE("evaluate writes the csv schema") {
        const std::string csv = (dir.path / "eval.csv").string();
        const RunResult r = run("evaluate --config tiny --task sr --dataset " + dir.path.string() +
                                " --scale 2 --out " + csv);
        CHECK(r.exit_code == 0);
        const std::string text = read_bytes(csv);
        CHECK(text.rfind("image,psnr_db,ssim\n", 0) == 0);
        int64_t lines = 0;
        for (char ch : text)
            if (ch == '\n') ++lines;
        CHECK(lines == 4);  // header + three images
        CHECK(r.out.find("baseline") != std::string::npos);
    }
    SUBCASE("ablate prints the paired comparison") {
        const RunResult r = run("ablate --drop irss --config tiny --task denoise --dataset " +
                                dir.path.string() + " --steps 2 --patch 16 --batch 1 --seed 5");
        CHECK(r.exit_code == 0);
        CHECK(r.out.find("params") != std::string::npos);
        CHECK(r.out.find("drop_irss") != std::string::npos);
        CHECK(r.out.find("final_val_psnr") != std::string::npos);
        CHECK(r.out.find("delta_vs_full") != std::string::npos);
    }
    SUBCASE("dirs control run matches the default training path") {
        const std::string cmd_base = "train --config tiny --task denoise --dataset " +
                                     dir.path.string() +
                                     " --steps 2 --patch 16 --batch 1 --seed 9 --out ";
        const std::string rep_a = (dir.path / "a.txt").string();
        CHECK(run(cmd_base + rep_a).exit_code == 0);
        const RunResult ab = run("ablate --dirs 4 --config tiny --task denoise --dataset " +
                                 dir.path.string() + " --steps 2 --patch 16 --batch 1 --seed 9");
        CHECK(ab.exit_code == 0);
        // the reduced column equals the full run under --dirs 4 (control)
        CHECK(ab.out.find("dirs_4") != std::string::npos);
        const size_t pos = ab.out.find("delta_vs_full");
        REQUIRE(pos != std::string::npos);
        CHECK(ab.out.find("0.0000", pos) != std::string::npos);
    }
}
