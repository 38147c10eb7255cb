// matir: train/restore/evaluate/verify/ablate/info for the hybrid
// state-space + attention restoration model in core/.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "matir/model.hpp"
#include "matir/pipeline.hpp"
#include "matir/threads.hpp"
#include "matir/verify.hpp"
#include "matir/version.hpp"

namespace {

using namespace matir;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // verification or metric failure
constexpr int kExitUsage = 2;    // usage, config or format errors

MatIrConfig resolve_config(const std::string& spec) {
    if (spec.empty()) return MatIrConfig::preset("tiny");
    if (std::filesystem::exists(spec)) return MatIrConfig::from_file(spec);
    return MatIrConfig::preset(spec);
}

std::string report_header(const MatIrConfig& cfg, uint64_t seed) {
    std::ostringstream os;
    os << "# matir " << kVersion << "\n";
    os << "# config_hash=" << std::hex << cfg.hash() << std::dec << " seed=" << seed << "\n";
    return os.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << text;
    if (!os) throw IoError("write failed for '" + path + "'");
}

struct TrainFlags {
    std::string config_spec;
    std::string dataset;
    std::string task = "denoise";
    std::string out;
    std::string save_model;
    uint64_t seed = 0;
    int64_t steps = 1000;
    int64_t patch = 0;  // 0: task default (64 SR / 128 denoise)
    int64_t batch = 4;
    double lr = 2e-4;
    double sigma = 15.0;
    int64_t scale = 2;
    bool no_augment = false;
    int64_t val_interval = 250;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--config", f.config_spec, "config file path or preset name (tiny, paper)");
    cmd->add_option("--dataset", f.dataset, "directory of clean training images")->required();
    cmd->add_option("--task", f.task, "sr or denoise")->check(CLI::IsMember({"sr", "denoise"}));
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--steps", f.steps, "optimizer steps");
    cmd->add_option("--patch", f.patch, "training patch size (0 = task default)");
    cmd->add_option("--batch", f.batch, "batch size");
    cmd->add_option("--lr", f.lr, "initial learning rate");
    cmd->add_option("--sigma", f.sigma, "noise level for denoising");
    cmd->add_option("--scale", f.scale, "super-resolution factor")->check(CLI::IsMember({1, 2, 3, 4}));
    cmd->add_option("--out", f.out, "training report output path");
    cmd->add_option("--save-model", f.save_model, "checkpoint output path");
    cmd->add_flag("--no-augment", f.no_augment, "disable flip/rotation augmentation");
    cmd->add_option("--val-interval", f.val_interval, "validation cadence in steps");
}

std::pair<MatIrConfig, TrainSpec> make_train_setup(const TrainFlags& f) {
    MatIrConfig cfg = resolve_config(f.config_spec);
    cfg.task = task_from_name(f.task);
    cfg.scale = cfg.task == TaskHead::Denoise ? 1 : f.scale;
    cfg.seed = f.seed;
    cfg.validate();
    TrainSpec ts;
    ts.patch = f.patch > 0 ? f.patch : (cfg.task == TaskHead::Denoise ? 128 : 64);
    ts.batch = f.batch;
    ts.max_steps = f.steps;
    ts.lr = f.lr;
    ts.seed = f.seed;
    ts.augment = !f.no_augment;
    ts.sigma = f.sigma;
    ts.scale = cfg.scale;
    ts.val_interval = f.val_interval;
    return {cfg, ts};
}

int cmd_verify(const std::string& filter) {
    const auto results = verify::run_properties(filter);
    if (results.empty()) {
        std::cerr << "no properties match filter '" << filter << "'\n";
        return kExitUsage;
    }
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%s %-28s measured=%.3e tol=%.3e%s%s\n", r.pass ? "PASS" : "FAIL",
                    r.name.c_str(), r.measured, r.tolerance, r.note.empty() ? "" : "  # ",
                    r.note.c_str());
        all_pass = all_pass && r.pass;
    }
    std::printf("%zu properties, %s\n", results.size(), all_pass ? "all PASS" : "FAILURES present");
    return all_pass ? kExitOk : kExitFailure;
}

int cmd_train(const TrainFlags& f) {
    auto [cfg, ts] = make_train_setup(f);
    MatIrModel model = build(cfg);
    TrainReport report = train(model, f.dataset, cfg.task, ts);
    const std::string text = report.to_text();
    if (f.out.empty()) std::cout << text;
    else write_text(f.out, text);
    if (!f.save_model.empty()) save_checkpoint(model, f.save_model);
    std::fprintf(stderr, "final validation psnr: %.4f dB\n", report.final_val_psnr);
    return kExitOk;
}

int cmd_restore(const std::string& config_spec, const std::string& model_path,
                const std::string& input, const std::string& output,
                const std::string& reference, const std::string& task, int64_t scale) {
    MatIrConfig cfg = resolve_config(config_spec);
    if (!task.empty() && task_from_name(task) != cfg.task) {
        throw ConfigError("--task does not match the config's task head");
    }
    if (scale != 0 && scale != cfg.scale) {
        throw ConfigError("--scale does not match the config");
    }
    MatIrModel model = model_path.empty() ? build(cfg) : load_checkpoint(model_path, cfg);
    const ImagePlane in = read_image(input);
    const ImagePlane out = restore_image(model, in);
    write_image(output, out);
    if (!reference.empty()) {
        const ImagePlane ref = read_image(reference);
        std::printf("psnr_vs_reference_db=%.4f\n", psnr(out, ref, true));
    }
    return kExitOk;
}

int cmd_evaluate(const std::string& config_spec, const std::string& model_path,
                 const std::string& dataset, const std::string& task, int64_t scale,
                 double sigma, uint64_t seed, const std::string& out_csv) {
    MatIrConfig cfg = resolve_config(config_spec);
    if (!task.empty()) {
        if (task_from_name(task) != cfg.task) throw ConfigError("--task does not match the config");
    }
    MatIrModel model = model_path.empty() ? build(cfg) : load_checkpoint(model_path, cfg);
    DegradationSpec spec = cfg.task == TaskHead::Denoise
                               ? DegradationSpec::gaussian_noise(sigma, seed)
                               : DegradationSpec::bicubic_down(scale != 0 ? scale : cfg.scale);
    spec.seed = seed;
    const EvalResult result = evaluate(model, dataset, spec);
    if (result.rows.empty()) {
        std::cerr << "no evaluable images in '" << dataset << "'\n";
        return kExitFailure;
    }
    std::cout << result.to_text(report_header(cfg, seed));
    if (!out_csv.empty()) write_text(out_csv, result.to_csv());
    return kExitOk;
}

int cmd_ablate(const std::string& drop, int64_t dirs, const TrainFlags& f) {
    auto [cfg, ts] = make_train_setup(f);
    MatIrConfig reduced = cfg;
    std::string label;
    if (!drop.empty()) {
        if (drop == "twla") reduced.remove_twla = true;
        else if (drop == "cga") reduced.remove_cga = true;
        else if (drop == "irss") reduced.remove_irss = true;
        else throw ConfigError("--drop must be twla, cga or irss");
        label = "drop_" + drop;
    } else {
        reduced.directions = static_cast<int>(dirs);
        label = "dirs_" + std::to_string(dirs);
    }

    MatIrModel full_model = build(cfg);
    MatIrModel reduced_model = build(reduced);
    const int64_t full_params = count_params(full_model);
    const int64_t reduced_params = count_params(reduced_model);

    TrainReport full_report = train(full_model, f.dataset, cfg.task, ts);
    TrainReport reduced_report = train(reduced_model, f.dataset, reduced.task, ts);

    std::cout << report_header(cfg, ts.seed);
    std::printf("# paired ablation, identical seed/budget (steps=%lld)\n",
                static_cast<long long>(ts.max_steps));
    std::printf("%-24s %16s %16s\n", "metric", "full", label.c_str());
    std::printf("%-24s %16lld %16lld\n", "params", static_cast<long long>(full_params),
                static_cast<long long>(reduced_params));
    std::printf("%-24s %16.4f %16.4f\n", "initial_val_psnr", full_report.initial_val_psnr,
                reduced_report.initial_val_psnr);
    std::printf("%-24s %16.4f %16.4f\n", "final_val_psnr", full_report.final_val_psnr,
                reduced_report.final_val_psnr);
    std::printf("%-24s %16s %16.4f\n", "delta_vs_full", "-",
                reduced_report.final_val_psnr - full_report.final_val_psnr);
    return kExitOk;
}

int cmd_info(const std::string& config_spec, int64_t resolution) {
    MatIrConfig cfg = resolve_config(config_spec);
    const MatIrModel model = build(cfg);
    const FlopsReport flops = estimate_flops(model, resolution, resolution);
    std::cout << report_header(cfg, cfg.seed);
    std::printf("pattern=%s\n", cfg.effective_pattern().c_str());
    std::printf("params=%lld\n", static_cast<long long>(count_params(model)));
    std::printf("macs_at_%lldx%lld total=%lld stem=%lld transformer=%lld irss=%lld head=%lld\n",
                static_cast<long long>(resolution), static_cast<long long>(resolution),
                static_cast<long long>(flops.total()), static_cast<long long>(flops.stem),
                static_cast<long long>(flops.transformer), static_cast<long long>(flops.irss),
                static_cast<long long>(flops.head));
    std::cout << "config:\n" << cfg.to_text();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"matir: hybrid state-space / attention image restoration"};
    app.require_subcommand(1);
    app.set_version_flag("--version", matir::kVersion);

    if (const char* env = std::getenv("MATIR_THREADS")) {
        matir::set_max_threads(std::atoi(env));
    }

    // verify
    std::string filter;
    CLI::App* verify_cmd = app.add_subcommand("verify", "run the math property suites");
    verify_cmd->add_option("--filter", filter, "run only properties whose name contains this");

    // train
    TrainFlags train_flags;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model on a directory of images");
    add_train_flags(train_cmd, train_flags);

    // restore
    std::string r_config, r_model, r_input, r_output, r_reference, r_task;
    int64_t r_scale = 0;
    CLI::App* restore_cmd = app.add_subcommand("restore", "restore one image");
    restore_cmd->add_option("--config", r_config, "config file or preset");
    restore_cmd->add_option("--model", r_model, "checkpoint path (omit for a fresh model)");
    restore_cmd->add_option("--input", r_input, "input image")->required();
    restore_cmd->add_option("--output", r_output, "output image")->required();
    restore_cmd->add_option("--reference", r_reference, "clean reference for PSNR");
    restore_cmd->add_option("--task", r_task, "sr or denoise (validated against config)");
    restore_cmd->add_option("--scale", r_scale, "scale (validated against config)");

    // evaluate
    std::string e_config, e_model, e_dataset, e_task, e_out;
    int64_t e_scale = 0;
    double e_sigma = 25.0;
    uint64_t e_seed = 0;
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "degrade/restore/score a directory");
    eval_cmd->add_option("--config", e_config, "config file or preset");
    eval_cmd->add_option("--model", e_model, "checkpoint path (omit for a fresh model)");
    eval_cmd->add_option("--dataset", e_dataset, "directory of clean images")->required();
    eval_cmd->add_option("--task", e_task, "sr or denoise");
    eval_cmd->add_option("--scale", e_scale, "super-resolution factor");
    eval_cmd->add_option("--sigma", e_sigma, "noise level");
    eval_cmd->add_option("--seed", e_seed, "degradation seed");
    eval_cmd->add_option("--out", e_out, "CSV output path");

    // ablate
    std::string a_drop;
    int64_t a_dirs = 4;
    TrainFlags ablate_flags;
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "paired full-vs-reduced training runs");
    ablate_cmd->add_option("--drop", a_drop, "component to remove: twla, cga or irss");
    ablate_cmd->add_option("--dirs", a_dirs, "scan direction count for the reduced run")
        ->check(CLI::IsMember({1, 2, 4}));
    add_train_flags(ablate_cmd, ablate_flags);

    // info
    std::string i_config;
    int64_t i_resolution = 256;
    CLI::App* info_cmd = app.add_subcommand("info", "parameter census and MAC estimate");
    info_cmd->add_option("--config", i_config, "config file or preset");
    info_cmd->add_option("--resolution", i_resolution, "input resolution for the MAC estimate");

    try {
        app.parse(argc, argv);
        if (verify_cmd->parsed()) return cmd_verify(filter);
        if (train_cmd->parsed()) return cmd_train(train_flags);
        if (restore_cmd->parsed())
            return cmd_restore(r_config, r_model, r_input, r_output, r_reference, r_task, r_scale);
        if (eval_cmd->parsed())
            return cmd_evaluate(e_config, e_model, e_dataset, e_task, e_scale, e_sigma, e_seed, e_out);
        if (ablate_cmd->parsed()) return cmd_ablate(a_drop, a_dirs, ablate_flags);
        if (info_cmd->parsed()) return cmd_info(i_config, i_resolution);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    } catch (const matir::TrainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const matir::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitUsage;
    }
}
