#include "matir/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include "matir/threads.hpp"
#include "matir/version.hpp"

namespace matir {

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

namespace {

double cubic_kernel(double t) {
    constexpr double a = -0.5;
    t = std::fabs(t);
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
}

struct ResampleTaps {
    int64_t support = 0;
    std::vector<int64_t> idx;   // [out * support]
    std::vector<double> coef;   // normalized per output position
};

// Anti-aliasing: when downscaling, the kernel is stretched by the scale
// factor so its footprint covers the source pixels being merged.
ResampleTaps make_taps(int64_t in_len, int64_t out_len) {
    const double scale = static_cast<double>(in_len) / static_cast<double>(out_len);
    const double stretch = std::max(scale, 1.0);
    ResampleTaps taps;
    taps.support = static_cast<int64_t>(std::ceil(2.0 * stretch)) * 2;
    taps.idx.assign(static_cast<size_t>(out_len * taps.support), 0);
    taps.coef.assign(static_cast<size_t>(out_len * taps.support), 0.0);
    for (int64_t o = 0; o < out_len; ++o) {
        const double center = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const int64_t first = static_cast<int64_t>(std::floor(center - 2.0 * stretch)) + 1;
        double wsum = 0.0;
        for (int64_t t = 0; t < taps.support; ++t) {
            const double x = (center - static_cast<double>(first + t)) / stretch;
            const double wv = cubic_kernel(x);
            taps.coef[static_cast<size_t>(o * taps.support + t)] = wv;
            taps.idx[static_cast<size_t>(o * taps.support + t)] =
                std::clamp<int64_t>(first + t, 0, in_len - 1);
            wsum += wv;
        }
        for (int64_t t = 0; t < taps.support; ++t) {
            taps.coef[static_cast<size_t>(o * taps.support + t)] /= wsum;
        }
    }
    return taps;
}

}  // namespace

ImagePlane resize_bicubic(const ImagePlane& img, int64_t out_w, int64_t out_h) {
    if (!img.valid()) throw ContractError("resize_bicubic: invalid image");
    if (out_w < 1 || out_h < 1) throw ContractError("resize_bicubic: empty output");
    const ResampleTaps tx = make_taps(img.width, out_w);
    const ResampleTaps ty = make_taps(img.height, out_h);

    // horizontal pass into doubles, then vertical, then quantize
    std::vector<double> tmp(static_cast<size_t>(img.height * out_w * img.channels), 0.0);
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t ox = 0; ox < out_w; ++ox)
            for (int64_t c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int64_t t = 0; t < tx.support; ++t) {
                    acc += tx.coef[static_cast<size_t>(ox * tx.support + t)] *
                           static_cast<double>(img.at(y, tx.idx[static_cast<size_t>(ox * tx.support + t)], c));
                }
                tmp[static_cast<size_t>((y * out_w + ox) * img.channels + c)] = acc;
            }
    ImagePlane out = ImagePlane::create(out_w, out_h, img.channels);
    for (int64_t oy = 0; oy < out_h; ++oy)
        for (int64_t ox = 0; ox < out_w; ++ox)
            for (int64_t c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int64_t t = 0; t < ty.support; ++t) {
                    acc += ty.coef[static_cast<size_t>(oy * ty.support + t)] *
                           tmp[static_cast<size_t>(
                               (ty.idx[static_cast<size_t>(oy * ty.support + t)] * out_w + ox) * img.channels + c)];
                }
                out.at(oy, ox, c) = static_cast<uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
            }
    return out;
}

ImagePlane degrade(const ImagePlane& img, const DegradationSpec& spec) {
    if (!img.valid()) throw ContractError("degrade: invalid image");
    if (spec.kind == DegradationSpec::Kind::BicubicDown) {
        if (spec.scale < 1) throw ContractError("degrade: scale must be positive");
        if (img.width % spec.scale != 0 || img.height % spec.scale != 0) {
            throw ContractError("degrade: image " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + " is not divisible by scale " +
                                std::to_string(spec.scale));
        }
        return resize_bicubic(img, img.width / spec.scale, img.height / spec.scale);
    }
    ImagePlane out = img;
    if (spec.sigma == 0.0) return out;
    Rng rng(spec.seed);
    for (size_t i = 0; i < out.pixels.size(); ++i) {
        const double v = static_cast<double>(out.pixels[i]) + rng.normal(0.0, spec.sigma);
        out.pixels[i] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

std::vector<double> luma_plane(const ImagePlane& img) {
    std::vector<double> y(static_cast<size_t>(img.width * img.height));
    if (img.channels == 1) {
        for (size_t i = 0; i < y.size(); ++i) y[i] = static_cast<double>(img.pixels[i]);
        return y;
    }
    for (int64_t p = 0; p < img.width * img.height; ++p) {
        const double r = img.pixels[static_cast<size_t>(p * 3 + 0)];
        const double g = img.pixels[static_cast<size_t>(p * 3 + 1)];
        const double b = img.pixels[static_cast<size_t>(p * 3 + 2)];
        y[static_cast<size_t>(p)] = 0.299 * r + 0.587 * g + 0.114 * b;
    }
    return y;
}

void require_same_dims(const char* op, const ImagePlane& a, const ImagePlane& b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
        throw DimensionError(std::string(op) + ": image dimensions differ");
    }
}

}  // namespace

double psnr(const ImagePlane& a, const ImagePlane& b, bool y_channel_only) {
    require_same_dims("psnr", a, b);
    double mse = 0.0;
    int64_t n = 0;
    if (y_channel_only && a.channels == 3) {
        const std::vector<double> ya = luma_plane(a), yb = luma_plane(b);
        for (size_t i = 0; i < ya.size(); ++i) {
            const double d = ya[i] - yb[i];
            mse += d * d;
        }
        n = static_cast<int64_t>(ya.size());
    } else {
        for (size_t i = 0; i < a.pixels.size(); ++i) {
            const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
            mse += d * d;
        }
        n = static_cast<int64_t>(a.pixels.size());
    }
    mse /= static_cast<double>(n);
    if (mse == 0.0) return 100.0;  // identical-image cap
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim(const ImagePlane& a, const ImagePlane& b) {
    require_same_dims("ssim", a, b);
    constexpr int64_t kWin = 11;
    if (a.width < kWin || a.height < kWin) {
        throw ContractError("ssim requires images of at least 11x11");
    }
    const std::vector<double> xa = luma_plane(a), xb = luma_plane(b);

    double g[kWin];
    double gsum = 0.0;
    for (int64_t i = 0; i < kWin; ++i) {
        const double d = static_cast<double>(i - kWin / 2);
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        gsum += g[i];
    }
    for (double& v : g) v /= gsum;

    constexpr double kC1 = (0.01 * 255.0) * (0.01 * 255.0);
    constexpr double kC2 = (0.03 * 255.0) * (0.03 * 255.0);

    const int64_t w = a.width, h = a.height;
    double total = 0.0;
    int64_t count = 0;
    for (int64_t y = 0; y + kWin <= h; ++y) {
        for (int64_t x = 0; x + kWin <= w; ++x) {
            double mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
            for (int64_t dy = 0; dy < kWin; ++dy)
                for (int64_t dx = 0; dx < kWin; ++dx) {
                    const double wgt = g[dy] * g[dx];
                    const double va = xa[static_cast<size_t>((y + dy) * w + (x + dx))];
                    const double vb = xb[static_cast<size_t>((y + dy) * w + (x + dx))];
                    mx += wgt * va;
                    my += wgt * vb;
                    mxx += wgt * (va * va);
                    myy += wgt * (vb * vb);
                    mxy += wgt * (va * vb);  // grouping keeps ssim(a,b) == ssim(b,a) bitwise
                }
            const double sx = mxx - mx * mx;
            const double sy = myy - my * my;
            const double sxy = mxy - mx * my;
            const double num = (2.0 * (mx * my) + kC1) * (2.0 * sxy + kC2);
            const double den = (mx * mx + my * my + kC1) * (sx + sy + kC2);
            total += num / den;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].second.data().size(), 0.0);
            v_[i].assign(params[i].second.data().size(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw ContractError("Adam: parameter census changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        const std::vector<double> zero;
        const std::vector<double>& g = p.has_grad() ? p.grad() : zero;
        std::vector<double>& val = p.mutable_data();
        for (size_t j = 0; j < val.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
            const double mh = m_[i][j] / bc1;
            const double vh = v_[i][j] / bc2;
            val[j] -= lr * mh / (std::sqrt(vh) + eps_);
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Padding / restore helpers
// ---------------------------------------------------------------------------

namespace {

ImagePlane pad_replicate(const ImagePlane& img, int64_t mult) {
    const int64_t ph = (img.height + mult - 1) / mult * mult;
    const int64_t pw = (img.width + mult - 1) / mult * mult;
    if (ph == img.height && pw == img.width) return img;
    ImagePlane out = ImagePlane::create(pw, ph, img.channels);
    for (int64_t y = 0; y < ph; ++y)
        for (int64_t x = 0; x < pw; ++x)
            for (int64_t c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(std::min(y, img.height - 1), std::min(x, img.width - 1), c);
    return out;
}

}  // namespace

ImagePlane restore_image(const MatIrModel& model, const ImagePlane& input) {
    const int64_t s = model.config.scale;
    const ImagePlane padded = pad_replicate(input, model.config.window);
    Tensor out = model_forward(model, image_to_tensor3(padded));
    ImagePlane full = tensor_to_image(out);
    ImagePlane cropped = ImagePlane::create(input.width * s, input.height * s, 3);
    for (int64_t y = 0; y < cropped.height; ++y)
        for (int64_t x = 0; x < cropped.width; ++x)
            for (int64_t c = 0; c < 3; ++c) cropped.at(y, x, c) = full.at(y, x, c);
    if (input.channels == 1) {
        ImagePlane gray = ImagePlane::create(cropped.width, cropped.height, 1);
        for (int64_t y = 0; y < cropped.height; ++y)
            for (int64_t x = 0; x < cropped.width; ++x) {
                const int v = cropped.at(y, x, 0) + cropped.at(y, x, 1) + cropped.at(y, x, 2);
                gray.at(y, x, 0) = static_cast<uint8_t>((v + 1) / 3);
            }
        return gray;
    }
    return cropped;
}

std::vector<std::string> list_image_files(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".ppm" || ext == ".pgm") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct PatchDraw {
    size_t image_index = 0;
    int64_t y0 = 0, x0 = 0;
    int aug = 0;  // bits 0-1 rotation quarter turns, bit 2 horizontal flip
    uint64_t degrade_seed = 0;
};

ImagePlane crop(const ImagePlane& img, int64_t y0, int64_t x0, int64_t size) {
    ImagePlane out = ImagePlane::create(size, size, img.channels);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
            for (int64_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

ImagePlane augment_patch(const ImagePlane& img, int aug) {
    ImagePlane cur = img;
    if (aug & 4) {  // horizontal flip
        ImagePlane f = cur;
        for (int64_t y = 0; y < cur.height; ++y)
            for (int64_t x = 0; x < cur.width; ++x)
                for (int64_t c = 0; c < cur.channels; ++c) f.at(y, x, c) = cur.at(y, cur.width - 1 - x, c);
        cur = std::move(f);
    }
    for (int r = 0; r < (aug & 3); ++r) {  // 90-degree rotation
        ImagePlane rot = ImagePlane::create(cur.height, cur.width, cur.channels);
        for (int64_t y = 0; y < cur.height; ++y)
            for (int64_t x = 0; x < cur.width; ++x)
                for (int64_t c = 0; c < cur.channels; ++c)
                    rot.at(x, cur.height - 1 - y, c) = cur.at(y, x, c);
        cur = std::move(rot);
    }
    return cur;
}

struct SamplePair {
    Tensor input;   // degraded, [3 x h x w]
    Tensor target;  // clean, [3 x H x W]
};

SamplePair make_pair(const ImagePlane& clean, TaskHead task, const TrainSpec& tspec,
                     uint64_t degrade_seed) {
    SamplePair p;
    p.target = image_to_tensor3(clean);
    if (task == TaskHead::Denoise) {
        p.input = image_to_tensor3(degrade(clean, DegradationSpec::gaussian_noise(tspec.sigma, degrade_seed)));
    } else {
        p.input = image_to_tensor3(degrade(clean, DegradationSpec::bicubic_down(tspec.scale)));
    }
    return p;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

std::string TrainReport::to_text() const {
    std::ostringstream os;
    for (const std::string& line : header) os << line << "\n";
    for (const Row& r : rows) {
        os << r.step << "," << format_double(r.loss) << "," << format_double(r.lr);
        if (r.val_psnr) os << "," << format_double(*r.val_psnr);
        os << "\n";
    }
    return os.str();
}

TrainReport train(MatIrModel& model, const std::string& dataset_dir, TaskHead task,
                  const TrainSpec& tspec) {
    if (task != model.config.task) {
        throw ContractError("training task does not match the model's task head");
    }
    if (tspec.patch < 1 || tspec.batch < 1) throw ContractError("patch and batch must be positive");
    const int64_t win = model.config.window;
    const int64_t s = model.config.scale;
    const int64_t input_patch = task == TaskHead::Denoise ? tspec.patch : tspec.patch / s;
    if (task == TaskHead::SuperResolution && tspec.patch % s != 0) {
        throw ContractError("patch size must be divisible by the scale factor");
    }
    if (input_patch % win != 0) {
        throw ContractError("patch size must put a window-size multiple into the model (patch " +
                            std::to_string(tspec.patch) + ", window " + std::to_string(win) + ")");
    }

    // Load dataset.
    const std::vector<std::string> files = list_image_files(dataset_dir);
    std::vector<ImagePlane> images;
    for (const std::string& f : files) {
        try {
            ImagePlane img = read_image(f);
            if (img.height >= tspec.patch && img.width >= tspec.patch) images.push_back(std::move(img));
        } catch (const Error& e) {
            std::cerr << "warning: skipping unreadable image " << f << ": " << e.what() << "\n";
        }
    }
    if (images.empty()) {
        throw TrainError("dataset '" + dataset_dir + "' has no usable images of at least " +
                         std::to_string(tspec.patch) + "x" + std::to_string(tspec.patch));
    }

    // Fixed validation patches: deterministic corners of the first images.
    Rng val_rng(tspec.seed ^ 0x5eedf00dULL);
    const int64_t n_val = std::min<int64_t>(4, static_cast<int64_t>(images.size()));
    std::vector<SamplePair> val_set;
    for (int64_t v = 0; v < n_val; ++v) {
        const ImagePlane& img = images[static_cast<size_t>(v % static_cast<int64_t>(images.size()))];
        const int64_t y0 = static_cast<int64_t>(val_rng.below(static_cast<uint64_t>(img.height - tspec.patch + 1)));
        const int64_t x0 = static_cast<int64_t>(val_rng.below(static_cast<uint64_t>(img.width - tspec.patch + 1)));
        val_set.push_back(make_pair(crop(img, y0, x0, tspec.patch), task, tspec, val_rng.next_u64()));
    }
    auto run_validation = [&]() {
        double acc = 0.0;
        for (const SamplePair& p : val_set) {
            Tensor out = model_forward(model, p.input);
            acc += psnr(tensor_to_image(out), tensor_to_image(p.target), true);
        }
        return acc / static_cast<double>(val_set.size());
    };

    auto params = named_params(model);
    Adam opt(tspec.beta1, tspec.beta2);

    std::vector<int64_t> milestones;
    for (double frac : tspec.milestones) {
        milestones.push_back(static_cast<int64_t>(frac * static_cast<double>(tspec.max_steps)));
    }

    TrainReport report;
    report.header.push_back("# matir train report");
    report.header.push_back("# version=" + std::string(kVersion));
    {
        std::ostringstream h;
        h << "# config_hash=" << std::hex << model.config.hash() << std::dec
          << " seed=" << tspec.seed << " task=" << task_name(task);
        report.header.push_back(h.str());
    }
    {
        std::ostringstream h;
        h << "# patch=" << tspec.patch << " batch=" << tspec.batch << " steps=" << tspec.max_steps
          << " lr=" << format_double(tspec.lr) << " beta1=" << format_double(tspec.beta1)
          << " beta2=" << format_double(tspec.beta2) << " augment=" << (tspec.augment ? 1 : 0);
        if (task == TaskHead::Denoise) h << " sigma=" << format_double(tspec.sigma);
        else h << " scale=" << s;
        report.header.push_back(h.str());
    }
    report.initial_val_psnr = run_validation();
    report.header.push_back("# initial_val_psnr=" + format_double(report.initial_val_psnr));
    report.final_val_psnr = report.initial_val_psnr;
    report.header.push_back("# columns=step,loss,lr[,val_psnr]");

    Rng rng(tspec.seed);
    const int64_t batch = tspec.batch;
    for (int64_t step = 1; step <= tspec.max_steps; ++step) {
        // Serial draws keep the stream identical for any thread count.
        std::vector<PatchDraw> draws(static_cast<size_t>(batch));
        for (PatchDraw& d : draws) {
            d.image_index = static_cast<size_t>(rng.below(images.size()));
            const ImagePlane& img = images[d.image_index];
            d.y0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(img.height - tspec.patch + 1)));
            d.x0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(img.width - tspec.patch + 1)));
            d.aug = tspec.augment ? static_cast<int>(rng.below(8)) : 0;
            d.degrade_seed = rng.next_u64();
        }

        std::vector<double> losses(static_cast<size_t>(batch), 0.0);
        std::vector<std::unique_ptr<Tape>> tapes(static_cast<size_t>(batch));
        auto run_sample = [&](int64_t i) {
            const PatchDraw& d = draws[static_cast<size_t>(i)];
            ImagePlane patch = crop(images[d.image_index], d.y0, d.x0, tspec.patch);
            if (d.aug) patch = augment_patch(patch, d.aug);
            const SamplePair pair = make_pair(patch, task, tspec, d.degrade_seed);
            auto tape = std::make_unique<Tape>();
            Tensor out = model_forward(model, pair.input);
            Tensor loss = ops::mul_scalar(ops::mean(ops::abs(ops::sub(out, pair.target))),
                                          1.0 / static_cast<double>(batch));
            losses[static_cast<size_t>(i)] = loss.item();
            tape->run_backward(loss);
            tapes[static_cast<size_t>(i)] = std::move(tape);
        };

        const int64_t workers = std::min<int64_t>(batch, max_threads());
        if (workers <= 1) {
            for (int64_t i = 0; i < batch; ++i) run_sample(i);
        } else {
            std::vector<std::thread> pool;
            std::atomic<int64_t> next{0};
            for (int64_t t = 0; t < workers; ++t) {
                pool.emplace_back([&]() {
                    for (int64_t i = next.fetch_add(1); i < batch; i = next.fetch_add(1)) run_sample(i);
                });
            }
            for (std::thread& t : pool) t.join();
        }
        // Deterministic merge: sample-index order.
        for (int64_t i = 0; i < batch; ++i) tapes[static_cast<size_t>(i)]->accumulate_leaf_grads();
        tapes.clear();

        double loss_total = 0.0;
        for (double l : losses) loss_total += l;
        if (!std::isfinite(loss_total)) {
            throw TrainError("non-finite loss at step " + std::to_string(step));
        }

        double lr = tspec.lr;
        for (int64_t m : milestones)
            if (step > m && m > 0) lr *= 0.5;
        opt.step(params, lr);

        TrainReport::Row row;
        row.step = step;
        row.loss = loss_total;
        row.lr = lr;
        if ((tspec.val_interval > 0 && step % tspec.val_interval == 0) || step == tspec.max_steps) {
            row.val_psnr = run_validation();
            report.final_val_psnr = *row.val_psnr;
        }
        report.rows.push_back(row);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::string EvalResult::to_csv() const {
    std::ostringstream os;
    os << "image,psnr_db,ssim\n";
    for (const Row& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%.4f,%.6f", r.metrics.psnr_db, r.metrics.ssim);
        os << r.image << "," << buf << "\n";
    }
    return os.str();
}

std::string EvalResult::to_text(const std::string& header) const {
    std::ostringstream os;
    os << header;
    os << "image                            psnr_db    ssim";
    if (!rows.empty() && rows.front().baseline_psnr) os << "    baseline_psnr   delta";
    os << "\n";
    for (const Row& r : rows) {
        char buf[256];
        if (r.baseline_psnr) {
            std::snprintf(buf, sizeof(buf), "%-32s %8.4f  %7.5f   %10.4f  %+7.4f", r.image.c_str(),
                          r.metrics.psnr_db, r.metrics.ssim, *r.baseline_psnr,
                          r.metrics.psnr_db - *r.baseline_psnr);
        } else {
            std::snprintf(buf, sizeof(buf), "%-32s %8.4f  %7.5f", r.image.c_str(), r.metrics.psnr_db,
                          r.metrics.ssim);
        }
        os << buf << "\n";
    }
    char buf[256];
    if (mean_baseline_psnr) {
        std::snprintf(buf, sizeof(buf), "%-32s %8.4f  %7.5f   %10.4f  %+7.4f", "mean",
                      mean.psnr_db, mean.ssim, *mean_baseline_psnr, mean.psnr_db - *mean_baseline_psnr);
    } else {
        std::snprintf(buf, sizeof(buf), "%-32s %8.4f  %7.5f", "mean", mean.psnr_db, mean.ssim);
    }
    os << buf << "\n";
    if (skipped > 0) os << "# skipped_unreadable=" << skipped << "\n";
    return os.str();
}

EvalResult evaluate(const MatIrModel& model, const std::string& dataset_dir,
                    const DegradationSpec& spec) {
    EvalResult result;
    const std::vector<std::string> files = list_image_files(dataset_dir);
    double acc_psnr = 0.0, acc_ssim = 0.0, acc_base = 0.0;
    bool has_base = false;
    uint64_t index = 0;
    for (const std::string& path : files) {
        ImagePlane clean;
        try {
            clean = read_image(path);
        } catch (const Error& e) {
            std::cerr << "warning: skipping unreadable image " << path << ": " << e.what() << "\n";
            ++result.skipped;
            continue;
        }
        EvalResult::Row row;
        row.image = std::filesystem::path(path).filename().string();
        if (spec.kind == DegradationSpec::Kind::BicubicDown) {
            // crop to a multiple of the scale before downsampling
            const int64_t cw = clean.width / spec.scale * spec.scale;
            const int64_t ch = clean.height / spec.scale * spec.scale;
            if (cw < spec.scale || ch < spec.scale) {
                std::cerr << "warning: skipping too-small image " << path << "\n";
                ++result.skipped;
                continue;
            }
            ImagePlane cropped = ImagePlane::create(cw, ch, clean.channels);
            for (int64_t y = 0; y < ch; ++y)
                for (int64_t x = 0; x < cw; ++x)
                    for (int64_t c = 0; c < clean.channels; ++c) cropped.at(y, x, c) = clean.at(y, x, c);
            clean = std::move(cropped);
            const ImagePlane low = degrade(clean, spec);
            ImagePlane restored = restore_image(model, low);
            const ImagePlane baseline = resize_bicubic(low, clean.width, clean.height);
            row.metrics.psnr_db = psnr(restored, clean, true);
            row.metrics.ssim = ssim(restored, clean);
            row.baseline_psnr = psnr(baseline, clean, true);
            has_base = true;
        } else {
            DegradationSpec per_image = spec;
            per_image.seed = spec.seed + 0x9e3779b97f4a7c15ull * (index + 1);
            const ImagePlane noisy = degrade(clean, per_image);
            ImagePlane restored = restore_image(model, noisy);
            if (clean.channels == 1 && restored.channels == 3) {
                // restore_image collapses back to gray for gray inputs
            }
            row.metrics.psnr_db = psnr(restored, clean, true);
            row.metrics.ssim = ssim(restored, clean);
            row.baseline_psnr = psnr(noisy, clean, true);
            has_base = true;
        }
        acc_psnr += row.metrics.psnr_db;
        acc_ssim += row.metrics.ssim;
        if (row.baseline_psnr) acc_base += *row.baseline_psnr;
        result.rows.push_back(std::move(row));
        ++index;
    }
    if (!result.rows.empty()) {
        const double n = static_cast<double>(result.rows.size());
        result.mean.psnr_db = acc_psnr / n;
        result.mean.ssim = acc_ssim / n;
        if (has_base) result.mean_baseline_psnr = acc_base / n;
    }
    return result;
}

}  // namespace matir
