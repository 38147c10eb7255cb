#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "matir/image.hpp"
#include "matir/model.hpp"
#include "matir/tensor.hpp"

namespace matir {

// ---------------------------------------------------------------------------
// Degradation
// ---------------------------------------------------------------------------

struct DegradationSpec {
    enum class Kind { BicubicDown, GaussianNoise };
    Kind kind = Kind::GaussianNoise;
    int64_t scale = 2;    // BicubicDown
    double sigma = 25.0;  // GaussianNoise, in 8-bit units
    uint64_t seed = 0;

    static DegradationSpec bicubic_down(int64_t s) {
        DegradationSpec d;
        d.kind = Kind::BicubicDown;
        d.scale = s;
        return d;
    }
    static DegradationSpec gaussian_noise(double sigma, uint64_t seed = 0) {
        DegradationSpec d;
        d.kind = Kind::GaussianNoise;
        d.sigma = sigma;
        d.seed = seed;
        return d;
    }
};

/// BicubicDown: anti-aliased Catmull-Rom resampling (a = -0.5) then 8-bit
/// quantization; input dimensions must be divisible by the scale.
/// GaussianNoise: seeded i.i.d. noise per channel, clamped to [0, 255].
ImagePlane degrade(const ImagePlane& img, const DegradationSpec& spec);

/// General bicubic resize (a = -0.5, clamp-to-edge, normalized taps); the
/// kernel support is widened by the scale factor when downscaling.
ImagePlane resize_bicubic(const ImagePlane& img, int64_t out_w, int64_t out_h);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

/// 10 log10(255^2 / MSE), capped at 100 dB for identical images. With
/// y_channel_only, three-channel images are compared on the BT.601
/// full-range luma 0.299 R + 0.587 G + 0.114 B.
double psnr(const ImagePlane& a, const ImagePlane& b, bool y_channel_only);

/// Mean SSIM over valid positions of an 11x11 Gaussian window
/// (sigma = 1.5, K1 = 0.01, K2 = 0.03, L = 255), computed on luma for
/// three-channel images. Bit-exactly symmetric in its arguments.
double ssim(const ImagePlane& a, const ImagePlane& b);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainSpec {
    int64_t patch = 64;
    int64_t batch = 4;  // desk-scale default; recorded in every report
    int64_t max_steps = 1000;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::vector<double> milestones = {0.5, 0.75, 0.9};  // lr halves at each
    bool augment = true;
    uint64_t seed = 0;
    int64_t val_interval = 250;
    double sigma = 15.0;  // denoise degradation
    int64_t scale = 2;    // super-resolution degradation
};

struct TrainReport {
    struct Row {
        int64_t step = 0;
        double loss = 0.0;
        double lr = 0.0;
        std::optional<double> val_psnr;
    };
    std::vector<std::string> header;  // '#'-prefixed lines
    std::vector<Row> rows;
    double initial_val_psnr = 0.0;
    double final_val_psnr = 0.0;

    std::string to_text() const;  ///< "step,loss,lr[,val_psnr]" lines
};

/// Adam with bias correction; a zero gradient leaves parameters unchanged
/// exactly. State is tracked per parameter in census order.
class Adam {
public:
    Adam(double beta1, double beta2, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<std::pair<std::string, Tensor>>& params, double lr);
    int64_t steps_taken() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Seeded patch-sampling training loop: sample, augment (flips and 90/180/270
/// rotations), degrade, forward, L1 loss, Adam step. Samples within a batch
/// may run on worker threads; gradients merge in fixed sample order, so the
/// result is bit-identical for any thread count. Aborts on non-finite loss.
TrainReport train(MatIrModel& model, const std::string& dataset_dir, TaskHead task,
                  const TrainSpec& tspec);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    struct Row {
        std::string image;
        Metrics metrics;
        std::optional<double> baseline_psnr;  // bicubic upsample (SR) / noisy input (denoise)
    };
    std::vector<Row> rows;
    Metrics mean;
    std::optional<double> mean_baseline_psnr;
    int64_t skipped = 0;

    std::string to_csv() const;  ///< header "image,psnr_db,ssim"
    std::string to_text(const std::string& header) const;
};

/// degrade -> restore -> metrics for every readable image in the directory
/// (sorted by filename); unreadable files are skipped with a warning.
EvalResult evaluate(const MatIrModel& model, const std::string& dataset_dir,
                    const DegradationSpec& spec);

/// Pads to the window multiple (edge replication), runs the model, crops.
/// Grayscale inputs are replicated to three channels and averaged back.
ImagePlane restore_image(const MatIrModel& model, const ImagePlane& input);

/// All files with a readable image extension, sorted by filename.
std::vector<std::string> list_image_files(const std::string& dir);

}  // namespace matir
