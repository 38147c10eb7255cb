#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "matir/attention.hpp"
#include "matir/irss.hpp"
#include "matir/tensor.hpp"

namespace matir {

enum class TaskHead { SuperResolution, Denoise };

const char* task_name(TaskHead t);
TaskHead task_from_name(const std::string& name);

/// Architecture hyperparameters. `pattern` is a string of 'T'/'M' of length
/// `depth` (empty selects strict alternation starting with 'T'); the
/// remove_* flags build the corresponding ablation variants.
struct MatIrConfig {
    int64_t channels = 16;
    int64_t depth = 4;
    std::string pattern;
    int64_t window = 8;
    int64_t neighbors = 8;
    int64_t state_size = 16;
    int64_t geom_dim = 16;
    int64_t heads = 1;
    int64_t expansion = 2;
    int64_t scale = 2;
    TaskHead task = TaskHead::SuperResolution;
    uint64_t seed = 0;
    int directions = 4;
    bool remove_twla = false;
    bool remove_cga = false;
    bool remove_irss = false;

    std::string effective_pattern() const;
    void validate() const;  ///< throws ConfigError naming the offending field

    /// Key-value config text: one `key = value` per line, '#' comments,
    /// unknown keys rejected.
    static MatIrConfig from_text(const std::string& text);
    static MatIrConfig from_file(const std::string& path);
    std::string to_text() const;
    uint64_t hash() const;  ///< FNV-1a of the canonical text

    /// "tiny" (desk-scale) or "paper" (best-effort large preset).
    static MatIrConfig preset(const std::string& name);
};

/// One deep-feature layer: a Transformer layer, a Mamba (IRSS) layer, or a
/// placeholder identity when the ablation removed the block.
struct DeepLayer {
    char kind = 'T';  // 'T', 'M', or 'I' for identity
    std::optional<TransformerLayer> transformer;
    std::optional<IrssBlock> irss;
};

struct MatIrModel {
    MatIrConfig config;
    Tensor stem_w, stem_b;  // 3x3 conv, 3 -> C
    std::vector<DeepLayer> layers;
    std::vector<std::pair<Tensor, Tensor>> up_convs;  // SR upsample stages
    std::vector<int64_t> up_factors;                  // pixel-shuffle factor per stage
    Tensor head_w, head_b;  // 3x3 conv, C -> 3
};

/// Deterministic parameter initialization from config.seed.
MatIrModel build(const MatIrConfig& config);

/// [3 x H x W] -> [3 x sH x sW]; H and W must be multiples of the window
/// size (times the scan constraint handled by the caller's padding).
Tensor model_forward(const MatIrModel& model, const Tensor& image);

int64_t count_params(const MatIrModel& model);

/// Stable-ordered parameter census used by checkpoints and the optimizer.
std::vector<std::pair<std::string, Tensor>> named_params(const MatIrModel& model);

/// Analytic multiply-accumulate counts for one forward pass at the given
/// input resolution, split by layer family. Dense multiplies only; the
/// per-layer formulas are spelled out in the implementation.
struct FlopsReport {
    int64_t stem = 0;
    int64_t transformer = 0;
    int64_t irss = 0;
    int64_t head = 0;
    int64_t total() const { return stem + transformer + irss + head; }
};

FlopsReport estimate_flops(const MatIrModel& model, int64_t h, int64_t w);

void save_checkpoint(const MatIrModel& model, const std::string& path);

/// Rebuilds from config and loads weights; the checkpoint census (names,
/// shapes, count) must match the config exactly.
MatIrModel load_checkpoint(const std::string& path, const MatIrConfig& config);

}  // namespace matir
