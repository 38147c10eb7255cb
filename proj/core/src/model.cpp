#include "matir/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace matir {

const char* task_name(TaskHead t) {
    return t == TaskHead::SuperResolution ? "sr" : "denoise";
}

TaskHead task_from_name(const std::string& name) {
    if (name == "sr") return TaskHead::SuperResolution;
    if (name == "denoise") return TaskHead::Denoise;
    throw ConfigError("task must be 'sr' or 'denoise', got '" + name + "'");
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string MatIrConfig::effective_pattern() const {
    if (!pattern.empty()) return pattern;
    std::string p;
    for (int64_t i = 0; i < depth; ++i) p += (i % 2 == 0) ? 'T' : 'M';
    return p;
}

void MatIrConfig::validate() const {
    if (channels < 1) throw ConfigError("config field 'channels' must be positive");
    if (depth < 2) throw ConfigError("config field 'depth' must be at least 2");
    if (window < 2) throw ConfigError("config field 'window' must be at least 2");
    if (state_size < 1) throw ConfigError("config field 'state_size' must be positive");
    if (geom_dim < 1) throw ConfigError("config field 'geom_dim' must be positive");
    if (expansion < 1) throw ConfigError("config field 'expansion' must be positive");
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("config field 'heads' must divide 'channels'");
    }
    if (scale < 1 || scale > 4) throw ConfigError("config field 'scale' must be 1, 2, 3 or 4");
    if ((scale == 1) != (task == TaskHead::Denoise)) {
        throw ConfigError("config field 'scale' must be 1 exactly when task is 'denoise'");
    }
    if (directions != 1 && directions != 2 && directions != 4) {
        throw ConfigError("config field 'directions' must be 1, 2 or 4");
    }
    const int64_t min_group = window * (window - 1) / 2;
    if (neighbors < 1 || neighbors > min_group - 1) {
        throw ConfigError("config field 'neighbors' must lie in [1, " +
                          std::to_string(min_group - 1) + "] for window " + std::to_string(window));
    }
    if (!pattern.empty()) {
        if (static_cast<int64_t>(pattern.size()) != depth) {
            throw ConfigError("config field 'pattern' length must equal 'depth'");
        }
        for (char c : pattern) {
            if (c != 'T' && c != 'M') throw ConfigError("config field 'pattern' may contain only 'T' and 'M'");
        }
    }
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config field '" + key + "' must be a boolean, got '" + v + "'");
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long long out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return static_cast<int64_t>(out);
    } catch (const std::exception&) {
        throw ConfigError("config field '" + key + "' must be an integer, got '" + v + "'");
    }
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

MatIrConfig MatIrConfig::from_text(const std::string& text) {
    MatIrConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::string key, value;
        const size_t eq = line.find('=');
        if (eq != std::string::npos) {
            key = trim(line.substr(0, eq));
            value = trim(line.substr(eq + 1));
        } else {
            const size_t sp = line.find_first_of(" \t");
            if (sp == std::string::npos) throw ConfigError("config line '" + line + "' has no value");
            key = trim(line.substr(0, sp));
            value = trim(line.substr(sp + 1));
        }
        if (key == "task") cfg.task = task_from_name(value);
        else if (key == "scale") cfg.scale = parse_int(key, value);
        else if (key == "channels") cfg.channels = parse_int(key, value);
        else if (key == "depth") cfg.depth = parse_int(key, value);
        else if (key == "pattern") cfg.pattern = value;
        else if (key == "window") cfg.window = parse_int(key, value);
        else if (key == "neighbors") cfg.neighbors = parse_int(key, value);
        else if (key == "state_size") cfg.state_size = parse_int(key, value);
        else if (key == "geom_dim") cfg.geom_dim = parse_int(key, value);
        else if (key == "heads") cfg.heads = parse_int(key, value);
        else if (key == "expansion") cfg.expansion = parse_int(key, value);
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_int(key, value));
        else if (key == "directions") cfg.directions = static_cast<int>(parse_int(key, value));
        else if (key == "remove_twla") cfg.remove_twla = parse_bool(key, value);
        else if (key == "remove_cga") cfg.remove_cga = parse_bool(key, value);
        else if (key == "remove_irss") cfg.remove_irss = parse_bool(key, value);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

MatIrConfig MatIrConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_text(buf.str());
}

std::string MatIrConfig::to_text() const {
    std::ostringstream os;
    os << "task = " << task_name(task) << "\n";
    os << "scale = " << scale << "\n";
    os << "channels = " << channels << "\n";
    os << "depth = " << depth << "\n";
    os << "pattern = " << effective_pattern() << "\n";
    os << "window = " << window << "\n";
    os << "neighbors = " << neighbors << "\n";
    os << "state_size = " << state_size << "\n";
    os << "geom_dim = " << geom_dim << "\n";
    os << "heads = " << heads << "\n";
    os << "expansion = " << expansion << "\n";
    os << "seed = " << seed << "\n";
    os << "directions = " << directions << "\n";
    os << "remove_twla = " << (remove_twla ? "true" : "false") << "\n";
    os << "remove_cga = " << (remove_cga ? "true" : "false") << "\n";
    os << "remove_irss = " << (remove_irss ? "true" : "false") << "\n";
    return os.str();
}

uint64_t MatIrConfig::hash() const {
    const std::string text = to_text();
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

MatIrConfig MatIrConfig::preset(const std::string& name) {
    MatIrConfig cfg;
    if (name == "tiny") {
        cfg.channels = 16;
        cfg.depth = 4;
        cfg.pattern = "TMTM";
        cfg.window = 4;
        cfg.neighbors = 3;
        cfg.state_size = 8;
        cfg.geom_dim = 16;
        cfg.scale = 2;
        cfg.task = TaskHead::SuperResolution;
    } else if (name == "paper") {
        // Best-effort large preset; per-layer dimensions of the published
        // model are unavailable, so this documents its own census instead.
        cfg.channels = 180;
        cfg.depth = 24;
        cfg.window = 8;
        cfg.neighbors = 8;
        cfg.state_size = 16;
        cfg.geom_dim = 16;
        cfg.scale = 2;
        cfg.task = TaskHead::SuperResolution;
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected 'tiny' or 'paper')");
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Build
// ---------------------------------------------------------------------------

MatIrModel build(const MatIrConfig& config) {
    config.validate();
    MatIrModel model;
    model.config = config;
    Rng rng(config.seed);

    const int64_t c = config.channels;
    model.stem_w = Tensor::trunc_normal({c, 3, 3, 3}, rng, 0.02).set_requires_grad(true);
    model.stem_b = Tensor::zeros({c}).set_requires_grad(true);

    const std::string pattern = config.effective_pattern();
    for (char kind : pattern) {
        DeepLayer layer;
        if (kind == 'T') {
            layer.kind = 'T';
            layer.transformer = TransformerLayer::init(c, config.window, config.neighbors,
                                                       config.geom_dim, config.heads,
                                                       !config.remove_twla, !config.remove_cga, rng);
        } else if (config.remove_irss) {
            layer.kind = 'I';
        } else {
            layer.kind = 'M';
            layer.irss = IrssBlock::init(c, config.state_size, config.expansion, rng);
        }
        model.layers.push_back(std::move(layer));
    }

    if (config.task == TaskHead::SuperResolution) {
        std::vector<int64_t> factors;
        if (config.scale == 2) factors = {2};
        else if (config.scale == 3) factors = {3};
        else factors = {2, 2};
        for (int64_t r : factors) {
            Tensor w = Tensor::trunc_normal({c * r * r, c, 3, 3}, rng, 0.02).set_requires_grad(true);
            Tensor b = Tensor::zeros({c * r * r}).set_requires_grad(true);
            model.up_convs.emplace_back(std::move(w), std::move(b));
            model.up_factors.push_back(r);
        }
    }
    model.head_w = Tensor::trunc_normal({3, c, 3, 3}, rng, 0.02).set_requires_grad(true);
    model.head_b = Tensor::zeros({3}).set_requires_grad(true);
    return model;
}

Tensor model_forward(const MatIrModel& model, const Tensor& image) {
    using namespace ops;
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("model input must be [3 x H x W], got " + shape_str(image.shape()));
    }
    const int64_t h = image.dim(1), w = image.dim(2);
    const int64_t win = model.config.window;
    if (h % win != 0 || w % win != 0) {
        throw ContractError("input " + std::to_string(h) + "x" + std::to_string(w) +
                            " must be padded to a multiple of the window size " + std::to_string(win));
    }

    Tensor shallow = add_channel_bias(conv2d(image, model.stem_w, 1), model.stem_b);
    Tensor deep = shallow;
    for (const DeepLayer& layer : model.layers) {
        if (layer.kind == 'T') {
            deep = transformer_layer_forward(*layer.transformer, deep);
        } else if (layer.kind == 'M') {
            deep = irss_forward_ndir(*layer.irss, deep, model.config.directions);
        }
    }
    Tensor fused = add(deep, shallow);

    if (model.config.task == TaskHead::SuperResolution) {
        Tensor u = fused;
        for (size_t i = 0; i < model.up_convs.size(); ++i) {
            u = add_channel_bias(conv2d(u, model.up_convs[i].first, 1), model.up_convs[i].second);
            u = pixel_shuffle(u, model.up_factors[i]);
        }
        Tensor out = add_channel_bias(conv2d(u, model.head_w, 1), model.head_b);
        return add(out, upsample_bicubic(image, model.config.scale));
    }
    Tensor out = add_channel_bias(conv2d(fused, model.head_w, 1), model.head_b);
    return add(out, image);
}

// ---------------------------------------------------------------------------
// Census
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> named_params(const MatIrModel& model) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("stem.w", model.stem_w);
    out.emplace_back("stem.b", model.stem_b);
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const std::string prefix = "deep." + std::to_string(i) + ".";
        const DeepLayer& layer = model.layers[i];
        if (layer.kind == 'T') layer.transformer->named_params(prefix, out);
        else if (layer.kind == 'M') layer.irss->named_params(prefix, out);
    }
    for (size_t i = 0; i < model.up_convs.size(); ++i) {
        out.emplace_back("head.up" + std::to_string(i) + ".w", model.up_convs[i].first);
        out.emplace_back("head.up" + std::to_string(i) + ".b", model.up_convs[i].second);
    }
    out.emplace_back("head.final.w", model.head_w);
    out.emplace_back("head.final.b", model.head_b);
    return out;
}

int64_t count_params(const MatIrModel& model) {
    int64_t total = 0;
    for (const auto& [name, t] : named_params(model)) total += t.numel();
    return total;
}

// ---------------------------------------------------------------------------
// Analytic multiply-accumulate counts. Only dense multiplies are counted
// (normalizations, softmax exponentials and additions are excluded).
//
//   stem / head convs:     c_in * c_out * 9 * H*W
//   transformer layer:     QKV 3*C^2*N; logits + aggregation 2*N*k*C;
//                          edge MLP N*k*(2d + d^2 + d);
//                          triangle MLP N*k^2*(5d + d^2 + d);
//                          CGA 5*C^2 + 2*C*N; each FFN 4*C^2*N
//   irss layer:            in/gate 2*C*E*N; depthwise 9*E*N;
//                          per direction E^2*N (dt) + 2*E_state*E*N (B,C)
//                          + 3*E*E_state*N (scan) + E*N (skip); out E*C*N
//   SR residual:           8 bicubic taps * 3 * (sH*sW)
// ---------------------------------------------------------------------------

FlopsReport estimate_flops(const MatIrModel& model, int64_t h, int64_t w) {
    const MatIrConfig& cfg = model.config;
    const int64_t n = h * w;
    const int64_t c = cfg.channels;
    const int64_t e = c * cfg.expansion;
    const int64_t ns = cfg.state_size;
    const int64_t k = cfg.neighbors;
    const int64_t d = cfg.geom_dim;

    FlopsReport rep;
    rep.stem = 3 * c * 9 * n;

    for (const DeepLayer& layer : model.layers) {
        if (layer.kind == 'T') {
            int64_t acc = 0;
            if (layer.transformer->has_twla) {
                acc += 3 * c * c * n;                    // QKV projections
                acc += 2 * n * k * c;                    // logits + weighted sum
                acc += n * k * (2 * d + d * d + d);      // edge perceptron + scalar proj
                acc += n * k * k * (5 * d + d * d + d);  // triangle perceptron + scalar proj
                acc += 4 * c * c * n;                    // FFN
            }
            if (layer.transformer->has_cga) {
                acc += 5 * c * c + 2 * c * n;            // pooled attention + reweighting
                acc += 4 * c * c * n;                    // FFN
            }
            rep.transformer += acc;
        } else if (layer.kind == 'M') {
            int64_t acc = 2 * c * e * n + 9 * e * n;     // in/gate projections + depthwise
            int64_t per_dir = e * e * n + 2 * ns * e * n + 3 * e * ns * n + e * n;
            acc += per_dir * cfg.directions;
            acc += e * c * n;                            // out projection
            rep.irss += acc;
        }
    }

    if (cfg.task == TaskHead::SuperResolution) {
        int64_t cur = n;
        for (int64_t r : model.up_factors) {
            rep.head += c * (c * r * r) * 9 * cur;
            cur *= r * r;
        }
        rep.head += c * 3 * 9 * cur;
        rep.head += 8 * 3 * cur;  // bicubic residual taps
    } else {
        rep.head += c * 3 * 9 * n;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const MatIrModel& model, const std::string& path) {
    save_tensor_file(path, named_params(model));
}

MatIrModel load_checkpoint(const std::string& path, const MatIrConfig& config) {
    const std::vector<TensorEntry> entries = load_tensor_file(path);
    MatIrModel model = build(config);
    auto params = named_params(model);
    if (entries.size() != params.size()) {
        throw FormatError("checkpoint census mismatch: expected " + std::to_string(params.size()) +
                          " parameters for this config, found " + std::to_string(entries.size()));
    }
    std::map<std::string, const TensorEntry*> by_name;
    for (const TensorEntry& e : entries) by_name[e.name] = &e;
    if (by_name.size() != entries.size()) throw FormatError("checkpoint has duplicate parameter names");
    for (auto& [name, t] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
        const TensorEntry& e = *it->second;
        if (e.shape != t.shape()) {
            throw FormatError("checkpoint census mismatch at '" + name + "': found shape " +
                              shape_str(e.shape) + ", expected " + shape_str(t.shape()));
        }
        t.mutable_data() = e.values;
    }
    return model;
}

}  // namespace matir
