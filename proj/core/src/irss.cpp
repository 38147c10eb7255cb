#include "matir/irss.hpp"

#include <algorithm>

namespace matir {

const char* scan_path_name(ScanPath p) {
    switch (p) {
        case ScanPath::RowMajorForward: return "row_forward";
        case ScanPath::RowMajorBackward: return "row_backward";
        case ScanPath::ColMajorForward: return "col_forward";
        case ScanPath::ColMajorBackward: return "col_backward";
    }
    return "?";
}

std::vector<int64_t> scan_order(ScanPath p, int64_t h, int64_t w) {
    if (h < 1 || w < 1) throw ContractError("scan_order requires a non-empty grid");
    const int64_t l = h * w;
    std::vector<int64_t> order(static_cast<size_t>(l));
    switch (p) {
        case ScanPath::RowMajorForward:
            for (int64_t i = 0; i < l; ++i) order[static_cast<size_t>(i)] = i;
            break;
        case ScanPath::RowMajorBackward:
            for (int64_t i = 0; i < l; ++i) order[static_cast<size_t>(i)] = l - 1 - i;
            break;
        case ScanPath::ColMajorForward:
            for (int64_t c = 0; c < w; ++c)
                for (int64_t r = 0; r < h; ++r) order[static_cast<size_t>(c * h + r)] = r * w + c;
            break;
        case ScanPath::ColMajorBackward:
            for (int64_t c = 0; c < w; ++c)
                for (int64_t r = 0; r < h; ++r)
                    order[static_cast<size_t>(l - 1 - (c * h + r))] = r * w + c;
            break;
    }
    return order;
}

static std::vector<int64_t> invert_order(const std::vector<int64_t>& order) {
    std::vector<int64_t> inv(order.size());
    for (size_t s = 0; s < order.size(); ++s) inv[static_cast<size_t>(order[s])] = static_cast<int64_t>(s);
    return inv;
}

Tensor flatten_path(const Tensor& x, ScanPath p) {
    if (x.rank() != 3) throw DimensionError("flatten_path expects [C x H x W], got " + shape_str(x.shape()));
    return ops::gather_rows(map_to_rows(x), scan_order(p, x.dim(1), x.dim(2)));
}

Tensor unflatten_path(const Tensor& seq, ScanPath p, int64_t h, int64_t w) {
    if (seq.rank() != 2) throw DimensionError("unflatten_path expects [L x C]");
    if (seq.dim(0) != h * w) {
        throw DimensionError("unflatten_path: sequence length " + std::to_string(seq.dim(0)) +
                             " does not equal " + std::to_string(h) + "*" + std::to_string(w));
    }
    Tensor rows = ops::gather_rows(seq, invert_order(scan_order(p, h, w)));
    return rows_to_map(rows, seq.dim(1), h, w);
}

// ---------------------------------------------------------------------------
// IrssBlock
// ---------------------------------------------------------------------------

IrssBlock IrssBlock::init(int64_t channels, int64_t state_size, int64_t expansion, Rng& rng) {
    if (channels < 1) throw ConfigError("channels must be positive");
    if (expansion < 1) throw ConfigError("expansion must be positive");
    IrssBlock b;
    b.channels = channels;
    b.state_size = state_size;
    b.expanded = channels * expansion;
    const int64_t e = b.expanded;
    b.norm_gamma = Tensor::full({channels}, 1.0);
    b.norm_beta = Tensor::zeros({channels});
    b.w_in = Tensor::trunc_normal({e, channels}, rng, 0.02);
    b.b_in = Tensor::zeros({e});
    b.w_gate = Tensor::trunc_normal({e, channels}, rng, 0.02);
    b.b_gate = Tensor::zeros({e});
    b.dw_kernel = Tensor::trunc_normal({e, 3, 3}, rng, 0.02);
    b.dw_bias = Tensor::zeros({e});
    for (auto& p : b.paths) p = ssm::SelectiveScanParams::init(e, state_size, rng);
    for (size_t i = 1; i < b.paths.size(); ++i) b.paths[i].a_log = b.paths[0].a_log;
    b.w_out = Tensor::trunc_normal({channels, e}, rng, 0.02);
    b.b_out = Tensor::zeros({channels});
    b.set_requires_grad(true);
    return b;
}

void IrssBlock::set_requires_grad(bool v) {
    for (Tensor* t : {&norm_gamma, &norm_beta, &w_in, &b_in, &w_gate, &b_gate, &dw_kernel,
                      &dw_bias, &w_out, &b_out}) {
        t->set_requires_grad(v);
    }
    for (auto& p : paths) p.set_requires_grad(v);
}

void IrssBlock::named_params(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + "norm.g", norm_gamma);
    out.emplace_back(prefix + "norm.b", norm_beta);
    out.emplace_back(prefix + "in.w", w_in);
    out.emplace_back(prefix + "in.b", b_in);
    out.emplace_back(prefix + "gate.w", w_gate);
    out.emplace_back(prefix + "gate.b", b_gate);
    out.emplace_back(prefix + "dw.w", dw_kernel);
    out.emplace_back(prefix + "dw.b", dw_bias);
    out.emplace_back(prefix + "a_log", paths[0].a_log);
    for (size_t i = 0; i < paths.size(); ++i) {
        const std::string pp = prefix + "dir" + std::to_string(i) + ".";
        out.emplace_back(pp + "dt.w", paths[i].w_dt);
        out.emplace_back(pp + "dt.b", paths[i].b_dt);
        out.emplace_back(pp + "bproj.w", paths[i].w_b);
        out.emplace_back(pp + "bproj.b", paths[i].b_b);
        out.emplace_back(pp + "cproj.w", paths[i].w_c);
        out.emplace_back(pp + "cproj.b", paths[i].b_c);
        out.emplace_back(pp + "d", paths[i].d_skip);
    }
    out.emplace_back(prefix + "out.w", w_out);
    out.emplace_back(prefix + "out.b", b_out);
}

Tensor irss_forward_ndir(const IrssBlock& block, const Tensor& x, int directions) {
    if (directions != 1 && directions != 2 && directions != 4) {
        throw ContractError("direction count must be 1, 2 or 4; got " + std::to_string(directions));
    }
    if (x.rank() != 3 || x.dim(0) != block.channels) {
        throw DimensionError("irss_forward input must be [" + std::to_string(block.channels) +
                             " x H x W], got " + shape_str(x.shape()));
    }
    const int64_t h = x.dim(1), w = x.dim(2);
    using namespace ops;

    Tensor xt = map_to_rows(x);  // [L x C]
    Tensor n = layer_norm_rows(xt, block.norm_gamma, block.norm_beta);
    Tensor u0 = add_rowvec(matmul(n, transpose(block.w_in)), block.b_in);  // [L x E]
    Tensor um = rows_to_map(u0, block.expanded, h, w);
    Tensor ud = add_channel_bias(depthwise_conv2d(um, block.dw_kernel, 1), block.dw_bias);
    Tensor u = silu(map_to_rows(ud));

    Tensor merged;
    for (int d = 0; d < directions; ++d) {
        const auto order = scan_order(kAllScanPaths[static_cast<size_t>(d)], h, w);
        Tensor seq = gather_rows(u, order);
        Tensor ys = ssm::selective_scan(block.paths[static_cast<size_t>(d)], seq);
        Tensor branch = gather_rows(ys, invert_order(order));
        merged = merged.defined() ? add(merged, branch) : branch;
    }
    merged = mul_scalar(merged, 1.0 / static_cast<double>(directions));

    Tensor gate = silu(add_rowvec(matmul(n, transpose(block.w_gate)), block.b_gate));
    Tensor o = mul(merged, gate);
    Tensor out = add_rowvec(matmul(o, transpose(block.w_out)), block.b_out);
    return rows_to_map(add(xt, out), block.channels, h, w);
}

Tensor irss_forward(const IrssBlock& block, const Tensor& x) {
    return irss_forward_ndir(block, x, 4);
}

}  // namespace matir
