#include "matir/attention.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace matir {

// ---------------------------------------------------------------------------
// CGA
// ---------------------------------------------------------------------------

CgaBlock CgaBlock::init(int64_t channels, Rng& rng) {
    if (channels < 1) throw ConfigError("channels must be positive");
    CgaBlock b;
    b.channels = channels;
    b.w_q = Tensor::trunc_normal({channels, channels}, rng, 0.02);
    b.w_k = Tensor::trunc_normal({channels, channels}, rng, 0.02);
    b.w_v = Tensor::trunc_normal({channels, channels}, rng, 0.02);
    b.set_requires_grad(true);
    return b;
}

void CgaBlock::set_requires_grad(bool v) {
    w_q.set_requires_grad(v);
    w_k.set_requires_grad(v);
    w_v.set_requires_grad(v);
}

void CgaBlock::named_params(const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + "wq", w_q);
    out.emplace_back(prefix + "wk", w_k);
    out.emplace_back(prefix + "wv", w_v);
}

static void require_cga_input(const CgaBlock& block, const Tensor& x) {
    if (x.rank() != 3 || x.dim(0) != block.channels) {
        throw DimensionError("cga_forward input must be [" + std::to_string(block.channels) +
                             " x H x W], got " + shape_str(x.shape()));
    }
}

Tensor cga_attention_matrix(const CgaBlock& block, const Tensor& x) {
    require_cga_input(block, x);
    using namespace ops;
    const int64_t c = block.channels;
    Tensor flat = reshape(x, {c, x.dim(1) * x.dim(2)});
    Tensor z = row_mean(flat);  // [C x 1]
    Tensor q = matmul(block.w_q, z);
    Tensor k = matmul(block.w_k, z);
    Tensor logits = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c)));
    return softmax(logits, 1);
}

Tensor cga_forward(const CgaBlock& block, const Tensor& x) {
    require_cga_input(block, x);
    using namespace ops;
    const int64_t c = block.channels;
    Tensor flat = reshape(x, {c, x.dim(1) * x.dim(2)});
    Tensor z = row_mean(flat);
    Tensor q = matmul(block.w_q, z);
    Tensor k = matmul(block.w_k, z);
    Tensor v = matmul(block.w_v, z);
    Tensor att = softmax(mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c))), 1);
    Tensor z_out = matmul(att, v);  // [C x 1]
    return reshape(scale_rows(flat, z_out), x.shape());
}

// ---------------------------------------------------------------------------
// Triangular window geometry
// ---------------------------------------------------------------------------

std::vector<TriangleWindow> build_triangle_windows(int64_t h, int64_t w, int64_t window,
                                                   int64_t k) {
    if (window < 2) throw ContractError("window size must be >= 2");
    if (h < 1 || w < 1 || h % window != 0 || w % window != 0) {
        throw ContractError("grid " + std::to_string(h) + "x" + std::to_string(w) +
                            " must be a multiple of the window size " + std::to_string(window) +
                            "; pad the input first");
    }
    const int64_t lower_size = window * (window + 1) / 2;
    const int64_t upper_size = window * (window - 1) / 2;
    const int64_t limit = std::min(lower_size, upper_size) - 1;
    if (k < 1 || k > limit) {
        throw ContractError("neighbor count " + std::to_string(k) + " exceeds the limit " +
                            std::to_string(limit) + " for window size " + std::to_string(window) +
                            " (smallest triangular group has " +
                            std::to_string(std::min(lower_size, upper_size)) + " pixels)");
    }

    std::vector<TriangleWindow> out(static_cast<size_t>(h * w));
    std::vector<int64_t> group;
    group.reserve(static_cast<size_t>(lower_size));
    for (int64_t ty = 0; ty < h; ty += window) {
        for (int64_t tx = 0; tx < w; tx += window) {
            for (int lower = 1; lower >= 0; --lower) {
                group.clear();
                for (int64_t r = 0; r < window; ++r)
                    for (int64_t c = 0; c < window; ++c) {
                        const bool in_lower = (r + c < window);
                        if (in_lower == (lower == 1)) group.push_back((ty + r) * w + (tx + c));
                    }
                for (int64_t pix : group) {
                    const int64_t py = pix / w, px = pix % w;
                    // k nearest group members, excluding the pixel itself
                    std::vector<std::pair<int64_t, int64_t>> cand;  // (dist^2, flat)
                    for (int64_t other : group) {
                        if (other == pix) continue;
                        const int64_t dy = other / w - py, dx = other % w - px;
                        cand.emplace_back(dy * dy + dx * dx, other);
                    }
                    std::sort(cand.begin(), cand.end());
                    TriangleWindow& win = out[static_cast<size_t>(pix)];
                    win.center = pix;
                    win.neighbors.resize(static_cast<size_t>(k));
                    win.edges.resize(static_cast<size_t>(k));
                    for (int64_t j = 0; j < k; ++j) {
                        const int64_t nb = cand[static_cast<size_t>(j)].second;
                        win.neighbors[static_cast<size_t>(j)] = nb;
                        win.edges[static_cast<size_t>(j)] = {static_cast<double>(nb / w - py),
                                                             static_cast<double>(nb % w - px)};
                    }
                }
            }
        }
    }

    // Second pass: triples need each neighbor's own neighborhood.
    for (TriangleWindow& win : out) {
        const int64_t py = win.center / w, px = win.center % w;
        win.triple_edges.assign(static_cast<size_t>(k), {});
        win.angles.assign(static_cast<size_t>(k), {});
        for (int64_t j = 0; j < k; ++j) {
            const TriangleWindow& jwin = out[static_cast<size_t>(win.neighbors[static_cast<size_t>(j)])];
            auto& te = win.triple_edges[static_cast<size_t>(j)];
            auto& an = win.angles[static_cast<size_t>(j)];
            te.resize(static_cast<size_t>(k));
            an.resize(static_cast<size_t>(k));
            const auto& eij = win.edges[static_cast<size_t>(j)];
            const double nij = std::hypot(eij[0], eij[1]);
            for (int64_t kk = 0; kk < k; ++kk) {
                const int64_t third = jwin.neighbors[static_cast<size_t>(kk)];
                const double dy = static_cast<double>(third / w - py);
                const double dx = static_cast<double>(third % w - px);
                te[static_cast<size_t>(kk)] = {dy, dx};
                const double nik = std::hypot(dy, dx);
                double cosv = 0.0;  // zero-length edge: neutral right angle
                if (nij > 0.0 && nik > 0.0) {
                    cosv = std::clamp((eij[0] * dy + eij[1] * dx) / (nij * nik), -1.0, 1.0);
                }
                an[static_cast<size_t>(kk)] = std::acos(cosv);
            }
        }
    }
    return out;
}

namespace {

std::shared_ptr<const WindowGeometry> make_geometry(int64_t h, int64_t w, int64_t window,
                                                    int64_t k) {
    auto g = std::make_shared<WindowGeometry>();
    g->h = h;
    g->w = w;
    g->window = window;
    g->k = k;
    g->windows = build_triangle_windows(h, w, window, k);
    const int64_t n = h * w;
    g->nbr_flat.resize(static_cast<size_t>(n * k));
    g->center_flat.resize(static_cast<size_t>(n * k));
    std::vector<double> edge(static_cast<size_t>(n * k * 2));
    std::vector<double> trip(static_cast<size_t>(n * k * k * 5));
    for (int64_t i = 0; i < n; ++i) {
        const TriangleWindow& win = g->windows[static_cast<size_t>(i)];
        for (int64_t j = 0; j < k; ++j) {
            g->nbr_flat[static_cast<size_t>(i * k + j)] = win.neighbors[static_cast<size_t>(j)];
            g->center_flat[static_cast<size_t>(i * k + j)] = i;
            edge[static_cast<size_t>((i * k + j) * 2 + 0)] = win.edges[static_cast<size_t>(j)][0];
            edge[static_cast<size_t>((i * k + j) * 2 + 1)] = win.edges[static_cast<size_t>(j)][1];
            for (int64_t kk = 0; kk < k; ++kk) {
                const size_t base = static_cast<size_t>(((i * k + j) * k + kk) * 5);
                trip[base + 0] = win.edges[static_cast<size_t>(j)][0];
                trip[base + 1] = win.edges[static_cast<size_t>(j)][1];
                trip[base + 2] = win.triple_edges[static_cast<size_t>(j)][static_cast<size_t>(kk)][0];
                trip[base + 3] = win.triple_edges[static_cast<size_t>(j)][static_cast<size_t>(kk)][1];
                trip[base + 4] = win.angles[static_cast<size_t>(j)][static_cast<size_t>(kk)];
            }
        }
    }
    g->edge_feats = Tensor::from({n * k, 2}, std::move(edge));
    g->triple_feats = Tensor::from({n * k * k, 5}, std::move(trip));
    return g;
}

}  // namespace

std::shared_ptr<const WindowGeometry> window_geometry(int64_t h, int64_t w, int64_t window,
                                                      int64_t k) {
    using Key = std::tuple<int64_t, int64_t, int64_t, int64_t>;
    static std::mutex mu;
    static std::map<Key, std::shared_ptr<const WindowGeometry>> cache;
    const Key key{h, w, window, k};
    {
        std::lock_guard<std::mutex> lock(mu);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
    }
    auto g = make_geometry(h, w, window, k);
    std::lock_guard<std::mutex> lock(mu);
    return cache.emplace(key, std::move(g)).first->second;
}

// ---------------------------------------------------------------------------
// TWLA
// ---------------------------------------------------------------------------

TwlaBlock TwlaBlock::init(int64_t dim, int64_t geom_dim, int64_t heads, Rng& rng) {
    if (dim < 1 || geom_dim < 1) throw ConfigError("twla dimensions must be positive");
    if (heads < 1 || dim % heads != 0) {
        throw ConfigError("heads must divide the feature dimension (" + std::to_string(dim) + ")");
    }
    TwlaBlock b;
    b.dim = dim;
    b.heads = heads;
    b.geom_dim = geom_dim;
    b.w_q = Tensor::trunc_normal({dim, dim}, rng, 0.02);
    b.w_k = Tensor::trunc_normal({dim, dim}, rng, 0.02);
    b.w_v = Tensor::trunc_normal({dim, dim}, rng, 0.02);
    b.phi_w1 = Tensor::trunc_normal({geom_dim, 2}, rng, 0.02);
    b.phi_b1 = Tensor::zeros({geom_dim});
    b.phi_w2 = Tensor::trunc_normal({geom_dim, geom_dim}, rng, 0.02);
    b.phi_b2 = Tensor::zeros({geom_dim});
    b.u_vec = Tensor::trunc_normal({geom_dim, 1}, rng, 0.02);
    b.u_bias = Tensor::zeros({1});
    b.psi_w1 = Tensor::trunc_normal({geom_dim, 5}, rng, 0.02);
    b.psi_b1 = Tensor::zeros({geom_dim});
    b.psi_w2 = Tensor::trunc_normal({geom_dim, geom_dim}, rng, 0.02);
    b.psi_b2 = Tensor::zeros({geom_dim});
    b.v_vec = Tensor::trunc_normal({geom_dim, 1}, rng, 0.02);
    b.v_bias = Tensor::zeros({1});
    b.set_requires_grad(true);
    return b;
}

void TwlaBlock::set_requires_grad(bool v) {
    for (Tensor* t : {&w_q, &w_k, &w_v, &phi_w1, &phi_b1, &phi_w2, &phi_b2, &u_vec, &u_bias,
                      &psi_w1, &psi_b1, &psi_w2, &psi_b2, &v_vec, &v_bias}) {
        t->set_requires_grad(v);
    }
}

void TwlaBlock::named_params(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + "wq", w_q);
    out.emplace_back(prefix + "wk", w_k);
    out.emplace_back(prefix + "wv", w_v);
    out.emplace_back(prefix + "phi.w1", phi_w1);
    out.emplace_back(prefix + "phi.b1", phi_b1);
    out.emplace_back(prefix + "phi.w2", phi_w2);
    out.emplace_back(prefix + "phi.b2", phi_b2);
    out.emplace_back(prefix + "u.w", u_vec);
    out.emplace_back(prefix + "u.b", u_bias);
    out.emplace_back(prefix + "psi.w1", psi_w1);
    out.emplace_back(prefix + "psi.b1", psi_b1);
    out.emplace_back(prefix + "psi.w2", psi_w2);
    out.emplace_back(prefix + "psi.b2", psi_b2);
    out.emplace_back(prefix + "v.w", v_vec);
    out.emplace_back(prefix + "v.b", v_bias);
}

namespace {

struct TwlaParts {
    Tensor gij;   // [N x k] logit bias
    Tensor wij;   // [N x k] triple-weight sums (convex, sum to 1 over k in N(j))
    Tensor q, k, v;
};

TwlaParts twla_parts(const TwlaBlock& block, const Tensor& x, const WindowGeometry& geom) {
    using namespace ops;
    const int64_t n = geom.h * geom.w;
    const int64_t kn = geom.k;
    if (x.rank() != 2 || x.dim(0) != n || x.dim(1) != block.dim) {
        throw DimensionError("twla_forward input must be [" + std::to_string(n) + " x " +
                             std::to_string(block.dim) + "], got " + shape_str(x.shape()));
    }
    if (static_cast<int64_t>(geom.windows.size()) != n) {
        throw ContractError("window list must cover every pixel exactly once");
    }
    TwlaParts parts;
    parts.q = matmul(x, transpose(block.w_q));
    parts.k = matmul(x, transpose(block.w_k));
    parts.v = matmul(x, transpose(block.w_v));

    Tensor f = silu(add_rowvec(matmul(geom.edge_feats, transpose(block.phi_w1)), block.phi_b1));
    f = add_rowvec(matmul(f, transpose(block.phi_w2)), block.phi_b2);
    parts.gij = reshape(add_rowvec(matmul(f, block.u_vec), block.u_bias), {n, kn});

    Tensor tf = silu(add_rowvec(matmul(geom.triple_feats, transpose(block.psi_w1)), block.psi_b1));
    tf = add_rowvec(matmul(tf, transpose(block.psi_w2)), block.psi_b2);
    Tensor tl = add_rowvec(matmul(tf, block.v_vec), block.v_bias);      // [N*k*k x 1]
    Tensor g3 = softmax(reshape(tl, {n * kn, kn}), 1);                  // over k in N(j)
    parts.wij = reshape(sum_axis(g3, 1), {n, kn});
    return parts;
}

}  // namespace

Tensor twla_attention_rows(const TwlaBlock& block, const Tensor& x, const WindowGeometry& geom,
                           int head) {
    using namespace ops;
    if (head < 0 || head >= block.heads) throw ContractError("head index out of range");
    const TwlaParts parts = twla_parts(block, x, geom);
    const int64_t n = geom.h * geom.w, kn = geom.k;
    const int64_t dh = block.dim / block.heads;
    Tensor qe = gather_rows(parts.q, geom.center_flat);
    Tensor kg = gather_rows(parts.k, geom.nbr_flat);
    Tensor qh = block.heads == 1 ? qe : slice_cols(qe, head * dh, (head + 1) * dh);
    Tensor kh = block.heads == 1 ? kg : slice_cols(kg, head * dh, (head + 1) * dh);
    Tensor logits = reshape(sum_axis(mul(qh, kh), 1), {n, kn});
    logits = mul_scalar(logits, 1.0 / std::sqrt(static_cast<double>(dh)));
    return softmax(add(logits, parts.gij), 1);
}

Tensor twla_forward(const TwlaBlock& block, const Tensor& x, const WindowGeometry& geom) {
    using namespace ops;
    const TwlaParts parts = twla_parts(block, x, geom);
    const int64_t n = geom.h * geom.w, kn = geom.k;
    const int64_t dh = block.dim / block.heads;

    Tensor qe = gather_rows(parts.q, geom.center_flat);  // [N*k x D]
    Tensor kg = gather_rows(parts.k, geom.nbr_flat);
    Tensor vg = gather_rows(parts.v, geom.nbr_flat);

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(block.heads));
    for (int64_t hd = 0; hd < block.heads; ++hd) {
        Tensor qh = block.heads == 1 ? qe : slice_cols(qe, hd * dh, (hd + 1) * dh);
        Tensor kh = block.heads == 1 ? kg : slice_cols(kg, hd * dh, (hd + 1) * dh);
        Tensor vh = block.heads == 1 ? vg : slice_cols(vg, hd * dh, (hd + 1) * dh);
        Tensor logits = reshape(sum_axis(mul(qh, kh), 1), {n, kn});
        logits = mul_scalar(logits, 1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor att = softmax(add(logits, parts.gij), 1);             // [N x k]
        Tensor coef = reshape(mul(att, parts.wij), {n * kn});
        Tensor contrib = scale_rows(vh, coef);                        // [N*k x dh]
        head_outputs.push_back(sum_axis(reshape(contrib, {n, kn, dh}), 1));
    }
    return block.heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
}

// ---------------------------------------------------------------------------
// Transformer layer
// ---------------------------------------------------------------------------

TransformerLayer TransformerLayer::init(int64_t channels, int64_t window, int64_t neighbors,
                                        int64_t geom_dim, int64_t heads, bool has_twla,
                                        bool has_cga, Rng& rng) {
    TransformerLayer layer;
    layer.channels = channels;
    layer.window = window;
    layer.neighbors = neighbors;
    layer.has_twla = has_twla;
    layer.has_cga = has_cga;
    auto make_ffn = [&](FeedForward& f) {
        f.w1 = Tensor::trunc_normal({2 * channels, channels}, rng, 0.02).set_requires_grad(true);
        f.b1 = Tensor::zeros({2 * channels}).set_requires_grad(true);
        f.w2 = Tensor::trunc_normal({channels, 2 * channels}, rng, 0.02).set_requires_grad(true);
        f.b2 = Tensor::zeros({channels}).set_requires_grad(true);
    };
    auto make_norm = [&](Tensor& g, Tensor& b) {
        g = Tensor::full({channels}, 1.0).set_requires_grad(true);
        b = Tensor::zeros({channels}).set_requires_grad(true);
    };
    if (has_twla) {
        make_norm(layer.n1_g, layer.n1_b);
        layer.twla = TwlaBlock::init(channels, geom_dim, heads, rng);
        make_norm(layer.n2_g, layer.n2_b);
        make_ffn(layer.ffn1);
    }
    if (has_cga) {
        make_norm(layer.n3_g, layer.n3_b);
        layer.cga = CgaBlock::init(channels, rng);
        make_norm(layer.n4_g, layer.n4_b);
        make_ffn(layer.ffn2);
    }
    return layer;
}

void TransformerLayer::set_requires_grad(bool v) {
    auto set = [&](Tensor& t) {
        if (t.defined()) t.set_requires_grad(v);
    };
    set(n1_g); set(n1_b); set(n2_g); set(n2_b);
    set(n3_g); set(n3_b); set(n4_g); set(n4_b);
    if (has_twla) {
        twla.set_requires_grad(v);
        set(ffn1.w1); set(ffn1.b1); set(ffn1.w2); set(ffn1.b2);
    }
    if (has_cga) {
        cga.set_requires_grad(v);
        set(ffn2.w1); set(ffn2.b1); set(ffn2.w2); set(ffn2.b2);
    }
}

void TransformerLayer::named_params(const std::string& prefix,
                                    std::vector<std::pair<std::string, Tensor>>& out) const {
    if (has_twla) {
        out.emplace_back(prefix + "norm1.g", n1_g);
        out.emplace_back(prefix + "norm1.b", n1_b);
        twla.named_params(prefix + "twla.", out);
        out.emplace_back(prefix + "norm2.g", n2_g);
        out.emplace_back(prefix + "norm2.b", n2_b);
        out.emplace_back(prefix + "ffn1.w1", ffn1.w1);
        out.emplace_back(prefix + "ffn1.b1", ffn1.b1);
        out.emplace_back(prefix + "ffn1.w2", ffn1.w2);
        out.emplace_back(prefix + "ffn1.b2", ffn1.b2);
    }
    if (has_cga) {
        out.emplace_back(prefix + "norm3.g", n3_g);
        out.emplace_back(prefix + "norm3.b", n3_b);
        cga.named_params(prefix + "cga.", out);
        out.emplace_back(prefix + "norm4.g", n4_g);
        out.emplace_back(prefix + "norm4.b", n4_b);
        out.emplace_back(prefix + "ffn2.w1", ffn2.w1);
        out.emplace_back(prefix + "ffn2.b1", ffn2.b1);
        out.emplace_back(prefix + "ffn2.w2", ffn2.w2);
        out.emplace_back(prefix + "ffn2.b2", ffn2.b2);
    }
}

static Tensor apply_ffn(const FeedForward& f, const Tensor& r) {
    using namespace ops;
    Tensor hidden = silu(add_rowvec(matmul(r, transpose(f.w1)), f.b1));
    return add_rowvec(matmul(hidden, transpose(f.w2)), f.b2);
}

Tensor transformer_layer_forward(const TransformerLayer& layer, const Tensor& x) {
    using namespace ops;
    if (x.rank() != 3 || x.dim(0) != layer.channels) {
        throw DimensionError("transformer layer input must be [" + std::to_string(layer.channels) +
                             " x H x W], got " + shape_str(x.shape()));
    }
    const int64_t h = x.dim(1), w = x.dim(2);
    Tensor r = map_to_rows(x);
    if (layer.has_twla) {
        auto geom = window_geometry(h, w, layer.window, layer.neighbors);
        r = add(r, twla_forward(layer.twla, layer_norm_rows(r, layer.n1_g, layer.n1_b), *geom));
        r = add(r, apply_ffn(layer.ffn1, layer_norm_rows(r, layer.n2_g, layer.n2_b)));
    }
    if (layer.has_cga) {
        Tensor nm = layer_norm_rows(r, layer.n3_g, layer.n3_b);
        Tensor cga_out = cga_forward(layer.cga, rows_to_map(nm, layer.channels, h, w));
        r = add(r, map_to_rows(cga_out));
        r = add(r, apply_ffn(layer.ffn2, layer_norm_rows(r, layer.n4_g, layer.n4_b)));
    }
    return rows_to_map(r, layer.channels, h, w);
}

}  // namespace matir
