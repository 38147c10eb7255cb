#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "matir/layout.hpp"
#include "matir/tensor.hpp"

namespace matir {

// ---------------------------------------------------------------------------
// Channel global attention: attention over spatially pooled channel
// descriptors, reapplied to the map by per-channel weighting.
// ---------------------------------------------------------------------------

struct CgaBlock {
    int64_t channels = 0;
    Tensor w_q, w_k, w_v;  // [C x C], no biases

    static CgaBlock init(int64_t channels, Rng& rng);
    void set_requires_grad(bool v);
    void named_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;
};

Tensor cga_forward(const CgaBlock& block, const Tensor& x);

/// The pooled-descriptor attention matrix (softmax(Q K^T / sqrt(C)) of the
/// spatial-mean channel vector); exposed so tests can inspect row sums and
/// permutation behaviour directly.
Tensor cga_attention_matrix(const CgaBlock& block, const Tensor& x);

// ---------------------------------------------------------------------------
// Triangular window local attention.
// ---------------------------------------------------------------------------

/// Local geometry around one center pixel: its k nearest neighbors within
/// its triangular group, the integer edge vectors to them, and for every
/// (j in N(i), k in N(j)) pair the second edge and the angle at i between
/// the two edges. Angles live in [0, pi]; a zero-length second edge gets
/// the neutral angle pi/2.
struct TriangleWindow {
    int64_t center = 0;                                   // row-major pixel index
    std::vector<int64_t> neighbors;                       // k flat indices
    std::vector<std::array<double, 2>> edges;             // e_ij = (drow, dcol)
    std::vector<std::vector<std::array<double, 2>>> triple_edges;  // [k][k] e_ik
    std::vector<std::vector<double>> angles;              // [k][k] theta_ijk
};

/// Splits each window x window tile along its main anti-diagonal
/// (local r + c < w vs >= w) and builds per-pixel neighborhoods inside each
/// group (k nearest by Euclidean distance, ties by row-major index).
/// Requires h, w multiples of the window size and k <= min group size - 1.
std::vector<TriangleWindow> build_triangle_windows(int64_t h, int64_t w, int64_t window,
                                                   int64_t k);

/// Immutable per-(h, w, window, k) geometry: the window list plus the
/// flattened index/feature arrays the forward pass consumes.
struct WindowGeometry {
    int64_t h = 0, w = 0, window = 0, k = 0;
    std::vector<TriangleWindow> windows;
    std::vector<int64_t> nbr_flat;     // [N*k]
    std::vector<int64_t> center_flat;  // [N*k]
    Tensor edge_feats;                 // [N*k x 2]
    Tensor triple_feats;               // [N*k*k x 5]
};

/// Process-wide cache; geometry is a pure function of the key.
std::shared_ptr<const WindowGeometry> window_geometry(int64_t h, int64_t w, int64_t window,
                                                      int64_t k);

struct TwlaBlock {
    int64_t dim = 0;       // feature dimension D
    int64_t heads = 1;
    int64_t geom_dim = 0;  // width of the edge/triangle perceptrons

    Tensor w_q, w_k, w_v;  // [D x D]
    Tensor phi_w1, phi_b1, phi_w2, phi_b2;  // edge features, 2 -> d -> d
    Tensor u_vec, u_bias;                   // scalar projection for the logit bias
    Tensor psi_w1, psi_b1, psi_w2, psi_b2;  // triangle features, 5 -> d -> d
    Tensor v_vec, v_bias;                   // scalar projection, normalized over k in N(j)

    static TwlaBlock init(int64_t dim, int64_t geom_dim, int64_t heads, Rng& rng);
    void set_requires_grad(bool v);
    void named_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;
};

/// x is [N x D] with N = h*w pixel rows; every pixel is the center of
/// exactly one window. The caller adds the residual connection.
Tensor twla_forward(const TwlaBlock& block, const Tensor& x, const WindowGeometry& geom);

/// Per-center attention rows (softmax over the k neighbors, geometric bias
/// included), shape [N x k]; exposed for property tests.
Tensor twla_attention_rows(const TwlaBlock& block, const Tensor& x, const WindowGeometry& geom,
                           int head = 0);

// ---------------------------------------------------------------------------
// Transformer layer: TWLA and CGA sublayers, each pre-normed, residual, and
// followed by a feed-forward sublayer with expansion ratio 2.
// ---------------------------------------------------------------------------

struct FeedForward {
    Tensor w1, b1, w2, b2;  // C -> 2C -> C
};

struct TransformerLayer {
    int64_t channels = 0;
    int64_t window = 0;
    int64_t neighbors = 0;
    bool has_twla = true;
    bool has_cga = true;

    Tensor n1_g, n1_b, n2_g, n2_b;  // pre-norms for TWLA and its FFN
    Tensor n3_g, n3_b, n4_g, n4_b;  // pre-norms for CGA and its FFN
    TwlaBlock twla;
    CgaBlock cga;
    FeedForward ffn1, ffn2;

    static TransformerLayer init(int64_t channels, int64_t window, int64_t neighbors,
                                 int64_t geom_dim, int64_t heads, bool has_twla, bool has_cga,
                                 Rng& rng);
    void set_requires_grad(bool v);
    void named_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;
};

Tensor transformer_layer_forward(const TransformerLayer& layer, const Tensor& x);

}  // namespace matir
