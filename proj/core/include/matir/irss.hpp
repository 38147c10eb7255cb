#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "matir/layout.hpp"
#include "matir/ssm.hpp"
#include "matir/tensor.hpp"

namespace matir {

/// The four deterministic traversal orders used to serialize a 2-D feature
/// map. Each is a bijection between grid positions and sequence indices;
/// the Backward orders are exact reversals of their Forward counterparts.
enum class ScanPath {
    RowMajorForward = 0,
    RowMajorBackward = 1,
    ColMajorForward = 2,
    ColMajorBackward = 3,
};

inline constexpr std::array<ScanPath, 4> kAllScanPaths = {
    ScanPath::RowMajorForward, ScanPath::RowMajorBackward,
    ScanPath::ColMajorForward, ScanPath::ColMajorBackward};

const char* scan_path_name(ScanPath p);

/// Sequence order: result[s] is the row-major flat grid index visited at
/// sequence position s.
std::vector<int64_t> scan_order(ScanPath p, int64_t h, int64_t w);

/// Serializes a [C x H x W] map into an [L x C] sequence along the path.
Tensor flatten_path(const Tensor& x, ScanPath p);

/// Exact inverse of flatten_path for every path.
Tensor unflatten_path(const Tensor& seq, ScanPath p, int64_t h, int64_t w);

/// One Mamba-style residual block: pre-norm, pointwise expansion with a
/// gating branch, depthwise 3x3, a selective scan per traversal direction
/// (directions merged by elementwise mean), pointwise projection back, and
/// a residual connection. The state diagonal is shared across directions;
/// all projections are per-direction.
struct IrssBlock {
    int64_t channels = 0;
    int64_t expanded = 0;
    int64_t state_size = 0;

    Tensor norm_gamma, norm_beta;
    Tensor w_in, b_in;      // [E x C], [E]
    Tensor w_gate, b_gate;  // [E x C], [E]
    Tensor dw_kernel, dw_bias;  // [E x 3 x 3], [E]
    std::array<ssm::SelectiveScanParams, 4> paths;  // shared a_log
    Tensor w_out, b_out;    // [C x E], [C]

    static IrssBlock init(int64_t channels, int64_t state_size, int64_t expansion, Rng& rng);
    void set_requires_grad(bool v);

    /// Stable-ordered (name, parameter) pairs; the shared state diagonal
    /// appears exactly once.
    void named_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;
};

/// Full four-direction forward; output shape equals input shape.
Tensor irss_forward(const IrssBlock& block, const Tensor& x);

/// Ablation variant restricted to the first `directions` paths
/// (1 = row forward; 2 = row forward+backward; 4 = all).
Tensor irss_forward_ndir(const IrssBlock& block, const Tensor& x, int directions);

}  // namespace matir
