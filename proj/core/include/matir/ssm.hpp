#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "matir/tensor.hpp"

namespace matir::ssm {

/// Small dense row-major matrix used by the state-space math. Kept separate
/// from Tensor: these are verification-grade linear-algebra values, not
/// autodiff nodes.
struct Mat {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int64_t r, int64_t c) : rows(r), cols(c), a(static_cast<size_t>(r * c), 0.0) {}

    double& operator()(int64_t i, int64_t j) { return a[static_cast<size_t>(i * cols + j)]; }
    double operator()(int64_t i, int64_t j) const { return a[static_cast<size_t>(i * cols + j)]; }

    static Mat identity(int64_t n);
    static Mat diagonal(const std::vector<double>& d);

    Mat operator*(const Mat& o) const;
    Mat operator+(const Mat& o) const;
    Mat scaled(double s) const;
    std::vector<double> apply(std::span<const double> v) const;  ///< rows-length result
    double max_abs() const;
    double inf_norm() const;  ///< max absolute row sum
};

/// Continuous-time single-input single-output state space system:
/// h'(t) = A h(t) + B x(t),  y(t) = C h(t) + D x(t).
struct SsmParams {
    Mat A;                   // [N x N]
    std::vector<double> B;   // [N]
    std::vector<double> C;   // [N]
    double D = 0.0;
    int64_t state_size = 0;

    /// Diagonal stable initialization: A = diag(-softplus(a_i)) with a_i
    /// the logs of N evenly spaced values in [1, N].
    static SsmParams stable_diagonal(int64_t n);
};

/// Zero-order-hold discretization of SsmParams at timescale delta.
struct DiscreteSsm {
    Mat A_bar;               // exp(delta * A)
    std::vector<double> B_bar;
    std::vector<double> C;
    double D = 0.0;
    double delta = 0.0;
};

struct SsmKernel {
    std::vector<double> k;
};

/// A_bar via the exponential series; B_bar via the convergent series
/// sum_j delta^{j+1} A^j / (j+1)! * B, which is regular at A = 0 and
/// delta = 0. Negative delta is rejected.
DiscreteSsm discretize(const SsmParams& p, double delta);

/// Step-by-step recurrence h_k = A_bar h_{k-1} + B_bar x_k, y_k = C h_k + D x_k
/// from h_0 = 0. Empty input yields empty output.
std::vector<double> scan_recurrent(const DiscreteSsm& m, std::span<const double> x);

/// Structured kernel (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar).
SsmKernel kernel(const DiscreteSsm& m, int64_t length);

/// Causal convolution y_t = sum_{s<=t} k[s] x_{t-s} + D x_t; agrees with
/// scan_recurrent for any time-invariant system.
std::vector<double> scan_convolutional(const DiscreteSsm& m, std::span<const double> x);

// ---------------------------------------------------------------------------
// Selective (input-dependent) scan over feature sequences.
// ---------------------------------------------------------------------------

/// Learned maps producing per-step Delta/B/C from the input feature vector,
/// plus the shared diagonal state matrix (as raw pre-softplus values) and a
/// per-channel skip. Delta positivity is enforced by softplus.
struct SelectiveScanParams {
    Tensor w_dt, b_dt;  // [E x E], [E]
    Tensor w_b, b_b;    // [N x E], [N]
    Tensor w_c, b_c;    // [N x E], [N]
    Tensor a_log;       // [N]; state diagonal is -softplus(a_log)
    Tensor d_skip;      // [E]

    int64_t feature_dim() const { return w_dt.dim(0); }
    int64_t state_size() const { return w_b.dim(0); }

    static SelectiveScanParams init(int64_t feature_dim, int64_t state_size, Rng& rng);
    void set_requires_grad(bool v);
};

/// Runs the per-channel selective recurrence over x of shape [L x E]:
/// for each step, delta = softplus(W_dt x + b_dt), B = W_b x + b_b,
/// C = W_c x + b_c, the shared diagonal A is discretized per step by the
/// exact scalar zero-order hold, and y = C h + D x. Differentiable with
/// respect to x and every parameter.
Tensor selective_scan(const SelectiveScanParams& p, const Tensor& x);

/// The recurrence core on precomputed per-step values; exposed for tests.
/// x [L x E], dt [L x E] (already positive), bs/cs [L x N], a_diag [N]
/// (negative values), d_skip [E].
Tensor selective_scan_core(const Tensor& x, const Tensor& dt, const Tensor& bs,
                           const Tensor& cs, const Tensor& a_diag, const Tensor& d_skip);

}  // namespace matir::ssm
