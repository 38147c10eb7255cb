#include "matir/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace matir::ssm {

// ---------------------------------------------------------------------------
// Mat
// ---------------------------------------------------------------------------

Mat Mat::identity(int64_t n) {
    Mat m(n, n);
    for (int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Mat Mat::diagonal(const std::vector<double>& d) {
    Mat m(static_cast<int64_t>(d.size()), static_cast<int64_t>(d.size()));
    for (size_t i = 0; i < d.size(); ++i) m(static_cast<int64_t>(i), static_cast<int64_t>(i)) = d[i];
    return m;
}

Mat Mat::operator*(const Mat& o) const {
    if (cols != o.rows) throw DimensionError("Mat multiply: inner dimensions disagree");
    Mat out(rows, o.cols);
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t p = 0; p < cols; ++p) {
            const double v = (*this)(i, p);
            for (int64_t j = 0; j < o.cols; ++j) out(i, j) += v * o(p, j);
        }
    return out;
}

Mat Mat::operator+(const Mat& o) const {
    if (rows != o.rows || cols != o.cols) throw DimensionError("Mat add: shape mismatch");
    Mat out = *this;
    for (size_t i = 0; i < a.size(); ++i) out.a[i] += o.a[i];
    return out;
}

Mat Mat::scaled(double s) const {
    Mat out = *this;
    for (double& v : out.a) v *= s;
    return out;
}

std::vector<double> Mat::apply(std::span<const double> v) const {
    if (static_cast<int64_t>(v.size()) != cols) throw DimensionError("Mat apply: length mismatch");
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    for (int64_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < cols; ++j) acc += (*this)(i, j) * v[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = acc;
    }
    return out;
}

double Mat::max_abs() const {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::fabs(v));
    return m;
}

double Mat::inf_norm() const {
    double m = 0.0;
    for (int64_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += std::fabs((*this)(i, j));
        m = std::max(m, s);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Continuous params and ZOH discretization
// ---------------------------------------------------------------------------

namespace {
double softplus_val(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }
}  // namespace

SsmParams SsmParams::stable_diagonal(int64_t n) {
    if (n < 1) throw ContractError("state size must be positive");
    SsmParams p;
    p.state_size = n;
    std::vector<double> diag(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        // logs of evenly spaced values in [1, N]
        const double v = 1.0 + static_cast<double>(i);
        diag[static_cast<size_t>(i)] = -softplus_val(std::log(v));
    }
    p.A = Mat::diagonal(diag);
    p.B.assign(static_cast<size_t>(n), 1.0);
    p.C.assign(static_cast<size_t>(n), 1.0);
    p.D = 0.0;
    return p;
}

DiscreteSsm discretize(const SsmParams& p, double delta) {
    if (delta < 0.0) throw ContractError("discretize requires delta >= 0");
    if (p.A.rows != p.A.cols) throw DimensionError("state matrix must be square");
    const int64_t n = p.A.rows;
    if (static_cast<int64_t>(p.B.size()) != n || static_cast<int64_t>(p.C.size()) != n) {
        throw DimensionError("B/C length must equal the state size");
    }

    constexpr double kTermTol = 1e-16;
    constexpr int kMaxTerms = 256;

    DiscreteSsm out;
    out.delta = delta;
    out.C = p.C;
    out.D = p.D;

    // A_bar = exp(delta A) by direct series; terms vanish identically when
    // delta A = 0, so the identity limits are exact.
    const Mat x = p.A.scaled(delta);
    Mat sum = Mat::identity(n);
    Mat term = Mat::identity(n);
    for (int j = 1; j <= kMaxTerms; ++j) {
        term = (term * x).scaled(1.0 / static_cast<double>(j));
        if (term.max_abs() < kTermTol) break;
        sum = sum + term;
    }
    out.A_bar = sum;

    // B_bar = sum_j delta^{j+1} A^j / (j+1)! * B, regular at A = 0.
    std::vector<double> vterm(p.B);
    for (double& v : vterm) v *= delta;
    std::vector<double> vsum = vterm;
    for (int j = 1; j <= kMaxTerms; ++j) {
        vterm = x.apply(vterm);
        double mx = 0.0;
        for (double& v : vterm) {
            v /= static_cast<double>(j + 1);
            mx = std::max(mx, std::fabs(v));
        }
        if (mx < kTermTol) break;
        for (size_t i = 0; i < vsum.size(); ++i) vsum[i] += vterm[i];
    }
    out.B_bar = std::move(vsum);
    return out;
}

std::vector<double> scan_recurrent(const DiscreteSsm& m, std::span<const double> x) {
    const int64_t n = m.A_bar.rows;
    std::vector<double> h(static_cast<size_t>(n), 0.0);
    std::vector<double> y(x.size(), 0.0);
    for (size_t k = 0; k < x.size(); ++k) {
        std::vector<double> hn = m.A_bar.apply(h);
        for (int64_t i = 0; i < n; ++i) hn[static_cast<size_t>(i)] += m.B_bar[static_cast<size_t>(i)] * x[k];
        h = std::move(hn);
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += m.C[static_cast<size_t>(i)] * h[static_cast<size_t>(i)];
        y[k] = acc + m.D * x[k];
    }
    return y;
}

SsmKernel kernel(const DiscreteSsm& m, int64_t length) {
    if (length < 1) throw ContractError("kernel length must be >= 1");
    const int64_t n = m.A_bar.rows;
    SsmKernel out;
    out.k.resize(static_cast<size_t>(length));
    std::vector<double> v = m.B_bar;
    for (int64_t t = 0; t < length; ++t) {
        if (t > 0) v = m.A_bar.apply(v);
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += m.C[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
        out.k[static_cast<size_t>(t)] = acc;
    }
    return out;
}

std::vector<double> scan_convolutional(const DiscreteSsm& m, std::span<const double> x) {
    if (x.empty()) return {};
    const SsmKernel ker = kernel(m, static_cast<int64_t>(x.size()));
    std::vector<double> y(x.size(), 0.0);
    for (size_t t = 0; t < x.size(); ++t) {
        double acc = 0.0;
        for (size_t s = 0; s <= t; ++s) acc += ker.k[s] * x[t - s];
        y[t] = acc + m.D * x[t];
    }
    return y;
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

SelectiveScanParams SelectiveScanParams::init(int64_t feature_dim, int64_t state_size, Rng& rng) {
    if (feature_dim < 1 || state_size < 1) throw ContractError("selective scan dims must be positive");
    SelectiveScanParams p;
    p.w_dt = Tensor::trunc_normal({feature_dim, feature_dim}, rng, 0.02);
    // Bias placed so softplus(b) is log-uniform in [1e-3, 1e-1]: keeps the
    // initial per-step decay moderate across channels.
    {
        std::vector<double> b(static_cast<size_t>(feature_dim));
        for (double& v : b) {
            const double u = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            v = u + std::log1p(-std::exp(-u));  // inverse softplus
        }
        p.b_dt = Tensor::from({feature_dim}, std::move(b));
    }
    p.w_b = Tensor::trunc_normal({state_size, feature_dim}, rng, 0.02);
    p.b_b = Tensor::zeros({state_size});
    p.w_c = Tensor::trunc_normal({state_size, feature_dim}, rng, 0.02);
    p.b_c = Tensor::zeros({state_size});
    {
        std::vector<double> a(static_cast<size_t>(state_size));
        for (int64_t i = 0; i < state_size; ++i) {
            a[static_cast<size_t>(i)] = std::log(1.0 + static_cast<double>(i));
        }
        p.a_log = Tensor::from({state_size}, std::move(a));
    }
    p.d_skip = Tensor::full({feature_dim}, 1.0);
    p.set_requires_grad(true);
    return p;
}

void SelectiveScanParams::set_requires_grad(bool v) {
    for (Tensor* t : {&w_dt, &b_dt, &w_b, &b_b, &w_c, &b_c, &a_log, &d_skip}) {
        t->set_requires_grad(v);
    }
}

namespace {

// phi(z) = expm1(z)/z with phi(0) = 1; the exact scalar ZOH input factor is
// b_bar = delta * phi(delta a) * B.
inline double phi_from_em(double z, double em) {
    if (std::fabs(z) < 1e-5) return 1.0 + z * (0.5 + z / 6.0);
    return em / z;
}

// phi'(z) = (z e^z - expm1(z)) / z^2 with phi'(0) = 1/2.
inline double phi_prime_from(double z, double abar, double em) {
    if (std::fabs(z) < 1e-5) return 0.5 + z * (1.0 / 3.0 + z / 8.0);
    return (z * abar - em) / (z * z);
}

}  // namespace

Tensor selective_scan_core(const Tensor& x, const Tensor& dt, const Tensor& bs,
                           const Tensor& cs, const Tensor& a_diag, const Tensor& d_skip) {
    if (x.rank() != 2) throw DimensionError("selective scan input must be [L x E]");
    const int64_t L = x.dim(0), E = x.dim(1);
    const int64_t N = a_diag.numel();
    if (dt.shape() != x.shape()) throw DimensionError("dt shape must match input");
    if (bs.rank() != 2 || bs.dim(0) != L || bs.dim(1) != N) throw DimensionError("B sequence must be [L x N]");
    if (cs.rank() != 2 || cs.dim(0) != L || cs.dim(1) != N) throw DimensionError("C sequence must be [L x N]");
    if (d_skip.numel() != E) throw DimensionError("skip vector must have length E");

    const double* xv = x.data().data();
    const double* dtv = dt.data().data();
    const double* bv = bs.data().data();
    const double* cv = cs.data().data();
    const double* av = a_diag.data().data();
    const double* dv = d_skip.data().data();

    std::vector<double> y(static_cast<size_t>(L * E), 0.0);
    // Saved for the backward recurrence: states after every step plus the
    // per-element discretization factors (avoids recomputing expm1 there).
    auto states = std::make_shared<std::vector<double>>(static_cast<size_t>(L * E * N), 0.0);
    auto abars = std::make_shared<std::vector<double>>(static_cast<size_t>(L * E * N), 0.0);
    auto phis = std::make_shared<std::vector<double>>(static_cast<size_t>(L * E * N), 0.0);
    double* hs = states->data();
    double* ab = abars->data();
    double* ph = phis->data();

    std::vector<double> h(static_cast<size_t>(N));
    for (int64_t c = 0; c < E; ++c) {
        std::fill(h.begin(), h.end(), 0.0);
        const double dcoef = dv[c];
        for (int64_t t = 0; t < L; ++t) {
            const double delta = dtv[t * E + c];
            const double xin = xv[t * E + c];
            const int64_t base = (t * E + c) * N;
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double z = delta * av[n];
                const double em = std::expm1(z);
                const double abar = 1.0 + em;
                const double phz = phi_from_em(z, em);
                const double bbar = delta * phz * bv[t * N + n];
                const double hn = abar * h[static_cast<size_t>(n)] + bbar * xin;
                h[static_cast<size_t>(n)] = hn;
                hs[base + n] = hn;
                ab[base + n] = abar;
                ph[base + n] = phz;
                acc += cv[t * N + n] * hn;
            }
            y[static_cast<size_t>(t * E + c)] = acc + dcoef * xin;
        }
    }

    std::array<Tensor, 6> ins = {x, dt, bs, cs, a_diag, d_skip};
    return ops::detail::finish_op(
        "selective_scan", std::span<const Tensor>(ins.data(), ins.size()), {L, E}, std::move(y),
        [x, dt, bs, cs, a_diag, d_skip, states, abars, phis, L, E, N](
            const double* dy, const std::vector<double*>& dx) {
            const double* xv = x.data().data();
            const double* dtv = dt.data().data();
            const double* bv = bs.data().data();
            const double* cv = cs.data().data();
            const double* av = a_diag.data().data();
            const double* dv = d_skip.data().data();
            const double* hs = states->data();
            const double* ab = abars->data();
            const double* ph = phis->data();

            std::vector<double> gh(static_cast<size_t>(N));
            for (int64_t c = 0; c < E; ++c) {
                std::fill(gh.begin(), gh.end(), 0.0);
                for (int64_t t = L - 1; t >= 0; --t) {
                    const double gy = dy[t * E + c];
                    const double delta = dtv[t * E + c];
                    const double xin = xv[t * E + c];
                    const int64_t base = (t * E + c) * N;
                    if (dx[5]) dx[5][c] += gy * xin;
                    double gx = gy * dv[c];
                    double gdelta = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const double ht = hs[base + n];
                        if (dx[3]) dx[3][t * N + n] += gy * ht;
                        double ghn = gh[static_cast<size_t>(n)] + gy * cv[t * N + n];

                        const double z = delta * av[n];
                        const double ez = ab[base + n];          // exp(z)
                        const double phz = ph[base + n];
                        const double bcoef = bv[t * N + n];
                        const double bbar = delta * phz * bcoef;
                        const double hprev = (t == 0) ? 0.0 : hs[base - E * N + n];

                        const double d_abar = ghn * hprev;
                        const double d_bbar = ghn * xin;
                        gx += ghn * bbar;
                        if (dx[2]) dx[2][t * N + n] += d_bbar * delta * phz;
                        gdelta += d_abar * av[n] * ez + d_bbar * bcoef * ez;
                        if (dx[4]) {
                            dx[4][n] += d_abar * delta * ez +
                                        d_bbar * bcoef * delta * delta *
                                            phi_prime_from(z, ez, ez - 1.0);
                        }
                        gh[static_cast<size_t>(n)] = ghn * ez;  // flows into h_{t-1}
                    }
                    if (dx[1]) dx[1][t * E + c] += gdelta;
                    if (dx[0]) dx[0][t * E + c] += gx;
                }
            }
        });
}

Tensor selective_scan(const SelectiveScanParams& p, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != p.feature_dim()) {
        throw DimensionError("selective_scan input must be [L x " + std::to_string(p.feature_dim()) +
                             "], got " + shape_str(x.shape()));
    }
    using namespace ops;
    Tensor dt = softplus(add_rowvec(matmul(x, transpose(p.w_dt)), p.b_dt));
    Tensor bseq = add_rowvec(matmul(x, transpose(p.w_b)), p.b_b);
    Tensor cseq = add_rowvec(matmul(x, transpose(p.w_c)), p.b_c);
    Tensor a = neg(softplus(p.a_log));
    return selective_scan_core(x, dt, bseq, cseq, a, p.d_skip);
}

}  // namespace matir::ssm
