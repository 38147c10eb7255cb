#include "matir/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace matir {

namespace {

thread_local Tape* g_active_tape = nullptr;

#ifdef NDEBUG
std::atomic<bool> g_debug_checks{false};
#else
std::atomic<bool> g_debug_checks{true};
#endif

void check_finite(const char* op, const std::vector<double>& v) {
    if (!g_debug_checks.load(std::memory_order_relaxed)) return;
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw ContractError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

bool set_debug_checks(bool enabled) { return g_debug_checks.exchange(enabled); }
bool debug_checks_enabled() { return g_debug_checks.load(); }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

static void validate_shape(const Shape& shape) {
    for (int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

Tensor Tensor::zeros(Shape shape) {
    validate_shape(shape);
    auto im = std::make_shared<Impl>();
    im->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    im->shape = std::move(shape);
    return Tensor(std::move(im));
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.im_->values.begin(), t.im_->values.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto im = std::make_shared<Impl>();
    im->shape = std::move(shape);
    im->values = std::move(values);
    return Tensor(std::move(im));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.im_->values) v = rng.normal(0.0, stddev);
    return t;
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.im_->values) v = rng.trunc_normal(stddev);
    return t;
}

static void require_defined(const Tensor& t) {
    if (!t.defined()) throw ContractError("operation on a default-constructed tensor");
}

const Shape& Tensor::shape() const {
    require_defined(*this);
    return im_->shape;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data().size()); }

const std::vector<double>& Tensor::data() const {
    require_defined(*this);
    return im_->values;
}

std::vector<double>& Tensor::mutable_data() {
    require_defined(*this);
    Tape* tape = Tape::active();
    if (tape != nullptr && tape->node_of(*this) >= 0) {
        throw ContractError("cannot mutate a tensor registered on the active tape");
    }
    return im_->values;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a one-element tensor, shape is " + shape_str(shape()));
    return data()[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank mismatch");
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t ix : index) {
        if (ix < 0 || ix >= s[i]) throw DimensionError("index out of range");
        flat = flat * s[i] + ix;
        ++i;
    }
    return data()[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const { return defined() && im_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    require_defined(*this);
    im_->requires_grad = v;
    return *this;
}

bool Tensor::has_grad() const { return defined() && !im_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    require_defined(*this);
    if (im_->grad.empty()) throw ContractError("tensor has no gradient; run backward first");
    return im_->grad;
}

void Tensor::zero_grad() {
    require_defined(*this);
    im_->grad.clear();
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

Tape::Tape() {
    if (g_active_tape != nullptr) {
        throw ContractError("a tape is already active on this thread");
    }
    g_active_tape = this;
}

Tape::~Tape() {
    if (g_active_tape == this) g_active_tape = nullptr;
}

int64_t Tape::node_of(const Tensor& t) const {
    if (!t.defined()) return -1;
    auto it = index_.find(t.im_.get());
    return it == index_.end() ? -1 : it->second;
}

int64_t Tape::register_leaf(const Tensor& t) {
    const int64_t existing = node_of(t);
    if (existing >= 0) return existing;
    NodeRec rec;
    rec.tensor = t;
    rec.is_leaf = true;
    rec.needs_grad = t.im_->requires_grad;
    nodes_.push_back(std::move(rec));
    const int64_t id = static_cast<int64_t>(nodes_.size()) - 1;
    index_.emplace(t.im_.get(), id);
    return id;
}

int64_t Tape::register_output(const Tensor& t, bool needs_grad) {
    NodeRec rec;
    rec.tensor = t;
    rec.is_leaf = false;
    rec.needs_grad = needs_grad;
    nodes_.push_back(std::move(rec));
    const int64_t id = static_cast<int64_t>(nodes_.size()) - 1;
    index_.emplace(t.im_.get(), id);
    return id;
}

double* Tape::grad_buffer(int64_t node) {
    NodeRec& rec = nodes_[static_cast<size_t>(node)];
    if (!rec.grad_live) {
        rec.grad.assign(rec.tensor.data().size(), 0.0);
        rec.grad_live = true;
    }
    return rec.grad.data();
}

void Tape::run_backward(const Tensor& root) {
    require_defined(root);
    if (root.numel() != 1) {
        throw ContractError("backward requires a scalar root, shape is " + shape_str(root.shape()));
    }
    const int64_t root_node = node_of(root);
    if (root_node < 0) {
        throw ContractError("backward root was not recorded on this tape");
    }
    if (swept_) throw ContractError("tape backward may run only once");
    swept_ = true;
    // the sweep is terminal: release the recording slot so the thread can
    // open a fresh tape while this one is held for gradient accumulation
    if (g_active_tape == this) g_active_tape = nullptr;
    grad_buffer(root_node)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        const OpRec& op = *it;
        NodeRec& out = nodes_[static_cast<size_t>(op.output)];
        if (!out.grad_live) continue;  // did not influence the root
        std::vector<double*> sinks;
        sinks.reserve(op.inputs.size());
        for (int64_t in : op.inputs) {
            NodeRec& rec = nodes_[static_cast<size_t>(in)];
            sinks.push_back(rec.needs_grad ? grad_buffer(in) : nullptr);
        }
        op.backward(out.grad.data(), sinks);
    }
}

void Tape::accumulate_leaf_grads() {
    for (NodeRec& n : nodes_) {
        if (!n.is_leaf || !n.grad_live || !n.tensor.im_->requires_grad) continue;
        auto& g = n.tensor.im_->grad;
        if (g.empty()) g.assign(n.grad.size(), 0.0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
}

void Tape::backward(const Tensor& root) {
    run_backward(root);
    accumulate_leaf_grads();
}

void backward(const Tensor& root) {
    Tape* t = Tape::active();
    if (t == nullptr) throw ContractError("backward called with no active tape");
    t->backward(root);
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

struct TapeAccess {
    static Tensor finish(const char* name, std::span<const Tensor> inputs, Shape out_shape,
                         std::vector<double> out_values, ops::detail::BackwardFn bw) {
        check_finite(name, out_values);
        Tensor out = Tensor::from(std::move(out_shape), std::move(out_values));
        Tape* tape = g_active_tape;
        if (tape == nullptr) return out;
        bool any = false;
        for (const Tensor& in : inputs) {
            if (in.requires_grad() || tape->node_of(in) >= 0) {
                any = true;
                break;
            }
        }
        if (!any) return out;

        Tape::OpRec op;
        op.name = name;
        bool needs = false;
        for (const Tensor& in : inputs) {
            int64_t id = tape->register_leaf(in);
            needs = needs || tape->nodes_[static_cast<size_t>(id)].needs_grad;
            op.inputs.push_back(id);
        }
        op.output = tape->register_output(out, needs);
        op.backward = std::move(bw);
        tape->ops_.push_back(std::move(op));
        return out;
    }
};

namespace ops {
namespace detail {

Tensor finish_op(const char* name, std::span<const Tensor> inputs, Shape out_shape,
                 std::vector<double> out_values, BackwardFn backward_rule) {
    return TapeAccess::finish(name, inputs, std::move(out_shape), std::move(out_values),
                              std::move(backward_rule));
}

}  // namespace detail

namespace {

Tensor finish(const char* name, std::initializer_list<Tensor> inputs, Shape out_shape,
              std::vector<double> out_values, detail::BackwardFn bw) {
    return detail::finish_op(name, std::span<const Tensor>(inputs.begin(), inputs.size()),
                             std::move(out_shape), std::move(out_values), std::move(bw));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    size_t n = av.size();
    return finish("add", {a, b}, a.shape(), std::move(out),
                  [n](const double* dy, const std::vector<double*>& dx) {
                      for (int k = 0; k < 2; ++k)
                          if (dx[k])
                              for (size_t i = 0; i < n; ++i) dx[k][i] += dy[i];
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    size_t n = av.size();
    return finish("sub", {a, b}, a.shape(), std::move(out),
                  [n](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (size_t i = 0; i < n; ++i) dx[0][i] += dy[i];
                      if (dx[1])
                          for (size_t i = 0; i < n; ++i) dx[1][i] -= dy[i];
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return finish("mul", {a, b}, a.shape(), std::move(out),
                  [a, b](const double* dy, const std::vector<double*>& dx) {
                      const auto& av = a.data();
                      const auto& bv = b.data();
                      if (dx[0])
                          for (size_t i = 0; i < av.size(); ++i) dx[0][i] += dy[i] * bv[i];
                      if (dx[1])
                          for (size_t i = 0; i < av.size(); ++i) dx[1][i] += dy[i] * av[i];
                  });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v += s;
    size_t n = out.size();
    return finish("add_scalar", {a}, a.shape(), std::move(out),
                  [n](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (size_t i = 0; i < n; ++i) dx[0][i] += dy[i];
                  });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v *= s;
    size_t n = out.size();
    return finish("mul_scalar", {a}, a.shape(), std::move(out),
                  [n, s](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (size_t i = 0; i < n; ++i) dx[0][i] += dy[i] * s;
                  });
}

Tensor abs(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::fabs(v);
    return finish("abs", {a}, a.shape(), std::move(out),
                  [a](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      const auto& av = a.data();
                      for (size_t i = 0; i < av.size(); ++i) {
                          dx[0][i] += dy[i] * (av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0));
                      }
                  });
}

Tensor sin(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::sin(v);
    return finish("sin", {a}, a.shape(), std::move(out),
                  [a](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      const auto& av = a.data();
                      for (size_t i = 0; i < av.size(); ++i) dx[0][i] += dy[i] * std::cos(av[i]);
                  });
}

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::exp(v);
    std::vector<double> saved = out;
    return finish("exp", {a}, a.shape(), std::move(out),
                  [saved = std::move(saved)](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (size_t i = 0; i < saved.size(); ++i) dx[0][i] += dy[i] * saved[i];
                  });
}

static double sigmoid_val(double x) {
    if (x >= 0.0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = sigmoid_val(v);
    std::vector<double> saved = out;
    return finish("sigmoid", {a}, a.shape(), std::move(out),
                  [saved = std::move(saved)](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (size_t i = 0; i < saved.size(); ++i) {
                          dx[0][i] += dy[i] * saved[i] * (1.0 - saved[i]);
                      }
                  });
}

Tensor silu(const Tensor& a) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * sigmoid_val(av[i]);
    return finish("silu", {a}, a.shape(), std::move(out),
                  [a](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      const auto& av = a.data();
                      for (size_t i = 0; i < av.size(); ++i) {
                          const double s = sigmoid_val(av[i]);
                          dx[0][i] += dy[i] * (s * (1.0 + av[i] * (1.0 - s)));
                      }
                  });
}

static double softplus_val(double x) {
    // max(x,0) + log1p(exp(-|x|)) avoids overflow in either direction
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

Tensor softplus(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = softplus_val(v);
    return finish("softplus", {a}, a.shape(), std::move(out),
                  [a](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      const auto& av = a.data();
                      for (size_t i = 0; i < av.size(); ++i) {
                          dx[0][i] += dy[i] * sigmoid_val(av[i]);
                      }
                  });
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    std::vector<double> out(a.data());
    size_t n = out.size();
    return finish("reshape", {a}, std::move(shape), std::move(out),
                  [n](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (size_t i = 0; i < n; ++i) dx[0][i] += dy[i];
                  });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects rank-2, got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    const auto& av = a.data();
    std::vector<double> out(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = av[static_cast<size_t>(i * c + j)];
    return finish("transpose", {a}, {c, r}, std::move(out),
                  [r, c](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (int64_t i = 0; i < r; ++i)
                          for (int64_t j = 0; j < c; ++j)
                              dx[0][i * c + j] += dy[j * r + i];
                  });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    const double* av = a.data().data();
    const double* bv = b.data().data();
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv + p * n;
            double* orow = out.data() + i * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return finish("matmul", {a, b}, {m, n}, std::move(out),
                  [a, b, m, k, n](const double* dy, const std::vector<double*>& dx) {
                      const double* av = a.data().data();
                      const double* bv = b.data().data();
                      if (dx[0]) {  // dA = dY * B^T
                          for (int64_t i = 0; i < m; ++i)
                              for (int64_t p = 0; p < k; ++p) {
                                  double acc = 0.0;
                                  const double* dyrow = dy + i * n;
                                  const double* brow = bv + p * n;
                                  for (int64_t j = 0; j < n; ++j) acc += dyrow[j] * brow[j];
                                  dx[0][i * k + p] += acc;
                              }
                      }
                      if (dx[1]) {  // dB = A^T * dY
                          for (int64_t p = 0; p < k; ++p)
                              for (int64_t i = 0; i < m; ++i) {
                                  const double aip = av[i * k + p];
                                  const double* dyrow = dy + i * n;
                                  double* drow = dx[1] + p * n;
                                  for (int64_t j = 0; j < n; ++j) drow[j] += aip * dyrow[j];
                              }
                      }
                  });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;  // sequential, index-ascending
    size_t n = a.data().size();
    return finish("sum", {a}, {1}, {acc},
                  [n](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (size_t i = 0; i < n; ++i) dx[0][i] += dy[0];
                  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Decomposes a shape around `axis` into outer/len/inner strides.
static void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
    }
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    len = s[static_cast<size_t>(axis)];
    inner = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

Tensor sum_axis(const Tensor& a, int axis) {
    int64_t outer, len, inner;
    axis_split(a.shape(), axis, outer, len, inner);
    Shape oshape;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) oshape.push_back(a.dim(i));
    if (oshape.empty()) oshape.push_back(1);
    const double* av = a.data().data();
    std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t l = 0; l < len; ++l) {
            const double* src = av + (o * len + l) * inner;
            double* dst = out.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return finish("sum_axis", {a}, std::move(oshape), std::move(out),
                  [outer, len, inner](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (int64_t o = 0; o < outer; ++o)
                          for (int64_t l = 0; l < len; ++l) {
                              double* dst = dx[0] + (o * len + l) * inner;
                              const double* src = dy + o * inner;
                              for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                          }
                  });
}

Tensor softmax(const Tensor& a, int axis) {
    int64_t outer, len, inner;
    axis_split(a.shape(), axis, outer, len, inner);
    const double* av = a.data().data();
    std::vector<double> out(a.data().size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * len * inner + i;
            double mx = av[base];
            for (int64_t l = 1; l < len; ++l) mx = std::max(mx, av[base + l * inner]);
            double denom = 0.0;
            for (int64_t l = 0; l < len; ++l) {
                const double e = std::exp(av[base + l * inner] - mx);
                out[static_cast<size_t>(base + l * inner)] = e;
                denom += e;
            }
            for (int64_t l = 0; l < len; ++l) out[static_cast<size_t>(base + l * inner)] /= denom;
        }
    }
    std::vector<double> saved = out;
    return finish("softmax", {a}, a.shape(), std::move(out),
                  [saved = std::move(saved), outer, len, inner](const double* dy,
                                                                const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      // ds = (dy - <dy, y>) * y per slice
                      for (int64_t o = 0; o < outer; ++o)
                          for (int64_t i = 0; i < inner; ++i) {
                              const int64_t base = o * len * inner + i;
                              double dot = 0.0;
                              for (int64_t l = 0; l < len; ++l)
                                  dot += dy[base + l * inner] * saved[static_cast<size_t>(base + l * inner)];
                              for (int64_t l = 0; l < len; ++l) {
                                  const double y = saved[static_cast<size_t>(base + l * inner)];
                                  dx[0][base + l * inner] += (dy[base + l * inner] - dot) * y;
                              }
                          }
                  });
}

// ---- row/column helpers -----------------------------------------------------

static void require_rank2(const char* op, const Tensor& x) {
    if (x.rank() != 2) throw DimensionError(std::string(op) + " expects rank-2, got " + shape_str(x.shape()));
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    require_rank2("add_rowvec", x);
    const int64_t m = x.dim(0), n = x.dim(1);
    if (b.numel() != n) {
        throw DimensionError("add_rowvec: vector " + shape_str(b.shape()) + " does not match row width " +
                             std::to_string(n));
    }
    const double* xv = x.data().data();
    const double* bv = b.data().data();
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(i * n + j)] = xv[i * n + j] + bv[j];
    return finish("add_rowvec", {x, b}, x.shape(), std::move(out),
                  [m, n](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (int64_t i = 0; i < m * n; ++i) dx[0][i] += dy[i];
                      if (dx[1])
                          for (int64_t i = 0; i < m; ++i)
                              for (int64_t j = 0; j < n; ++j) dx[1][j] += dy[i * n + j];
                  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    require_rank2("scale_rows", x);
    const int64_t m = x.dim(0), n = x.dim(1);
    if (s.numel() != m) {
        throw DimensionError("scale_rows: scale " + shape_str(s.shape()) + " does not match row count " +
                             std::to_string(m));
    }
    const double* xv = x.data().data();
    const double* sv = s.data().data();
    std::vector<double> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(i * n + j)] = xv[i * n + j] * sv[i];
    return finish("scale_rows", {x, s}, x.shape(), std::move(out),
                  [x, s, m, n](const double* dy, const std::vector<double*>& dx) {
                      const double* xv = x.data().data();
                      const double* sv = s.data().data();
                      if (dx[0])
                          for (int64_t i = 0; i < m; ++i)
                              for (int64_t j = 0; j < n; ++j) dx[0][i * n + j] += dy[i * n + j] * sv[i];
                      if (dx[1])
                          for (int64_t i = 0; i < m; ++i) {
                              double acc = 0.0;
                              for (int64_t j = 0; j < n; ++j) acc += dy[i * n + j] * xv[i * n + j];
                              dx[1][i] += acc;
                          }
                  });
}

Tensor row_mean(const Tensor& x) {
    require_rank2("row_mean", x);
    const int64_t m = x.dim(0), n = x.dim(1);
    const double* xv = x.data().data();
    std::vector<double> out(static_cast<size_t>(m), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) acc += xv[i * n + j];
        out[static_cast<size_t>(i)] = acc / static_cast<double>(n);
    }
    return finish("row_mean", {x}, {m, 1}, std::move(out),
                  [m, n](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      const double inv = 1.0 / static_cast<double>(n);
                      for (int64_t i = 0; i < m; ++i)
                          for (int64_t j = 0; j < n; ++j) dx[0][i * n + j] += dy[i] * inv;
                  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& index) {
    require_rank2("gather_rows", x);
    const int64_t m = x.dim(0), n = x.dim(1);
    for (int64_t ix : index) {
        if (ix < 0 || ix >= m) throw DimensionError("gather_rows: index " + std::to_string(ix) + " out of range");
    }
    const double* xv = x.data().data();
    const int64_t rows = static_cast<int64_t>(index.size());
    std::vector<double> out(static_cast<size_t>(rows * n));
    for (int64_t i = 0; i < rows; ++i) {
        std::memcpy(out.data() + i * n, xv + index[static_cast<size_t>(i)] * n,
                    static_cast<size_t>(n) * sizeof(double));
    }
    return finish("gather_rows", {x}, {rows, n}, std::move(out),
                  [index, rows, n](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (int64_t i = 0; i < rows; ++i) {
                          double* dst = dx[0] + index[static_cast<size_t>(i)] * n;
                          const double* src = dy + i * n;
                          for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
                      }
                  });
}

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end) {
    require_rank2("slice_cols", x);
    const int64_t m = x.dim(0), n = x.dim(1);
    if (begin < 0 || end > n || begin >= end) throw DimensionError("slice_cols: bad range");
    const int64_t w = end - begin;
    const double* xv = x.data().data();
    std::vector<double> out(static_cast<size_t>(m * w));
    for (int64_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * w, xv + i * n + begin, static_cast<size_t>(w) * sizeof(double));
    return finish("slice_cols", {x}, {m, w}, std::move(out),
                  [m, n, w, begin](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (int64_t i = 0; i < m; ++i)
                          for (int64_t j = 0; j < w; ++j) dx[0][i * n + begin + j] += dy[i * w + j];
                  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const int64_t m = parts[0].dim(0);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require_rank2("concat_cols", p);
        if (p.dim(0) != m) throw DimensionError("concat_cols: row count mismatch");
        total += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(m * total));
    std::vector<int64_t> offs;
    int64_t off = 0;
    for (const Tensor& p : parts) {
        offs.push_back(off);
        const int64_t w = p.dim(1);
        const double* pv = p.data().data();
        for (int64_t i = 0; i < m; ++i)
            std::memcpy(out.data() + i * total + off, pv + i * w, static_cast<size_t>(w) * sizeof(double));
        off += w;
    }
    std::vector<int64_t> widths;
    for (const Tensor& p : parts) widths.push_back(p.dim(1));
    return ops::detail::finish_op(
        "concat_cols", std::span<const Tensor>(parts.data(), parts.size()), {m, total}, std::move(out),
        [m, total, offs, widths](const double* dy, const std::vector<double*>& dx) {
            for (size_t k = 0; k < widths.size(); ++k) {
                if (!dx[k]) continue;
                const int64_t w = widths[k], o = offs[k];
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j) dx[k][i * w + j] += dy[i * total + o + j];
            }
        });
}

// ---- convolutions -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int64_t padding) {
    if (x.rank() != 3) throw DimensionError("conv2d input must be [C x H x W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw DimensionError("conv2d kernel must be [Co x Ci x k x k], got " + shape_str(w.shape()));
    const int64_t ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int64_t co = w.dim(0), ci2 = w.dim(1), k = w.dim(2), k2 = w.dim(3);
    if (ci != ci2) {
        throw DimensionError("conv2d: input channels " + std::to_string(ci) + " vs kernel channels " +
                             std::to_string(ci2));
    }
    if (k != k2 || k % 2 == 0) throw ContractError("conv2d kernel must be square with odd size");
    const int64_t oh = h + 2 * padding - k + 1, ow = ww + 2 * padding - k + 1;
    if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: output would be empty");

    const double* xv = x.data().data();
    const double* wv = w.data().data();
    std::vector<double> out(static_cast<size_t>(co * oh * ow), 0.0);
    for (int64_t oc = 0; oc < co; ++oc)
        for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t dy0 = 0; dy0 < k; ++dy0)
                for (int64_t dx0 = 0; dx0 < k; ++dx0) {
                    const double wcoef = wv[((oc * ci + ic) * k + dy0) * k + dx0];
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        const int64_t iy = oy + dy0 - padding;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            const int64_t ix = ox + dx0 - padding;
                            if (ix < 0 || ix >= ww) continue;
                            out[static_cast<size_t>((oc * oh + oy) * ow + ox)] +=
                                wcoef * xv[(ic * h + iy) * ww + ix];
                        }
                    }
                }
    return finish("conv2d", {x, w}, {co, oh, ow}, std::move(out),
                  [x, w, padding, ci, h, ww, co, k, oh, ow](const double* dyv,
                                                            const std::vector<double*>& dx) {
                      const double* xv = x.data().data();
                      const double* wv = w.data().data();
                      for (int64_t oc = 0; oc < co; ++oc)
                          for (int64_t ic = 0; ic < ci; ++ic)
                              for (int64_t dy0 = 0; dy0 < k; ++dy0)
                                  for (int64_t dx0 = 0; dx0 < k; ++dx0) {
                                      const int64_t widx = ((oc * ci + ic) * k + dy0) * k + dx0;
                                      const double wcoef = wv[widx];
                                      double wacc = 0.0;
                                      for (int64_t oy = 0; oy < oh; ++oy) {
                                          const int64_t iy = oy + dy0 - padding;
                                          if (iy < 0 || iy >= h) continue;
                                          for (int64_t ox = 0; ox < ow; ++ox) {
                                              const int64_t ix = ox + dx0 - padding;
                                              if (ix < 0 || ix >= ww) continue;
                                              const double g = dyv[(oc * oh + oy) * ow + ox];
                                              if (dx[0]) dx[0][(ic * h + iy) * ww + ix] += g * wcoef;
                                              wacc += g * xv[(ic * h + iy) * ww + ix];
                                          }
                                      }
                                      if (dx[1]) dx[1][widx] += wacc;
                                  }
                  });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, int64_t padding) {
    if (x.rank() != 3) throw DimensionError("depthwise_conv2d input must be [C x H x W]");
    if (w.rank() != 3 || w.dim(0) != x.dim(0)) {
        throw DimensionError("depthwise_conv2d kernel must be [C x k x k] with matching channels");
    }
    const int64_t c = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int64_t k = w.dim(1);
    if (k != w.dim(2) || k % 2 == 0) throw ContractError("depthwise kernel must be square with odd size");
    const int64_t oh = h + 2 * padding - k + 1, ow = ww + 2 * padding - k + 1;
    if (oh <= 0 || ow <= 0) throw DimensionError("depthwise_conv2d: output would be empty");

    const double* xv = x.data().data();
    const double* wv = w.data().data();
    std::vector<double> out(static_cast<size_t>(c * oh * ow), 0.0);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t dy0 = 0; dy0 < k; ++dy0)
            for (int64_t dx0 = 0; dx0 < k; ++dx0) {
                const double wcoef = wv[(ch * k + dy0) * k + dx0];
                for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy + dy0 - padding;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const int64_t ix = ox + dx0 - padding;
                        if (ix < 0 || ix >= ww) continue;
                        out[static_cast<size_t>((ch * oh + oy) * ow + ox)] += wcoef * xv[(ch * h + iy) * ww + ix];
                    }
                }
            }
    return finish("depthwise_conv2d", {x, w}, {c, oh, ow}, std::move(out),
                  [x, w, padding, c, h, ww, k, oh, ow](const double* dyv,
                                                       const std::vector<double*>& dx) {
                      const double* xv = x.data().data();
                      const double* wv = w.data().data();
                      for (int64_t ch = 0; ch < c; ++ch)
                          for (int64_t dy0 = 0; dy0 < k; ++dy0)
                              for (int64_t dx0 = 0; dx0 < k; ++dx0) {
                                  const int64_t widx = (ch * k + dy0) * k + dx0;
                                  const double wcoef = wv[widx];
                                  double wacc = 0.0;
                                  for (int64_t oy = 0; oy < oh; ++oy) {
                                      const int64_t iy = oy + dy0 - padding;
                                      if (iy < 0 || iy >= h) continue;
                                      for (int64_t ox = 0; ox < ow; ++ox) {
                                          const int64_t ix = ox + dx0 - padding;
                                          if (ix < 0 || ix >= ww) continue;
                                          const double g = dyv[(ch * oh + oy) * ow + ox];
                                          if (dx[0]) dx[0][(ch * h + iy) * ww + ix] += g * wcoef;
                                          wacc += g * xv[(ch * h + iy) * ww + ix];
                                      }
                                  }
                                  if (dx[1]) dx[1][widx] += wacc;
                              }
                  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3) throw DimensionError("add_channel_bias input must be [C x H x W]");
    const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (b.numel() != c) throw DimensionError("add_channel_bias: bias length must equal channel count");
    const double* xv = x.data().data();
    const double* bv = b.data().data();
    std::vector<double> out(x.data().size());
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i) out[static_cast<size_t>(ch * hw + i)] = xv[ch * hw + i] + bv[ch];
    return finish("add_channel_bias", {x, b}, x.shape(), std::move(out),
                  [c, hw](const double* dy, const std::vector<double*>& dx) {
                      if (dx[0])
                          for (int64_t i = 0; i < c * hw; ++i) dx[0][i] += dy[i];
                      if (dx[1])
                          for (int64_t ch = 0; ch < c; ++ch) {
                              double acc = 0.0;
                              for (int64_t i = 0; i < hw; ++i) acc += dy[ch * hw + i];
                              dx[1][ch] += acc;
                          }
                  });
}

// ---- layer norm ---------------------------------------------------------------

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank2("layer_norm_rows", x);
    const int64_t m = x.dim(0), c = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c) {
        throw DimensionError("layer_norm_rows: gamma/beta must have length " + std::to_string(c));
    }
    const double* xv = x.data().data();
    const double* gv = gamma.data().data();
    const double* bv = beta.data().data();
    std::vector<double> out(static_cast<size_t>(m * c));
    std::vector<double> xhat(static_cast<size_t>(m * c));
    std::vector<double> inv_std(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += xv[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double d = xv[i * c + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < c; ++j) {
            const double xh = (xv[i * c + j] - mu) * is;
            xhat[static_cast<size_t>(i * c + j)] = xh;
            out[static_cast<size_t>(i * c + j)] = xh * gv[j] + bv[j];
        }
    }
    return finish("layer_norm_rows", {x, gamma, beta}, x.shape(), std::move(out),
                  [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                   c](const double* dy, const std::vector<double*>& dx) {
                      const double* gv = gamma.data().data();
                      for (int64_t i = 0; i < m; ++i) {
                          const double* dyr = dy + i * c;
                          const double* xhr = xhat.data() + i * c;
                          if (dx[0]) {
                              double s1 = 0.0, s2 = 0.0;  // mean(g*dy), mean(g*dy*xhat)
                              for (int64_t j = 0; j < c; ++j) {
                                  const double gd = gv[j] * dyr[j];
                                  s1 += gd;
                                  s2 += gd * xhr[j];
                              }
                              s1 /= static_cast<double>(c);
                              s2 /= static_cast<double>(c);
                              const double is = inv_std[static_cast<size_t>(i)];
                              for (int64_t j = 0; j < c; ++j) {
                                  dx[0][i * c + j] += (gv[j] * dyr[j] - s1 - xhr[j] * s2) * is;
                              }
                          }
                          if (dx[1])
                              for (int64_t j = 0; j < c; ++j) dx[1][j] += dyr[j] * xhr[j];
                          if (dx[2])
                              for (int64_t j = 0; j < c; ++j) dx[2][j] += dyr[j];
                      }
                  });
}

// ---- pixel shuffle / bicubic upsample ------------------------------------------

Tensor pixel_shuffle(const Tensor& x, int64_t s) {
    if (x.rank() != 3) throw DimensionError("pixel_shuffle input must be [C x H x W]");
    const int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (s < 1 || cin % (s * s) != 0) {
        throw DimensionError("pixel_shuffle: channel count " + std::to_string(cin) +
                             " not divisible by s^2 = " + std::to_string(s * s));
    }
    const int64_t c = cin / (s * s);
    const int64_t oh = h * s, ow = w * s;
    const double* xv = x.data().data();
    std::vector<double> out(static_cast<size_t>(c * oh * ow));
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                const int64_t icn = ch * s * s + (oy % s) * s + (ox % s);
                out[static_cast<size_t>((ch * oh + oy) * ow + ox)] =
                    xv[(icn * h + oy / s) * w + ox / s];
            }
    return finish("pixel_shuffle", {x}, {c, oh, ow}, std::move(out),
                  [c, h, w, s, oh, ow](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      for (int64_t ch = 0; ch < c; ++ch)
                          for (int64_t oy = 0; oy < oh; ++oy)
                              for (int64_t ox = 0; ox < ow; ++ox) {
                                  const int64_t icn = ch * s * s + (oy % s) * s + (ox % s);
                                  dx[0][(icn * h + oy / s) * w + ox / s] +=
                                      dy[(ch * oh + oy) * ow + ox];
                              }
                  });
}

namespace {

// Catmull-Rom family cubic kernel, a = -0.5.
double cubic_kernel(double t) {
    constexpr double a = -0.5;
    t = std::fabs(t);
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
}

struct TapSet {
    std::vector<int64_t> idx;   // flattened [out][4] source indices (clamped)
    std::vector<double> coef;   // matching weights, normalized per output
};

// 1-D upsample taps by integer factor s with clamp-to-edge and
// per-output weight normalization.
TapSet upsample_taps(int64_t in_len, int64_t s) {
    TapSet taps;
    const int64_t out_len = in_len * s;
    taps.idx.resize(static_cast<size_t>(out_len * 4));
    taps.coef.resize(static_cast<size_t>(out_len * 4));
    const double scale = 1.0 / static_cast<double>(s);
    for (int64_t o = 0; o < out_len; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const int64_t base = static_cast<int64_t>(std::floor(src)) - 1;
        double wsum = 0.0;
        for (int64_t t = 0; t < 4; ++t) {
            const double wv = cubic_kernel(src - static_cast<double>(base + t));
            taps.coef[static_cast<size_t>(o * 4 + t)] = wv;
            wsum += wv;
        }
        for (int64_t t = 0; t < 4; ++t) {
            taps.coef[static_cast<size_t>(o * 4 + t)] /= wsum;
            taps.idx[static_cast<size_t>(o * 4 + t)] = std::clamp<int64_t>(base + t, 0, in_len - 1);
        }
    }
    return taps;
}

}  // namespace

Tensor upsample_bicubic(const Tensor& x, int64_t s) {
    if (x.rank() != 3) throw DimensionError("upsample_bicubic input must be [C x H x W]");
    if (s < 1) throw ContractError("upsample factor must be >= 1");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t oh = h * s, ow = w * s;
    const TapSet ty = upsample_taps(h, s);
    const TapSet tx = upsample_taps(w, s);
    const double* xv = x.data().data();

    // horizontal pass, then vertical
    std::vector<double> tmp(static_cast<size_t>(c * h * ow), 0.0);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int64_t t = 0; t < 4; ++t) {
                    acc += tx.coef[static_cast<size_t>(ox * 4 + t)] *
                           xv[(ch * h + y) * w + tx.idx[static_cast<size_t>(ox * 4 + t)]];
                }
                tmp[static_cast<size_t>((ch * h + y) * ow + ox)] = acc;
            }
    std::vector<double> out(static_cast<size_t>(c * oh * ow), 0.0);
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int64_t t = 0; t < 4; ++t) {
                    acc += ty.coef[static_cast<size_t>(oy * 4 + t)] *
                           tmp[static_cast<size_t>((ch * h + ty.idx[static_cast<size_t>(oy * 4 + t)]) * ow + ox)];
                }
                out[static_cast<size_t>((ch * oh + oy) * ow + ox)] = acc;
            }
    return finish("upsample_bicubic", {x}, {c, oh, ow}, std::move(out),
                  [ty, tx, c, h, w, oh, ow](const double* dy, const std::vector<double*>& dx) {
                      if (!dx[0]) return;
                      std::vector<double> dtmp(static_cast<size_t>(c * h * ow), 0.0);
                      for (int64_t ch = 0; ch < c; ++ch)
                          for (int64_t oy = 0; oy < oh; ++oy)
                              for (int64_t ox = 0; ox < ow; ++ox) {
                                  const double g = dy[(ch * oh + oy) * ow + ox];
                                  for (int64_t t = 0; t < 4; ++t) {
                                      dtmp[static_cast<size_t>(
                                          (ch * h + ty.idx[static_cast<size_t>(oy * 4 + t)]) * ow + ox)] +=
                                          g * ty.coef[static_cast<size_t>(oy * 4 + t)];
                                  }
                              }
                      for (int64_t ch = 0; ch < c; ++ch)
                          for (int64_t y = 0; y < h; ++y)
                              for (int64_t ox = 0; ox < ow; ++ox) {
                                  const double g = dtmp[static_cast<size_t>((ch * h + y) * ow + ox)];
                                  for (int64_t t = 0; t < 4; ++t) {
                                      dx[0][(ch * h + y) * w + tx.idx[static_cast<size_t>(ox * 4 + t)]] +=
                                          g * tx.coef[static_cast<size_t>(ox * 4 + t)];
                                  }
                              }
                  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                       double eps) {
    if (eps < 1e-7 || eps > 1e-3) {
        throw ContractError("check_gradients eps must lie in [1e-7, 1e-3]");
    }
    // Tape gradient at x.
    Tensor probe = Tensor::from(x.shape(), x.data());
    probe.set_requires_grad(true);
    std::vector<double> g_ad;
    {
        Tape tape;
        Tensor y = f(probe);
        if (y.numel() != 1) throw ContractError("check_gradients requires a scalar-valued function");
        tape.backward(y);
        g_ad = probe.has_grad() ? probe.grad() : std::vector<double>(x.data().size(), 0.0);
    }
    // Central differences (runs with no active tape, so nothing records).
    double max_rel = 0.0;
    std::vector<double> vals = x.data();
    for (size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + eps;
        const double fp = f(Tensor::from(x.shape(), vals)).item();
        vals[i] = orig - eps;
        const double fm = f(Tensor::from(x.shape(), vals)).item();
        vals[i] = orig;
        const double g_fd = (fp - fm) / (2.0 * eps);
        const double denom = std::max({std::fabs(g_ad[i]), std::fabs(g_fd), 1e-12});
        max_rel = std::max(max_rel, std::fabs(g_ad[i] - g_fd) / denom);
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// Tensor file format
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("tensor file truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw FormatError("tensor file truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is) {
    const uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void save_tensor_file(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write("MATR", 4);
    put_u32(os, kTensorFileVersion);
    put_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<uint32_t>(t.shape().size()));
        for (int64_t d : t.shape()) put_u64(os, static_cast<uint64_t>(d));
        for (double v : t.data()) put_f32(os, static_cast<float>(v));
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

std::vector<TensorEntry> load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MATR", 4) != 0) {
        throw FormatError("'" + path + "' is not a tensor file (bad magic)");
    }
    const uint32_t version = get_u32(is);
    if (version != kTensorFileVersion) {
        throw FormatError("unsupported tensor file version " + std::to_string(version));
    }
    const uint32_t count = get_u32(is);
    std::vector<TensorEntry> out;
    out.reserve(count);
    for (uint32_t e = 0; e < count; ++e) {
        TensorEntry entry;
        const uint32_t name_len = get_u32(is);
        entry.name.resize(name_len);
        is.read(entry.name.data(), name_len);
        if (!is) throw FormatError("tensor file truncated");
        const uint32_t rank = get_u32(is);
        int64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            const int64_t d = static_cast<int64_t>(get_u64(is));
            if (d <= 0) throw FormatError("tensor file has non-positive dimension");
            entry.shape.push_back(d);
            numel *= d;
        }
        entry.values.resize(static_cast<size_t>(numel));
        for (int64_t i = 0; i < numel; ++i) entry.values[static_cast<size_t>(i)] = get_f32(is);
        out.push_back(std::move(entry));
    }
    return out;
}

}  // namespace matir
