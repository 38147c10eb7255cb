#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "matir/errors.hpp"
#include "matir/rng.hpp"

namespace matir {

using Shape = std::vector<int64_t>;

class Tape;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense rank-N array of doubles in row-major order. Copies are cheap and
/// share storage; values are immutable once constructed except through the
/// owner-context mutation hooks used by the optimizer. A tensor participates
/// in gradient recording when a Tape is active on the current thread and the
/// tensor (or one of its ancestors) has requires_grad set.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev);

    bool defined() const { return im_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int64_t dim(int i) const { return shape()[static_cast<size_t>(i)]; }
    int64_t numel() const;

    const std::vector<double>& data() const;
    /// Mutable access for parameter updates between forward/backward phases.
    /// Must not be called while the tensor is registered on an active tape.
    std::vector<double>& mutable_data();

    double item() const;  ///< value of a one-element tensor
    double at(std::initializer_list<int64_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    bool same_storage(const Tensor& other) const { return im_ == other.im_; }

private:
    struct Impl {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;  // empty until first accumulation
        bool requires_grad = false;
    };

    std::shared_ptr<Impl> im_;

    explicit Tensor(std::shared_ptr<Impl> im) : im_(std::move(im)) {}

    friend class Tape;
    friend struct TapeAccess;
};

/// Reverse-mode gradient tape. Constructing a Tape activates it on the
/// current thread (exactly one may be active). Registration lives in the
/// tape, not in the tensors, so the same parameter leaves can participate
/// in several tapes concurrently (one per worker thread). Operations
/// executed while a tape is active append nodes in topological order, so
/// the backward sweep is a single reverse pass that visits each node once.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Runs the backward sweep from a scalar root and adds the resulting
    /// gradients into every reachable requires_grad leaf.
    void backward(const Tensor& root);

    /// Split-phase variant for deterministic multi-sample accumulation:
    /// run_backward fills tape-local buffers, accumulate_leaf_grads folds
    /// them into the leaf tensors (callers serialize the fold order).
    void run_backward(const Tensor& root);
    void accumulate_leaf_grads();

    size_t node_count() const { return nodes_.size(); }
    size_t op_count() const { return ops_.size(); }

    /// Node id of a tensor on this tape, or -1 when not registered.
    int64_t node_of(const Tensor& t) const;

    static Tape* active();

private:
    struct NodeRec {
        Tensor tensor;
        bool needs_grad = false;
        bool is_leaf = true;
        std::vector<double> grad;
        bool grad_live = false;
    };
    struct OpRec {
        const char* name;
        std::vector<int64_t> inputs;
        int64_t output;
        std::function<void(const double*, const std::vector<double*>&)> backward;
    };

    std::vector<NodeRec> nodes_;
    std::vector<OpRec> ops_;
    std::unordered_map<const void*, int64_t> index_;  // storage -> node id
    bool swept_ = false;

    int64_t register_leaf(const Tensor& t);
    int64_t register_output(const Tensor& t, bool needs_grad);
    double* grad_buffer(int64_t node);

    friend struct TapeAccess;
};

/// Runs the backward sweep of the tape the root was recorded on.
void backward(const Tensor& root);

/// Enables per-operation finiteness assertions on forward outputs
/// (on by default in debug builds). Returns the previous setting.
bool set_debug_checks(bool enabled);
bool debug_checks_enabled();

namespace ops {

// Elementwise and scalar ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);

// Shape ops (data copied; storage is never aliased between nodes).
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);  ///< drops the reduced axis

/// Softmax along one axis, computed with max subtraction.
Tensor softmax(const Tensor& a, int axis);

// Row/column helpers for [M x N] matrices.
Tensor add_rowvec(const Tensor& x, const Tensor& b);    ///< b[N] added to each row
Tensor scale_rows(const Tensor& x, const Tensor& s);    ///< row m scaled by s[m]
Tensor row_mean(const Tensor& x);                       ///< [M x N] -> [M x 1]
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& index);
Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Convolutions on [C x H x W] maps (cross-correlation, odd kernels).
Tensor conv2d(const Tensor& x, const Tensor& w, int64_t padding);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, int64_t padding);
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

/// Row-wise layer norm on [M x C]: each row is standardized and then
/// scaled/shifted by gamma/beta of length C.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

/// Depth-to-space: [C*s^2 x H x W] -> [C x sH x sW].
Tensor pixel_shuffle(const Tensor& x, int64_t s);

/// Bicubic upsampling of a [C x H x W] map by integer factor s (a = -0.5,
/// clamp-to-edge). Linear in the input, so the backward pass is its adjoint.
Tensor upsample_bicubic(const Tensor& x, int64_t s);

namespace detail {

using BackwardFn = std::function<void(const double*, const std::vector<double*>&)>;

/// Builds an op result: wraps computed values in a tensor and, when a tape
/// is active and some input needs a gradient, records the node and its
/// backward rule. Custom ops in other modules use this entry point.
Tensor finish_op(const char* name, std::span<const Tensor> inputs, Shape out_shape,
                 std::vector<double> out_values, BackwardFn backward_rule);

}  // namespace detail
}  // namespace ops

/// Max relative error between tape gradients and central finite differences
/// of a scalar-valued function at x; eps must lie in [1e-7, 1e-3].
double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                       double eps);

// ---------------------------------------------------------------------------
// Tensor file serialization (shared with model checkpoints): little-endian,
// magic "MATR", u32 version, u32 entry count; per entry u32 name length,
// name bytes, u32 rank, u64 dims, float32 payload.
// ---------------------------------------------------------------------------

struct TensorEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline constexpr uint32_t kTensorFileVersion = 1;

void save_tensor_file(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<TensorEntry> load_tensor_file(const std::string& path);

}  // namespace matir
