#pragma once

// Dense double tensors (rank 0..2) with reverse-mode autodiff on an explicit
// gradient tape. Eigen does the arithmetic; the tape records one node per
// operation and replays the recorded pullbacks in reverse on backward().

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "byb/errors.hpp"

namespace byb {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vec = Eigen::ArrayXd;
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

Index shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Live tensor allocation accounting, used by the benchmark harness.
struct TensorRegistry {
    static std::uint64_t live_bytes();
    static std::uint64_t peak_bytes();
    static void reset_peak();
};

struct TensorData;

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor from_array(Shape shape, Vec values, bool requires_grad = false);
    static Tensor from_matrix(const MatRM& m, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const;
    Index rank() const;
    Index size() const;
    Index dim(Index axis) const;
    Index rows() const;  // rank-2 only
    Index cols() const;

    bool requires_grad() const;
    Vec& values();
    const Vec& values() const;
    double operator()(Index i) const;
    double operator()(Index i, Index j) const;
    double item() const;  // size-1 tensors

    CMapM matrix() const;  // rank-2 row-major view
    MapM matrix_mut();

    bool has_grad() const;
    const Vec& grad() const;
    void zero_grad();

    // Value copy with requires_grad=false and no tape linkage.
    Tensor detach() const;
    // Deep value copy (keeps requires_grad unless overridden).
    Tensor clone() const;

    TensorData* node() const { return d_.get(); }
    std::shared_ptr<TensorData> handle() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
    friend struct TensorData;
    friend class GradientTape;
    friend Tensor make_tensor(Shape, Vec, bool);
};

Tensor make_tensor(Shape shape, Vec values, bool requires_grad);

// Per-step gradient tape. Constructing one makes it the active tape (RAII,
// restores the previous one on destruction); backward() consumes it.
class GradientTape {
public:
    GradientTape();
    ~GradientTape();
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    static GradientTape* active();

    // Seeds d(loss)/d(loss)=1 and pulls gradients back through every recorded
    // node. Fills .grad() on all reachable tracked tensors. Single use.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    struct Node {
        const char* op;
        std::vector<std::shared_ptr<TensorData>> inputs;
        std::shared_ptr<TensorData> output;
        std::function<void()> pull;
    };

    void record(Node node);

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
    GradientTape* prev_ = nullptr;
};

// ---------------------------------------------------------------------------
// Operation catalog. All functions are pure w.r.t. their inputs; when a tape
// is active and an input is grad-tracked, a node is recorded.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor elementwise_multiply(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& t, const std::vector<Index>& indices);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, Index axis, double temperature = 1.0);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor mean(const Tensor& x, std::optional<Index> axis = std::nullopt);
Tensor sum(const Tensor& x, std::optional<Index> axis = std::nullopt);
Tensor layer_norm(const Tensor& x);                                          // non-affine
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);  // affine
// softmax((q k^T)/sqrt(d_head) + additive_mask, axis=1) v.  The mask is a
// constant; entries of -inf zero out the corresponding attention weight.
// attn_out, when non-null, receives the post-softmax matrix.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& additive_mask, MatRM* attn_out = nullptr);
Tensor relu(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, Index axis);
Tensor slice(const Tensor& t, Index axis, Index start, Index length);
Tensor transpose(const Tensor& t);
// m [r,c] + v [c] broadcast over rows (bias add).
Tensor broadcast_add(const Tensor& m, const Tensor& v);

// Extensions beyond the dispatch catalog, recorded on the tape like any other
// op (same finite-difference contract).
Tensor reshape(const Tensor& t, Shape shape);
Tensor log_softmax(const Tensor& x, Index axis, double temperature = 1.0);
Tensor l2_normalize_rows(const Tensor& x);
// mean over all entries of softplus(z) - t*z  (= sigmoid cross-entropy).
Tensor binary_ce_with_logits(const Tensor& logits, const Tensor& targets);
Tensor scale(const Tensor& x, double factor);

// ---------------------------------------------------------------------------
// Enum + attrs dispatch surface over the same catalog.
// ---------------------------------------------------------------------------

enum class OpKind {
    add,
    subtract,
    elementwise_multiply,
    matmul,
    gather_rows,
    sigmoid,
    softmax,
    log,
    exp,
    mean,
    sum,
    layer_norm,
    scaled_dot_attention,
    relu,
    concat,
    slice,
    transpose,
    broadcast_add,
};

using AttrValue = std::variant<bool, Index, double, std::vector<Index>>;
using OpAttrs = std::map<std::string, AttrValue>;

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

const char* op_kind_name(OpKind kind);
std::vector<OpKind> op_catalog();

}  // namespace byb
