#include "byb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace byb {

namespace {

std::uint64_t g_live_bytes = 0;
std::uint64_t g_peak_bytes = 0;

void registry_add(std::uint64_t n) {
    g_live_bytes += n;
    g_peak_bytes = std::max(g_peak_bytes, g_live_bytes);
}
void registry_sub(std::uint64_t n) { g_live_bytes -= n; }

}  // namespace

std::uint64_t TensorRegistry::live_bytes() { return g_live_bytes; }
std::uint64_t TensorRegistry::peak_bytes() { return g_peak_bytes; }
void TensorRegistry::reset_peak() { g_peak_bytes = g_live_bytes; }

Index shape_numel(const Shape& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorData {
    Shape shape;
    Vec values;
    bool requires_grad = false;
    bool tracked = false;
    bool grad_set = false;
    Vec grad;

    TensorData(Shape s, Vec v, bool rg)
        : shape(std::move(s)), values(std::move(v)), requires_grad(rg), tracked(rg) {
        registry_add(static_cast<std::uint64_t>(values.size()) * sizeof(double));
    }
    ~TensorData() {
        registry_sub(static_cast<std::uint64_t>(values.size() + grad.size()) * sizeof(double));
    }
    TensorData(const TensorData&) = delete;
    TensorData& operator=(const TensorData&) = delete;

    void ensure_grad() {
        if (!grad_set) {
            if (grad.size() != values.size()) {
                grad = Vec::Zero(values.size());
                registry_add(static_cast<std::uint64_t>(grad.size()) * sizeof(double));
            } else {
                grad.setZero();
            }
            grad_set = true;
        }
    }
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor make_tensor(Shape shape, Vec values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    return Tensor(std::make_shared<TensorData>(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Vec v = Vec::Zero(shape_numel(shape));
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Vec v = Vec::Constant(shape_numel(shape), value);
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    Vec v(1);
    v[0] = value;
    return make_tensor(Shape{}, std::move(v), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    Vec v = Eigen::Map<const Vec>(data.data(), static_cast<Index>(data.size()));
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from_array(Shape shape, Vec values, bool requires_grad) {
    return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from_matrix(const MatRM& m, bool requires_grad) {
    Vec v = Eigen::Map<const Vec>(m.data(), m.size());
    return make_tensor(Shape{m.rows(), m.cols()}, std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return d_->shape; }
Index Tensor::rank() const { return static_cast<Index>(d_->shape.size()); }
Index Tensor::size() const { return d_->values.size(); }

Index Tensor::dim(Index axis) const {
    if (axis < 0 || axis >= rank()) throw BoundsError("axis out of range");
    return d_->shape[static_cast<std::size_t>(axis)];
}

Index Tensor::rows() const { return dim(0); }
Index Tensor::cols() const { return dim(1); }

bool Tensor::requires_grad() const { return d_->requires_grad; }
Vec& Tensor::values() { return d_->values; }
const Vec& Tensor::values() const { return d_->values; }

double Tensor::operator()(Index i) const { return d_->values[i]; }
double Tensor::operator()(Index i, Index j) const {
    return d_->values[i * d_->shape[1] + j];
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor with " + std::to_string(size()) + " elements");
    return d_->values[0];
}

CMapM Tensor::matrix() const {
    if (rank() != 2) throw ShapeError("matrix view requires rank 2, got " + shape_str(shape()));
    return CMapM(d_->values.data(), d_->shape[0], d_->shape[1]);
}

MapM Tensor::matrix_mut() {
    if (rank() != 2) throw ShapeError("matrix view requires rank 2, got " + shape_str(shape()));
    return MapM(d_->values.data(), d_->shape[0], d_->shape[1]);
}

bool Tensor::has_grad() const { return d_->grad_set; }

const Vec& Tensor::grad() const {
    if (!d_->grad_set) throw StateError("gradient not populated");
    return d_->grad;
}

void Tensor::zero_grad() {
    d_->grad_set = false;
    if (d_->grad.size()) d_->grad.setZero();
}

Tensor Tensor::detach() const { return make_tensor(d_->shape, d_->values, false); }

Tensor Tensor::clone() const { return make_tensor(d_->shape, d_->values, d_->requires_grad); }

// ---------------------------------------------------------------------------
// GradientTape
// ---------------------------------------------------------------------------

namespace {
GradientTape* g_active_tape = nullptr;
}

GradientTape::GradientTape() : prev_(g_active_tape) { g_active_tape = this; }

GradientTape::~GradientTape() { g_active_tape = prev_; }

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::record(Node node) { nodes_.push_back(std::move(node)); }

void GradientTape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward called twice on the same tape");
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    consumed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output->grad_set) continue;  // not reachable from the loss
        it->pull();
    }
}

namespace {

void accum(const std::shared_ptr<TensorData>& t, const Vec& g) {
    if (!t->tracked) return;
    t->ensure_grad();
    t->grad += g;
}

MapM grad_mat(const std::shared_ptr<TensorData>& t, Index r, Index c) {
    t->ensure_grad();
    return MapM(t->grad.data(), r, c);
}

CMapM as_mat(const std::shared_ptr<TensorData>& t, Index r, Index c) {
    return CMapM(t->values.data(), r, c);
}

// Records a tape node if recording applies. Call after the output is built.
void record_op(const char* op, std::vector<Tensor> inputs, const Tensor& out,
               std::function<void()> pull) {
    GradientTape* tape = GradientTape::active();
    if (!tape) return;
    bool any_tracked = false;
    for (const auto& in : inputs)
        if (in.node()->tracked) any_tracked = true;
    if (!any_tracked) return;
    out.node()->tracked = true;
    GradientTape::Node node;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.handle());
    node.output = out.handle();
    node.pull = std::move(pull);
    tape->record(std::move(node));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": mismatched shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// Resolves a (possibly rank-1) tensor into a row/col-structured view where the
// softmax-style axis runs along columns of an n x m matrix.
struct AxisView {
    Index groups;  // number of independent lines
    Index len;     // elements per line
    bool by_row;   // true: line = row of the rank-2 layout
};

AxisView axis_view(const Tensor& x, Index axis) {
    if (x.rank() == 1) {
        if (axis != 0) throw BoundsError("axis out of range for rank-1 tensor");
        return {1, x.size(), true};
    }
    if (x.rank() == 2) {
        if (axis == 1) return {x.dim(0), x.dim(1), true};
        if (axis == 0) return {x.dim(1), x.dim(0), false};
        throw BoundsError("axis out of range for rank-2 tensor");
    }
    throw ShapeError("axis ops support rank 1 or 2, got " + shape_str(x.shape()));
}

double line_get(const Vec& v, const AxisView& av, Index g, Index i, Index cols) {
    return av.by_row ? v[g * av.len + i] : v[i * cols + g];
}

void line_add(Vec& v, const AxisView& av, Index g, Index i, Index cols, double val) {
    if (av.by_row)
        v[g * av.len + i] += val;
    else
        v[i * cols + g] += val;
}

}  // namespace

// ---------------------------------------------------------------------------
// Catalog ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = make_tensor(a.shape(), a.values() + b.values(), false);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    record_op("add", {a, b}, out, [ah, bh, oh] {
        accum(ah, oh->grad);
        accum(bh, oh->grad);
    });
    return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
    check_same_shape("subtract", a, b);
    Tensor out = make_tensor(a.shape(), a.values() - b.values(), false);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    record_op("subtract", {a, b}, out, [ah, bh, oh] {
        accum(ah, oh->grad);
        accum(bh, -oh->grad);
    });
    return out;
}

Tensor elementwise_multiply(const Tensor& a, const Tensor& b) {
    check_same_shape("elementwise_multiply", a, b);
    Tensor out = make_tensor(a.shape(), a.values() * b.values(), false);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    record_op("elementwise_multiply", {a, b}, out, [ah, bh, oh] {
        accum(ah, oh->grad * bh->values);
        accum(bh, oh->grad * ah->values);
    });
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul requires rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const Index m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Vec v(m * n);
    MapM(v.data(), m, n).noalias() = a.matrix() * b.matrix();
    Tensor out = make_tensor(Shape{m, n}, std::move(v), false);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    record_op("matmul", {a, b}, out, [ah, bh, oh, m, k, n] {
        CMapM g(oh->grad.data(), m, n);
        if (ah->tracked) grad_mat(ah, m, k).noalias() += g * as_mat(bh, k, n).transpose();
        if (bh->tracked) grad_mat(bh, k, n).noalias() += as_mat(ah, m, k).transpose() * g;
    });
    return out;
}

Tensor gather_rows(const Tensor& t, const std::vector<Index>& indices) {
    if (t.rank() != 2) throw ShapeError("gather_rows requires a rank-2 tensor");
    const Index rows = t.dim(0), cols = t.dim(1);
    for (Index idx : indices)
        if (idx < 0 || idx >= rows)
            throw BoundsError("gather index " + std::to_string(idx) + " out of range [0," +
                              std::to_string(rows) + ")");
    const Index n = static_cast<Index>(indices.size());
    Vec v(n * cols);
    MapM outm(v.data(), n, cols);
    CMapM src = t.matrix();
    for (Index i = 0; i < n; ++i) outm.row(i) = src.row(indices[static_cast<std::size_t>(i)]);
    Tensor out = make_tensor(Shape{n, cols}, std::move(v), false);
    auto th = t.handle(), oh = out.handle();
    record_op("gather_rows", {t}, out, [th, oh, indices, rows, cols, n] {
        if (!th->tracked) return;
        th->ensure_grad();
        MapM gt(th->grad.data(), rows, cols);
        CMapM g(oh->grad.data(), n, cols);
        for (Index i = 0; i < n; ++i) gt.row(indices[static_cast<std::size_t>(i)]) += g.row(i);
    });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Vec v = x.values().unaryExpr([](double t) {
        return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    });
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("sigmoid", {x}, out, [xh, oh] {
        accum(xh, oh->grad * oh->values * (1.0 - oh->values));
    });
    return out;
}

Tensor softmax(const Tensor& x, Index axis, double temperature) {
    if (temperature <= 0.0) throw ContractError("softmax temperature must be positive");
    const AxisView av = axis_view(x, axis);
    const Index cols2d = x.rank() == 2 ? x.dim(1) : x.size();
    Vec v(x.size());
    for (Index g = 0; g < av.groups; ++g) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Index i = 0; i < av.len; ++i)
            mx = std::max(mx, line_get(x.values(), av, g, i, cols2d) / temperature);
        double z = 0.0;
        for (Index i = 0; i < av.len; ++i) {
            const double e = std::exp(line_get(x.values(), av, g, i, cols2d) / temperature - mx);
            if (av.by_row)
                v[g * av.len + i] = e;
            else
                v[i * cols2d + g] = e;
            z += e;
        }
        for (Index i = 0; i < av.len; ++i) {
            if (av.by_row)
                v[g * av.len + i] /= z;
            else
                v[i * cols2d + g] /= z;
        }
    }
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("softmax", {x}, out, [xh, oh, av, cols2d, temperature] {
        if (!xh->tracked) return;
        xh->ensure_grad();
        for (Index g = 0; g < av.groups; ++g) {
            double dot = 0.0;
            for (Index i = 0; i < av.len; ++i)
                dot += line_get(oh->grad, av, g, i, cols2d) * line_get(oh->values, av, g, i, cols2d);
            for (Index i = 0; i < av.len; ++i) {
                const double y = line_get(oh->values, av, g, i, cols2d);
                const double gy = line_get(oh->grad, av, g, i, cols2d);
                line_add(xh->grad, av, g, i, cols2d, y * (gy - dot) / temperature);
            }
        }
    });
    return out;
}

Tensor log(const Tensor& x) {
    Vec v = x.values().log();
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("log", {x}, out, [xh, oh] { accum(xh, oh->grad / xh->values); });
    return out;
}

Tensor exp(const Tensor& x) {
    Vec v = x.values().exp();
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("exp", {x}, out, [xh, oh] { accum(xh, oh->grad * oh->values); });
    return out;
}

namespace {

Tensor reduce(const Tensor& x, std::optional<Index> axis, bool take_mean, const char* name) {
    if (!axis.has_value()) {
        const double denom = take_mean ? static_cast<double>(x.size()) : 1.0;
        if (take_mean && x.size() == 0) throw ContractError("mean of empty tensor");
        Vec v(1);
        v[0] = x.values().sum() / denom;
        Tensor out = make_tensor(Shape{}, std::move(v), false);
        auto xh = x.handle(), oh = out.handle();
        record_op(name, {x}, out, [xh, oh, denom] {
            accum(xh, Vec::Constant(xh->values.size(), oh->grad[0] / denom));
        });
        return out;
    }
    const AxisView av = axis_view(x, *axis);
    const Index cols2d = x.rank() == 2 ? x.dim(1) : x.size();
    const double denom = take_mean ? static_cast<double>(av.len) : 1.0;
    if (take_mean && av.len == 0) throw ContractError("mean over empty axis");
    Vec v = Vec::Zero(av.groups);
    for (Index g = 0; g < av.groups; ++g) {
        double s = 0.0;
        for (Index i = 0; i < av.len; ++i) s += line_get(x.values(), av, g, i, cols2d);
        v[g] = s / denom;
    }
    // Reducing a rank-2 tensor yields rank 1; reducing rank 1 yields a scalar.
    Shape out_shape = x.rank() == 2 ? Shape{av.groups} : Shape{};
    Tensor out = make_tensor(std::move(out_shape), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op(name, {x}, out, [xh, oh, av, cols2d, denom] {
        if (!xh->tracked) return;
        xh->ensure_grad();
        for (Index g = 0; g < av.groups; ++g)
            for (Index i = 0; i < av.len; ++i)
                line_add(xh->grad, av, g, i, cols2d, oh->grad[g] / denom);
    });
    return out;
}

}  // namespace

Tensor mean(const Tensor& x, std::optional<Index> axis) { return reduce(x, axis, true, "mean"); }
Tensor sum(const Tensor& x, std::optional<Index> axis) { return reduce(x, axis, false, "sum"); }

namespace {

constexpr double kLayerNormEps = 1e-5;

Tensor layer_norm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias) {
    if (x.rank() < 1 || x.rank() > 2) throw ShapeError("layer_norm requires rank 1 or 2");
    const Index rows = x.rank() == 2 ? x.dim(0) : 1;
    const Index d = x.rank() == 2 ? x.dim(1) : x.size();
    if (gain) {
        if (gain->rank() != 1 || gain->size() != d || bias->rank() != 1 || bias->size() != d)
            throw ShapeError("layer_norm affine parameters must have shape [" + std::to_string(d) + "]");
    }
    auto xhat = std::make_shared<Vec>(x.size());
    auto inv_std = std::make_shared<Vec>(rows);
    Vec v(x.size());
    for (Index r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (Index i = 0; i < d; ++i) mu += x.values()[r * d + i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (Index i = 0; i < d; ++i) {
            const double c = x.values()[r * d + i] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        (*inv_std)[r] = is;
        for (Index i = 0; i < d; ++i) {
            const double h = (x.values()[r * d + i] - mu) * is;
            (*xhat)[r * d + i] = h;
            v[r * d + i] = gain ? gain->values()[i] * h + bias->values()[i] : h;
        }
    }
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    std::shared_ptr<TensorData> gh = gain ? gain->handle() : nullptr;
    std::shared_ptr<TensorData> bh = bias ? bias->handle() : nullptr;
    std::vector<Tensor> inputs{x};
    if (gain) {
        inputs.push_back(*gain);
        inputs.push_back(*bias);
    }
    record_op("layer_norm", std::move(inputs), out, [xh, oh, gh, bh, xhat, inv_std, rows, d] {
        for (Index r = 0; r < rows; ++r) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (Index i = 0; i < d; ++i) {
                const double g = oh->grad[r * d + i];
                const double dxh = gh ? g * gh->values[i] : g;
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * (*xhat)[r * d + i];
            }
            if (xh->tracked) {
                xh->ensure_grad();
                const double is = (*inv_std)[r];
                for (Index i = 0; i < d; ++i) {
                    const double g = oh->grad[r * d + i];
                    const double dxh = gh ? g * gh->values[i] : g;
                    xh->grad[r * d + i] += is * (dxh - (sum_dxhat + (*xhat)[r * d + i] * sum_dxhat_xhat) /
                                                           static_cast<double>(d));
                }
            }
            if (gh && gh->tracked) {
                gh->ensure_grad();
                for (Index i = 0; i < d; ++i)
                    gh->grad[i] += oh->grad[r * d + i] * (*xhat)[r * d + i];
            }
            if (bh && bh->tracked) {
                bh->ensure_grad();
                for (Index i = 0; i < d; ++i) bh->grad[i] += oh->grad[r * d + i];
            }
        }
    });
    return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x) { return layer_norm_impl(x, nullptr, nullptr); }

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return layer_norm_impl(x, &gain, &bias);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& additive_mask, MatRM* attn_out) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || additive_mask.rank() != 2)
        throw ShapeError("scaled_dot_attention requires rank-2 inputs");
    const Index n = q.dim(0), dh = q.dim(1), m = k.dim(0);
    if (k.dim(1) != dh || v.dim(0) != m)
        throw ShapeError("scaled_dot_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()) + " not conformable");
    if (additive_mask.dim(0) != n || additive_mask.dim(1) != m)
        throw ShapeError("scaled_dot_attention: mask must be [" + std::to_string(n) + "," +
                         std::to_string(m) + "]");
    const Index dv = v.dim(1);
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto attn = std::make_shared<MatRM>(n, m);
    MatRM scores = (q.matrix() * k.matrix().transpose()) * inv_scale + additive_mask.matrix();
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
        const double mx = scores.row(i).maxCoeff();
        if (!std::isfinite(mx)) throw NumericError("attention row " + std::to_string(i) + " fully masked");
        attn->row(i) = (scores.row(i).array() - mx).exp();
        // Eigen's vectorized exp clamps -inf to a denormal; masked entries
        // must carry exactly zero weight.
        for (Index j = 0; j < m; ++j)
            if (additive_mask.values()[i * m + j] == neg_inf) (*attn)(i, j) = 0.0;
        attn->row(i) /= attn->row(i).sum();
    }
    if (attn_out) *attn_out = *attn;

    Vec out_v(n * dv);
    MapM(out_v.data(), n, dv).noalias() = (*attn) * v.matrix();
    Tensor out = make_tensor(Shape{n, dv}, std::move(out_v), false);
    auto qh = q.handle(), kh = k.handle(), vh = v.handle(), oh = out.handle();
    record_op("scaled_dot_attention", {q, k, v, additive_mask}, out,
              [qh, kh, vh, oh, attn, n, m, dh, dv, inv_scale] {
                  CMapM g(oh->grad.data(), n, dv);
                  MatRM g_attn = g * as_mat(vh, m, dv).transpose();
                  if (vh->tracked) grad_mat(vh, m, dv).noalias() += attn->transpose() * g;
                  MatRM g_scores(n, m);
                  for (Index i = 0; i < n; ++i) {
                      const double dot = (g_attn.row(i).array() * attn->row(i).array()).sum();
                      g_scores.row(i) =
                          attn->row(i).array() * (g_attn.row(i).array() - dot) * inv_scale;
                  }
                  if (qh->tracked) grad_mat(qh, n, dh).noalias() += g_scores * as_mat(kh, m, dh);
                  if (kh->tracked)
                      grad_mat(kh, m, dh).noalias() += g_scores.transpose() * as_mat(qh, n, dh);
              });
    return out;
}

Tensor relu(const Tensor& x) {
    Vec v = x.values().max(0.0);
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("relu", {x}, out, [xh, oh] {
        accum(xh, oh->grad * (xh->values > 0.0).cast<double>());
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, Index axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const Index rank = parts[0].rank();
    if (rank == 1) {
        if (axis != 0) throw BoundsError("axis out of range for rank-1 concat");
        Index total = 0;
        for (const auto& p : parts) {
            if (p.rank() != 1) throw ShapeError("concat: mixed ranks");
            total += p.size();
        }
        Vec v(total);
        Index at = 0;
        for (const auto& p : parts) {
            v.segment(at, p.size()) = p.values();
            at += p.size();
        }
        Tensor out = make_tensor(Shape{total}, std::move(v), false);
        std::vector<std::shared_ptr<TensorData>> hs;
        for (const auto& p : parts) hs.push_back(p.handle());
        auto oh = out.handle();
        record_op("concat", parts, out, [hs, oh] {
            Index at = 0;
            for (const auto& h : hs) {
                if (h->tracked) {
                    h->ensure_grad();
                    h->grad += oh->grad.segment(at, h->values.size());
                }
                at += h->values.size();
            }
        });
        return out;
    }
    if (rank != 2 || (axis != 0 && axis != 1)) throw ShapeError("concat supports rank 1 or 2, axis 0/1");
    const Index fixed = parts[0].dim(1 - axis);
    Index total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1 - axis) != fixed)
            throw ShapeError("concat: incompatible shapes along axis " + std::to_string(axis));
        total += p.dim(axis);
    }
    const Index rows = axis == 0 ? total : fixed;
    const Index cols = axis == 0 ? fixed : total;
    Vec v(rows * cols);
    MapM outm(v.data(), rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        if (axis == 0)
            outm.middleRows(at, p.dim(0)) = p.matrix();
        else
            outm.middleCols(at, p.dim(1)) = p.matrix();
        at += p.dim(axis);
    }
    Tensor out = make_tensor(Shape{rows, cols}, std::move(v), false);
    std::vector<std::shared_ptr<TensorData>> hs;
    std::vector<Index> sizes;
    for (const auto& p : parts) {
        hs.push_back(p.handle());
        sizes.push_back(p.dim(axis));
    }
    auto oh = out.handle();
    record_op("concat", parts, out, [hs, sizes, oh, axis, rows, cols] {
        CMapM g(oh->grad.data(), rows, cols);
        Index at = 0;
        for (std::size_t i = 0; i < hs.size(); ++i) {
            if (hs[i]->tracked) {
                const Index pr = axis == 0 ? sizes[i] : rows;
                const Index pc = axis == 0 ? cols : sizes[i];
                MapM gp = grad_mat(hs[i], pr, pc);
                if (axis == 0)
                    gp += g.middleRows(at, sizes[i]);
                else
                    gp += g.middleCols(at, sizes[i]);
            }
            at += sizes[i];
        }
    });
    return out;
}

Tensor slice(const Tensor& t, Index axis, Index start, Index length) {
    if (t.rank() == 1) {
        if (axis != 0) throw BoundsError("axis out of range for rank-1 slice");
        if (start < 0 || length < 0 || start + length > t.size())
            throw BoundsError("slice range out of bounds");
        Vec v = t.values().segment(start, length);
        Tensor out = make_tensor(Shape{length}, std::move(v), false);
        auto th = t.handle(), oh = out.handle();
        record_op("slice", {t}, out, [th, oh, start, length] {
            if (!th->tracked) return;
            th->ensure_grad();
            th->grad.segment(start, length) += oh->grad;
        });
        return out;
    }
    if (t.rank() != 2 || (axis != 0 && axis != 1)) throw ShapeError("slice supports rank 1 or 2, axis 0/1");
    if (start < 0 || length < 0 || start + length > t.dim(axis))
        throw BoundsError("slice range out of bounds");
    const Index rows = axis == 0 ? length : t.dim(0);
    const Index cols = axis == 0 ? t.dim(1) : length;
    Vec v(rows * cols);
    if (axis == 0)
        MapM(v.data(), rows, cols) = t.matrix().middleRows(start, length);
    else
        MapM(v.data(), rows, cols) = t.matrix().middleCols(start, length);
    Tensor out = make_tensor(Shape{rows, cols}, std::move(v), false);
    auto th = t.handle(), oh = out.handle();
    const Index trows = t.dim(0), tcols = t.dim(1);
    record_op("slice", {t}, out, [th, oh, axis, start, length, trows, tcols, rows, cols] {
        if (!th->tracked) return;
        CMapM g(oh->grad.data(), rows, cols);
        MapM gt = grad_mat(th, trows, tcols);
        if (axis == 0)
            gt.middleRows(start, length) += g;
        else
            gt.middleCols(start, length) += g;
    });
    return out;
}

Tensor transpose(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("transpose requires rank 2");
    const Index r = t.dim(0), c = t.dim(1);
    Vec v(t.size());
    MapM(v.data(), c, r) = t.matrix().transpose();
    Tensor out = make_tensor(Shape{c, r}, std::move(v), false);
    auto th = t.handle(), oh = out.handle();
    record_op("transpose", {t}, out, [th, oh, r, c] {
        if (!th->tracked) return;
        grad_mat(th, r, c) += CMapM(oh->grad.data(), c, r).transpose();
    });
    return out;
}

Tensor broadcast_add(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1)
        throw ShapeError("broadcast_add expects rank-2 + rank-1, got " + shape_str(m.shape()) +
                         " and " + shape_str(v.shape()));
    if (m.dim(1) != v.size())
        throw ShapeError("broadcast_add: trailing dim " + std::to_string(m.dim(1)) +
                         " != vector length " + std::to_string(v.size()));
    const Index rows = m.dim(0), cols = m.dim(1);
    Vec out_v(m.size());
    MapM(out_v.data(), rows, cols) =
        m.matrix().rowwise() + Eigen::Map<const Eigen::RowVectorXd>(v.values().data(), cols);
    Tensor out = make_tensor(m.shape(), std::move(out_v), false);
    auto mh = m.handle(), vh = v.handle(), oh = out.handle();
    record_op("broadcast_add", {m, v}, out, [mh, vh, oh, rows, cols] {
        if (mh->tracked) accum(mh, oh->grad);
        if (vh->tracked) {
            vh->ensure_grad();
            CMapM g(oh->grad.data(), rows, cols);
            Eigen::Map<Eigen::RowVectorXd>(vh->grad.data(), cols) += g.colwise().sum();
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Extension ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& t, Shape shape) {
    if (shape_numel(shape) != t.size())
        throw ShapeError("reshape to " + shape_str(shape) + " from " + shape_str(t.shape()));
    Tensor out = make_tensor(std::move(shape), t.values(), false);
    auto th = t.handle(), oh = out.handle();
    record_op("reshape", {t}, out, [th, oh] { accum(th, oh->grad); });
    return out;
}

Tensor log_softmax(const Tensor& x, Index axis, double temperature) {
    if (temperature <= 0.0) throw ContractError("log_softmax temperature must be positive");
    const AxisView av = axis_view(x, axis);
    const Index cols2d = x.rank() == 2 ? x.dim(1) : x.size();
    Vec v(x.size());
    for (Index g = 0; g < av.groups; ++g) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Index i = 0; i < av.len; ++i)
            mx = std::max(mx, line_get(x.values(), av, g, i, cols2d) / temperature);
        double z = 0.0;
        for (Index i = 0; i < av.len; ++i)
            z += std::exp(line_get(x.values(), av, g, i, cols2d) / temperature - mx);
        const double lz = std::log(z) + mx;
        for (Index i = 0; i < av.len; ++i) {
            const double s = line_get(x.values(), av, g, i, cols2d) / temperature - lz;
            if (av.by_row)
                v[g * av.len + i] = s;
            else
                v[i * cols2d + g] = s;
        }
    }
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("log_softmax", {x}, out, [xh, oh, av, cols2d, temperature] {
        if (!xh->tracked) return;
        xh->ensure_grad();
        for (Index g = 0; g < av.groups; ++g) {
            double gsum = 0.0;
            for (Index i = 0; i < av.len; ++i) gsum += line_get(oh->grad, av, g, i, cols2d);
            for (Index i = 0; i < av.len; ++i) {
                const double p = std::exp(line_get(oh->values, av, g, i, cols2d));
                const double gy = line_get(oh->grad, av, g, i, cols2d);
                line_add(xh->grad, av, g, i, cols2d, (gy - p * gsum) / temperature);
            }
        }
    });
    return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("l2_normalize_rows requires rank 2");
    const Index rows = x.dim(0), cols = x.dim(1);
    constexpr double kTiny = 1e-12;
    auto norms = std::make_shared<Vec>(rows);
    Vec v(x.size());
    MapM outm(v.data(), rows, cols);
    CMapM src = x.matrix();
    for (Index r = 0; r < rows; ++r) {
        const double n = src.row(r).norm();
        (*norms)[r] = n;
        outm.row(r) = n < kTiny ? Eigen::RowVectorXd::Zero(cols).eval() : (src.row(r) / n).eval();
    }
    Tensor out = make_tensor(x.shape(), std::move(v), false);
    auto xh = x.handle(), oh = out.handle();
    record_op("l2_normalize_rows", {x}, out, [xh, oh, norms, rows, cols] {
        if (!xh->tracked) return;
        xh->ensure_grad();
        CMapM g(oh->grad.data(), rows, cols);
        CMapM y(oh->values.data(), rows, cols);
        MapM gx(xh->grad.data(), rows, cols);
        for (Index r = 0; r < rows; ++r) {
            const double n = (*norms)[r];
            if (n < kTiny) continue;
            const double dot = g.row(r).dot(y.row(r));
            gx.row(r) += (g.row(r) - dot * y.row(r)) / n;
        }
    });
    return out;
}

Tensor binary_ce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape("binary_ce_with_logits", logits, targets);
    const Index n = logits.size();
    if (n == 0) throw ContractError("binary_ce_with_logits on empty tensor");
    double lsum = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double z = logits.values()[i];
        const double t = targets.values()[i];
        const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        lsum += softplus - t * z;
    }
    Vec v(1);
    v[0] = lsum / static_cast<double>(n);
    Tensor out = make_tensor(Shape{}, std::move(v), false);
    auto zh = logits.handle(), th = targets.handle(), oh = out.handle();
    record_op("binary_ce_with_logits", {logits, targets}, out, [zh, th, oh, n] {
        const double g = oh->grad[0] / static_cast<double>(n);
        if (zh->tracked) {
            Vec sig = zh->values.unaryExpr([](double z) {
                return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            });
            accum(zh, g * (sig - th->values));
        }
        if (th->tracked) accum(th, (-g) * zh->values);
    });
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    Tensor out = make_tensor(x.shape(), x.values() * factor, false);
    auto xh = x.handle(), oh = out.handle();
    record_op("scale", {x}, out, [xh, oh, factor] { accum(xh, oh->grad * factor); });
    return out;
}

// ---------------------------------------------------------------------------
// apply() dispatch
// ---------------------------------------------------------------------------

namespace {

template <typename T>
T attr_get(const OpAttrs& attrs, const std::string& key, std::optional<T> fallback = std::nullopt) {
    auto it = attrs.find(key);
    if (it == attrs.end()) {
        if (fallback) return *fallback;
        throw ContractError("missing attr '" + key + "'");
    }
    if (const T* v = std::get_if<T>(&it->second)) return *v;
    throw ContractError("attr '" + key + "' has wrong type");
}

void need_inputs(const std::vector<Tensor>& in, std::size_t n, const char* op) {
    if (in.size() != n)
        throw ContractError(std::string(op) + " expects " + std::to_string(n) + " inputs, got " +
                            std::to_string(in.size()));
}

std::optional<Index> opt_axis(const OpAttrs& attrs) {
    auto it = attrs.find("axis");
    if (it == attrs.end()) return std::nullopt;
    return std::get<Index>(it->second);
}

}  // namespace

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    switch (kind) {
        case OpKind::add:
            need_inputs(inputs, 2, "add");
            return add(inputs[0], inputs[1]);
        case OpKind::subtract:
            need_inputs(inputs, 2, "subtract");
            return subtract(inputs[0], inputs[1]);
        case OpKind::elementwise_multiply:
            need_inputs(inputs, 2, "elementwise_multiply");
            return elementwise_multiply(inputs[0], inputs[1]);
        case OpKind::matmul:
            need_inputs(inputs, 2, "matmul");
            return matmul(inputs[0], inputs[1]);
        case OpKind::gather_rows:
            need_inputs(inputs, 1, "gather_rows");
            return gather_rows(inputs[0], attr_get<std::vector<Index>>(attrs, "indices"));
        case OpKind::sigmoid:
            need_inputs(inputs, 1, "sigmoid");
            return sigmoid(inputs[0]);
        case OpKind::softmax:
            need_inputs(inputs, 1, "softmax");
            return softmax(inputs[0], attr_get<Index>(attrs, "axis"),
                           attr_get<double>(attrs, "temperature", 1.0));
        case OpKind::log:
            need_inputs(inputs, 1, "log");
            return log(inputs[0]);
        case OpKind::exp:
            need_inputs(inputs, 1, "exp");
            return exp(inputs[0]);
        case OpKind::mean:
            need_inputs(inputs, 1, "mean");
            return mean(inputs[0], opt_axis(attrs));
        case OpKind::sum:
            need_inputs(inputs, 1, "sum");
            return sum(inputs[0], opt_axis(attrs));
        case OpKind::layer_norm: {
            const bool affine = attr_get<bool>(attrs, "affine", false);
            if (affine) {
                need_inputs(inputs, 3, "layer_norm(affine)");
                return layer_norm(inputs[0], inputs[1], inputs[2]);
            }
            need_inputs(inputs, 1, "layer_norm");
            return layer_norm(inputs[0]);
        }
        case OpKind::scaled_dot_attention:
            need_inputs(inputs, 4, "scaled_dot_attention");
            return scaled_dot_attention(inputs[0], inputs[1], inputs[2], inputs[3]);
        case OpKind::relu:
            need_inputs(inputs, 1, "relu");
            return relu(inputs[0]);
        case OpKind::concat:
            return concat(inputs, attr_get<Index>(attrs, "axis"));
        case OpKind::slice:
            need_inputs(inputs, 1, "slice");
            return slice(inputs[0], attr_get<Index>(attrs, "axis"),
                         attr_get<Index>(attrs, "start"), attr_get<Index>(attrs, "length"));
        case OpKind::transpose:
            need_inputs(inputs, 1, "transpose");
            return transpose(inputs[0]);
        case OpKind::broadcast_add:
            need_inputs(inputs, 2, "broadcast_add");
            return broadcast_add(inputs[0], inputs[1]);
    }
    throw ContractError("unknown op kind");
}

const char* op_kind_name(OpKind kind) {
    switch (kind) {
        case OpKind::add: return "add";
        case OpKind::subtract: return "subtract";
        case OpKind::elementwise_multiply: return "elementwise_multiply";
        case OpKind::matmul: return "matmul";
        case OpKind::gather_rows: return "gather_rows";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::softmax: return "softmax";
        case OpKind::log: return "log";
        case OpKind::exp: return "exp";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::scaled_dot_attention: return "scaled_dot_attention";
        case OpKind::relu: return "relu";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::transpose: return "transpose";
        case OpKind::broadcast_add: return "broadcast_add";
    }
    return "?";
}

std::vector<OpKind> op_catalog() {
    return {OpKind::add,        OpKind::subtract,  OpKind::elementwise_multiply,
            OpKind::matmul,     OpKind::gather_rows, OpKind::sigmoid,
            OpKind::softmax,    OpKind::log,       OpKind::exp,
            OpKind::mean,       OpKind::sum,       OpKind::layer_norm,
            OpKind::scaled_dot_attention,          OpKind::relu,
            OpKind::concat,     OpKind::slice,     OpKind::transpose,
            OpKind::broadcast_add};
}

}  // namespace byb
