#pragma once

// Dense N-D tensors with reverse-mode automatic differentiation.
// Values are stored row-major; gradients live on graph nodes that are
// rebuilt on every forward pass (define-by-run). Broadcasting is
// deliberately limited to scalar-vs-tensor and equal shapes; channel-wise
// modulation has dedicated ops (mul_channels / add_channels).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dgrnet {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// log() inputs below this are clamped; the count of clamps is kept so
// entropy code paths can be audited.
inline constexpr double kLogEps = 1e-12;

inline std::uint64_t& log_clamp_count() {
    thread_local std::uint64_t n = 0;
    return n;
}

// ---------------------------------------------------------------------------
// Grad mode (thread-local). Evaluation wraps forwards in NoGradGuard so no
// graph is recorded.
// ---------------------------------------------------------------------------

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Autograd node
// ---------------------------------------------------------------------------

template <class Real>
struct Node {
    Shape shape;
    std::vector<Real> grad;  // lazily sized to numel(shape)
    bool is_leaf = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Propagates this node's grad into its parents' grad buffers.
    std::function<void(const std::vector<Real>&)> backprop;

    explicit Node(Shape s) : shape(std::move(s)) {}

    std::vector<Real>& grad_buf() {
        if (grad.empty()) grad.assign(static_cast<std::size_t>(shape_numel(shape)), Real(0));
        return grad;
    }
};

// Active leaf filter for the current backward sweep (null = all leaves).
template <class Real>
inline const std::unordered_set<const Node<Real>*>*& leaf_filter() {
    thread_local const std::unordered_set<const Node<Real>*>* f = nullptr;
    return f;
}

template <class Real>
inline bool node_wants_grad(const Node<Real>* n) {
    if (!n->is_leaf) return true;
    const auto* f = leaf_filter<Real>();
    return f == nullptr || f->count(n) != 0;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <class Real>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, Real fill = Real(0))
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(static_cast<std::size_t>(shape_numel(shape_)), fill)) {}

    Tensor(Shape shape, std::vector<Real> values) : shape_(std::move(shape)) {
        check(static_cast<std::int64_t>(values.size()) == shape_numel(shape_),
              "tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<Real>>(std::move(values));
    }

    static Tensor scalar(Real v) { return Tensor({1}, std::vector<Real>{v}); }

    // A trainable leaf: participates in backward() and keeps its grad buffer
    // across sweeps until clear_grad().
    static Tensor param(Shape shape, std::vector<Real> values) {
        Tensor t(std::move(shape), std::move(values));
        t.node_ = std::make_shared<Node<Real>>(t.shape_);
        t.node_->is_leaf = true;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_numel(shape_); }
    bool defined() const { return data_ != nullptr; }

    const std::vector<Real>& values() const { return *data_; }
    std::vector<Real>& values() { return *data_; }
    const std::shared_ptr<std::vector<Real>>& data_ptr() const { return data_; }
    Real item() const {
        check(numel() == 1, "item: tensor " + shape_str(shape_) + " is not scalar");
        return (*data_)[0];
    }

    bool tracked() const { return node_ != nullptr; }
    bool is_leaf() const { return node_ && node_->is_leaf; }
    const std::shared_ptr<Node<Real>>& node() const { return node_; }
    void set_node(std::shared_ptr<Node<Real>> n) { node_ = std::move(n); }

    // Gradient of the last backward sweep(s); zeros when nothing reached it.
    std::vector<Real> grad() const {
        if (node_ && !node_->grad.empty()) return node_->grad;
        return std::vector<Real>(static_cast<std::size_t>(numel()), Real(0));
    }
    void clear_grad() {
        if (node_) node_->grad.clear();
    }

    // Same values, no graph connection.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<Real>>(*data_);
        return t;
    }

  private:
    Shape shape_;
    std::shared_ptr<std::vector<Real>> data_;
    std::shared_ptr<Node<Real>> node_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

// Collects the non-null nodes of inputs; returns true if any input is tracked.
template <class Real>
inline bool any_tracked(std::initializer_list<const Tensor<Real>*> ins) {
    if (!grad_enabled()) return false;
    for (const auto* t : ins)
        if (t->tracked()) return true;
    return false;
}

template <class Real, class F>
inline void attach_node(Tensor<Real>& out, std::initializer_list<const Tensor<Real>*> ins, F&& backfn) {
    auto n = std::make_shared<Node<Real>>(out.shape());
    for (const auto* t : ins)
        if (t->tracked()) n->parents.push_back(t->node());
    n->backprop = std::forward<F>(backfn);
    out.set_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (equal shapes, or scalar on either side)
// ---------------------------------------------------------------------------

template <class Real>
inline void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    check(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape(a, b, "add");
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (any_tracked<Real>({&a, &b})) {
        auto na = a.node(), nb = b.node();
        attach_node(out, {&a, &b}, [na, nb](const std::vector<Real>& g) {
            if (na && node_wants_grad(na.get())) {
                auto& ga = na->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb && node_wants_grad(nb.get())) {
                auto& gb = nb->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s) {
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = -av[i];
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape(a, b, "sub");
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (any_tracked<Real>({&a, &b})) {
        auto na = a.node(), nb = b.node();
        attach_node(out, {&a, &b}, [na, nb](const std::vector<Real>& g) {
            if (na && node_wants_grad(na.get())) {
                auto& ga = na->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (nb && node_wants_grad(nb.get())) {
                auto& gb = nb->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape(a, b, "mul");
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (any_tracked<Real>({&a, &b})) {
        auto na = a.node(), nb = b.node();
        auto ad = a.data_ptr(), bd = b.data_ptr();
        attach_node(out, {&a, &b}, [na, nb, ad, bd](const std::vector<Real>& g) {
            if (na && node_wants_grad(na.get())) {
                auto& ga = na->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
            }
            if (nb && node_wants_grad(nb.get())) {
                auto& gb = nb->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad)[i];
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real s) {
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na, s](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape(a, b, "div");
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    if (any_tracked<Real>({&a, &b})) {
        auto na = a.node(), nb = b.node();
        auto ad = a.data_ptr(), bd = b.data_ptr();
        attach_node(out, {&a, &b}, [na, nb, ad, bd](const std::vector<Real>& g) {
            if (na && node_wants_grad(na.get())) {
                auto& ga = na->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*bd)[i];
            }
            if (nb && node_wants_grad(nb.get())) {
                auto& gb = nb->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    Real bi = (*bd)[i];
                    gb[i] -= g[i] * (*ad)[i] / (bi * bi);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Real, class Fwd, class Bwd>
Tensor<Real> unary_op(const Tensor<Real>& a, Fwd fwd, Bwd dfd) {
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        auto ad = a.data_ptr();
        auto od = out.data_ptr();
        attach_node(out, {&a}, [na, ad, od, dfd](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfd((*ad)[i], (*od)[i]);
        });
    }
    return out;
}

}  // namespace detail

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

// log with the epsilon clamp required by entropy at p in {0, 1}.
template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
    Tensor<Real> out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    const Real eps = static_cast<Real>(kLogEps);
    for (std::size_t i = 0; i < ov.size(); ++i) {
        Real x = av[i];
        if (x < eps) {
            x = eps;
            ++log_clamp_count();
        }
        ov[i] = std::log(x);
    }
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        auto ad = a.data_ptr();
        attach_node(out, {&a}, [na, ad, eps](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                Real x = (*ad)[i];
                // Clamped region is constant: zero gradient there.
                if (x >= eps) ga[i] += g[i] / x;
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> sqrt(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::sqrt(x); },
        [](Real, Real y) { return Real(0.5) / y; });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
    return detail::unary_op(
        a,
        [](Real x) {
            if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
            Real e = std::exp(x);
            return e / (Real(1) + e);
        },
        [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return x > 0 ? x : Real(0); },
        [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        a,
        [=](Real x) { return Real(0.5) * x * (Real(1) + static_cast<Real>(std::erf(x * inv_sqrt2))); },
        [=](Real x, Real) {
            Real cdf = Real(0.5) * (Real(1) + static_cast<Real>(std::erf(x * inv_sqrt2)));
            Real pdf = static_cast<Real>(inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x)));
            return cdf + x * pdf;
        });
}

// Numerically stable binary cross-entropy on logits; `target` is treated as
// a constant (labels), only `z` receives gradient.
template <class Real>
Tensor<Real> bce_logits(const Tensor<Real>& z, const Tensor<Real>& target) {
    check_same_shape(z, target, "bce_logits");
    Tensor<Real> out(z.shape());
    const auto& zv = z.values();
    const auto& yv = target.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        Real x = zv[i];
        // max(x,0) - x*y + log(1 + exp(-|x|))
        ov[i] = std::max(x, Real(0)) - x * yv[i] + std::log1p(std::exp(-std::abs(x)));
    }
    if (any_tracked<Real>({&z})) {
        auto nz = z.node();
        auto zd = z.data_ptr();
        auto yd = target.data_ptr();
        attach_node(out, {&z}, [nz, zd, yd](const std::vector<Real>& g) {
            if (!node_wants_grad(nz.get())) return;
            auto& gz = nz->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) {
                Real x = (*zd)[i];
                Real p = x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
                gz[i] += g[i] * (p - (*yd)[i]);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Stable softmax over a 1-D tensor.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
    check(x.shape().size() == 1, "softmax: expected 1-D tensor, got " + shape_str(x.shape()));
    Tensor<Real> out(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    Real m = *std::max_element(xv.begin(), xv.end());
    Real sum = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        ov[i] = std::exp(xv[i] - m);
        sum += ov[i];
    }
    for (auto& v : ov) v /= sum;
    if (any_tracked<Real>({&x})) {
        auto nx = x.node();
        auto od = out.data_ptr();
        attach_node(out, {&x}, [nx, od](const std::vector<Real>& g) {
            if (!node_wants_grad(nx.get())) return;
            auto& gx = nx->grad_buf();
            Real dot = 0;
            for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * (*od)[i];
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (*od)[i] * (g[i] - dot);
        });
    }
    return out;
}

// Row-wise masked softmax over [R, C]; masked-out columns get probability 0.
// Each row must have at least one valid column.
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x, const std::vector<bool>& col_valid) {
    check(x.shape().size() == 2, "softmax_rows: expected 2-D tensor, got " + shape_str(x.shape()));
    const int rows = x.shape()[0], cols = x.shape()[1];
    check(static_cast<int>(col_valid.size()) == cols, "softmax_rows: mask size mismatch");
    check(std::any_of(col_valid.begin(), col_valid.end(), [](bool b) { return b; }),
          "softmax_rows: no valid columns");
    Tensor<Real> out(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int r = 0; r < rows; ++r) {
        const Real* row = xv.data() + static_cast<std::size_t>(r) * cols;
        Real* orow = ov.data() + static_cast<std::size_t>(r) * cols;
        Real m = -std::numeric_limits<Real>::infinity();
        for (int c = 0; c < cols; ++c)
            if (col_valid[c]) m = std::max(m, row[c]);
        Real sum = 0;
        for (int c = 0; c < cols; ++c) {
            orow[c] = col_valid[c] ? std::exp(row[c] - m) : Real(0);
            sum += orow[c];
        }
        for (int c = 0; c < cols; ++c) orow[c] /= sum;
    }
    if (any_tracked<Real>({&x})) {
        auto nx = x.node();
        auto od = out.data_ptr();
        attach_node(out, {&x}, [nx, od, rows, cols](const std::vector<Real>& g) {
            if (!node_wants_grad(nx.get())) return;
            auto& gx = nx->grad_buf();
            for (int r = 0; r < rows; ++r) {
                const std::size_t off = static_cast<std::size_t>(r) * cols;
                Real dot = 0;
                for (int c = 0; c < cols; ++c) dot += g[off + c] * (*od)[off + c];
                for (int c = 0; c < cols; ++c) gx[off + c] += (*od)[off + c] * (g[off + c] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matmul / transpose / reshape / narrow
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    check(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul: need 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    check(k == k2, "matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<Real> out({m, n});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            Real aip = av[static_cast<std::size_t>(i) * k + p];
            const Real* brow = bv.data() + static_cast<std::size_t>(p) * n;
            Real* orow = ov.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    if (any_tracked<Real>({&a, &b})) {
        auto na = a.node(), nb = b.node();
        auto ad = a.data_ptr(), bd = b.data_ptr();
        attach_node(out, {&a, &b}, [na, nb, ad, bd, m, k, n](const std::vector<Real>& g) {
            if (na && node_wants_grad(na.get())) {
                auto& ga = na->grad_buf();
                // dA = dY @ B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        Real s = 0;
                        const Real* grow = g.data() + static_cast<std::size_t>(i) * n;
                        const Real* brow = (*bd).data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[static_cast<std::size_t>(i) * k + p] += s;
                    }
            }
            if (nb && node_wants_grad(nb.get())) {
                auto& gb = nb->grad_buf();
                // dB = A^T @ dY
                for (int p = 0; p < k; ++p)
                    for (int i = 0; i < m; ++i) {
                        Real aip = (*ad)[static_cast<std::size_t>(i) * k + p];
                        const Real* grow = g.data() + static_cast<std::size_t>(i) * n;
                        Real* brow = gb.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
                    }
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> transpose2d(const Tensor<Real>& a) {
    check(a.shape().size() == 2, "transpose2d: expected 2-D tensor, got " + shape_str(a.shape()));
    const int r = a.shape()[0], c = a.shape()[1];
    Tensor<Real> out({c, r});
    const auto& av = a.values();
    auto& ov = out.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ov[static_cast<std::size_t>(j) * r + i] = av[static_cast<std::size_t>(i) * c + j];
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na, r, c](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    ga[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape s) {
    check(shape_numel(s) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(s) + " changes element count");
    Tensor<Real> out(std::move(s), a.values());
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// Contiguous 1-D slice [offset, offset+len) of a flattened tensor.
template <class Real>
Tensor<Real> narrow(const Tensor<Real>& a, int offset, int len) {
    check(offset >= 0 && len >= 0 && offset + len <= a.numel(), "narrow: range out of bounds");
    Tensor<Real> out({len});
    const auto& av = a.values();
    auto& ov = out.values();
    std::copy(av.begin() + offset, av.begin() + offset + len, ov.begin());
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na, offset](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
    Real s = 0;
    for (Real v : a.values()) s += v;
    Tensor<Real> out = Tensor<Real>::scalar(s);
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        std::size_t n = a.values().size();
        attach_node(out, {&a}, [na, n](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
    const Real inv = Real(1) / static_cast<Real>(a.numel());
    Real s = 0;
    for (Real v : a.values()) s += v;
    Tensor<Real> out = Tensor<Real>::scalar(s * inv);
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        std::size_t n = a.values().size();
        attach_node(out, {&a}, [na, n, inv](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0] * inv;
        });
    }
    return out;
}

// Per-channel sums of a [C, ...] tensor -> [C].
template <class Real>
Tensor<Real> channel_sums(const Tensor<Real>& a) {
    check(a.shape().size() >= 2, "channel_sums: need at least 2 dims, got " + shape_str(a.shape()));
    const int C = a.shape()[0];
    const std::size_t inner = static_cast<std::size_t>(a.numel() / C);
    Tensor<Real> out({C});
    const auto& av = a.values();
    auto& ov = out.values();
    for (int c = 0; c < C; ++c) {
        Real s = 0;
        const Real* p = av.data() + c * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
        ov[c] = s;
    }
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na, C, inner](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (int c = 0; c < C; ++c) {
                Real* p = ga.data() + c * inner;
                for (std::size_t i = 0; i < inner; ++i) p[i] += g[c];
            }
        });
    }
    return out;
}

// Mean over axis 0 of a [C, ...] tensor -> [...] (used for class averaging).
template <class Real>
Tensor<Real> mean_axis0(const Tensor<Real>& a) {
    check(a.shape().size() >= 2, "mean_axis0: need at least 2 dims, got " + shape_str(a.shape()));
    const int C = a.shape()[0];
    Shape rest(a.shape().begin() + 1, a.shape().end());
    const std::size_t inner = static_cast<std::size_t>(shape_numel(rest));
    Tensor<Real> out(rest);
    const auto& av = a.values();
    auto& ov = out.values();
    const Real inv = Real(1) / static_cast<Real>(C);
    for (int c = 0; c < C; ++c) {
        const Real* p = av.data() + c * inner;
        for (std::size_t i = 0; i < inner; ++i) ov[i] += p[i];
    }
    for (auto& v : ov) v *= inv;
    if (any_tracked<Real>({&a})) {
        auto na = a.node();
        attach_node(out, {&a}, [na, C, inner, inv](const std::vector<Real>& g) {
            if (!node_wants_grad(na.get())) return;
            auto& ga = na->grad_buf();
            for (int c = 0; c < C; ++c) {
                Real* p = ga.data() + c * inner;
                for (std::size_t i = 0; i < inner; ++i) p[i] += g[i] * inv;
            }
        });
    }
    return out;
}

// Global average pool over the spatial dims of [C, ...] -> [C].
template <class Real>
Tensor<Real> mean_spatial(const Tensor<Real>& a) {
    const int C = a.shape()[0];
    const Real inv = Real(1) / static_cast<Real>(a.numel() / C);
    return mul_scalar(channel_sums(a), inv);
}

// ---------------------------------------------------------------------------
// Channel-wise modulation: x[C, ...] scaled / shifted by a [C] vector.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> mul_channels(const Tensor<Real>& x, const Tensor<Real>& s) {
    check(x.shape().size() >= 2 && s.shape().size() == 1 && s.shape()[0] == x.shape()[0],
          "mul_channels: " + shape_str(x.shape()) + " vs channel vector " + shape_str(s.shape()));
    const int C = x.shape()[0];
    const std::size_t inner = static_cast<std::size_t>(x.numel() / C);
    Tensor<Real> out(x.shape());
    const auto& xv = x.values();
    const auto& sv = s.values();
    auto& ov = out.values();
    for (int c = 0; c < C; ++c) {
        const Real f = sv[c];
        const Real* p = xv.data() + c * inner;
        Real* q = ov.data() + c * inner;
        for (std::size_t i = 0; i < inner; ++i) q[i] = p[i] * f;
    }
    if (any_tracked<Real>({&x, &s})) {
        auto nx = x.node(), ns = s.node();
        auto xd = x.data_ptr(), sd = s.data_ptr();
        attach_node(out, {&x, &s}, [nx, ns, xd, sd, C, inner](const std::vector<Real>& g) {
            if (nx && node_wants_grad(nx.get())) {
                auto& gx = nx->grad_buf();
                for (int c = 0; c < C; ++c) {
                    const Real f = (*sd)[c];
                    Real* p = gx.data() + c * inner;
                    const Real* gr = g.data() + c * inner;
                    for (std::size_t i = 0; i < inner; ++i) p[i] += gr[i] * f;
                }
            }
            if (ns && node_wants_grad(ns.get())) {
                auto& gs = ns->grad_buf();
                for (int c = 0; c < C; ++c) {
                    Real acc = 0;
                    const Real* xp = (*xd).data() + c * inner;
                    const Real* gr = g.data() + c * inner;
                    for (std::size_t i = 0; i < inner; ++i) acc += gr[i] * xp[i];
                    gs[c] += acc;
                }
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> add_channels(const Tensor<Real>& x, const Tensor<Real>& b) {
    check(x.shape().size() >= 2 && b.shape().size() == 1 && b.shape()[0] == x.shape()[0],
          "add_channels: " + shape_str(x.shape()) + " vs channel vector " + shape_str(b.shape()));
    const int C = x.shape()[0];
    const std::size_t inner = static_cast<std::size_t>(x.numel() / C);
    Tensor<Real> out(x.shape());
    const auto& xv = x.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (int c = 0; c < C; ++c) {
        const Real f = bv[c];
        const Real* p = xv.data() + c * inner;
        Real* q = ov.data() + c * inner;
        for (std::size_t i = 0; i < inner; ++i) q[i] = p[i] + f;
    }
    if (any_tracked<Real>({&x, &b})) {
        auto nx = x.node(), nb = b.node();
        attach_node(out, {&x, &b}, [nx, nb, C, inner](const std::vector<Real>& g) {
            if (nx && node_wants_grad(nx.get())) {
                auto& gx = nx->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (nb && node_wants_grad(nb.get())) {
                auto& gb = nb->grad_buf();
                for (int c = 0; c < C; ++c) {
                    Real acc = 0;
                    const Real* gr = g.data() + c * inner;
                    for (std::size_t i = 0; i < inner; ++i) acc += gr[i];
                    gb[c] += acc;
                }
            }
        });
    }
    return out;
}

// Multiplies x by a one-element tensor (both sides differentiable).
template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, const Tensor<Real>& s) {
    check(s.numel() == 1, "scale: scalar factor must have one element, got " + shape_str(s.shape()));
    const Real f = s.values()[0];
    Tensor<Real> out(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * f;
    if (any_tracked<Real>({&x, &s})) {
        auto nx = x.node(), ns = s.node();
        auto xd = x.data_ptr();
        attach_node(out, {&x, &s}, [nx, ns, xd, f](const std::vector<Real>& g) {
            if (nx && node_wants_grad(nx.get())) {
                auto& gx = nx->grad_buf();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * f;
            }
            if (ns && node_wants_grad(ns.get())) {
                Real acc = 0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (*xd)[i];
                ns->grad_buf()[0] += acc;
            }
        });
    }
    return out;
}

// x[C, ...] multiplied voxel-wise by a spatial map m[...] broadcast over
// channels.
template <class Real>
Tensor<Real> mul_spatial(const Tensor<Real>& x, const Tensor<Real>& m) {
    check(x.shape().size() >= 2, "mul_spatial: x must have a channel axis, got " + shape_str(x.shape()));
    check(Shape(x.shape().begin() + 1, x.shape().end()) == m.shape(),
          "mul_spatial: map " + shape_str(m.shape()) + " does not match trailing dims of " +
              shape_str(x.shape()));
    const int C = x.shape()[0];
    const std::size_t inner = static_cast<std::size_t>(m.numel());
    Tensor<Real> out(x.shape());
    const auto& xv = x.values();
    const auto& mv = m.values();
    auto& ov = out.values();
    for (int c = 0; c < C; ++c) {
        const Real* p = xv.data() + c * inner;
        Real* q = ov.data() + c * inner;
        for (std::size_t i = 0; i < inner; ++i) q[i] = p[i] * mv[i];
    }
    if (any_tracked<Real>({&x, &m})) {
        auto nx = x.node(), nm = m.node();
        auto xd = x.data_ptr(), md = m.data_ptr();
        attach_node(out, {&x, &m}, [nx, nm, xd, md, C, inner](const std::vector<Real>& g) {
            if (nx && node_wants_grad(nx.get())) {
                auto& gx = nx->grad_buf();
                for (int c = 0; c < C; ++c) {
                    Real* p = gx.data() + c * inner;
                    const Real* gr = g.data() + c * inner;
                    for (std::size_t i = 0; i < inner; ++i) p[i] += gr[i] * (*md)[i];
                }
            }
            if (nm && node_wants_grad(nm.get())) {
                auto& gm = nm->grad_buf();
                for (int c = 0; c < C; ++c) {
                    const Real* xp = (*xd).data() + c * inner;
                    const Real* gr = g.data() + c * inner;
                    for (std::size_t i = 0; i < inner; ++i) gm[i] += gr[i] * xp[i];
                }
            }
        });
    }
    return out;
}

// Clamp to [0,1]; gradient passes through strictly inside the interval.
template <class Real>
Tensor<Real> clamp01(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::min(std::max(x, Real(0)), Real(1)); },
        [](Real x, Real) { return (x > 0 && x < 1) ? Real(1) : Real(0); });
}

// ---------------------------------------------------------------------------
// Concatenation along the channel axis
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts) {
    check(!parts.empty(), "concat_channels: empty input list");
    Shape rest(parts[0].shape().begin() + 1, parts[0].shape().end());
    int C = 0;
    for (const auto& p : parts) {
        check(p.shape().size() == parts[0].shape().size() &&
                  Shape(p.shape().begin() + 1, p.shape().end()) == rest,
              "concat_channels: block " + shape_str(p.shape()) + " does not match trailing dims of " +
                  shape_str(parts[0].shape()));
        C += p.shape()[0];
    }
    Shape os = parts[0].shape();
    os[0] = C;
    Tensor<Real> out(os);
    auto& ov = out.values();
    std::size_t off = 0;
    for (const auto& p : parts) {
        const auto& pv = p.values();
        std::copy(pv.begin(), pv.end(), ov.begin() + off);
        off += pv.size();
    }
    bool tracked = false;
    if (grad_enabled())
        for (const auto& p : parts)
            if (p.tracked()) tracked = true;
    if (tracked) {
        std::vector<std::shared_ptr<Node<Real>>> nodes;
        std::vector<std::size_t> sizes;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            sizes.push_back(p.values().size());
        }
        auto n = std::make_shared<Node<Real>>(out.shape());
        for (auto& nd : nodes)
            if (nd) n->parents.push_back(nd);
        n->backprop = [nodes, sizes](const std::vector<Real>& g) {
            std::size_t off2 = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (nodes[k] && node_wants_grad(nodes[k].get())) {
                    auto& gp = nodes[k]->grad_buf();
                    for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += g[off2 + i];
                }
                off2 += sizes[k];
            }
        };
        out.set_node(std::move(n));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling of [C, D, H, W]
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> upsample_nearest2(const Tensor<Real>& x) {
    check(x.shape().size() == 4, "upsample_nearest2: expected [C,D,H,W], got " + shape_str(x.shape()));
    const int C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Tensor<Real> out({C, 2 * D, 2 * H, 2 * W});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < 2 * D; ++z)
            for (int y = 0; y < 2 * H; ++y) {
                const Real* src = xv.data() + ((static_cast<std::size_t>(c) * D + z / 2) * H + y / 2) * W;
                Real* dst = ov.data() + ((static_cast<std::size_t>(c) * 2 * D + z) * 2 * H + y) * 2 * W;
                for (int xx = 0; xx < W; ++xx) {
                    dst[2 * xx] = src[xx];
                    dst[2 * xx + 1] = src[xx];
                }
            }
    if (any_tracked<Real>({&x})) {
        auto nx = x.node();
        attach_node(out, {&x}, [nx, C, D, H, W](const std::vector<Real>& g) {
            if (!node_wants_grad(nx.get())) return;
            auto& gx = nx->grad_buf();
            for (int c = 0; c < C; ++c)
                for (int z = 0; z < 2 * D; ++z)
                    for (int y = 0; y < 2 * H; ++y) {
                        Real* dst = gx.data() + ((static_cast<std::size_t>(c) * D + z / 2) * H + y / 2) * W;
                        const Real* src = g.data() + ((static_cast<std::size_t>(c) * 2 * D + z) * 2 * H + y) * 2 * W;
                        for (int xx = 0; xx < W; ++xx) dst[xx] += src[2 * xx] + src[2 * xx + 1];
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Box sum over a [D, H, W] tensor (zero padding, odd window). Self-adjoint,
// so backward is the same box sum applied to the upstream gradient.
// ---------------------------------------------------------------------------

template <class Real>
void box_sum3_values(const Real* in, Real* out, int D, int H, int W, int window) {
    const int r = window / 2;
    // Separable passes: W, then H, then D.
    std::vector<Real> tmp1(static_cast<std::size_t>(D) * H * W), tmp2(tmp1.size());
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y) {
            const Real* src = in + (static_cast<std::size_t>(z) * H + y) * W;
            Real* dst = tmp1.data() + (static_cast<std::size_t>(z) * H + y) * W;
            for (int x = 0; x < W; ++x) {
                Real s = 0;
                for (int k = std::max(0, x - r); k <= std::min(W - 1, x + r); ++k) s += src[k];
                dst[x] = s;
            }
        }
    for (int z = 0; z < D; ++z)
        for (int x = 0; x < W; ++x)
            for (int y = 0; y < H; ++y) {
                Real s = 0;
                for (int k = std::max(0, y - r); k <= std::min(H - 1, y + r); ++k)
                    s += tmp1[(static_cast<std::size_t>(z) * H + k) * W + x];
                tmp2[(static_cast<std::size_t>(z) * H + y) * W + x] = s;
            }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int z = 0; z < D; ++z) {
                Real s = 0;
                for (int k = std::max(0, z - r); k <= std::min(D - 1, z + r); ++k)
                    s += tmp2[(static_cast<std::size_t>(k) * H + y) * W + x];
                out[(static_cast<std::size_t>(z) * H + y) * W + x] = s;
            }
}

template <class Real>
Tensor<Real> box_sum3(const Tensor<Real>& x, int window) {
    check(x.shape().size() == 3, "box_sum3: expected [D,H,W], got " + shape_str(x.shape()));
    check(window >= 1 && window % 2 == 1, "box_sum3: window must be odd and positive");
    const int D = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Tensor<Real> out(x.shape());
    box_sum3_values(x.values().data(), out.values().data(), D, H, W, window);
    if (any_tracked<Real>({&x})) {
        auto nx = x.node();
        attach_node(out, {&x}, [nx, D, H, W, window](const std::vector<Real>& g) {
            if (!node_wants_grad(nx.get())) return;
            auto& gx = nx->grad_buf();
            std::vector<Real> gb(g.size());
            box_sum3_values(g.data(), gb.data(), D, H, W, window);
            for (std::size_t i = 0; i < gb.size(); ++i) gx[i] += gb[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class Real>
inline void topo_collect(Node<Real>* root, std::vector<Node<Real>*>& order) {
    // Iterative post-order DFS; order depends only on graph structure.
    std::unordered_set<const Node<Real>*> visited;
    std::vector<std::pair<Node<Real>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<Real>* p = node->parents[idx++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

// Runs one reverse sweep from `loss` (a scalar). Intermediate node gradients
// in the swept subgraph are reset first; leaf gradients accumulate across
// sweeps until clear_grad(). When `allowed_leaves` is non-null, only those
// leaves receive gradient (used to keep the diversity loss out of the shared
// backbone).
template <class Real>
void backward(const Tensor<Real>& loss,
              const std::unordered_set<const Node<Real>*>* allowed_leaves = nullptr) {
    check(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    check(loss.tracked(), "backward: loss is not part of a gradient graph");
    std::vector<Node<Real>*> order;
    topo_collect(loss.node().get(), order);
    for (Node<Real>* n : order)
        if (!n->is_leaf) n->grad.assign(static_cast<std::size_t>(shape_numel(n->shape)), Real(0));
    loss.node()->grad_buf()[0] = Real(1);
    leaf_filter<Real>() = allowed_leaves;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Real>* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop(n->grad);
    }
    leaf_filter<Real>() = nullptr;
}

// Convenience operators (equal-shape or scalar forms only).
template <class Real> Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <class Real> Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <class Real> Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <class Real> Tensor<Real> operator/(const Tensor<Real>& a, const Tensor<Real>& b) { return div(a, b); }
template <class Real> Tensor<Real> operator+(const Tensor<Real>& a, Real s) { return add_scalar(a, s); }
template <class Real> Tensor<Real> operator*(const Tensor<Real>& a, Real s) { return mul_scalar(a, s); }
template <class Real> Tensor<Real> operator*(Real s, const Tensor<Real>& a) { return mul_scalar(a, s); }
template <class Real> Tensor<Real> operator-(const Tensor<Real>& a) { return neg(a); }

}  // namespace dgrnet
