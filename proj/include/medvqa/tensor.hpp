#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace medvqa {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

namespace detail {

// One entry of the computation tape. Non-leaf nodes carry the references to
// their inputs and a local backward rule; the tape order is recovered by a
// topological sort from the loss node.
struct TapeNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TapeNode>> parents;
    std::function<void(TapeNode&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Dense float64 matrix participating in a reverse-mode differentiation graph.
// Value-semantic handle: copies share the underlying node. Data is row-major.
// All model tensors are 2-D; scalars are 1x1.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(int rows, int cols) {
        return Tensor(std::make_shared<detail::TapeNode>(
            detail::TapeNode{{rows, cols}, std::vector<double>(shape_numel({rows, cols}), 0.0)}));
    }

    static Tensor full(int rows, int cols, double v) {
        return Tensor(std::make_shared<detail::TapeNode>(
            detail::TapeNode{{rows, cols}, std::vector<double>(shape_numel({rows, cols}), v)}));
    }

    static Tensor from_values(int rows, int cols, std::vector<double> values) {
        if (values.size() != shape_numel({rows, cols}))
            throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str({rows, cols}));
        return Tensor(std::make_shared<detail::TapeNode>(detail::TapeNode{{rows, cols}, std::move(values)}));
    }

    static Tensor scalar(double v) { return from_values(1, 1, {v}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node().shape; }
    int rows() const { return node().shape.at(0); }
    int cols() const { return node().shape.at(1); }
    std::size_t numel() const { return node().data.size(); }

    double at(int r, int c) const { return node().data[static_cast<std::size_t>(r) * cols() + c]; }
    double value() const {
        if (numel() != 1) throw std::invalid_argument("value() requires a scalar, got " + shape_str(shape()));
        return node().data[0];
    }

    std::vector<double>& data() { return node().data; }
    const std::vector<double>& data() const { return node().data; }

    bool requires_grad() const { return node().requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node().requires_grad = b;
        if (b) node().ensure_grad();
        return *this;
    }

    const std::vector<double>& grad() const {
        const_cast<detail::TapeNode&>(node()).ensure_grad();
        return node().grad;
    }
    double grad_at(int r, int c) const { return grad()[static_cast<std::size_t>(r) * cols() + c]; }
    void zero_grad() {
        node().ensure_grad();
        std::fill(node().grad.begin(), node().grad.end(), 0.0);
    }

    bool is_leaf() const { return !node().backward; }

    // Copy of the values as a fresh constant leaf, cut off from the tape.
    Tensor detach() const {
        return Tensor(std::make_shared<detail::TapeNode>(detail::TapeNode{node().shape, node().data}));
    }

    void validate_finite(const std::string& what) const {
        for (double v : node().data)
            if (!std::isfinite(v)) throw std::invalid_argument(what + ": non-finite value encountered");
    }

    detail::TapeNode& node() {
        if (!node_) throw std::logic_error("use of default-constructed Tensor");
        return *node_;
    }
    const detail::TapeNode& node() const {
        if (!node_) throw std::logic_error("use of default-constructed Tensor");
        return *node_;
    }
    const std::shared_ptr<detail::TapeNode>& handle() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::TapeNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::TapeNode> node_;
};

namespace detail {

inline bool& grad_enabled() {
    static thread_local bool enabled = true;
    return enabled;
}

inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      std::function<void(TapeNode&)> backward) {
    auto node = std::make_shared<TapeNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs_grad = false;
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
    needs_grad = needs_grad && grad_enabled();
    if (needs_grad) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.handle());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline void check_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto &ad = a.data(), &bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto &ad = a.data(), &bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto &ad = a.data(), &bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    const auto &ad = a.data(), &bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / bd[i];
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] / pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb->grad[i] -= n.grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, c](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * c;
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + c;
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

// m x n plus 1 x n, broadcast over rows (bias add).
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "add_rowvec");
    if (b.rows() != 1 || b.cols() != a.cols())
        throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    const auto &ad = a.data(), &bd = b.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) out[i * c + j] = ad[i * c + j] + bd[j];
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb, m, c](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) pb->grad[j] += n.grad[i * c + j];
        }
    });
}

// m x n plus m x 1, broadcast over columns.
inline Tensor add_colvec(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "add_colvec");
    if (b.cols() != 1 || b.rows() != a.rows())
        throw std::invalid_argument("add_colvec: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    const auto &ad = a.data(), &bd = b.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) out[i * c + j] = ad[i * c + j] + bd[i];
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb, m, c](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) pb->grad[i] += n.grad[i * c + j];
        }
    });
}

// a plus a 1x1 tensor broadcast to every element.
inline Tensor add_bscalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("add_bscalar: second argument must be 1x1, got " + shape_str(s.shape()));
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    const double sv = s.data()[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + sv;
    auto pa = a.handle(), ps = s.handle();
    return detail::make_op(a.shape(), std::move(out), {a, s}, [pa, ps](detail::TapeNode& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (ps->requires_grad) {
            ps->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) ps->grad[0] += n.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace detail {
// c += a(m x k) * b(k x n), row-major, ikj order
inline void matmul_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "matmul");
    detail::check_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    detail::matmul_acc(out.data(), a.data().data(), b.data().data(), m, k, n);
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](detail::TapeNode& node) {
        const double* g = node.grad.data();
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA += dC . B^T
            double* da = pa->grad.data();
            const double* bd = pb->data.data();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* gi = g + static_cast<std::size_t>(i) * n;
                    const double* bk = bd + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) acc += gi[j] * bk[j];
                    da[static_cast<std::size_t>(i) * k + kk] += acc;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB += A^T . dC
            double* db = pb->grad.data();
            const double* ad = pa->data.data();
            for (int i = 0; i < m; ++i) {
                const double* ai = ad + static_cast<std::size_t>(i) * k;
                const double* gi = g + static_cast<std::size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const double av = ai[kk];
                    double* dbk = db + static_cast<std::size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) dbk[j] += av * gi[j];
                }
            }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::check_2d(a, "transpose");
    const int m = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * m + i] = ad[static_cast<std::size_t>(i) * c + j];
    auto pa = a.handle();
    return detail::make_op({c, m}, std::move(out), {a}, [pa, m, c](detail::TapeNode& n) {
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j)
                pa->grad[static_cast<std::size_t>(i) * c + j] += n.grad[static_cast<std::size_t>(j) * m + i];
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * ad[i] * (1.0 + std::erf(ad[i] * M_SQRT1_2));
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = pa->data[i];
            const double d = 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            pa->grad[i] += n.grad[i] * d;
        }
    });
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] >= 0.0 ? ad[i] : slope * ad[i];
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, slope](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * (pa->data[i] >= 0.0 ? 1.0 : slope);
    });
}

inline Tensor elu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] >= 0.0 ? ad[i] : std::expm1(ad[i]);
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * (pa->data[i] >= 0.0 ? 1.0 : std::exp(pa->data[i]));
    });
}

inline Tensor sqrt_elems(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(ad[i]);
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * 0.5 / std::sqrt(pa->data[i]);
    });
}

// Row-wise softmax with per-row max subtraction for stability.
inline Tensor softmax_rows(const Tensor& a) {
    detail::check_2d(a, "softmax_rows");
    a.validate_finite("softmax_rows input");
    const int m = a.rows(), c = a.cols();
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i) {
        const double* row = ad.data() + static_cast<std::size_t>(i) * c;
        double* orow = out.data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < c; ++j) orow[j] /= sum;
    }
    auto pa = a.handle();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, m, c](detail::TapeNode& n) {
        pa->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = n.data.data() + static_cast<std::size_t>(i) * c;
            const double* g = n.grad.data() + static_cast<std::size_t>(i) * c;
            double* dx = pa->grad.data() + static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += g[j] * y[j];
            for (int j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
        }
    });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

// Per-row standardization followed by a per-feature affine map.
// gain and bias are 1 x d.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    detail::check_2d(x, "layer_norm");
    const int m = x.rows(), d = x.cols();
    if (d < 2) throw std::invalid_argument("layer_norm: feature width must be >= 2, got " + shape_str(x.shape()));
    if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
        throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(d));
    std::vector<double> out(x.numel());
    const auto &xd = x.data(), &gd = gain.data(), &bd = bias.data();
    for (int i = 0; i < m; ++i) {
        const double* row = xd.data() + static_cast<std::size_t>(i) * d;
        double* orow = out.data() + static_cast<std::size_t>(i) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        for (int j = 0; j < d; ++j) orow[j] = (row[j] - mean) * inv * gd[j] + bd[j];
    }
    auto px = x.handle(), pg = gain.handle(), pb = bias.handle();
    return detail::make_op(x.shape(), std::move(out), {x, gain, bias}, [px, pg, pb, m, d](detail::TapeNode& n) {
        for (int i = 0; i < m; ++i) {
            const double* row = px->data.data() + static_cast<std::size_t>(i) * d;
            const double* g = n.grad.data() + static_cast<std::size_t>(i) * d;
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += row[j];
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int j = 0; j < d; ++j) pb->grad[j] += g[j];
            }
            if (pg->requires_grad) {
                pg->ensure_grad();
                for (int j = 0; j < d; ++j) pg->grad[j] += g[j] * (row[j] - mean) * inv;
            }
            if (px->requires_grad) {
                px->ensure_grad();
                double* dx = px->grad.data() + static_cast<std::size_t>(i) * d;
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double xhat = (row[j] - mean) * inv;
                    const double dxhat = g[j] * pg->data[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= d;
                mean_dxhat_xhat /= d;
                for (int j = 0; j < d; ++j) {
                    const double xhat = (row[j] - mean) * inv;
                    const double dxhat = g[j] * pg->data[j];
                    dx[j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions, reshuffles, lookups
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto pa = a.handle();
    return detail::make_op({1, 1}, {s}, {a}, [pa](detail::TapeNode& n) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += n.grad[0];
    });
}

// Mean over the token (row) axis: m x d -> 1 x d.
inline Tensor mean_rows(const Tensor& a) {
    detail::check_2d(a, "mean_rows");
    const int m = a.rows(), d = a.cols();
    std::vector<double> out(d, 0.0);
    const auto& ad = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) out[j] += ad[static_cast<std::size_t>(i) * d + j];
    for (int j = 0; j < d; ++j) out[j] /= m;
    auto pa = a.handle();
    return detail::make_op({1, d}, std::move(out), {a}, [pa, m, d](detail::TapeNode& n) {
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) pa->grad[static_cast<std::size_t>(i) * d + j] += n.grad[j] / m;
    });
}

// Stack along the token (row) axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int d = parts[0].cols();
    int total = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_rows");
        if (p.cols() != d)
            throw std::invalid_argument("concat_rows: width mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total) * d);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<detail::TapeNode>> handles;
    for (const auto& p : parts) handles.push_back(p.handle());
    return detail::make_op({total, d}, std::move(out), parts, [handles](detail::TapeNode& n) {
        std::size_t off = 0;
        for (const auto& h : handles) {
            if (h->requires_grad) {
                h->ensure_grad();
                for (std::size_t i = 0; i < h->grad.size(); ++i) h->grad[i] += n.grad[off + i];
            }
            off += h->data.size();
        }
    });
}

// Stack along the feature (column) axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int m = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_cols");
        if (p.rows() != m)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += p.cols();
    }
    std::vector<double> out(static_cast<std::size_t>(m) * total);
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * total + off + j] = p.at(i, j);
        off += c;
    }
    std::vector<std::shared_ptr<detail::TapeNode>> handles;
    std::vector<int> widths;
    for (const auto& p : parts) {
        handles.push_back(p.handle());
        widths.push_back(p.cols());
    }
    return detail::make_op({m, total}, std::move(out), parts, [handles, widths, m, total](detail::TapeNode& n) {
        int off = 0;
        for (std::size_t k = 0; k < handles.size(); ++k) {
            const int c = widths[k];
            if (handles[k]->requires_grad) {
                handles[k]->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < c; ++j)
                        handles[k]->grad[static_cast<std::size_t>(i) * c + j] +=
                            n.grad[static_cast<std::size_t>(i) * total + off + j];
            }
            off += c;
        }
    });
}

// Embedding lookup: selects table rows by index; backward scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    detail::check_2d(table, "gather_rows");
    if (ids.empty()) throw std::invalid_argument("gather_rows: empty index list");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::out_of_range("gather_rows: index " + std::to_string(id) + " outside table " + shape_str(table.shape()));
    std::vector<double> out(ids.size() * static_cast<std::size_t>(d));
    const auto& td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    auto pt = table.handle();
    return detail::make_op({static_cast<int>(ids.size()), d}, std::move(out), {table}, [pt, ids, d](detail::TapeNode& n) {
        pt->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j)
                pt->grad[static_cast<std::size_t>(ids[i]) * d + j] += n.grad[i * d + j];
    });
}

// Mean over classes of sigmoid binary cross-entropy in the stable log-sum
// form. The target is a constant (it must not require gradients).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
    detail::check_same_shape(logits, target, "bce_with_logits");
    if (target.requires_grad()) throw std::invalid_argument("bce_with_logits: target must not require gradients");
    const auto &zd = logits.data(), &yd = target.data();
    const double count = static_cast<double>(zd.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < zd.size(); ++i) {
        const double z = zd[i];
        loss += std::max(z, 0.0) - z * yd[i] + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= count;
    auto pz = logits.handle(), py = target.handle();
    return detail::make_op({1, 1}, {loss}, {logits, target}, [pz, py, count](detail::TapeNode& n) {
        pz->ensure_grad();
        for (std::size_t i = 0; i < pz->grad.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-pz->data[i]));
            pz->grad[i] += n.grad[0] * (sig - py->data[i]) / count;
        }
    });
}

// ---------------------------------------------------------------------------
// Reverse sweep
// ---------------------------------------------------------------------------

namespace detail {
// Inputs-before-outputs order of the recorded operations reachable from root.
// Iterative DFS; each node is visited exactly once.
inline std::vector<TapeNode*> tape_order(TapeNode* root) {
    std::vector<TapeNode*> order;
    std::vector<std::pair<TapeNode*, std::size_t>> stack;
    std::unordered_set<TapeNode*> visited;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TapeNode* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}
}  // namespace detail

// Scoped suppression of tape recording; forwards inside the scope produce
// plain values.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Populates grad on every requires_grad leaf reachable from the scalar loss.
// Leaf gradients accumulate across calls; intermediate gradients are
// re-derived per sweep.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto* root = const_cast<detail::TapeNode*>(&loss.node());
    if (!root->requires_grad) return;  // nothing reachable requires gradients
    auto order = detail::tape_order(root);
    for (auto* n : order)
        if (n->backward) {  // sweep-local buffers; leaves keep accumulating
            n->grad.assign(n->data.size(), 0.0);
        }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

}  // namespace medvqa
