#include "advrank/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace advrank {

namespace detail {

// Per-input gradient buffers handed to a node's backward closure; an entry
// is null when that input does not require grad.
using GradInputs = std::vector<std::vector<double>*>;
using BackwardFn = std::function<void(const std::vector<double>& grad_out, GradInputs& grad_in)>;

struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    bool grad_allocated = false;
    std::vector<double> grad;
    std::shared_ptr<Node> node;
};

}  // namespace detail

using detail::GradInputs;
using detail::TensorImpl;

namespace {

thread_local std::uint64_t g_backward_passes = 0;
thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    std::ostringstream os;
    os << op << ": shape mismatch " << shape_string(a) << " vs " << shape_string(b);
    throw std::invalid_argument(os.str());
}

void require(const Tensor& t, const char* op) {
    if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, detail::BackwardFn fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool any = false;
    if (g_grad_enabled)
        for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
        impl->requires_grad = true;
        auto node = std::make_shared<detail::Node>();
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.impl());
        node->backward = std::move(fn);
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

Shape mat(std::size_t r, std::size_t c) { return Shape{r, c}; }

// c[n x m] += a[n x k] * b[k x m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = c + i * m;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[n x m] += a[n x k] * b[m x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// c[k x m] += a[n x k]^T * b[n x m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename F>
Tensor unary(const Tensor& a, const char* op, F&& f, std::function<double(double x, double y)> dfdx) {
    require(a, op);
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    auto out_copy = std::make_shared<std::vector<double>>(out);
    return make_result(a.shape(), std::move(out), {a},
                       [a, out_copy, dfdx](const std::vector<double>& g, GradInputs& gi) {
                           auto x = a.data();
                           auto& ga = *gi[0];
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], (*out_copy)[i]);
                       });
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("Tensor::from: shape " + shape_string(shape) + " holds " +
                                    std::to_string(shape_numel(shape)) + " elements, got " +
                                    std::to_string(data.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::matrix(const std::vector<std::vector<double>>& rows, bool requires_grad) {
    const std::size_t n = rows.size();
    const std::size_t m = n ? rows.front().size() : 0;
    std::vector<double> data;
    data.reserve(n * m);
    for (const auto& r : rows) {
        if (r.size() != m) throw std::invalid_argument("Tensor::matrix: ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return from(mat(n, m), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from(Shape{1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data.size(); }

std::size_t Tensor::cols() const {
    const auto& s = impl_->shape;
    return s.empty() ? 1 : s.back();
}

std::size_t Tensor::rows() const {
    const auto c = cols();
    return c == 0 ? 0 : numel() / c;
}

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }
double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data.at(r * cols() + c); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor of shape " + shape_string(shape()) + " is not a scalar");
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    if (!flag) clear_grad();
    return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad_allocated; }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient allocated");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!has_grad()) throw std::logic_error("Tensor::mutable_grad: no gradient allocated");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->requires_grad) return;
    impl_->grad.assign(impl_->data.size(), 0.0);
    impl_->grad_allocated = true;
}

void Tensor::clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
    impl_->grad_allocated = false;
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) shape_error("reshape", shape(), new_shape);
    return make_result(std::move(new_shape), impl_->data, {*this},
                       [](const std::vector<double>& g, GradInputs& gi) {
                           auto& ga = *gi[0];
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       });
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
    require(loss, "backward");
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) throw std::invalid_argument("backward: loss is not attached to any graph");

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto* node = impl->node.get();
        if (node && next < node->inputs.size()) {
            TensorImpl* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(impl);
            stack.pop_back();
        }
    }

    std::unordered_map<TensorImpl*, std::vector<double>> local;
    local.reserve(order.size());
    local[loss.impl().get()] = std::vector<double>(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        if (!impl->node) continue;
        auto found = local.find(impl);
        if (found == local.end()) continue;
        const std::vector<double>& gout = found->second;
        GradInputs gin;
        gin.reserve(impl->node->inputs.size());
        for (const auto& in : impl->node->inputs) {
            if (!in->requires_grad) {
                gin.push_back(nullptr);
                continue;
            }
            auto& buf = local[in.get()];
            if (buf.empty()) buf.assign(in->data.size(), 0.0);
            gin.push_back(&buf);
        }
        impl->node->backward(gout, gin);
    }

    for (TensorImpl* impl : order) {
        auto found = local.find(impl);
        if (found == local.end()) continue;
        if (!impl->grad_allocated) {
            impl->grad.assign(impl->data.size(), 0.0);
            impl->grad_allocated = true;
        }
        const auto& g = found->second;
        for (std::size_t i = 0; i < g.size(); ++i) impl->grad[i] += g[i];
    }
    ++g_backward_passes;
}

std::uint64_t backward_pass_count() { return g_backward_passes; }
void reset_backward_pass_count() { g_backward_passes = 0; }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a, "matmul");
    require(b, "matmul");
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> out(n * m, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
    return make_result(mat(n, m), std::move(out), {a, b}, [a, b, n, k, m](const std::vector<double>& g, GradInputs& gi) {
        if (gi[0]) gemm_nt(g.data(), b.data().data(), gi[0]->data(), n, m, k);
        if (gi[1]) gemm_tn(a.data().data(), g.data(), gi[1]->data(), n, k, m);
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a, "matmul_nt");
    require(b, "matmul_nt");
    if (a.cols() != b.cols()) shape_error("matmul_nt", a.shape(), b.shape());
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    std::vector<double> out(n * m, 0.0);
    gemm_nt(a.data().data(), b.data().data(), out.data(), n, k, m);
    return make_result(mat(n, m), std::move(out), {a, b}, [a, b, n, k, m](const std::vector<double>& g, GradInputs& gi) {
        // out = a b^T: ga = g b, gb = g^T a
        if (gi[0]) gemm_nn(g.data(), b.data().data(), gi[0]->data(), n, m, k);
        if (gi[1]) gemm_tn(g.data(), a.data().data(), gi[1]->data(), n, m, k);
    });
}

Tensor transpose(const Tensor& a) {
    require(a, "transpose");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * m);
    auto in = a.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = in[i * m + j];
    return make_result(mat(m, n), std::move(out), {a}, [n, m](const std::vector<double>& g, GradInputs& gi) {
        auto& ga = *gi[0];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
    });
}

// ---- elementwise -----------------------------------------------------------

namespace {

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
    return b.rows() == 1 && b.cols() == a.cols() && a.numel() != b.numel();
}

Tensor add_or_sub(const Tensor& a, const Tensor& b, double sign, const char* op) {
    require(a, op);
    require(b, op);
    const bool broadcast = is_row_broadcast(a, b);
    if (!broadcast && a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
    const std::size_t m = a.cols();
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bd[broadcast ? i % m : i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [broadcast, m, sign](const std::vector<double>& g, GradInputs& gi) {
                           if (gi[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                           if (gi[1])
                               for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[broadcast ? i % m : i] += sign * g[i];
                       });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_or_sub(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_or_sub(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a, "mul");
    require(b, "mul");
    if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    std::vector<double> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g, GradInputs& gi) {
        auto ad = a.data(), bd = b.data();
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * bd[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * ad[i];
    });
}

Tensor scale(const Tensor& a, double c) {
    return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
    return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor log1p(const Tensor& a) {
    return unary(a, "log1p", [](double x) { return std::log1p(x); }, [](double x, double) { return 1.0 / (1.0 + x); });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
    require(a, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result(Shape{1}, {s}, {a}, [](const std::vector<double>& g, GradInputs& gi) {
        for (auto& v : *gi[0]) v += g[0];
    });
}

Tensor mean(const Tensor& a) {
    require(a, "mean");
    if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor l2_norm(const Tensor& a) {
    require(a, "l2_norm");
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    const double norm = std::sqrt(s);
    return make_result(Shape{1}, {norm}, {a}, [a, norm](const std::vector<double>& g, GradInputs& gi) {
        if (norm == 0.0) return;  // subgradient 0 at the origin
        auto x = a.data();
        for (std::size_t i = 0; i < x.size(); ++i) (*gi[0])[i] += g[0] * x[i] / norm;
    });
}

Tensor mean_rows(const Tensor& a) {
    require(a, "mean_rows");
    const std::size_t n = a.rows(), m = a.cols();
    if (n == 0) throw std::invalid_argument("mean_rows: no rows");
    std::vector<double> out(m, 0.0);
    auto x = a.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j] += x[i * m + j];
    for (auto& v : out) v /= static_cast<double>(n);
    return make_result(mat(1, m), std::move(out), {a}, [n, m](const std::vector<double>& g, GradInputs& gi) {
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gi[0])[i * m + j] += g[j] * inv;
    });
}

Tensor max_rows(const Tensor& a) {
    require(a, "max_rows");
    const std::size_t n = a.rows(), m = a.cols();
    if (n == 0) throw std::invalid_argument("max_rows: no rows");
    std::vector<double> out(m);
    std::vector<std::size_t> arg(m, 0);
    auto x = a.data();
    for (std::size_t j = 0; j < m; ++j) {
        double best = x[j];
        for (std::size_t i = 1; i < n; ++i) {
            if (x[i * m + j] > best) {
                best = x[i * m + j];
                arg[j] = i;
            }
        }
        out[j] = best;
    }
    return make_result(mat(1, m), std::move(out), {a}, [arg, m](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t j = 0; j < m; ++j) (*gi[0])[arg[j] * m + j] += g[j];
    });
}

Tensor softmax_rows(const Tensor& a) {
    require(a, "softmax_rows");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return make_result(a.shape(), std::move(out), {a}, [y, n, m](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * (*y)[i * m + j];
            for (std::size_t j = 0; j < m; ++j) (*gi[0])[i * m + j] += (*y)[i * m + j] * (g[i * m + j] - dot);
        }
    });
}

Tensor log_softmax_rows(const Tensor& a) {
    require(a, "log_softmax_rows");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = row[j] - lse;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return make_result(a.shape(), std::move(out), {a}, [y, n, m](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t i = 0; i < n; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < m; ++j) gs += g[i * m + j];
            for (std::size_t j = 0; j < m; ++j) (*gi[0])[i * m + j] += g[i * m + j] - std::exp((*y)[i * m + j]) * gs;
        }
    });
}

Tensor logsumexp_rows(const Tensor& a) {
    require(a, "logsumexp_rows");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n);
    auto x = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
        out[i] = mx + std::log(z);
    }
    auto lse = std::make_shared<std::vector<double>>(out);
    return make_result(mat(n, 1), std::move(out), {a}, [a, lse, n, m](const std::vector<double>& g, GradInputs& gi) {
        auto x = a.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gi[0])[i * m + j] += g[i] * std::exp(x[i * m + j] - (*lse)[i]);
    });
}

Tensor dot_rows(const Tensor& a, const Tensor& b) {
    require(a, "dot_rows");
    require(b, "dot_rows");
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("dot_rows", a.shape(), b.shape());
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n, 0.0);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i] += ad[i * m + j] * bd[i * m + j];
    return make_result(mat(n, 1), std::move(out), {a, b}, [a, b, n, m](const std::vector<double>& g, GradInputs& gi) {
        auto ad = a.data(), bd = b.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                if (gi[0]) (*gi[0])[i * m + j] += g[i] * bd[i * m + j];
                if (gi[1]) (*gi[1])[i * m + j] += g[i] * ad[i * m + j];
            }
    });
}

// ---- indexing --------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> indices) {
    require(table, "gather_rows");
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<double> out(indices.size() * d);
    auto t = table.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto idx = indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
            throw std::out_of_range("gather_rows: index " + std::to_string(idx) + " outside table of " +
                                    std::to_string(v) + " rows");
        }
        std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(idx * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    std::vector<std::int32_t> idx(indices.begin(), indices.end());
    return make_result(mat(indices.size(), d), std::move(out), {table},
                       [idx = std::move(idx), d](const std::vector<double>& g, GradInputs& gi) {
                           auto& gt = *gi[0];
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                               const std::size_t base = static_cast<std::size_t>(idx[i]) * d;
                               for (std::size_t j = 0; j < d; ++j) gt[base + j] += g[i * d + j];
                           }
                       });
}

Tensor gather_cols(const Tensor& a, std::span<const std::size_t> indices, std::size_t k) {
    require(a, "gather_cols");
    const std::size_t n = a.rows(), m = a.cols();
    if (indices.size() != n * k) {
        throw std::invalid_argument("gather_cols: expected " + std::to_string(n * k) + " indices for " +
                                    shape_string(a.shape()) + ", got " + std::to_string(indices.size()));
    }
    std::vector<double> out(n * k);
    auto x = a.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const auto c = indices[i * k + j];
            if (c >= m) throw std::out_of_range("gather_cols: column " + std::to_string(c) + " >= " + std::to_string(m));
            out[i * k + j] = x[i * m + c];
        }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return make_result(mat(n, k), std::move(out), {a}, [idx = std::move(idx), n, m, k](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) (*gi[0])[i * m + idx[i * k + j]] += g[i * k + j];
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require(a, "concat_cols");
    require(b, "concat_cols");
    if (a.rows() != b.rows()) shape_error("concat_cols", a.shape(), b.shape());
    const std::size_t n = a.rows(), ma = a.cols(), mb = b.cols(), m = ma + mb;
    std::vector<double> out(n * m);
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(i * ma), ma, out.begin() + static_cast<std::ptrdiff_t>(i * m));
        std::copy_n(bd.begin() + static_cast<std::ptrdiff_t>(i * mb), mb, out.begin() + static_cast<std::ptrdiff_t>(i * m + ma));
    }
    return make_result(mat(n, m), std::move(out), {a, b}, [n, ma, mb, m](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t i = 0; i < n; ++i) {
            if (gi[0])
                for (std::size_t j = 0; j < ma; ++j) (*gi[0])[i * ma + j] += g[i * m + j];
            if (gi[1])
                for (std::size_t j = 0; j < mb; ++j) (*gi[1])[i * mb + j] += g[i * m + ma + j];
        }
    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require(a, "concat_rows");
    require(b, "concat_rows");
    if (a.cols() != b.cols()) shape_error("concat_rows", a.shape(), b.shape());
    const std::size_t na = a.numel(), m = a.cols();
    std::vector<double> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t n = out.size() / std::max<std::size_t>(m, 1);
    return make_result(mat(n, m), std::move(out), {a, b}, [na](const std::vector<double>& g, GradInputs& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < na; ++i) (*gi[0])[i] += g[i];
        if (gi[1])
            for (std::size_t i = na; i < g.size(); ++i) (*gi[1])[i - na] += g[i];
    });
}

Tensor broadcast_rows(const Tensor& row, std::size_t n) {
    require(row, "broadcast_rows");
    if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: expected a single row, got " + shape_string(row.shape()));
    const std::size_t m = row.cols();
    std::vector<double> out(n * m);
    auto r = row.data();
    for (std::size_t i = 0; i < n; ++i) std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>(i * m));
    return make_result(mat(n, m), std::move(out), {row}, [n, m](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gi[0])[j] += g[i * m + j];
    });
}

// ---- pooling ---------------------------------------------------------------

namespace {

void check_pool(const Tensor& x, std::span<const double> mask, std::size_t groups, const char* op) {
    require(x, op);
    if (groups == 0 || x.rows() % groups != 0 || mask.size() != x.rows()) {
        throw std::invalid_argument(std::string(op) + ": " + shape_string(x.shape()) + " cannot be split into " +
                                    std::to_string(groups) + " groups with a mask of " + std::to_string(mask.size()));
    }
}

}  // namespace

Tensor masked_mean_pool(const Tensor& x, std::span<const double> mask, std::size_t groups) {
    check_pool(x, mask, groups, "masked_mean_pool");
    const std::size_t len = x.rows() / groups, d = x.cols();
    std::vector<double> out(groups * d, 0.0);
    std::vector<double> weight(x.rows(), 0.0);
    auto xd = x.data();
    for (std::size_t b = 0; b < groups; ++b) {
        double count = 0.0;
        for (std::size_t t = 0; t < len; ++t) count += mask[b * len + t] != 0.0 ? 1.0 : 0.0;
        if (count == 0.0) continue;
        for (std::size_t t = 0; t < len; ++t) {
            const std::size_t r = b * len + t;
            if (mask[r] == 0.0) continue;
            weight[r] = 1.0 / count;
            for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xd[r * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= count;
    }
    return make_result(mat(groups, d), std::move(out), {x},
                       [weight = std::move(weight), len, d](const std::vector<double>& g, GradInputs& gi) {
                           for (std::size_t r = 0; r < weight.size(); ++r) {
                               if (weight[r] == 0.0) continue;
                               const std::size_t b = r / len;
                               for (std::size_t j = 0; j < d; ++j) (*gi[0])[r * d + j] += g[b * d + j] * weight[r];
                           }
                       });
}

Tensor masked_max_pool(const Tensor& x, std::span<const double> mask, std::size_t groups) {
    check_pool(x, mask, groups, "masked_max_pool");
    const std::size_t len = x.rows() / groups, d = x.cols();
    constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
    std::vector<double> out(groups * d, 0.0);
    std::vector<std::size_t> arg(groups * d, kNone);
    auto xd = x.data();
    for (std::size_t b = 0; b < groups; ++b) {
        for (std::size_t t = 0; t < len; ++t) {
            const std::size_t r = b * len + t;
            if (mask[r] == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) {
                auto& a = arg[b * d + j];
                if (a == kNone || xd[r * d + j] > out[b * d + j]) {
                    out[b * d + j] = xd[r * d + j];
                    a = r;
                }
            }
        }
    }
    return make_result(mat(groups, d), std::move(out), {x}, [arg = std::move(arg), d](const std::vector<double>& g, GradInputs& gi) {
        for (std::size_t o = 0; o < arg.size(); ++o) {
            if (arg[o] == kNone) continue;
            (*gi[0])[arg[o] * d + o % d] += g[o];
        }
    });
}

// ---- optimizers ------------------------------------------------------------

namespace {

void require_grads(const ParameterList& params, const char* op) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) throw std::logic_error(std::string(op) + ": parameter '" + p.name + "' has no gradient");
    }
}

}  // namespace

void zero_grads(const ParameterList& params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

void sgd_step(const ParameterList& params, double learning_rate) {
    require_grads(params, "sgd_step");
    for (const auto& p : params) {
        Tensor t = p.tensor;
        auto w = t.mutable_data();
        auto g = t.grad();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learning_rate * g[i];
    }
}

void adam_step(const ParameterList& params, AdamState& state, const AdamHyperparams& hp) {
    require_grads(params, "adam_step");
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.tensor.numel(), 0.0);
            state.second_moment.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameter list");
    ++state.step;
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor t = params[k].tensor;
        auto w = t.mutable_data();
        auto g = t.grad();
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        if (m.size() != w.size()) throw std::invalid_argument("adam_step: state size mismatch for '" + params[k].name + "'");
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            w[i] -= hp.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + hp.eps);
        }
    }
}

}  // namespace advrank
