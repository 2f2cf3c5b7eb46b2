#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep over the tape.
// Parameters live in a ParamStore outside any graph; Graph::param() creates a
// leaf that forwards its adjoint into Parameter::grad unless the parameter is
// frozen. A Graph constructed with recording disabled only evaluates values.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ravqa/errors.hpp"
#include "ravqa/tensor.hpp"

namespace ravqa {

struct Parameter {
    Tensor value;
    Tensor grad;
    bool frozen = false;
};

class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor init, bool frozen = false) {
        auto [it, inserted] = params_.try_emplace(name);
        if (!inserted) {
            throw ContractError("parameter \"" + name + "\" already exists");
        }
        it->second.grad = Tensor::zeros(init.shape());
        it->second.value = std::move(init);
        it->second.frozen = frozen;
        return it->second;
    }

    Parameter& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) {
            throw ContractError("unknown parameter \"" + name + "\"");
        }
        return it->second;
    }
    const Parameter& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t size() const noexcept { return params_.size(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [name, _] : params_) {
            out.push_back(name);
        }
        return out;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) {
            std::fill(p.grad.storage().begin(), p.grad.storage().end(), 0.0);
        }
    }

    // Marks every parameter whose name starts with `prefix`; returns how many matched.
    std::size_t set_frozen(std::string_view prefix, bool frozen) {
        std::size_t n = 0;
        for (auto& [name, p] : params_) {
            if (std::string_view(name).substr(0, prefix.size()) == prefix) {
                p.frozen = frozen;
                ++n;
            }
        }
        return n;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) {
            n += p.value.size();
        }
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Parameter> params_;
};

class Graph;

// Handle to a node on a Graph tape.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Tensor::Shape& shape() const { return value().shape(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

    explicit Graph(bool record = true) : record_(record) { nodes_.reserve(256); }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor value) {
        Node n;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    // Leaf bound to a stored parameter; repeated calls return the same node.
    Var param(Parameter& p) {
        if (auto it = param_ids_.find(&p); it != param_ids_.end()) {
            return {this, it->second};
        }
        Node n;
        n.external = &p.value;
        n.param = &p;
        n.needs_grad = record_ && !p.frozen;
        nodes_.push_back(std::move(n));
        param_ids_.emplace(&p, nodes_.size() - 1);
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }

    bool needs_grad(Var v) const noexcept { return nodes_[v.id].needs_grad; }

    // Appends an op result. `fn` is kept only when some input carries gradient.
    Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return push(std::move(value), std::vector<Var>(inputs), std::move(fn));
    }

    Var push(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
        Node n;
        n.value = std::move(value);
        if (record_) {
            for (const Var& in : inputs) {
                if (in.graph != this) {
                    throw ContractError("operation mixes variables from different graphs");
                }
                n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
            }
            if (n.needs_grad) {
                n.backward = std::move(fn);
            }
        }
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    // Adjoint buffer of an input; null when that input does not need gradient.
    Tensor* grad_of(Var v) {
        Node& n = nodes_[v.id];
        if (!n.needs_grad) {
            return nullptr;
        }
        if (!n.has_grad) {
            n.grad = Tensor::zeros(value(v.id).shape());
            n.has_grad = true;
        }
        return &n.grad;
    }

    // Reverse sweep from a scalar loss; accumulates into Parameter::grad.
    // Returns the number of nodes whose backward step ran.
    std::size_t backward(Var loss) {
        if (loss.graph != this) {
            throw ContractError("loss belongs to a different graph");
        }
        if (value(loss.id).size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + value(loss.id).shape_str());
        }
        if (!record_) {
            throw ContractError("backward on a graph that does not record");
        }
        std::size_t visited = 0;
        if (!nodes_[loss.id].needs_grad) {
            return visited;
        }
        *grad_of(loss) = Tensor::full(value(loss.id).shape(), 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || !n.has_grad) {
                continue;
            }
            ++visited;
            if (n.param != nullptr) {
                Tensor& acc = n.param->grad;
                if (acc.shape() != n.grad.shape()) {
                    acc = Tensor::zeros(n.grad.shape());
                }
                for (std::size_t k = 0; k < acc.size(); ++k) {
                    acc[k] += n.grad[k];
                }
            } else if (n.backward) {
                n.backward(*this, n.grad);
            }
        }
        return visited;
    }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Parameter* param = nullptr;
        Tensor grad;
        bool needs_grad = false;
        bool has_grad = false;
        BackwardFn backward;
    };

    bool record_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_ids_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace ad {

namespace detail {

inline void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

inline Graph& same_graph(Var a, Var b) {
    if (a.graph != b.graph) {
        throw ContractError("operation mixes variables from different graphs");
    }
    return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + " shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    Tensor out = ravqa::matmul(a.value(), b.value());
    return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dc) {
        const Tensor& av = g.value(a.id);
        const Tensor& bv = g.value(b.id);
        const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
        if (Tensor* da = g.grad_of(a)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = bv.data().data() + p * n;
                    const double* drow = dc.data().data() + i * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        s += drow[j] * brow[j];
                    }
                    (*da)[i * k + p] += s;
                }
            }
        }
        if (Tensor* db = g.grad_of(b)) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* drow = dc.data().data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    double* dbrow = db->data().data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        dbrow[j] += aip * drow[j];
                    }
                }
            }
        }
    });
}

inline Var add(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    detail::add_into(out, b.value());
    return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        if (Tensor* da = g.grad_of(a)) detail::add_into(*da, d);
        if (Tensor* db = g.grad_of(b)) detail::add_into(*db, d);
    });
}

inline Var sub(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b.value()[i];
    }
    return g.push(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        if (Tensor* da = g.grad_of(a)) detail::add_into(*da, d);
        if (Tensor* db = g.grad_of(b)) {
            for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] -= d[i];
        }
    });
}

// x[rows x n] + b[n], broadcast over rows.
inline Var add_bias(Var x, Var b) {
    Graph& g = detail::same_graph(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (bv.size() != xv.cols()) {
        throw DimensionError("bias " + bv.shape_str() + " does not match " + xv.shape_str());
    }
    Tensor out = xv;
    const std::size_t n = xv.cols();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i % n];
    }
    return g.push(std::move(out), {x, b}, [x, b, n](Graph& g, const Tensor& d) {
        if (Tensor* dx = g.grad_of(x)) detail::add_into(*dx, d);
        if (Tensor* db = g.grad_of(b)) {
            for (std::size_t i = 0; i < d.size(); ++i) (*db)[i % n] += d[i];
        }
    });
}

inline Var scale(Var x, double c) {
    Tensor out = x.value();
    for (double& v : out.storage()) v *= c;
    return x.graph->push(std::move(out), {x}, [x, c](Graph& g, const Tensor& d) {
        if (Tensor* dx = g.grad_of(x)) {
            for (std::size_t i = 0; i < d.size(); ++i) (*dx)[i] += c * d[i];
        }
    });
}

// s * x where s holds a single value.
inline Var scale_by(Var s, Var x) {
    Graph& g = detail::same_graph(s, x);
    if (s.value().size() != 1) {
        throw DimensionError("scale_by expects a scalar factor, got " + s.value().shape_str());
    }
    const double c = s.value()[0];
    Tensor out = x.value();
    for (double& v : out.storage()) v *= c;
    return g.push(std::move(out), {s, x}, [s, x](Graph& g, const Tensor& d) {
        const Tensor& xv = g.value(x.id);
        const double c = g.value(s.id)[0];
        if (Tensor* ds = g.grad_of(s)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * xv[i];
            (*ds)[0] += acc;
        }
        if (Tensor* dx = g.grad_of(x)) {
            for (std::size_t i = 0; i < d.size(); ++i) (*dx)[i] += c * d[i];
        }
    });
}

inline Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) {
        throw ContractError("add_n of an empty list");
    }
    Tensor out = xs.front().value();
    for (std::size_t k = 1; k < xs.size(); ++k) {
        detail::require_same_shape(out, xs[k].value(), "add_n");
        detail::add_into(out, xs[k].value());
    }
    return xs.front().graph->push(std::move(out), xs, [xs](Graph& g, const Tensor& d) {
        for (const Var& x : xs) {
            if (Tensor* dx = g.grad_of(x)) detail::add_into(*dx, d);
        }
    });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

// tanh-approximated GELU.
inline Var gelu(Var x) {
    Tensor out = x.value();
    for (double& v : out.storage()) {
        const double u = detail::kGeluC * (v + 0.044715 * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return x.graph->push(std::move(out), {x}, [x](Graph& g, const Tensor& d) {
        Tensor* dx = g.grad_of(x);
        if (!dx) return;
        const Tensor& xv = g.value(x.id);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double v = xv[i];
            const double u = detail::kGeluC * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = detail::kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
            (*dx)[i] += d[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
    });
}

inline Var relu(Var x) {
    Tensor out = x.value();
    for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
    return x.graph->push(std::move(out), {x}, [x](Graph& g, const Tensor& d) {
        Tensor* dx = g.grad_of(x);
        if (!dx) return;
        const Tensor& xv = g.value(x.id);
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (xv[i] > 0.0) (*dx)[i] += d[i];
        }
    });
}

inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.graph->push(Tensor({1}, {s}), {x}, [x](Graph& g, const Tensor& d) {
        if (Tensor* dx = g.grad_of(x)) {
            for (double& v : dx->storage()) v += d[0];
        }
    });
}

// Element i of x as a shape-{1} value.
inline Var index(Var x, std::size_t i) {
    if (i >= x.value().size()) {
        throw DimensionError("index " + std::to_string(i) + " out of range for " + x.value().shape_str());
    }
    return x.graph->push(Tensor({1}, {x.value()[i]}), {x}, [x, i](Graph& g, const Tensor& d) {
        if (Tensor* dx = g.grad_of(x)) (*dx)[i] += d[0];
    });
}

// Concatenates shape-{1} values into a vector.
inline Var stack(const std::vector<Var>& scalars) {
    if (scalars.empty()) {
        throw ContractError("stack of an empty list");
    }
    std::vector<double> vals;
    vals.reserve(scalars.size());
    for (const Var& s : scalars) {
        if (s.value().size() != 1) {
            throw DimensionError("stack expects scalars, got " + s.value().shape_str());
        }
        vals.push_back(s.value()[0]);
    }
    const std::size_t n = vals.size();
    return scalars.front().graph->push(Tensor({n}, std::move(vals)), scalars, [scalars](Graph& g, const Tensor& d) {
        for (std::size_t i = 0; i < scalars.size(); ++i) {
            if (Tensor* ds = g.grad_of(scalars[i])) (*ds)[0] += d[i];
        }
    });
}

// Softmax along the last axis.
inline Var softmax(Var x) {
    Tensor out = ravqa::softmax(x.value(), -1);
    return x.graph->push(std::move(out), {x}, [x, out_id = x.graph->size()](Graph& g, const Tensor& d) {
        Tensor* dx = g.grad_of(x);
        if (!dx) return;
        const Tensor& y = g.value(out_id);
        const std::size_t n = y.cols();
        for (std::size_t r = 0; r < y.size() / n; ++r) {
            double dotv = 0.0;
            for (std::size_t j = 0; j < n; ++j) dotv += d[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) (*dx)[r * n + j] += y[r * n + j] * (d[r * n + j] - dotv);
        }
    });
}

inline Var mean_pool(Var h) {
    Tensor out = ravqa::mean_pool(h.value());
    return h.graph->push(std::move(out), {h}, [h](Graph& g, const Tensor& d) {
        Tensor* dh = g.grad_of(h);
        if (!dh) return;
        const std::size_t rows = g.value(h.id).rows(), cols = g.value(h.id).cols();
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t t = 0; t < rows; ++t) {
            for (std::size_t j = 0; j < cols; ++j) (*dh)[t * cols + j] += d[j] * inv;
        }
    });
}

inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    Graph& g0 = detail::same_graph(x, gain);
    detail::same_graph(x, bias);
    const Tensor& xv = x.value();
    const std::size_t n = xv.cols();
    if (gain.value().size() != n || bias.value().size() != n) {
        throw DimensionError("layer_norm gain/bias do not match " + xv.shape_str());
    }
    if (!(eps > 0.0)) {
        throw ContractError("layer_norm requires eps > 0");
    }
    const std::size_t rows = xv.size() / n;
    Tensor out(xv.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        inv_std[r] = kernels::layer_norm_row({xv.data().data() + r * n, n}, gain.value().data(), bias.value().data(),
                                             eps, {out.data().data() + r * n, n})
                         .second;
    }
    return g0.push(std::move(out), {x, gain, bias},
                   [x, gain, bias, n, rows, inv_std = std::move(inv_std)](Graph& g, const Tensor& d) {
                       const Tensor& xv = g.value(x.id);
                       const Tensor& gv = g.value(gain.id);
                       Tensor* dx = g.grad_of(x);
                       Tensor* dg = g.grad_of(gain);
                       Tensor* db = g.grad_of(bias);
                       std::vector<double> xhat(n), dxhat(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                           double mean = 0.0;
                           for (std::size_t j = 0; j < n; ++j) mean += xv[r * n + j];
                           mean /= static_cast<double>(n);
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                               xhat[j] = (xv[r * n + j] - mean) * inv_std[r];
                               dxhat[j] = d[r * n + j] * gv[j];
                               m1 += dxhat[j];
                               m2 += dxhat[j] * xhat[j];
                               if (dg) (*dg)[j] += d[r * n + j] * xhat[j];
                               if (db) (*db)[j] += d[r * n + j];
                           }
                           m1 /= static_cast<double>(n);
                           m2 /= static_cast<double>(n);
                           if (dx) {
                               for (std::size_t j = 0; j < n; ++j) {
                                   (*dx)[r * n + j] += inv_std[r] * (dxhat[j] - m1 - xhat[j] * m2);
                               }
                           }
                       }
                   });
}

// -log softmax(logits)[label], shape {1}.
inline Var cross_entropy(Var logits, std::size_t label) {
    const Tensor& z = logits.value();
    if (label >= z.size()) {
        throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(z.size()) +
                        " logits");
    }
    const double mx = *std::max_element(z.data().begin(), z.data().end());
    double s = 0.0;
    for (double v : z.data()) s += std::exp(v - mx);
    const double loss = std::log(s) + mx - z[label];
    return logits.graph->push(Tensor({1}, {loss}), {logits}, [logits, label](Graph& g, const Tensor& d) {
        Tensor* dz = g.grad_of(logits);
        if (!dz) return;
        const Tensor p = ravqa::softmax(g.value(logits.id), -1);
        for (std::size_t i = 0; i < p.size(); ++i) {
            (*dz)[i] += d[0] * (p[i] - (i == label ? 1.0 : 0.0));
        }
    });
}

// Per-row cosine similarity of x[L x D] against g[D]: out[i] = x_i.g / (|x_i||g| + eps).
inline Var row_cosine(Var x, Var gvec, double eps) {
    Graph& g0 = detail::same_graph(x, gvec);
    const Tensor& xv = x.value();
    const Tensor& gv = gvec.value();
    if (gv.size() != xv.cols()) {
        throw DimensionError("row_cosine dimension mismatch: " + xv.shape_str() + " vs " + gv.shape_str());
    }
    Tensor out({xv.rows()});
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        out[i] = cosine_sim(xv.row(i), gv.data(), eps);
    }
    return g0.push(std::move(out), {x, gvec}, [x, gvec, eps](Graph& g, const Tensor& d) {
        const Tensor& xv = g.value(x.id);
        const Tensor& gv = g.value(gvec.id);
        Tensor* dx = g.grad_of(x);
        Tensor* dg = g.grad_of(gvec);
        const double b = kernels::norm(gv.data());
        const std::size_t n = xv.cols();
        for (std::size_t i = 0; i < xv.rows(); ++i) {
            const auto xi = xv.row(i);
            const double a = kernels::norm(xi);
            if (a == 0.0 || b == 0.0) continue;
            const double num = kernels::dot(xi, gv.data());
            const double den = a * b + eps;
            for (std::size_t j = 0; j < n; ++j) {
                if (dx) (*dx)[i * n + j] += d[i] * (gv[j] / den - num * b * xi[j] / (a * den * den));
                if (dg) (*dg)[j] += d[i] * (xi[j] / den - num * a * gv[j] / (b * den * den));
            }
        }
    });
}

// Multi-head scaled dot-product attention on already-projected q[Lq x D], k/v[Lk x D].
// When `probs` is non-null it receives the attention maps as [heads x Lq x Lk].
inline Var attention(Var q, Var k, Var v, std::size_t heads, Tensor* probs = nullptr) {
    Graph& g0 = detail::same_graph(q, k);
    detail::same_graph(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t lq = qv.rows(), lk = kv.rows(), dm = qv.cols();
    if (kv.cols() != dm || vv.cols() != dm || vv.rows() != lk || heads == 0 || dm % heads != 0) {
        throw DimensionError("attention shapes " + qv.shape_str() + "/" + kv.shape_str() + "/" + vv.shape_str() +
                             " incompatible with " + std::to_string(heads) + " heads");
    }
    const std::size_t dh = dm / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor p({heads, lq, lk});
    Tensor out({lq, dm});
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < lq; ++i) {
            std::span<double> row{p.data().data() + (h * lq + i) * lk, lk};
            for (std::size_t j = 0; j < lk; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qv[i * dm + off + c] * kv[j * dm + off + c];
                row[j] = s * sc;
            }
            kernels::softmax_line(row);
            for (std::size_t j = 0; j < lk; ++j) {
                const double w = row[j];
                for (std::size_t c = 0; c < dh; ++c) out[i * dm + off + c] += w * vv[j * dm + off + c];
            }
        }
    }
    if (probs) {
        *probs = p;
    }
    return g0.push(std::move(out), {q, k, v}, [q, k, v, heads, p = std::move(p)](Graph& g, const Tensor& d) {
        const Tensor& qv = g.value(q.id);
        const Tensor& kv = g.value(k.id);
        const Tensor& vv = g.value(v.id);
        Tensor* dq = g.grad_of(q);
        Tensor* dk = g.grad_of(k);
        Tensor* dv = g.grad_of(v);
        const std::size_t lq = qv.rows(), lk = kv.rows(), dm = qv.cols(), dh = dm / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> dp(lk);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < lq; ++i) {
                const double* pr = p.data().data() + (h * lq + i) * lk;
                double dotv = 0.0;
                for (std::size_t j = 0; j < lk; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += d[i * dm + off + c] * vv[j * dm + off + c];
                    dp[j] = s;
                    dotv += s * pr[j];
                    if (dv) {
                        for (std::size_t c = 0; c < dh; ++c) (*dv)[j * dm + off + c] += pr[j] * d[i * dm + off + c];
                    }
                }
                for (std::size_t j = 0; j < lk; ++j) {
                    const double ds = pr[j] * (dp[j] - dotv) * sc;
                    if (ds == 0.0) continue;
                    for (std::size_t c = 0; c < dh; ++c) {
                        if (dq) (*dq)[i * dm + off + c] += ds * kv[j * dm + off + c];
                        if (dk) (*dk)[j * dm + off + c] += ds * qv[i * dm + off + c];
                    }
                }
            }
        }
    });
}

// Row overwrite: out = base, then out[targets[j]] = src[sources[j]] for every j.
// Sources are read from `src` only, so overlapping positions never chain.
inline Var overwrite_rows(Var base, Var src, std::vector<std::size_t> targets, std::vector<std::size_t> sources) {
    Graph& g0 = detail::same_graph(base, src);
    const Tensor& bv = base.value();
    const Tensor& sv = src.value();
    if (bv.rank() != 2 || sv.rank() != 2 || bv.cols() != sv.cols()) {
        throw DimensionError("overwrite_rows shapes " + bv.shape_str() + " / " + sv.shape_str());
    }
    if (targets.size() != sources.size()) {
        throw DimensionError("overwrite_rows index sets differ in size: " + std::to_string(targets.size()) + " vs " +
                             std::to_string(sources.size()));
    }
    const std::size_t n = bv.cols();
    Tensor out = bv;
    std::vector<char> replaced(bv.rows(), 0);
    for (std::size_t j = 0; j < targets.size(); ++j) {
        if (targets[j] >= bv.rows() || sources[j] >= sv.rows()) {
            throw DimensionError("overwrite_rows index out of range");
        }
        std::copy_n(sv.data().data() + sources[j] * n, n, out.data().data() + targets[j] * n);
        replaced[targets[j]] = 1;
    }
    return g0.push(std::move(out), {base, src},
                   [base, src, n, targets = std::move(targets), sources = std::move(sources),
                    replaced = std::move(replaced)](Graph& g, const Tensor& d) {
                       if (Tensor* db = g.grad_of(base)) {
                           for (std::size_t r = 0; r < replaced.size(); ++r) {
                               if (replaced[r]) continue;
                               for (std::size_t c = 0; c < n; ++c) (*db)[r * n + c] += d[r * n + c];
                           }
                       }
                       if (Tensor* ds = g.grad_of(src)) {
                           // A target listed twice keeps its last write, matching the forward loop.
                           std::vector<std::size_t> last(replaced.size(), targets.size());
                           for (std::size_t j = 0; j < targets.size(); ++j) last[targets[j]] = j;
                           for (std::size_t j = 0; j < targets.size(); ++j) {
                               if (last[targets[j]] != j) continue;
                               for (std::size_t c = 0; c < n; ++c) {
                                   (*ds)[sources[j] * n + c] += d[targets[j] * n + c];
                               }
                           }
                       }
                   });
}

}  // namespace ad
}  // namespace ravqa
