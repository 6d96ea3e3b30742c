#include "bsim/graph.hpp"

#include <algorithm>
#include <cmath>

namespace bsim {

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }
bool Var::requires_grad() const { return tape->requires_grad(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    return emplace(std::move(value), requires_grad, nullptr);
}

Var Tape::emplace(Tensor value, bool requires_grad, std::function<void(Tape&, int32_t)> backprop) {
    Node n;
    if (requires_grad) n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var root) {
    if (root.tape != this) throw ShapeError("backward: root from another tape");
    Node& r = nodes_[root.id];
    if (r.value.size() != 1) throw ShapeError("backward: root must be scalar");
    if (!r.requires_grad) return;  // nothing differentiable upstream
    r.grad[0] += 1.0;
    for (int32_t id = root.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.requires_grad && n.backprop) n.backprop(*this, id);
    }
}

namespace {

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw ShapeError("operands from different tapes");
    return *a.tape;
}

bool needs(Var a) { return a.requires_grad(); }
bool needs(Var a, Var b) { return a.requires_grad() || b.requires_grad(); }

void accumulate(Tape& t, int32_t id, std::span<const double> g) {
    Tape::Node& n = t.node(id);
    if (!n.requires_grad) return;
    double* dst = n.grad.data().data();
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check(a.value().same_shape(b.value()), "add: shape mismatch");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    return t.emplace(std::move(out), true, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        accumulate(t, ia, g.data());
        accumulate(t, ib, g.data());
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check(a.value().same_shape(b.value()), "sub: shape mismatch");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    return t.emplace(std::move(out), true, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        accumulate(t, ia, g.data());
        Tape::Node& nb = t.node(ib);
        if (nb.requires_grad)
            for (int64_t i = 0; i < g.size(); ++i) nb.grad[i] -= g[i];
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check(a.value().same_shape(b.value()), "mul: shape mismatch");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    return t.emplace(std::move(out), true, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        Tape::Node& nb = t.node(ib);
        if (na.requires_grad)
            for (int64_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] * nb.value[i];
        if (nb.requires_grad)
            for (int64_t i = 0; i < g.size(); ++i) nb.grad[i] += g[i] * na.value[i];
    });
}

Var div(Var a, Var b) {
    Tape& t = tape_of(a, b);
    check(a.value().same_shape(b.value()), "div: shape mismatch");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    return t.emplace(std::move(out), true, [ia, ib](Tape& t, int32_t self) {
        const Tape::Node& s = t.node(self);
        const Tensor& g = s.grad;
        Tape::Node& na = t.node(ia);
        Tape::Node& nb = t.node(ib);
        if (na.requires_grad)
            for (int64_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] / nb.value[i];
        if (nb.requires_grad)
            for (int64_t i = 0; i < g.size(); ++i)
                nb.grad[i] -= g[i] * s.value[i] / nb.value[i];
    });
}

Var add_rowvec(Var a, Var rowv) {
    Tape& t = tape_of(a, rowv);
    const int64_t n = a.value().rows(), d = a.value().cols();
    check(rowv.value().size() == d, "add_rowvec: width mismatch");
    Tensor out = a.value();
    const Tensor& rv = rowv.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out[i * d + j] += rv[j];
    if (!needs(a, rowv)) return t.constant(std::move(out));
    const int32_t ia = a.id, ir = rowv.id;
    return t.emplace(std::move(out), true, [ia, ir, n, d](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        accumulate(t, ia, g.data());
        Tape::Node& nr = t.node(ir);
        if (nr.requires_grad)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j) nr.grad[j] += g[i * d + j];
    });
}

Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia, c](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        for (int64_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] * c;
    });
}

Var add_const(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] += c;
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia](Tape& t, int32_t self) {
        accumulate(t, ia, t.node(self).grad.data());
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Tensor out = matmul(a.value(), b.value());
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    return t.emplace(std::move(out), true, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        Tape::Node& nb = t.node(ib);
        const Tensor& av = na.value;
        const Tensor& bv = nb.value;
        const int64_t m = av.rows(), k = av.cols();
        const int64_t n = (bv.ndim() == 1) ? 1 : bv.cols();
        // dA = G * B^T ; dB = A^T * G
        if (na.requires_grad) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                    na.grad[i * k + p] += acc;
                }
        }
        if (nb.requires_grad) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    const double av_ip = av[i * k + p];
                    if (av_ip == 0.0) continue;
                    for (int64_t j = 0; j < n; ++j)
                        nb.grad[p * n + j] += av_ip * g[i * n + j];
                }
        }
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const int64_t m = av.rows(), k = av.cols(), n = bv.rows();
    check(bv.cols() == k, "matmul_nt: inner dimensions do not match");
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
            out[i * n + j] = acc;
        }
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    return t.emplace(std::move(out), true, [ia, ib, m, k, n](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        Tape::Node& nb = t.node(ib);
        // C = A B^T : dA = G B ; dB = G^T A
        if (na.requires_grad) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    if (gij == 0.0) continue;
                    for (int64_t p = 0; p < k; ++p)
                        na.grad[i * k + p] += gij * nb.value[j * k + p];
                }
        }
        if (nb.requires_grad) {
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    if (gij == 0.0) continue;
                    for (int64_t p = 0; p < k; ++p)
                        nb.grad[j * k + p] += gij * na.value[i * k + p];
                }
        }
    });
}

Var relu(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, out[i]);
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        for (int64_t i = 0; i < g.size(); ++i)
            if (na.value[i] > 0.0) na.grad[i] += g[i];
    });
}

Var exp(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia](Tape& t, int32_t self) {
        const Tape::Node& s = t.node(self);
        Tape::Node& na = t.node(ia);
        for (int64_t i = 0; i < s.grad.size(); ++i) na.grad[i] += s.grad[i] * s.value[i];
    });
}

Var log(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        for (int64_t i = 0; i < g.size(); ++i) na.grad[i] += g[i] / na.value[i];
    });
}

Var sqrt(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia](Tape& t, int32_t self) {
        const Tape::Node& s = t.node(self);
        Tape::Node& na = t.node(ia);
        for (int64_t i = 0; i < s.grad.size(); ++i)
            na.grad[i] += s.grad[i] * 0.5 / s.value[i];
    });
}

Var sum(Var a) {
    Tape& t = *a.tape;
    double acc = 0.0;
    for (int64_t i = 0; i < a.value().size(); ++i) acc += a.value()[i];
    if (!needs(a)) return t.constant(acc);
    const int32_t ia = a.id;
    return t.emplace(Tensor::scalar(acc), true, [ia](Tape& t, int32_t self) {
        const double g = t.node(self).grad[0];
        Tape::Node& na = t.node(ia);
        for (int64_t i = 0; i < na.grad.size(); ++i) na.grad[i] += g;
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var l2normalize_rows(Var a, double eps) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const int64_t r = (av.ndim() == 1) ? 1 : av.rows();
    const int64_t d = (av.ndim() == 1) ? av.size() : av.cols();
    Tensor out = av;
    std::vector<double> norms(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += av[i * d + j] * av[i * d + j];
        const double n = std::sqrt(s);
        if (!(n > eps)) throw DegenerateNorm("l2normalize_rows: row norm below eps");
        norms[i] = n;
        for (int64_t j = 0; j < d; ++j) out[i * d + j] /= n;
    }
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true,
                     [ia, r, d, norms = std::move(norms)](Tape& t, int32_t self) {
        const Tape::Node& s = t.node(self);
        Tape::Node& na = t.node(ia);
        // y = x / |x| ; dx = (g - y (y.g)) / |x|
        for (int64_t i = 0; i < r; ++i) {
            double yg = 0.0;
            for (int64_t j = 0; j < d; ++j) yg += s.value[i * d + j] * s.grad[i * d + j];
            for (int64_t j = 0; j < d; ++j)
                na.grad[i * d + j] += (s.grad[i * d + j] - s.value[i * d + j] * yg) / norms[i];
        }
    });
}

Var layernorm_rows(Var a, double eps) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const int64_t r = av.rows(), d = av.cols();
    Tensor out({r, d});
    std::vector<double> inv_sigma(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += av[i * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = av[i * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (int64_t j = 0; j < d; ++j) out[i * d + j] = (av[i * d + j] - mu) * is;
    }
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true,
                     [ia, r, d, inv_sigma = std::move(inv_sigma)](Tape& t, int32_t self) {
        const Tape::Node& s = t.node(self);
        Tape::Node& na = t.node(ia);
        // dx = (g - mean(g) - y * mean(g*y)) / sigma
        for (int64_t i = 0; i < r; ++i) {
            double gm = 0.0, gym = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                gm += s.grad[i * d + j];
                gym += s.grad[i * d + j] * s.value[i * d + j];
            }
            gm /= static_cast<double>(d);
            gym /= static_cast<double>(d);
            for (int64_t j = 0; j < d; ++j)
                na.grad[i * d + j] +=
                    (s.grad[i * d + j] - gm - s.value[i * d + j] * gym) * inv_sigma[i];
        }
    });
}

Var group_mean_rows(Var a, int64_t group) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const int64_t rows_in = av.rows(), d = av.cols();
    check(group > 0 && rows_in % group == 0, "group_mean_rows: group does not divide rows");
    const int64_t rows_out = rows_in / group;
    Tensor out({rows_out, d});
    const double inv = 1.0 / static_cast<double>(group);
    for (int64_t i = 0; i < rows_in; ++i) {
        const int64_t o = i / group;
        for (int64_t j = 0; j < d; ++j) out[o * d + j] += av[i * d + j] * inv;
    }
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia, group, d, inv](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        const int64_t rows_in = na.value.rows();
        for (int64_t i = 0; i < rows_in; ++i) {
            const int64_t o = i / group;
            for (int64_t j = 0; j < d; ++j) na.grad[i * d + j] += g[o * d + j] * inv;
        }
    });
}

Var row(Var a, int64_t i) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    const int64_t d = av.cols();
    check(i >= 0 && i < av.rows(), "row: index out of range");
    Tensor out({d});
    for (int64_t j = 0; j < d; ++j) out[j] = av[i * d + j];
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true, [ia, i, d](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        for (int64_t j = 0; j < d; ++j) na.grad[i * d + j] += g[j];
    });
}

Var at(Var a, int64_t i, int64_t j) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    check(i >= 0 && i < av.rows() && j >= 0 && j < av.cols(), "at: index out of range");
    const int64_t flat = i * av.cols() + j;
    if (!needs(a)) return t.constant(av[flat]);
    const int32_t ia = a.id;
    return t.emplace(Tensor::scalar(av[flat]), true, [ia, flat](Tape& t, int32_t self) {
        t.node(ia).grad[flat] += t.node(self).grad[0];
    });
}

Var gather(Var a, std::vector<int64_t> flat_indices) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    Tensor out({static_cast<int64_t>(flat_indices.size())});
    for (size_t k = 0; k < flat_indices.size(); ++k) {
        check(flat_indices[k] >= 0 && flat_indices[k] < av.size(), "gather: index out of range");
        out[static_cast<int64_t>(k)] = av[flat_indices[k]];
    }
    if (!needs(a)) return t.constant(std::move(out));
    const int32_t ia = a.id;
    return t.emplace(std::move(out), true,
                     [ia, idx = std::move(flat_indices)](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        for (size_t k = 0; k < idx.size(); ++k) na.grad[idx[k]] += g[static_cast<int64_t>(k)];
    });
}

Var concat(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out({av.size() + bv.size()});
    for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i];
    for (int64_t i = 0; i < bv.size(); ++i) out[av.size() + i] = bv[i];
    if (!needs(a, b)) return t.constant(std::move(out));
    const int32_t ia = a.id, ib = b.id;
    const int64_t na_size = av.size();
    return t.emplace(std::move(out), true, [ia, ib, na_size](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        Tape::Node& na = t.node(ia);
        Tape::Node& nb = t.node(ib);
        if (na.requires_grad)
            for (int64_t i = 0; i < na_size; ++i) na.grad[i] += g[i];
        if (nb.requires_grad)
            for (int64_t i = 0; i < g.size() - na_size; ++i) nb.grad[i] += g[na_size + i];
    });
}

Var stack_scalars(std::span<const Var> xs) {
    check(!xs.empty(), "stack_scalars: empty input");
    Tape& t = *xs[0].tape;
    Tensor out({static_cast<int64_t>(xs.size())});
    bool any_grad = false;
    std::vector<int32_t> ids(xs.size());
    for (size_t k = 0; k < xs.size(); ++k) {
        check(xs[k].value().size() == 1, "stack_scalars: non-scalar input");
        out[static_cast<int64_t>(k)] = xs[k].value()[0];
        ids[k] = xs[k].id;
        any_grad = any_grad || xs[k].requires_grad();
    }
    if (!any_grad) return t.constant(std::move(out));
    return t.emplace(std::move(out), true, [ids = std::move(ids)](Tape& t, int32_t self) {
        const Tensor& g = t.node(self).grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            Tape::Node& n = t.node(ids[k]);
            if (n.requires_grad) n.grad[0] += g[static_cast<int64_t>(k)];
        }
    });
}

Var logsumexp(Var v) {
    Tape& t = *v.tape;
    const Tensor& xv = v.value();
    check(xv.size() > 0, "logsumexp: empty input");
    double m = xv[0];
    for (int64_t i = 1; i < xv.size(); ++i) m = std::max(m, xv[i]);
    double s = 0.0;
    std::vector<double> soft(static_cast<size_t>(xv.size()));
    for (int64_t i = 0; i < xv.size(); ++i) {
        soft[i] = std::exp(xv[i] - m);
        s += soft[i];
    }
    const double out = m + std::log(s);
    for (auto& p : soft) p /= s;
    if (!needs(v)) return t.constant(out);
    const int32_t iv = v.id;
    return t.emplace(Tensor::scalar(out), true,
                     [iv, soft = std::move(soft)](Tape& t, int32_t self) {
        const double g = t.node(self).grad[0];
        Tape::Node& nv = t.node(iv);
        for (size_t i = 0; i < soft.size(); ++i) nv.grad[static_cast<int64_t>(i)] += g * soft[i];
    });
}

Var cosine(Var a, Var b, double eps) {
    return dot(l2normalize_rows(a, eps), l2normalize_rows(b, eps));
}

}  // namespace bsim
