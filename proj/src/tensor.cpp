#include "dvfa/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dvfa::ag {

namespace {

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

std::int64_t numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

[[noreturn]] void shape_fail(const std::string& op, const Node& a, const Node& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

TensorPtr make_result(std::vector<std::int64_t> shape, std::vector<real> values,
                      std::vector<TensorPtr> parents, std::function<void(Node&)> backprop) {
    auto out = std::make_shared<Node>();
    out->shape = std::move(shape);
    out->val = std::move(values);
    for (const auto& p : parents)
        if (p->requires_grad) out->requires_grad = true;
    if (out->requires_grad) {
        out->parents = std::move(parents);
        out->backprop = std::move(backprop);
    }
    return out;
}

void check_2d(const TensorPtr& a, const char* op) {
    if (a->shape.size() > 2) throw ShapeError(std::string(op) + ": expects rank <= 2 tensor");
}

}  // namespace

TensorPtr make_tensor(std::vector<std::int64_t> shape, std::vector<real> values,
                      bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("make_tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    auto t = std::make_shared<Node>();
    t->shape = std::move(shape);
    t->val = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr constant(std::vector<std::int64_t> shape, std::vector<real> values) {
    return make_tensor(std::move(shape), std::move(values), false);
}

TensorPtr scalar(real v) { return make_tensor({1}, {v}, false); }

TensorPtr make_op(std::vector<std::int64_t> shape, std::vector<real> values,
                  std::vector<TensorPtr> parents, std::function<void(Node&)> backprop) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("make_op: shape does not match value count");
    return make_result(std::move(shape), std::move(values), std::move(parents),
                       std::move(backprop));
}

TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    std::vector<real> v(static_cast<std::size_t>(numel(shape)), real(0));
    return make_tensor(std::move(shape), std::move(v), requires_grad);
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const std::int64_t m = a->rows(), k = a->cols(), k2 = b->rows(), n = b->cols();
    if (k != k2) shape_fail("matmul", *a, *b);
    std::vector<real> out(static_cast<std::size_t>(m * n));
    {
        CMatMap A(a->val.data(), m, k), B(b->val.data(), k, n);
        MatMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
        CMatMap G(self.grad.data(), m, n);
        if (a->requires_grad) {
            a->ensure_grad();
            MatMap Ga(a->grad.data(), m, k);
            CMatMap B(b->val.data(), k, n);
            Ga.noalias() += G * B.transpose();
        }
        if (b->requires_grad) {
            b->ensure_grad();
            MatMap Gb(b->grad.data(), k, n);
            CMatMap A(a->val.data(), m, k);
            Gb.noalias() += A.transpose() * G;
        }
    });
}

TensorPtr transpose(const TensorPtr& a) {
    check_2d(a, "transpose");
    const std::int64_t m = a->rows(), n = a->cols();
    std::vector<real> out(static_cast<std::size_t>(m * n));
    CMatMap A(a->val.data(), m, n);
    MatMap O(out.data(), n, m);
    O = A.transpose();
    return make_result({n, m}, std::move(out), {a}, [a, m, n](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        CMatMap G(self.grad.data(), n, m);
        MatMap Ga(a->grad.data(), m, n);
        Ga += G.transpose();
    });
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    const bool broadcast = (b->rows() == 1 && a->cols() == b->cols() && a->rows() != 1) ||
                           (b->rows() == 1 && b->cols() == a->cols());
    if (a->shape == b->shape) {
        std::vector<real> out(a->val.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val[i] + b->val[i];
        return make_result(a->shape, std::move(out), {a, b}, [a, b](Node& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i];
            }
        });
    }
    if (!broadcast) shape_fail("add", *a, *b);
    const std::int64_t m = a->rows(), n = a->cols();
    std::vector<real> out(a->val.size());
    for (std::int64_t r = 0; r < m; ++r)
        for (std::int64_t c = 0; c < n; ++c)
            out[static_cast<std::size_t>(r * n + c)] =
                a->val[static_cast<std::size_t>(r * n + c)] + b->val[static_cast<std::size_t>(c)];
    return make_result(a->shape, std::move(out), {a, b}, [a, b, m, n](Node& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t r = 0; r < m; ++r)
                for (std::int64_t c = 0; c < n; ++c)
                    b->grad[static_cast<std::size_t>(c)] +=
                        self.grad[static_cast<std::size_t>(r * n + c)];
        }
    });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) shape_fail("mul", *a, *b);
    std::vector<real> out(a->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val[i] * b->val[i];
    return make_result(a->shape, std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                a->grad[i] += self.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                b->grad[i] += self.grad[i] * a->val[i];
        }
    });
}

TensorPtr scale(const TensorPtr& a, real c) {
    std::vector<real> out(a->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val[i] * c;
    return make_result(a->shape, std::move(out), {a}, [a, c](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * c;
    });
}

TensorPtr concat(const std::vector<TensorPtr>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    const std::int64_t fixed = axis == 0 ? parts[0]->cols() : parts[0]->rows();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat");
        const std::int64_t f = axis == 0 ? p->cols() : p->rows();
        if (f != fixed) shape_fail("concat", *parts[0], *p);
        total += axis == 0 ? p->rows() : p->cols();
    }
    const std::int64_t m = axis == 0 ? total : fixed;
    const std::int64_t n = axis == 0 ? fixed : total;
    std::vector<real> out(static_cast<std::size_t>(m * n));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            std::copy(p->val.begin(), p->val.end(), out.begin() + off * n);
            off += p->rows();
        } else {
            const std::int64_t pc = p->cols();
            for (std::int64_t r = 0; r < m; ++r)
                std::copy(p->val.begin() + r * pc, p->val.begin() + (r + 1) * pc,
                          out.begin() + r * n + off);
            off += pc;
        }
    }
    return make_result({m, n}, std::move(out), parts, [parts, axis, m, n](Node& self) {
        std::int64_t off = 0;
        for (const auto& p : parts) {
            if (axis == 0) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::int64_t i = 0; i < p->size(); ++i)
                        p->grad[static_cast<std::size_t>(i)] +=
                            self.grad[static_cast<std::size_t>(off * n + i)];
                }
                off += p->rows();
            } else {
                const std::int64_t pc = p->cols();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::int64_t r = 0; r < m; ++r)
                        for (std::int64_t c = 0; c < pc; ++c)
                            p->grad[static_cast<std::size_t>(r * pc + c)] +=
                                self.grad[static_cast<std::size_t>(r * n + off + c)];
                }
                off += pc;
            }
        }
    });
}

TensorPtr slice(const TensorPtr& a, int axis, std::int64_t start, std::int64_t len) {
    check_2d(a, "slice");
    if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
    const std::int64_t extent = axis == 0 ? a->rows() : a->cols();
    if (start < 0 || len < 1 || start + len > extent)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") outside extent " +
                         std::to_string(extent));
    const std::int64_t m = axis == 0 ? len : a->rows();
    const std::int64_t n = axis == 0 ? a->cols() : len;
    const std::int64_t ac = a->cols();
    std::vector<real> out(static_cast<std::size_t>(m * n));
    for (std::int64_t r = 0; r < m; ++r)
        for (std::int64_t c = 0; c < n; ++c) {
            const std::int64_t sr = axis == 0 ? start + r : r;
            const std::int64_t sc = axis == 0 ? c : start + c;
            out[static_cast<std::size_t>(r * n + c)] = a->val[static_cast<std::size_t>(sr * ac + sc)];
        }
    return make_result({m, n}, std::move(out), {a}, [a, axis, start, m, n, ac](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t r = 0; r < m; ++r)
            for (std::int64_t c = 0; c < n; ++c) {
                const std::int64_t sr = axis == 0 ? start + r : r;
                const std::int64_t sc = axis == 0 ? c : start + c;
                a->grad[static_cast<std::size_t>(sr * ac + sc)] +=
                    self.grad[static_cast<std::size_t>(r * n + c)];
            }
    });
}

TensorPtr mean_rows(const TensorPtr& a) {
    check_2d(a, "mean_rows");
    const std::int64_t m = a->rows(), n = a->cols();
    std::vector<real> out(static_cast<std::size_t>(n), real(0));
    for (std::int64_t r = 0; r < m; ++r)
        for (std::int64_t c = 0; c < n; ++c)
            out[static_cast<std::size_t>(c)] += a->val[static_cast<std::size_t>(r * n + c)];
    for (auto& v : out) v /= static_cast<real>(m);
    return make_result({1, n}, std::move(out), {a}, [a, m, n](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const real inv = real(1) / static_cast<real>(m);
        for (std::int64_t r = 0; r < m; ++r)
            for (std::int64_t c = 0; c < n; ++c)
                a->grad[static_cast<std::size_t>(r * n + c)] +=
                    self.grad[static_cast<std::size_t>(c)] * inv;
    });
}

TensorPtr sum_all(const TensorPtr& a) {
    real s = 0;
    for (real v : a->val) s += v;
    return make_result({1}, {s}, {a}, [a](Node& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (auto& g : a->grad) g += self.grad[0];
    });
}

TensorPtr embedding(const TensorPtr& table, const std::vector<std::int64_t>& ids) {
    check_2d(table, "embedding");
    const std::int64_t v = table->rows(), d = table->cols();
    const std::int64_t l = static_cast<std::int64_t>(ids.size());
    if (l == 0) throw ShapeError("embedding: empty index list");
    for (auto id : ids)
        if (id < 0 || id >= v)
            throw ShapeError("embedding: index " + std::to_string(id) + " outside table of " +
                             std::to_string(v) + " rows");
    std::vector<real> out(static_cast<std::size_t>(l * d));
    for (std::int64_t i = 0; i < l; ++i)
        std::copy(table->val.begin() + ids[static_cast<std::size_t>(i)] * d,
                  table->val.begin() + (ids[static_cast<std::size_t>(i)] + 1) * d,
                  out.begin() + i * d);
    return make_result({l, d}, std::move(out), {table}, [table, ids, d, l](Node& self) {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (std::int64_t i = 0; i < l; ++i)
            for (std::int64_t c = 0; c < d; ++c)
                table->grad[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)] * d + c)] +=
                    self.grad[static_cast<std::size_t>(i * d + c)];
    });
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, real eps) {
    check_2d(x, "layer_norm");
    const std::int64_t m = x->rows(), n = x->cols();
    if (gain->size() != n || bias->size() != n)
        throw ShapeError("layer_norm: gain/bias size must match feature width " +
                         std::to_string(n));
    std::vector<real> out(x->val.size());
    std::vector<real> mean(static_cast<std::size_t>(m)), istd(static_cast<std::size_t>(m));
    for (std::int64_t r = 0; r < m; ++r) {
        real mu = 0;
        for (std::int64_t c = 0; c < n; ++c) mu += x->val[static_cast<std::size_t>(r * n + c)];
        mu /= static_cast<real>(n);
        real var = 0;
        for (std::int64_t c = 0; c < n; ++c) {
            const real d = x->val[static_cast<std::size_t>(r * n + c)] - mu;
            var += d * d;
        }
        var /= static_cast<real>(n);
        const real is = real(1) / std::sqrt(var + eps);
        mean[static_cast<std::size_t>(r)] = mu;
        istd[static_cast<std::size_t>(r)] = is;
        for (std::int64_t c = 0; c < n; ++c) {
            const real xhat = (x->val[static_cast<std::size_t>(r * n + c)] - mu) * is;
            out[static_cast<std::size_t>(r * n + c)] =
                xhat * gain->val[static_cast<std::size_t>(c)] + bias->val[static_cast<std::size_t>(c)];
        }
    }
    return make_result(x->shape, std::move(out), {x, gain, bias},
                       [x, gain, bias, m, n, mean, istd](Node& self) {
        for (std::int64_t r = 0; r < m; ++r) {
            const real mu = mean[static_cast<std::size_t>(r)];
            const real is = istd[static_cast<std::size_t>(r)];
            // dxhat[c] = g_out[c] * gain[c]; classic layernorm backward.
            real sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::int64_t c = 0; c < n; ++c) {
                const real xhat = (x->val[static_cast<std::size_t>(r * n + c)] - mu) * is;
                const real dxhat = self.grad[static_cast<std::size_t>(r * n + c)] *
                                   gain->val[static_cast<std::size_t>(c)];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for (std::int64_t c = 0; c < n; ++c) {
                const real xhat = (x->val[static_cast<std::size_t>(r * n + c)] - mu) * is;
                const real g = self.grad[static_cast<std::size_t>(r * n + c)];
                if (x->requires_grad) {
                    x->ensure_grad();
                    const real dxhat = g * gain->val[static_cast<std::size_t>(c)];
                    x->grad[static_cast<std::size_t>(r * n + c)] +=
                        is * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / static_cast<real>(n));
                }
                if (gain->requires_grad) {
                    gain->ensure_grad();
                    gain->grad[static_cast<std::size_t>(c)] += g * xhat;
                }
                if (bias->requires_grad) {
                    bias->ensure_grad();
                    bias->grad[static_cast<std::size_t>(c)] += g;
                }
            }
        }
    });
}

namespace {

// Row-wise softmax shared by softmax() and log_softmax().
std::vector<real> softmax_rows(const Node& x) {
    const std::int64_t m = x.rows(), n = x.cols();
    std::vector<real> out(x.val.size());
    for (std::int64_t r = 0; r < m; ++r) {
        real mx = -std::numeric_limits<real>::infinity();
        for (std::int64_t c = 0; c < n; ++c)
            mx = std::max(mx, x.val[static_cast<std::size_t>(r * n + c)]);
        real z = 0;
        for (std::int64_t c = 0; c < n; ++c) {
            const real e = std::exp(x.val[static_cast<std::size_t>(r * n + c)] - mx);
            out[static_cast<std::size_t>(r * n + c)] = e;
            z += e;
        }
        for (std::int64_t c = 0; c < n; ++c) out[static_cast<std::size_t>(r * n + c)] /= z;
    }
    return out;
}

}  // namespace

TensorPtr softmax(const TensorPtr& x) {
    check_2d(x, "softmax");
    auto out = softmax_rows(*x);
    const std::int64_t m = x->rows(), n = x->cols();
    return make_result(x->shape, std::move(out), {x}, [x, m, n](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t r = 0; r < m; ++r) {
            real dot = 0;
            for (std::int64_t c = 0; c < n; ++c)
                dot += self.grad[static_cast<std::size_t>(r * n + c)] *
                       self.val[static_cast<std::size_t>(r * n + c)];
            for (std::int64_t c = 0; c < n; ++c) {
                const real s = self.val[static_cast<std::size_t>(r * n + c)];
                x->grad[static_cast<std::size_t>(r * n + c)] +=
                    s * (self.grad[static_cast<std::size_t>(r * n + c)] - dot);
            }
        }
    });
}

TensorPtr log_softmax(const TensorPtr& x) {
    check_2d(x, "log_softmax");
    const std::int64_t m = x->rows(), n = x->cols();
    std::vector<real> out(x->val.size());
    for (std::int64_t r = 0; r < m; ++r) {
        real mx = -std::numeric_limits<real>::infinity();
        for (std::int64_t c = 0; c < n; ++c)
            mx = std::max(mx, x->val[static_cast<std::size_t>(r * n + c)]);
        real z = 0;
        for (std::int64_t c = 0; c < n; ++c)
            z += std::exp(x->val[static_cast<std::size_t>(r * n + c)] - mx);
        const real lz = mx + std::log(z);
        for (std::int64_t c = 0; c < n; ++c)
            out[static_cast<std::size_t>(r * n + c)] =
                x->val[static_cast<std::size_t>(r * n + c)] - lz;
    }
    return make_result(x->shape, std::move(out), {x}, [x, m, n](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t r = 0; r < m; ++r) {
            real gsum = 0;
            for (std::int64_t c = 0; c < n; ++c)
                gsum += self.grad[static_cast<std::size_t>(r * n + c)];
            for (std::int64_t c = 0; c < n; ++c)
                x->grad[static_cast<std::size_t>(r * n + c)] +=
                    self.grad[static_cast<std::size_t>(r * n + c)] -
                    std::exp(self.val[static_cast<std::size_t>(r * n + c)]) * gsum;
        }
    });
}

TensorPtr sigmoid(const TensorPtr& x) {
    std::vector<real> out(x->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = real(1) / (real(1) + std::exp(-x->val[i]));
    return make_result(x->shape, std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const real s = self.val[i];
            x->grad[i] += self.grad[i] * s * (real(1) - s);
        }
    });
}

TensorPtr swish(const TensorPtr& x) {
    std::vector<real> out(x->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const real s = real(1) / (real(1) + std::exp(-x->val[i]));
        out[i] = x->val[i] * s;
    }
    return make_result(x->shape, std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const real s = real(1) / (real(1) + std::exp(-x->val[i]));
            x->grad[i] += self.grad[i] * (s + x->val[i] * s * (real(1) - s));
        }
    });
}

TensorPtr relu(const TensorPtr& x) {
    std::vector<real> out(x->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->val[i] > 0 ? x->val[i] : real(0);
    return make_result(x->shape, std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (x->val[i] > 0) x->grad[i] += self.grad[i];
    });
}

TensorPtr depthwise_conv1d(const TensorPtr& x, const TensorPtr& kernel, const TensorPtr& bias,
                           std::int64_t valid_len) {
    check_2d(x, "depthwise_conv1d");
    const std::int64_t l = x->rows(), d = x->cols();
    const std::int64_t k = kernel->rows();
    if (kernel->cols() != d) shape_fail("depthwise_conv1d", *x, *kernel);
    if (k % 2 == 0) throw ShapeError("depthwise_conv1d: kernel width must be odd");
    if (bias->size() != d) throw ShapeError("depthwise_conv1d: bias width mismatch");
    if (valid_len < 1 || valid_len > l)
        throw ShapeError("depthwise_conv1d: valid_len outside [1, rows]");
    const std::int64_t half = k / 2;
    std::vector<real> out(x->val.size(), real(0));
    for (std::int64_t t = 0; t < valid_len; ++t)
        for (std::int64_t c = 0; c < d; ++c) {
            real acc = bias->val[static_cast<std::size_t>(c)];
            for (std::int64_t j = 0; j < k; ++j) {
                const std::int64_t s = t + j - half;
                if (s < 0 || s >= valid_len) continue;
                acc += x->val[static_cast<std::size_t>(s * d + c)] *
                       kernel->val[static_cast<std::size_t>(j * d + c)];
            }
            out[static_cast<std::size_t>(t * d + c)] = acc;
        }
    return make_result(x->shape, std::move(out), {x, kernel, bias},
                       [x, kernel, bias, d, k, half, valid_len](Node& self) {
        for (std::int64_t t = 0; t < valid_len; ++t)
            for (std::int64_t c = 0; c < d; ++c) {
                const real g = self.grad[static_cast<std::size_t>(t * d + c)];
                if (g == real(0)) continue;
                if (bias->requires_grad) {
                    bias->ensure_grad();
                    bias->grad[static_cast<std::size_t>(c)] += g;
                }
                for (std::int64_t j = 0; j < k; ++j) {
                    const std::int64_t s = t + j - half;
                    if (s < 0 || s >= valid_len) continue;
                    if (kernel->requires_grad) {
                        kernel->ensure_grad();
                        kernel->grad[static_cast<std::size_t>(j * d + c)] +=
                            g * x->val[static_cast<std::size_t>(s * d + c)];
                    }
                    if (x->requires_grad) {
                        x->ensure_grad();
                        x->grad[static_cast<std::size_t>(s * d + c)] +=
                            g * kernel->val[static_cast<std::size_t>(j * d + c)];
                    }
                }
            }
    });
}

TensorPtr dropout(const TensorPtr& x, real rate, bool training, Rng* rng) {
    if (rate < 0 || rate >= 1) throw ShapeError("dropout: rate must be in [0, 1)");
    if (!training || rate == real(0)) return x;
    if (rng == nullptr) throw ShapeError("dropout: training mode requires an RNG");
    std::uniform_real_distribution<real> dist(real(0), real(1));
    const real keep = real(1) - rate;
    std::vector<real> mask(x->val.size());
    std::vector<real> out(x->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = dist(*rng) < rate ? real(0) : real(1) / keep;
        out[i] = x->val[i] * mask[i];
    }
    return make_result(x->shape, std::move(out), {x}, [x, mask](Node& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += self.grad[i] * mask[i];
    });
}

TensorPtr cross_entropy(const TensorPtr& log_probs, const std::vector<std::int64_t>& targets,
                        const std::vector<bool>& mask) {
    check_2d(log_probs, "cross_entropy");
    const std::int64_t t = log_probs->rows(), n = log_probs->cols();
    if (static_cast<std::int64_t>(targets.size()) != t ||
        static_cast<std::int64_t>(mask.size()) != t)
        throw ShapeError("cross_entropy: targets/mask length must equal " + std::to_string(t) +
                         " rows");
    for (std::int64_t i = 0; i < t; ++i)
        if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= n)
            throw ShapeError("cross_entropy: target " +
                             std::to_string(targets[static_cast<std::size_t>(i)]) +
                             " outside [0," + std::to_string(n) + ")");
    real loss = 0;
    for (std::int64_t i = 0; i < t; ++i)
        if (mask[static_cast<std::size_t>(i)])
            loss -= log_probs->val[static_cast<std::size_t>(
                i * n + targets[static_cast<std::size_t>(i)])];
    return make_result({1}, {loss}, {log_probs}, [log_probs, targets, mask, t, n](Node& self) {
        if (!log_probs->requires_grad) return;
        log_probs->ensure_grad();
        for (std::int64_t i = 0; i < t; ++i)
            if (mask[static_cast<std::size_t>(i)])
                log_probs->grad[static_cast<std::size_t>(
                    i * n + targets[static_cast<std::size_t>(i)])] -= self.grad[0];
    });
}

TensorPtr binary_cross_entropy(const TensorPtr& probs, const std::vector<int>& targets,
                               const std::vector<bool>& mask) {
    const std::int64_t s = probs->size();
    if (static_cast<std::int64_t>(targets.size()) != s ||
        static_cast<std::int64_t>(mask.size()) != s)
        throw ShapeError("binary_cross_entropy: targets/mask length must equal " +
                         std::to_string(s));
    constexpr real kEps = real(1e-7);
    real loss = 0;
    std::vector<real> clamped(static_cast<std::size_t>(s));
    for (std::int64_t i = 0; i < s; ++i) {
        const real p = std::clamp(probs->val[static_cast<std::size_t>(i)], kEps, real(1) - kEps);
        clamped[static_cast<std::size_t>(i)] = p;
        if (!mask[static_cast<std::size_t>(i)]) continue;
        loss -= targets[static_cast<std::size_t>(i)] ? std::log(p) : std::log(real(1) - p);
    }
    return make_result({1}, {loss}, {probs}, [probs, targets, mask, s, clamped](Node& self) {
        if (!probs->requires_grad) return;
        probs->ensure_grad();
        constexpr real kE = real(1e-7);
        for (std::int64_t i = 0; i < s; ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            const real raw = probs->val[static_cast<std::size_t>(i)];
            if (raw < kE || raw > real(1) - kE) continue;  // flat inside the clamp
            const real p = clamped[static_cast<std::size_t>(i)];
            const real g = targets[static_cast<std::size_t>(i)] ? -real(1) / p
                                                                : real(1) / (real(1) - p);
            probs->grad[static_cast<std::size_t>(i)] += self.grad[0] * g;
        }
    });
}

void backward(const TensorPtr& loss) {
    if (!loss->is_scalar()) throw ShapeError("backward: root must be a scalar");
    if (loss->backward_done)
        throw ShapeError("backward: already called on this root; reset_backward() first");
    loss->backward_done = true;
    if (!loss->requires_grad) return;

    // Topological order via iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior nodes are transient: only leaves accumulate across sweeps.
    for (Node* node : order)
        if (node->backprop) node->zero_grad();
    loss->ensure_grad();
    loss->grad[0] = real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
    // Leaves that were never touched still get a zero gradient buffer.
    for (Node* node : order)
        if (node->requires_grad) node->ensure_grad();
}

void reset_backward(const TensorPtr& loss) { loss->backward_done = false; }

void AdamW::step(const std::map<std::string, TensorPtr>& params) {
    ++step_count;
    const real bc1 = real(1) - std::pow(beta1, static_cast<real>(step_count));
    const real bc2 = real(1) - std::pow(beta2, static_cast<real>(step_count));
    for (const auto& [name, p] : params) {
        // parameters a forward pass never touched simply keep their values
        if (p->grad.empty()) continue;
        if (p->grad.size() != p->val.size())
            throw ModelError("adamw_step: parameter '" + name + "' has a malformed gradient");
        auto& mi = m[name];
        auto& vi = v[name];
        if (mi.size() != p->val.size()) mi.assign(p->val.size(), real(0));
        if (vi.size() != p->val.size()) vi.assign(p->val.size(), real(0));
        for (std::size_t i = 0; i < p->val.size(); ++i) {
            const real g = p->grad[i];
            mi[i] = beta1 * mi[i] + (real(1) - beta1) * g;
            vi[i] = beta2 * vi[i] + (real(1) - beta2) * g * g;
            const real mhat = mi[i] / bc1;
            const real vhat = vi[i] / bc2;
            p->val[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->val[i]);
        }
    }
}

void AdamW::zero_grad(const std::map<std::string, TensorPtr>& params) {
    for (const auto& [name, p] : params) {
        (void)name;
        p->zero_grad();
    }
}

}  // namespace dvfa::ag
