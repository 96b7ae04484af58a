#include "taskspace/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "taskspace/common.hpp"

namespace taskspace {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat cmap(const Tensor& t) {
    return CMapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

MapMat map(Tensor& t) {
    return MapMat(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    fail(Errc::shape_mismatch,
         std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

GradTape::Var GradTape::push(Tensor value, bool requires_grad,
                             std::function<void(GradTape&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = tracing_ && requires_grad;
    if (n.requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Tensor& GradTape::grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

const Tensor& GradTape::grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.grad.data.empty()) fail(Errc::invalid_argument, "no gradient recorded for node");
    return n.grad;
}

GradTape::Var GradTape::leaf(Tensor value) { return push(std::move(value), false, {}); }

GradTape::Var GradTape::param(Tensor value, std::string name) {
    Var v = push(std::move(value), true, {});
    node(v).is_param = true;
    node(v).param_name = std::move(name);
    return v;
}

GradTape::Var GradTape::add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) shape_fail("add", ta, tb);
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        if (t.wants_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (t.wants_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
        }
    });
}

GradTape::Var GradTape::sub(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) shape_fail("sub", ta, tb);
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        if (t.wants_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (t.wants_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
        }
    });
}

GradTape::Var GradTape::mul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) shape_fail("mul", ta, tb);
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        if (t.wants_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            const Tensor& vb = t.value(b);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vb.data[i];
        }
        if (t.wants_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            const Tensor& va = t.value(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * va.data[i];
        }
    });
}

GradTape::Var GradTape::scale(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(a), [a, c, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
    });
}

GradTape::Var GradTape::matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.cols() != tb.rows())
        shape_fail("matmul", ta, tb);
    Tensor out = Tensor::zeros({ta.rows(), tb.cols()});
    map(out).noalias() = cmap(ta) * cmap(tb);
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        if (t.wants_grad(a))
            map(t.grad_buffer(a)).noalias() += cmap(g) * cmap(t.value(b)).transpose();
        if (t.wants_grad(b))
            map(t.grad_buffer(b)).noalias() += cmap(t.value(a)).transpose() * cmap(g);
    });
}

GradTape::Var GradTape::matmul_nt(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.cols() != tb.cols())
        shape_fail("matmul_nt", ta, tb);
    Tensor out = Tensor::zeros({ta.rows(), tb.rows()});
    map(out).noalias() = cmap(ta) * cmap(tb).transpose();
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(a) || wants_grad(b), [a, b, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        if (t.wants_grad(a)) map(t.grad_buffer(a)).noalias() += cmap(g) * cmap(t.value(b));
        if (t.wants_grad(b))
            map(t.grad_buffer(b)).noalias() += cmap(g).transpose() * cmap(t.value(a));
    });
}

GradTape::Var GradTape::add_row_bias(Var x, Var bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    if (tb.shape.size() != 1 || tb.cols() != tx.cols()) shape_fail("add_row_bias", tx, tb);
    Tensor out = tx;
    const std::size_t cols = tx.cols();
    for (std::size_t r = 0; r < tx.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += tb.data[c];
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(x) || wants_grad(bias),
                [x, bias, self](GradTape& t) {
                    const Tensor& g = t.grad(self);
                    const std::size_t cols = g.cols();
                    if (t.wants_grad(x)) {
                        Tensor& gx = t.grad_buffer(x);
                        for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
                    }
                    if (t.wants_grad(bias)) {
                        Tensor& gb = t.grad_buffer(bias);
                        for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                                gb.data[c] += g.data[r * cols + c];
                    }
                });
}

GradTape::Var GradTape::reduce_sum(Var x) {
    const Tensor& tx = value(x);
    double total = 0.0;
    for (double v : tx.data) total += v;
    Var self = static_cast<Var>(nodes_.size());
    return push(Tensor::scalar(total), wants_grad(x), [x, self](GradTape& t) {
        double g = t.grad(self).data[0];
        Tensor& gx = t.grad_buffer(x);
        for (double& v : gx.data) v += g;
    });
}

GradTape::Var GradTape::gather_rows(Var matrix, std::vector<std::int32_t> row_ids) {
    const Tensor& tm = value(matrix);
    if (tm.shape.size() != 2) fail(Errc::shape_mismatch, "gather_rows: matrix must be 2-D");
    const std::size_t cols = tm.cols();
    Tensor out = Tensor::zeros({row_ids.size(), cols});
    for (std::size_t i = 0; i < row_ids.size(); ++i) {
        std::int32_t id = row_ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= tm.rows())
            fail(Errc::token_out_of_range,
                 "gather_rows: row " + std::to_string(id) + " out of " + tm.shape_str());
        const double* src = tm.data.data() + static_cast<std::size_t>(id) * cols;
        std::copy(src, src + cols, out.data.data() + i * cols);
    }
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(matrix),
                [matrix, ids = std::move(row_ids), self](GradTape& t) {
                    const Tensor& g = t.grad(self);
                    Tensor& gm = t.grad_buffer(matrix);
                    const std::size_t cols = g.cols();
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                        double* dst = gm.data.data() + static_cast<std::size_t>(ids[i]) * cols;
                        const double* src = g.data.data() + i * cols;
                        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                    }
                });
}

GradTape::Var GradTape::layer_norm(Var x, Var gain, Var bias) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    const std::size_t cols = tx.cols();
    if (tg.numel() != cols || tb.numel() != cols) shape_fail("layer_norm", tx, tg);
    const std::size_t rows = tx.rows();
    Tensor out = Tensor::zeros(tx.shape);
    std::vector<double> mean(rows), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = tx.data.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        mean[r] = mu;
        inv_std[r] = inv;
        double* yr = out.data.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c)
            yr[c] = (xr[c] - mu) * inv * tg.data[c] + tb.data[c];
    }
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(x) || wants_grad(gain) || wants_grad(bias),
                [x, gain, bias, mean = std::move(mean), inv_std = std::move(inv_std),
                 self](GradTape& t) {
                    const Tensor& g = t.grad(self);
                    const Tensor& tx = t.value(x);
                    const Tensor& tg = t.value(gain);
                    const std::size_t rows = tx.rows(), cols = tx.cols();
                    const bool need_x = t.wants_grad(x);
                    const bool need_g = t.wants_grad(gain);
                    const bool need_b = t.wants_grad(bias);
                    Tensor* gx = need_x ? &t.grad_buffer(x) : nullptr;
                    Tensor* gg = need_g ? &t.grad_buffer(gain) : nullptr;
                    Tensor* gb = need_b ? &t.grad_buffer(bias) : nullptr;
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* xr = tx.data.data() + r * cols;
                        const double* gr = g.data.data() + r * cols;
                        const double mu = mean[r], inv = inv_std[r];
                        if (need_g || need_b) {
                            for (std::size_t c = 0; c < cols; ++c) {
                                double xhat = (xr[c] - mu) * inv;
                                if (need_g) gg->data[c] += gr[c] * xhat;
                                if (need_b) gb->data[c] += gr[c];
                            }
                        }
                        if (need_x) {
                            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                            for (std::size_t c = 0; c < cols; ++c) {
                                double dxhat = gr[c] * tg.data[c];
                                double xhat = (xr[c] - mu) * inv;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            const double n = static_cast<double>(cols);
                            double* gxr = gx->data.data() + r * cols;
                            for (std::size_t c = 0; c < cols; ++c) {
                                double dxhat = gr[c] * tg.data[c];
                                double xhat = (xr[c] - mu) * inv;
                                gxr[c] += inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                            }
                        }
                    }
                });
}

GradTape::Var GradTape::gelu(Var x) {
    const Tensor& tx = value(x);
    Tensor out = tx;
    for (double& v : out.data) {
        double u = kGeluC0 * (v + kGeluC1 * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(x), [x, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        const Tensor& tx = t.value(x);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            double v = tx.data[i];
            double u = kGeluC0 * (v + kGeluC1 * v * v * v);
            double th = std::tanh(u);
            double d = 0.5 * (1.0 + th) +
                       0.5 * v * (1.0 - th * th) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
            gx.data[i] += g.data[i] * d;
        }
    });
}

GradTape::Var GradTape::relu(Var x) {
    const Tensor& tx = value(x);
    Tensor out = tx;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(x), [x, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        const Tensor& tx = t.value(x);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.data.size(); ++i)
            if (tx.data[i] > 0.0) gx.data[i] += g.data[i];
    });
}

GradTape::Var GradTape::softmax_rows(Var x) {
    const Tensor& tx = value(x);
    const std::size_t rows = tx.rows(), cols = tx.cols();
    Tensor out = Tensor::zeros(tx.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = tx.data.data() + r * cols;
        double* yr = out.data.data() + r * cols;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) m = std::max(m, xr[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - m);
            sum += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= sum;
    }
    Var self = static_cast<Var>(nodes_.size());
    // self value is the softmax output, reused in the backward pass
    return push(std::move(out), wants_grad(x), [x, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        const Tensor& p = t.value(self);
        Tensor& gx = t.grad_buffer(x);
        const std::size_t rows = p.rows(), cols = p.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* pr = p.data.data() + r * cols;
            const double* gr = g.data.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * pr[c];
            double* gxr = gx.data.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) gxr[c] += pr[c] * (gr[c] - dot);
        }
    });
}

GradTape::Var GradTape::causal_mask(Var scores) {
    const Tensor& ts = value(scores);
    if (ts.shape.size() != 2 || ts.rows() != ts.cols())
        fail(Errc::shape_mismatch, "causal_mask: expects square matrix, got " + ts.shape_str());
    const std::size_t n = ts.rows();
    Tensor out = ts;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            out.data[i * n + j] = -std::numeric_limits<double>::infinity();
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(scores), [scores, n, self](GradTape& t) {
        const Tensor& g = t.grad(self);
        Tensor& gs = t.grad_buffer(scores);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) gs.data[i * n + j] += g.data[i * n + j];
    });
}

GradTape::Var GradTape::causal_attention(Var q, Var k, Var v,
                                         std::vector<std::int32_t> seg_offsets, int n_heads) {
    const Tensor& tq = value(q);
    const Tensor& tk = value(k);
    const Tensor& tv = value(v);
    if (!tq.same_shape(tk) || !tq.same_shape(tv)) shape_fail("causal_attention", tq, tk);
    const std::size_t d = tq.cols();
    if (n_heads <= 0 || d % static_cast<std::size_t>(n_heads) != 0)
        fail(Errc::invalid_argument, "causal_attention: d_model not divisible by n_heads");
    if (seg_offsets.size() < 2 || seg_offsets.front() != 0 ||
        static_cast<std::size_t>(seg_offsets.back()) != tq.rows())
        fail(Errc::invalid_argument, "causal_attention: bad segment offsets");
    const std::size_t dh = d / static_cast<std::size_t>(n_heads);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t n_segs = seg_offsets.size() - 1;

    // softmax weights, packed per (segment, head) as T x T row-major blocks
    std::vector<std::size_t> woff(n_segs + 1, 0);
    for (std::size_t s = 0; s < n_segs; ++s) {
        const std::size_t len = static_cast<std::size_t>(seg_offsets[s + 1] - seg_offsets[s]);
        woff[s + 1] = woff[s] + static_cast<std::size_t>(n_heads) * len * len;
    }
    std::vector<double> weights(woff.back(), 0.0);

    Tensor out = Tensor::zeros(tq.shape);
    for (std::size_t s = 0; s < n_segs; ++s) {
        const std::size_t r0 = static_cast<std::size_t>(seg_offsets[s]);
        const std::size_t len = static_cast<std::size_t>(seg_offsets[s + 1]) - r0;
        for (int h = 0; h < n_heads; ++h) {
            const std::size_t hc = static_cast<std::size_t>(h) * dh;
            double* w = weights.data() + woff[s] + static_cast<std::size_t>(h) * len * len;
            for (std::size_t i = 0; i < len; ++i) {
                double* wi = w + i * len;
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* qi = tq.data.data() + (r0 + i) * d + hc;
                    const double* kj = tk.data.data() + (r0 + j) * d + hc;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    wi[j] = dot * att_scale;
                    m = std::max(m, wi[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    wi[j] = std::exp(wi[j] - m);
                    sum += wi[j];
                }
                double* oi = out.data.data() + (r0 + i) * d + hc;
                for (std::size_t j = 0; j <= i; ++j) {
                    wi[j] /= sum;
                    const double* vj = tv.data.data() + (r0 + j) * d + hc;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += wi[j] * vj[c];
                }
            }
        }
    }

    Var self = static_cast<Var>(nodes_.size());
    bool needs = wants_grad(q) || wants_grad(k) || wants_grad(v);
    return push(std::move(out), needs,
                [q, k, v, segs = std::move(seg_offsets), n_heads, dh, att_scale,
                 weights = std::move(weights), woff = std::move(woff), self](GradTape& t) {
                    const Tensor& g = t.grad(self);
                    const Tensor& tq = t.value(q);
                    const Tensor& tk = t.value(k);
                    const Tensor& tv = t.value(v);
                    const std::size_t d = tq.cols();
                    Tensor& gq = t.grad_buffer(q);
                    Tensor& gk = t.grad_buffer(k);
                    Tensor& gv = t.grad_buffer(v);
                    std::vector<double> dw;
                    for (std::size_t s = 0; s + 1 < segs.size(); ++s) {
                        const std::size_t r0 = static_cast<std::size_t>(segs[s]);
                        const std::size_t len = static_cast<std::size_t>(segs[s + 1]) - r0;
                        dw.assign(len * len, 0.0);
                        for (int h = 0; h < n_heads; ++h) {
                            const std::size_t hc = static_cast<std::size_t>(h) * dh;
                            const double* w =
                                weights.data() + woff[s] + static_cast<std::size_t>(h) * len * len;
                            for (std::size_t i = 0; i < len; ++i) {
                                const double* gi = g.data.data() + (r0 + i) * d + hc;
                                const double* wi = w + i * len;
                                double* dwi = dw.data() + i * len;
                                // dL/dweight and value grads
                                for (std::size_t j = 0; j <= i; ++j) {
                                    const double* vj = tv.data.data() + (r0 + j) * d + hc;
                                    double* gvj = gv.data.data() + (r0 + j) * d + hc;
                                    double acc = 0.0;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                        acc += gi[c] * vj[c];
                                        gvj[c] += wi[j] * gi[c];
                                    }
                                    dwi[j] = acc;
                                }
                                // softmax backward within the row
                                double dot = 0.0;
                                for (std::size_t j = 0; j <= i; ++j) dot += dwi[j] * wi[j];
                                double* gqi = gq.data.data() + (r0 + i) * d + hc;
                                for (std::size_t j = 0; j <= i; ++j) {
                                    const double ds = wi[j] * (dwi[j] - dot) * att_scale;
                                    const double* kj = tk.data.data() + (r0 + j) * d + hc;
                                    const double* qi = tq.data.data() + (r0 + i) * d + hc;
                                    double* gkj = gk.data.data() + (r0 + j) * d + hc;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                        gqi[c] += ds * kj[c];
                                        gkj[c] += ds * qi[c];
                                    }
                                }
                            }
                        }
                    }
                });
}

GradTape::Var GradTape::cross_entropy(Var logits, std::vector<std::int32_t> targets,
                                      Reduction reduction) {
    const Tensor& tl = value(logits);
    if (tl.shape.size() != 2 || targets.size() != tl.rows())
        fail(Errc::shape_mismatch, "cross_entropy: logits " + tl.shape_str() + " vs " +
                                       std::to_string(targets.size()) + " targets");
    const std::size_t rows = tl.rows(), vocab = tl.cols();
    std::vector<double> lse(rows, 0.0);
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        std::int32_t tgt = targets[r];
        if (tgt < 0) continue;
        if (static_cast<std::size_t>(tgt) >= vocab)
            fail(Errc::token_out_of_range, "cross_entropy: target " + std::to_string(tgt) +
                                               " out of vocab " + std::to_string(vocab));
        const double* xr = tl.data.data() + r * vocab;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < vocab; ++c) m = std::max(m, xr[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) sum += std::exp(xr[c] - m);
        lse[r] = m + std::log(sum);
        total += lse[r] - xr[static_cast<std::size_t>(tgt)];
        ++counted;
    }
    if (counted == 0) fail(Errc::empty_input, "cross_entropy: no scored rows");
    const double denom = reduction == Reduction::mean ? static_cast<double>(counted) : 1.0;
    Var self = static_cast<Var>(nodes_.size());
    return push(Tensor::scalar(total / denom), wants_grad(logits),
                [logits, targets = std::move(targets), lse = std::move(lse), denom,
                 self](GradTape& t) {
                    const double coef = t.grad(self).data[0] / denom;
                    const Tensor& tl = t.value(logits);
                    Tensor& gl = t.grad_buffer(logits);
                    const std::size_t vocab = tl.cols();
                    for (std::size_t r = 0; r < targets.size(); ++r) {
                        std::int32_t tgt = targets[r];
                        if (tgt < 0) continue;
                        const double* xr = tl.data.data() + r * vocab;
                        double* gr = gl.data.data() + r * vocab;
                        for (std::size_t c = 0; c < vocab; ++c)
                            gr[c] += coef * std::exp(xr[c] - lse[r]);
                        gr[static_cast<std::size_t>(tgt)] -= coef;
                    }
                });
}

GradTape::Var GradTape::dropout(Var x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) fail(Errc::invalid_argument, "dropout: rate must be in [0,1)");
    if (rate == 0.0) return x;
    const Tensor& tx = value(x);
    std::vector<double> mask(tx.numel());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& m : mask) m = rng.uniform01() < rate ? 0.0 : keep_scale;
    Tensor out = tx;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask[i];
    Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), wants_grad(x), [x, mask = std::move(mask), self](GradTape& t) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] * mask[i];
    });
}

void GradTape::backward(Var loss) {
    if (!tracing_) fail(Errc::invalid_argument, "backward: tape is not tracing");
    Node& ln = node(loss);
    if (!ln.value.is_scalar())
        fail(Errc::non_scalar_loss, "backward: loss must be scalar, got " + ln.value.shape_str());
    if (!std::isfinite(ln.value.data[0])) fail(Errc::non_finite, "backward: loss is not finite");
    grad_buffer(loss).data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.data.empty() || !n.backprop) continue;
        n.backprop(*this);
    }
    for (const Node& n : nodes_) {
        if (!n.is_param || n.grad.data.empty()) continue;
        if (!n.grad.all_finite())
            fail(Errc::non_finite, "backward: non-finite gradient for parameter " + n.param_name);
    }
}

double finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> theta, const std::vector<double>& analytic,
                         std::span<const std::size_t> coords, double h) {
    if (h <= 0.0) fail(Errc::invalid_argument, "finite_diff_check: h must be > 0");
    if (analytic.size() != theta.size())
        fail(Errc::shape_mismatch, "finite_diff_check: analytic size mismatch");
    double worst = 0.0;
    for (std::size_t i : coords) {
        if (i >= theta.size()) fail(Errc::invalid_argument, "finite_diff_check: coord out of range");
        const double orig = theta[i];
        theta[i] = orig + h;
        const double fp = f(theta);
        theta[i] = orig - h;
        const double fm = f(theta);
        theta[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            fail(Errc::non_finite, "finite_diff_check: f not finite at probe point");
        const double numeric = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace taskspace
