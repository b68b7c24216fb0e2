#include "unlearn/graph.hpp"

#include <cmath>

namespace unlearn {

namespace {
constexpr real kNormGuard = 1e-12;
}

ValueId Graph::make(Tensor val, bool requires_grad, std::function<void(Graph&)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return ValueId{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(ValueId id) {
    Node& n = node(id);
    if (n.grad.empty() && !n.val.empty()) n.grad = Tensor(n.val.shape());
    return n.grad;
}

ValueId Graph::input(Tensor v, bool requires_grad) {
    return make(std::move(v), requires_grad, nullptr);
}

// ------------------------------- conv2d ------------------------------------

ValueId Graph::conv2d(ValueId xi, ValueId wi, ValueId bi, int stride, int pad) {
    const Tensor& x = value(xi);
    const Tensor& w = value(wi);
    const Tensor& b = value(bi);
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects 4-d input and weight");
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != Cin) throw ShapeError("conv2d channel mismatch");
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d output collapsed to zero size");

    Tensor out({N, Cout, Ho, Wo});
    const real* xp = x.data();
    const real* wp = w.data();
    real* op = out.data();
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    real acc = b[static_cast<size_t>(co)];
                    for (int ci = 0; ci < Cin; ++ci) {
                        for (int kh = 0; kh < k; ++kh) {
                            const int h = ho * stride - pad + kh;
                            if (h < 0 || h >= H) continue;
                            const size_t xrow = ((static_cast<size_t>(n) * Cin + ci) * H + h) * W;
                            const size_t wrow =
                                ((static_cast<size_t>(co) * Cin + ci) * k + kh) * k;
                            for (int kw = 0; kw < k; ++kw) {
                                const int ww = wo * stride - pad + kw;
                                if (ww < 0 || ww >= W) continue;
                                acc += xp[xrow + static_cast<size_t>(ww)] *
                                       wp[wrow + static_cast<size_t>(kw)];
                            }
                        }
                    }
                    *op++ = acc;
                }
            }
        }
    }

    bool rg = requires_grad(xi) || requires_grad(wi) || requires_grad(bi);
    auto back = [xi, wi, bi, stride, pad, N, Cin, H, W, Cout, k, Ho, Wo,
                 out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& x = g.value(xi);
        const Tensor& w = g.value(wi);
        const bool need_x = g.requires_grad(xi);
        const bool need_w = g.requires_grad(wi);
        const bool need_b = g.requires_grad(bi);
        Tensor* gx = need_x ? &g.grad_buf(xi) : nullptr;
        Tensor* gw = need_w ? &g.grad_buf(wi) : nullptr;
        Tensor* gb = need_b ? &g.grad_buf(bi) : nullptr;
        const real* gyp = gy.data();
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Cout; ++co) {
                for (int ho = 0; ho < Ho; ++ho) {
                    for (int wo = 0; wo < Wo; ++wo) {
                        const real gv = *gyp++;
                        if (gv == 0.0) continue;
                        if (gb) (*gb)[static_cast<size_t>(co)] += gv;
                        for (int ci = 0; ci < Cin; ++ci) {
                            for (int kh = 0; kh < k; ++kh) {
                                const int h = ho * stride - pad + kh;
                                if (h < 0 || h >= H) continue;
                                const size_t xrow =
                                    ((static_cast<size_t>(n) * Cin + ci) * H + h) * W;
                                const size_t wrow =
                                    ((static_cast<size_t>(co) * Cin + ci) * k + kh) * k;
                                for (int kw = 0; kw < k; ++kw) {
                                    const int ww = wo * stride - pad + kw;
                                    if (ww < 0 || ww >= W) continue;
                                    if (gw) {
                                        (*gw)[wrow + static_cast<size_t>(kw)] +=
                                            gv * x[xrow + static_cast<size_t>(ww)];
                                    }
                                    if (gx) {
                                        (*gx)[xrow + static_cast<size_t>(ww)] +=
                                            gv * w[wrow + static_cast<size_t>(kw)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

// ----------------------------- batch norm ----------------------------------

ValueId Graph::batchnorm_eval(ValueId xi, ValueId gi, ValueId bi, const Tensor& running_mean,
                              const Tensor& running_var, real eps) {
    const Tensor& x = value(xi);
    if (x.rank() != 4) throw ShapeError("batchnorm expects 4-d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t plane = static_cast<size_t>(H) * W;
    const Tensor& gamma = value(gi);
    const Tensor& beta = value(bi);

    std::vector<real> inv_s(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        inv_s[static_cast<size_t>(c)] =
            1.0 / std::sqrt(running_var[static_cast<size_t>(c)] + eps);
    }

    Tensor out(x.shape());
    Tensor xhat(x.shape());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            const real mu = running_mean[static_cast<size_t>(c)];
            const real is = inv_s[static_cast<size_t>(c)];
            const real ga = gamma[static_cast<size_t>(c)];
            const real be = beta[static_cast<size_t>(c)];
            for (size_t i = 0; i < plane; ++i) {
                const real xh = (x[base + i] - mu) * is;
                xhat[base + i] = xh;
                out[base + i] = ga * xh + be;
            }
        }
    }

    bool rg = requires_grad(xi) || requires_grad(gi) || requires_grad(bi);
    auto back = [xi, gi, bi, N, C, plane, inv_s, xhat = std::move(xhat),
                 out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& gamma = g.value(gi);
        Tensor* gx = g.requires_grad(xi) ? &g.grad_buf(xi) : nullptr;
        Tensor* gg = g.requires_grad(gi) ? &g.grad_buf(gi) : nullptr;
        Tensor* gb = g.requires_grad(bi) ? &g.grad_buf(bi) : nullptr;
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const size_t base = (static_cast<size_t>(n) * C + c) * plane;
                const real gis = gamma[static_cast<size_t>(c)] * inv_s[static_cast<size_t>(c)];
                for (size_t i = 0; i < plane; ++i) {
                    const real gv = gy[base + i];
                    if (gx) (*gx)[base + i] += gv * gis;
                    if (gg) (*gg)[static_cast<size_t>(c)] += gv * xhat[base + i];
                    if (gb) (*gb)[static_cast<size_t>(c)] += gv;
                }
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::batchnorm_batch(ValueId xi, ValueId gi, ValueId bi, real eps,
                               Tensor* out_batch_mean, Tensor* out_batch_var) {
    const Tensor& x = value(xi);
    if (x.rank() != 4) throw ShapeError("batchnorm expects 4-d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t plane = static_cast<size_t>(H) * W;
    const real m = static_cast<real>(N) * static_cast<real>(plane);
    const Tensor& gamma = value(gi);
    const Tensor& beta = value(bi);

    Tensor mu({C});
    Tensor var({C});
    for (int c = 0; c < C; ++c) {
        real s = 0.0;
        for (int n = 0; n < N; ++n) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) s += x[base + i];
        }
        mu[static_cast<size_t>(c)] = s / m;
    }
    for (int c = 0; c < C; ++c) {
        real s = 0.0;
        const real mc = mu[static_cast<size_t>(c)];
        for (int n = 0; n < N; ++n) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
                const real d = x[base + i] - mc;
                s += d * d;
            }
        }
        var[static_cast<size_t>(c)] = s / m;
    }
    if (out_batch_mean) *out_batch_mean = mu;
    if (out_batch_var) *out_batch_var = var;

    std::vector<real> inv_s(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        inv_s[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
    }

    Tensor out(x.shape());
    Tensor xhat(x.shape());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            const real mc = mu[static_cast<size_t>(c)];
            const real is = inv_s[static_cast<size_t>(c)];
            const real ga = gamma[static_cast<size_t>(c)];
            const real be = beta[static_cast<size_t>(c)];
            for (size_t i = 0; i < plane; ++i) {
                const real xh = (x[base + i] - mc) * is;
                xhat[base + i] = xh;
                out[base + i] = ga * xh + be;
            }
        }
    }

    bool rg = requires_grad(xi) || requires_grad(gi) || requires_grad(bi);
    auto back = [xi, gi, bi, N, C, plane, m, inv_s, xhat = std::move(xhat),
                 out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& gamma = g.value(gi);
        Tensor* gx = g.requires_grad(xi) ? &g.grad_buf(xi) : nullptr;
        Tensor* gg = g.requires_grad(gi) ? &g.grad_buf(gi) : nullptr;
        Tensor* gb = g.requires_grad(bi) ? &g.grad_buf(bi) : nullptr;
        for (int c = 0; c < C; ++c) {
            // Channel-wise reductions of dL/dxhat and dL/dxhat * xhat.
            real sum_gxh = 0.0, sum_gxh_xh = 0.0, sum_gy = 0.0, sum_gy_xh = 0.0;
            const real ga = gamma[static_cast<size_t>(c)];
            for (int n = 0; n < N; ++n) {
                const size_t base = (static_cast<size_t>(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) {
                    const real gv = gy[base + i];
                    const real xh = xhat[base + i];
                    sum_gy += gv;
                    sum_gy_xh += gv * xh;
                    const real gxh = gv * ga;
                    sum_gxh += gxh;
                    sum_gxh_xh += gxh * xh;
                }
            }
            if (gg) (*gg)[static_cast<size_t>(c)] += sum_gy_xh;
            if (gb) (*gb)[static_cast<size_t>(c)] += sum_gy;
            if (gx) {
                const real is = inv_s[static_cast<size_t>(c)];
                const real mean_gxh = sum_gxh / m;
                const real mean_gxh_xh = sum_gxh_xh / m;
                for (int n = 0; n < N; ++n) {
                    const size_t base = (static_cast<size_t>(n) * C + c) * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        const real gxh = gy[base + i] * ga;
                        (*gx)[base + i] +=
                            is * (gxh - mean_gxh - xhat[base + i] * mean_gxh_xh);
                    }
                }
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

// ------------------------------ simple ops ---------------------------------

ValueId Graph::relu(ValueId xi) {
    const Tensor& x = value(xi);
    Tensor out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    bool rg = requires_grad(xi);
    auto back = [xi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        const Tensor& x = g.value(xi);
        Tensor& gx = g.grad_buf(xi);
        for (size_t i = 0; i < x.size(); ++i) {
            if (x[i] > 0.0) gx[i] += gy[i];
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::global_avg_pool(ValueId xi) {
    const Tensor& x = value(xi);
    if (x.rank() != 4) throw ShapeError("global_avg_pool expects 4-d input");
    const int N = x.dim(0), C = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    const real inv = 1.0 / static_cast<real>(plane);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            real s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += x[base + i];
            out[static_cast<size_t>(n) * C + c] = s * inv;
        }
    }
    bool rg = requires_grad(xi);
    auto back = [xi, N, C, plane, inv, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        Tensor& gx = g.grad_buf(xi);
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const size_t base = (static_cast<size_t>(n) * C + c) * plane;
                const real gv = gy[static_cast<size_t>(n) * C + c] * inv;
                for (size_t i = 0; i < plane; ++i) gx[base + i] += gv;
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::linear(ValueId xi, ValueId wi, ValueId bi) {
    const Tensor& x = value(xi);
    const Tensor& w = value(wi);
    const Tensor& b = value(bi);
    if (x.rank() != 2 || w.rank() != 2) throw ShapeError("linear expects 2-d input and weight");
    const int N = x.dim(0), In = x.dim(1), Out = w.dim(0);
    if (w.dim(1) != In) throw ShapeError("linear weight/input mismatch");
    Tensor out({N, Out});
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < Out; ++o) {
            real acc = b[static_cast<size_t>(o)];
            const size_t xrow = static_cast<size_t>(n) * In;
            const size_t wrow = static_cast<size_t>(o) * In;
            for (int i = 0; i < In; ++i) acc += x[xrow + i] * w[wrow + i];
            out[static_cast<size_t>(n) * Out + o] = acc;
        }
    }
    bool rg = requires_grad(xi) || requires_grad(wi) || requires_grad(bi);
    auto back = [xi, wi, bi, N, In, Out, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& x = g.value(xi);
        const Tensor& w = g.value(wi);
        Tensor* gx = g.requires_grad(xi) ? &g.grad_buf(xi) : nullptr;
        Tensor* gw = g.requires_grad(wi) ? &g.grad_buf(wi) : nullptr;
        Tensor* gb = g.requires_grad(bi) ? &g.grad_buf(bi) : nullptr;
        for (int n = 0; n < N; ++n) {
            const size_t xrow = static_cast<size_t>(n) * In;
            for (int o = 0; o < Out; ++o) {
                const real gv = gy[static_cast<size_t>(n) * Out + o];
                if (gv == 0.0) continue;
                const size_t wrow = static_cast<size_t>(o) * In;
                if (gb) (*gb)[static_cast<size_t>(o)] += gv;
                for (int i = 0; i < In; ++i) {
                    if (gw) (*gw)[wrow + i] += gv * x[xrow + i];
                    if (gx) (*gx)[xrow + i] += gv * w[wrow + i];
                }
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::embedding_rows(ValueId ti, std::vector<int> ids) {
    const Tensor& table = value(ti);
    if (table.rank() != 2) throw ShapeError("embedding table must be 2-d");
    const int V = table.dim(0), D = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= V) {
            throw VocabError("prompt id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(V));
        }
    }
    const int M = static_cast<int>(ids.size());
    Tensor out({M, D});
    for (int m = 0; m < M; ++m) {
        const size_t src = static_cast<size_t>(ids[static_cast<size_t>(m)]) * D;
        for (int d = 0; d < D; ++d) out[static_cast<size_t>(m) * D + d] = table[src + d];
    }
    bool rg = requires_grad(ti);
    auto back = [ti, ids = std::move(ids), D, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(ti)) return;
        Tensor& gt = g.grad_buf(ti);
        for (size_t m = 0; m < ids.size(); ++m) {
            const size_t dst = static_cast<size_t>(ids[m]) * D;
            for (int d = 0; d < D; ++d) gt[dst + d] += gy[m * static_cast<size_t>(D) + d];
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::l2_normalize_rows(ValueId xi) {
    const Tensor& x = value(xi);
    if (x.rank() != 2) throw ShapeError("l2_normalize_rows expects 2-d input");
    const int N = x.dim(0), D = x.dim(1);
    Tensor out(x.shape());
    std::vector<real> norms(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        const size_t row = static_cast<size_t>(n) * D;
        real s = 0.0;
        for (int d = 0; d < D; ++d) s += x[row + d] * x[row + d];
        const real nn = std::max(std::sqrt(s), kNormGuard);
        norms[static_cast<size_t>(n)] = nn;
        for (int d = 0; d < D; ++d) out[row + d] = x[row + d] / nn;
    }
    bool rg = requires_grad(xi);
    auto back = [xi, N, D, norms = std::move(norms),
                 out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        const Tensor& y = g.value(ValueId{out_id});
        Tensor& gx = g.grad_buf(xi);
        for (int n = 0; n < N; ++n) {
            const size_t row = static_cast<size_t>(n) * D;
            real gdoty = 0.0;
            for (int d = 0; d < D; ++d) gdoty += gy[row + d] * y[row + d];
            const real inv = 1.0 / norms[static_cast<size_t>(n)];
            for (int d = 0; d < D; ++d) {
                gx[row + d] += (gy[row + d] - y[row + d] * gdoty) * inv;
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::matmul_nt(ValueId ai, ValueId bi) {
    const Tensor& a = value(ai);
    const Tensor& b = value(bi);
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_nt shape mismatch");
    }
    const int N = a.dim(0), D = a.dim(1), M = b.dim(0);
    Tensor out({N, M});
    for (int n = 0; n < N; ++n) {
        const size_t arow = static_cast<size_t>(n) * D;
        for (int m = 0; m < M; ++m) {
            const size_t brow = static_cast<size_t>(m) * D;
            real acc = 0.0;
            for (int d = 0; d < D; ++d) acc += a[arow + d] * b[brow + d];
            out[static_cast<size_t>(n) * M + m] = acc;
        }
    }
    bool rg = requires_grad(ai) || requires_grad(bi);
    auto back = [ai, bi, N, D, M, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& a = g.value(ai);
        const Tensor& b = g.value(bi);
        Tensor* ga = g.requires_grad(ai) ? &g.grad_buf(ai) : nullptr;
        Tensor* gb = g.requires_grad(bi) ? &g.grad_buf(bi) : nullptr;
        for (int n = 0; n < N; ++n) {
            for (int m = 0; m < M; ++m) {
                const real gv = gy[static_cast<size_t>(n) * M + m];
                if (gv == 0.0) continue;
                const size_t arow = static_cast<size_t>(n) * D;
                const size_t brow = static_cast<size_t>(m) * D;
                for (int d = 0; d < D; ++d) {
                    if (ga) (*ga)[arow + d] += gv * b[brow + d];
                    if (gb) (*gb)[brow + d] += gv * a[arow + d];
                }
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::matmul_nn(ValueId ai, ValueId bi) {
    const Tensor& a = value(ai);
    const Tensor& b = value(bi);
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul_nn shape mismatch");
    }
    const int N = a.dim(0), K = a.dim(1), M = b.dim(1);
    Tensor out({N, M});
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            const real av = a[static_cast<size_t>(n) * K + k];
            if (av == 0.0) continue;
            const size_t brow = static_cast<size_t>(k) * M;
            for (int m = 0; m < M; ++m) {
                out[static_cast<size_t>(n) * M + m] += av * b[brow + m];
            }
        }
    }
    bool rg = requires_grad(ai) || requires_grad(bi);
    auto back = [ai, bi, N, K, M, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& a = g.value(ai);
        const Tensor& b = g.value(bi);
        Tensor* ga = g.requires_grad(ai) ? &g.grad_buf(ai) : nullptr;
        Tensor* gb = g.requires_grad(bi) ? &g.grad_buf(bi) : nullptr;
        for (int n = 0; n < N; ++n) {
            for (int m = 0; m < M; ++m) {
                const real gv = gy[static_cast<size_t>(n) * M + m];
                if (gv == 0.0) continue;
                for (int k = 0; k < K; ++k) {
                    if (ga) {
                        (*ga)[static_cast<size_t>(n) * K + k] +=
                            gv * b[static_cast<size_t>(k) * M + m];
                    }
                    if (gb) {
                        (*gb)[static_cast<size_t>(k) * M + m] +=
                            gv * a[static_cast<size_t>(n) * K + k];
                    }
                }
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::transpose2d(ValueId xi) {
    const Tensor& x = value(xi);
    if (x.rank() != 2) throw ShapeError("transpose2d expects 2-d input");
    const int N = x.dim(0), M = x.dim(1);
    Tensor out({M, N});
    for (int n = 0; n < N; ++n) {
        for (int m = 0; m < M; ++m) {
            out[static_cast<size_t>(m) * N + n] = x[static_cast<size_t>(n) * M + m];
        }
    }
    bool rg = requires_grad(xi);
    auto back = [xi, N, M, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        Tensor& gx = g.grad_buf(xi);
        for (int n = 0; n < N; ++n) {
            for (int m = 0; m < M; ++m) {
                gx[static_cast<size_t>(n) * M + m] += gy[static_cast<size_t>(m) * N + n];
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::rowwise_dot(ValueId ai, ValueId bi) {
    const Tensor& a = value(ai);
    const Tensor& b = value(bi);
    if (!a.same_shape(b) || a.rank() != 2) throw ShapeError("rowwise_dot shape mismatch");
    const int N = a.dim(0), D = a.dim(1);
    Tensor out({N});
    for (int n = 0; n < N; ++n) {
        const size_t row = static_cast<size_t>(n) * D;
        real acc = 0.0;
        for (int d = 0; d < D; ++d) acc += a[row + d] * b[row + d];
        out[static_cast<size_t>(n)] = acc;
    }
    bool rg = requires_grad(ai) || requires_grad(bi);
    auto back = [ai, bi, N, D, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& a = g.value(ai);
        const Tensor& b = g.value(bi);
        Tensor* ga = g.requires_grad(ai) ? &g.grad_buf(ai) : nullptr;
        Tensor* gb = g.requires_grad(bi) ? &g.grad_buf(bi) : nullptr;
        for (int n = 0; n < N; ++n) {
            const real gv = gy[static_cast<size_t>(n)];
            if (gv == 0.0) continue;
            const size_t row = static_cast<size_t>(n) * D;
            for (int d = 0; d < D; ++d) {
                if (ga) (*ga)[row + d] += gv * b[row + d];
                if (gb) (*gb)[row + d] += gv * a[row + d];
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::rowwise_l2(ValueId xi) {
    const Tensor& x = value(xi);
    if (x.rank() != 2) throw ShapeError("rowwise_l2 expects 2-d input");
    const int N = x.dim(0), D = x.dim(1);
    Tensor out({N});
    for (int n = 0; n < N; ++n) {
        const size_t row = static_cast<size_t>(n) * D;
        real s = 0.0;
        for (int d = 0; d < D; ++d) s += x[row + d] * x[row + d];
        out[static_cast<size_t>(n)] = std::sqrt(s);
    }
    bool rg = requires_grad(xi);
    auto back = [xi, N, D, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        const Tensor& x = g.value(xi);
        const Tensor& y = g.value(ValueId{out_id});
        Tensor& gx = g.grad_buf(xi);
        for (int n = 0; n < N; ++n) {
            const real nn = y[static_cast<size_t>(n)];
            if (nn <= kNormGuard) continue;  // subgradient 0 at the origin
            const real gv = gy[static_cast<size_t>(n)] / nn;
            const size_t row = static_cast<size_t>(n) * D;
            for (int d = 0; d < D; ++d) gx[row + d] += gv * x[row + d];
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::cross_entropy_rows(ValueId li, std::vector<int> targets) {
    const Tensor& logits = value(li);
    if (logits.rank() != 2) throw ShapeError("cross_entropy_rows expects 2-d logits");
    const int N = logits.dim(0), C = logits.dim(1);
    if (static_cast<int>(targets.size()) != N) throw ShapeError("targets size mismatch");
    real loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const size_t row = static_cast<size_t>(n) * C;
        real mx = logits[row];
        for (int c = 1; c < C; ++c) mx = std::max(mx, logits[row + c]);
        real lse = 0.0;
        for (int c = 0; c < C; ++c) lse += std::exp(logits[row + c] - mx);
        lse = mx + std::log(lse);
        loss += lse - logits[row + static_cast<size_t>(targets[static_cast<size_t>(n)])];
    }
    loss /= static_cast<real>(N);
    bool rg = requires_grad(li);
    auto back = [li, targets = std::move(targets), N, C,
                 out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(li)) return;
        const real gscale = gy[0] / static_cast<real>(N);
        const Tensor& logits = g.value(li);
        Tensor& gl = g.grad_buf(li);
        for (int n = 0; n < N; ++n) {
            const size_t row = static_cast<size_t>(n) * C;
            real mx = logits[row];
            for (int c = 1; c < C; ++c) mx = std::max(mx, logits[row + c]);
            real z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(logits[row + c] - mx);
            for (int c = 0; c < C; ++c) {
                real p = std::exp(logits[row + c] - mx) / z;
                if (c == targets[static_cast<size_t>(n)]) p -= 1.0;
                gl[row + c] += gscale * p;
            }
        }
    };
    return make(Tensor({1}, loss), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::channel_mean(ValueId xi) {
    const Tensor& x = value(xi);
    if (x.rank() != 4) throw ShapeError("channel_mean expects 4-d input");
    const int N = x.dim(0), C = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    const real inv = 1.0 / (static_cast<real>(N) * static_cast<real>(plane));
    Tensor out({C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            real s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += x[base + i];
            out[static_cast<size_t>(c)] += s * inv;
        }
    }
    bool rg = requires_grad(xi);
    auto back = [xi, N, C, plane, inv, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        Tensor& gx = g.grad_buf(xi);
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const size_t base = (static_cast<size_t>(n) * C + c) * plane;
                const real gv = gy[static_cast<size_t>(c)] * inv;
                for (size_t i = 0; i < plane; ++i) gx[base + i] += gv;
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::channel_var(ValueId xi) {
    const Tensor& x = value(xi);
    if (x.rank() != 4) throw ShapeError("channel_var expects 4-d input");
    const int N = x.dim(0), C = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    const real m = static_cast<real>(N) * static_cast<real>(plane);
    Tensor mu({C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            real s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += x[base + i];
            mu[static_cast<size_t>(c)] += s / m;
        }
    }
    Tensor out({C});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * plane;
            const real mc = mu[static_cast<size_t>(c)];
            real s = 0.0;
            for (size_t i = 0; i < plane; ++i) {
                const real d = x[base + i] - mc;
                s += d * d;
            }
            out[static_cast<size_t>(c)] += s / m;
        }
    }
    bool rg = requires_grad(xi);
    auto back = [xi, N, C, plane, m, mu = std::move(mu),
                 out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        const Tensor& x = g.value(xi);
        Tensor& gx = g.grad_buf(xi);
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const size_t base = (static_cast<size_t>(n) * C + c) * plane;
                const real gv = gy[static_cast<size_t>(c)] * 2.0 / m;
                const real mc = mu[static_cast<size_t>(c)];
                for (size_t i = 0; i < plane; ++i) gx[base + i] += gv * (x[base + i] - mc);
            }
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::vec_l2(ValueId xi) {
    const Tensor& x = value(xi);
    const real nn = x.l2_norm();
    bool rg = requires_grad(xi);
    auto back = [xi, nn, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi) || nn <= kNormGuard) return;
        const Tensor& x = g.value(xi);
        Tensor& gx = g.grad_buf(xi);
        const real gv = gy[0] / nn;
        for (size_t i = 0; i < x.size(); ++i) gx[i] += gv * x[i];
    };
    return make(Tensor({1}, nn), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::add(ValueId ai, ValueId bi) {
    const Tensor& a = value(ai);
    const Tensor& b = value(bi);
    if (!a.same_shape(b)) throw ShapeError("add shape mismatch");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    bool rg = requires_grad(ai) || requires_grad(bi);
    auto back = [ai, bi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        if (g.requires_grad(ai)) g.grad_buf(ai).add_scaled(gy, 1.0);
        if (g.requires_grad(bi)) g.grad_buf(bi).add_scaled(gy, 1.0);
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::sub(ValueId ai, ValueId bi) {
    const Tensor& a = value(ai);
    const Tensor& b = value(bi);
    if (!a.same_shape(b)) throw ShapeError("sub shape mismatch");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    bool rg = requires_grad(ai) || requires_grad(bi);
    auto back = [ai, bi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        if (g.requires_grad(ai)) g.grad_buf(ai).add_scaled(gy, 1.0);
        if (g.requires_grad(bi)) g.grad_buf(bi).add_scaled(gy, -1.0);
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::mul(ValueId ai, ValueId bi) {
    const Tensor& a = value(ai);
    const Tensor& b = value(bi);
    if (!a.same_shape(b)) throw ShapeError("mul shape mismatch");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    bool rg = requires_grad(ai) || requires_grad(bi);
    auto back = [ai, bi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty()) return;
        const Tensor& a = g.value(ai);
        const Tensor& b = g.value(bi);
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (size_t i = 0; i < a.size(); ++i) ga[i] += gy[i] * b[i];
        }
        if (g.requires_grad(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (size_t i = 0; i < a.size(); ++i) gb[i] += gy[i] * a[i];
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::scale(ValueId xi, real s) {
    const Tensor& x = value(xi);
    Tensor out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
    bool rg = requires_grad(xi);
    auto back = [xi, s, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        g.grad_buf(xi).add_scaled(gy, s);
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::mean_all(ValueId xi) {
    const Tensor& x = value(xi);
    real s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i];
    const real inv = 1.0 / static_cast<real>(x.size());
    bool rg = requires_grad(xi);
    auto back = [xi, inv, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        Tensor& gx = g.grad_buf(xi);
        const real gv = gy[0] * inv;
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
    };
    return make(Tensor({1}, s * inv), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::sum_all(ValueId xi) {
    const Tensor& x = value(xi);
    real s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i];
    bool rg = requires_grad(xi);
    auto back = [xi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        Tensor& gx = g.grad_buf(xi);
        const real gv = gy[0];
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
    };
    return make(Tensor({1}, s), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::clamp01(ValueId xi) { return clamp_scalar(xi, 0.0, 1.0); }

ValueId Graph::clamp_scalar(ValueId xi, real lo, real hi) {
    const Tensor& x = value(xi);
    Tensor out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
    bool rg = requires_grad(xi);
    auto back = [xi, lo, hi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        const Tensor& x = g.value(xi);
        Tensor& gx = g.grad_buf(xi);
        for (size_t i = 0; i < x.size(); ++i) {
            if (x[i] > lo && x[i] < hi) gx[i] += gy[i];
        }
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

ValueId Graph::reshape(ValueId xi, std::vector<int> shape) {
    Tensor out = value(xi).reshaped(shape);
    bool rg = requires_grad(xi);
    auto back = [xi, out_id = static_cast<int>(nodes_.size())](Graph& g) {
        const Tensor& gy = g.node(ValueId{out_id}).grad;
        if (gy.empty() || !g.requires_grad(xi)) return;
        Tensor& gx = g.grad_buf(xi);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    };
    return make(std::move(out), rg, rg ? std::function<void(Graph&)>(back) : nullptr);
}

void Graph::backward(ValueId loss) {
    Node& ln = node(loss);
    if (ln.val.size() != 1) throw ShapeError("backward requires a scalar loss");
    grad_buf(loss).fill(0.0);
    node(loss).grad[0] = 1.0;
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && n.requires_grad && !n.grad.empty()) n.back(*this);
    }
}

}  // namespace unlearn
