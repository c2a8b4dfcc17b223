#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sct/tensor.hpp"

namespace sct {

// Reverse-mode tape. Nodes are appended in forward order, so walking the
// node list backwards visits them in reverse topological order. Gradient
// storage exists only for nodes reachable from a trainable leaf.
//
// All reductions (sums, means, variances, L2 norms) accumulate in double
// and round once to float; the iteration order is the flat row-major
// order and never changes, so results are bitwise reproducible.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    int leaf(Tensor value, std::string name, bool trainable) {
        const int id = push(std::move(value), trainable, nullptr);
        nodes_[id].leaf_name = std::move(name);
        nodes_[id].trainable = trainable;
        return id;
    }

    int constant(Tensor value) { return push(std::move(value), false, nullptr); }

    const Tensor& val(int id) const { return nodes_[id].value; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }

    void accum_grad(int id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
        for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }

    const Tensor& grad(int id) const { return nodes_[id].grad; }

    // Runs the reverse sweep from a scalar loss and returns the gradient
    // for every trainable leaf, keyed by leaf name. Frozen leaves are
    // absent from the result.
    std::map<std::string, Tensor> grad_of(int loss_id) {
        if (!nodes_[loss_id].value.is_scalar())
            throw ValidationError("grad_of: loss must be a scalar, got shape " +
                                  shape_str(nodes_[loss_id].value.shape));
        accum_grad(loss_id, Tensor::scalar(1.0f));
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.backward && n.requires_grad && !n.grad.data.empty()) n.backward(*this, n.grad);
        }
        std::map<std::string, Tensor> out;
        for (const Node& n : nodes_)
            if (n.trainable && !n.leaf_name.empty())
                out.emplace(n.leaf_name, n.grad.data.empty() ? Tensor::zeros(n.value.shape) : n.grad);
        return out;
    }

    std::vector<std::string> trainable_leaves() const {
        std::vector<std::string> out;
        for (const Node& n : nodes_)
            if (n.trainable && !n.leaf_name.empty()) out.push_back(n.leaf_name);
        return out;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    // ---- primitive ops ------------------------------------------------

    // Batched matmul: [batch..,P,Q] x [batch..,Q,R] -> [batch..,P,R].
    // Batch axes must match exactly or be 1 (no rank promotion).
    int matmul(int a, int b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rank() < 2 || B.rank() < 2 || A.rank() != B.rank())
            throw ShapeError("matmul: ranks must match and be >= 2, got " + shape_str(A.shape) +
                             " x " + shape_str(B.shape));
        const std::size_t r = A.rank();
        const std::size_t P = A.shape[r - 2], Q = A.shape[r - 1];
        const std::size_t Qb = B.shape[r - 2], R = B.shape[r - 1];
        if (Q != Qb)
            throw ShapeError("matmul: inner extents differ, " + shape_str(A.shape) + " x " +
                             shape_str(B.shape));
        Shape batch(r - 2);
        for (std::size_t i = 0; i < r - 2; ++i) {
            const std::size_t ea = A.shape[i], eb = B.shape[i];
            if (ea != eb && ea != 1 && eb != 1)
                throw ShapeError("matmul: batch extents incompatible, " + shape_str(A.shape) +
                                 " x " + shape_str(B.shape));
            batch[i] = std::max(ea, eb);
        }
        Shape oshape = batch;
        oshape.push_back(P);
        oshape.push_back(R);
        Tensor C = Tensor::zeros(oshape);
        const std::size_t nb = numel(batch);
        std::vector<std::size_t> a_off(nb), b_off(nb);
        batch_offsets(batch, A.shape, B.shape, P * Q, Qb * R, a_off, b_off);
        for (std::size_t bi = 0; bi < nb; ++bi)
            gemm_nn(A.data.data() + a_off[bi], B.data.data() + b_off[bi],
                    C.data.data() + bi * P * R, P, Q, R);
        const bool rg = requires_grad(a) || requires_grad(b);
        const int out = push(std::move(C), rg, nullptr);
        if (rg) {
            nodes_[out].backward = [=, this](Tape& t, const Tensor& g) {
                const Tensor& Av = t.val(a);
                const Tensor& Bv = t.val(b);
                if (t.requires_grad(a)) {
                    Tensor dA = Tensor::zeros(Av.shape);
                    for (std::size_t bi = 0; bi < nb; ++bi)
                        gemm_nt(g.data.data() + bi * P * R, Bv.data.data() + b_off[bi],
                                dA.data.data() + a_off[bi], P, R, Q);
                    t.accum_grad(a, dA);
                }
                if (t.requires_grad(b)) {
                    Tensor dB = Tensor::zeros(Bv.shape);
                    for (std::size_t bi = 0; bi < nb; ++bi)
                        gemm_tn(Av.data.data() + a_off[bi], g.data.data() + bi * P * R,
                                dB.data.data() + b_off[bi], P, Q, R);
                    t.accum_grad(b, dB);
                }
            };
        }
        finite_check(out, "matmul");
        return out;
    }

    int add(int a, int b) { return elementwise_binary(a, b, "add", /*is_mul=*/false); }
    int mul(int a, int b) { return elementwise_binary(a, b, "mul", /*is_mul=*/true); }

    int scale_by_scalar(int a, float s) {
        const Tensor& A = val(a);
        Tensor C = A;
        for (float& v : C.data) v *= s;
        const int out = push(std::move(C), requires_grad(a), nullptr);
        if (requires_grad(a)) {
            nodes_[out].backward = [a, s](Tape& t, const Tensor& g) {
                Tensor dg = g;
                for (float& v : dg.data) v *= s;
                t.accum_grad(a, dg);
            };
        }
        finite_check(out, "scale_by_scalar");
        return out;
    }

    int reshape(int a, Shape shape) {
        const Tensor& A = val(a);
        if (numel(shape) != A.size())
            throw ShapeError("reshape: cannot view " + shape_str(A.shape) + " as " +
                             shape_str(shape));
        Tensor C(shape, A.data);
        const Shape old = A.shape;
        const int out = push(std::move(C), requires_grad(a), nullptr);
        if (requires_grad(a)) {
            nodes_[out].backward = [a, old](Tape& t, const Tensor& g) {
                t.accum_grad(a, Tensor(old, g.data));
            };
        }
        return out;
    }

    int transpose(int a, const std::vector<std::size_t>& perm) {
        const Tensor& A = val(a);
        if (perm.size() != A.rank()) throw ShapeError("transpose: permutation rank mismatch");
        Tensor C = permute_copy(A, perm);
        const int out = push(std::move(C), requires_grad(a), nullptr);
        if (requires_grad(a)) {
            std::vector<std::size_t> inv(perm.size());
            for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
            nodes_[out].backward = [a, inv](Tape& t, const Tensor& g) {
                t.accum_grad(a, permute_copy(g, inv));
            };
        }
        return out;
    }

    // Slice along the last axis.
    int slice_last(int a, std::size_t start, std::size_t len) {
        const Tensor& A = val(a);
        const std::size_t D = A.shape.back();
        if (start + len > D) throw ShapeError("slice_last: range exceeds extent");
        Shape oshape = A.shape;
        oshape.back() = len;
        Tensor C(oshape);
        const std::size_t rows = A.size() / D;
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(A.data.data() + r * D + start, len, C.data.data() + r * len);
        const int out = push(std::move(C), requires_grad(a), nullptr);
        if (requires_grad(a)) {
            const Shape ashape = A.shape;
            nodes_[out].backward = [=](Tape& t, const Tensor& g) {
                Tensor dA = Tensor::zeros(ashape);
                for (std::size_t r = 0; r < rows; ++r)
                    std::copy_n(g.data.data() + r * len, len, dA.data.data() + r * D + start);
                t.accum_grad(a, dA);
            };
        }
        return out;
    }

    int concat(int a, int b, std::size_t axis) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rank() != B.rank() || axis >= A.rank())
            throw ShapeError("concat: rank mismatch or bad axis");
        for (std::size_t i = 0; i < A.rank(); ++i)
            if (i != axis && A.shape[i] != B.shape[i])
                throw ShapeError("concat: shapes differ off-axis, " + shape_str(A.shape) + " vs " +
                                 shape_str(B.shape));
        Shape oshape = A.shape;
        oshape[axis] += B.shape[axis];
        Tensor C(oshape);
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= A.shape[i];
        for (std::size_t i = axis + 1; i < A.rank(); ++i) inner *= A.shape[i];
        const std::size_t wa = A.shape[axis] * inner, wb = B.shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(A.data.data() + o * wa, wa, C.data.data() + o * (wa + wb));
            std::copy_n(B.data.data() + o * wb, wb, C.data.data() + o * (wa + wb) + wa);
        }
        const bool rg = requires_grad(a) || requires_grad(b);
        const int out = push(std::move(C), rg, nullptr);
        if (rg) {
            const Shape sa = A.shape, sb = B.shape;
            nodes_[out].backward = [=](Tape& t, const Tensor& g) {
                if (t.requires_grad(a)) {
                    Tensor dA = Tensor::zeros(sa);
                    for (std::size_t o = 0; o < outer; ++o)
                        std::copy_n(g.data.data() + o * (wa + wb), wa, dA.data.data() + o * wa);
                    t.accum_grad(a, dA);
                }
                if (t.requires_grad(b)) {
                    Tensor dB = Tensor::zeros(sb);
                    for (std::size_t o = 0; o < outer; ++o)
                        std::copy_n(g.data.data() + o * (wa + wb) + wa, wb, dB.data.data() + o * wb);
                    t.accum_grad(b, dB);
                }
            };
        }
        return out;
    }

    // Expand extent-1 axes to the requested shape (same rank).
    int broadcast_to(int a, const Shape& shape) {
        const Tensor& A = val(a);
        if (A.rank() != shape.size()) throw ShapeError("broadcast_to: rank mismatch");
        for (std::size_t i = 0; i < shape.size(); ++i)
            if (A.shape[i] != shape[i] && A.shape[i] != 1)
                throw ShapeError("broadcast_to: cannot expand " + shape_str(A.shape) + " to " +
                                 shape_str(shape));
        Tensor C(shape);
        broadcast_copy(A, C);
        const int out = push(std::move(C), requires_grad(a), nullptr);
        if (requires_grad(a)) {
            const Shape sa = A.shape;
            nodes_[out].backward = [a, sa](Tape& t, const Tensor& g) {
                Tensor dA = Tensor::zeros(sa);
                reduce_to(g, dA);
                t.accum_grad(a, dA);
            };
        }
        return out;
    }

    // Layer norm over the last axis; gamma/beta are rank-1 [D].
    int layernorm(int x, int gamma, int beta, float eps) {
        const Tensor& X = val(x);
        const Tensor& G = val(gamma);
        const Tensor& Bt = val(beta);
        if (X.rank() < 1) throw ShapeError("layernorm: input must have rank >= 1");
        const std::size_t D = X.shape.back();
        if (G.shape != Shape{D} || Bt.shape != Shape{D})
            throw ShapeError("layernorm: affine params must be [D], D=" + std::to_string(D));
        if (!(eps > 0.0f)) throw ValidationError("layernorm: eps must be > 0");
        const std::size_t rows = X.size() / D;
        Tensor Y(X.shape);
        Tensor xhat(X.shape);
        std::vector<float> inv_std(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const float* xr = X.data.data() + r * D;
            double mean = 0.0;
            for (std::size_t i = 0; i < D; ++i) mean += xr[i];
            mean /= static_cast<double>(D);
            double var = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
                const double d = xr[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(D);
            const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
            inv_std[r] = static_cast<float>(is);
            for (std::size_t i = 0; i < D; ++i) {
                const float xh = static_cast<float>((xr[i] - mean) * is);
                xhat.data[r * D + i] = xh;
                Y.data[r * D + i] = xh * G.data[i] + Bt.data[i];
            }
        }
        const bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
        const int out = push(std::move(Y), rg, nullptr);
        if (rg) {
            nodes_[out].backward = [=, xh = std::move(xhat),
                                    is = std::move(inv_std)](Tape& t, const Tensor& g) {
                const Tensor& Gv = t.val(gamma);
                if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                    Tensor dG = Tensor::zeros({D}), dB = Tensor::zeros({D});
                    for (std::size_t i = 0; i < D; ++i) {
                        double sg = 0.0, sb = 0.0;
                        for (std::size_t r = 0; r < rows; ++r) {
                            sg += static_cast<double>(g.data[r * D + i]) * xh.data[r * D + i];
                            sb += g.data[r * D + i];
                        }
                        dG.data[i] = static_cast<float>(sg);
                        dB.data[i] = static_cast<float>(sb);
                    }
                    if (t.requires_grad(gamma)) t.accum_grad(gamma, dG);
                    if (t.requires_grad(beta)) t.accum_grad(beta, dB);
                }
                if (t.requires_grad(x)) {
                    Tensor dX(xh.shape);
                    for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t i = 0; i < D; ++i) {
                            const double dxh =
                                static_cast<double>(g.data[r * D + i]) * Gv.data[i];
                            m1 += dxh;
                            m2 += dxh * xh.data[r * D + i];
                        }
                        m1 /= static_cast<double>(D);
                        m2 /= static_cast<double>(D);
                        for (std::size_t i = 0; i < D; ++i) {
                            const double dxh =
                                static_cast<double>(g.data[r * D + i]) * Gv.data[i];
                            dX.data[r * D + i] = static_cast<float>(
                                is[r] * (dxh - m1 - static_cast<double>(xh.data[r * D + i]) * m2));
                        }
                    }
                    t.accum_grad(x, dX);
                }
            };
        }
        finite_check(out, "layernorm");
        return out;
    }

    // Softmax along the last axis.
    int softmax(int x) {
        const Tensor& X = val(x);
        const std::size_t D = X.shape.back();
        const std::size_t rows = X.size() / D;
        Tensor Y(X.shape);
        for (std::size_t r = 0; r < rows; ++r) {
            const float* xr = X.data.data() + r * D;
            float mx = xr[0];
            for (std::size_t i = 1; i < D; ++i) mx = std::max(mx, xr[i]);
            double sum = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
                const double e = std::exp(static_cast<double>(xr[i] - mx));
                Y.data[r * D + i] = static_cast<float>(e);
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t i = 0; i < D; ++i)
                Y.data[r * D + i] = static_cast<float>(Y.data[r * D + i] * inv);
        }
        const int out = push(std::move(Y), requires_grad(x), nullptr);
        if (requires_grad(x)) {
            nodes_[out].backward = [x, out, D, rows](Tape& t, const Tensor& g) {
                const Tensor& Yv = t.val(out);
                Tensor dX(Yv.shape);
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < D; ++i)
                        dot += static_cast<double>(g.data[r * D + i]) * Yv.data[r * D + i];
                    for (std::size_t i = 0; i < D; ++i)
                        dX.data[r * D + i] = static_cast<float>(
                            Yv.data[r * D + i] * (static_cast<double>(g.data[r * D + i]) - dot));
                }
                t.accum_grad(x, dX);
            };
        }
        finite_check(out, "softmax");
        return out;
    }

    // GELU, tanh approximation:
    //   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    int gelu(int x) {
        static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
        static constexpr double kA = 0.044715;
        const Tensor& X = val(x);
        Tensor Y(X.shape);
        for (std::size_t i = 0; i < X.size(); ++i) {
            const double v = X.data[i];
            Y.data[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
        }
        const int out = push(std::move(Y), requires_grad(x), nullptr);
        if (requires_grad(x)) {
            nodes_[out].backward = [x](Tape& t, const Tensor& g) {
                const Tensor& Xv = t.val(x);
                Tensor dX(Xv.shape);
                for (std::size_t i = 0; i < Xv.size(); ++i) {
                    const double v = Xv.data[i];
                    const double u = kC * (v + kA * v * v * v);
                    const double th = std::tanh(u);
                    const double du = kC * (1.0 + 3.0 * kA * v * v);
                    const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                    dX.data[i] = static_cast<float>(g.data[i] * d);
                }
                t.accum_grad(x, dX);
            };
        }
        finite_check(out, "gelu");
        return out;
    }

    // Gather channels along the last axis; idx must be sorted ascending,
    // unique, and < D.
    int gather_channels(int x, const std::vector<std::size_t>& idx) {
        const Tensor& X = val(x);
        const std::size_t D = X.shape.back();
        validate_channel_indices(idx, D, "gather_channels");
        Shape oshape = X.shape;
        oshape.back() = idx.size();
        const std::size_t K = idx.size();
        Tensor Y(oshape);
        const std::size_t rows = X.size() / D;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < K; ++k)
                Y.data[r * K + k] = X.data[r * D + idx[k]];
        const int out = push(std::move(Y), requires_grad(x), nullptr);
        if (requires_grad(x)) {
            const Shape xs = X.shape;
            nodes_[out].backward = [=](Tape& t, const Tensor& g) {
                Tensor dX = Tensor::zeros(xs);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t k = 0; k < K; ++k)
                        dX.data[r * D + idx[k]] += g.data[r * K + k];
                t.accum_grad(x, dX);
            };
        }
        return out;
    }

    // Write values into a copy of `base` at the given channel positions;
    // channels outside idx are bitwise those of base.
    int scatter_channels(int values, const std::vector<std::size_t>& idx, int base) {
        const Tensor& V = val(values);
        const Tensor& B = val(base);
        const std::size_t D = B.shape.back();
        validate_channel_indices(idx, D, "scatter_channels");
        const std::size_t K = idx.size();
        if (V.shape.back() != K || V.size() / K != B.size() / D)
            throw ShapeError("scatter_channels: values " + shape_str(V.shape) +
                             " incompatible with base " + shape_str(B.shape));
        Tensor Y = B;
        const std::size_t rows = B.size() / D;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < K; ++k)
                Y.data[r * D + idx[k]] = V.data[r * K + k];
        const bool rg = requires_grad(values) || requires_grad(base);
        const int out = push(std::move(Y), rg, nullptr);
        if (rg) {
            const Shape vs = V.shape, bs = B.shape;
            nodes_[out].backward = [=](Tape& t, const Tensor& g) {
                if (t.requires_grad(values)) {
                    Tensor dV = Tensor::zeros(vs);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t k = 0; k < K; ++k)
                            dV.data[r * K + k] = g.data[r * D + idx[k]];
                    t.accum_grad(values, dV);
                }
                if (t.requires_grad(base)) {
                    Tensor dB = g;
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t k = 0; k < K; ++k) dB.data[r * D + idx[k]] = 0.0f;
                    t.accum_grad(base, dB);
                }
            };
        }
        return out;
    }

    // Per-channel L2 norm over every other axis: [.., D] -> [D], entry i
    // = sqrt(sum over all leading axes of x[..., i]^2).
    int reduce_l2_over_all_but_channel(int x) {
        const Tensor& X = val(x);
        if (X.rank() < 1) throw ShapeError("reduce_l2: rank must be >= 1");
        const std::size_t D = X.shape.back();
        const std::size_t rows = X.size() / D;
        std::vector<double> acc(D, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < D; ++i) {
                const double v = X.data[r * D + i];
                acc[i] += v * v;
            }
        Tensor Y({D});
        for (std::size_t i = 0; i < D; ++i) Y.data[i] = static_cast<float>(std::sqrt(acc[i]));
        const int out = push(std::move(Y), requires_grad(x), nullptr);
        if (requires_grad(x)) {
            nodes_[out].backward = [x, out, D, rows](Tape& t, const Tensor& g) {
                const Tensor& Xv = t.val(x);
                const Tensor& Yv = t.val(out);
                Tensor dX = Tensor::zeros(Xv.shape);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < D; ++i)
                        if (Yv.data[i] > 0.0f)
                            dX.data[r * D + i] = g.data[i] * Xv.data[r * D + i] / Yv.data[i];
                t.accum_grad(x, dX);
            };
        }
        finite_check(out, "reduce_l2_over_all_but_channel");
        return out;
    }

    int sum_all(int x) {
        const Tensor& X = val(x);
        double s = 0.0;
        for (float v : X.data) s += v;
        const int out = push(Tensor::scalar(static_cast<float>(s)), requires_grad(x), nullptr);
        if (requires_grad(x)) {
            const Shape xs = X.shape;
            nodes_[out].backward = [x, xs](Tape& t, const Tensor& g) {
                t.accum_grad(x, Tensor::full(xs, g.data[0]));
            };
        }
        finite_check(out, "sum_all");
        return out;
    }

    // Mean cross-entropy over the batch from raw logits [B,M].
    int cross_entropy_mean(int logits, const std::vector<std::uint32_t>& labels) {
        const Tensor& X = val(logits);
        if (X.rank() != 2) throw ShapeError("cross_entropy: logits must be [B,M]");
        const std::size_t Bn = X.shape[0], M = X.shape[1];
        if (labels.size() != Bn) throw ShapeError("cross_entropy: label count mismatch");
        for (std::uint32_t l : labels)
            if (l >= M) throw IndexError("cross_entropy: label " + std::to_string(l) +
                                         " out of range for " + std::to_string(M) + " classes");
        double loss = 0.0;
        for (std::size_t r = 0; r < Bn; ++r) {
            const float* xr = X.data.data() + r * M;
            float mx = xr[0];
            for (std::size_t i = 1; i < M; ++i) mx = std::max(mx, xr[i]);
            double sum = 0.0;
            for (std::size_t i = 0; i < M; ++i) sum += std::exp(static_cast<double>(xr[i] - mx));
            loss += std::log(sum) + mx - xr[labels[r]];
        }
        loss /= static_cast<double>(Bn);
        const int out = push(Tensor::scalar(static_cast<float>(loss)), requires_grad(logits), nullptr);
        if (requires_grad(logits)) {
            nodes_[out].backward = [logits, labels, Bn, M](Tape& t, const Tensor& g) {
                const Tensor& Xv = t.val(logits);
                Tensor dX(Xv.shape);
                const double gs = g.data[0] / static_cast<double>(Bn);
                for (std::size_t r = 0; r < Bn; ++r) {
                    const float* xr = Xv.data.data() + r * M;
                    float mx = xr[0];
                    for (std::size_t i = 1; i < M; ++i) mx = std::max(mx, xr[i]);
                    double sum = 0.0;
                    for (std::size_t i = 0; i < M; ++i)
                        sum += std::exp(static_cast<double>(xr[i] - mx));
                    for (std::size_t i = 0; i < M; ++i) {
                        double p = std::exp(static_cast<double>(xr[i] - mx)) / sum;
                        if (i == labels[r]) p -= 1.0;
                        dX.data[r * M + i] = static_cast<float>(p * gs);
                    }
                }
                t.accum_grad(logits, dX);
            };
        }
        finite_check(out, "cross_entropy");
        return out;
    }

    // Unfold [B,C,H,W] into patch rows [B, (H/p)*(W/p), C*p*p]; patch
    // elements ordered (c, py, px) row-major. Input must be a constant.
    int extract_patches(int images, std::size_t p) {
        const Tensor& X = val(images);
        if (X.rank() != 4) throw ShapeError("extract_patches: images must be [B,C,H,W]");
        if (requires_grad(images))
            throw ValidationError("extract_patches: image input cannot require gradients");
        const std::size_t B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
        if (H % p != 0 || W % p != 0)
            throw ShapeError("extract_patches: image extent not divisible by patch size");
        const std::size_t gh = H / p, gw = W / p, np = gh * gw, pd = C * p * p;
        Tensor Y({B, np, pd});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t py = 0; py < gh; ++py)
                for (std::size_t px = 0; px < gw; ++px) {
                    float* dst = Y.data.data() + ((b * np) + py * gw + px) * pd;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t y = 0; y < p; ++y)
                            for (std::size_t x0 = 0; x0 < p; ++x0)
                                *dst++ = X.data[((b * C + c) * H + py * p + y) * W + px * p + x0];
                }
        return push(std::move(Y), false, nullptr);
    }

    // ---- static helpers shared with non-tape code ----------------------

    static void gemm_nn(const float* A, const float* B, float* C, std::size_t P, std::size_t Q,
                        std::size_t R) {
        for (std::size_t i = 0; i < P; ++i) {
            float* cr = C + i * R;
            for (std::size_t k = 0; k < Q; ++k) {
                const float aik = A[i * Q + k];
                const float* br = B + k * R;
                for (std::size_t j = 0; j < R; ++j) cr[j] += aik * br[j];
            }
        }
    }

    // C(P,Q) += A(P,R) * B(Q,R)^T
    static void gemm_nt(const float* A, const float* B, float* C, std::size_t P, std::size_t R,
                        std::size_t Q) {
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t k = 0; k < Q; ++k) {
                const float* ar = A + i * R;
                const float* br = B + k * R;
                float s = 0.0f;
                for (std::size_t j = 0; j < R; ++j) s += ar[j] * br[j];
                C[i * Q + k] += s;
            }
    }

    // C(Q,R) += A(P,Q)^T * B(P,R)
    static void gemm_tn(const float* A, const float* B, float* C, std::size_t P, std::size_t Q,
                        std::size_t R) {
        for (std::size_t i = 0; i < P; ++i) {
            const float* br = B + i * R;
            for (std::size_t k = 0; k < Q; ++k) {
                const float aik = A[i * Q + k];
                float* cr = C + k * R;
                for (std::size_t j = 0; j < R; ++j) cr[j] += aik * br[j];
            }
        }
    }

    static void validate_channel_indices(const std::vector<std::size_t>& idx, std::size_t D,
                                         const char* op) {
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (idx[k] >= D)
                throw IndexError(std::string(op) + ": channel index " + std::to_string(idx[k]) +
                                 " out of range for D=" + std::to_string(D));
            if (k > 0 && idx[k] <= idx[k - 1])
                throw IndexError(std::string(op) + ": indices must be sorted ascending and unique");
        }
    }

    static Tensor permute_copy(const Tensor& X, const std::vector<std::size_t>& perm) {
        Shape oshape(X.rank());
        for (std::size_t i = 0; i < perm.size(); ++i) oshape[i] = X.shape[perm[i]];
        Tensor Y(oshape);
        const auto xst = row_major_strides(X.shape);
        std::vector<std::size_t> pst(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) pst[i] = xst[perm[i]];
        std::vector<std::size_t> ctr(oshape.size(), 0);
        std::size_t src = 0;
        for (std::size_t o = 0; o < Y.size(); ++o) {
            Y.data[o] = X.data[src];
            for (std::size_t ax = oshape.size(); ax-- > 0;) {
                src += pst[ax];
                if (++ctr[ax] < oshape[ax]) break;
                src -= pst[ax] * oshape[ax];
                ctr[ax] = 0;
            }
        }
        return Y;
    }

  private:
    // Element offsets of each broadcast batch element into A and B, whose
    // batch axes may have extent 1 where `batch` does not.
    static void batch_offsets(const Shape& batch, const Shape& a_shape, const Shape& b_shape,
                              std::size_t a_mat, std::size_t b_mat,
                              std::vector<std::size_t>& a_off, std::vector<std::size_t>& b_off) {
        const std::size_t axes = batch.size();
        std::vector<std::size_t> as(axes), bs(axes);
        std::size_t acc_a = a_mat, acc_b = b_mat;
        for (std::size_t i = axes; i-- > 0;) {
            as[i] = (a_shape[i] == 1 && batch[i] != 1) ? 0 : acc_a;
            bs[i] = (b_shape[i] == 1 && batch[i] != 1) ? 0 : acc_b;
            acc_a *= a_shape[i];
            acc_b *= b_shape[i];
        }
        std::vector<std::size_t> ctr(axes, 0);
        std::size_t ao = 0, bo = 0;
        for (std::size_t o = 0; o < a_off.size(); ++o) {
            a_off[o] = ao;
            b_off[o] = bo;
            for (std::size_t ax = axes; ax-- > 0;) {
                ao += as[ax];
                bo += bs[ax];
                if (++ctr[ax] < batch[ax]) break;
                ao -= as[ax] * batch[ax];
                bo -= bs[ax] * batch[ax];
                ctr[ax] = 0;
            }
        }
    }

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool trainable = false;
        std::string leaf_name;
        BackwardFn backward;
    };

    int push(Tensor value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}, std::move(backward)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void finite_check(int id, const char* op) {
        if (check_finite_) require_finite(nodes_[id].value, op);
    }

    int elementwise_binary(int a, int b, const char* name, bool is_mul) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rank() != B.rank())
            throw ShapeError(std::string(name) + ": rank mismatch " + shape_str(A.shape) + " vs " +
                             shape_str(B.shape) + " (no implicit rank promotion)");
        Shape oshape(A.rank());
        for (std::size_t i = 0; i < A.rank(); ++i) {
            if (A.shape[i] != B.shape[i] && A.shape[i] != 1 && B.shape[i] != 1)
                throw ShapeError(std::string(name) + ": incompatible extents " +
                                 shape_str(A.shape) + " vs " + shape_str(B.shape));
            oshape[i] = std::max(A.shape[i], B.shape[i]);
        }
        Tensor C(oshape);
        if (A.shape == B.shape) {
            if (is_mul)
                for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] * B.data[i];
            else
                for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] + B.data[i];
        } else {
            Tensor Ab(oshape), Bb(oshape);
            broadcast_copy(A, Ab);
            broadcast_copy(B, Bb);
            if (is_mul)
                for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = Ab.data[i] * Bb.data[i];
            else
                for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = Ab.data[i] + Bb.data[i];
        }
        const bool rg = requires_grad(a) || requires_grad(b);
        const int out = push(std::move(C), rg, nullptr);
        if (rg) {
            nodes_[out].backward = [=](Tape& t, const Tensor& g) {
                auto backprop = [&](int target, int other) {
                    Tensor gg = g;
                    if (is_mul) {
                        const Tensor& O = t.val(other);
                        if (O.shape == gg.shape) {
                            for (std::size_t i = 0; i < gg.size(); ++i) gg.data[i] *= O.data[i];
                        } else {
                            Tensor Ob(gg.shape);
                            broadcast_copy(O, Ob);
                            for (std::size_t i = 0; i < gg.size(); ++i) gg.data[i] *= Ob.data[i];
                        }
                    }
                    const Tensor& Tv = t.val(target);
                    if (Tv.shape == gg.shape) {
                        t.accum_grad(target, gg);
                    } else {
                        Tensor red = Tensor::zeros(Tv.shape);
                        reduce_to(gg, red);
                        t.accum_grad(target, red);
                    }
                };
                if (t.requires_grad(a)) backprop(a, b);
                if (t.requires_grad(b)) backprop(b, a);
            };
        }
        finite_check(out, name);
        return out;
    }

    // Copy src into dst, repeating along extent-1 axes of src.
    static void broadcast_copy(const Tensor& src, Tensor& dst) {
        const auto sst_full = row_major_strides(src.shape);
        std::vector<std::size_t> sst(src.rank());
        for (std::size_t i = 0; i < src.rank(); ++i)
            sst[i] = (src.shape[i] == 1 && dst.shape[i] != 1) ? 0 : sst_full[i];
        std::vector<std::size_t> ctr(dst.rank(), 0);
        std::size_t s = 0;
        for (std::size_t o = 0; o < dst.size(); ++o) {
            dst.data[o] = src.data[s];
            for (std::size_t ax = dst.rank(); ax-- > 0;) {
                s += sst[ax];
                if (++ctr[ax] < dst.shape[ax]) break;
                s -= sst[ax] * dst.shape[ax];
                ctr[ax] = 0;
            }
        }
    }

    // Sum src into dst over the axes where dst has extent 1.
    static void reduce_to(const Tensor& src, Tensor& dst) {
        const auto dst_full = row_major_strides(dst.shape);
        std::vector<std::size_t> dstr(dst.rank());
        for (std::size_t i = 0; i < dst.rank(); ++i)
            dstr[i] = (dst.shape[i] == 1 && src.shape[i] != 1) ? 0 : dst_full[i];
        std::vector<std::size_t> ctr(src.rank(), 0);
        std::size_t d = 0;
        for (std::size_t o = 0; o < src.size(); ++o) {
            dst.data[d] += src.data[o];
            for (std::size_t ax = src.rank(); ax-- > 0;) {
                d += dstr[ax];
                if (++ctr[ax] < src.shape[ax]) break;
                d -= dstr[ax] * src.shape[ax];
                ctr[ax] = 0;
            }
        }
    }

    bool check_finite_;
    // deque: references returned by val() stay valid as ops push new nodes
    std::deque<Node> nodes_;
};

// x:[...,Q] times W:[Q,R] plus optional bias b:[R]; flattens leading axes
// so rank-2 matmul does the work.
inline int linear(Tape& t, int x, int W, int b = -1) {
    const Shape xs = t.val(x).shape;
    const std::size_t Q = xs.back();
    const std::size_t rows = numel(xs) / Q;
    const std::size_t R = t.val(W).shape.back();
    int y = t.matmul(t.reshape(x, {rows, Q}), W);
    if (b >= 0) y = t.add(y, t.reshape(b, {1, R}));
    Shape os = xs;
    os.back() = R;
    return t.reshape(y, os);
}

} // namespace sct
