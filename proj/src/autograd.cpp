#include "musteer/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace musteer::ag {

namespace {

Var make_node(Mat value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->parents = std::move(parents);
    bool any = false;
    for (const auto& p : n->parents) any = any || p->requires_grad;
    n->requires_grad = any;
    if (any) n->backprop = std::move(backprop);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->rows() != b->rows() || a->cols() != b->cols()) {
        throw UsageError(concat(op, ": shape mismatch [", a->rows(), "x", a->cols(), "] vs [",
                                b->rows(), "x", b->cols(), "]"));
    }
}

}  // namespace

Var constant(Mat value) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->requires_grad = false;
    return n;
}

Var leaf(Mat value) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->requires_grad = true;
    n->grad = Mat::Zero(n->val.rows(), n->val.cols());
    return n;
}

void backward(const Var& root) {
    if (root->rows() != 1 || root->cols() != 1) {
        throw UsageError("backward: root must be a 1x1 scalar");
    }
    // Iterative post-order DFS; order is structural, hence deterministic.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Node* child = node->parents[next_child].get();
            ++next_child;
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->ensure_grad();
    root->grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

void zero_grad(const std::vector<Var>& vars) {
    for (const auto& v : vars) v->grad.setZero(v->val.rows(), v->val.cols());
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    return make_node(a->val + b->val, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) { n.parents[0]->ensure_grad(); n.parents[0]->grad += n.grad; }
        if (n.parents[1]->requires_grad) { n.parents[1]->ensure_grad(); n.parents[1]->grad += n.grad; }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    return make_node(a->val - b->val, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) { n.parents[0]->ensure_grad(); n.parents[0]->grad += n.grad; }
        if (n.parents[1]->requires_grad) { n.parents[1]->ensure_grad(); n.parents[1]->grad -= n.grad; }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    return make_node(a->val.cwiseProduct(b->val), {a, b}, [](Node& n) {
        auto& a_ = *n.parents[0];
        auto& b_ = *n.parents[1];
        if (a_.requires_grad) { a_.ensure_grad(); a_.grad += n.grad.cwiseProduct(b_.val); }
        if (b_.requires_grad) { b_.ensure_grad(); b_.grad += n.grad.cwiseProduct(a_.val); }
    });
}

Var scale(const Var& a, double s) {
    return make_node(a->val * s, {a}, [s](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * s;
    });
}

Var add_const(const Var& a, const Mat& m) {
    if (a->rows() != m.rows() || a->cols() != m.cols()) {
        throw UsageError("add_const: shape mismatch");
    }
    return make_node(a->val + m, {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad;
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a->cols() != b->rows()) {
        throw UsageError(concat("matmul: inner dims ", a->cols(), " vs ", b->rows()));
    }
    return make_node(a->val * b->val, {a, b}, [](Node& n) {
        auto& a_ = *n.parents[0];
        auto& b_ = *n.parents[1];
        if (a_.requires_grad) { a_.ensure_grad(); a_.grad.noalias() += n.grad * b_.val.transpose(); }
        if (b_.requires_grad) { b_.ensure_grad(); b_.grad.noalias() += a_.val.transpose() * n.grad; }
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->cols() != b->cols()) {
        throw UsageError(concat("matmul_nt: inner dims ", a->cols(), " vs ", b->cols()));
    }
    return make_node(a->val * b->val.transpose(), {a, b}, [](Node& n) {
        auto& a_ = *n.parents[0];
        auto& b_ = *n.parents[1];
        if (a_.requires_grad) { a_.ensure_grad(); a_.grad.noalias() += n.grad * b_.val; }
        if (b_.requires_grad) { b_.ensure_grad(); b_.grad.noalias() += n.grad.transpose() * a_.val; }
    });
}

Var add_rowvec(const Var& a, const Var& bias) {
    if (bias->rows() != 1 || bias->cols() != a->cols()) {
        throw UsageError("add_rowvec: bias must be 1 x cols(a)");
    }
    return make_node(a->val.rowwise() + bias->val.row(0), {a, bias}, [](Node& n) {
        auto& a_ = *n.parents[0];
        auto& b_ = *n.parents[1];
        if (a_.requires_grad) { a_.ensure_grad(); a_.grad += n.grad; }
        if (b_.requires_grad) { b_.ensure_grad(); b_.grad.row(0) += n.grad.colwise().sum(); }
    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a->rows()) {
        throw UsageError("slice_rows: range out of bounds");
    }
    return make_node(a->val.middleRows(start, count), {a}, [start, count](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.middleRows(start, count) += n.grad;
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a->cols()) {
        throw UsageError("slice_cols: range out of bounds");
    }
    return make_node(a->val.middleCols(start, count), {a}, [start, count](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.middleCols(start, count) += n.grad;
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw UsageError("concat_rows: no parts");
    Eigen::Index rows = 0;
    Eigen::Index cols = parts[0]->cols();
    for (const auto& p : parts) {
        if (p->cols() != cols) throw UsageError("concat_rows: column mismatch");
        rows += p->rows();
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p->rows()) = p->val;
        at += p->rows();
    }
    return make_node(std::move(out), parts, [](Node& n) {
        Eigen::Index pos = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad += n.grad.middleRows(pos, p->rows());
            }
            pos += p->rows();
        }
    });
}

Var pad_rows_edge(const Var& a, Eigen::Index total_rows) {
    if (total_rows < a->rows()) throw UsageError("pad_rows_edge: cannot shrink");
    if (a->rows() == 0) throw UsageError("pad_rows_edge: empty input");
    Mat out(total_rows, a->cols());
    out.topRows(a->rows()) = a->val;
    for (Eigen::Index r = a->rows(); r < total_rows; ++r) out.row(r) = a->val.row(a->rows() - 1);
    const Eigen::Index in_rows = a->rows();
    return make_node(std::move(out), {a}, [in_rows](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad += n.grad.topRows(in_rows);
        for (Eigen::Index r = in_rows; r < n.rows(); ++r) p.grad.row(in_rows - 1) += n.grad.row(r);
    });
}

Var repeat_interleave_rows(const Var& a, int times) {
    if (times < 1) throw UsageError("repeat_interleave_rows: times must be >= 1");
    Mat out(a->rows() * times, a->cols());
    for (Eigen::Index r = 0; r < a->rows(); ++r) {
        for (int t = 0; t < times; ++t) out.row(r * times + t) = a->val.row(r);
    }
    return make_node(std::move(out), {a}, [times](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (Eigen::Index r = 0; r < p.val.rows(); ++r) {
            for (int t = 0; t < times; ++t) p.grad.row(r) += n.grad.row(r * times + t);
        }
    });
}

Var detach(const Var& a) { return constant(a->val); }

Var tanh_op(const Var& a) {
    return make_node(a->val.array().tanh().matrix(), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad.array() += n.grad.array() * (1.0 - n.val.array().square());
    });
}

Var sigmoid(const Var& a) {
    Mat out = (1.0 / (1.0 + (-a->val.array()).exp())).matrix();
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad.array() += n.grad.array() * n.val.array() * (1.0 - n.val.array());
    });
}

Var relu(const Var& a) {
    return make_node(a->val.cwiseMax(0.0), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad.array() += n.grad.array() * (p.val.array() > 0.0).cast<double>();
    });
}

Var gelu(const Var& a) {
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    Mat phi = (0.5 * (1.0 + (a->val.array() * inv_sqrt2).erf())).matrix();
    Mat out = a->val.cwiseProduct(phi);
    return make_node(std::move(out), {a}, [phi](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Eigen::ArrayXXd pdf = (-0.5 * p.val.array().square()).exp() * inv_sqrt_2pi;
        p.grad.array() += n.grad.array() * (phi.array() + p.val.array() * pdf);
    });
}

Var softmax_rows(const Var& a) {
    Mat out(a->rows(), a->cols());
    for (Eigen::Index r = 0; r < a->rows(); ++r) {
        Eigen::ArrayXd row = a->val.row(r).array();
        row -= row.maxCoeff();
        Eigen::ArrayXd e = row.exp();
        out.row(r) = (e / e.sum()).matrix();
    }
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (Eigen::Index r = 0; r < n.val.rows(); ++r) {
            Eigen::ArrayXd y = n.val.row(r).array();
            Eigen::ArrayXd g = n.grad.row(r).array();
            double dot = (y * g).sum();
            p.grad.row(r).array() += y * (g - dot);
        }
    });
}

Var normalize_rows(const Var& a, double min_norm) {
    Mat out(a->rows(), a->cols());
    std::vector<double> norms(a->rows());
    for (Eigen::Index r = 0; r < a->rows(); ++r) {
        double nr = a->val.row(r).norm();
        if (nr < min_norm) {
            throw NumericalError(concat("normalize_rows: row ", r, " has norm ", nr,
                                        " below minimum ", min_norm));
        }
        norms[r] = nr;
        out.row(r) = a->val.row(r) / nr;
    }
    return make_node(std::move(out), {a}, [norms](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (Eigen::Index r = 0; r < n.val.rows(); ++r) {
            // d(x/|x|) = (g - y (y.g)) / |x|
            double dot = n.val.row(r).dot(n.grad.row(r));
            p.grad.row(r) += (n.grad.row(r) - n.val.row(r) * dot) / norms[r];
        }
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    if (gain->rows() != 1 || bias->rows() != 1 || gain->cols() != x->cols() ||
        bias->cols() != x->cols()) {
        throw UsageError("layer_norm: gain/bias must be 1 x cols(x)");
    }
    const Eigen::Index R = x->rows(), C = x->cols();
    Mat normalized(R, C);
    std::vector<double> inv_std(R);
    for (Eigen::Index r = 0; r < R; ++r) {
        double mean = x->val.row(r).mean();
        double var = (x->val.row(r).array() - mean).square().mean();
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        normalized.row(r) = ((x->val.row(r).array() - mean) * inv_std[r]).matrix();
    }
    Mat out = (normalized.array().rowwise() * gain->val.row(0).array()).matrix();
    out.rowwise() += bias->val.row(0);
    return make_node(std::move(out), {x, gain, bias},
                     [normalized, inv_std](Node& n) {
        auto& x_ = *n.parents[0];
        auto& g_ = *n.parents[1];
        auto& b_ = *n.parents[2];
        const Eigen::Index R = n.val.rows(), C = n.val.cols();
        if (g_.requires_grad) {
            g_.ensure_grad();
            g_.grad.row(0) += (n.grad.array() * normalized.array()).colwise().sum().matrix();
        }
        if (b_.requires_grad) {
            b_.ensure_grad();
            b_.grad.row(0) += n.grad.colwise().sum();
        }
        if (x_.requires_grad) {
            x_.ensure_grad();
            for (Eigen::Index r = 0; r < R; ++r) {
                Eigen::ArrayXd dy = n.grad.row(r).array() * g_.val.row(0).array();
                Eigen::ArrayXd y = normalized.row(r).array();
                double mean_dy = dy.mean();
                double mean_dyy = (dy * y).mean();
                x_.grad.row(r).array() +=
                    inv_std[r] * (dy - mean_dy - y * mean_dyy) * (C > 0 ? 1.0 : 0.0);
            }
        }
    });
}

Var sum_all(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->val.sum();
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad.array() += n.grad(0, 0);
    });
}

Var mean_all(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->val.size());
    Mat out(1, 1);
    out(0, 0) = a->val.sum() * inv;
    return make_node(std::move(out), {a}, [inv](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad.array() += n.grad(0, 0) * inv;
    });
}

Var sum_sq(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->val.squaredNorm();
    return make_node(std::move(out), {a}, [](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        p.grad += 2.0 * n.grad(0, 0) * p.val;
    });
}

Var l1_diff_sum(const Var& a, const Mat& target) {
    if (a->rows() != target.rows() || a->cols() != target.cols()) {
        throw UsageError("l1_diff_sum: shape mismatch");
    }
    Mat diff = a->val - target;
    Mat out(1, 1);
    out(0, 0) = diff.array().abs().sum();
    return make_node(std::move(out), {a}, [diff](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        // subgradient: sign(diff), with sign(0) = 0
        p.grad.array() += n.grad(0, 0) * diff.array().sign();
    });
}

Var embedding_lookup(const Var& table, const std::vector<int>& ids) {
    Mat out(static_cast<Eigen::Index>(ids.size()), table->cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table->rows()) {
            throw UsageError(concat("embedding_lookup: id ", ids[i], " outside table of ",
                                    table->rows(), " rows"));
        }
        out.row(static_cast<Eigen::Index>(i)) = table->val.row(ids[i]);
    }
    return make_node(std::move(out), {table}, [ids](Node& n) {
        auto& t = *n.parents[0];
        t.ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            t.grad.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        }
    });
}

Var masked_nll(const Var& logits, const std::vector<int>& targets,
               const std::vector<unsigned char>& supervised) {
    const Eigen::Index R = logits->rows(), C = logits->cols();
    if (static_cast<Eigen::Index>(targets.size()) != R ||
        static_cast<Eigen::Index>(supervised.size()) != R) {
        throw UsageError("masked_nll: targets/supervised must have one entry per row");
    }
    Eigen::Index n_sup = 0;
    for (auto s : supervised) n_sup += (s != 0);
    if (n_sup == 0) throw UsageError("masked_nll: no supervised positions");

    Mat probs(R, C);
    double total = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
        if (!supervised[r]) continue;
        if (targets[r] < 0 || targets[r] >= C) {
            throw UsageError(concat("masked_nll: target ", targets[r], " outside [0,", C, ")"));
        }
        Eigen::ArrayXd row = logits->val.row(r).array();
        double mx = row.maxCoeff();
        Eigen::ArrayXd e = (row - mx).exp();
        double z = e.sum();
        probs.row(r) = (e / z).matrix();
        total += -(row(targets[r]) - mx - std::log(z));
    }
    Mat out(1, 1);
    out(0, 0) = total / static_cast<double>(n_sup);
    return make_node(std::move(out), {logits},
                     [probs, targets, supervised, n_sup](Node& n) {
        auto& lg = *n.parents[0];
        lg.ensure_grad();
        const double w = n.grad(0, 0) / static_cast<double>(n_sup);
        for (Eigen::Index r = 0; r < lg.val.rows(); ++r) {
            if (!supervised[r]) continue;
            lg.grad.row(r) += w * probs.row(r);
            lg.grad(r, targets[r]) -= w;
        }
    });
}

Var attention(const Var& q, const Var& k, const Var& v, int batch, int seq_len,
              int heads, const std::vector<const Mat*>& masks) {
    const Eigen::Index d_model = q->cols();
    if (q->rows() != static_cast<Eigen::Index>(batch) * seq_len || q->rows() != k->rows() ||
        q->rows() != v->rows() || k->cols() != d_model || v->cols() != d_model) {
        throw UsageError("attention: inconsistent packed shapes");
    }
    if (d_model % heads != 0) throw UsageError("attention: heads must divide model dim");
    if (!masks.empty() && static_cast<int>(masks.size()) != batch) {
        throw UsageError("attention: one mask slot per sample required");
    }
    const Eigen::Index dh = d_model / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // Attention weights are kept for the backward pass.
    auto weights = std::make_shared<std::vector<Mat>>();
    weights->reserve(static_cast<std::size_t>(batch) * heads);
    Mat out = Mat::Zero(q->rows(), d_model);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
        const Mat* mask = masks.empty() ? nullptr : masks[b];
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
            Mat scores = sc * q->val.block(r0, c0, seq_len, dh) *
                         k->val.block(r0, c0, seq_len, dh).transpose();
            if (mask) scores += *mask;
            for (Eigen::Index r = 0; r < seq_len; ++r) {
                Eigen::ArrayXd row = scores.row(r).array();
                row -= row.maxCoeff();
                Eigen::ArrayXd e = row.exp();
                scores.row(r) = (e / e.sum()).matrix();
            }
            out.block(r0, c0, seq_len, dh).noalias() =
                scores * v->val.block(r0, c0, seq_len, dh);
            weights->push_back(std::move(scores));
        }
    }
    return make_node(std::move(out), {q, k, v},
                     [batch, seq_len, heads, dh, sc, weights](Node& n) {
        auto& q_ = *n.parents[0];
        auto& k_ = *n.parents[1];
        auto& v_ = *n.parents[2];
        q_.ensure_grad();
        k_.ensure_grad();
        v_.ensure_grad();
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq_len;
            for (int h = 0; h < heads; ++h) {
                const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                const Mat& P = (*weights)[static_cast<std::size_t>(b) * heads + h];
                Mat dO = n.grad.block(r0, c0, seq_len, dh);
                v_.grad.block(r0, c0, seq_len, dh).noalias() += P.transpose() * dO;
                Mat dP = dO * v_.val.block(r0, c0, seq_len, dh).transpose();
                Mat dS(seq_len, seq_len);
                for (Eigen::Index r = 0; r < seq_len; ++r) {
                    double dot = P.row(r).dot(dP.row(r));
                    dS.row(r) = P.row(r).cwiseProduct(dP.row(r) - Mat::Constant(1, seq_len, dot));
                }
                q_.grad.block(r0, c0, seq_len, dh).noalias() +=
                    sc * dS * k_.val.block(r0, c0, seq_len, dh);
                k_.grad.block(r0, c0, seq_len, dh).noalias() +=
                    sc * dS.transpose() * q_.val.block(r0, c0, seq_len, dh);
            }
        }
    });
}

Eigen::Index conv1d_out_rows(Eigen::Index in_rows, int kernel, int stride, int pad) {
    return (in_rows + 2 * static_cast<Eigen::Index>(pad) - kernel) / stride + 1;
}

Var im2col_1d(const Var& x, int kernel, int stride, int pad) {
    if (kernel < 1 || stride < 1 || pad < 0) throw UsageError("im2col_1d: bad geometry");
    const Eigen::Index N = x->rows(), C = x->cols();
    const Eigen::Index n_out = conv1d_out_rows(N, kernel, stride, pad);
    if (n_out < 1) throw UsageError("im2col_1d: input too short for kernel");
    Mat out = Mat::Zero(n_out, static_cast<Eigen::Index>(kernel) * C);
    for (Eigen::Index t = 0; t < n_out; ++t) {
        for (int kk = 0; kk < kernel; ++kk) {
            Eigen::Index src = t * stride - pad + kk;
            if (src < 0 || src >= N) continue;
            out.block(t, static_cast<Eigen::Index>(kk) * C, 1, C) = x->val.row(src);
        }
    }
    return make_node(std::move(out), {x}, [kernel, stride, pad](Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        const Eigen::Index N = p.val.rows(), C = p.val.cols();
        for (Eigen::Index t = 0; t < n.val.rows(); ++t) {
            for (int kk = 0; kk < kernel; ++kk) {
                Eigen::Index src = t * stride - pad + kk;
                if (src < 0 || src >= N) continue;
                p.grad.row(src) += n.grad.block(t, static_cast<Eigen::Index>(kk) * C, 1, C);
            }
        }
    });
}

}  // namespace musteer::ag
