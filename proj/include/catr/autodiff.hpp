#pragma once
// Reverse-mode tape over vector-valued nodes. One Tape records one forward
// computation; backward() walks nodes in reverse creation order and
// accumulates gradients into every leaf. Nodes hold plain vectors; ops that
// touch per-row constant data (embeddings, design matrices) reference the
// caller's storage, which must outlive the tape.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <utility>
#include <vector>

namespace catr::ad {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    Tape() { nodes_.reserve(1024); }

    Var leaf(std::vector<double> v) { return push(std::move(v), nullptr); }

    Var leaf(std::span<const double> v) {
        return push(std::vector<double>(v.begin(), v.end()), nullptr);
    }

    const std::vector<double>& val(Var x) const { return at(x).value; }
    const std::vector<double>& grad(Var x) const { return at(x).grad; }

    double scalar(Var x) const {
        const auto& v = val(x);
        if (v.size() != 1) throw std::invalid_argument("tape: node is not a scalar");
        return v[0];
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        check_same(a, b);
        std::vector<double> out = val(a);
        const auto& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return push(std::move(out), [a, b](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            auto& ga = t.at(a).grad;
            auto& gb = t.at(b).grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b);
        std::vector<double> out = val(a);
        const auto& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return push(std::move(out), [a, b](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            auto& ga = t.at(a).grad;
            auto& gb = t.at(b).grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b);
        std::vector<double> out = val(a);
        const auto& vb = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return push(std::move(out), [a, b](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& va = t.at(a).value;
            const auto& vb2 = t.at(b).value;
            auto& ga = t.at(a).grad;
            auto& gb = t.at(b).grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * vb2[i];
                gb[i] += g[i] * va[i];
            }
        });
    }

    // a*x + b, elementwise with scalar constants.
    Var axpb(Var x, double a, double b) {
        std::vector<double> out = val(x);
        for (auto& v : out) v = a * v + b;
        return push(std::move(out), [x, a](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            auto& gx = t.at(x).grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
        });
    }

    Var relu(Var x) {
        std::vector<double> out = val(x);
        for (auto& v : out) v = v > 0.0 ? v : 0.0;  // subgradient at 0 is 0
        return push(std::move(out), [x](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vx = t.at(x).value;
            auto& gx = t.at(x).grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (vx[i] > 0.0) gx[i] += g[i];
        });
    }

    Var sigmoid(Var x) {
        std::vector<double> out = val(x);
        for (auto& v : out) v = stable_sigmoid(v);
        auto id = push(std::move(out), [x](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vy = t.at({self}).value;
            auto& gx = t.at(x).grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * vy[i] * (1.0 - vy[i]);
        });
        return id;
    }

    Var logv(Var x) {
        std::vector<double> out = val(x);
        for (auto& v : out) v = std::log(v);
        return push(std::move(out), [x](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vx = t.at(x).value;
            auto& gx = t.at(x).grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / vx[i];
        });
    }

    // Subgradient 0 outside [lo, hi].
    Var clamp(Var x, double lo, double hi) {
        std::vector<double> out = val(x);
        for (auto& v : out) v = v < lo ? lo : (v > hi ? hi : v);
        return push(std::move(out), [x, lo, hi](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vx = t.at(x).value;
            auto& gx = t.at(x).grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (vx[i] > lo && vx[i] < hi) gx[i] += g[i];
        });
    }

    // ---- shape ----

    Var concat(Var a, Var b) {
        std::vector<double> out = val(a);
        const auto& vb = val(b);
        out.insert(out.end(), vb.begin(), vb.end());
        const std::size_t na = val(a).size();
        return push(std::move(out), [a, b, na](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            auto& ga = t.at(a).grad;
            auto& gb = t.at(b).grad;
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
            for (std::size_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
        });
    }

    // Stack scalar nodes into one vector node.
    Var pack(const std::vector<Var>& parts) {
        std::vector<double> out;
        out.reserve(parts.size());
        for (Var p : parts) out.push_back(scalar(p));
        return push(std::move(out), [parts](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            for (std::size_t i = 0; i < parts.size(); ++i)
                t.at(parts[i]).grad[0] += g[i];
        });
    }

    // ---- reductions ----

    Var sum(Var x) {
        double s = 0.0;
        for (double v : val(x)) s += v;
        return push({s}, [x](Tape& t, int self) {
            const double g = t.at({self}).grad[0];
            auto& gx = t.at(x).grad;
            for (auto& v : gx) v += g;
        });
    }

    Var dot(Var a, Var b) {
        check_same(a, b);
        const auto& va = val(a);
        const auto& vb = val(b);
        double s = 0.0;
        for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * vb[i];
        return push({s}, [a, b](Tape& t, int self) {
            const double g = t.at({self}).grad[0];
            const auto& va2 = t.at(a).value;
            const auto& vb2 = t.at(b).value;
            auto& ga = t.at(a).grad;
            auto& gb = t.at(b).grad;
            for (std::size_t i = 0; i < va2.size(); ++i) {
                ga[i] += g * vb2[i];
                gb[i] += g * va2[i];
            }
        });
    }

    // ---- scalar-vector ----

    // y = s[0] * x with s a scalar node.
    Var scale_by(Var x, Var s) {
        const double sv = scalar(s);
        std::vector<double> out = val(x);
        for (auto& v : out) v *= sv;
        return push(std::move(out), [x, s](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vx = t.at(x).value;
            const double sv2 = t.at(s).value[0];
            auto& gx = t.at(x).grad;
            auto& gs = t.at(s).grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] * sv2;
                gs[0] += g[i] * vx[i];
            }
        });
    }

    Var recip(Var x) {
        std::vector<double> out = val(x);
        for (auto& v : out) v = 1.0 / v;
        return push(std::move(out), [x](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vy = t.at({self}).value;
            auto& gx = t.at(x).grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] -= g[i] * vy[i] * vy[i];
        });
    }

    // ---- linear maps ----

    // y = W x, W row-major (rows x cols) stored in a node.
    Var matvec(Var w, int rows, int cols, Var x) {
        const auto& vw = val(w);
        const auto& vx = val(x);
        if (static_cast<int>(vw.size()) != rows * cols ||
            static_cast<int>(vx.size()) != cols)
            throw std::invalid_argument("matvec: shape mismatch");
        std::vector<double> out(static_cast<std::size_t>(rows), 0.0);
        for (int r = 0; r < rows; ++r) {
            const double* wr = vw.data() + static_cast<std::size_t>(r) * cols;
            double s = 0.0;
            for (int c = 0; c < cols; ++c) s += wr[c] * vx[c];
            out[static_cast<std::size_t>(r)] = s;
        }
        return push(std::move(out), [w, x, rows, cols](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            const auto& vw2 = t.at(w).value;
            const auto& vx2 = t.at(x).value;
            auto& gw = t.at(w).grad;
            auto& gx = t.at(x).grad;
            for (int r = 0; r < rows; ++r) {
                const double gr = g[static_cast<std::size_t>(r)];
                if (gr == 0.0) continue;
                double* gwr = gw.data() + static_cast<std::size_t>(r) * cols;
                const double* wr = vw2.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) {
                    gwr[c] += gr * vx2[c];
                    gx[c] += gr * wr[c];
                }
            }
        });
    }

    // y_i = rows_i . w  for i in [0,n). `rows` is caller-owned row-major
    // constant data (n x p) and must outlive the tape.
    Var rows_matvec(std::span<const double> rows, int n, int p, Var w) {
        if (static_cast<int>(val(w).size()) != p ||
            rows.size() != static_cast<std::size_t>(n) * p)
            throw std::invalid_argument("rows_matvec: shape mismatch");
        const auto& vw = val(w);
        std::vector<double> out(static_cast<std::size_t>(n), 0.0);
        for (int i = 0; i < n; ++i) {
            const double* xi = rows.data() + static_cast<std::size_t>(i) * p;
            double s = 0.0;
            for (int c = 0; c < p; ++c) s += xi[c] * vw[c];
            out[static_cast<std::size_t>(i)] = s;
        }
        return push(std::move(out), [rows, n, p, w](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            auto& gw = t.at(w).grad;
            for (int i = 0; i < n; ++i) {
                const double gi = g[static_cast<std::size_t>(i)];
                if (gi == 0.0) continue;
                const double* xi = rows.data() + static_cast<std::size_t>(i) * p;
                for (int c = 0; c < p; ++c) gw[c] += gi * xi[c];
            }
        });
    }

    // y_i = x_i + b[0], b a scalar node broadcast over x.
    Var add_broadcast(Var x, Var b) {
        const double bv = scalar(b);
        std::vector<double> out = val(x);
        for (auto& v : out) v += bv;
        return push(std::move(out), [x, b](Tape& t, int self) {
            const auto& g = t.at({self}).grad;
            auto& gx = t.at(x).grad;
            auto& gb = t.at(b).grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
                gb[0] += g[i];
            }
        });
    }

    // y = sum_j gates_j * rows_j with constant rows (L x d), caller-owned.
    Var weighted_rows_sum(Var gates, std::span<const float> rows, int n_rows, int d) {
        if (static_cast<int>(val(gates).size()) != n_rows ||
            rows.size() < static_cast<std::size_t>(n_rows) * d)
            throw std::invalid_argument("weighted_rows_sum: shape mismatch");
        const auto& g = val(gates);
        std::vector<double> out(static_cast<std::size_t>(d), 0.0);
        for (int j = 0; j < n_rows; ++j) {
            const float* row = rows.data() + static_cast<std::size_t>(j) * d;
            const double sj = g[static_cast<std::size_t>(j)];
            for (int k = 0; k < d; ++k) out[static_cast<std::size_t>(k)] += sj * row[k];
        }
        return push(std::move(out), [gates, rows, n_rows, d](Tape& t, int self) {
            const auto& go = t.at({self}).grad;
            auto& gg = t.at(gates).grad;
            for (int j = 0; j < n_rows; ++j) {
                const float* row = rows.data() + static_cast<std::size_t>(j) * d;
                double s = 0.0;
                for (int k = 0; k < d; ++k) s += go[static_cast<std::size_t>(k)] * row[k];
                gg[static_cast<std::size_t>(j)] += s;
            }
        });
    }

    // ---- losses ----

    // Per-element binary cross-entropy against constant labels.
    Var bce(Var p, std::vector<double> labels) {
        const auto& vp = val(p);
        if (vp.size() != labels.size())
            throw std::invalid_argument("bce: label count mismatch");
        std::vector<double> out(vp.size());
        for (std::size_t i = 0; i < vp.size(); ++i)
            out[i] = -(labels[i] * std::log(vp[i]) +
                       (1.0 - labels[i]) * std::log(1.0 - vp[i]));
        return push(std::move(out),
                    [p, labels = std::move(labels)](Tape& t, int self) {
                        const auto& g = t.at({self}).grad;
                        const auto& vp2 = t.at(p).value;
                        auto& gp = t.at(p).grad;
                        for (std::size_t i = 0; i < g.size(); ++i)
                            gp[i] += g[i] * (vp2[i] - labels[i]) /
                                     (vp2[i] * (1.0 - vp2[i]));
                    });
    }

    // Empirical HSIC between residual vectors: tr(K H L H)/(n-1)^2 with a
    // linear kernel on rt and either a linear or an RBF(sigma) kernel on ry.
    // sigma is a constant here (stop-gradient); callers pick it from the
    // forward values before building this node.
    Var hsic(Var rt, Var ry, bool rbf, double sigma) {
        const auto& t_ = val(rt);
        const auto& y_ = val(ry);
        const int n = static_cast<int>(t_.size());
        if (static_cast<int>(y_.size()) != n)
            throw std::invalid_argument("hsic: size mismatch");
        if (n < 2) throw std::invalid_argument("hsic: need n >= 2");
        if (rbf && sigma <= 0.0)
            throw std::invalid_argument("hsic: sigma must be positive");

        auto state = std::make_shared<HsicState>();
        state->n = n;
        state->rbf = rbf;
        state->sigma = sigma;
        state->k_cent.assign(static_cast<std::size_t>(n) * n, 0.0);
        state->l_raw.assign(static_cast<std::size_t>(n) * n, 0.0);
        state->l_cent.assign(static_cast<std::size_t>(n) * n, 0.0);

        // raw grams
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                state->k_cent[idx(i, j, n)] = t_[i] * t_[j];
                if (rbf) {
                    const double diff = y_[i] - y_[j];
                    state->l_raw[idx(i, j, n)] =
                        std::exp(-diff * diff / (2.0 * sigma * sigma));
                } else {
                    state->l_raw[idx(i, j, n)] = y_[i] * y_[j];
                }
            }
        state->l_cent = state->l_raw;
        center(state->k_cent, n);
        center(state->l_cent, n);

        const double denom = static_cast<double>(n - 1) * (n - 1);
        double value = 0.0;
        for (std::size_t i = 0; i < state->k_cent.size(); ++i)
            value += state->k_cent[i] * state->l_cent[i];
        value /= denom;

        return push({value}, [rt, ry, state, denom](Tape& tp, int self) {
            const double g = tp.at({self}).grad[0];
            if (g == 0.0) return;
            const int n2 = state->n;
            const auto& tv = tp.at(rt).value;
            const auto& yv = tp.at(ry).value;
            auto& gt = tp.at(rt).grad;
            auto& gy = tp.at(ry).grad;
            // d/d rt: K = rt rt^T  =>  2 (L~ rt) / (n-1)^2
            for (int i = 0; i < n2; ++i) {
                double s = 0.0;
                for (int j = 0; j < n2; ++j)
                    s += state->l_cent[idx(i, j, n2)] * tv[j];
                gt[static_cast<std::size_t>(i)] += g * 2.0 * s / denom;
            }
            if (state->rbf) {
                const double inv_s2 = 1.0 / (state->sigma * state->sigma);
                for (int k = 0; k < n2; ++k) {
                    double s = 0.0;
                    for (int j = 0; j < n2; ++j)
                        s += state->k_cent[idx(k, j, n2)] *
                             state->l_raw[idx(k, j, n2)] * (yv[j] - yv[k]);
                    gy[static_cast<std::size_t>(k)] += g * 2.0 * s * inv_s2 / denom;
                }
            } else {
                for (int i = 0; i < n2; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < n2; ++j)
                        s += state->k_cent[idx(i, j, n2)] * yv[j];
                    gy[static_cast<std::size_t>(i)] += g * 2.0 * s / denom;
                }
            }
        });
    }

    // ---- driver ----

    void backward(Var loss) {
        if (consumed_)
            throw std::logic_error("tape: backward already ran; tape is consumed");
        if (val(loss).size() != 1)
            throw std::invalid_argument("tape: loss must be scalar");
        consumed_ = true;
        at(loss).grad[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
            if (nodes_[static_cast<std::size_t>(i)].back)
                nodes_[static_cast<std::size_t>(i)].back(*this, i);
    }

    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct HsicState {
        int n = 0;
        bool rbf = false;
        double sigma = 0.0;
        std::vector<double> k_cent, l_raw, l_cent;
    };

    struct Node {
        std::vector<double> value;
        std::vector<double> grad;
        std::function<void(Tape&, int)> back;
    };

    static std::size_t idx(int i, int j, int n) {
        return static_cast<std::size_t>(i) * n + j;
    }

    void check_same(Var a, Var b) const {
        if (val(a).size() != val(b).size())
            throw std::invalid_argument("tape: elementwise op size mismatch");
    }

    static double stable_sigmoid(double x) {
        if (x >= 0.0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    // In-place double centering: M <- H M H via row/col/grand means.
    static void center(std::vector<double>& m, int n) {
        std::vector<double> row_mean(static_cast<std::size_t>(n), 0.0);
        std::vector<double> col_mean(static_cast<std::size_t>(n), 0.0);
        double grand = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const double v = m[idx(i, j, n)];
                row_mean[static_cast<std::size_t>(i)] += v;
                col_mean[static_cast<std::size_t>(j)] += v;
                grand += v;
            }
        for (auto& v : row_mean) v /= n;
        for (auto& v : col_mean) v /= n;
        grand /= static_cast<double>(n) * n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                m[idx(i, j, n)] += grand - row_mean[static_cast<std::size_t>(i)] -
                                   col_mean[static_cast<std::size_t>(j)];
    }

    Node& at(Var x) {
        if (!x.valid() || x.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("tape: invalid node handle");
        return nodes_[static_cast<std::size_t>(x.id)];
    }
    const Node& at(Var x) const {
        if (!x.valid() || x.id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("tape: invalid node handle");
        return nodes_[static_cast<std::size_t>(x.id)];
    }

    template <typename F>
    Var push(std::vector<double> value, F&& back) {
        if (consumed_)
            throw std::logic_error("tape: cannot record after backward");
        Node n;
        n.value = std::move(value);
        n.grad.assign(n.value.size(), 0.0);
        if constexpr (!std::is_same_v<std::decay_t<F>, std::nullptr_t>)
            n.back = std::forward<F>(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;

    friend struct TapeTestAccess;
};

}  // namespace catr::ad
