#pragma once
// Small fully connected networks: He initialization, ReLU hidden layers,
// identity or clamped-sigmoid output, Adam, binary checkpoints, and a
// central-finite-difference gradient verifier.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "catr/autodiff.hpp"
#include "catr/rng.hpp"

namespace catr::nets {

inline constexpr double kSigmoidClamp = 1e-6;

enum class Output { identity, sigmoid };

struct FeedforwardNet {
    std::vector<int> widths;   // [in, hidden..., out]
    Output output = Output::identity;
    std::vector<std::vector<double>> weights;  // layer l: widths[l+1] x widths[l], row-major
    std::vector<std::vector<double>> biases;

    int layers() const { return static_cast<int>(widths.size()) - 1; }
    int input_width() const { return widths.front(); }
    int output_width() const { return widths.back(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& w : weights) n += w.size();
        for (const auto& b : biases) n += b.size();
        return n;
    }
};

// He-style init: weights ~ N(0, 2/fan_in), biases zero.
inline FeedforwardNet init_network(std::vector<int> widths, Output output,
                                   std::uint64_t seed) {
    if (widths.size() < 2)
        throw std::invalid_argument("init_network: need at least 2 widths");
    for (int w : widths)
        if (w <= 0) throw std::invalid_argument("init_network: zero layer width");
    FeedforwardNet net;
    net.widths = std::move(widths);
    net.output = output;
    rng::Engine eng(rng::derive(seed, 0x6e657473ull));
    for (int l = 0; l < net.layers(); ++l) {
        const int fan_in = net.widths[static_cast<std::size_t>(l)];
        const int fan_out = net.widths[static_cast<std::size_t>(l) + 1];
        const double sd = std::sqrt(2.0 / fan_in);
        std::vector<double> w(static_cast<std::size_t>(fan_out) * fan_in);
        for (auto& v : w) v = sd * eng.normal();
        net.weights.push_back(std::move(w));
        net.biases.emplace_back(static_cast<std::size_t>(fan_out), 0.0);
    }
    return net;
}

namespace detail {
inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace detail

// Plain evaluation. Sigmoid outputs are clamped into
// [kSigmoidClamp, 1-kSigmoidClamp] so they are always safe under log.
inline std::vector<double> forward(const FeedforwardNet& net,
                                   std::span<const double> x) {
    if (static_cast<int>(x.size()) != net.input_width())
        throw std::invalid_argument("forward: input width mismatch");
    std::vector<double> cur(x.begin(), x.end());
    for (int l = 0; l < net.layers(); ++l) {
        const int rows = net.widths[static_cast<std::size_t>(l) + 1];
        const int cols = net.widths[static_cast<std::size_t>(l)];
        const auto& w = net.weights[static_cast<std::size_t>(l)];
        const auto& b = net.biases[static_cast<std::size_t>(l)];
        std::vector<double> next(static_cast<std::size_t>(rows));
        for (int r = 0; r < rows; ++r) {
            const double* wr = w.data() + static_cast<std::size_t>(r) * cols;
            double s = b[static_cast<std::size_t>(r)];
            for (int c = 0; c < cols; ++c) s += wr[c] * cur[static_cast<std::size_t>(c)];
            next[static_cast<std::size_t>(r)] = s;
        }
        const bool last = l == net.layers() - 1;
        if (!last) {
            for (auto& v : next) v = v > 0.0 ? v : 0.0;
        } else if (net.output == Output::sigmoid) {
            for (auto& v : next) {
                v = detail::stable_sigmoid(v);
                v = std::min(std::max(v, kSigmoidClamp), 1.0 - kSigmoidClamp);
            }
        }
        cur = std::move(next);
    }
    return cur;
}

// ---- tape integration ----

// Parameter leaves registered on one tape; reuse across units of a batch so
// gradients accumulate in one place.
struct BoundNet {
    const FeedforwardNet* net = nullptr;
    std::vector<ad::Var> w, b;
};

inline BoundNet bind(ad::Tape& tape, const FeedforwardNet& net) {
    BoundNet bound;
    bound.net = &net;
    for (int l = 0; l < net.layers(); ++l) {
        bound.w.push_back(tape.leaf(net.weights[static_cast<std::size_t>(l)]));
        bound.b.push_back(tape.leaf(net.biases[static_cast<std::size_t>(l)]));
    }
    return bound;
}

inline ad::Var forward(ad::Tape& tape, const BoundNet& bound, ad::Var x) {
    const FeedforwardNet& net = *bound.net;
    ad::Var cur = x;
    for (int l = 0; l < net.layers(); ++l) {
        const int rows = net.widths[static_cast<std::size_t>(l) + 1];
        const int cols = net.widths[static_cast<std::size_t>(l)];
        cur = tape.add(tape.matvec(bound.w[static_cast<std::size_t>(l)], rows, cols, cur),
                       bound.b[static_cast<std::size_t>(l)]);
        const bool last = l == net.layers() - 1;
        if (!last)
            cur = tape.relu(cur);
        else if (net.output == Output::sigmoid)
            cur = tape.clamp(tape.sigmoid(cur), kSigmoidClamp, 1.0 - kSigmoidClamp);
    }
    return cur;
}

// Final affine output with no output transform; for sigmoid nets this is
// the exact logit of the (unclamped) output.
inline ad::Var forward_logit(ad::Tape& tape, const BoundNet& bound, ad::Var x) {
    const FeedforwardNet& net = *bound.net;
    ad::Var cur = x;
    for (int l = 0; l < net.layers(); ++l) {
        const int rows = net.widths[static_cast<std::size_t>(l) + 1];
        const int cols = net.widths[static_cast<std::size_t>(l)];
        cur = tape.add(tape.matvec(bound.w[static_cast<std::size_t>(l)], rows, cols, cur),
                       bound.b[static_cast<std::size_t>(l)]);
        if (l != net.layers() - 1) cur = tape.relu(cur);
    }
    return cur;
}

// ---- losses ----

inline double cross_entropy(double p, int label) {
    if (p <= 0.0 || p >= 1.0)
        throw std::invalid_argument("cross_entropy: p must lie in (0,1)");
    return -(label * std::log(p) + (1 - label) * std::log(1.0 - p));
}

// ---- optimizer ----

struct ParamView {
    std::string name;
    std::vector<double>* value = nullptr;
    const std::vector<double>* grad = nullptr;
};

// Named views over one net's parameters; grads taken from a consumed tape.
inline std::vector<ParamView> param_views(const std::string& prefix,
                                          FeedforwardNet& net,
                                          const ad::Tape& tape,
                                          const BoundNet& bound) {
    std::vector<ParamView> out;
    for (int l = 0; l < net.layers(); ++l) {
        out.push_back({prefix + ".w" + std::to_string(l),
                       &net.weights[static_cast<std::size_t>(l)],
                       &tape.grad(bound.w[static_cast<std::size_t>(l)])});
        out.push_back({prefix + ".b" + std::to_string(l),
                       &net.biases[static_cast<std::size_t>(l)],
                       &tape.grad(bound.b[static_cast<std::size_t>(l)])});
    }
    return out;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    long step = 0;
    std::vector<std::vector<double>> m, v;  // shaped on first use
};

inline void adam_step(const std::vector<ParamView>& params, AdamState& st) {
    if (st.m.empty()) {
        for (const auto& p : params) {
            st.m.emplace_back(p.value->size(), 0.0);
            st.v.emplace_back(p.value->size(), 0.0);
        }
    }
    if (st.m.size() != params.size())
        throw std::invalid_argument("adam_step: parameter group changed shape");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& g = *params[k].grad;
        if (g.size() != params[k].value->size() || g.size() != st.m[k].size())
            throw std::invalid_argument("adam_step: shape mismatch for " + params[k].name);
        for (double gv : g)
            if (!std::isfinite(gv))
                throw std::runtime_error("adam_step: non-finite gradient for " +
                                         params[k].name);
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& val = *params[k].value;
        const auto& g = *params[k].grad;
        auto& m = st.m[k];
        auto& v = st.v[k];
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = st.cfg.beta1 * m[i] + (1.0 - st.cfg.beta1) * g[i];
            v[i] = st.cfg.beta2 * v[i] + (1.0 - st.cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            val[i] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
        }
    }
}

// ---- checkpoints ----
// One net per file: a single-line JSON header then the parameters as
// little-endian f32 in layer order (weights row-major, then biases).

inline void save_net(const FeedforwardNet& net, const std::filesystem::path& path) {
    nlohmann::json header{
        {"version", 1},
        {"widths", net.widths},
        {"output_transform", net.output == Output::sigmoid ? "sigmoid" : "identity"}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_net: cannot open " + path.string());
    out << header.dump() << '\n';
    auto write_f32 = [&out](const std::vector<double>& v) {
        for (double d : v) {
            const float f = static_cast<float>(d);
            out.write(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    };
    for (int l = 0; l < net.layers(); ++l) {
        write_f32(net.weights[static_cast<std::size_t>(l)]);
        write_f32(net.biases[static_cast<std::size_t>(l)]);
    }
    if (!out) throw std::runtime_error("save_net: write failed for " + path.string());
}

inline FeedforwardNet load_net(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_net: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("load_net: missing header in " + path.string());
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("widths") ||
        !header.contains("output_transform") || header.value("version", 0) != 1)
        throw std::runtime_error("load_net: malformed header in " + path.string());
    FeedforwardNet net;
    net.widths = header["widths"].get<std::vector<int>>();
    if (net.widths.size() < 2)
        throw std::runtime_error("load_net: header widths invalid in " + path.string());
    const std::string tf = header["output_transform"].get<std::string>();
    if (tf == "sigmoid")
        net.output = Output::sigmoid;
    else if (tf == "identity")
        net.output = Output::identity;
    else
        throw std::runtime_error("load_net: unknown output_transform '" + tf + "'");
    auto read_f32 = [&in, &path](std::size_t n) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            in.read(reinterpret_cast<char*>(&f), sizeof(float));
            if (!in)
                throw std::runtime_error("load_net: truncated payload in " +
                                         path.string());
            v[i] = static_cast<double>(f);
        }
        return v;
    };
    for (int l = 0; l + 1 < static_cast<int>(net.widths.size()); ++l) {
        const auto rows = static_cast<std::size_t>(net.widths[static_cast<std::size_t>(l) + 1]);
        const auto cols = static_cast<std::size_t>(net.widths[static_cast<std::size_t>(l)]);
        net.weights.push_back(read_f32(rows * cols));
        net.biases.push_back(read_f32(rows));
    }
    char extra;
    if (in.read(&extra, 1))
        throw std::runtime_error("load_net: trailing bytes in " + path.string());
    return net;
}

// ---- gradient verification ----

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

// Central finite differences of `objective` against precomputed analytic
// gradients; perturbs every entry of every listed parameter. Relative error
// uses max(|fd|, |analytic|, floor) as denominator.
inline FdReport finite_difference_check(
    const std::function<double()>& objective,
    const std::vector<std::pair<std::string, std::vector<double>*>>& params,
    const std::vector<const std::vector<double>*>& analytic, double step = 1e-4,
    double denom_floor = 1e-6) {
    if (params.size() != analytic.size())
        throw std::invalid_argument("finite_difference_check: group size mismatch");
    FdReport rep;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& vec = *params[k].second;
        const auto& an = *analytic[k];
        if (an.size() != vec.size())
            throw std::invalid_argument("finite_difference_check: shape mismatch for " +
                                        params[k].first);
        for (std::size_t i = 0; i < vec.size(); ++i) {
            const double orig = vec[i];
            vec[i] = orig + step;
            const double up = objective();
            vec[i] = orig - step;
            const double dn = objective();
            vec[i] = orig;
            const double fd = (up - dn) / (2.0 * step);
            const double denom =
                std::max({std::fabs(fd), std::fabs(an[i]), denom_floor});
            const double rel = std::fabs(fd - an[i]) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = params[k].first;
                rep.worst_index = i;
            }
        }
    }
    return rep;
}

}  // namespace catr::nets
