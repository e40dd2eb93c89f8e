#pragma once
// Token-sequence data model, deterministic hash-seeded token embeddings,
// the keyword-driven semi-synthetic generator, and the on-disk directory
// format (meta.json + flat little-endian arrays).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "catr/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset format assumes a little-endian host");

namespace catr::dataset {

struct EmbeddingSpec {
    int d = 16;
    std::uint64_t seed = 0;
};

// Deterministic unit vector for a token: hash the string into an RNG
// stream, draw i.i.d. Gaussians, normalize.
inline std::vector<double> embed_token(std::string_view token,
                                       const EmbeddingSpec& spec) {
    if (token.empty())
        throw std::invalid_argument("embed_token: empty token string");
    if (spec.d < 1) throw std::invalid_argument("embed_token: d must be >= 1");
    rng::Engine eng(rng::derive(rng::fnv1a64(token), spec.seed,
                                static_cast<std::uint64_t>(spec.d)));
    std::vector<double> v(static_cast<std::size_t>(spec.d));
    double norm2 = 0.0;
    do {
        norm2 = 0.0;
        for (auto& x : v) {
            x = eng.normal();
            norm2 += x * x;
        }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
}

struct TokenSequenceDataset {
    int n = 0;
    int d = 0;
    int l_max = 0;
    std::vector<float> embeddings;  // n x l_max x d, row-major, zero padded
    std::vector<std::uint32_t> lengths;
    std::vector<std::uint8_t> treatment;
    std::vector<float> outcome;
    std::optional<std::vector<std::vector<std::string>>> tokens;

    const float* sequence(int i) const {
        return embeddings.data() + static_cast<std::size_t>(i) * l_max * d;
    }
    std::span<const float> sequence_span(int i) const {
        return {sequence(i), static_cast<std::size_t>(l_max) * d};
    }
};

inline void validate(const TokenSequenceDataset& ds) {
    if (ds.n < 0 || ds.d < 1 || ds.l_max < 1)
        throw std::runtime_error("dataset: invalid shape (n, d, l_max)");
    const auto nf = static_cast<std::size_t>(ds.n);
    if (ds.embeddings.size() != nf * ds.l_max * ds.d)
        throw std::runtime_error("dataset: embeddings size mismatch");
    if (ds.lengths.size() != nf || ds.treatment.size() != nf || ds.outcome.size() != nf)
        throw std::runtime_error("dataset: per-unit array size mismatch");
    for (int i = 0; i < ds.n; ++i) {
        const auto len = ds.lengths[static_cast<std::size_t>(i)];
        if (len < 1 || len > static_cast<std::uint32_t>(ds.l_max))
            throw std::runtime_error("dataset: lengths[" + std::to_string(i) +
                                     "] out of range [1, l_max]");
        if (ds.treatment[static_cast<std::size_t>(i)] > 1)
            throw std::runtime_error("dataset: treatment[" + std::to_string(i) +
                                     "] not in {0,1}");
        if (!std::isfinite(ds.outcome[static_cast<std::size_t>(i)]))
            throw std::runtime_error("dataset: outcome[" + std::to_string(i) +
                                     "] is not finite");
        const float* seq = ds.sequence(i);
        for (int j = 0; j < ds.l_max; ++j)
            for (int k = 0; k < ds.d; ++k) {
                const float v = seq[static_cast<std::size_t>(j) * ds.d + k];
                if (!std::isfinite(v))
                    throw std::runtime_error("dataset: embeddings contain a non-finite "
                                             "value at unit " + std::to_string(i));
                if (j >= static_cast<int>(len) && v != 0.0f)
                    throw std::runtime_error("dataset: nonzero padding at unit " +
                                             std::to_string(i));
            }
        if (ds.tokens &&
            (*ds.tokens)[static_cast<std::size_t>(i)].size() != len)
            throw std::runtime_error("dataset: tokens[" + std::to_string(i) +
                                     "] count != lengths[" + std::to_string(i) + "]");
    }
    if (ds.tokens && ds.tokens->size() != nf)
        throw std::runtime_error("dataset: tokens list size mismatch");
}

struct ConfounderSpec {
    std::vector<std::string> keywords{"shock", "hypotension", "infection",
                                      "sepsis", "pneumonia"};
    int filler_vocab_size = 200;
    int doc_len_min = 6;
    int doc_len_max = 12;
    double keyword_inclusion_prob = 0.5;
    double a0 = -0.4, a1 = 1.6;        // propensity logit: a0 + a1*c
    double b0 = 0.0, b1 = 1.0, b2 = 2.0;  // outcome mean: b0 + b1*t + b2*c
    double noise_sd = 1.0;
    int embedding_dim = 16;
    bool binary_outcome = false;       // threshold y at 0

    void validate() const {
        if (keywords.empty())
            throw std::invalid_argument("ConfounderSpec: keywords must be nonempty");
        for (const auto& k : keywords)
            if (k.empty())
                throw std::invalid_argument("ConfounderSpec: empty keyword string");
        if (filler_vocab_size < 1)
            throw std::invalid_argument("ConfounderSpec: filler_vocab_size must be >= 1");
        if (doc_len_min < 1 || doc_len_max < doc_len_min)
            throw std::invalid_argument("ConfounderSpec: bad doc_length_range");
        if (keyword_inclusion_prob <= 0.0 || keyword_inclusion_prob >= 1.0)
            throw std::invalid_argument(
                "ConfounderSpec: keyword_inclusion_prob must lie in (0,1)");
        if (noise_sd < 0.0)
            throw std::invalid_argument("ConfounderSpec: noise_sd must be >= 0");
        if (embedding_dim < 1)
            throw std::invalid_argument("ConfounderSpec: embedding_dim must be >= 1");
        for (const auto& k : keywords)
            if (k.rfind("filler", 0) == 0)
                throw std::invalid_argument(
                    "ConfounderSpec: keyword '" + k + "' collides with filler vocabulary");
    }
};

struct GroundTruth {
    std::vector<double> true_propensity;
    std::vector<double> true_q0, true_q1;
    double tau_true = 0.0;
};

inline double true_ate(const GroundTruth& gt) {
    if (gt.true_q0.empty() || gt.true_q0.size() != gt.true_q1.size())
        throw std::invalid_argument("true_ate: ground truth is empty or inconsistent");
    double s = 0.0;
    for (std::size_t i = 0; i < gt.true_q0.size(); ++i)
        s += gt.true_q1[i] - gt.true_q0[i];
    return s / static_cast<double>(gt.true_q0.size());
}

// Optional overrides for the treatment/outcome maps; defaults are the
// logistic propensity and linear outcome implied by ConfounderSpec.
struct GeneratorMaps {
    std::function<double(int c)> propensity;            // returns P(T=1 | c)
    std::function<double(int t, int c)> outcome_mean;   // returns E[Y | t, c]
};

struct SemiSynthetic {
    TokenSequenceDataset ds;
    GroundTruth truth;
    std::vector<std::uint8_t> keyword_present;  // c_i
    bool no_confounding = false;  // set when a1 == 0 and b2 == 0
};

namespace detail {

inline std::string filler_token(std::uint64_t idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "filler%04llu",
                  static_cast<unsigned long long>(idx));
    return buf;
}

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline constexpr std::uint64_t kDocsTag = 0x646f6373ull;  // doc structure stream
inline constexpr std::uint64_t kAssignTag = 0x74790000ull;  // treatment/outcome stream

}  // namespace detail

// Documents (tokens, embeddings, c indicator) use one seed-derived stream;
// treatment/outcome use another, so assignments can be redrawn on fixed
// documents via resample_assignments.
inline SemiSynthetic generate_semisynthetic(const ConfounderSpec& spec, int n,
                                            std::uint64_t seed,
                                            const GeneratorMaps* maps = nullptr);

inline void resample_assignments(SemiSynthetic& data, const ConfounderSpec& spec,
                                 std::uint64_t seed,
                                 const GeneratorMaps* maps = nullptr) {
    spec.validate();
    const int n = data.ds.n;
    auto propensity = [&](int c) {
        if (maps && maps->propensity) return maps->propensity(c);
        const double z = spec.a0 + spec.a1 * c;
        return 1.0 / (1.0 + std::exp(-z));
    };
    auto outcome_mean = [&](int t, int c) {
        if (maps && maps->outcome_mean) return maps->outcome_mean(t, c);
        return spec.b0 + spec.b1 * t + spec.b2 * c;
    };
    data.truth.true_propensity.resize(static_cast<std::size_t>(n));
    data.truth.true_q0.resize(static_cast<std::size_t>(n));
    data.truth.true_q1.resize(static_cast<std::size_t>(n));
    data.ds.treatment.resize(static_cast<std::size_t>(n));
    data.ds.outcome.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        rng::Engine eng(rng::derive(seed, static_cast<std::uint64_t>(i),
                                    detail::kAssignTag));
        const int c = data.keyword_present[static_cast<std::size_t>(i)];
        const double g = propensity(c);
        if (g <= 0.0 || g >= 1.0)
            throw std::runtime_error("generator: propensity left (0,1) at unit " +
                                     std::to_string(i));
        const int t = eng.bernoulli(g) ? 1 : 0;
        const double mu = outcome_mean(t, c);
        const double y_raw = mu + spec.noise_sd * eng.normal();
        double q0 = outcome_mean(0, c);
        double q1 = outcome_mean(1, c);
        double y = y_raw;
        if (spec.binary_outcome) {
            y = y_raw > 0.0 ? 1.0 : 0.0;
            if (spec.noise_sd > 0.0) {
                q0 = detail::std_normal_cdf(outcome_mean(0, c) / spec.noise_sd);
                q1 = detail::std_normal_cdf(outcome_mean(1, c) / spec.noise_sd);
            } else {
                q0 = outcome_mean(0, c) > 0.0 ? 1.0 : 0.0;
                q1 = outcome_mean(1, c) > 0.0 ? 1.0 : 0.0;
            }
        }
        data.truth.true_propensity[static_cast<std::size_t>(i)] = g;
        data.truth.true_q0[static_cast<std::size_t>(i)] = q0;
        data.truth.true_q1[static_cast<std::size_t>(i)] = q1;
        data.ds.treatment[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(t);
        data.ds.outcome[static_cast<std::size_t>(i)] = static_cast<float>(y);
    }
    data.truth.tau_true = true_ate(data.truth);
    data.no_confounding = !maps && spec.a1 == 0.0 && spec.b2 == 0.0;
}

inline SemiSynthetic generate_semisynthetic(const ConfounderSpec& spec, int n,
                                            std::uint64_t seed,
                                            const GeneratorMaps* maps) {
    spec.validate();
    if (n < 1) throw std::invalid_argument("generate_semisynthetic: n must be >= 1");

    SemiSynthetic out;
    out.ds.n = n;
    out.ds.d = spec.embedding_dim;
    out.ds.l_max = spec.doc_len_max;
    out.ds.lengths.resize(static_cast<std::size_t>(n));
    out.ds.embeddings.assign(
        static_cast<std::size_t>(n) * spec.doc_len_max * spec.embedding_dim, 0.0f);
    out.ds.tokens.emplace(static_cast<std::size_t>(n));
    out.keyword_present.resize(static_cast<std::size_t>(n));

    const EmbeddingSpec espec{spec.embedding_dim, rng::derive(seed, 0x656d62ull)};
    std::vector<std::vector<float>> filler_cache(
        static_cast<std::size_t>(spec.filler_vocab_size));
    std::vector<std::vector<float>> keyword_cache(spec.keywords.size());
    auto cached = [&espec](std::vector<float>& slot, const std::string& tok) {
        if (slot.empty()) {
            const auto v = embed_token(tok, espec);
            slot.assign(v.begin(), v.end());
        }
        return std::span<const float>(slot);
    };

    for (int i = 0; i < n; ++i) {
        rng::Engine eng(rng::derive(seed, static_cast<std::uint64_t>(i),
                                    detail::kDocsTag));
        const int len = spec.doc_len_min +
                        static_cast<int>(eng.uniform_below(
                            static_cast<std::uint64_t>(spec.doc_len_max -
                                                       spec.doc_len_min + 1)));
        auto& toks = (*out.ds.tokens)[static_cast<std::size_t>(i)];
        toks.resize(static_cast<std::size_t>(len));
        std::vector<int> filler_ids(static_cast<std::size_t>(len));
        for (auto& id : filler_ids)
            id = static_cast<int>(eng.uniform_below(
                static_cast<std::uint64_t>(spec.filler_vocab_size)));

        const bool include = eng.bernoulli(spec.keyword_inclusion_prob);
        std::set<int> keyword_slots;
        std::vector<int> keyword_choice;
        if (include) {
            const int m = std::min(len, 1 + (eng.bernoulli(0.5) ? 1 : 0));
            while (static_cast<int>(keyword_slots.size()) < m)
                keyword_slots.insert(static_cast<int>(
                    eng.uniform_below(static_cast<std::uint64_t>(len))));
            for (int k = 0; k < m; ++k)
                keyword_choice.push_back(static_cast<int>(
                    eng.uniform_below(spec.keywords.size())));
        }
        out.keyword_present[static_cast<std::size_t>(i)] = include ? 1 : 0;

        float* seq = out.ds.embeddings.data() +
                     static_cast<std::size_t>(i) * spec.doc_len_max *
                         spec.embedding_dim;
        int next_keyword = 0;
        for (int j = 0; j < len; ++j) {
            std::span<const float> emb;
            if (keyword_slots.count(j)) {
                const int kw = keyword_choice[static_cast<std::size_t>(next_keyword++)];
                toks[static_cast<std::size_t>(j)] = spec.keywords[static_cast<std::size_t>(kw)];
                emb = cached(keyword_cache[static_cast<std::size_t>(kw)],
                             spec.keywords[static_cast<std::size_t>(kw)]);
            } else {
                const int f = filler_ids[static_cast<std::size_t>(j)];
                toks[static_cast<std::size_t>(j)] = detail::filler_token(
                    static_cast<std::uint64_t>(f));
                emb = cached(filler_cache[static_cast<std::size_t>(f)],
                             toks[static_cast<std::size_t>(j)]);
            }
            std::copy(emb.begin(), emb.end(),
                      seq + static_cast<std::size_t>(j) * spec.embedding_dim);
        }
        out.ds.lengths[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(len);
    }

    resample_assignments(out, spec, seed, maps);
    return out;
}

// ---- directory format ----
// meta.json {n, d, l_max, has_tokens, version:1}; embeddings.f32 row-major
// n*l_max*d little-endian floats; lengths.u32, treatment.u8, outcome.f32
// flat arrays; optional tokens.jsonl (one JSON array per line).

namespace detail {

template <typename T>
void write_flat(const std::filesystem::path& p, const std::vector<T>& v) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + p.string());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!out) throw std::runtime_error("save_dataset: write failed for " + p.string());
}

template <typename T>
std::vector<T> read_flat(const std::filesystem::path& p, std::size_t count,
                         const char* field) {
    std::ifstream in(p, std::ios::binary);
    if (!in)
        throw std::runtime_error(std::string("load_dataset: missing ") + field +
                                 " (" + p.string() + ")");
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != count * sizeof(T))
        throw std::runtime_error(std::string("load_dataset: ") + field +
                                 ": truncated or oversized payload (expected " +
                                 std::to_string(count * sizeof(T)) + " bytes, got " +
                                 std::to_string(bytes) + ")");
    in.seekg(0);
    std::vector<T> v(count);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(bytes));
    if (!in)
        throw std::runtime_error(std::string("load_dataset: ") + field + ": read failed");
    return v;
}

}  // namespace detail

inline void save_dataset(const TokenSequenceDataset& ds,
                         const std::filesystem::path& dir) {
    validate(ds);
    std::filesystem::create_directories(dir);
    nlohmann::json meta{{"n", ds.n},
                        {"d", ds.d},
                        {"l_max", ds.l_max},
                        {"has_tokens", ds.tokens.has_value()},
                        {"version", 1}};
    {
        std::ofstream out(dir / "meta.json");
        if (!out)
            throw std::runtime_error("save_dataset: cannot open meta.json in " +
                                     dir.string());
        out << meta.dump(2) << '\n';
    }
    detail::write_flat(dir / "embeddings.f32", ds.embeddings);
    detail::write_flat(dir / "lengths.u32", ds.lengths);
    detail::write_flat(dir / "treatment.u8", ds.treatment);
    detail::write_flat(dir / "outcome.f32", ds.outcome);
    if (ds.tokens) {
        std::ofstream out(dir / "tokens.jsonl");
        if (!out)
            throw std::runtime_error("save_dataset: cannot open tokens.jsonl");
        for (const auto& row : *ds.tokens) out << nlohmann::json(row).dump() << '\n';
    }
}

inline TokenSequenceDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in)
        throw std::runtime_error("load_dataset: missing meta.json in " + dir.string());
    nlohmann::json meta = nlohmann::json::parse(meta_in, nullptr, false);
    if (meta.is_discarded())
        throw std::runtime_error("load_dataset: meta.json is not valid JSON");
    for (const char* key : {"n", "d", "l_max", "has_tokens", "version"})
        if (!meta.contains(key))
            throw std::runtime_error(std::string("load_dataset: meta.json missing '") +
                                     key + "'");
    if (meta["version"].get<int>() != 1)
        throw std::runtime_error("load_dataset: meta.json version mismatch (want 1)");

    TokenSequenceDataset ds;
    ds.n = meta["n"].get<int>();
    ds.d = meta["d"].get<int>();
    ds.l_max = meta["l_max"].get<int>();
    if (ds.n < 0 || ds.d < 1 || ds.l_max < 1)
        throw std::runtime_error("load_dataset: meta.json has invalid shape fields");
    const auto nf = static_cast<std::size_t>(ds.n);
    ds.embeddings = detail::read_flat<float>(
        dir / "embeddings.f32", nf * ds.l_max * ds.d, "embeddings.f32");
    ds.lengths = detail::read_flat<std::uint32_t>(dir / "lengths.u32", nf, "lengths.u32");
    ds.treatment = detail::read_flat<std::uint8_t>(dir / "treatment.u8", nf, "treatment.u8");
    ds.outcome = detail::read_flat<float>(dir / "outcome.f32", nf, "outcome.f32");
    if (meta["has_tokens"].get<bool>()) {
        std::ifstream in(dir / "tokens.jsonl");
        if (!in) throw std::runtime_error("load_dataset: missing tokens.jsonl");
        std::vector<std::vector<std::string>> tokens;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
            if (row.is_discarded() || !row.is_array())
                throw std::runtime_error("load_dataset: tokens.jsonl has a malformed line");
            tokens.push_back(row.get<std::vector<std::string>>());
        }
        if (tokens.size() != nf)
            throw std::runtime_error("load_dataset: tokens.jsonl row count mismatch");
        ds.tokens = std::move(tokens);
    }
    validate(ds);
    return ds;
}

}  // namespace catr::dataset
