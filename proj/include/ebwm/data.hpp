#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ebwm/config.hpp"
#include "ebwm/ops.hpp"
#include "ebwm/tensor.hpp"

namespace ebwm {

// defined in objectives.hpp; declared here so copy_baseline_score can live
// with the rest of the data machinery
template <class S>
Tensor<S> smooth_l1(const Tensor<S>& pred, const Tensor<S>& target, double beta);

// Teacher-forced layout: entries 0..T-1 are the context x(1..T); the entry at
// position t+1 is the ground-truth next state for position t.
template <class S>
struct SequenceBatch {
    Mode mode = Mode::continuous;
    int64_t batch = 0;    // B
    int64_t context = 0;  // T

    Tensor<S> features;           // [B, T+1, F] (continuous)
    std::vector<int64_t> tokens;  // B*(T+1) row-major (discrete)

    Tensor<S> context_features() const { return slice(features, 1, 0, context); }
    Tensor<S> target_features() const { return slice(features, 1, 1, context); }

    std::vector<int64_t> context_tokens() const { return token_window(0); }
    std::vector<int64_t> target_tokens() const { return token_window(1); }

private:
    std::vector<int64_t> token_window(int64_t offset) const {
        std::vector<int64_t> out(static_cast<size_t>(batch * context));
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t t = 0; t < context; ++t) {
                out[static_cast<size_t>(b * context + t)] =
                    tokens[static_cast<size_t>(b * (context + 1) + t + offset)];
            }
        }
        return out;
    }
};

struct ContinuousSpec {
    int64_t feature_dim = 16;
    int64_t length = 16;  // T; the generator emits T+1 states per sequence
    int64_t batch = 16;
    double gamma = 0.9;            // temporal consistency in [0,1]
    std::string mixing = "none";   // none | orthogonal
    uint64_t seed = 33;
};

namespace detail {

// Haar-ish random orthogonal matrix: QR of a Gaussian matrix by modified
// Gram-Schmidt, columns sign-fixed on the R diagonal.
inline std::vector<double> random_orthogonal(int64_t n, Rng& rng) {
    std::vector<double> a(static_cast<size_t>(n * n));
    for (auto& v : a) v = rng.normal();
    std::vector<double> q(static_cast<size_t>(n * n), 0.0);
    for (int64_t col = 0; col < n; ++col) {
        std::vector<double> v(static_cast<size_t>(n));
        for (int64_t r = 0; r < n; ++r) v[r] = a[r * n + col];
        for (int64_t prev = 0; prev < col; ++prev) {
            double dot = 0.0;
            for (int64_t r = 0; r < n; ++r) dot += q[r * n + prev] * v[r];
            for (int64_t r = 0; r < n; ++r) v[r] -= dot * q[r * n + prev];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        const double sign = v[col] >= 0.0 ? 1.0 : -1.0;  // R diagonal positive
        for (int64_t r = 0; r < n; ++r) q[r * n + col] = v[r] / (norm * sign);
    }
    return q;
}

}  // namespace detail

// Latent AR(1) with stationary unit variance per coordinate:
//   u_1 ~ N(0, I),  u_{t+1} = gamma * u_t + sqrt(1 - gamma^2) * eps_t.
// Optionally mixed by a fixed random orthogonal map so coordinates are
// entangled while squared errors are preserved.
template <class S>
SequenceBatch<S> gen_continuous(const ContinuousSpec& spec) {
    if (spec.gamma < 0.0 || spec.gamma > 1.0) {
        throw ConfigError("gen_continuous: gamma must lie in [0,1]");
    }
    Rng rng(spec.seed);
    const int64_t B = spec.batch, T = spec.length, F = spec.feature_dim;
    const double g = spec.gamma;
    const double drive = std::sqrt(std::max(0.0, 1.0 - g * g));

    std::vector<double> u(static_cast<size_t>(B * (T + 1) * F));
    for (int64_t b = 0; b < B; ++b) {
        double* seq = u.data() + b * (T + 1) * F;
        for (int64_t f = 0; f < F; ++f) seq[f] = rng.normal();
        for (int64_t t = 1; t <= T; ++t) {
            for (int64_t f = 0; f < F; ++f) {
                seq[t * F + f] = g * seq[(t - 1) * F + f] + drive * rng.normal();
            }
        }
    }

    if (spec.mixing == "orthogonal") {
        Rng mix_rng(spec.seed ^ 0x5eed5eedULL);
        const std::vector<double> q = detail::random_orthogonal(F, mix_rng);
        std::vector<double> mixed(u.size());
        const int64_t rows = B * (T + 1);
        for (int64_t r = 0; r < rows; ++r) {
            const double* src = u.data() + r * F;
            double* dst = mixed.data() + r * F;
            for (int64_t j = 0; j < F; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < F; ++i) acc += src[i] * q[i * F + j];
                dst[j] = acc;
            }
        }
        u.swap(mixed);
    } else if (spec.mixing != "none") {
        throw ConfigError("gen_continuous: mixing must be 'none' or 'orthogonal'");
    }

    SequenceBatch<S> out;
    out.mode = Mode::continuous;
    out.batch = B;
    out.context = T;
    std::vector<S> vals(u.size());
    for (size_t i = 0; i < u.size(); ++i) vals[i] = static_cast<S>(u[i]);
    out.features = Tensor<S>::from({B, T + 1, F}, std::move(vals));
    return out;
}

// SmoothL1(beta=1) of predicting x(t+1) = x(t): the floor induced by temporal
// consistency that a learned model has to beat.
template <class S>
Tensor<S> copy_baseline_score(const SequenceBatch<S>& batch) {
    if (batch.mode != Mode::continuous) {
        throw ConfigError("copy_baseline_score: continuous mode only");
    }
    NoGradScope<S> pause;
    return smooth_l1(batch.context_features(), batch.target_features(), 1.0);
}

// ---------------------------------------------------------------------------
// byte-level text pipeline (V = 256, identity byte->id map)
// ---------------------------------------------------------------------------

inline std::vector<int64_t> tokenize_bytes(const std::string& text) {
    std::vector<int64_t> ids(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
        ids[i] = static_cast<int64_t>(static_cast<unsigned char>(text[i]));
    }
    return ids;
}

inline std::string detokenize_bytes(const std::vector<int64_t>& ids) {
    std::string out(ids.size(), '\0');
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] > 255) {
            throw ValueError(strf("detokenize: id %lld outside byte range",
                                  static_cast<long long>(ids[i])));
        }
        out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
    }
    return out;
}

inline std::vector<int64_t> read_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("corpus: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    return tokenize_bytes(text);
}

// B seeded random windows of length T+1 over the corpus.
template <class S>
SequenceBatch<S> batch_text(const std::vector<int64_t>& corpus, int64_t context,
                            int64_t batch, uint64_t seed) {
    const int64_t n = static_cast<int64_t>(corpus.size());
    if (n <= context + 1) {
        throw ValueError(strf("batch_text: corpus of %lld tokens too short for context %lld",
                              static_cast<long long>(n), static_cast<long long>(context)));
    }
    Rng rng(seed);
    SequenceBatch<S> out;
    out.mode = Mode::discrete;
    out.batch = batch;
    out.context = context;
    out.tokens.resize(static_cast<size_t>(batch * (context + 1)));
    const int64_t max_start = n - (context + 1);
    for (int64_t b = 0; b < batch; ++b) {
        const int64_t start = rng.below(max_start + 1);
        for (int64_t t = 0; t <= context; ++t) {
            out.tokens[static_cast<size_t>(b * (context + 1) + t)] = corpus[start + t];
        }
    }
    return out;
}

// Empirical byte-level unigram entropy in nats; the bar a context model has
// to clear to demonstrate it uses the context at all.
inline double unigram_entropy(const std::vector<int64_t>& corpus) {
    if (corpus.empty()) throw ValueError("unigram_entropy: empty corpus");
    std::vector<int64_t> counts(256, 0);
    for (int64_t id : corpus) {
        if (id < 0 || id > 255) throw ValueError("unigram_entropy: id outside byte range");
        counts[static_cast<size_t>(id)] += 1;
    }
    const double n = static_cast<double>(corpus.size());
    double h = 0.0;
    for (int64_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h;
}

// Deterministic word-salad corpus: Zipf-weighted vocabulary, small sentences.
// Stands in for a real text file in tests and demos; any byte file works.
inline std::string synthetic_text(int64_t bytes, uint64_t seed) {
    static const std::vector<std::string> words = {
        "the",    "of",     "and",   "to",     "in",     "a",      "is",
        "that",   "for",    "it",    "as",     "was",    "with",   "be",
        "by",     "on",     "not",   "he",     "this",   "are",    "or",
        "his",    "from",   "at",    "which",  "but",    "have",   "an",
        "had",    "they",   "you",   "were",   "their",  "one",    "all",
        "we",     "can",    "her",   "has",    "there",  "been",   "if",
        "more",   "when",   "will",  "would",  "who",    "so",     "no",
        "she",    "other",  "its",   "may",    "these",  "what",   "them",
        "some",   "him",    "time",  "into",   "only",   "could",  "state",
        "years",  "two",    "world", "then",   "out",    "first",  "how",
        "energy", "model",  "system", "value", "change", "water",  "light",
        "matter", "field",  "force",  "space", "point",  "small",  "large",
        "work",   "between", "under", "over",  "number", "part",   "form",
        "found",  "made",   "given",  "since", "through", "before", "after",
        "within", "against", "because", "toward", "study", "result", "effect"};
    Rng rng(seed);
    std::string out;
    out.reserve(static_cast<size_t>(bytes) + 64);
    // Zipf cumulative weights
    std::vector<double> cum(words.size());
    double total = 0.0;
    for (size_t i = 0; i < words.size(); ++i) {
        total += 1.0 / static_cast<double>(i + 1);
        cum[i] = total;
    }
    while (static_cast<int64_t>(out.size()) < bytes) {
        const int64_t sentence_len = 4 + rng.below(9);
        for (int64_t w = 0; w < sentence_len; ++w) {
            const double r = rng.uniform() * total;
            size_t pick = static_cast<size_t>(
                std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
            if (pick >= words.size()) pick = words.size() - 1;
            std::string word = words[pick];
            if (w == 0) word[0] = static_cast<char>(std::toupper(word[0]));
            out += word;
            out += (w + 1 == sentence_len) ? ". " : " ";
        }
    }
    out.resize(static_cast<size_t>(bytes));
    return out;
}

// ---------------------------------------------------------------------------
// continuous fixture export: flat little-endian f32 payload with a small
// header (dims, gamma, seed)
// ---------------------------------------------------------------------------

template <class S>
void export_continuous_fixture(const std::string& path, const SequenceBatch<S>& batch,
                               const ContinuousSpec& spec) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("fixture: cannot open '" + path + "' for writing");
    auto put_u32 = [&](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(static_cast<uint32_t>(batch.batch));
    put_u32(static_cast<uint32_t>(batch.context + 1));
    put_u32(static_cast<uint32_t>(batch.features.shape().back()));
    const float gamma = static_cast<float>(spec.gamma);
    uint32_t gbits;
    std::memcpy(&gbits, &gamma, 4);
    put_u32(gbits);
    put_u32(static_cast<uint32_t>(spec.seed & 0xffffffffULL));
    put_u32(static_cast<uint32_t>(spec.seed >> 32));
    for (int64_t i = 0; i < batch.features.numel(); ++i) {
        const float v = static_cast<float>(batch.features.data()[i]);
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(bits);
    }
    if (!os) throw Error("fixture: write failed for '" + path + "'");
}

}  // namespace ebwm
