#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/embedding_table.hpp"
#include "mplex/rng.hpp"

namespace mplex {

// Probabilities at or below this are dropped from the sampling support.
inline constexpr double kMinSupportProb = 1e-12;

class ProbVector {
public:
    ProbVector() = default;
    explicit ProbVector(std::vector<double> probs) : probs_(std::move(probs)) { validate(); }

    std::size_t size() const { return probs_.size(); }
    double operator[](std::size_t v) const { return probs_[v]; }
    std::span<const double> values() const { return probs_; }

    void validate() const {
        if (probs_.empty()) {
            throw InvariantError("probability vector is empty");
        }
        double s = 0.0;
        for (double p : probs_) {
            if (!std::isfinite(p) || p < 0.0) {
                throw InvariantError("probability vector has a negative or non-finite entry");
            }
            s += p;
        }
        if (std::abs(s - 1.0) > kSimplexTolerance) {
            throw InvariantError("probability vector does not sum to 1");
        }
    }

    // Lowest id wins ties.
    TokenId argmax() const {
        return static_cast<TokenId>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
    }

private:
    std::vector<double> probs_;
};

enum class AggregationScheme { Uniform, Reweighted };

inline const char* to_string(AggregationScheme s) {
    return s == AggregationScheme::Uniform ? "uniform" : "reweighted";
}

inline AggregationScheme parse_scheme(const std::string& s) {
    if (s == "uniform") {
        return AggregationScheme::Uniform;
    }
    if (s == "reweighted") {
        return AggregationScheme::Reweighted;
    }
    throw ConfigError("unknown aggregation scheme '" + s + "' (expected uniform|reweighted)");
}

struct MultiplexSample {
    TokenSeq token_ids;
    std::vector<double> logprobs;

    std::size_t width() const { return token_ids.size(); }
};

// s_i in sparse form: multiplicity of every distinct sampled token.
struct Selection {
    std::vector<std::pair<TokenId, int>> counts;  // sorted by token id
    int K = 0;

    std::size_t distinct() const { return counts.size(); }
    double share(TokenId v) const {
        for (const auto& [t, m] : counts) {
            if (t == v) {
                return static_cast<double>(m) / K;
            }
        }
        return 0.0;
    }
};

// Temperature softmax followed by nucleus truncation. Ties at the nucleus
// boundary are taken in ascending token-id order.
template <class T>
ProbVector shape_distribution(std::span<const T> logits, double temperature, double top_p) {
    if (!(temperature > 0.0)) {
        throw ParameterError("temperature must be positive");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw ParameterError("top_p must lie in (0, 1]");
    }
    const std::size_t n = logits.size();
    double max_z = -std::numeric_limits<double>::infinity();
    for (const T& l : logits) {
        const double x = static_cast<double>(l);
        if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
            throw ParameterError("logits must be finite");
        }
        max_z = std::max(max_z, x / temperature);
    }
    if (n == 0 || max_z == -std::numeric_limits<double>::infinity()) {
        throw DegenerateDistributionError("all logits are -inf");
    }
    std::vector<double> p(n);
    double total = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
        p[v] = std::exp(static_cast<double>(logits[v]) / temperature - max_z);
        total += p[v];
    }
    for (auto& x : p) {
        x /= total;
    }

    if (top_p < 1.0) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
        double cum = 0.0;
        std::size_t keep = 0;
        while (keep < n && cum < top_p) {
            cum += p[order[keep]];
            ++keep;
        }
        for (std::size_t i = keep; i < n; ++i) {
            p[order[i]] = 0.0;
        }
    }

    double kept = 0.0;
    for (auto& x : p) {
        if (x <= kMinSupportProb) {
            x = 0.0;
        }
        kept += x;
    }
    for (auto& x : p) {
        x /= kept;
    }
    return ProbVector(std::move(p));
}

// Renormalized distribution with one token removed from the support.
inline ProbVector mask_token(const ProbVector& dist, TokenId v) {
    std::vector<double> p(dist.values().begin(), dist.values().end());
    if (v < 0 || static_cast<std::size_t>(v) >= p.size()) {
        throw RangeError("masked token outside vocabulary");
    }
    p[v] = 0.0;
    double s = 0.0;
    for (double x : p) {
        s += x;
    }
    if (!(s > 0.0)) {
        throw DegenerateDistributionError("masking removes all probability mass");
    }
    for (auto& x : p) {
        x /= s;
    }
    return ProbVector(std::move(p));
}

// One inverse-CDF draw; consumes exactly one uniform from rng.
inline TokenId draw_token(const ProbVector& dist, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    TokenId last = -1;
    for (std::size_t v = 0; v < dist.size(); ++v) {
        if (dist[v] <= 0.0) {
            continue;
        }
        cum += dist[v];
        last = static_cast<TokenId>(v);
        if (u < cum) {
            return last;
        }
    }
    return last;
}

inline MultiplexSample sample_multiplex(const ProbVector& dist, int K, Rng& rng) {
    if (K < 1) {
        throw ParameterError("multiplex width K must be >= 1");
    }
    MultiplexSample s;
    s.token_ids.reserve(K);
    s.logprobs.reserve(K);
    for (int j = 0; j < K; ++j) {
        const TokenId v = draw_token(dist, rng);
        s.token_ids.push_back(v);
        s.logprobs.push_back(std::log(dist[v]));
    }
    return s;
}

inline Selection build_selection(const MultiplexSample& sample) {
    Selection sel;
    sel.K = static_cast<int>(sample.width());
    TokenSeq sorted = sample.token_ids;
    std::sort(sorted.begin(), sorted.end());
    for (TokenId v : sorted) {
        if (!sel.counts.empty() && sel.counts.back().first == v) {
            ++sel.counts.back().second;
        } else {
            sel.counts.emplace_back(v, 1);
        }
    }
    return sel;
}

// s_i (.) w_i exactly as written, before any renormalization. Under Reweighted
// with duplicate samples these entries do not sum to one.
inline std::vector<CoefficientMap::Entry> literal_coefficients(const Selection& sel, const ProbVector& dist,
                                                               AggregationScheme scheme) {
    std::vector<CoefficientMap::Entry> raw;
    raw.reserve(sel.counts.size());
    double support_mass = 0.0;
    for (const auto& [v, m] : sel.counts) {
        if (v < 0 || static_cast<std::size_t>(v) >= dist.size()) {
            throw RangeError("selected token outside vocabulary");
        }
        if (!(dist[v] > 0.0)) {
            throw InvariantError("sampled token " + std::to_string(v) + " has zero probability");
        }
        support_mass += dist[v];
    }
    for (const auto& [v, m] : sel.counts) {
        const double share = static_cast<double>(m) / sel.K;
        if (scheme == AggregationScheme::Uniform) {
            raw.emplace_back(v, share);
        } else {
            raw.emplace_back(v, share * (sel.K * (dist[v] / support_mass)));
        }
    }
    return raw;
}

inline CoefficientMap compute_coefficients(const Selection& sel, const ProbVector& dist, AggregationScheme scheme) {
    if (sel.K < 1 || sel.counts.empty()) {
        throw ParameterError("empty selection");
    }
    if (scheme == AggregationScheme::Uniform) {
        return CoefficientMap(literal_coefficients(sel, dist, scheme));
    }
    // raw_v = (m_v/K) * K * pi(v)/Z  ==  m_v * pi(v)/Z
    double support_mass = 0.0;
    for (const auto& [v, m] : sel.counts) {
        if (v < 0 || static_cast<std::size_t>(v) >= dist.size()) {
            throw RangeError("selected token outside vocabulary");
        }
        if (!(dist[v] > 0.0)) {
            throw InvariantError("sampled token " + std::to_string(v) + " has zero probability");
        }
        support_mass += dist[v];
    }
    std::vector<CoefficientMap::Entry> out;
    double total = 0.0;
    for (const auto& [v, m] : sel.counts) {
        const double raw = m * (dist[v] / support_mass);
        out.emplace_back(v, raw);
        total += raw;
    }
    for (auto& e : out) {
        e.second /= total;
    }
    return CoefficientMap(std::move(out));
}

template <class T>
std::vector<T> make_multiplex_token(const CoefficientMap& coeffs, const EmbeddingTable<T>& table) {
    return table.aggregate(coeffs);
}

inline double step_logprob(const MultiplexSample& sample) {
    double s = 0.0;
    for (double lp : sample.logprobs) {
        s += lp;
    }
    return s;
}

struct StepEntropy {
    double step = 0.0;   // H(pi) in nats
    double joint = 0.0;  // H over the K i.i.d. draws = K * H(pi)
};

inline double shannon_entropy(const ProbVector& dist) {
    double h = 0.0;
    for (std::size_t v = 0; v < dist.size(); ++v) {
        if (dist[v] > 0.0) {
            h -= dist[v] * std::log(dist[v]);
        }
    }
    return h;
}

inline StepEntropy step_entropy(const ProbVector& dist, int K) {
    if (K < 1) {
        throw ParameterError("multiplex width K must be >= 1");
    }
    const double h = shannon_entropy(dist);
    return {h, K * h};
}

}  // namespace mplex
