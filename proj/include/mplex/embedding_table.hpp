#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/rng.hpp"

namespace mplex {

inline constexpr double kSimplexTolerance = 1e-9;

// Sparse token-id -> coefficient map, kept sorted by token id.
class CoefficientMap {
public:
    using Entry = std::pair<TokenId, double>;

    CoefficientMap() = default;
    explicit CoefficientMap(std::vector<Entry> entries) : entries_(std::move(entries)) {
        std::sort(entries_.begin(), entries_.end(),
                  [](const Entry& a, const Entry& b) { return a.first < b.first; });
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    double at(TokenId v) const {
        for (const auto& [t, a] : entries_) {
            if (t == v) {
                return a;
            }
        }
        return 0.0;
    }

    double sum() const {
        double s = 0.0;
        for (const auto& e : entries_) {
            s += e.second;
        }
        return s;
    }

    // Throws InvariantError unless entries are distinct, strictly positive,
    // sum to one and (when max_entries > 0) number at most max_entries.
    void validate(std::size_t max_entries = 0) const {
        if (entries_.empty()) {
            throw InvariantError("coefficient map is empty");
        }
        if (max_entries > 0 && entries_.size() > max_entries) {
            throw InvariantError("coefficient map has more than K entries");
        }
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!(entries_[i].second > 0.0) || !std::isfinite(entries_[i].second)) {
                throw InvariantError("coefficient for token " + std::to_string(entries_[i].first) +
                                     " is not strictly positive");
            }
            if (i > 0 && entries_[i].first == entries_[i - 1].first) {
                throw InvariantError("duplicate token in coefficient map");
            }
        }
        if (std::abs(sum() - 1.0) > kSimplexTolerance) {
            throw InvariantError("coefficients do not sum to 1");
        }
    }

    friend bool operator==(const CoefficientMap&, const CoefficientMap&) = default;

private:
    std::vector<Entry> entries_;
};

// Vocabulary embedding matrix E (V x d, row v is e(v)). Shared by the policy
// model as both input embedding and tied output head.
template <class T>
class EmbeddingTable {
public:
    EmbeddingTable() = default;

    EmbeddingTable(int vocab_size, int dim) : vocab_(vocab_size), dim_(dim) {
        if (vocab_size < 4 || dim < 1) {
            throw ParameterError("embedding table needs vocab_size >= 4 and dim >= 1");
        }
        weights_.assign(static_cast<std::size_t>(vocab_size) * dim, T(0));
    }

    EmbeddingTable(int vocab_size, int dim, std::vector<T> weights) : EmbeddingTable(vocab_size, dim) {
        if (weights.size() != weights_.size()) {
            throw ParameterError("embedding weights have wrong size");
        }
        weights_ = std::move(weights);
        check_finite();
    }

    // Uniform in [-1/sqrt(d), +1/sqrt(d)].
    static EmbeddingTable random(int vocab_size, int dim, Rng& rng) {
        EmbeddingTable t(vocab_size, dim);
        const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
        for (auto& w : t.weights_) {
            w = static_cast<T>(rng.uniform(-bound, bound));
        }
        return t;
    }

    int vocab_size() const { return vocab_; }
    int dim() const { return dim_; }

    std::span<const T> row(TokenId v) const {
        check_token(v);
        return {weights_.data() + static_cast<std::size_t>(v) * dim_, static_cast<std::size_t>(dim_)};
    }
    std::span<T> row(TokenId v) {
        check_token(v);
        return {weights_.data() + static_cast<std::size_t>(v) * dim_, static_cast<std::size_t>(dim_)};
    }

    std::span<const T> weights() const { return weights_; }
    std::span<T> weights() { return weights_; }

    std::vector<T> embed_token(TokenId v) const {
        auto r = row(v);
        return {r.begin(), r.end()};
    }

    // c = E^T a for a simplex coefficient map; O(K d).
    std::vector<T> aggregate(const CoefficientMap& coeffs) const {
        coeffs.validate();
        std::vector<double> acc(dim_, 0.0);
        for (const auto& [v, a] : coeffs.entries()) {
            auto r = row(v);
            for (int j = 0; j < dim_; ++j) {
                acc[j] += a * static_cast<double>(r[j]);
            }
        }
        return {acc.begin(), acc.end()};
    }

    // Dense mixture over the whole vocabulary (Soft Thinking baseline only).
    std::vector<T> aggregate_dense(std::span<const double> probs) const {
        if (probs.size() != static_cast<std::size_t>(vocab_)) {
            throw ParameterError("dense mixture needs one weight per vocabulary entry");
        }
        std::vector<double> acc(dim_, 0.0);
        for (int v = 0; v < vocab_; ++v) {
            if (probs[v] == 0.0) {
                continue;
            }
            auto r = row(v);
            for (int j = 0; j < dim_; ++j) {
                acc[j] += probs[v] * static_cast<double>(r[j]);
            }
        }
        return {acc.begin(), acc.end()};
    }

    void check_finite() const {
        for (const auto& w : weights_) {
            if (!std::isfinite(static_cast<double>(w))) {
                throw InvariantError("embedding table contains a non-finite value");
            }
        }
    }

private:
    void check_token(TokenId v) const {
        if (v < 0 || v >= vocab_) {
            throw RangeError("token id " + std::to_string(v) + " outside vocabulary of size " +
                             std::to_string(vocab_));
        }
    }

    int vocab_ = 0;
    int dim_ = 0;
    std::vector<T> weights_;
};

}  // namespace mplex
