#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/embedding_table.hpp"
#include "mplex/multiplex_sampler.hpp"
#include "mplex/policy_model.hpp"
#include "mplex/rng.hpp"
#include "mplex/task_suite.hpp"

namespace mplex {

enum class DecodeMode { Multiplex, DiscreteCoT, SoftThinking };
enum class StopRule { Argmax, AnySampled };
enum class Termination { Stopped, ThinkBudgetExhausted, AnswerBudgetExhausted };
enum class DiversityClass { Consensus, Majority21, AllDistinct, Other, Soft };

inline const char* to_string(DecodeMode m) {
    switch (m) {
        case DecodeMode::Multiplex:
            return "multiplex";
        case DecodeMode::DiscreteCoT:
            return "discrete";
        case DecodeMode::SoftThinking:
            return "soft";
    }
    return "?";
}
inline DecodeMode parse_mode(const std::string& s) {
    if (s == "multiplex") {
        return DecodeMode::Multiplex;
    }
    if (s == "discrete") {
        return DecodeMode::DiscreteCoT;
    }
    if (s == "soft") {
        return DecodeMode::SoftThinking;
    }
    throw ConfigError("unknown mode '" + s + "' (expected multiplex|discrete|soft)");
}
inline const char* to_string(StopRule r) { return r == StopRule::Argmax ? "argmax" : "any-sampled"; }
inline StopRule parse_stop_rule(const std::string& s) {
    if (s == "argmax") {
        return StopRule::Argmax;
    }
    if (s == "any-sampled") {
        return StopRule::AnySampled;
    }
    throw ConfigError("unknown stop rule '" + s + "' (expected argmax|any-sampled)");
}
inline const char* to_string(Termination t) {
    switch (t) {
        case Termination::Stopped:
            return "stopped";
        case Termination::ThinkBudgetExhausted:
            return "think_budget_exhausted";
        case Termination::AnswerBudgetExhausted:
            return "answer_budget_exhausted";
    }
    return "?";
}
inline Termination parse_termination(const std::string& s) {
    if (s == "stopped") {
        return Termination::Stopped;
    }
    if (s == "think_budget_exhausted") {
        return Termination::ThinkBudgetExhausted;
    }
    if (s == "answer_budget_exhausted") {
        return Termination::AnswerBudgetExhausted;
    }
    throw SchemaError("unknown termination '" + s + "'");
}
inline const char* to_string(DiversityClass c) {
    switch (c) {
        case DiversityClass::Consensus:
            return "consensus";
        case DiversityClass::Majority21:
            return "majority21";
        case DiversityClass::AllDistinct:
            return "distinct";
        case DiversityClass::Other:
            return "other";
        case DiversityClass::Soft:
            return "soft";
    }
    return "?";
}

// Multiset signature of sample multiplicities (sorted descending) plus the
// named class it falls into.
struct Diversity {
    DiversityClass cls = DiversityClass::Consensus;
    std::vector<int> signature;

    // "consensus", "majority21", "distinct", "soft", or e.g. "2+1+1".
    std::string label() const {
        if (cls != DiversityClass::Other) {
            return to_string(cls);
        }
        std::string s;
        for (std::size_t i = 0; i < signature.size(); ++i) {
            s += (i ? "+" : "") + std::to_string(signature[i]);
        }
        return s;
    }

    friend bool operator==(const Diversity&, const Diversity&) = default;
};

inline Diversity classify_diversity(const Selection& sel) {
    Diversity d;
    for (const auto& [v, m] : sel.counts) {
        d.signature.push_back(m);
    }
    std::sort(d.signature.rbegin(), d.signature.rend());
    if (d.signature.size() <= 1) {
        d.cls = DiversityClass::Consensus;
    } else if (sel.K == 3 && d.signature == std::vector<int>{2, 1}) {
        d.cls = DiversityClass::Majority21;
    } else if (static_cast<int>(d.signature.size()) == sel.K) {
        d.cls = DiversityClass::AllDistinct;
    } else {
        d.cls = DiversityClass::Other;
    }
    return d;
}

inline Diversity parse_diversity(const std::string& s) {
    Diversity d;
    if (s == "consensus" || s == "majority21" || s == "distinct" || s == "soft") {
        d.cls = s == "consensus"    ? DiversityClass::Consensus
                : s == "majority21" ? DiversityClass::Majority21
                : s == "distinct"   ? DiversityClass::AllDistinct
                                    : DiversityClass::Soft;
        return d;
    }
    d.cls = DiversityClass::Other;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t end = s.find('+', pos);
        if (end == std::string::npos) {
            end = s.size();
        }
        try {
            d.signature.push_back(std::stoi(s.substr(pos, end - pos)));
        } catch (const std::exception&) {
            throw SchemaError("bad diversity label '" + s + "'");
        }
        pos = end + 1;
    }
    if (d.signature.empty()) {
        throw SchemaError("bad diversity label '" + s + "'");
    }
    return d;
}

struct RolloutConfig {
    int K = 3;
    double temperature = 1.0;
    double top_p = 1.0;
    int max_think = 16;
    int max_answer = 8;
    AggregationScheme scheme = AggregationScheme::Reweighted;
    DecodeMode mode = DecodeMode::Multiplex;
    StopRule stop_rule = StopRule::Argmax;
    // Use s (.) w without renormalizing to the simplex (audit/debug only).
    bool literal_coefficients = false;
    TokenId eot = Vocabulary::kEot;
    TokenId eos = Vocabulary::kEos;

    int width() const { return mode == DecodeMode::DiscreteCoT ? 1 : K; }

    void validate() const {
        if (K < 1) {
            throw ConfigError("K must be >= 1");
        }
        if (max_think < 1 || max_answer < 1) {
            throw ConfigError("think and answer budgets must be >= 1");
        }
        if (!(temperature > 0.0)) {
            throw ConfigError("temperature must be positive");
        }
        if (!(top_p > 0.0 && top_p <= 1.0)) {
            throw ConfigError("top_p must lie in (0, 1]");
        }
        if (eot == eos) {
            throw ConfigError("end-of-thinking and end-of-answer tokens must differ");
        }
    }
};

struct MultiplexStep {
    MultiplexSample sample;  // empty for Soft Thinking steps
    std::vector<CoefficientMap::Entry> coefficients;
    std::vector<double> token_vector;
    double dist_entropy = 0.0;
    Diversity diversity;
};

struct Trajectory {
    std::uint64_t episode_id = 0;
    std::uint64_t task_id = 0;
    RolloutConfig config;
    std::uint64_t policy_version = 0;
    TokenSeq prompt;
    std::vector<MultiplexStep> steps;
    // Under the any-sampled stop rule: the K draws that contained <eot>.
    MultiplexSample stop_sample;
    TokenSeq answer;
    std::vector<double> answer_logprobs;
    std::vector<double> answer_entropy;
    double total_logprob = 0.0;
    double reward = 0.0;
    Termination termination = Termination::Stopped;

    int think_len() const { return static_cast<int>(steps.size()); }
    int answer_len() const { return static_cast<int>(answer.size()); }
    bool reached_answer() const { return termination != Termination::ThinkBudgetExhausted; }

    // Mean shaped-distribution entropy over every emitted position.
    double mean_entropy() const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& st : steps) {
            s += st.dist_entropy;
            ++n;
        }
        for (double h : answer_entropy) {
            s += h;
            ++n;
        }
        return n == 0 ? 0.0 : s / n;
    }
};

// Argmax of the distribution is the end-of-thinking token (lowest id wins ties).
inline bool should_stop(const ProbVector& dist, TokenId eot) { return dist.argmax() == eot; }

namespace detail {

template <class T>
std::vector<T> combine_entries(const EmbeddingTable<T>& table, const std::vector<CoefficientMap::Entry>& entries) {
    std::vector<double> acc(table.dim(), 0.0);
    for (const auto& [v, a] : entries) {
        auto r = table.row(v);
        for (int j = 0; j < table.dim(); ++j) {
            acc[j] += a * static_cast<double>(r[j]);
        }
    }
    return {acc.begin(), acc.end()};
}

inline std::vector<CoefficientMap::Entry> dense_entries(const ProbVector& p) {
    std::vector<CoefficientMap::Entry> out;
    for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] > 0.0) {
            out.emplace_back(static_cast<TokenId>(v), p[v]);
        }
    }
    return out;
}

// Distribution the K thinking draws come from: under the argmax rule <eot>
// never enters an aggregation, so it is masked out of the support.
inline ProbVector thinking_distribution(const ProbVector& shaped, const RolloutConfig& cfg) {
    if (cfg.stop_rule == StopRule::Argmax && shaped[cfg.eot] > 0.0) {
        return mask_token(shaped, cfg.eot);
    }
    return shaped;
}

inline std::vector<CoefficientMap::Entry> step_coefficients(const Selection& sel, const ProbVector& dist,
                                                            const RolloutConfig& cfg) {
    if (cfg.literal_coefficients) {
        return literal_coefficients(sel, dist, cfg.scheme);
    }
    return compute_coefficients(sel, dist, cfg.scheme).entries();
}

}  // namespace detail

// Generates one trajectory: multiplex thinking until the stop criterion
// fires, then discrete answer decoding. All randomness comes from
// sub-streams derived from (seed, emitted-position index).
template <class T>
Trajectory rollout(const PolicyModel<T>& model, const TaskInstance& task, const RolloutConfig& cfg, std::uint64_t seed,
                   std::uint64_t episode_id = 0) {
    cfg.validate();
    const auto& E = model.embedding();
    const int n_ctx = model.config().n_ctx;
    if (static_cast<int>(task.prompt.size()) + cfg.max_answer > n_ctx) {
        throw LengthError("prompt does not fit the context window");
    }
    Trajectory tr;
    tr.episode_id = episode_id;
    tr.task_id = task.id;
    tr.config = cfg;
    tr.policy_version = model.version();
    tr.prompt = task.prompt;

    auto state = model.new_state();
    std::vector<T> logits(model.vocab_size());
    for (TokenId v : task.prompt) {
        model.step(state, E.row(v), logits);
    }
    const int K = cfg.width();
    std::uint64_t draw_index = 0;
    bool stopped = false;
    while (true) {
        const ProbVector shaped = shape_distribution<T>(logits, cfg.temperature, cfg.top_p);
        if ((cfg.mode == DecodeMode::SoftThinking || cfg.stop_rule == StopRule::Argmax) && should_stop(shaped, cfg.eot)) {
            stopped = true;
            break;
        }
        if (tr.think_len() >= cfg.max_think || state.length + 1 + cfg.max_answer > n_ctx) {
            break;
        }
        MultiplexStep st;
        st.dist_entropy = shannon_entropy(shaped);
        const ProbVector dist = detail::thinking_distribution(shaped, cfg);
        if (cfg.mode == DecodeMode::SoftThinking) {
            st.coefficients = detail::dense_entries(dist);
            st.diversity.cls = DiversityClass::Soft;
        } else {
            Rng rng(derive_seed(seed, {draw_index++}));
            st.sample = sample_multiplex(dist, K, rng);
            if (cfg.stop_rule == StopRule::AnySampled &&
                std::find(st.sample.token_ids.begin(), st.sample.token_ids.end(), cfg.eot) != st.sample.token_ids.end()) {
                tr.stop_sample = st.sample;
                tr.total_logprob += step_logprob(st.sample);
                stopped = true;
                break;
            }
            const Selection sel = build_selection(st.sample);
            st.coefficients = detail::step_coefficients(sel, dist, cfg);
            st.diversity = classify_diversity(sel);
            tr.total_logprob += step_logprob(st.sample);
        }
        const std::vector<T> vec = detail::combine_entries(E, st.coefficients);
        st.token_vector.assign(vec.begin(), vec.end());
        tr.steps.push_back(std::move(st));
        model.step(state, vec, logits);
    }

    if (!stopped) {
        tr.termination = Termination::ThinkBudgetExhausted;
        tr.reward = 0.0;
        return tr;
    }
    model.step(state, E.row(cfg.eot), logits);
    tr.termination = Termination::AnswerBudgetExhausted;
    for (int t = 0; t < cfg.max_answer; ++t) {
        const ProbVector dist = shape_distribution<T>(logits, cfg.temperature, cfg.top_p);
        Rng rng(derive_seed(seed, {draw_index++}));
        const TokenId y = draw_token(dist, rng);
        const double lp = std::log(dist[y]);
        tr.answer.push_back(y);
        tr.answer_logprobs.push_back(lp);
        tr.answer_entropy.push_back(shannon_entropy(dist));
        tr.total_logprob += lp;
        if (y == cfg.eos) {
            tr.termination = Termination::Stopped;
            break;
        }
        if (t + 1 < cfg.max_answer) {
            model.step(state, E.row(y), logits);
        }
    }
    tr.reward = verify(tr.answer, task);
    return tr;
}

// Replays a trajectory under the model's current parameters, rebuilding each
// multiplex token from the stored samples and freshly computed distributions,
// and returns the factorized log-probability.
template <class T>
double recompute_logprob(const PolicyModel<T>& model, const Trajectory& tr) {
    const auto& cfg = tr.config;
    const auto& E = model.embedding();
    auto state = model.new_state();
    std::vector<T> logits(model.vocab_size());
    for (TokenId v : tr.prompt) {
        model.step(state, E.row(v), logits);
    }
    double total = 0.0;
    auto sample_logprob = [&](const MultiplexSample& s, const ProbVector& dist) {
        double lp = 0.0;
        for (TokenId v : s.token_ids) {
            if (v < 0 || static_cast<std::size_t>(v) >= dist.size() || !(dist[v] > 0.0)) {
                throw ReplayMismatchError("stored token " + std::to_string(v) + " absent from replayed support");
            }
            lp += std::log(dist[v]);
        }
        return lp;
    };
    for (const auto& st : tr.steps) {
        const ProbVector shaped = shape_distribution<T>(logits, cfg.temperature, cfg.top_p);
        const ProbVector dist = detail::thinking_distribution(shaped, cfg);
        std::vector<CoefficientMap::Entry> coeffs;
        if (cfg.mode == DecodeMode::SoftThinking) {
            coeffs = detail::dense_entries(dist);
        } else {
            total += sample_logprob(st.sample, dist);
            coeffs = detail::step_coefficients(build_selection(st.sample), dist, cfg);
        }
        model.step(state, detail::combine_entries(E, coeffs), logits);
    }
    if (!tr.stop_sample.token_ids.empty()) {
        total += sample_logprob(tr.stop_sample, shape_distribution<T>(logits, cfg.temperature, cfg.top_p));
    }
    if (!tr.reached_answer()) {
        return total;
    }
    model.step(state, E.row(cfg.eot), logits);
    for (std::size_t t = 0; t < tr.answer.size(); ++t) {
        const ProbVector dist = shape_distribution<T>(logits, cfg.temperature, cfg.top_p);
        total += sample_logprob(MultiplexSample{{tr.answer[t]}, {}}, dist);
        if (t + 1 < tr.answer.size()) {
            model.step(state, E.row(tr.answer[t]), logits);
        }
    }
    return total;
}

// Flattened view of a trajectory for teacher-forced scoring: the input mix at
// every position and every constituent log-prob term.
struct ScoringView {
    struct Term {
        int position = 0;       // logits row that produced the draw
        TokenId token = 0;
        double behavior_logprob = 0.0;
        bool mask_eot = false;  // drawn from the <eot>-masked thinking distribution
    };
    std::vector<std::vector<CoefficientMap::Entry>> inputs;
    std::vector<Term> terms;
};

inline ScoringView scoring_view(const Trajectory& tr) {
    const auto& cfg = tr.config;
    ScoringView view;
    for (TokenId v : tr.prompt) {
        view.inputs.push_back({{v, 1.0}});
    }
    const int P = static_cast<int>(tr.prompt.size());
    const bool mask = cfg.stop_rule == StopRule::Argmax;
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
        const auto& st = tr.steps[i];
        for (std::size_t j = 0; j < st.sample.token_ids.size(); ++j) {
            view.terms.push_back({P - 1 + static_cast<int>(i), st.sample.token_ids[j], st.sample.logprobs[j], mask});
        }
        view.inputs.push_back(st.coefficients);
    }
    const int L = static_cast<int>(tr.steps.size());
    for (std::size_t j = 0; j < tr.stop_sample.token_ids.size(); ++j) {
        view.terms.push_back({P - 1 + L, tr.stop_sample.token_ids[j], tr.stop_sample.logprobs[j], false});
    }
    if (tr.reached_answer()) {
        view.inputs.push_back({{cfg.eot, 1.0}});
        for (std::size_t t = 0; t < tr.answer.size(); ++t) {
            view.terms.push_back({P + L + static_cast<int>(t), tr.answer[t], tr.answer_logprobs[t], false});
            if (t + 1 < tr.answer.size()) {
                view.inputs.push_back({{tr.answer[t], 1.0}});
            }
        }
    }
    return view;
}

template <class T>
ContextSequence<T> build_context(const EmbeddingTable<T>& E, const ScoringView& view) {
    ContextSequence<T> ctx(E.dim());
    for (const auto& mix : view.inputs) {
        ctx.push(detail::combine_entries(E, mix));
    }
    return ctx;
}

// Independent rollouts over a read-only model; episode e uses seed
// derive_seed(base_seed, {episode_ids[e]}) so results do not depend on the
// thread count.
template <class T>
std::vector<Trajectory> rollout_batch(const PolicyModel<T>& model, const std::vector<const TaskInstance*>& tasks,
                                      const std::vector<std::uint64_t>& episode_ids, const RolloutConfig& cfg,
                                      std::uint64_t base_seed, int threads) {
    std::vector<Trajectory> out(tasks.size());
    parallel_for(tasks.size(), threads, [&](std::size_t i) {
        out[i] = rollout(model, *tasks[i], cfg, derive_seed(base_seed, {episode_ids[i]}), episode_ids[i]);
    });
    return out;
}

}  // namespace mplex
