#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mplex/common.hpp"
#include "mplex/policy_model.hpp"
#include "mplex/task_suite.hpp"

namespace mplex {

// Target id that contributes nothing to the supervised loss.
inline constexpr TokenId kIgnoreTarget = -1;

namespace detail {

template <class T>
ContextSequence<T> embed_tokens(const EmbeddingTable<T>& E, const TokenSeq& tokens) {
    ContextSequence<T> ctx(E.dim());
    for (TokenId v : tokens) {
        ctx.push(E.row(v));
    }
    return ctx;
}

inline void check_supervised_shapes(const TokenSeq& input, const TokenSeq& targets, int vocab) {
    if (input.size() != targets.size()) {
        throw LengthError("input and target sequences differ in length");
    }
    if (input.empty()) {
        throw LengthError("empty training sequence");
    }
    for (TokenId t : targets) {
        if (t != kIgnoreTarget && (t < 0 || t >= vocab)) {
            throw RangeError("target token outside vocabulary");
        }
    }
}

}  // namespace detail

// Mean next-token cross-entropy under teacher forcing; when grads is non-null
// the gradient of that mean is accumulated into it.
template <class T>
double supervised_loss(const PolicyModel<T>& model, const TokenSeq& input, const TokenSeq& targets,
                       ModelGrads<T>* grads = nullptr) {
    const int V = model.vocab_size();
    detail::check_supervised_shapes(input, targets, V);
    const auto ctx = detail::embed_tokens(model.embedding(), input);
    typename PolicyModel<T>::Tape tape;
    model.forward_train(ctx, tape);
    const int n = tape.n;
    int counted = 0;
    for (TokenId t : targets) {
        counted += t == kIgnoreTarget ? 0 : 1;
    }
    if (counted == 0) {
        return 0.0;
    }
    double loss = 0.0;
    std::vector<T> dlogits(grads ? static_cast<std::size_t>(n) * V : 0, T(0));
    std::vector<double> p(V);
    for (int t = 0; t < n; ++t) {
        if (targets[t] == kIgnoreTarget) {
            continue;
        }
        const T* row = tape.logits.data() + static_cast<std::size_t>(t) * V;
        double mx = -INFINITY;
        for (int v = 0; v < V; ++v) {
            mx = std::max(mx, static_cast<double>(row[v]));
        }
        double z = 0.0;
        for (int v = 0; v < V; ++v) {
            p[v] = std::exp(static_cast<double>(row[v]) - mx);
            z += p[v];
        }
        loss -= static_cast<double>(row[targets[t]]) - mx - std::log(z);
        if (grads) {
            for (int v = 0; v < V; ++v) {
                const double g = p[v] / z - (v == targets[t] ? 1.0 : 0.0);
                dlogits[static_cast<std::size_t>(t) * V + v] = static_cast<T>(g / counted);
            }
        }
    }
    if (grads) {
        std::vector<T> dinputs;
        model.backward(tape, dlogits, *grads, &dinputs);
        const int d = model.dim();
        for (int t = 0; t < n; ++t) {
            T* de = grads->wte.data() + static_cast<std::size_t>(input[t]) * d;
            for (int j = 0; j < d; ++j) {
                de[j] += dinputs[static_cast<std::size_t>(t) * d + j];
            }
        }
    }
    return loss / counted;
}

struct SupervisedExample {
    TokenSeq input;
    TokenSeq targets;
};

// prompt ++ thinking ++ <eot> ++ answer ++ <eos>, shifted by one; only the
// positions after the prompt carry targets.
inline SupervisedExample make_supervised_example(const TaskInstance& task) {
    TokenSeq seq = task.prompt;
    seq.insert(seq.end(), task.reference_thinking.begin(), task.reference_thinking.end());
    seq.push_back(Vocabulary::kEot);
    seq.insert(seq.end(), task.ground_truth.begin(), task.ground_truth.end());
    seq.push_back(Vocabulary::kEos);
    SupervisedExample ex;
    ex.input.assign(seq.begin(), seq.end() - 1);
    ex.targets.assign(seq.begin() + 1, seq.end());
    const std::size_t first = task.prompt.size() - 1;
    for (std::size_t t = 0; t < first; ++t) {
        ex.targets[t] = kIgnoreTarget;
    }
    return ex;
}

struct TaskMixEntry {
    TaskKind kind = TaskKind::Copy;
    TaskParams params;
};

struct PretrainConfig {
    int steps = 2000;
    int batch = 32;
    double learning_rate = 1e-3;
    int warmup = 100;
    std::uint64_t seed = 0;
    int threads = 0;
    std::vector<TaskMixEntry> mix = {{TaskKind::Copy, {}}};
};

// Instance i of pretraining step s.
inline TaskInstance pretrain_task(const PretrainConfig& cfg, int step, int i) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)}));
    const auto& entry = cfg.mix[rng.below(cfg.mix.size())];
    return generate(entry.kind, entry.params, rng, static_cast<std::uint64_t>(step) * cfg.batch + i);
}

// Per-example gradients are accumulated in fixed-size chunks and reduced in
// chunk order, so the loss curve is independent of the thread count.
template <class T>
double supervised_batch(const PolicyModel<T>& model, const std::vector<SupervisedExample>& batch, ModelGrads<T>& grads,
                        int threads) {
    constexpr std::size_t kChunk = 4;
    const std::size_t chunks = (batch.size() + kChunk - 1) / kChunk;
    std::vector<ModelGrads<T>> partial(chunks, ModelGrads<T>(model.config()));
    std::vector<double> losses(batch.size(), 0.0);
    parallel_for(chunks, threads, [&](std::size_t c) {
        for (std::size_t i = c * kChunk; i < std::min(batch.size(), (c + 1) * kChunk); ++i) {
            losses[i] = supervised_loss(model, batch[i].input, batch[i].targets, &partial[c]);
        }
    });
    grads.zero();
    for (const auto& p : partial) {
        grads.add(p);
    }
    grads.scale(T(1) / T(batch.size()));
    double loss = 0.0;
    for (double l : losses) {
        loss += l;
    }
    return loss / static_cast<double>(batch.size());
}

// Returns the per-step mean training loss.
template <class T>
std::vector<double> pretrain(PolicyModel<T>& model, Adam<T>& opt, const PretrainConfig& cfg,
                             const std::function<void(int, double)>& on_step = {}) {
    if (cfg.steps < 0 || cfg.batch < 1 || cfg.mix.empty()) {
        throw ParameterError("pretraining needs steps >= 0, batch >= 1 and a non-empty task mix");
    }
    std::vector<double> curve;
    ModelGrads<T> grads(model.config());
    for (int s = 0; s < cfg.steps; ++s) {
        std::vector<SupervisedExample> batch;
        for (int i = 0; i < cfg.batch; ++i) {
            batch.push_back(make_supervised_example(pretrain_task(cfg, s, i)));
        }
        const double loss = supervised_batch(model, batch, grads, cfg.threads);
        if (!std::isfinite(loss)) {
            throw DivergenceError("pretraining loss became non-finite at step " + std::to_string(s));
        }
        const double warm = cfg.warmup > 0 ? std::min(1.0, static_cast<double>(s + 1) / cfg.warmup) : 1.0;
        opt.step(model, grads, cfg.learning_rate * warm);
        curve.push_back(loss);
        if (on_step) {
            on_step(s, loss);
        }
    }
    return curve;
}

}  // namespace mplex
