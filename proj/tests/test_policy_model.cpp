#include <gtest/gtest.h>

#include <cmath>

#include "mplex/pretrain.hpp"
#include "oracles.hpp"

using namespace mplex;

namespace {

ModelConfig micro_config() {
    ModelConfig c;
    c.n_layer = 1;
    c.n_head = 1;
    c.d_model = 8;
    c.d_ff = 32;
    c.n_ctx = 8;
    c.vocab = 8;
    return c;
}

ModelConfig small_config() {
    ModelConfig c;
    c.n_layer = 2;
    c.n_head = 2;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_ctx = 16;
    c.vocab = 12;
    return c;
}

// Rescale parameters so activations are far from the near-uniform init and
// every path carries signal.
template <class T>
void roughen(PolicyModel<T>& m, std::uint64_t seed, double scale) {
    Rng rng(seed);
    for (auto& w : m.embedding().weights()) {
        w = static_cast<T>(scale * rng.normal());
    }
    for (auto& w : m.body()) {
        w = static_cast<T>(w + scale * rng.normal());
    }
}

template <class T>
ContextSequence<T> token_context(const PolicyModel<T>& m, const TokenSeq& toks) {
    ContextSequence<T> ctx(m.dim());
    for (TokenId v : toks) {
        ctx.push(m.embedding().row(v));
    }
    return ctx;
}

}  // namespace

TEST(PolicyModel, FreshModelGivesValidDistribution) {
    PolicyModel<float> m(ModelConfig{}, 1);
    const auto logits = m.next_token_logits(token_context(m, {1, 9, 17, 2}));
    ASSERT_EQ(logits.size(), 32u);
    for (float z : logits) {
        EXPECT_TRUE(std::isfinite(z));
    }
    EXPECT_NO_THROW(shape_distribution<float>(logits, 1.0, 1.0));
    EXPECT_GT(m.parameter_count(), 100000u);
}

TEST(PolicyModel, ContextOverflowThrows) {
    auto c = small_config();
    c.n_ctx = 3;
    PolicyModel<double> m(c, 2);
    EXPECT_THROW(m.next_token_logits(token_context(m, {1, 2, 3, 4})), LengthError);
    auto st = m.new_state();
    std::vector<double> logits(c.vocab);
    for (int i = 0; i < 3; ++i) {
        m.step(st, m.embedding().row(1), logits);
    }
    EXPECT_THROW(m.step(st, m.embedding().row(1), logits), LengthError);
}

TEST(PolicyModel, DecodePathMatchesTrainPathBitwise) {
    PolicyModel<float> m(small_config(), 3);
    roughen(m, 4, 0.3);
    const auto ctx = token_context(m, {1, 5, 7, 2, 9, 3});
    const auto all = m.all_logits(ctx);
    auto st = m.new_state();
    std::vector<float> logits(m.vocab_size());
    for (int t = 0; t < ctx.size(); ++t) {
        m.step(st, ctx.at(t), logits);
        for (int v = 0; v < m.vocab_size(); ++v) {
            ASSERT_EQ(logits[v], all[static_cast<std::size_t>(t) * m.vocab_size() + v]);
        }
    }
}

TEST(PolicyModelProperty, Causality) {
    PolicyModel<double> m(small_config(), 5);
    roughen(m, 6, 0.3);
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        ContextSequence<double> ctx(m.dim());
        const int n = 2 + static_cast<int>(rng.below(10));
        for (int t = 0; t < n; ++t) {
            std::vector<double> x(m.dim());
            for (auto& v : x) {
                v = rng.normal();
            }
            ctx.push(x);
        }
        const auto before = m.all_logits(ctx);
        const int cut = 1 + static_cast<int>(rng.below(n - 1));
        auto altered = ctx;
        for (int t = cut; t < n; ++t) {
            auto x = altered.at(t);
            std::fill(x.begin(), x.end(), 0.0);
        }
        std::vector<double> extra(m.dim(), 1.5);
        altered.push(extra);
        const auto after = m.all_logits(altered);
        for (std::size_t i = 0; i < static_cast<std::size_t>(cut) * m.vocab_size(); ++i) {
            ASSERT_EQ(before[i], after[i]);
        }
    }
}

TEST(PolicyModelProperty, ConsensusTokenIsTransparent) {
    PolicyModel<float> m(small_config(), 8);
    roughen(m, 9, 0.3);
    const TokenSeq toks = {1, 4, 6, 6, 2, 10};
    const auto discrete = m.all_logits(token_context(m, toks));
    ContextSequence<float> mixed(m.dim());
    for (std::size_t t = 0; t < toks.size(); ++t) {
        if (t == 3) {
            mixed.push(m.embedding().aggregate(CoefficientMap({{toks[t], 1.0}})));
        } else {
            mixed.push(m.embedding().row(toks[t]));
        }
    }
    const auto multiplex = m.all_logits(mixed);
    for (std::size_t i = 0; i < discrete.size(); ++i) {
        ASSERT_NEAR(discrete[i], multiplex[i], 1e-6);
    }
}

TEST(SupervisedLoss, UniformHeadGivesLogV) {
    PolicyModel<double> m(small_config(), 10);
    for (auto& w : m.embedding().weights()) {
        w = 0.0;
    }
    const double loss = supervised_loss(m, {1, 2, 3, 4}, {2, 3, 4, 5});
    EXPECT_NEAR(loss, std::log(12.0), 1e-12);
}

TEST(SupervisedLoss, SingleTokenMatchesScalarOracle) {
    PolicyModel<double> m(small_config(), 11);
    roughen(m, 12, 0.4);
    const auto logits = m.next_token_logits(token_context(m, {7}));
    const auto p = oracle::softmax({logits.begin(), logits.end()});
    EXPECT_NEAR(supervised_loss(m, {7}, {3}), -std::log(p[3]), 1e-12);
}

TEST(SupervisedLoss, Errors) {
    PolicyModel<double> m(small_config(), 11);
    EXPECT_THROW(supervised_loss(m, {1, 2}, {2}), LengthError);
    EXPECT_THROW(supervised_loss(m, {1, 2}, {2, 99}), RangeError);
}

// Central differences on every parameter tensor of a 1-layer, 1-head, d=8,
// V=8 model over a length-3 sequence.
TEST(SupervisedLossProperty, GradientsMatchFiniteDifferences) {
    PolicyModel<double> m(micro_config(), 13);
    roughen(m, 14, 0.5);
    const TokenSeq in = {1, 5, 2}, tg = {5, 2, 7};
    ModelGrads<double> g(m.config());
    supervised_loss(m, in, tg, &g);
    const double h = 1e-6;
    for (const auto& info : tensor_infos(m.config())) {
        auto w = m.tensor_data(info);
        const double* analytic = info.embedding ? g.wte.data() : g.body.data() + info.offset;
        double num2 = 0.0, diff2 = 0.0, ana2 = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + h;
            const double up = supervised_loss(m, in, tg);
            w[i] = keep - h;
            const double down = supervised_loss(m, in, tg);
            w[i] = keep;
            const double fd = (up - down) / (2 * h);
            num2 += fd * fd;
            ana2 += analytic[i] * analytic[i];
            diff2 += (fd - analytic[i]) * (fd - analytic[i]);
        }
        const double denom = std::max({std::sqrt(num2), std::sqrt(ana2), 1e-12});
        EXPECT_LT(std::sqrt(diff2) / denom, 1e-3) << info.name;
        EXPECT_GT(std::sqrt(ana2), 0.0) << info.name << " has no gradient signal";
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    PolicyModel<float> m(small_config(), 15);
    roughen(m, 16, 0.2);
    m.set_version(7);
    const auto bytes = serialize_checkpoint(m);
    const auto back = deserialize_checkpoint<float>(bytes);
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(back.version(), 7u);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
    const auto ctx = token_context(m, {1, 2, 3, 4, 5});
    EXPECT_EQ(m.all_logits(ctx), back.all_logits(token_context(back, {1, 2, 3, 4, 5})));
}

TEST(Checkpoint, RejectsCorruptInput) {
    PolicyModel<float> m(small_config(), 15);
    auto bytes = serialize_checkpoint(m);
    EXPECT_THROW(deserialize_checkpoint<float>("garbage"), SchemaError);
    EXPECT_THROW(deserialize_checkpoint<float>(bytes.substr(0, bytes.size() - 3)), SchemaError);
    EXPECT_THROW(deserialize_checkpoint<double>(bytes), SchemaError);
    EXPECT_THROW(deserialize_checkpoint<float>(bytes + "x"), SchemaError);
    bytes[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint<float>(bytes), SchemaError);
}

TEST(Pretrain, ZeroStepsLeavesParametersUnchanged) {
    PolicyModel<float> m(small_config(), 17);
    const auto before = serialize_checkpoint(m);
    Adam<float> adam(m.config(), {});
    PretrainConfig cfg;
    cfg.steps = 0;
    EXPECT_TRUE(pretrain(m, adam, cfg).empty());
    EXPECT_EQ(serialize_checkpoint(m), before);
}

TEST(Pretrain, DeterministicAcrossRunsAndThreadCounts) {
    auto c = small_config();
    c.vocab = 32;
    c.n_ctx = 32;
    PretrainConfig cfg;
    cfg.steps = 5;
    cfg.batch = 9;
    cfg.seed = 3;
    std::vector<std::vector<double>> curves;
    std::vector<std::string> models;
    for (int threads : {1, 1, 4}) {
        PolicyModel<float> m(c, 18);
        Adam<float> adam(c, {});
        cfg.threads = threads;
        curves.push_back(pretrain(m, adam, cfg));
        models.push_back(serialize_checkpoint(m));
    }
    EXPECT_EQ(curves[0], curves[1]);
    EXPECT_EQ(curves[0], curves[2]);
    EXPECT_EQ(models[0], models[1]);
    EXPECT_EQ(models[0], models[2]);
}

TEST(Adam, NonFiniteGradientThrows) {
    PolicyModel<float> m(small_config(), 19);
    Adam<float> adam(m.config(), {});
    ModelGrads<float> g(m.config());
    g.body[3] = std::nanf("");
    EXPECT_THROW(adam.step(m, g, 1e-3), DivergenceError);
}

// Copy task, default 2-layer d=64 V=32 model: held-out loss below 0.1 nats
// within 2,000 steps.
TEST(PretrainSlow, CopyTaskConverges) {
    PolicyModel<float> m(ModelConfig{}, 20);
    Adam<float> adam(m.config(), {});
    PretrainConfig cfg;
    cfg.steps = 2000;
    cfg.seed = 21;
    cfg.mix = {{TaskKind::Copy, {}}};
    const auto curve = pretrain(m, adam, cfg);
    double held_out = 0.0;
    Rng rng(999);
    for (int i = 0; i < 64; ++i) {
        const auto ex = make_supervised_example(generate(TaskKind::Copy, {}, rng));
        held_out += supervised_loss(m, ex.input, ex.targets);
    }
    held_out /= 64;
    EXPECT_LT(held_out, 0.1);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 50; ++i) {
        early += curve[i];
        late += curve[curve.size() - 50 + i];
    }
    EXPECT_LT(late, early);
}
