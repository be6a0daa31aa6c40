#include <gtest/gtest.h>

#include "micro_gradient.hpp"
#include "test_helpers.hpp"

using namespace mplex;

namespace {

// Independent mean / population-std oracle.
std::vector<double> advantage_oracle(const std::vector<double>& r) {
    double mean = std::accumulate(r.begin(), r.end(), 0.0) / r.size();
    double ss = 0.0;
    for (double x : r) {
        ss += (x - mean) * (x - mean);
    }
    const double sd = std::sqrt(ss / r.size());
    std::vector<double> out;
    for (double x : r) {
        out.push_back(sd == 0.0 ? 0.0 : (x - mean) / (sd + 1e-6));
    }
    return out;
}

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.batch_questions = 3;
    cfg.group_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.task_kind = TaskKind::Copy;
    cfg.rollout.max_think = 4;
    cfg.rollout.max_answer = 5;
    cfg.seed = 5;
    cfg.threads = 2;
    cfg.validation_questions = 4;
    cfg.validation_samples = 4;
    cfg.validation_k = 2;
    return cfg;
}

std::vector<GroupBatch> make_batch(const PolicyModel<float>& m, const TrainConfig& cfg, int questions) {
    std::vector<GroupBatch> batch;
    for (int q = 0; q < questions; ++q) {
        GroupBatch gb;
        gb.task = testing_util::copy_task(q);
        for (int g = 0; g < cfg.group_size; ++g) {
            gb.trajectories.push_back(rollout(m, gb.task, cfg.rollout, derive_seed(cfg.seed, {static_cast<std::uint64_t>(q), static_cast<std::uint64_t>(g)})));
            // Synthetic rewards so every group has signal.
            gb.rewards.push_back((q + g) % 3 == 0 ? 1.0 : 0.0);
        }
        gb.advantages = group_advantages(gb.rewards);
        batch.push_back(std::move(gb));
    }
    return batch;
}

bool grads_equal(const ModelGrads<float>& a, const ModelGrads<float>& b) { return a.wte == b.wte && a.body == b.body; }

}  // namespace

TEST(GroupAdvantages, Examples) {
    EXPECT_EQ(group_advantages({1, 1, 1, 1}), (std::vector<double>{0, 0, 0, 0}));
    const auto a = group_advantages({1, 0, 0, 1});
    const auto o = advantage_oracle({1, 0, 0, 1});
    for (int i = 0; i < 4; ++i) {
        EXPECT_NEAR(a[i], o[i], 1e-15);
        EXPECT_NEAR(std::abs(a[i]), 1.0, 1e-5);
    }
    const auto b = group_advantages({1, 0});
    EXPECT_NEAR(b[0], 1.0, 1e-5);
    EXPECT_NEAR(b[1], -1.0, 1e-5);
    EXPECT_THROW(group_advantages({1}), ParameterError);
}

TEST(GroupAdvantagesProperty, BaselineInvarianceAndCentering) {
    Rng rng(1);
    for (int trial = 0; trial < 2000; ++trial) {
        const int G = 2 + static_cast<int>(rng.below(15));
        std::vector<double> r(G);
        for (auto& x : r) {
            x = static_cast<double>(rng.below(2));
        }
        const auto a = group_advantages(r);
        const auto o = advantage_oracle(r);
        const double c = rng.uniform(-3, 3);
        auto shifted = r;
        for (auto& x : shifted) {
            x += c;
        }
        const auto b = group_advantages(shifted);
        double sum = 0.0;
        for (int i = 0; i < G; ++i) {
            ASSERT_NEAR(a[i], o[i], 1e-12);
            ASSERT_NEAR(a[i], b[i], 1e-9);
            sum += a[i];
        }
        ASSERT_NEAR(sum, 0.0, 1e-9);
    }
}

TEST(PolicyLoss, TokenCountWeighting) {
    const auto m = testing_util::rough_model(2);
    RolloutConfig cfg;
    for (int e = 0; e < 40; ++e) {
        const auto tr = rollout(m, testing_util::chain_task(e), cfg, e);
        const auto view = scoring_view(tr);
        ASSERT_EQ(count_terms(tr), view.terms.size());
        ASSERT_EQ(view.terms.size(), static_cast<std::size_t>(cfg.K * tr.think_len() + tr.answer_len()));
    }
}

TEST(PolicyLossProperty, OnPolicyRatioIsOne) {
    const auto m = testing_util::rough_model(3);
    const auto cfg = tiny_train_config();
    const auto batch = make_batch(m, cfg, 3);
    const auto obj = policy_loss(m, batch, cfg);
    EXPECT_LT(obj.max_abs_log_ratio, 1e-6);
    EXPECT_GT(obj.terms, 0u);
}

TEST(PolicyLoss, ZeroAdvantagesGiveZeroLossAndGradient) {
    const auto m = testing_util::rough_model(4);
    const auto cfg = tiny_train_config();
    auto batch = make_batch(m, cfg, 2);
    for (auto& gb : batch) {
        std::fill(gb.advantages.begin(), gb.advantages.end(), 0.0);
    }
    const auto obj = policy_loss(m, batch, cfg);
    EXPECT_EQ(obj.loss, 0.0);
    EXPECT_EQ(obj.grads.norm(), 0.0);
}

TEST(PolicyLoss, DuplicateTrajectoryCountsTwice) {
    const auto m = testing_util::rough_model(5);
    const auto tr = rollout(m, testing_util::chain_task(1), RolloutConfig{}, 9);
    const auto once = surrogate_objective(m, {&tr}, {0.7}, 1.0, 0.2, 0.0, 1);
    const auto twice = surrogate_objective(m, {&tr, &tr}, {0.7, 0.7}, 1.0, 0.2, 0.0, 1);
    EXPECT_NEAR(twice.loss, 2 * once.loss, 1e-12);
    for (std::size_t i = 0; i < once.grads.body.size(); ++i) {
        ASSERT_NEAR(twice.grads.body[i], 2 * once.grads.body[i], 1e-6 * (1 + std::abs(once.grads.body[i])));
    }
    for (std::size_t i = 0; i < once.grads.wte.size(); ++i) {
        ASSERT_NEAR(twice.grads.wte[i], 2 * once.grads.wte[i], 1e-6 * (1 + std::abs(once.grads.wte[i])));
    }
}

TEST(PolicyLoss, ThreadCountDoesNotChangeGradients) {
    const auto m = testing_util::rough_model(6);
    auto cfg = tiny_train_config();
    const auto batch = make_batch(m, cfg, 3);
    cfg.threads = 1;
    const auto a = policy_loss(m, batch, cfg);
    cfg.threads = 5;
    const auto b = policy_loss(m, batch, cfg);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_TRUE(grads_equal(a.grads, b.grads));
}

TEST(PolicyLoss, StaleBatchIsRejected) {
    auto m = testing_util::rough_model(7);
    const auto cfg = tiny_train_config();
    const auto batch = make_batch(m, cfg, 1);
    m.set_version(m.version() + 1);
    EXPECT_NO_THROW(policy_loss(m, batch, cfg));
    m.set_version(m.version() + 1);
    EXPECT_THROW(policy_loss(m, batch, cfg), StaleBatchError);
}

TEST(PolicyLoss, RatioMovesAfterAnUpdate) {
    auto m = testing_util::rough_model(8);
    const auto cfg = tiny_train_config();
    const auto batch = make_batch(m, cfg, 3);
    auto obj = policy_loss(m, batch, cfg);
    Adam<float> adam(m.config(), {});
    adam.step(m, obj.grads, 1e-2);
    const auto after = policy_loss(m, batch, cfg);
    EXPECT_GT(after.max_abs_log_ratio, 1e-6);
    EXPECT_NE(recompute_logprob(m, batch[0].trajectories[0]), batch[0].trajectories[0].total_logprob);
}

// Probability-weighted sum of per-trajectory score-function gradients over
// every micro trajectory equals the exact gradient of expected reward.
TEST(PolicyLossProperty, EnumerationGradientMatchesExact) {
    const auto seed = micro::find_model_seed();
    ASSERT_TRUE(seed.has_value());
    const auto rep = micro::check(*seed);
    EXPECT_LT(rep.rel_error, 1e-5) << "seed " << rep.seed << " leaves " << rep.leaves;
    EXPECT_GT(rep.params, 500u);
}

TEST(TrainStep, ZeroLearningRateIsNoOp) {
    auto m = testing_util::rough_model(9);
    const auto before = serialize_checkpoint(m);
    auto cfg = tiny_train_config();
    cfg.learning_rate = 0.0;
    Adam<float> adam(m.config(), {});
    const auto tasks = TaskStream{TaskKind::Copy, {}, 3}.take(0, 3);
    const auto metrics = train_step(m, adam, tasks, cfg, 0);
    EXPECT_EQ(serialize_checkpoint(m), before);
    EXPECT_EQ(metrics.step, 1);
    EXPECT_GE(metrics.mean_think_len, 0.0);
}

TEST(TrainStep, DeterministicAcrossRerunsAndThreads) {
    std::vector<std::string> ckpts;
    std::vector<std::vector<double>> series;
    for (int threads : {1, 1, 4}) {
        auto m = testing_util::rough_model(10);
        auto cfg = tiny_train_config();
        cfg.threads = threads;
        cfg.total_steps = 3;
        cfg.validation_interval = 0;
        const auto res = run_training(m, cfg, TaskStream{TaskKind::Copy, {}, 4}, {});
        std::vector<double> s;
        for (const auto& x : res.series) {
            s.insert(s.end(), {x.mean_reward, x.loss, x.mean_step_entropy, x.mean_think_len, x.consensus_frac});
        }
        series.push_back(s);
        ckpts.push_back(serialize_checkpoint(m));
    }
    EXPECT_EQ(series[0], series[1]);
    EXPECT_EQ(series[0], series[2]);
    EXPECT_EQ(ckpts[0], ckpts[1]);
    EXPECT_EQ(ckpts[0], ckpts[2]);
}

TEST(RunTraining, ZeroStepsReturnsInitialModel) {
    auto m = testing_util::rough_model(11);
    const auto before = serialize_checkpoint(m);
    auto cfg = tiny_train_config();
    cfg.total_steps = 0;
    const auto res = run_training(m, cfg, TaskStream{TaskKind::Copy, {}, 4}, TaskStream{TaskKind::Copy, {}, 5}.take(0, 4));
    EXPECT_TRUE(res.series.empty());
    EXPECT_TRUE(res.validations.empty());
    EXPECT_EQ(serialize_checkpoint(m), before);
}

TEST(RunTraining, ValidationCadence) {
    auto m = testing_util::rough_model(12);
    auto cfg = tiny_train_config();
    cfg.batch_questions = 1;
    cfg.group_size = 2;
    cfg.total_steps = 100;
    cfg.validation_interval = 25;
    cfg.validation_questions = 2;
    int seen = 0;
    TrainingHooks hooks;
    hooks.on_validation = [&](const ValidationRecord&) { ++seen; };
    const auto res = run_training(m, cfg, TaskStream{TaskKind::Copy, {}, 4}, TaskStream{TaskKind::Copy, {}, 5}.take(0, 2), hooks);
    ASSERT_EQ(res.validations.size(), 4u);
    EXPECT_EQ(seen, 4);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(res.validations[i].step, 25 * (i + 1));
    }
    EXPECT_EQ(res.series.size(), 100u);
    EXPECT_EQ(res.entropy_series().size(), 100u);
    EXPECT_GT(m.version(), 0u);
}

TEST(RunTraining, DivergenceHandsOverSnapshot) {
    auto m = testing_util::rough_model(13);
    m.body()[0] = std::numeric_limits<float>::infinity();
    auto cfg = tiny_train_config();
    cfg.total_steps = 2;
    std::string snapshot;
    TrainingHooks hooks;
    hooks.on_divergence = [&](const std::string& s) { snapshot = s; };
    EXPECT_THROW(run_training(m, cfg, TaskStream{TaskKind::Copy, {}, 4}, {}, hooks), Error);
    if (!snapshot.empty()) {
        EXPECT_EQ(snapshot, serialize_checkpoint(m));
    }
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.group_size = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.kl_coeff = 0.1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.entropy_coeff = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    const auto p = TrainConfig::paper_preset();
    EXPECT_EQ(p.batch_questions, 128);
    EXPECT_EQ(p.group_size, 8);
    EXPECT_EQ(p.learning_rate, 1e-6);
    EXPECT_EQ(p.rollout.K, 3);
    EXPECT_NO_THROW(p.validate());
}
