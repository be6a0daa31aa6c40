#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "mplex/config.hpp"
#include "mplex/io.hpp"
#include "mplex/render.hpp"
#include "mplex/trajectory_io.hpp"
#include "test_helpers.hpp"

using namespace mplex;
namespace fs = std::filesystem;

namespace {

MultiplexStep step_of(TokenSeq ids) {
    MultiplexStep s;
    s.sample.token_ids = ids;
    s.sample.logprobs.assign(ids.size(), -1.0);
    const auto sel = build_selection(s.sample);
    s.diversity = classify_diversity(sel);
    for (const auto& [v, m] : sel.counts) {
        s.coefficients.emplace_back(v, static_cast<double>(m) / ids.size());
    }
    return s;
}

Trajectory fixture(std::vector<TokenSeq> steps, TokenSeq answer) {
    Trajectory t;
    t.prompt = {Vocabulary::kBos, Vocabulary::kCopy, Vocabulary::digit(1), Vocabulary::kBot};
    for (auto& s : steps) {
        t.steps.push_back(step_of(s));
    }
    t.answer = answer;
    t.answer_logprobs.assign(answer.size(), -0.5);
    t.answer_entropy.assign(answer.size(), 0.25);
    return t;
}

// Test-only reader of the rendered thinking section: recovers one diversity
// label per line.
std::vector<std::string> parse_rendered_classes(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line) && line != "---- answer ----") {
        if (line.rfind("prompt: ", 0) == 0) {
            continue;
        }
        if (line.find("[M]") != std::string::npos) {
            out.push_back("majority21");
        } else if (line.find("[1]") != std::string::npos) {
            out.push_back("distinct");
        } else if (line.find('~') != std::string::npos) {
            out.push_back("soft");
        } else if (line.find('{') != std::string::npos) {
            std::vector<int> sig;
            std::size_t p = 0;
            while ((p = line.find('{', p)) != std::string::npos) {
                sig.push_back(std::stoi(line.substr(p + 1)));
                ++p;
            }
            std::sort(sig.rbegin(), sig.rend());
            std::string s;
            for (std::size_t i = 0; i < sig.size(); ++i) {
                s += (i ? "+" : "") + std::to_string(sig[i]);
            }
            out.push_back(s);
        } else {
            out.push_back("consensus");
        }
    }
    return out;
}

std::string temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("mplex_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

}  // namespace

TEST(Render, AllConsensusHasNoTags) {
    const auto text = render_trajectory(fixture({{16, 16, 16}, {17, 17, 17}}, {16, Vocabulary::kEos}), Vocabulary{});
    EXPECT_EQ(text, "0\n1\n---- answer ----\n0 <eos>\n");
    EXPECT_EQ(text.find('['), std::string::npos);
}

TEST(Render, MajorityFixture) {
    const auto text = render_trajectory(fixture({{2, 2, 9}}, {Vocabulary::kEos}), Vocabulary{});
    const auto M = text.find("[M]<bot>"), m = text.find("[m]CHAIN");
    ASSERT_NE(M, std::string::npos);
    ASSERT_NE(m, std::string::npos);
    EXPECT_LT(M, m);
}

TEST(Render, DistinctOtherSoftAndEmpty) {
    Trajectory t = fixture({{16, 17, 18}}, {16});
    EXPECT_EQ(render_trajectory(t, Vocabulary{}), "[1]0 [2]1 [3]2\n---- answer ----\n0\n");
    t = fixture({{16, 17, 16, 16}}, {16});
    EXPECT_EQ(render_trajectory(t, Vocabulary{}), "{3}0 {1}1\n---- answer ----\n0\n");
    t = fixture({}, {16, 17});
    EXPECT_EQ(render_trajectory(t, Vocabulary{}), "---- answer ----\n0 1\n");
    EXPECT_EQ(render_trajectory(t, Vocabulary{}, {true, false}), "prompt: <bos> COPY 1 <bot>\n---- answer ----\n0 1\n");
    t.termination = Termination::ThinkBudgetExhausted;
    t.answer.clear();
    EXPECT_EQ(render_trajectory(t, Vocabulary{}), "---- answer ----\n(thinking budget exhausted)\n");
    MultiplexStep soft;
    soft.diversity.cls = DiversityClass::Soft;
    soft.coefficients = {{16, 0.75}, {17, 0.25}};
    t = fixture({}, {16});
    t.steps.push_back(soft);
    EXPECT_EQ(render_trajectory(t, Vocabulary{}), "~0:0.75 ~1:0.25\n---- answer ----\n0\n");
}

TEST(Render, UnknownTokenThrows) {
    EXPECT_THROW(render_trajectory(fixture({{40, 40, 40}}, {16}), Vocabulary{}), RangeError);
}

TEST(RenderProperty, RoundTripRecoversDiversity) {
    const auto m = testing_util::rough_model(1);
    for (int K : {2, 3, 4}) {
        RolloutConfig cfg;
        cfg.K = K;
        for (int e = 0; e < 40; ++e) {
            const auto tr = rollout(m, testing_util::chain_task(e), cfg, e);
            const auto text = render_trajectory(tr, Vocabulary{});
            const auto got = parse_rendered_classes(text);
            ASSERT_EQ(got.size(), tr.steps.size());
            for (std::size_t i = 0; i < got.size(); ++i) {
                ASSERT_EQ(got[i], tr.steps[i].diversity.label()) << text;
            }
            ASSERT_EQ(text, render_trajectory(tr, Vocabulary{}));
        }
    }
}

TEST(TrajectoryLog, RoundTrip) {
    const auto m = testing_util::rough_model(2);
    std::vector<Trajectory> log;
    for (auto mode : {DecodeMode::Multiplex, DecodeMode::DiscreteCoT, DecodeMode::SoftThinking}) {
        RolloutConfig cfg;
        cfg.mode = mode;
        cfg.stop_rule = mode == DecodeMode::Multiplex ? StopRule::AnySampled : StopRule::Argmax;
        for (int e = 0; e < 10; ++e) {
            log.push_back(rollout(m, testing_util::chain_task(e), cfg, e, e));
        }
    }
    const auto text = dump_trajectories(log);
    const auto back = parse_trajectories(text);
    ASSERT_EQ(back.size(), log.size());
    EXPECT_EQ(dump_trajectories(back), text);
    for (std::size_t i = 0; i < log.size(); ++i) {
        EXPECT_EQ(back[i].total_logprob, log[i].total_logprob);
        EXPECT_EQ(back[i].answer, log[i].answer);
        EXPECT_EQ(render_trajectory(back[i], Vocabulary{}), render_trajectory(log[i], Vocabulary{}));
        EXPECT_NEAR(recompute_logprob(m, back[i]), log[i].total_logprob, 1e-6);
    }
    const auto j = nlohmann::json::parse(text.substr(0, text.find('\n')));
    for (const char* key : {"episode_id", "mode", "K", "scheme", "prompt_tokens", "steps", "answer_tokens", "total_logprob",
                            "reward", "termination"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    for (const char* key : {"samples", "coefficients", "entropy", "diversity"}) {
        EXPECT_TRUE(j["steps"][0].contains(key)) << key;
    }
}

TEST(TrajectoryLog, RejectsMalformed) {
    EXPECT_THROW(parse_trajectories("not json\n"), SchemaError);
    EXPECT_THROW(parse_trajectories("{}\n"), SchemaError);
    const auto m = testing_util::rough_model(3);
    auto j = trajectory_to_json(rollout(m, testing_util::chain_task(0), RolloutConfig{}, 0));
    j["mode"] = "latent";
    EXPECT_THROW(trajectory_from_json(j), SchemaError);
}

TEST(Csv, ParseAndErrors) {
    const auto t = parse_csv("k,mean,stderr\n1,0.5,0.1\n2,0.7,0.1\n");
    EXPECT_EQ(t.rows.size(), 2u);
    EXPECT_EQ(t.require("mean"), 1);
    EXPECT_THROW(t.require("missing"), SchemaError);
    EXPECT_EQ(t.to_string(), "k,mean,stderr\n1,0.5,0.1\n2,0.7,0.1\n");
    EXPECT_THROW(parse_csv(""), SchemaError);
    EXPECT_THROW(parse_csv("a,b\n1\n"), SchemaError);
}

namespace {

std::size_t data_rows(const std::string& dat) {
    std::size_t n = 0;
    std::istringstream in(dat);
    std::string line;
    while (std::getline(in, line)) {
        n += !line.empty() && line[0] != '#';
    }
    return n;
}

}  // namespace

TEST(PlotExport, PassAtKSeries) {
    const auto out = plot_export(parse_csv("k,mean,stderr\n1,0.5,0.1\n2,0.6,0.1\n4,0.7,0.1\n"));
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].first, "passk.dat");
    EXPECT_EQ(data_rows(out[0].second), 3u);
}

TEST(PlotExport, EntropySeriesLength) {
    std::string csv = "step,mean_step_entropy\n";
    for (int i = 1; i <= 100; ++i) {
        csv += std::to_string(i) + "," + format_number(1.0 / i) + "\n";
    }
    const auto out = plot_export(parse_csv(csv));
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].first, "entropy.dat");
    EXPECT_EQ(data_rows(out[0].second), 100u);
}

TEST(PlotExport, OneSeriesPerMode) {
    const auto out = plot_export(
        parse_csv("mode,k,mean,stderr\nmultiplex,1,0.5,0.1\nmultiplex,2,0.6,0.1\ndiscrete,1,0.4,0.1\ndiscrete,2,0.5,0.1\n"));
    ASSERT_EQ(out.size(), 1u);
    const auto& d = out[0].second;
    EXPECT_NE(d.find("# multiplex\n"), std::string::npos);
    EXPECT_NE(d.find("# discrete\n"), std::string::npos);
    EXPECT_NE(d.find("\n\n\n# discrete"), std::string::npos);
    EXPECT_EQ(data_rows(d), 4u);
}

TEST(PlotExport, Errors) {
    EXPECT_THROW(plot_export(parse_csv("a,b\n1,2\n")), SchemaError);
    EXPECT_THROW(plot_export(parse_csv("k,mean,stderr\n1,x,0.1\n")), SchemaError);
}

TEST(Config, DefaultsAndTableKeys) {
    const auto c = parse_run_config(R"({"batch_size": 4, "ppo_mini_batch_size": 4, "rollout_number": 6,
        "learning_rate": 0.001, "sampling_temperature": 0.9, "sampling_top_p": 0.95, "multiplex_width": 2,
        "max_prompt_length": 40, "max_response_length": 20, "entropy_loss_coefficient": 0,
        "kl_loss_coefficient": 0, "model_dtype": "float32", "seed": 9,
        "task": {"kind": "modadd", "modulus": 50}, "model": {"n_layer": 1}})");
    EXPECT_EQ(c.train.batch_questions, 4);
    EXPECT_EQ(c.train.group_size, 6);
    EXPECT_EQ(c.train.rollout.K, 2);
    EXPECT_EQ(c.train.rollout.top_p, 0.95);
    EXPECT_EQ(c.train.rollout.max_think + 1 + c.train.rollout.max_answer, 20);
    EXPECT_EQ(c.train.task_kind, TaskKind::ModularAdd);
    EXPECT_EQ(c.model.n_layer, 1);
    EXPECT_EQ(c.pretrain.seed, 9u);
    const auto again = parse_run_config(run_config_to_json(c).dump());
    EXPECT_EQ(run_config_to_json(again), run_config_to_json(c));
}

TEST(Config, Strictness) {
    EXPECT_THROW(parse_run_config("{"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"unknown_key": 1})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"multiplex_width": "three"})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"multiplex_width": 0})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"batch_size": 8, "ppo_mini_batch_size": 4})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"model_dtype": "bfloat16"})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"kl_loss_coefficient": 0.001})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"model": {"depth": 3}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"task": {"kind": "sorting"}})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"scheme": "median"})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"sampling_top_p": 1.5})"), ConfigError);
    EXPECT_THROW(parse_run_config(R"({"pretrain": {"mix": []}})"), ConfigError);
}

TEST(Artifacts, CommitWritesEverything) {
    const auto dir = temp_dir("commit");
    ArtifactSet a;
    a.add(dir + "/x.csv", "a,b\n");
    a.add(dir + "/sub/y.txt", "hello");
    a.commit();
    EXPECT_EQ(read_file(dir + "/x.csv"), "a,b\n");
    EXPECT_EQ(read_file(dir + "/sub/y.txt"), "hello");
    EXPECT_FALSE(fs::exists(dir + "/x.csv.tmp"));
    EXPECT_THROW(a.add(dir + "/x.csv", ""), InvariantError);
}

TEST(Artifacts, FailureLeavesNoPartialOutput) {
    const auto dir = temp_dir("atomic");
    fs::create_directories(dir + "/blocked.csv.tmp");  // the temp cannot be opened as a file
    ArtifactSet a;
    a.add(dir + "/first.csv", "1\n");
    a.add(dir + "/blocked.csv", "2\n");
    EXPECT_THROW(a.commit(), IoError);
    EXPECT_FALSE(fs::exists(dir + "/first.csv"));
    EXPECT_FALSE(fs::exists(dir + "/first.csv.tmp"));
    EXPECT_FALSE(fs::exists(dir + "/blocked.csv"));
    EXPECT_THROW(read_file(dir + "/missing"), IoError);
}

TEST(FormatNumber, Basics) {
    EXPECT_EQ(format_number(0.5), "0.5");
    EXPECT_EQ(format_number(1.0 / 3.0, 3), "0.333");
    EXPECT_EQ(format_number(std::nan("")), "nan");
}
