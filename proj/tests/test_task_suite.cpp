#include <gtest/gtest.h>

#include <set>

#include "mplex/task_suite.hpp"
#include "oracles.hpp"

using namespace mplex;
using V = Vocabulary;

TEST(TaskSuite, CopyGroundTruthIsPayload) {
    Rng rng(1);
    const auto t = generate(TaskKind::Copy, {}, rng);
    ASSERT_EQ(t.prompt.size(), 6u);
    EXPECT_EQ(t.ground_truth, TokenSeq(t.prompt.begin() + 2, t.prompt.begin() + 5));
    EXPECT_EQ(t.prompt.back(), V::kBot);
}

TEST(TaskSuite, ReverseGroundTruth) {
    Rng rng(2);
    TaskParams p;
    p.length = 5;
    const auto t = generate(TaskKind::Reverse, p, rng);
    TokenSeq payload(t.prompt.begin() + 2, t.prompt.begin() + 7);
    std::reverse(payload.begin(), payload.end());
    EXPECT_EQ(t.ground_truth, payload);
}

TEST(TaskSuite, ModularAddGroundTruth) {
    // The only prompt with operands 7 and 5 under modulus 10.
    const TokenSeq prompt = {V::kBos, V::kModAdd, V::digit(7), V::kPlus, V::digit(5), V::kMod, V::digit(1), V::digit(0), V::kBot};
    Rng rng(0);
    bool seen = false;
    for (int i = 0; i < 2000 && !seen; ++i) {
        const auto t = generate(TaskKind::ModularAdd, {}, rng);
        if (t.prompt == prompt) {
            EXPECT_EQ(t.ground_truth, encode(2));
            seen = true;
        }
    }
    EXPECT_TRUE(seen);
}

TEST(TaskSuite, ChainApplyMatchesInterpreter) {
    Rng rng(3);
    for (int m : {2, 7, 10, 13, 97, 100}) {
        for (int depth = 1; depth <= 6; ++depth) {
            TaskParams p;
            p.modulus = m;
            p.depth = depth;
            for (int i = 0; i < 50; ++i) {
                const auto t = generate(TaskKind::ChainApply, p, rng);
                ASSERT_EQ(decode(t.ground_truth), oracle::chain_interpreter(t.prompt, m));
            }
        }
    }
}

TEST(TaskSuite, InvalidParametersThrow) {
    Rng rng(4);
    TaskParams p;
    p.modulus = 101;
    EXPECT_THROW(generate(TaskKind::ModularAdd, p, rng), ParameterError);
    p.modulus = 10;
    p.depth = 7;
    EXPECT_THROW(generate(TaskKind::ChainApply, p, rng), ParameterError);
    p.length = 0;
    EXPECT_THROW(generate(TaskKind::Copy, p, rng), ParameterError);
    EXPECT_THROW(parse_task_kind("sort"), ConfigError);
}

TEST(Verify, Examples) {
    Rng rng(5);
    const auto t = generate(TaskKind::Copy, {}, rng);
    EXPECT_EQ(verify(t.ground_truth, t), 1.0);
    auto off = t.ground_truth;
    off[1] = V::digit(((off[1] - V::kDigit0) + 1) % 10);
    EXPECT_EQ(verify(off, t), 0.0);
    auto with_eos = t.ground_truth;
    with_eos.push_back(V::kEos);
    EXPECT_EQ(verify(with_eos, t), 1.0);
    with_eos.push_back(V::digit(3));
    EXPECT_EQ(verify(with_eos, t), 1.0);
    auto padded = t.ground_truth;
    padded.push_back(V::kPad);
    padded.push_back(V::kPad);
    EXPECT_EQ(verify(padded, t), 1.0);
    EXPECT_EQ(verify({}, t), 0.0);
    EXPECT_EQ(verify({V::kEos}, t), 0.0);
}

// Strict equality after stripping; the oracle applies the rule literally.
TEST(VerifyProperty, MatchesStripOracle) {
    Rng rng(6);
    const auto t = generate(TaskKind::Copy, {}, rng);
    for (int trial = 0; trial < 5000; ++trial) {
        TokenSeq a = t.ground_truth;
        const int edits = static_cast<int>(rng.below(3));
        for (int e = 0; e < edits; ++e) {
            const auto op = rng.below(3);
            if (op == 0) {
                a.push_back(static_cast<TokenId>(rng.below(32)));
            } else if (op == 1 && !a.empty()) {
                a[rng.below(a.size())] = static_cast<TokenId>(rng.below(32));
            } else if (!a.empty()) {
                a.pop_back();
            }
        }
        TokenSeq stripped;
        for (TokenId v : a) {
            if (v == V::kEos) {
                break;
            }
            stripped.push_back(v);
        }
        while (!stripped.empty() && stripped.back() == V::kPad) {
            stripped.pop_back();
        }
        ASSERT_EQ(verify(a, t), stripped == t.ground_truth ? 1.0 : 0.0);
    }
}

TEST(Codec, Examples) {
    EXPECT_EQ(encode(42), (TokenSeq{V::digit(4), V::digit(2)}));
    EXPECT_EQ(decode(encode(42)), 42);
    EXPECT_EQ(encode(0), TokenSeq{V::digit(0)});
    EXPECT_THROW(decode({V::digit(1), V::kPlus}), SchemaError);
    EXPECT_THROW(decode({}), SchemaError);
    EXPECT_THROW(encode(-1), ParameterError);
}

TEST(CodecProperty, RoundTripFuzz) {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        const auto x = static_cast<std::int64_t>(rng.next_u64() >> (5 + rng.below(59)));
        ASSERT_EQ(decode(encode(x)), x);
    }
}

TEST(TaskSuiteProperty, SoundnessAndStrictness) {
    Rng rng(8);
    for (auto kind : {TaskKind::Copy, TaskKind::Reverse, TaskKind::ModularAdd, TaskKind::ChainApply}) {
        for (int i = 0; i < 300; ++i) {
            const auto t = generate(kind, {}, rng);
            ASSERT_FALSE(t.ground_truth.empty());
            ASSERT_EQ(t.prompt.back(), V::kBot);
            ASSERT_EQ(verify(t.ground_truth, t), 1.0);
            for (std::size_t pos = 0; pos < t.ground_truth.size(); ++pos) {
                for (TokenId repl = 0; repl < V::kMinSize; ++repl) {
                    if (repl == t.ground_truth[pos]) {
                        continue;
                    }
                    auto bad = t.ground_truth;
                    bad[pos] = repl;
                    ASSERT_EQ(verify(bad, t), 0.0);
                }
            }
        }
    }
}

TEST(TaskSuiteProperty, Determinism) {
    for (std::uint64_t seed : {1ull, 99ull, 12345ull}) {
        Rng a(seed), b(seed);
        TaskParams p;
        p.depth = 4;
        for (int i = 0; i < 20; ++i) {
            ASSERT_EQ(generate(TaskKind::ChainApply, p, a, i), generate(TaskKind::ChainApply, p, b, i));
        }
    }
    const TaskStream s{TaskKind::ChainApply, {}, 5};
    EXPECT_EQ(s.take(10, 5), s.take(10, 5));
    EXPECT_EQ(s.take(10, 5)[2], s.at(12));
}

TEST(TaskDump, RoundTrip) {
    const TaskStream s{TaskKind::ChainApply, {}, 9};
    const auto tasks = s.take(0, 25);
    const auto text = dump_tasks(tasks);
    EXPECT_EQ(parse_tasks(text, Vocabulary{}), tasks);
    EXPECT_EQ(dump_tasks(parse_tasks(text, Vocabulary{})), text);
}

TEST(TaskDump, RejectsMalformedRecords) {
    const Vocabulary v;
    EXPECT_THROW(parse_tasks("{not json}\n", v), SchemaError);
    EXPECT_THROW(parse_tasks(R"({"id":0})" "\n", v), SchemaError);
    const std::string no_bot =
        R"({"id":0,"kind":"copy","params":{"length":3,"modulus":10,"depth":3},"prompt":[1,6,16],"ground_truth":[16]})";
    EXPECT_THROW(parse_tasks(no_bot, v), SchemaError);
    const std::string bad_token =
        R"({"id":0,"kind":"copy","params":{"length":3,"modulus":10,"depth":3},"prompt":[1,6,40,2],"ground_truth":[16]})";
    EXPECT_THROW(parse_tasks(bad_token, v), SchemaError);
    const std::string bad_kind =
        R"({"id":0,"kind":"sort","params":{"length":3,"modulus":10,"depth":3},"prompt":[1,2],"ground_truth":[16]})";
    EXPECT_THROW(parse_tasks(bad_kind, v), SchemaError);
}

TEST(Vocabulary, ReservedIdsAndNames) {
    const Vocabulary v;
    std::set<TokenId> ids = {V::kPad, V::kBos, V::kBot, V::kEot, V::kEos};
    EXPECT_EQ(ids.size(), 5u);
    EXPECT_EQ(v.name(V::kEot), "<eot>");
    EXPECT_EQ(v.name(V::digit(7)), "7");
    EXPECT_THROW(v.name(32), RangeError);
    EXPECT_THROW(Vocabulary(20), ParameterError);
}
