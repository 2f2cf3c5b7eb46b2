#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ravqa/experiment.hpp"
#include "ravqa/grad_check.hpp"
#include "ravqa/training.hpp"
#include "linear_probe.hpp"
#include "support.hpp"

using namespace ravqa;
using ravqa::testing::random_tensor;
using ravqa::testing::randomize_params;
using ravqa::testing::small_spec;

namespace {

ModelConfig config_for(const SyntheticSpec& s, std::size_t d = 8, std::size_t depth = 1) {
    ExperimentConfig ec;
    ec.model = ravqa::testing::tiny_model_config(d, depth, 2);
    return ec.model_for(s);
}

TrainConfig quick_train(std::size_t e1, std::size_t e2) {
    TrainConfig t;
    t.lr = 3e-3;
    t.stage1_epochs = e1;
    t.stage2_epochs = e2;
    t.k_purge = 2;
    t.n_retrieve = 2;
    return t;
}

struct Fixture {
    SyntheticData data;
    MemoryBank audio, visual;
};

Fixture make_fixture(std::uint64_t seed = 0) {
    SyntheticData data = gen_synthetic(small_spec(seed));
    MemoryBank a = build_bank(bank_records(data.train, Modality::audio), Modality::audio);
    MemoryBank v = build_bank(bank_records(data.train, Modality::visual), Modality::visual);
    return {std::move(data), std::move(a), std::move(v)};
}

}  // namespace

// ---- losses --------------------------------------------------------------------

TEST(TaskLoss, Examples) {
    EXPECT_NEAR(task_loss(Tensor::vector({50.0, 0.0, 0.0}), 0), 0.0, 1e-20);
    EXPECT_NEAR(task_loss(Tensor::vector({0.0, 0.0, 0.0, 0.0}), 2), std::log(4.0), 1e-15);
    EXPECT_NEAR(task_loss(Tensor::vector({1000.0, 0.0}), 1), 1000.0, 1e-9);
    EXPECT_THROW(task_loss(Tensor::vector({1.0, 2.0}), 2), DataError);
}

TEST(TaskLoss, MatchesDirectFormula) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 200; ++t) {
        const Tensor z = random_tensor(rng, {6}, -4, 4);
        const std::size_t y = ravqa::testing::uniform_index(rng, 0, 5);
        double s = 0.0;
        for (double v : z.data()) s += std::exp(v);
        EXPECT_NEAR(task_loss(z, y), -std::log(std::exp(z[y]) / s), 1e-12);
        Graph g(false);
        EXPECT_NEAR(ad::cross_entropy(g.constant(z), y).value()[0], task_loss(z, y), 1e-12);
    }
}

TEST(RankingLoss, Examples) {
    auto [a1, b1] = ranking_loss({0.5, 0.7, 1.0});
    EXPECT_EQ(a1, 0.0);
    EXPECT_EQ(b1, 0.0);
    auto [a2, b2] = ranking_loss({0.9, 0.4, 1.0});
    EXPECT_DOUBLE_EQ(a2, 0.5);
    EXPECT_EQ(b2, 0.0);
    auto [a3, b3] = ranking_loss({0.2, 0.5, 0.3});
    EXPECT_EQ(a3, 0.0);
    EXPECT_DOUBLE_EQ(b3, 0.2);
}

TEST(RankingLoss, SignPatterns) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int t = 0; t < 2000; ++t) {
        const RankingTriplet r{u(rng), u(rng), u(rng)};
        const auto [plus, minus] = ranking_loss(r);
        EXPECT_GE(plus, 0.0);
        EXPECT_GE(minus, 0.0);
        EXPECT_EQ(plus == 0.0, r.gt <= r.pos);
        EXPECT_EQ(minus == 0.0, r.pos <= r.neg);
        if (r.gt > r.pos) {
            EXPECT_DOUBLE_EQ(plus, r.gt - r.pos);
        }
        if (r.pos > r.neg) {
            EXPECT_DOUBLE_EQ(minus, r.pos - r.neg);
        }
        Graph g(false);
        auto [vp, vm] = ad::ranking_loss(g.constant(Tensor::vector({r.gt})), g.constant(Tensor::vector({r.pos})),
                                         g.constant(Tensor::vector({r.neg})));
        EXPECT_EQ(vp.value()[0], plus);
        EXPECT_EQ(vm.value()[0], minus);
    }
}

TEST(TotalLoss, Examples) {
    EXPECT_EQ(total_loss(1.25, 3.0, 4.0, 0.0), 1.25);
    EXPECT_DOUBLE_EQ(total_loss(1.0, 0.5, 0.2, 0.5), 1.35);
}

TEST(TotalLoss, FormulaAndMonotonicity) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int t = 0; t < 500; ++t) {
        const double task = u(rng), rp = u(rng), rm = u(rng), lam = u(rng);
        EXPECT_NEAR(total_loss(task, rp, rm, lam), task + lam * rp + lam * rm, 1e-14);
        EXPECT_LE(total_loss(task, rp, rm, lam), total_loss(task, rp + 0.1, rm, lam));
        EXPECT_LE(total_loss(task, rp, rm, lam), total_loss(task, rp, rm, lam + 0.1));
        Graph g(false);
        auto c = [&](double v) { return g.constant(Tensor::vector({v})); };
        EXPECT_NEAR(ad::total_loss(c(task), c(rp), c(rm), lam).value()[0], total_loss(task, rp, rm, lam), 1e-14);
    }
}

// ---- optimizer -----------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    ParamStore ps;
    ps.add("w", Tensor::vector({0.5, -1.5}));
    ps.zero_grad();
    Adam opt(0.1);
    for (int i = 0; i < 10; ++i) opt.step(ps);
    EXPECT_EQ(ps.at("w").value[0], 0.5);
    EXPECT_EQ(ps.at("w").value[1], -1.5);
    EXPECT_EQ(opt.steps(), 10u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamStore ps;
    ps.add("w", Tensor::vector({1.0, 1.0}));
    Adam opt(0.01);
    optimizer_step(ps, {{"w", Tensor::vector({4.0, -0.001})}}, opt);
    EXPECT_NEAR(ps.at("w").value[0], 0.99, 1e-9);
    EXPECT_NEAR(ps.at("w").value[1], 1.01, 1e-6);
}

// Adam moves about lr per step, so the minimum sits within 100 steps of the start.
TEST(Adam, ScalarQuadraticConverges) {
    ParamStore ps;
    Parameter& w = ps.add("w", Tensor::vector({-0.2}));
    Adam opt(0.01);
    const double a = 3.0, b = 2.4;  // f(w) = a w^2 - b w, minimum at b / (2a)
    const double target = b / (2.0 * a);
    for (int i = 0; i < 500; ++i) {
        w.grad[0] = 2.0 * a * w.value[0] - b;
        opt.step(ps);
    }
    EXPECT_NEAR(w.value[0], target, 1e-6);
}

TEST(Adam, FrozenParametersAreUntouched) {
    ParamStore ps;
    ps.add("live", Tensor::vector({1.0}));
    ps.add("frozen", Tensor::vector({2.0}), true);
    ps.at("live").grad[0] = 1.0;
    ps.at("frozen").grad[0] = 1.0;
    Adam opt(0.1);
    opt.step(ps);
    EXPECT_LT(ps.at("live").value[0], 1.0);
    EXPECT_EQ(ps.at("frozen").value[0], 2.0);
}

TEST(Adam, ShapeMismatchThrows) {
    ParamStore ps;
    ps.add("w", Tensor::vector({1.0, 2.0}));
    Adam opt(0.1);
    EXPECT_THROW(optimizer_step(ps, {{"w", Tensor::vector({1.0})}}, opt), DimensionError);
    ps.at("w").grad = Tensor::vector({1.0, 2.0, 3.0});
    EXPECT_THROW(opt.step(ps), DimensionError);
}

// ---- stage I -------------------------------------------------------------------

TEST(Stage1, ZeroEpochsIsANoOp) {
    const auto data = gen_synthetic(small_spec(1));
    Model m = init_model(config_for(data.spec), 3);
    const auto before = param_checksum(m.params);
    TrainLog log = stage1_pretrain(m, data.train, nullptr, quick_train(0, 0));
    EXPECT_EQ(param_checksum(m.params), before);
    EXPECT_TRUE(log.records.empty());
}

TEST(Stage1, ErrorsOnEmptyOrIncompleteData) {
    const auto data = gen_synthetic(small_spec(1));
    Model m = init_model(config_for(data.spec), 3);
    EXPECT_THROW(stage1_pretrain(m, Dataset{"empty", {}}, nullptr, quick_train(1, 0)), DataError);
    Dataset broken = data.train;
    broken.samples[4].remove(Modality::visual);
    EXPECT_THROW(stage1_pretrain(m, broken, nullptr, quick_train(1, 0)), DataError);
    Graph g;
    EXPECT_THROW(stage1_sample_loss(g, m, broken.samples[4]), DataError);
}

TEST(Stage1, IsDeterministicAndLowersLoss) {
    const auto data = gen_synthetic(small_spec(2));
    Model a = init_model(config_for(data.spec), 5);
    Model b = init_model(config_for(data.spec), 5);
    const auto frozen_mix = param_checksum(a.params, {"router.", "proj.", "guide."});
    TrainLog la = stage1_pretrain(a, data.train, &data.val, quick_train(3, 0));
    TrainLog lb = stage1_pretrain(b, data.train, &data.val, quick_train(3, 0));
    EXPECT_EQ(param_checksum(a.params), param_checksum(b.params));
    EXPECT_EQ(la.to_jsonl(), lb.to_jsonl());
    ASSERT_EQ(la.records.size(), 4u);
    EXPECT_LT(la.final().loss, la.initial().loss);
    EXPECT_EQ(param_checksum(a.params, {"router.", "proj.", "guide."}), frozen_mix);
    for (const auto& [name, p] : a.params) EXPECT_FALSE(p.frozen) << name;
}

TEST(Stage1, AudioExpertLearnsSeparableTask) {
    SyntheticSpec s = small_spec(3);
    s.frac_audio = 1.0;
    s.frac_visual = 0.0;
    s.frac_either = 0.0;
    s.noise = 0.3;
    s.distractor_rate = 0.0;
    s.burst_rate = 0.0;
    const auto data = gen_synthetic(s);
    const ravqa::testing::LinearProbe probe(data.train, s.answer_count(), {true, false, false});
    ASSERT_GE(probe.accuracy(data.train), 0.99) << "task is not linearly separable from audio";
    Model m = init_model(config_for(s), 7);
    TrainConfig tc = quick_train(50, 0);
    tc.lr = 1e-2;
    double best = 0.0;
    for (std::size_t e = 0; e < tc.stage1_epochs && best < 0.95; e += 5) {
        TrainConfig chunk = tc;
        chunk.stage1_epochs = 5;
        chunk.seed = e;
        stage1_pretrain(m, data.train, nullptr, chunk);
        best = std::max(best, stage1_evaluate(m, data.train).audio_accuracy);
    }
    EXPECT_GE(best, 0.95);
}

// ---- stage II ------------------------------------------------------------------

TEST(Stage2, FreezesEncodersAndExperts) {
    const Fixture f = make_fixture(4);
    Model m = init_model(config_for(f.data.spec), 9);
    const auto frozen = param_checksum(m.params, frozen_prefixes());
    const auto mixing = param_checksum(m.params, {"router.", "dec."});
    TrainLog log = stage2_mix(m, f.data.train, &f.data.val, &f.audio, &f.visual, quick_train(0, 2));
    EXPECT_EQ(param_checksum(m.params, frozen_prefixes()), frozen);
    EXPECT_NE(param_checksum(m.params, {"router.", "dec."}), mixing);
    ASSERT_EQ(log.records.size(), 3u);
    EXPECT_GT(log.final().steps, 0u);
    for (const auto& r : log.records) {
        EXPECT_NEAR(r.alpha[0] + r.alpha[1] + r.alpha[2], 1.0, 1e-12);
        EXPECT_GE(r.accuracy, 0.0);
        EXPECT_LE(r.accuracy, 1.0);
    }
}

TEST(Stage2, RankingTermsActiveUnderMissingness) {
    const Fixture f = make_fixture(5);
    Model m = init_model(config_for(f.data.spec), 9);
    TrainConfig tc = quick_train(0, 1);
    tc.missing_rate = 1.0;
    TrainLog log = stage2_mix(m, f.data.train, nullptr, &f.audio, &f.visual, tc);
    const auto& r = log.final();
    EXPECT_GT(r.rank_plus + r.rank_minus, 0.0);
    EXPECT_NEAR(r.loss, r.task + tc.lambda * (r.rank_plus + r.rank_minus), 1e-12);
}

TEST(Stage2, ZeroMissingRateIsPlainMixing) {
    const Fixture f = make_fixture(6);
    Model full = init_model(config_for(f.data.spec), 9);
    Model base = init_model(config_for(f.data.spec), 9);
    TrainConfig tc = quick_train(0, 2);
    tc.missing_rate = 0.0;
    TrainLog lf = stage2_mix(full, f.data.train, nullptr, &f.audio, &f.visual, tc, Variant::parse("full"));
    TrainLog lb = stage2_mix(base, f.data.train, nullptr, nullptr, nullptr, tc, Variant::parse("baseline"));
    for (const auto& r : lf.records) {
        EXPECT_EQ(r.rank_plus, 0.0);
        EXPECT_EQ(r.rank_minus, 0.0);
        EXPECT_EQ(r.loss, r.task);
    }
    EXPECT_EQ(lf.to_jsonl(), lb.to_jsonl());
    EXPECT_EQ(param_checksum(full.params), param_checksum(base.params));
}

TEST(Stage2, BankPolicyMismatchIsAConfigError) {
    const Fixture f = make_fixture(7);
    Model m = init_model(config_for(f.data.spec), 9);
    TrainConfig tc = quick_train(0, 1);
    EXPECT_THROW(stage2_mix(m, f.data.train, nullptr, &f.visual, &f.visual, tc), ConfigError);
    EXPECT_THROW(stage2_mix(m, f.data.train, nullptr, &f.audio, nullptr, tc), ConfigError);
    tc.policy = MissingPolicy::audio;
    EXPECT_NO_THROW(stage2_mix(m, f.data.train, nullptr, &f.audio, nullptr, tc));
    EXPECT_THROW(RecoveryEngine(m, &f.visual, &f.visual, Variant{}, tc.purification()), ConfigError);
    EXPECT_THROW(stage2_mix(m, Dataset{"empty", {}}, nullptr, &f.audio, &f.visual, tc), DataError);
}

TEST(Stage2, LogIsDeterministicJsonl) {
    const Fixture f = make_fixture(8);
    std::string first;
    for (int rep = 0; rep < 2; ++rep) {
        Model m = init_model(config_for(f.data.spec), 9);
        TrainLog log = stage2_mix(m, f.data.train, &f.data.val, &f.audio, &f.visual, quick_train(0, 1));
        const std::string text = log.to_jsonl();
        if (rep == 0) first = text;
        EXPECT_EQ(text, first);
        std::istringstream is(text);
        std::string line;
        std::size_t epoch = 0;
        while (std::getline(is, line)) {
            const auto j = nlohmann::json::parse(line);
            EXPECT_EQ(j.at("stage"), "stage2");
            EXPECT_EQ(j.at("epoch").get<std::size_t>(), epoch++);
            EXPECT_TRUE(j.at("alpha").contains("text"));
        }
        EXPECT_EQ(epoch, 2u);
    }
}

class TotalLossGradient : public ::testing::TestWithParam<int> {};

TEST_P(TotalLossGradient, TrainableBlocksWithinTolerance) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    const Fixture f = make_fixture(100 + seed);
    Model m = init_model(config_for(f.data.spec, 8, 1), seed);
    std::mt19937_64 rng(seed * 31 + 1);
    randomize_params(m.params, rng);
    RecoveryEngine eng(m, &f.audio, &f.visual, Variant{}, quick_train(0, 0).purification());
    const auto& s = f.data.train.samples[seed % f.data.train.size()];
    const SampleCache c = eng.prepare(s);
    const Modality missing = seed % 2 ? Modality::audio : Modality::visual;
    auto fn = [&](Graph& g) { return stage2_sample_loss(g, eng, s, c, missing, 0.5).total; };
    const GradCheckResult r = grad_check(fn, m.params, 1e-5, {"router.", "dec.", "proj.", "guide."});
    EXPECT_GT(r.checked, 0u);
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "] analytic " << r.worst_analytic
                                     << " numeric " << r.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(Seeds, TotalLossGradient, ::testing::Range(0, 20));
