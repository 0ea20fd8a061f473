#include "prime/checkpoint.hpp"
#include "prime/config.hpp"
#include "prime/error.hpp"
#include "prime/experiment.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sys/wait.h>

using namespace prime;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.seed = 11;
    c.data.seed = 11;
    c.data.n_patients = 90;
    c.data.lengths = {6, 1, 6};
    c.data.dims = {5, 4, 3};
    c.model.input_dims = c.data.dims;
    c.model.tokenizer.tokens = 2;
    c.model.tokenizer.dim = 8;
    c.model.tokenizer.heads = 2;
    c.model.tokenizer.ffn_hidden = 8;
    c.model.bank.prototypes = 6;
    c.model.bank.refine_hidden = 8;
    c.model.fusion.heads = 2;
    c.model.fusion.ffn_hidden = 8;
    c.model.ssl.proj_dim = 4;
    c.model.augment.top_ks = 3;
    c.pretrain.epochs = 3;
    c.pretrain.batch_size = 16;
    c.downstream.epochs = 4;
    c.downstream.k_time = 3;
    c.evaluation.folds = 3;
    return c;
}

const Cohort& tiny_cohort() {
    static const Cohort cohort = generate_synthetic_cohort(tiny_config().data);
    return cohort;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("prime_test_exp_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PRIME_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

} // namespace

TEST(Pretraining, BestValIsRunningMinimum) {
    const PretrainOutcome r = run_pretraining(tiny_config(), tiny_cohort().patients);
    ASSERT_EQ(r.log.size(), 3u);
    double best = INFINITY;
    for (const PretrainLogRow& row : r.log) {
        EXPECT_TRUE(std::isfinite(row.total));
        best = std::min(best, row.val_total);
        EXPECT_DOUBLE_EQ(row.best_val, best);
    }
    EXPECT_DOUBLE_EQ(r.log[r.best_epoch - r.log.front().epoch].val_total, best);
    EXPECT_EQ(r.train_idx.size() + r.val_idx.size(), tiny_cohort().patients.size());
}

TEST(Pretraining, DeterministicAndBlindToLabels) {
    const ExperimentConfig cfg = tiny_config();
    const PretrainOutcome a = run_pretraining(cfg, tiny_cohort().patients);
    PrimeModel ma = a.model;

    std::vector<PatientRecord> tampered = tiny_cohort().patients;
    for (std::size_t i = 0; i < tampered.size(); ++i) {
        tampered[i].time_months = 1.0 + static_cast<double>((i * 37) % 90);
        tampered[i].censored = i % 3 == 0;
        tampered[i].pfi_months.reset();
    }
    const PretrainOutcome b = run_pretraining(cfg, tampered);
    PrimeModel mb = b.model;
    EXPECT_EQ(parameter_hash(ma.parameters()), parameter_hash(mb.parameters()));
    EXPECT_EQ(pretrain_log_csv(a.log), pretrain_log_csv(b.log));
}

TEST(Pretraining, ValidationSplitIsPerSite) {
    ExperimentConfig cfg = tiny_config();
    cfg.pretrain.epochs = 1;
    std::vector<PatientRecord> patients = tiny_cohort().patients;
    for (std::size_t i = 0; i < patients.size(); ++i) patients[i].site = i < 30 ? 0 : 1;
    const PretrainOutcome r = run_pretraining(cfg, patients);
    const auto pool = pretrain_pool(patients, cfg.pretrain.cohort);
    for (std::size_t site : {0u, 1u}) {
        std::size_t members = 0, val = 0;
        for (std::size_t i : pool) members += patients[i].site == site;
        for (std::size_t i : r.val_idx) val += patients[i].site == site;
        EXPECT_EQ(val, static_cast<std::size_t>(std::lround(cfg.pretrain.val_fraction * static_cast<double>(members))));
    }
}

TEST(Pretraining, FullOnlyPoolIsTriModal) {
    const auto pool = pretrain_pool(tiny_cohort().patients, PretrainCohort::FullOnly);
    for (std::size_t i : pool) EXPECT_EQ(count(tiny_cohort().patients[i].availability), 3u);
    EXPECT_LT(pool.size(), tiny_cohort().patients.size());
}

TEST(Protocol, LinearProbeGridIsCompleteAndFrozen) {
    const ExperimentConfig cfg = tiny_config();
    PrimeModel model(cfg.model, cfg.seed);
    ProtocolOptions opt;
    const ProtocolResult r = run_protocol(cfg, tiny_cohort().patients, model, opt);
    EXPECT_EQ(r.frozen_hash_before, r.frozen_hash_after);
    EXPECT_EQ(r.frozen_hash_after, parameter_hash(model.parameters()));

    const std::vector<SummaryRow> rows = summarize(r.metrics);
    EXPECT_EQ(rows.size(), 7u * 3u);
    std::set<std::pair<Task, std::string>> cells;
    for (const SummaryRow& s : rows) {
        cells.emplace(s.task, s.condition);
        EXPECT_TRUE(std::isfinite(s.mean)) << task_name(s.task) << " " << s.condition;
        EXPECT_EQ(s.folds, 3u);
    }
    EXPECT_EQ(cells.size(), 21u);
    EXPECT_EQ(r.subsample_hashes.size(), 3u * 3u);

    const std::vector<Prediction> back = parse_predictions_csv(predictions_csv(r.predictions));
    ASSERT_EQ(back.size(), r.predictions.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].patient_id, r.predictions[i].patient_id);
        EXPECT_EQ(back[i].condition, r.predictions[i].condition);
        EXPECT_EQ(back[i].task, r.predictions[i].task);
        EXPECT_DOUBLE_EQ(back[i].score, r.predictions[i].score);
    }
    const SurvivalAnalysis sa = analyze_survival(r.predictions);
    EXPECT_EQ(sa.split.high.size() + sa.split.low.size(), tiny_cohort().patients.size());
}

TEST(Protocol, ConditionMatchesDeletedFiles) {
    const ExperimentConfig cfg = tiny_config();
    const fs::path dir = scratch("li");
    write_cohort(tiny_cohort(), dir, DType::F64);
    for (const PatientRecord& p : tiny_cohort().patients)
        if (p.availability[0]) fs::remove(embedding_path(dir, p.id, Modality::Image));
    const Cohort stripped = load_embeddings(dir / "manifest.csv", dir);

    PrimeModel model(cfg.model, 3);
    FeatureCache masked(model, tiny_cohort().patients, Pooling::Reliable);
    FeatureCache deleted(model, stripped.patients, Pooling::Reliable);
    std::size_t compared = 0;
    for (std::size_t i = 0; i < stripped.patients.size(); ++i) {
        ASSERT_EQ(stripped.patients[i].id, tiny_cohort().patients[i].id);
        ASSERT_FALSE(stripped.patients[i].availability[0]);
        if (count(stripped.patients[i].availability) == 0) continue;
        const Tensor a = masked.get(i, condition("LI").mask);
        const Tensor b = deleted.get(i, kAllAvailable);
        ASSERT_EQ(a.data().size(), b.data().size());
        for (std::size_t k = 0; k < a.data().size(); ++k) EXPECT_EQ(a.data()[k], b.data()[k]);
        ++compared;
    }
    EXPECT_GT(compared, 50u);
}

TEST(Protocol, SubsamplesAreNested) {
    std::vector<std::size_t> train(200);
    for (std::size_t i = 0; i < train.size(); ++i) train[i] = 3 * i;
    const auto full = subsample_train(train, 1.0, 5, 0);
    const auto p9 = subsample_train(train, 0.9, 5, 0);
    const auto p5 = subsample_train(train, 0.5, 5, 0);
    EXPECT_EQ(full, train);
    EXPECT_EQ(p9.size(), 180u);
    EXPECT_EQ(p5.size(), 100u);
    EXPECT_TRUE(std::includes(p9.begin(), p9.end(), p5.begin(), p5.end()));
    EXPECT_EQ(p5, subsample_train(train, 0.5, 5, 0));
    EXPECT_NE(p5, subsample_train(train, 0.5, 5, 1));
}

TEST(Ablation, ArmsMapToConfigEdits) {
    const std::vector<AblationArm> arms = ablation_arms();
    ASSERT_GE(arms.size(), 5u);
    const ExperimentConfig base;
    for (const AblationArm& arm : arms) {
        const ExperimentConfig c = apply_arm(base, arm);
        if (!arm.align) EXPECT_DOUBLE_EQ(c.model.ssl.lambda, 0.0);
        if (!arm.fusion) EXPECT_DOUBLE_EQ(c.model.ssl.lambda, 1.0);
        if (!arm.prototypes) EXPECT_EQ(c.model.fill, FillMode::Zeros);
        if (!arm.missing_data) EXPECT_EQ(c.pretrain.cohort, PretrainCohort::FullOnly);
        if (arm.align && arm.fusion && arm.prototypes && arm.missing_data) EXPECT_EQ(fingerprint(c), fingerprint(base));
    }
}

TEST(Cli, ExitCodes) {
    const fs::path dir = scratch("cli");
    EXPECT_EQ(run_cli("no-such-command"), 2);
    std::ofstream(dir / "bad.json") << R"({"fusion": {"expert_count": 4}})";
    EXPECT_EQ(run_cli("gradcheck --config " + (dir / "bad.json").string() + " --out " + dir.string()), 2);
    EXPECT_EQ(run_cli("pretrain --out " + dir.string() + " --config " + (dir / "absent.json").string()), 2);
    EXPECT_EQ(run_cli("gradcheck --inject-nan --out " + dir.string()), 3);
}

TEST(Cli, SynthPretrainRerunIsHashIdentical) {
    const fs::path dir = scratch("rerun");
    nlohmann::json j = config_to_json(tiny_config());
    j["paths"]["cohort_dir"] = (dir / "cohort").string();
    std::ofstream(dir / "c.json") << j.dump();
    const std::string cfg = " --config " + (dir / "c.json").string();
    ASSERT_EQ(run_cli("synth" + cfg), 0);
    ASSERT_EQ(run_cli("pretrain" + cfg + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run_cli("pretrain" + cfg + " --out " + (dir / "b").string()), 0);
    const auto la = nlohmann::json::parse(slurp(dir / "a" / "ledger.json"));
    const auto lb = nlohmann::json::parse(slurp(dir / "b" / "ledger.json"));
    EXPECT_EQ(la["outputs"], lb["outputs"]);
    EXPECT_EQ(la["run_id"], lb["run_id"]);
}
