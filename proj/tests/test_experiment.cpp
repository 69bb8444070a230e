#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "flac/experiment.hpp"

using namespace flac;
namespace fs = std::filesystem;

namespace {

// Small enough to train in a couple of seconds.
const char* kTinyConfig = R"([dataset]
q = 0.95
n_per_class = 30
noise_std = 0.1
test_per_class = 15
bias_per_class = 15
seed = 7

[train]
alpha = 0.5
epochs = 2
batch_size = 64
hidden_dims = 24
repr_dim = 8

[bias]
epochs = 2

[experiment]
repetitions = 2
base_seed = 11
alpha_grid = 0.5, 1
q_list = 0.9
validation_per_class = 10

[eval]
qmi_max_samples = 100
)";

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("flac_test_experiment_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int expect_config_error(const std::string& text, int line, const std::string& field) {
    try {
        parse_config_text(text);
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.line, line) << e.what();
        EXPECT_EQ(e.field, field) << e.what();
        return 1;
    }
    ADD_FAILURE() << "no ConfigError for:\n" << text;
    return 0;
}

}  // namespace

// ---- config ------------------------------------------------------------------

TEST(Config, ParsesKeysAndComments) {
    const auto c = parse_config_text(kTinyConfig);
    EXPECT_DOUBLE_EQ(c.dataset.q, 0.95);
    EXPECT_EQ(c.dataset.n_per_class, 30);
    EXPECT_EQ(c.splits.test_per_class, 15);
    EXPECT_EQ(c.train.hidden_dims, std::vector<int>{24});
    EXPECT_EQ(c.repetitions, 2);
    EXPECT_EQ(c.seed_for(1), 12u);
    EXPECT_EQ(c.alpha_grid, (std::vector<double>{0.5, 1.0}));
    EXPECT_EQ(c.qmi_max_samples, 100u);

    const auto d = parse_config_text("# leading comment\n[train]\nalpha = 2 ; trailing\nkernel = rbf:0.5\n");
    EXPECT_DOUBLE_EQ(d.train.alpha, 2.0);
    EXPECT_EQ(d.train.kernel.name(), KernelKind::rbf(0.5).name());
}

TEST(Config, ErrorsNameLineAndField) {
    expect_config_error("[dataset]\nq = 0.9\nn_per_class = ten\n", 3, "dataset.n_per_class");
    expect_config_error("[train]\n\nalpah = 1\n", 3, "train.alpah");
    expect_config_error("[train]\nkernel = gaussian\n", 2, "train.kernel");
    expect_config_error("[train]\nalpha =\n", 2, "train.alpha");
    expect_config_error("[nonsense]\n", 1, "");
    expect_config_error("alpha = 1\n", 1, "alpha");
    expect_config_error("[train]\nalpha 1\n", 2, "");
    expect_config_error("[train\n", 1, "");
    expect_config_error("[bias]\nmode = oracle\n", 2, "bias.mode");
    expect_config_error("[train]\nepochs = 3.5\n", 2, "train.epochs");
}

TEST(Config, SemanticValidation) {
    EXPECT_THROW(parse_config_text("[dataset]\nq = 1.5\n"), ConfigError);
    EXPECT_THROW(parse_config_text("[train]\nalpha = -1\n"), ConfigError);
    EXPECT_THROW(parse_config_text("[experiment]\nrepetitions = 0\n"), ConfigError);
    EXPECT_THROW(parse_config_text("[experiment]\nq_list = 0.5, 2\n"), ConfigError);
    try {
        parse_config_text("[experiment]\nrepetitions = 0\n");
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field, "experiment.repetitions");
    }
}

TEST(Config, MissingFileIsIoError) {
    EXPECT_THROW(load_config("/nonexistent/flac.ini"), IoError);
}

TEST(Config, EchoRoundTrips) {
    auto c = parse_config_text(kTinyConfig);
    c.train.kernel = KernelKind::rbf(0.25);
    c.train.divergence = Divergence::kl;
    c.train.terms = PairTerms::same_attribute_only;
    c.train.task_loss = TaskLoss::supcon;
    c.bias_mode = BiasCapturingMode::vanilla_task;
    c.train.lr = 1.0 / 3.0;
    const std::string echo = config_echo(c);
    const auto back = parse_config_text(echo);
    EXPECT_EQ(config_echo(back), echo);
    EXPECT_EQ(back.train.lr, c.train.lr);
    EXPECT_EQ(back.train.kernel.name(), c.train.kernel.name());
    EXPECT_EQ(back.output_dir, c.output_dir);
}

TEST(Config, ShippedConfigsLoad) {
    int n = 0;
    for (const auto& entry : fs::directory_iterator(FLAC_CONFIG_DIR)) {
        if (entry.path().extension() != ".ini") continue;
        SCOPED_TRACE(entry.path().string());
        EXPECT_NO_THROW(load_config(entry.path()));
        ++n;
    }
    EXPECT_GE(n, 4);
}

// ---- records and CSV -----------------------------------------------------------

TEST(Records, MeanStdSampleDeviation) {
    const auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
    EXPECT_DOUBLE_EQ(m, 2.5);
    EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
    EXPECT_EQ(mean_std({7.0}).second, 0.0);
    EXPECT_TRUE(std::isnan(mean_std({}).first));
}

namespace {

RunRecord fake_record() {
    RunRecord rec;
    rec.config = "x";
    VariantSpec v{"vanilla", TrainConfig{}, 0.99};
    VariantSpec f{"flac", TrainConfig{}, 0.99};
    f.train.task_loss = TaskLoss::supcon;
    VariantResult a{v, {}}, b{f, {}};
    for (std::uint64_t s = 0; s < 3; ++s) {
        EvalReport u{0.5 + 0.1 * s, 0.4 + 0.05 * s, 0.3, 1e-3 / 3.0, 0.7, 0.1, -0.2, 0.3};
        EvalReport c{0.2, 0.2, 0.2 + 0.01 * s, 2e-3, std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0, 0.0};
        a.reps.push_back({s, u, c});
        b.reps.push_back({s + 10, c, u});
    }
    rec.variants = {a, b};
    return rec;
}

}  // namespace

TEST(Records, SummaryUsesUnbiasedAndConflictSplits) {
    const auto rows = summarize(fake_record());
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].variant, "vanilla");
    EXPECT_EQ(rows[0].task_loss, "ce");
    EXPECT_EQ(rows[1].task_loss, "supcon");
    EXPECT_NEAR(rows[0].acc_unbiased_mean, 0.45, 1e-15);
    EXPECT_NEAR(rows[0].acc_unbiased_std, 0.05, 1e-15);
    EXPECT_NEAR(rows[0].acc_conflict_mean, 0.2, 1e-15);  // overall accuracy on the conflict split
    EXPECT_NEAR(rows[0].qmi, 1e-3 / 3.0, 1e-18);
    EXPECT_DOUBLE_EQ(rows[0].p_rule, 0.7);
    EXPECT_DOUBLE_EQ(rows[0].mistreatment, 0.3);
    EXPECT_EQ(rows[1].seeds, (std::vector<std::uint64_t>{10, 11, 12}));
    EXPECT_TRUE(std::isnan(rows[1].p_rule));
}

TEST(Records, SummaryCsvRoundTripsExactly) {
    const auto rows = summarize(fake_record());
    std::ostringstream os;
    write_summary_csv(os, rows);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kSummaryHeader);
    std::istringstream is(os.str());
    const auto back = read_summary_csv(is);
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].variant, rows[i].variant);
        EXPECT_EQ(back[i].task_loss, rows[i].task_loss);
        EXPECT_EQ(back[i].acc_unbiased_mean, rows[i].acc_unbiased_mean);
        EXPECT_EQ(back[i].acc_conflict_std, rows[i].acc_conflict_std);
        EXPECT_EQ(back[i].qmi, rows[i].qmi);
        EXPECT_EQ(back[i].seeds, rows[i].seeds);
    }
    std::ostringstream again;
    write_summary_csv(again, back);
    EXPECT_EQ(again.str(), os.str());
}

TEST(Records, ReportCsvRoundTripsExactly) {
    const auto rec = fake_record();
    std::ostringstream os;
    write_reports_csv(os, rec);
    const std::string text = os.str();
    // header + 2 variants * 3 seeds * 2 splits
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 13);
    std::istringstream is(os.str());
    const auto back = read_reports_csv(is);
    ASSERT_EQ(back.variants.size(), 2u);
    ASSERT_EQ(back.variants[1].reps.size(), 3u);
    EXPECT_EQ(back.variants[1].reps[2].seed, 12u);
    EXPECT_EQ(back.variants[0].reps[1].unbiased.acc_overall, rec.variants[0].reps[1].unbiased.acc_overall);
    std::ostringstream again;
    write_reports_csv(again, back);
    EXPECT_EQ(again.str(), os.str());
}

TEST(Records, MalformedCsvIsIoError) {
    std::istringstream bad_header("variant,q\n");
    EXPECT_THROW(read_summary_csv(bad_header), IoError);
    std::istringstream short_row(std::string(kReportHeader) + "\nflac,ce,0.9\n");
    EXPECT_THROW(read_reports_csv(short_row), IoError);
    std::istringstream bad_split(std::string(kReportHeader) + "\nflac,ce,0.9,1,train,0,0,0,0,0,0,0,0\n");
    EXPECT_THROW(read_reports_csv(bad_split), IoError);
}

TEST(Records, JsonCarriesSummaryFieldsAndNullForUndefinedPRule) {
    const auto rows = summarize(fake_record());
    const auto j = to_json(rows);
    ASSERT_EQ(j.size(), 2u);
    EXPECT_EQ(j[0]["variant"], "vanilla");
    EXPECT_DOUBLE_EQ(j[0]["acc_unbiased_mean"].get<double>(), rows[0].acc_unbiased_mean);
    EXPECT_TRUE(j[1]["p_rule"].is_null());
    EXPECT_EQ(j[1]["seeds"].size(), 3u);
}

// ---- suites ---------------------------------------------------------------------

TEST(Suites, VariantCounts) {
    const auto c = parse_config_text(kTinyConfig);
    const auto terms = ablation_variants(c, "condition_terms");
    ASSERT_EQ(terms.size(), 3u);
    EXPECT_EQ(terms[0].train.terms, PairTerms::same_target_only);
    EXPECT_EQ(terms[2].train.terms, PairTerms::both);
    EXPECT_EQ(ablation_variants(c, "kernels").size(), 3u);
    EXPECT_EQ(ablation_variants(c, "divergences").size(), 3u);
    const auto grid = ablation_variants(c, "alpha_grid");
    ASSERT_EQ(grid.size(), 2u);
    EXPECT_EQ(grid[1].name, "flac_alpha1");
    const auto sweep = ablation_variants(c, "q_sweep");
    ASSERT_EQ(sweep.size(), 2u);  // one q, Vanilla + FLAC
    EXPECT_DOUBLE_EQ(sweep[0].q, 0.9);
    EXPECT_EQ(sweep[0].train.alpha, 0.0);
    EXPECT_GT(sweep[1].train.alpha, 0.0);
    for (const auto& s : ablation_suites()) EXPECT_NO_THROW(ablation_variants(c, s));
    EXPECT_THROW(ablation_variants(c, "everything"), ConfigError);
}

TEST(Suites, ProtocolNeedsPositiveAlpha) {
    auto c = parse_config_text(kTinyConfig);
    c.train.alpha = 0.0;
    EXPECT_THROW(run_protocol(c), ConfigError);
    EXPECT_THROW(ablation_variants(c, "kernels"), ConfigError);
}

// ---- end-to-end runs ---------------------------------------------------------------

TEST(Protocol, DeterministicAndPersistedByteIdentical) {
    const auto c = parse_config_text(kTinyConfig);
    const auto d1 = scratch("proto1"), d2 = scratch("proto2");
    RunOptions o1, o2;
    o1.output_dir = d1;
    o2.output_dir = d2;
    const auto r1 = run_protocol(c, o1);
    const auto r2 = run_protocol(c, o2);
    ASSERT_EQ(r1.variants.size(), 2u);
    EXPECT_EQ(r1.variants[0].spec.name, "vanilla");
    EXPECT_EQ(r1.variants[1].spec.name, "flac");
    ASSERT_EQ(r1.variants[1].reps.size(), 2u);
    EXPECT_EQ(r1.variants[1].reps[1].seed, 12u);
    persist(r1, d1);
    persist(r2, d2);
    for (const char* f : {"summary.csv", "summary.txt", "reports.csv", "config.ini"}) {
        EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
        EXPECT_FALSE(slurp(d1 / f).empty()) << f;
    }
    EXPECT_EQ(slurp(d1 / "flac_q0.95_seed11" / "history.csv"), slurp(d2 / "flac_q0.95_seed11" / "history.csv"));
    EXPECT_TRUE(fs::exists(d1 / "vanilla_q0.95_seed12" / "model.flck"));
    EXPECT_EQ(parse_config_text(slurp(d1 / "config.ini")).train.alpha, 0.5);
}

TEST(Protocol, ZeroAlphaRowMatchesVanillaOnlyRun) {
    const auto c = parse_config_text(kTinyConfig);
    auto with_zero = ablation_variants(c, "alpha_grid");
    with_zero.front().train.alpha = 0.0;
    with_zero.front().name = "flac_alpha0";
    const auto a = run_variants(c, with_zero);
    const auto b = run_variants(c, {vanilla_variant(c, c.dataset.q)});
    ASSERT_EQ(a.variants[0].reps.size(), b.variants[0].reps.size());
    for (std::size_t i = 0; i < a.variants[0].reps.size(); ++i) {
        const auto& x = a.variants[0].reps[i];
        const auto& y = b.variants[0].reps[i];
        EXPECT_EQ(x.unbiased.acc_unbiased, y.unbiased.acc_unbiased);
        EXPECT_EQ(x.conflict.acc_overall, y.conflict.acc_overall);
        EXPECT_EQ(x.unbiased.qmi, y.unbiased.qmi);
    }
}

TEST(Protocol, DivergenceBecomesRunFailure) {
    auto c = parse_config_text(kTinyConfig);
    c.train.lr = 1e300;
    try {
        run_protocol(c);
        FAIL() << "expected RunFailure";
    } catch (const RunFailure& e) {
        EXPECT_TRUE(e.diverged);
        EXPECT_EQ(e.run_index, 0u);
        EXPECT_NE(std::string(e.what()).find("vanilla"), std::string::npos);
    }
}

TEST(GridSearch, ScoresEveryAlphaAndPicksTheBest) {
    const auto c = parse_config_text(kTinyConfig);
    const auto r = gridsearch_alpha(c);
    ASSERT_EQ(r.alphas, (std::vector<double>{0.5, 1.0}));
    ASSERT_EQ(r.validation_acc.size(), 2u);
    const auto best = std::max_element(r.validation_acc.begin(), r.validation_acc.end()) - r.validation_acc.begin();
    EXPECT_EQ(r.best_alpha, r.alphas[static_cast<std::size_t>(best)]);
    std::ostringstream os;
    write_gridsearch_csv(os, r);
    const std::string text = os.str();
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

// ---- CLI -----------------------------------------------------------------------------

namespace {

int cli(const std::string& args, const fs::path& dir) {
    const std::string cmd = std::string(FLAC_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                            (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
    const fs::path p = dir / name;
    std::ofstream(p) << text;
    return p;
}

}  // namespace

TEST(Cli, ExitCodes) {
    const auto dir = scratch("cli_codes");
    const auto good = write_config(dir, "good.ini", kTinyConfig);
    const auto bad = write_config(dir, "bad.ini", "[train]\nalpha = lots\n");
    const auto diverge = write_config(dir, "diverge.ini", std::string(kTinyConfig) + "[train]\nlr = 1e300\n");

    EXPECT_EQ(cli("run --config " + bad.string(), dir), 2);
    EXPECT_NE(slurp(dir / "stderr.txt").find("train.alpha"), std::string::npos);
    EXPECT_EQ(cli("frobnicate", dir), 2);
    EXPECT_EQ(cli("run", dir), 2);  // --config is required
    EXPECT_EQ(cli("ablate --config " + good.string() + " --suite nope", dir), 2);
    EXPECT_EQ(cli("run --config " + (dir / "missing.ini").string(), dir), 4);
    EXPECT_EQ(cli("eval --checkpoint " + (dir / "none.flck").string() + " --data " + (dir / "none.cgrd").string(), dir),
              4);
    EXPECT_EQ(cli("run --config " + diverge.string() + " --out " + (dir / "div").string(), dir), 3);
    std::ofstream(dir / "plainfile") << "x";
    EXPECT_EQ(cli("run --config " + good.string() + " --out " + (dir / "plainfile" / "sub").string(), dir), 4);
}

TEST(Cli, GenerateTrainEvalRoundTrip) {
    const auto dir = scratch("cli_flow");
    const auto cfg = write_config(dir, "tiny.ini", kTinyConfig);
    ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + (dir / "data").string() + " --json", dir), 0);
    const auto gen = nlohmann::json::parse(slurp(dir / "stdout.txt"));
    EXPECT_EQ(gen["train"]["samples"].get<int>(), 300);
    EXPECT_EQ(gen["test_unbiased"]["samples"].get<int>(), 150);
    EXPECT_TRUE(fs::exists(dir / "data" / "train.cgrd"));
    EXPECT_TRUE(fs::exists(dir / "data" / "train_manifest.csv"));

    ASSERT_EQ(cli("train --config " + cfg.string() + " --out " + (dir / "model").string() + " --json", dir), 0);
    const auto trained = nlohmann::json::parse(slurp(dir / "stdout.txt"));
    EXPECT_EQ(trained["seed"].get<int>(), 11);

    ASSERT_EQ(cli("eval --checkpoint " + (dir / "model" / "model.flck").string() + " --data " +
                      (dir / "data" / "test_unbiased.cgrd").string() + " --json",
                  dir),
              0);
    const auto ev = nlohmann::json::parse(slurp(dir / "stdout.txt"));
    // Same model, same split, same QMI seed: the CLI eval must reproduce the train-time report.
    EXPECT_EQ(ev["acc_unbiased"], trained["unbiased"]["acc_unbiased"]);
    EXPECT_EQ(ev["acc_overall"], trained["unbiased"]["acc_overall"]);

    ASSERT_EQ(cli("eval --checkpoint " + (dir / "model" / "model.flck").string() + " --data " +
                      (dir / "data" / "test_unbiased.cgrd").string(),
                  dir),
              0);
    const std::string csv = slurp(dir / "stdout.txt");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "acc_overall,acc_unbiased,acc_bias_conflict,qmi,p_rule,dfpr,dfnr,mistreatment");
}

TEST(Cli, RunMatchesLibraryAndSeedOverride) {
    const auto dir = scratch("cli_run");
    const auto cfg = write_config(dir, "tiny.ini", kTinyConfig);
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "a").string(), dir), 0);
    EXPECT_NE(slurp(dir / "stdout.txt").find("vanilla"), std::string::npos);
    const auto lib = run_protocol(parse_config_text(kTinyConfig));
    std::ostringstream os;
    write_summary_csv(os, summarize(lib));
    EXPECT_EQ(slurp(dir / "a" / "summary.csv"), os.str());

    ASSERT_EQ(cli("run --config " + cfg.string() + " --seed 100 --json --out " + (dir / "b").string(), dir), 0);
    const auto j = nlohmann::json::parse(slurp(dir / "stdout.txt"));
    EXPECT_EQ(j["summary"][0]["seeds"][0].get<int>(), 100);
    EXPECT_EQ(j["summary"][0]["seeds"][1].get<int>(), 101);
}

TEST(Cli, AblateAndGridSearch) {
    const auto dir = scratch("cli_ablate");
    const auto cfg = write_config(dir, "tiny.ini", std::string(kTinyConfig) + "[experiment]\nrepetitions = 1\n");
    ASSERT_EQ(cli("ablate --config " + cfg.string() + " --suite condition_terms --json --out " + dir.string(), dir), 0);
    const auto j = nlohmann::json::parse(slurp(dir / "stdout.txt"));
    ASSERT_EQ(j["summary"].size(), 3u);
    EXPECT_EQ(j["summary"][0]["variant"], "flac_" + pair_terms_name(PairTerms::same_target_only));
    EXPECT_TRUE(fs::exists(dir / "condition_terms" / "summary.csv"));

    ASSERT_EQ(cli("gridsearch-alpha --config " + cfg.string() + " --out " + (dir / "grid").string() + " --json", dir), 0);
    const auto g = nlohmann::json::parse(slurp(dir / "stdout.txt"));
    EXPECT_EQ(g["alphas"].size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "grid" / "gridsearch.csv"));
}
