#pragma once
// Experiment runner: INI-style configs, the Vanilla-vs-FLAC protocol,
// ablation suites, alpha grid search and CSV / text / JSON reporting.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flac/core.hpp"
#include "flac/data.hpp"
#include "flac/metrics.hpp"
#include "flac/training.hpp"

namespace flac {

// ---- configuration -----------------------------------------------------------------------

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& message, int line = 0, std::string field = {})
        : std::runtime_error(line > 0 ? "config line " + std::to_string(line) + (field.empty() ? "" : " (" + field + ")") +
                                            ": " + message
                                      : (field.empty() ? "" : field + ": ") + message),
          line(line), field(std::move(field)) {}
    int line;
    std::string field;
};

// Raised when a repetition fails; carries the repetition index.
class RunFailure : public std::runtime_error {
public:
    RunFailure(std::size_t run_index, const std::string& variant, const std::exception& cause, bool diverged)
        : std::runtime_error("run " + std::to_string(run_index) + " (" + variant + "): " + cause.what()),
          run_index(run_index), diverged(diverged) {}
    std::size_t run_index;
    bool diverged;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    SplitSizes splits;
    int validation_per_class = 200;  // unbiased validation split used by the alpha grid search
    TrainConfig train;
    BiasCapturingMode bias_mode = BiasCapturingMode::attribute_supervised;
    BiasFeatures bias_features = BiasFeatures::probabilities;
    int bias_epochs = 10;
    int repetitions = 5;
    std::uint64_t base_seed = 0;
    std::filesystem::path output_dir = "runs";
    std::vector<double> alpha_grid{0.3, 1.0, 3.0};
    std::vector<double> q_list{0.9, 0.99};
    std::size_t qmi_max_samples = 2000;

    std::uint64_t seed_for(std::size_t run) const { return base_seed + run; }

    void validate() const {
        try {
            dataset.validate();
            train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (repetitions < 1) throw ConfigError("must be at least 1", 0, "experiment.repetitions");
        if (bias_epochs < 1) throw ConfigError("must be positive", 0, "bias.epochs");
        if (splits.test_per_class < 1) throw ConfigError("must be positive", 0, "dataset.test_per_class");
        if (splits.bias_per_class < 1) throw ConfigError("must be positive", 0, "dataset.bias_per_class");
        if (validation_per_class < 1) throw ConfigError("must be positive", 0, "experiment.validation_per_class");
        if (qmi_max_samples < 4) throw ConfigError("must be at least 4", 0, "eval.qmi_max_samples");
        for (double a : alpha_grid)
            if (!std::isfinite(a) || a < 0.0) throw ConfigError("values must be finite and >= 0", 0, "experiment.alpha_grid");
        for (double q : q_list)
            if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("values must lie in [0, 1]", 0, "experiment.q_list");
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest form that round-trips
    return std::string(buf, res.ptr);
}

inline double parse_double_strict(std::string_view text) {
    const std::string t = trim(text);
    if (t == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (t == "inf") return std::numeric_limits<double>::infinity();
    if (t == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
        throw std::invalid_argument("not a number: '" + t + "'");
    }
    return v;
}

template <class Int>
Int parse_int_strict(std::string_view text) {
    const std::string t = trim(text);
    Int v{};
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
        throw std::invalid_argument("not an integer: '" + t + "'");
    }
    return v;
}

inline bool parse_bool_strict(std::string_view text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw std::invalid_argument("not a boolean: '" + t + "'");
}

inline std::vector<std::string> split_list(std::string_view text, char sep = ',') {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is{std::string(text)};
    while (std::getline(is, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::vector<double> parse_double_list(std::string_view text) {
    std::vector<double> out;
    for (const auto& item : split_list(text)) {
        // Accept "1/3" style fractions for decay points.
        const auto slash = item.find('/');
        if (slash != std::string::npos) {
            out.push_back(parse_double_strict(item.substr(0, slash)) / parse_double_strict(item.substr(slash + 1)));
        } else {
            out.push_back(parse_double_strict(item));
        }
    }
    return out;
}

inline std::vector<int> parse_int_list(std::string_view text) {
    std::vector<int> out;
    for (const auto& item : split_list(text)) out.push_back(parse_int_strict<int>(item));
    return out;
}

template <class T>
std::string join(const std::vector<T>& values, const char* sep = ",") {
    std::ostringstream os;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) os << sep;
        if constexpr (std::is_floating_point_v<T>) os << format_double(values[i]);
        else os << values[i];
    }
    return os.str();
}

inline void apply_key(ExperimentConfig& c, const std::string& section, const std::string& key, const std::string& v) {
    auto& d = c.dataset;
    auto& t = c.train;
    if (section == "dataset") {
        if (key == "n_classes") d.n_classes = parse_int_strict<int>(v);
        else if (key == "n_colors") d.n_colors = parse_int_strict<int>(v);
        else if (key == "grid") d.grid = parse_int_strict<int>(v);
        else if (key == "q") d.q = parse_double_strict(v);
        else if (key == "n_per_class") d.n_per_class = parse_int_strict<int>(v);
        else if (key == "seed") d.seed = parse_int_strict<std::uint64_t>(v);
        else if (key == "noise_std") d.noise_std = parse_double_strict(v);
        else if (key == "glyph_contrast") d.glyph_contrast = parse_double_strict(v);
        else if (key == "test_per_class") c.splits.test_per_class = parse_int_strict<int>(v);
        else if (key == "bias_per_class") c.splits.bias_per_class = parse_int_strict<int>(v);
        else throw std::out_of_range("unknown key");
    } else if (section == "train") {
        if (key == "alpha") t.alpha = parse_double_strict(v);
        else if (key == "epochs") t.epochs = parse_int_strict<int>(v);
        else if (key == "batch_size") t.batch_size = parse_int_strict<int>(v);
        else if (key == "lr") t.lr = parse_double_strict(v);
        else if (key == "weight_decay") t.weight_decay = parse_double_strict(v);
        else if (key == "lr_decay_points") t.lr_decay_points = parse_double_list(v);
        else if (key == "lr_decay_factor") t.lr_decay_factor = parse_double_strict(v);
        else if (key == "task_loss") t.task_loss = parse_task_loss(trim(v));
        else if (key == "supcon_temperature") t.supcon_temperature = parse_double_strict(v);
        else if (key == "kernel") t.kernel = KernelKind::parse(trim(v));
        else if (key == "divergence") t.divergence = parse_divergence(trim(v));
        else if (key == "terms") t.terms = parse_pair_terms(trim(v));
        else if (key == "normalize") t.flac_normalize = parse_bool_strict(v);
        else if (key == "hidden_dims") t.hidden_dims = parse_int_list(v);
        else if (key == "repr_dim") t.repr_dim = parse_int_strict<int>(v);
        else throw std::out_of_range("unknown key");
    } else if (section == "bias") {
        if (key == "mode") c.bias_mode = parse_bias_mode(trim(v));
        else if (key == "features") c.bias_features = parse_bias_features(trim(v));
        else if (key == "epochs") c.bias_epochs = parse_int_strict<int>(v);
        else throw std::out_of_range("unknown key");
    } else if (section == "experiment") {
        if (key == "repetitions") c.repetitions = parse_int_strict<int>(v);
        else if (key == "base_seed") c.base_seed = parse_int_strict<std::uint64_t>(v);
        else if (key == "output_dir") c.output_dir = trim(v);
        else if (key == "alpha_grid") c.alpha_grid = parse_double_list(v);
        else if (key == "q_list") c.q_list = parse_double_list(v);
        else if (key == "validation_per_class") c.validation_per_class = parse_int_strict<int>(v);
        else throw std::out_of_range("unknown key");
    } else if (section == "eval") {
        if (key == "qmi_max_samples") c.qmi_max_samples = parse_int_strict<std::size_t>(v);
        else throw std::out_of_range("unknown key");
    } else {
        throw std::logic_error("unknown section");
    }
}

}  // namespace detail

// Sections: [dataset] [train] [bias] [experiment] [eval]; "key = value" lines;
// '#' or ';' start comments. Errors name the line and the offending field.
inline ExperimentConfig parse_config(std::istream& is) {
    ExperimentConfig c;
    std::string line, section;
    int number = 0;
    while (std::getline(is, line)) {
        ++number;
        const auto hash = line.find_first_of("#;");
        const std::string text = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (text.empty()) continue;
        if (text.front() == '[') {
            if (text.back() != ']') throw ConfigError("unterminated section header", number);
            section = detail::trim(text.substr(1, text.size() - 2));
            static const std::vector<std::string> known{"dataset", "train", "bias", "experiment", "eval"};
            if (std::find(known.begin(), known.end(), section) == known.end()) {
                throw ConfigError("unknown section [" + section + "]", number);
            }
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) throw ConfigError("expected 'key = value'", number);
        const std::string key = detail::trim(text.substr(0, eq));
        const std::string value = detail::trim(text.substr(eq + 1));
        if (section.empty()) throw ConfigError("key outside any section", number, key);
        const std::string field = section + "." + key;
        if (value.empty()) throw ConfigError("missing value", number, field);
        try {
            detail::apply_key(c, section, key, value);
        } catch (const std::out_of_range&) {
            throw ConfigError("unknown field", number, field);
        } catch (const std::exception& e) {
            throw ConfigError(e.what(), number, field);
        }
    }
    c.validate();
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    return parse_config(is);
}

// Canonical text form; parse_config(config_echo(c)) reproduces c.
inline std::string config_echo(const ExperimentConfig& c) {
    using detail::format_double;
    std::ostringstream os;
    const auto& d = c.dataset;
    const auto& t = c.train;
    os << "[dataset]\n"
       << "n_classes = " << d.n_classes << "\nn_colors = " << d.n_colors << "\ngrid = " << d.grid
       << "\nq = " << format_double(d.q) << "\nn_per_class = " << d.n_per_class << "\nseed = " << d.seed
       << "\nnoise_std = " << format_double(d.noise_std) << "\nglyph_contrast = " << format_double(d.glyph_contrast)
       << "\ntest_per_class = " << c.splits.test_per_class << "\nbias_per_class = " << c.splits.bias_per_class
       << "\n\n[train]\n"
       << "alpha = " << format_double(t.alpha) << "\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size
       << "\nlr = " << format_double(t.lr) << "\nweight_decay = " << format_double(t.weight_decay)
       << "\nlr_decay_points = " << detail::join(t.lr_decay_points)
       << "\nlr_decay_factor = " << format_double(t.lr_decay_factor) << "\ntask_loss = " << task_loss_name(t.task_loss)
       << "\nsupcon_temperature = " << format_double(t.supcon_temperature) << "\nkernel = " << t.kernel.name()
       << "\ndivergence = " << divergence_name(t.divergence) << "\nterms = " << pair_terms_name(t.terms)
       << "\nnormalize = " << (t.flac_normalize ? "true" : "false") << "\nhidden_dims = " << detail::join(t.hidden_dims)
       << "\nrepr_dim = " << t.repr_dim << "\n\n[bias]\n"
       << "mode = " << bias_mode_name(c.bias_mode) << "\nfeatures = " << bias_features_name(c.bias_features)
       << "\nepochs = " << c.bias_epochs << "\n\n[experiment]\n"
       << "repetitions = " << c.repetitions << "\nbase_seed = " << c.base_seed
       << "\noutput_dir = " << c.output_dir.string() << "\nalpha_grid = " << detail::join(c.alpha_grid)
       << "\nq_list = " << detail::join(c.q_list) << "\nvalidation_per_class = " << c.validation_per_class
       << "\n\n[eval]\nqmi_max_samples = " << c.qmi_max_samples << "\n";
    return os.str();
}

// ---- records ---------------------------------------------------------------------------------

struct VariantSpec {
    std::string name;
    TrainConfig train;  // alpha = 0 means plain task training (Vanilla)
    double q = 0.99;
};

struct RepetitionResult {
    std::uint64_t seed = 0;
    EvalReport unbiased;
    EvalReport conflict;
};

struct VariantResult {
    VariantSpec spec;
    std::vector<RepetitionResult> reps;
};

struct SummaryRow {
    std::string variant;
    std::string task_loss;
    double q = 0.0;
    double acc_unbiased_mean = 0.0, acc_unbiased_std = 0.0;
    double acc_conflict_mean = 0.0, acc_conflict_std = 0.0;
    double qmi = 0.0;
    double p_rule = 0.0;
    double mistreatment = 0.0;
    std::vector<std::uint64_t> seeds;
};

struct RunRecord {
    std::string config;
    std::vector<VariantResult> variants;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0.0};
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

// Accuracy on the unbiased split, accuracy on the bias-conflict split, and
// QMI / p% / mistreatment from the unbiased split; mean (and std) over seeds.
inline SummaryRow summarize(const VariantResult& v) {
    SummaryRow row;
    row.variant = v.spec.name;
    row.task_loss = task_loss_name(v.spec.train.task_loss);
    row.q = v.spec.q;
    std::vector<double> ub, cf, qm, pr, mt;
    for (const auto& r : v.reps) {
        ub.push_back(r.unbiased.acc_unbiased);
        cf.push_back(r.conflict.acc_overall);
        qm.push_back(r.unbiased.qmi);
        pr.push_back(r.unbiased.p_rule);
        mt.push_back(r.unbiased.mistreatment);
        row.seeds.push_back(r.seed);
    }
    std::tie(row.acc_unbiased_mean, row.acc_unbiased_std) = mean_std(ub);
    std::tie(row.acc_conflict_mean, row.acc_conflict_std) = mean_std(cf);
    row.qmi = mean_std(qm).first;
    row.p_rule = mean_std(pr).first;
    row.mistreatment = mean_std(mt).first;
    return row;
}

inline std::vector<SummaryRow> summarize(const RunRecord& record) {
    std::vector<SummaryRow> rows;
    for (const auto& v : record.variants) rows.push_back(summarize(v));
    return rows;
}

// ---- CSV emission and parsing ------------------------------------------------------------

inline constexpr const char* kSummaryHeader =
    "variant,task_loss_kind,q,acc_unbiased_mean,acc_unbiased_std,acc_conflict_mean,acc_conflict_std,qmi,p_rule,"
    "mistreatment,seeds";

inline constexpr const char* kReportHeader =
    "variant,task_loss_kind,q,seed,split,acc_overall,acc_unbiased,acc_bias_conflict,qmi,p_rule,dfpr,dfnr,"
    "mistreatment";

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
    using detail::format_double;
    os << kSummaryHeader << '\n';
    for (const auto& r : rows) {
        os << r.variant << ',' << r.task_loss << ',' << format_double(r.q) << ',' << format_double(r.acc_unbiased_mean)
           << ',' << format_double(r.acc_unbiased_std) << ',' << format_double(r.acc_conflict_mean) << ','
           << format_double(r.acc_conflict_std) << ',' << format_double(r.qmi) << ',' << format_double(r.p_rule) << ','
           << format_double(r.mistreatment) << ',' << detail::join(r.seeds, ";") << '\n';
    }
}

namespace detail {

inline std::vector<std::string> csv_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(line);
    while (std::getline(is, item, ',')) out.push_back(item);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline void expect_header(std::istream& is, const char* header) {
    std::string line;
    if (!std::getline(is, line) || line != header) throw IoError("csv: unexpected header '" + line + "'");
}

}  // namespace detail

inline std::vector<SummaryRow> read_summary_csv(std::istream& is) {
    detail::expect_header(is, kSummaryHeader);
    std::vector<SummaryRow> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = detail::csv_fields(line);
        if (f.size() != 11) throw IoError("summary csv: expected 11 fields, got " + std::to_string(f.size()));
        SummaryRow r;
        r.variant = f[0];
        r.task_loss = f[1];
        r.q = detail::parse_double_strict(f[2]);
        r.acc_unbiased_mean = detail::parse_double_strict(f[3]);
        r.acc_unbiased_std = detail::parse_double_strict(f[4]);
        r.acc_conflict_mean = detail::parse_double_strict(f[5]);
        r.acc_conflict_std = detail::parse_double_strict(f[6]);
        r.qmi = detail::parse_double_strict(f[7]);
        r.p_rule = detail::parse_double_strict(f[8]);
        r.mistreatment = detail::parse_double_strict(f[9]);
        for (const auto& s : detail::split_list(f[10], ';')) r.seeds.push_back(detail::parse_int_strict<std::uint64_t>(s));
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_report_row(std::ostream& os, const VariantSpec& v, std::uint64_t seed, const std::string& split,
                             const EvalReport& e) {
    using detail::format_double;
    os << v.name << ',' << task_loss_name(v.train.task_loss) << ',' << format_double(v.q) << ',' << seed << ','
       << split << ',' << format_double(e.acc_overall) << ',' << format_double(e.acc_unbiased) << ','
       << format_double(e.acc_bias_conflict) << ',' << format_double(e.qmi) << ',' << format_double(e.p_rule) << ','
       << format_double(e.dfpr) << ',' << format_double(e.dfnr) << ',' << format_double(e.mistreatment) << '\n';
}

// One row per (variant, seed, split).
inline void write_reports_csv(std::ostream& os, const RunRecord& record) {
    os << kReportHeader << '\n';
    for (const auto& v : record.variants) {
        for (const auto& r : v.reps) {
            write_report_row(os, v.spec, r.seed, "unbiased", r.unbiased);
            write_report_row(os, v.spec, r.seed, "bias_conflict", r.conflict);
        }
    }
}

// Rebuilds variants and per-seed reports from write_reports_csv output.
// Training configs are not part of the file; only name, task loss and q return.
inline RunRecord read_reports_csv(std::istream& is) {
    detail::expect_header(is, kReportHeader);
    RunRecord record;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = detail::csv_fields(line);
        if (f.size() != 13) throw IoError("report csv: expected 13 fields, got " + std::to_string(f.size()));
        const double q = detail::parse_double_strict(f[2]);
        auto it = std::find_if(record.variants.begin(), record.variants.end(), [&](const VariantResult& v) {
            return v.spec.name == f[0] && v.spec.q == q;
        });
        if (it == record.variants.end()) {
            VariantResult v;
            v.spec.name = f[0];
            v.spec.train.task_loss = parse_task_loss(f[1]);
            v.spec.q = q;
            record.variants.push_back(std::move(v));
            it = std::prev(record.variants.end());
        }
        const auto seed = detail::parse_int_strict<std::uint64_t>(f[3]);
        auto rep = std::find_if(it->reps.begin(), it->reps.end(), [&](const RepetitionResult& r) { return r.seed == seed; });
        if (rep == it->reps.end()) {
            it->reps.push_back({seed, {}, {}});
            rep = std::prev(it->reps.end());
        }
        EvalReport e;
        e.acc_overall = detail::parse_double_strict(f[5]);
        e.acc_unbiased = detail::parse_double_strict(f[6]);
        e.acc_bias_conflict = detail::parse_double_strict(f[7]);
        e.qmi = detail::parse_double_strict(f[8]);
        e.p_rule = detail::parse_double_strict(f[9]);
        e.dfpr = detail::parse_double_strict(f[10]);
        e.dfnr = detail::parse_double_strict(f[11]);
        e.mistreatment = detail::parse_double_strict(f[12]);
        if (f[4] == "unbiased") rep->unbiased = e;
        else if (f[4] == "bias_conflict") rep->conflict = e;
        else throw IoError("report csv: unknown split '" + f[4] + "'");
    }
    return record;
}

inline std::string pm(double mean, double sd) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * mean, 100.0 * sd);
    return buf;
}

// Human-readable table, accuracies in percent.
inline void write_summary_text(std::ostream& os, const std::vector<SummaryRow>& rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-22s %-7s %-6s %-16s %-16s %-10s %-7s %-12s %s\n", "variant", "task", "q",
                  "acc_unbiased", "acc_conflict", "qmi", "p_rule", "mistreatment", "seeds");
    os << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-22s %-7s %-6.4g %-16s %-16s %-10.3e %-7.3f %-12.4f %s\n", r.variant.c_str(),
                      r.task_loss.c_str(), r.q, pm(r.acc_unbiased_mean, r.acc_unbiased_std).c_str(),
                      pm(r.acc_conflict_mean, r.acc_conflict_std).c_str(), r.qmi, r.p_rule, r.mistreatment,
                      detail::join(r.seeds, ";").c_str());
        os << buf;
    }
}

inline nlohmann::json to_json(const EvalReport& e) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"acc_overall", num(e.acc_overall)},   {"acc_unbiased", num(e.acc_unbiased)},
            {"acc_bias_conflict", num(e.acc_bias_conflict)}, {"qmi", num(e.qmi)},
            {"p_rule", num(e.p_rule)},             {"dfpr", num(e.dfpr)},
            {"dfnr", num(e.dfnr)},                 {"mistreatment", num(e.mistreatment)}};
}

inline nlohmann::json to_json(const SummaryRow& r) {
    return {{"variant", r.variant},
            {"task_loss_kind", r.task_loss},
            {"q", r.q},
            {"acc_unbiased_mean", r.acc_unbiased_mean},
            {"acc_unbiased_std", r.acc_unbiased_std},
            {"acc_conflict_mean", r.acc_conflict_mean},
            {"acc_conflict_std", r.acc_conflict_std},
            {"qmi", r.qmi},
            {"p_rule", std::isfinite(r.p_rule) ? nlohmann::json(r.p_rule) : nlohmann::json(nullptr)},
            {"mistreatment", r.mistreatment},
            {"seeds", r.seeds}};
}

inline nlohmann::json to_json(const std::vector<SummaryRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) out.push_back(to_json(r));
    return out;
}

// ---- protocol ------------------------------------------------------------------------------

struct RunOptions {
    std::optional<std::filesystem::path> output_dir;  // histories and checkpoints when set
    std::function<void(const std::string&)> progress;
};

inline EvalOptions eval_options(const ExperimentConfig& c, std::uint64_t seed) {
    EvalOptions e;
    e.n_classes = c.dataset.n_classes;
    e.n_colors = c.dataset.n_colors;
    e.qmi_max_samples = c.qmi_max_samples;
    e.seed = seed;
    return e;
}

inline TrainConfig bias_train_config(const ExperimentConfig& c, std::uint64_t seed) {
    TrainConfig b = c.train;
    b.epochs = c.bias_epochs;
    b.seed = seed ^ 0xB1A5B1A5ULL;
    return b;
}

namespace detail {

inline std::string variant_dir_name(const VariantSpec& v, std::uint64_t seed) {
    std::ostringstream os;
    os << v.name << "_q" << format_double(v.q) << "_seed" << seed;
    return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace detail

// Trains every variant for every repetition. Variants with alpha > 0 share one
// frozen bias-capturing encoder per (q, repetition).
inline RunRecord run_variants(const ExperimentConfig& config, const std::vector<VariantSpec>& variants,
                              const RunOptions& options = {}) {
    config.validate();
    RunRecord record;
    record.config = config_echo(config);
    for (const auto& v : variants) record.variants.push_back({v, {}});

    std::vector<double> qs;
    for (const auto& v : variants)
        if (std::find(qs.begin(), qs.end(), v.q) == qs.end()) qs.push_back(v.q);

    for (double q : qs) {
        DatasetSpec spec = config.dataset;
        spec.q = q;
        const ProtocolSplits splits = split_for_protocol(spec, config.splits);
        for (int rep = 0; rep < config.repetitions; ++rep) {
            const std::uint64_t seed = config.seed_for(static_cast<std::size_t>(rep));
            std::optional<FrozenEncoder> encoder;
            for (std::size_t k = 0; k < variants.size(); ++k) {
                const auto& v = variants[k];
                if (v.q != q) continue;
                if (options.progress) {
                    options.progress("q=" + detail::format_double(q) + " seed=" + std::to_string(seed) + " " + v.name);
                }
                try {
                    if (v.train.alpha > 0.0 && !encoder) {
                        encoder = train_bias_capturing(config.bias_mode, splits.train, splits.bias_train,
                                                       spec.n_classes, bias_train_config(config, seed),
                                                       config.bias_features);
                    }
                    TrainConfig tc = v.train;
                    tc.seed = seed;
                    const EvalSplits eval{splits.test_unbiased, splits.test_bias_conflict};
                    const TrainResult trained =
                        train_main(tc, splits.train, spec.n_classes, tc.alpha > 0.0 ? &*encoder : nullptr, &eval);
                    RepetitionResult r;
                    r.seed = seed;
                    r.unbiased = evaluate(trained.model, splits.test_unbiased, eval_options(config, seed));
                    r.conflict = evaluate(trained.model, splits.test_bias_conflict, eval_options(config, seed));
                    record.variants[k].reps.push_back(r);
                    if (options.output_dir) {
                        const auto dir = *options.output_dir / detail::variant_dir_name(v, seed);
                        std::filesystem::create_directories(dir);
                        std::ofstream hist(dir / "history.csv");
                        if (!hist) throw IoError("cannot write " + (dir / "history.csv").string());
                        write_history_csv(hist, trained.history);
                        save_checkpoint(dir / "model.flck", trained.model);
                    }
                } catch (const TrainingDiverged& e) {
                    throw RunFailure(static_cast<std::size_t>(rep), v.name, e, true);
                } catch (const IoError&) {
                    throw;
                } catch (const std::filesystem::filesystem_error&) {
                    throw;
                } catch (const std::exception& e) {
                    throw RunFailure(static_cast<std::size_t>(rep), v.name, e, false);
                }
            }
        }
    }
    return record;
}

// Writes summary.csv, summary.txt, reports.csv and config.ini into `dir`.
inline void persist(const RunRecord& record, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto rows = summarize(record);
    std::ostringstream summary, text, reports;
    write_summary_csv(summary, rows);
    write_summary_text(text, rows);
    write_reports_csv(reports, record);
    detail::write_text_file(dir / "summary.csv", summary.str());
    detail::write_text_file(dir / "summary.txt", text.str());
    detail::write_text_file(dir / "reports.csv", reports.str());
    detail::write_text_file(dir / "config.ini", record.config);
}

inline VariantSpec vanilla_variant(const ExperimentConfig& c, double q) {
    VariantSpec v{"vanilla", c.train, q};
    v.train.alpha = 0.0;
    return v;
}

inline VariantSpec flac_variant(const ExperimentConfig& c, double q, std::string name = "flac") {
    return {std::move(name), c.train, q};
}

// Vanilla (alpha = 0) and FLAC at the configured alpha on the configured q.
inline RunRecord run_protocol(const ExperimentConfig& config, const RunOptions& options = {}) {
    if (!(config.train.alpha > 0.0)) throw ConfigError("the protocol needs alpha > 0", 0, "train.alpha");
    return run_variants(config, {vanilla_variant(config, config.dataset.q), flac_variant(config, config.dataset.q)},
                        options);
}

inline const std::vector<std::string>& ablation_suites() {
    static const std::vector<std::string> names{"condition_terms", "kernels", "divergences", "alpha_grid", "q_sweep"};
    return names;
}

inline std::vector<VariantSpec> ablation_variants(const ExperimentConfig& c, const std::string& suite) {
    const double q = c.dataset.q;
    std::vector<VariantSpec> out;
    if (suite == "condition_terms") {
        for (auto terms : {PairTerms::same_target_only, PairTerms::same_attribute_only, PairTerms::both}) {
            auto v = flac_variant(c, q, "flac_" + pair_terms_name(terms));
            v.train.terms = terms;
            out.push_back(v);
        }
    } else if (suite == "kernels") {
        for (const auto& k : {KernelKind::cosine(), KernelKind::rbf(1.0), KernelKind::student_t()}) {
            auto v = flac_variant(c, q, "flac_" + k.name());
            v.train.kernel = k;
            out.push_back(v);
        }
    } else if (suite == "divergences") {
        for (auto d : {Divergence::mse, Divergence::kl, Divergence::jeffreys}) {
            auto v = flac_variant(c, q, "flac_" + divergence_name(d));
            v.train.divergence = d;
            out.push_back(v);
        }
    } else if (suite == "alpha_grid") {
        for (double a : c.alpha_grid) {
            auto v = flac_variant(c, q, "flac_alpha" + detail::format_double(a));
            v.train.alpha = a;
            out.push_back(v);
        }
    } else if (suite == "q_sweep") {
        for (double sq : c.q_list) {
            out.push_back(vanilla_variant(c, sq));
            out.push_back(flac_variant(c, sq));
        }
    } else {
        throw ConfigError("unknown ablation suite '" + suite + "'", 0, "--suite");
    }
    for (const auto& v : out) {
        if (suite != "q_sweep" && !(v.train.alpha > 0.0) && suite != "alpha_grid") {
            throw ConfigError("suite '" + suite + "' needs alpha > 0", 0, "train.alpha");
        }
    }
    return out;
}

inline RunRecord ablate(const ExperimentConfig& config, const std::string& suite, const RunOptions& options = {}) {
    return run_variants(config, ablation_variants(config, suite), options);
}

// ---- alpha grid search ---------------------------------------------------------------------

struct GridSearchResult {
    std::vector<double> alphas;
    std::vector<double> validation_acc;  // group-averaged accuracy on the unbiased validation split
    double best_alpha = 0.0;
};

// Trains FLAC per alpha on the first repetition's seed and scores it on an
// unbiased validation split disjoint from the test splits. Ties go to the
// smaller alpha.
inline GridSearchResult gridsearch_alpha(const ExperimentConfig& config,
                                         const std::function<void(const std::string&)>& progress = {}) {
    config.validate();
    if (config.alpha_grid.empty()) throw ConfigError("empty grid", 0, "experiment.alpha_grid");
    const auto& spec = config.dataset;
    const ProtocolSplits splits = split_for_protocol(spec, config.splits);
    const Dataset validation = generate_stratified(
        derived_spec(spec, 1.0 / static_cast<double>(spec.n_colors), config.validation_per_class, 4), false);
    const std::uint64_t seed = config.seed_for(0);
    const FrozenEncoder encoder = train_bias_capturing(config.bias_mode, splits.train, splits.bias_train,
                                                       spec.n_classes, bias_train_config(config, seed),
                                                       config.bias_features);
    GridSearchResult result;
    double best = -1.0;
    std::vector<double> grid = config.alpha_grid;
    std::sort(grid.begin(), grid.end());
    for (double a : grid) {
        if (progress) progress("alpha=" + detail::format_double(a));
        TrainConfig tc = config.train;
        tc.alpha = a;
        tc.seed = seed;
        const auto trained = train_main(tc, splits.train, spec.n_classes, a > 0.0 ? &encoder : nullptr);
        const auto pred = predict(trained.model, validation);
        const double acc = accuracies(group_predictions(validation, pred.labels)).unbiased;
        result.alphas.push_back(a);
        result.validation_acc.push_back(acc);
        if (acc > best) {
            best = acc;
            result.best_alpha = a;
        }
    }
    return result;
}

inline void write_gridsearch_csv(std::ostream& os, const GridSearchResult& r) {
    os << "alpha,validation_unbiased_acc,selected\n";
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
        os << detail::format_double(r.alphas[i]) << ',' << detail::format_double(r.validation_acc[i]) << ','
           << (r.alphas[i] == r.best_alpha ? 1 : 0) << '\n';
    }
}

}  // namespace flac
