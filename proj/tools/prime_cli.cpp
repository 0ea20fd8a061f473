#include "prime/checkpoint.hpp"
#include "prime/config.hpp"
#include "prime/diagnostics.hpp"
#include "prime/error.hpp"
#include "prime/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prime;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> threads;
};

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? config_from_json(json::object()) : load_config(c.config);
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.data.seed = *c.seed;
    }
    if (!c.out.empty()) cfg.paths.out_dir = c.out;
    if (c.threads) cfg.threads = *c.threads;
    validate(cfg);
    return cfg;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw MissingFile("cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Records every artifact of one run together with the config fingerprint.
class Ledger {
public:
    Ledger(std::string command, const ExperimentConfig& cfg, std::string input_hash)
        : command_(std::move(command)), fingerprint_(prime::fingerprint(cfg)), input_hash_(std::move(input_hash)),
          dir_(cfg.paths.out_dir) {
        fs::create_directories(dir_);
    }

    fs::path write(const std::string& name, const std::string& content) {
        const fs::path p = dir_ / name;
        std::ofstream os(p, std::ios::binary);
        if (!os) throw MissingFile("cannot write " + p.string());
        os << content;
        os.close();
        add(p);
        return p;
    }
    void add(const fs::path& p) { outputs_.emplace_back(p.lexically_relative(dir_).string(), sha256_hex(read_file(p))); }

    void close() {
        json j;
        j["command"] = command_;
        j["config_fingerprint"] = fingerprint_;
        j["input_hash"] = input_hash_;
        j["run_id"] = sha256_hex(command_ + "|" + fingerprint_ + "|" + input_hash_).substr(0, 16);
        j["outputs"] = json::array();
        for (const auto& [path, hash] : outputs_) j["outputs"].push_back({{"path", path}, {"sha256", hash}});
        std::ofstream os(dir_ / "ledger.json");
        os << j.dump(2) << '\n';
    }

    const std::string& fingerprint() const { return fingerprint_; }

private:
    std::string command_;
    std::string fingerprint_;
    std::string input_hash_;
    fs::path dir_;
    std::vector<std::pair<std::string, std::string>> outputs_;
};

Cohort load(const ExperimentConfig& cfg) {
    const fs::path dir = cfg.paths.cohort_dir;
    return load_embeddings(dir / "manifest.csv", dir);
}

// Hash of what pretraining reads: ids, availability and embedding values, no labels.
std::string embeddings_hash(const Cohort& cohort) {
    std::string acc;
    for (const PatientRecord& p : cohort.patients) {
        acc += p.id;
        for (std::size_t m = 0; m < kNumModalities; ++m) {
            acc += p.availability[m] ? '1' : '0';
            if (!p.availability[m]) continue;
            const auto d = p.embeddings[m]->data();
            acc += sha256_hex(std::string(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)));
        }
    }
    return sha256_hex(acc);
}

std::string cohort_hash(const ExperimentConfig& cfg, const Cohort& cohort) {
    return sha256_hex(embeddings_hash(cohort) + read_file(fs::path(cfg.paths.cohort_dir) / "manifest.csv"));
}

void progress(const std::string& line) { std::cerr << line << '\n'; }

PrimeModel initial_model(const ExperimentConfig& cfg, const std::string& checkpoint) {
    PrimeModel model(cfg.model, cfg.seed);
    if (!checkpoint.empty() && checkpoint != "none") load_checkpoint(checkpoint, model.parameters());
    return model;
}

std::vector<Task> tasks_for(const ExperimentConfig& cfg, const std::string& task) {
    if (task.empty() || task == "all") return cfg.evaluation.tasks;
    return {parse_task(task)};
}

void write_protocol(Ledger& ledger, const ProtocolResult& r, const std::string& stem) {
    ledger.write(stem + "predictions.csv", predictions_csv(r.predictions));
    ledger.write(stem + "metrics.csv", metrics_csv(r.metrics));
    ledger.write(stem + "summary.csv", summary_csv(summarize(r.metrics)));
    std::string hashes;
    for (const std::string& h : r.subsample_hashes) hashes += h + '\n';
    ledger.write(stem + "subsample_hashes.txt", hashes);
}

int cmd_synth(const Common& c) {
    ExperimentConfig cfg = resolve(c);
    const fs::path dir = c.out.empty() ? fs::path(cfg.paths.cohort_dir) : fs::path(c.out);
    cfg.paths.out_dir = dir.string();
    const Cohort cohort = generate_synthetic_cohort(cfg.data);
    Ledger ledger("synth", cfg, "");
    write_cohort(cohort, dir);
    ledger.add(dir / "manifest.csv");
    for (const PatientRecord& p : cohort.patients)
        for (Modality m : kModalities)
            if (p.availability[index(m)]) ledger.add(embedding_path(dir, p.id, m));
    ledger.write("cohort_stats.csv", cohort_stats_csv(cohort_stats(cohort.patients)));
    ledger.close();
    std::cout << "wrote " << cohort.patients.size() << " patients to " << dir.string() << '\n';
    return 0;
}

int cmd_pretrain(const Common& c) {
    const ExperimentConfig cfg = resolve(c);
    const Cohort cohort = load(cfg);
    Ledger ledger("pretrain", cfg, embeddings_hash(cohort));
    PretrainOutcome out = run_pretraining(cfg, cohort.patients, progress);
    json meta{{"best_epoch", out.best_epoch}, {"config", config_to_json(cfg)["model"]}};
    const fs::path ck = fs::path(cfg.paths.out_dir) / "checkpoint.bin";
    save_checkpoint(ck, out.model.parameters(), {ledger.fingerprint(), meta.dump()});
    ledger.add(ck);
    ledger.write("pretrain_log.csv", pretrain_log_csv(out.log));
    ledger.write("router.csv", router_csv(out.router));
    ledger.close();
    std::cout << "best epoch " << out.best_epoch << ", checkpoint " << ck.string() << '\n';
    return 0;
}

struct DownstreamArgs {
    std::string checkpoint;
    std::string mode;
    std::string task;
    bool missing_aware = false;
};

ProtocolOptions protocol_options(const ExperimentConfig& cfg, const DownstreamArgs& a) {
    ProtocolOptions opt;
    opt.mode = a.mode.empty() ? cfg.evaluation.mode : parse_mode(a.mode);
    opt.missing_aware = a.missing_aware || cfg.evaluation.missing_aware;
    opt.label_fraction = cfg.evaluation.label_fraction;
    opt.tasks = tasks_for(cfg, a.task);
    return opt;
}

std::string checkpoint_of(const ExperimentConfig& cfg, const DownstreamArgs& a) {
    return a.checkpoint.empty() ? cfg.paths.checkpoint : a.checkpoint;
}

int cmd_finetune(const Common& c, const DownstreamArgs& a) {
    const ExperimentConfig cfg = resolve(c);
    const Cohort cohort = load(cfg);
    const std::string ck = checkpoint_of(cfg, a);
    std::string input = cohort_hash(cfg, cohort);
    if (!ck.empty() && ck != "none") input = sha256_hex(input + read_file(ck));
    Ledger ledger("finetune", cfg, input);
    PrimeModel model = initial_model(cfg, ck);
    ProtocolOptions opt = protocol_options(cfg, a);
    opt.conditions = {condition("Full")};
    const ProtocolResult r = run_protocol(cfg, cohort.patients, model, opt, progress);
    write_protocol(ledger, r, "");
    ledger.close();
    std::cout << summary_csv(summarize(r.metrics));
    return 0;
}

int cmd_robustness(const Common& c, const DownstreamArgs& a) {
    const ExperimentConfig cfg = resolve(c);
    const Cohort cohort = load(cfg);
    const std::string ck = checkpoint_of(cfg, a);
    std::string input = cohort_hash(cfg, cohort);
    if (!ck.empty() && ck != "none") input = sha256_hex(input + read_file(ck));
    Ledger ledger("robustness", cfg, input);
    PrimeModel model = initial_model(cfg, ck);
    const ProtocolResult r = run_protocol(cfg, cohort.patients, model, protocol_options(cfg, a), progress);
    write_protocol(ledger, r, "");
    const std::string grid = summary_csv(summarize(r.metrics));
    ledger.write("grid.csv", grid);
    ledger.close();
    std::cout << grid;
    return 0;
}

int cmd_eval(const Common& c, const std::string& predictions) {
    const ExperimentConfig cfg = resolve(c);
    const fs::path in = predictions.empty() ? fs::path(cfg.paths.out_dir) / "predictions.csv" : fs::path(predictions);
    const std::string text = read_file(in);
    const std::vector<Prediction> preds = parse_predictions_csv(text);
    Ledger ledger("eval", cfg, sha256_hex(text));

    std::vector<FoldMetric> metrics;
    std::map<std::tuple<int, std::string, std::size_t>, std::vector<const Prediction*>> groups;
    for (const Prediction& p : preds) groups[{static_cast<int>(p.task), p.condition, p.fold}].push_back(&p);
    for (const auto& [key, rows] : groups) {
        FoldMetric m;
        m.task = static_cast<Task>(std::get<0>(key));
        m.condition = std::get<1>(key);
        m.fold = std::get<2>(key);
        m.n = rows.size();
        try {
            if (m.task == Task::Survival) {
                std::vector<SurvivalSample> s;
                for (const Prediction* p : rows) s.push_back({p->time, p->event, p->score});
                m.metric = c_index(s);
            } else {
                std::vector<double> scores;
                std::vector<int> labels;
                for (const Prediction* p : rows) {
                    scores.push_back(p->score);
                    labels.push_back(p->label);
                }
                m.metric = auroc(scores, labels);
            }
        } catch (const Error&) {
            m.valid = false;
            m.metric = std::nan("");
        }
        metrics.push_back(m);
    }
    ledger.write("eval_metrics.csv", metrics_csv(metrics));
    ledger.write("eval_summary.csv", summary_csv(summarize(metrics)));
    const SurvivalAnalysis a = analyze_survival(preds, "Full");
    ledger.write("survival_analysis.csv", survival_analysis_csv(a));
    const std::vector<std::pair<std::string, KmCurve>> curves{{"high risk", a.high}, {"low risk", a.low}};
    ledger.write("km.csv", km_csv(curves));
    ledger.write("km.svg", km_svg(curves, "Overall survival by predicted risk"));
    ledger.close();
    std::cout << summary_csv(summarize(metrics)) << survival_analysis_csv(a);
    return 0;
}

int cmd_sweep(const Common& c, const std::string& axis) {
    const ExperimentConfig cfg = resolve(c);
    const Cohort cohort = load(cfg);
    Ledger ledger("sweep:" + axis, cfg, cohort_hash(cfg, cohort));

    if (axis == "ablation") {
        const std::vector<AblationRow> rows = run_ablation(cfg, cohort.patients, progress);
        ledger.write("ablation.csv", ablation_csv(rows));
        const std::string md = ablation_markdown(rows);
        ledger.write("ablation.md", md);
        ledger.close();
        std::cout << md;
        return 0;
    }

    std::ostringstream csv;
    csv << "axis,value,method,task,condition,mean,std,folds,subsample_hash\n" << std::setprecision(10);
    auto emit = [&](const std::string& value, const std::string& method, const ProtocolResult& r) {
        std::string h;
        for (const std::string& s : r.subsample_hashes) h += s + ";";
        const std::string digest = sha256_hex(h).substr(0, 16);
        for (const SummaryRow& s : summarize(r.metrics))
            csv << axis << ',' << value << ',' << method << ',' << task_name(s.task) << ',' << s.condition << ','
                << s.mean << ',' << s.std << ',' << s.folds << ',' << digest << '\n';
    };
    ProtocolOptions opt;
    opt.mode = cfg.evaluation.mode;
    opt.tasks = cfg.evaluation.tasks;
    opt.conditions = {condition("Full")};

    if (axis == "label_fraction") {
        PretrainOutcome pre = run_pretraining(cfg, cohort.patients, progress);
        PrimeModel scratch(cfg.model, cfg.seed);
        for (double f : cfg.sweep.label_fractions) {
            opt.label_fraction = f;
            std::ostringstream v;
            v << f;
            emit(v.str(), "pretrained", run_protocol(cfg, cohort.patients, pre.model, opt, progress));
            emit(v.str(), "scratch", run_protocol(cfg, cohort.patients, scratch, opt, progress));
        }
    } else if (axis == "K_c" || axis == "lambda") {
        const std::size_t n = axis == "K_c" ? cfg.sweep.prototypes.size() : cfg.sweep.lambdas.size();
        for (std::size_t k = 0; k < n; ++k) {
            ExperimentConfig v = cfg;
            std::ostringstream value;
            if (axis == "K_c") {
                v.model.bank.prototypes = cfg.sweep.prototypes[k];
                value << v.model.bank.prototypes;
            } else {
                v.model.ssl.lambda = cfg.sweep.lambdas[k];
                value << v.model.ssl.lambda;
            }
            validate(v);
            PretrainOutcome pre = run_pretraining(v, cohort.patients, progress);
            emit(value.str(), "pretrained", run_protocol(v, cohort.patients, pre.model, opt, progress));
        }
    } else {
        throw InvalidConfig("unknown sweep axis '" + axis + "' (label_fraction, K_c, lambda, ablation)");
    }
    ledger.write("sweep_" + axis + ".csv", csv.str());
    ledger.close();
    std::cout << csv.str();
    return 0;
}

int cmd_gradcheck(const Common& c, bool inject_nan, double tolerance) {
    const ExperimentConfig cfg = resolve(c);
    GradCheckSuiteOptions opt;
    opt.seed = cfg.seed;
    opt.inject_nan = inject_nan;
    const std::vector<ModuleCheck> checks = gradcheck_suite(opt);
    Ledger ledger("gradcheck", cfg, "");
    const std::string report = gradcheck_report_csv(checks);
    ledger.write("gradcheck.csv", report);
    ledger.close();
    std::cout << report;
    for (const ModuleCheck& m : checks)
        if (!(m.report.max_rel_err < tolerance)) {
            std::cerr << "gradient check failed for " << m.module << '\n';
            return 3;
        }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Missing-aware multimodal pretraining and evaluation"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON experiment config");
        sub->add_option("--seed", common.seed, "Override the experiment seed");
        sub->add_option("--out", common.out, "Output directory");
        sub->add_option("--threads", common.threads, "Worker threads for feature extraction");
    };
    DownstreamArgs down;
    auto add_downstream = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", down.checkpoint, "Pretrained checkpoint, or 'none' for scratch");
        sub->add_option("--mode", down.mode, "lp or ft");
        sub->add_option("--task", down.task, "os, mortality_3y, recurrence_3y or all");
        sub->add_flag("--missing-aware", down.missing_aware, "Modality dropout while training the head");
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
    auto* pretrain = app.add_subcommand("pretrain", "Self-supervised pretraining");
    auto* finetune = app.add_subcommand("finetune", "Five-fold downstream training on the Full condition");
    auto* eval = app.add_subcommand("eval", "Metrics and survival analysis from a predictions file");
    auto* robust = app.add_subcommand("robustness", "Downstream grid over the seven availability conditions");
    auto* sweep = app.add_subcommand("sweep", "Label-fraction, K_c, lambda or ablation sweep");
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    for (CLI::App* s : {synth, pretrain, finetune, eval, robust, sweep, grad}) add_common(s);
    add_downstream(finetune);
    add_downstream(robust);
    std::string predictions;
    eval->add_option("--predictions", predictions, "predictions.csv from finetune or robustness");
    std::string axis;
    sweep->add_option("--axis", axis, "label_fraction, K_c, lambda or ablation")->required();
    bool inject_nan = false;
    double tolerance = 1e-4;
    grad->add_flag("--inject-nan", inject_nan, "Poison one parameter to exercise non-finite detection");
    grad->add_option("--tolerance", tolerance, "Maximum relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(common);
        if (*pretrain) return cmd_pretrain(common);
        if (*finetune) return cmd_finetune(common, down);
        if (*eval) return cmd_eval(common, predictions);
        if (*robust) return cmd_robustness(common, down);
        if (*sweep) return cmd_sweep(common, axis);
        if (*grad) return cmd_gradcheck(common, inject_nan, tolerance);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.category() == ErrorCategory::Numeric ? 3 : 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
