#include "prime/experiment.hpp"

#include "prime/error.hpp"
#include "prime/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

namespace prime {

const Condition& condition(std::string_view name) {
    for (const Condition& c : kConditions)
        if (c.name == name) return c;
    throw InvalidConfig("unknown condition '" + std::string(name) + "'");
}

namespace {

std::string fmt(double v, int digits = 6) {
    std::ostringstream os;
    os << std::setprecision(digits) << v;
    return os.str();
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void say(const Progress& progress, const std::string& line) {
    if (progress) progress(line);
}

struct EpochTotals {
    double align = 0.0, fusion = 0.0, router = 0.0, total = 0.0;
    std::size_t n = 0;

    void add(const LossComponents& c, std::size_t weight) {
        align += c.align * static_cast<double>(weight);
        fusion += c.fusion * static_cast<double>(weight);
        router += c.router * static_cast<double>(weight);
        total += c.total.item() * static_cast<double>(weight);
        n += weight;
    }
    double mean(double v) const { return n ? v / static_cast<double>(n) : 0.0; }
};

// Batches of at least two patients; a trailing singleton joins the previous batch.
std::vector<std::vector<const PatientRecord*>> make_batches(std::span<const PatientRecord> patients,
                                                            std::span<const std::size_t> order, std::size_t size) {
    std::vector<std::vector<const PatientRecord*>> out;
    for (std::size_t b = 0; b < order.size(); b += size) {
        std::vector<const PatientRecord*> batch;
        for (std::size_t k = b; k < std::min(order.size(), b + size); ++k) batch.push_back(&patients[order[k]]);
        if (batch.size() < 2 && !out.empty())
            out.back().insert(out.back().end(), batch.begin(), batch.end());
        else
            out.push_back(std::move(batch));
    }
    return out;
}

constexpr std::uint64_t kValidationEpoch = 0xFFFFFFFFULL;

double validation_loss(PrimeModel& model, std::span<const PatientRecord> patients, std::span<const std::size_t> val,
                       std::size_t batch_size, std::uint64_t seed) {
    if (val.size() < 2) return 0.0;
    EpochTotals totals;
    for (const auto& batch : make_batches(patients, val, batch_size)) {
        ad::Tape t(false);
        const PretrainStep step = model.pretrain_loss(t, batch, seed, kValidationEpoch);
        totals.add(step.loss, batch.size());
    }
    return totals.mean(totals.total);
}

} // namespace

std::vector<std::size_t> pretrain_pool(std::span<const PatientRecord> patients, PretrainCohort cohort) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < patients.size(); ++i) {
        const std::size_t c = count(patients[i].availability);
        if (c == 0) continue;
        if (cohort == PretrainCohort::FullOnly && c != kNumModalities) continue;
        pool.push_back(i);
    }
    return pool;
}

PretrainOutcome run_pretraining(const ExperimentConfig& config, std::span<const PatientRecord> patients,
                                const Progress& progress) {
    const PretrainConfig& pc = config.pretrain;
    const std::vector<std::size_t> pool = pretrain_pool(patients, pc.cohort);
    if (pool.size() < 4) throw EmptyBatch("pretraining pool holds " + std::to_string(pool.size()) + " patients");

    PretrainOutcome out;
    {
        std::map<std::size_t, std::vector<std::size_t>> by_site;
        for (std::size_t i : pool) by_site[patients[i].site].push_back(i);
        for (const auto& [site, members] : by_site) {
            Rng rng = by_site.size() == 1 ? make_rng(config.seed, {0x9E7}) : make_rng(config.seed, {0x9E7, site});
            const std::vector<std::size_t> perm = permutation(rng, members.size());
            const auto n_val =
                static_cast<std::size_t>(std::lround(pc.val_fraction * static_cast<double>(members.size())));
            for (std::size_t k = 0; k < perm.size(); ++k)
                (k < n_val ? out.val_idx : out.train_idx).push_back(members[perm[k]]);
        }
        std::sort(out.val_idx.begin(), out.val_idx.end());
        std::sort(out.train_idx.begin(), out.train_idx.end());
    }

    PrimeModel model(config.model, config.seed);
    out.model = model;
    const nn::ParamList params = model.parameters();
    AdamW opt({pc.lr, 0.9, 0.999, 1e-8, pc.weight_decay, pc.grad_clip});
    double best = 0.0;

    for (std::size_t epoch = 0; epoch < pc.epochs; ++epoch) {
        Rng rng = make_rng(config.seed, {0xB47C, epoch});
        const std::vector<std::size_t> perm = permutation(rng, out.train_idx.size());
        std::vector<std::size_t> order;
        for (std::size_t k : perm) order.push_back(out.train_idx[k]);

        EpochTotals totals;
        std::vector<RouterStats> router;
        std::size_t router_batches = 0;
        for (const auto& batch : make_batches(patients, order, pc.batch_size)) {
            ad::Tape t;
            PretrainStep step;
            try {
                step = model.pretrain_loss(t, batch, config.seed, epoch);
                t.backward(step.loss.total);
            } catch (const NonFiniteError& e) {
                throw NonFiniteLoss("pretraining diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            opt.step(params);
            totals.add(step.loss, batch.size());
            if (router.empty()) router = step.router;
            else
                for (std::size_t b = 0; b < router.size(); ++b)
                    for (std::size_t e = 0; e < router[b].fraction.size(); ++e) {
                        router[b].fraction[e] += step.router[b].fraction[e];
                        router[b].mean_prob[e] += step.router[b].mean_prob[e];
                    }
            ++router_batches;
        }
        for (RouterStats& s : router)
            for (std::size_t e = 0; e < s.fraction.size(); ++e) {
                s.fraction[e] /= static_cast<double>(router_batches);
                s.mean_prob[e] /= static_cast<double>(router_batches);
            }
        out.router.push_back(std::move(router));

        PretrainLogRow row;
        row.epoch = epoch;
        row.align = totals.mean(totals.align);
        row.fusion = totals.mean(totals.fusion);
        row.router = totals.mean(totals.router);
        row.total = totals.mean(totals.total);
        row.val_total = validation_loss(model, patients, out.val_idx, pc.batch_size, config.seed);
        if (epoch == 0 || row.val_total < best) {
            best = row.val_total;
            out.best_epoch = epoch;
            out.model = model;
        }
        row.best_val = best;
        out.log.push_back(row);
        say(progress, "pretrain epoch " + std::to_string(epoch) + " train " + fmt(row.total) + " val " +
                          fmt(row.val_total));
    }
    if (pc.epochs == 0) out.model = model;
    return out;
}

// ---- features ----

FeatureCache::FeatureCache(PrimeModel& model, std::span<const PatientRecord> patients, Pooling pooling)
    : model_(&model), patients_(patients), pooling_(pooling), table_(patients.size()) {}

std::size_t FeatureCache::code(const Availability& a) {
    std::size_t c = 0;
    for (std::size_t m = 0; m < kNumModalities; ++m)
        if (a[m]) c |= std::size_t{1} << m;
    return c;
}

Tensor FeatureCache::get(std::size_t patient, const Availability& use) {
    const std::size_t c = code(use);
    {
        std::lock_guard lock(mutex_);
        if (table_.at(patient)[c]) return *table_[patient][c];
    }
    Tensor f = model_->features(patients_[patient], use, pooling_);
    std::lock_guard lock(mutex_);
    if (!table_[patient][c]) table_[patient][c] = f;
    return *table_[patient][c];
}

void FeatureCache::warm(const std::vector<std::pair<std::size_t, Availability>>& wanted, std::size_t threads) {
    std::vector<std::pair<std::size_t, Availability>> todo;
    for (const auto& w : wanted)
        if (!table_.at(w.first)[code(w.second)]) todo.push_back(w);
    threads = std::max<std::size_t>(1, std::min(threads, todo.size()));
    if (threads == 1) {
        for (const auto& [i, use] : todo) get(i, use);
        return;
    }
    // Each slot is written once with a value that does not depend on order.
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t k = w; k < todo.size(); k += threads) get(todo[k].first, todo[k].second);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (std::thread& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

FeatureFn FeatureCache::fn() {
    return [this](std::size_t i, const Availability& use) { return get(i, use); };
}

// ---- downstream protocol ----

std::vector<std::size_t> subsample_train(std::span<const std::size_t> train, double fraction, std::uint64_t seed,
                                         std::size_t fold) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidConfig("label fraction must lie in (0, 1]");
    Rng rng = make_rng(seed, {0x5AB, fold});
    const std::vector<std::size_t> perm = permutation(rng, train.size());
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(train.size()))));
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < std::min(keep, perm.size()); ++k) out.push_back(train[perm[k]]);
    std::sort(out.begin(), out.end());
    return out;
}

ProtocolResult run_protocol(const ExperimentConfig& config, std::span<const PatientRecord> patients, PrimeModel& init,
                            const ProtocolOptions& options, const Progress& progress) {
    const std::vector<FoldSplit> folds = make_site_folds(patients, config.evaluation.folds, config.seed);
    const bool lp = options.mode == AdaptationMode::LinearProbe;
    ProtocolResult result;
    result.frozen_hash_before = parameter_hash(init.parameters());

    FeatureCache frozen(init, patients, config.downstream.pooling);
    if (lp) {
        std::vector<std::pair<std::size_t, Availability>> wanted;
        for (std::size_t i = 0; i < patients.size(); ++i)
            if (count(patients[i].availability) > 0) wanted.emplace_back(i, patients[i].availability);
        for (const FoldSplit& f : folds)
            for (std::size_t i : f.test)
                for (const Condition& c : options.conditions) {
                    const Availability use = intersect(patients[i].availability, c.mask);
                    if (count(use) > 0 && use != patients[i].availability) wanted.emplace_back(i, use);
                }
        frozen.warm(wanted, config.threads);
    }

    for (Task task : options.tasks) {
        for (std::size_t k = 0; k < folds.size(); ++k) {
            const FoldSplit& fold = folds[k];
            TrainRequest req;
            req.task = task;
            req.patients = patients;
            req.train = subsample_train(fold.train, options.label_fraction, config.seed, k);
            req.val = fold.val;
            req.seed = derive_seed(config.seed, {0xD0, static_cast<std::uint64_t>(task), k});
            req.missing_aware = options.missing_aware;
            {
                const auto* bytes = reinterpret_cast<const unsigned char*>(req.train.data());
                result.subsample_hashes.push_back(std::string(task_name(task)) + ":" + std::to_string(k) + ":" +
                                                  hex64(fnv1a({bytes, req.train.size() * sizeof(std::size_t)})));
            }

            DownstreamResult trained;
            std::optional<FeatureCache> tuned;
            FeatureFn fn;
            if (lp) {
                trained = train_linear_probe(req, frozen.fn(), init.dim(), config.downstream);
                fn = frozen.fn();
            } else {
                trained = train_finetune(req, init, config.downstream);
                tuned.emplace(*trained.model, patients, config.downstream.pooling);
                fn = tuned->fn();
            }

            const std::vector<std::size_t> test = labeled(patients, fold.test, task);
            for (const Condition& c : options.conditions) {
                std::vector<std::size_t> kept;
                const std::vector<double> scores = predict(trained.head, fn, patients, test, c.mask, &kept);
                FoldMetric m;
                m.task = task;
                m.condition = std::string(c.name);
                m.fold = k;
                m.n = kept.size();
                try {
                    m.metric = task_metric(task, patients, kept, scores);
                } catch (const Error&) {
                    m.valid = false;
                    m.metric = std::nan("");
                }
                result.metrics.push_back(m);
                for (std::size_t r = 0; r < kept.size(); ++r) {
                    const PatientRecord& p = patients[kept[r]];
                    const TaskLabel y = *task_label(p, task);
                    result.predictions.push_back(
                        {p.id, k, task, std::string(c.name), scores[r], y.time, y.event, y.binary});
                }
            }
            say(progress, std::string(mode_name(options.mode)) + " " + std::string(task_name(task)) + " fold " +
                              std::to_string(k) + " done");
        }
    }
    result.frozen_hash_after = parameter_hash(init.parameters());
    if (lp && result.frozen_hash_after != result.frozen_hash_before)
        throw Error(ErrorCategory::Numeric, "linear probing modified the frozen model");
    return result;
}

std::vector<SummaryRow> summarize(const std::vector<FoldMetric>& metrics) {
    std::vector<SummaryRow> rows;
    std::vector<std::vector<double>> values;
    for (const FoldMetric& m : metrics) {
        auto it = std::find_if(rows.begin(), rows.end(),
                               [&](const SummaryRow& r) { return r.task == m.task && r.condition == m.condition; });
        if (it == rows.end()) {
            rows.push_back({m.task, m.condition, 0.0, 0.0, 0});
            values.emplace_back();
            it = rows.end() - 1;
        }
        if (m.valid) values[static_cast<std::size_t>(it - rows.begin())].push_back(m.metric);
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::vector<double>& v = values[r];
        rows[r].folds = v.size();
        if (v.empty()) {
            rows[r].mean = rows[r].std = std::nan("");
            continue;
        }
        double s = 0.0;
        for (double x : v) s += x;
        rows[r].mean = s / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - rows[r].mean) * (x - rows[r].mean);
        rows[r].std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    }
    return rows;
}

double summary_mean(const std::vector<SummaryRow>& rows, Task task, std::string_view condition) {
    for (const SummaryRow& r : rows)
        if (r.task == task && r.condition == condition) return r.mean;
    throw InvalidConfig("no summary for " + std::string(task_name(task)) + " / " + std::string(condition));
}

SurvivalAnalysis analyze_survival(const std::vector<Prediction>& predictions, std::string_view condition) {
    std::vector<SurvivalSample> samples;
    std::vector<double> risks;
    for (const Prediction& p : predictions)
        if (p.task == Task::Survival && p.condition == condition) {
            samples.push_back({p.time, p.event, p.score});
            risks.push_back(p.score);
        }
    SurvivalAnalysis a;
    if (samples.size() < 2) {
        a.note = "fewer than two survival predictions";
        return a;
    }
    a.split = risk_stratify(risks);
    std::vector<SurvivalSample> high, low;
    std::vector<int> group(samples.size(), 0);
    for (std::size_t i : a.split.high) {
        high.push_back(samples[i]);
        group[i] = 1;
    }
    for (std::size_t i : a.split.low) low.push_back(samples[i]);
    if (!high.empty()) a.high = km_curve(high);
    if (!low.empty()) a.low = km_curve(low);
    try {
        a.logrank = logrank_test(high, low);
    } catch (const Error& e) {
        a.note += std::string("log-rank: ") + e.what() + "; ";
    }
    try {
        a.cox = cox_univariate(samples, group);
    } catch (const Error& e) {
        a.note += std::string("cox: ") + e.what() + "; ";
    }
    return a;
}

// ---- ablations ----

std::vector<AblationArm> ablation_arms() {
    return {
        {"w/o prototypes", true, false, true, true},
        {"w/o missing modality", false, true, true, true},
        {"Full method", true, true, true, true},
        {"w/o L_align", true, true, false, true},
        {"w/o L_fusion", true, true, true, false},
    };
}

ExperimentConfig apply_arm(ExperimentConfig config, const AblationArm& arm) {
    if (!arm.align && !arm.fusion) throw InvalidConfig("an ablation arm needs at least one loss");
    config.pretrain.cohort = arm.missing_data ? PretrainCohort::Union : PretrainCohort::FullOnly;
    config.model.fill = arm.prototypes ? FillMode::Prototype : FillMode::Zeros;
    if (!arm.align) config.model.ssl.lambda = 0.0;
    if (!arm.fusion) config.model.ssl.lambda = 1.0;
    return config;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& config, std::span<const PatientRecord> patients,
                                      const Progress& progress) {
    std::vector<AblationRow> rows;
    for (const AblationArm& arm : ablation_arms()) {
        say(progress, "ablation arm: " + arm.variant);
        const ExperimentConfig c = apply_arm(config, arm);
        PretrainOutcome pre = run_pretraining(c, patients, progress);
        ProtocolOptions opt;
        opt.mode = AdaptationMode::LinearProbe;
        opt.tasks = c.evaluation.tasks;
        opt.conditions = {condition("Full")};
        opt.label_fraction = c.evaluation.label_fraction;
        const ProtocolResult r = run_protocol(c, patients, pre.model, opt, progress);
        rows.push_back({arm, summarize(r.metrics)});
    }
    return rows;
}

// ---- reports ----

std::string predictions_csv(const std::vector<Prediction>& predictions) {
    std::ostringstream os;
    os << "patient_id,fold,task,condition,score,time_months,event,label\n";
    os << std::setprecision(17);
    for (const Prediction& p : predictions)
        os << p.patient_id << ',' << p.fold << ',' << task_name(p.task) << ',' << p.condition << ',' << p.score << ','
           << p.time << ',' << (p.event ? 1 : 0) << ',' << p.label << '\n';
    return os.str();
}

std::vector<Prediction> parse_predictions_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line.rfind("patient_id,fold,task,condition,score", 0) != 0)
        throw FormatError("predictions file lacks the expected header");
    std::vector<Prediction> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 8) throw FormatError("predictions line " + std::to_string(lineno) + ": expected 8 fields");
        try {
            Prediction p;
            p.patient_id = cells[0];
            p.fold = std::stoul(cells[1]);
            p.task = parse_task(cells[2]);
            p.condition = cells[3];
            p.score = std::stod(cells[4]);
            p.time = std::stod(cells[5]);
            p.event = cells[6] == "1";
            p.label = std::stoi(cells[7]);
            out.push_back(std::move(p));
        } catch (const std::logic_error&) {
            throw FormatError("predictions line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return out;
}

std::string metrics_csv(const std::vector<FoldMetric>& metrics) {
    std::ostringstream os;
    os << "task,condition,fold,n,metric,valid\n" << std::setprecision(10);
    for (const FoldMetric& m : metrics)
        os << task_name(m.task) << ',' << m.condition << ',' << m.fold << ',' << m.n << ',' << m.metric << ','
           << (m.valid ? 1 : 0) << '\n';
    return os.str();
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream os;
    os << "task,condition,mean,std,folds\n" << std::setprecision(10);
    for (const SummaryRow& r : rows)
        os << task_name(r.task) << ',' << r.condition << ',' << r.mean << ',' << r.std << ',' << r.folds << '\n';
    return os.str();
}

std::string pretrain_log_csv(const std::vector<PretrainLogRow>& log) {
    std::ostringstream os;
    os << "epoch,align,fusion,router,total,val_total,best_val\n" << std::setprecision(10);
    for (const PretrainLogRow& r : log)
        os << r.epoch << ',' << r.align << ',' << r.fusion << ',' << r.router << ',' << r.total << ',' << r.val_total
           << ',' << r.best_val << '\n';
    return os.str();
}

std::string router_csv(const std::vector<std::vector<RouterStats>>& per_epoch) {
    std::ostringstream os;
    os << "epoch,block,expert,fraction,mean_prob\n" << std::setprecision(10);
    for (std::size_t e = 0; e < per_epoch.size(); ++e)
        for (std::size_t b = 0; b < per_epoch[e].size(); ++b)
            for (std::size_t x = 0; x < per_epoch[e][b].fraction.size(); ++x)
                os << e << ',' << b << ',' << x << ',' << per_epoch[e][b].fraction[x] << ','
                   << per_epoch[e][b].mean_prob[x] << '\n';
    return os.str();
}

std::string survival_analysis_csv(const SurvivalAnalysis& a) {
    std::ostringstream os;
    os << "statistic,value\n" << std::setprecision(10);
    os << "threshold," << a.split.threshold << '\n';
    os << "n_high," << a.split.high.size() << '\n';
    os << "n_low," << a.split.low.size() << '\n';
    if (a.logrank) {
        os << "logrank_chi2," << a.logrank->chi2 << '\n';
        os << "logrank_p," << a.logrank->p_value << '\n';
    }
    if (a.cox) {
        os << "cox_beta," << a.cox->beta << '\n';
        os << "hazard_ratio," << a.cox->hazard_ratio << '\n';
        os << "hr_ci_low," << a.cox->ci_low << '\n';
        os << "hr_ci_high," << a.cox->ci_high << '\n';
    }
    if (!a.note.empty()) os << "note,\"" << a.note << "\"\n";
    return os.str();
}

namespace {

const SummaryRow* find_row(const std::vector<SummaryRow>& rows, Task task) {
    for (const SummaryRow& r : rows)
        if (r.task == task && r.condition == "Full") return &r;
    return nullptr;
}

std::string cell(const std::vector<SummaryRow>& rows, Task task) {
    const SummaryRow* r = find_row(rows, task);
    if (!r || r->folds == 0) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << r->mean << " ± " << r->std;
    return os.str();
}

} // namespace

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant,pretrained_data,prototypes,l_align,l_fusion,task,mean,std,folds\n" << std::setprecision(10);
    for (const AblationRow& row : rows)
        for (Task task : kTasks) {
            const SummaryRow* r = find_row(row.summary, task);
            if (!r) continue;
            os << row.arm.variant << ',' << (row.arm.missing_data ? "missing+full" : "full") << ','
               << row.arm.prototypes << ',' << row.arm.align << ',' << row.arm.fusion << ',' << task_name(task) << ','
               << r->mean << ',' << r->std << ',' << r->folds << '\n';
        }
    return os.str();
}

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
    auto mark = [](bool b) { return b ? "✓" : "✗"; };
    std::ostringstream os;
    os << "| Variant | Pretrained Data | Prototypes | L_align | L_fusion | T1 C-index | T2 AUROC | T3 AUROC |\n";
    os << "|---|---|---|---|---|---|---|---|\n";
    for (const AblationRow& row : rows)
        os << "| " << row.arm.variant << " | " << (row.arm.missing_data ? "missing+full" : "full") << " | "
           << mark(row.arm.prototypes) << " | " << mark(row.arm.align) << " | " << mark(row.arm.fusion) << " | "
           << cell(row.summary, Task::Survival) << " | " << cell(row.summary, Task::Mortality3y) << " | "
           << cell(row.summary, Task::Recurrence3y) << " |\n";
    return os.str();
}

} // namespace prime
