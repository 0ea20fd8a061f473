#include "prime/downstream.hpp"

#include "prime/error.hpp"
#include "prime/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace prime {

std::string_view task_name(Task task) noexcept {
    switch (task) {
    case Task::Survival: return "os";
    case Task::Mortality3y: return "mortality_3y";
    case Task::Recurrence3y: return "recurrence_3y";
    }
    return "?";
}

Task parse_task(std::string_view name) {
    for (Task t : kTasks)
        if (task_name(t) == name) return t;
    throw InvalidConfig("unknown task '" + std::string(name) + "' (expected os, mortality_3y or recurrence_3y)");
}

std::string_view mode_name(AdaptationMode mode) noexcept {
    return mode == AdaptationMode::LinearProbe ? "lp" : "ft";
}

AdaptationMode parse_mode(std::string_view name) {
    if (name == "lp") return AdaptationMode::LinearProbe;
    if (name == "ft") return AdaptationMode::FullFineTune;
    throw InvalidConfig("unknown adaptation mode '" + std::string(name) + "' (expected lp or ft)");
}

std::optional<TaskLabel> task_label(const PatientRecord& p, Task task) {
    switch (task) {
    case Task::Survival: return TaskLabel{p.time_months, !p.censored, 0};
    case Task::Mortality3y:
        if (auto y = p.mortality_3y()) return TaskLabel{p.time_months, !p.censored, *y ? 1 : 0};
        return std::nullopt;
    case Task::Recurrence3y:
        if (auto y = p.recurrence_3y()) return TaskLabel{*p.pfi_months, !p.pfi_censored, *y ? 1 : 0};
        return std::nullopt;
    }
    return std::nullopt;
}

std::size_t TimeBins::bin_of(double t) const {
    return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), t) - edges.begin());
}

TimeBins discretize_time(std::span<const double> times, std::span<const bool> events, std::size_t k) {
    if (times.size() != events.size()) throw ShapeMismatch("times and events differ in length");
    if (k == 0) throw InvalidConfig("K_time must be positive");
    std::vector<double> ev;
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] < 0) throw InvalidConfig("negative survival time");
        if (events[i]) ev.push_back(times[i]);
    }
    std::sort(ev.begin(), ev.end());
    TimeBins bins;
    if (k > 1) {
        std::vector<double> uniq(ev);
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        if (uniq.size() < k)
            throw DegenerateBins(std::to_string(uniq.size()) + " distinct event times cannot fill " + std::to_string(k) +
                                 " bins");
        for (std::size_t j = 1; j < k; ++j) {
            const double h = static_cast<double>(ev.size() - 1) * static_cast<double>(j) / static_cast<double>(k);
            const auto lo = static_cast<std::size_t>(std::floor(h));
            const std::size_t hi = std::min(lo + 1, ev.size() - 1);
            const double edge = ev[lo] + (h - static_cast<double>(lo)) * (ev[hi] - ev[lo]);
            if (!bins.edges.empty() && !(edge > bins.edges.back()))
                throw DegenerateBins("quantile edges collide; merge bins");
            bins.edges.push_back(edge);
        }
    }
    bins.index.reserve(times.size());
    for (double t : times) bins.index.push_back(bins.bin_of(t));
    return bins;
}

ad::Var survival_nll(ad::Var logits, std::span<const std::size_t> bin, std::span<const bool> censored) {
    const std::size_t n = logits.rows(), k = logits.cols();
    if (bin.size() != n || censored.size() != n) throw ShapeMismatch("survival labels do not match logits");
    if (n == 0) throw EmptyBatch("survival NLL on an empty batch");
    Tensor event_mask = Tensor::matrix(n, k);
    Tensor survive_mask = Tensor::matrix(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        if (bin[i] >= k) throw ShapeMismatch("interval index out of range");
        for (std::size_t u = 0; u < bin[i]; ++u) survive_mask(i, u) = 1.0;
        if (censored[i])
            survive_mask(i, bin[i]) = 1.0;
        else
            event_mask(i, bin[i]) = 1.0;
    }
    ad::Tape& t = *logits.tape;
    ad::Var hazard = ad::mul(ad::log_sigmoid(logits), t.constant(std::move(event_mask)));
    ad::Var survive = ad::mul(ad::log_sigmoid(ad::scale(logits, -1.0)), t.constant(std::move(survive_mask)));
    return ad::scale(ad::add(ad::sum_all(hazard), ad::sum_all(survive)), -1.0 / static_cast<double>(n));
}

double risk_score(std::span<const double> logits) {
    double s = 1.0, mass = 0.0;
    for (double x : logits) {
        s *= 1.0 / (1.0 + std::exp(x)); // 1 - sigmoid(x)
        mass += s;
    }
    return -mass;
}

Tensor HeadState::scores(const Tensor& features) const {
    const auto w = linear.weight.value.mat();
    const auto b = linear.bias.value.mat();
    const RowMatrix logits = (features.mat() * w).rowwise() + b.row(0);
    Tensor out = Tensor::matrix(features.rows(), 1);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        if (task == Task::Survival) {
            std::vector<double> row(logits.cols());
            for (Eigen::Index j = 0; j < logits.cols(); ++j) row[j] = logits(i, j);
            out(i, 0) = risk_score(row);
        } else {
            out(i, 0) = logits(i, 0);
        }
    }
    return out;
}

std::vector<std::size_t> labeled(std::span<const PatientRecord> patients, std::span<const std::size_t> idx, Task task) {
    std::vector<std::size_t> out;
    for (std::size_t i : idx)
        if (task_label(patients[i], task)) out.push_back(i);
    return out;
}

Availability dropout_availability(const Availability& available, double p_mod, std::uint64_t seed,
                                  std::size_t patient, std::size_t epoch) {
    Rng rng = make_rng(seed, {0xD0, patient, epoch});
    std::bernoulli_distribution drop(p_mod);
    Availability use{};
    std::vector<std::size_t> present;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (!available[m]) continue;
        present.push_back(m);
        use[m] = !drop(rng);
    }
    if (count(use) == 0 && !present.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, present.size() - 1);
        use[present[pick(rng)]] = true;
    }
    return use;
}

double task_metric(Task task, std::span<const PatientRecord> patients, std::span<const std::size_t> idx,
                   std::span<const double> scores) {
    if (task == Task::Survival) {
        std::vector<SurvivalSample> s;
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto y = task_label(patients[idx[k]], task);
            s.push_back({y->time, y->event, scores[k]});
        }
        return c_index(s);
    }
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(task_label(patients[i], task)->binary);
    return auroc(scores, labels);
}

std::vector<double> predict(const HeadState& head, const FeatureFn& features, std::span<const PatientRecord> patients,
                            std::span<const std::size_t> idx, const Availability& override_mask,
                            std::vector<std::size_t>* kept) {
    std::vector<double> out;
    if (kept) kept->clear();
    std::vector<Tensor> rows;
    for (std::size_t i : idx) {
        const Availability use = intersect(patients[i].availability, override_mask);
        if (count(use) == 0) continue;
        rows.push_back(features(i, use));
        if (kept) kept->push_back(i);
    }
    if (rows.empty()) return out;
    const std::size_t d = rows[0].cols();
    Tensor x = Tensor::matrix(rows.size(), d);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) = rows[r](0, c);
    const Tensor s = head.scores(x);
    out.assign(s.data().begin(), s.data().end());
    return out;
}

namespace {

struct HeadTraining {
    HeadState head;
    std::size_t outputs = 1;
};

HeadTraining make_head(const TrainRequest& req, std::span<const std::size_t> train, std::size_t dim,
                       const DownstreamConfig& config) {
    HeadTraining h;
    h.head.task = req.task;
    if (req.task == Task::Survival) {
        std::vector<double> times;
        std::unique_ptr<bool[]> flags(new bool[train.size()]);
        for (std::size_t k = 0; k < train.size(); ++k) {
            const auto y = task_label(req.patients[train[k]], req.task);
            times.push_back(y->time);
            flags[k] = y->event;
        }
        for (std::size_t k = std::max<std::size_t>(config.k_time, 1); k >= 1; --k) {
            try {
                h.head.bins = discretize_time(times, {flags.get(), train.size()}, k);
                break;
            } catch (const DegenerateBins&) {
                if (k == 1) throw;
            }
        }
        h.outputs = h.head.bins.bins();
    }
    // Zero weights and a bias at the training-set baseline (per-interval
    // hazard, or prevalence): with the short, small-step schedule a random
    // draw or an off-baseline bias would otherwise dominate the early updates.
    Rng rng = make_rng(req.seed, {0x4EAD});
    h.head.linear = nn::Linear(dim, h.outputs, rng);
    h.head.linear.weight.value = Tensor::matrix(dim, h.outputs);
    auto logit = [](double events, double total) {
        const double p = std::clamp(events / std::max(total, 1.0), 1e-4, 1.0 - 1e-4);
        return std::log(p / (1.0 - p));
    };
    if (req.task == Task::Survival) {
        std::vector<double> events(h.outputs, 0.0), at_risk(h.outputs, 0.0);
        for (std::size_t i : train) {
            const auto y = task_label(req.patients[i], req.task);
            const std::size_t b = h.head.bins.bin_of(y->time);
            for (std::size_t u = 0; u <= b; ++u) at_risk[u] += 1.0;
            if (y->event) events[b] += 1.0;
        }
        for (std::size_t j = 0; j < h.outputs; ++j) h.head.linear.bias.value(0, j) = logit(events[j], at_risk[j]);
    } else {
        double positives = 0.0;
        for (std::size_t i : train) positives += task_label(req.patients[i], req.task)->binary;
        h.head.linear.bias.value(0, 0) = logit(positives, static_cast<double>(train.size()));
    }
    return h;
}

ad::Var head_loss(ad::Tape& t, const TrainRequest& req, const HeadState& head, nn::Linear& linear, ad::Var x,
                  std::span<const std::size_t> batch) {
    ad::Var logits = linear(t, x);
    if (req.task == Task::Survival) {
        std::vector<std::size_t> bin;
        std::unique_ptr<bool[]> cens(new bool[batch.size()]);
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const auto y = task_label(req.patients[batch[k]], req.task);
            bin.push_back(head.bins.bin_of(y->time));
            cens[k] = !y->event;
        }
        return survival_nll(logits, bin, {cens.get(), batch.size()});
    }
    std::vector<double> labels;
    for (std::size_t i : batch) labels.push_back(task_label(req.patients[i], req.task)->binary);
    return ad::bce_with_logits(logits, labels);
}

double validation_score(const TrainRequest& req, std::span<const std::size_t> val, std::span<const double> scores,
                        double fallback) {
    try {
        return task_metric(req.task, req.patients, val, scores);
    } catch (const Error&) {
        return fallback;
    }
}

Tensor stack(const std::vector<Tensor>& rows) {
    const std::size_t d = rows.empty() ? 0 : rows[0].cols();
    Tensor x = Tensor::matrix(rows.size(), d);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) = rows[r](0, c);
    return x;
}

void check_request(const TrainRequest& req, const std::vector<std::size_t>& train) {
    if (train.empty())
        throw InsufficientGroup("no labeled training patients for task " + std::string(task_name(req.task)));
}

} // namespace

DownstreamResult train_linear_probe(const TrainRequest& req, const FeatureFn& features, std::size_t dim,
                                    const DownstreamConfig& config) {
    const std::vector<std::size_t> train = labeled(req.patients, req.train, req.task);
    const std::vector<std::size_t> val = labeled(req.patients, req.val, req.task);
    check_request(req, train);
    HeadTraining h = make_head(req, train, dim, config);
    nn::ParamList params;
    h.head.linear.collect("head", params);
    AdamW opt({config.lr_lp, 0.9, 0.999, 1e-8, config.weight_decay, config.grad_clip});

    std::vector<Tensor> fixed;
    if (!req.missing_aware)
        for (std::size_t i : train) fixed.push_back(features(i, req.patients[i].availability));
    std::vector<Tensor> val_rows;
    for (std::size_t i : val) val_rows.push_back(features(i, req.patients[i].availability));
    const Tensor val_x = stack(val_rows);

    DownstreamResult result;
    result.head = h.head;
    result.best_val_metric = -1e300;
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng = make_rng(req.seed, {0xE90C, epoch});
        const std::vector<std::size_t> order = permutation(rng, train.size());
        for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
            const std::size_t e = std::min(order.size(), b + config.batch_size);
            std::vector<std::size_t> batch;
            std::vector<Tensor> rows;
            for (std::size_t k = b; k < e; ++k) {
                const std::size_t i = train[order[k]];
                batch.push_back(i);
                rows.push_back(req.missing_aware
                                   ? features(i, dropout_availability(req.patients[i].availability,
                                                                      config.missing_p_mod, req.seed, i, epoch))
                                   : fixed[order[k]]);
            }
            ad::Tape t;
            try {
                ad::Var loss = head_loss(t, req, h.head, h.head.linear, t.constant(stack(rows)), batch);
                t.backward(loss);
            } catch (const NonFiniteError& e) {
                throw NonFiniteLoss("linear probe diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            opt.step(params);
        }
        double metric = -1e300;
        if (!val.empty()) {
            const Tensor s = h.head.scores(val_x);
            metric = validation_score(req, val, std::vector<double>(s.data().begin(), s.data().end()), -1e300);
        }
        result.val_history.push_back(metric);
        if (metric > result.best_val_metric || epoch == 0) {
            result.best_val_metric = metric;
            result.best_epoch = epoch;
            result.head = h.head;
            since_best = 0;
        } else if (config.patience > 0 && ++since_best >= config.patience) {
            break;
        }
    }
    return result;
}

DownstreamResult train_finetune(const TrainRequest& req, const PrimeModel& init, const DownstreamConfig& config) {
    const std::vector<std::size_t> train = labeled(req.patients, req.train, req.task);
    const std::vector<std::size_t> val = labeled(req.patients, req.val, req.task);
    check_request(req, train);
    PrimeModel model = init;
    HeadTraining h = make_head(req, train, model.dim(), config);
    nn::ParamList params = model.parameters();
    h.head.linear.collect("head", params);
    AdamW opt({config.lr_ft, 0.9, 0.999, 1e-8, config.weight_decay, config.grad_clip});

    DownstreamResult result;
    result.head = h.head;
    result.model = model;
    result.best_val_metric = -1e300;
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng = make_rng(req.seed, {0xE90C, epoch});
        const std::vector<std::size_t> order = permutation(rng, train.size());
        for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
            const std::size_t e = std::min(order.size(), b + config.batch_size);
            std::vector<std::size_t> batch;
            ad::Tape t;
            try {
                const BankView bank = model.bank().bind(t);
                std::vector<ad::Var> rows;
                for (std::size_t k = b; k < e; ++k) {
                    const std::size_t i = train[order[k]];
                    batch.push_back(i);
                    const Availability use = req.missing_aware
                                                 ? dropout_availability(req.patients[i].availability,
                                                                        config.missing_p_mod, req.seed, i, epoch)
                                                 : req.patients[i].availability;
                    rows.push_back(model.embed(t, bank, req.patients[i], use, config.pooling));
                }
                ad::Var loss = head_loss(t, req, h.head, h.head.linear, ad::concat_rows(rows), batch);
                t.backward(loss);
            } catch (const NonFiniteError& e) {
                throw NonFiniteLoss("fine-tuning diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            opt.step(params);
        }
        double metric = -1e300;
        if (!val.empty()) {
            std::vector<Tensor> rows;
            for (std::size_t i : val) rows.push_back(model.features(req.patients[i], kAllAvailable, config.pooling));
            const Tensor s = h.head.scores(stack(rows));
            metric = validation_score(req, val, std::vector<double>(s.data().begin(), s.data().end()), -1e300);
        }
        result.val_history.push_back(metric);
        if (metric > result.best_val_metric || epoch == 0) {
            result.best_val_metric = metric;
            result.best_epoch = epoch;
            result.head = h.head;
            result.model = model;
            since_best = 0;
        } else if (config.patience > 0 && ++since_best >= config.patience) {
            break;
        }
    }
    return result;
}

} // namespace prime
