#include "prime/metrics.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace prime {

namespace {

class Fenwick {
public:
    explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
    void add(std::size_t i) {
        for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
    }
    /// Count of inserted ranks < i.
    std::int64_t prefix(std::size_t i) const {
        std::int64_t s = 0;
        for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
        return s;
    }

private:
    std::vector<std::int64_t> tree_;
};

} // namespace

double c_index(std::span<const SurvivalSample> samples) {
    const std::size_t n = samples.size();
    std::vector<double> levels(n);
    for (std::size_t i = 0; i < n; ++i) levels[i] = samples[i].risk;
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    auto rank = [&](double r) { return static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), r) - levels.begin()); };

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a].time > samples[b].time; });

    Fenwick later(levels.size());
    std::int64_t inserted = 0, comparable = 0, concordant2 = 0;
    for (std::size_t g = 0; g < n;) {
        std::size_t h = g;
        while (h < n && samples[order[h]].time == samples[order[g]].time) ++h;
        for (std::size_t k = g; k < h; ++k)
            if (!samples[order[k]].event) {
                later.add(rank(samples[order[k]].risk));
                ++inserted;
            }
        for (std::size_t k = g; k < h; ++k) {
            const SurvivalSample& s = samples[order[k]];
            if (!s.event) continue;
            const std::size_t r = rank(s.risk);
            const std::int64_t below = later.prefix(r);
            const std::int64_t tied = later.prefix(r + 1) - below;
            comparable += inserted;
            concordant2 += 2 * below + tied;
        }
        for (std::size_t k = g; k < h; ++k)
            if (samples[order[k]].event) {
                later.add(rank(samples[order[k]].risk));
                ++inserted;
            }
        g = h;
    }
    if (comparable == 0) throw NoComparablePairs("no comparable pairs for the concordance index");
    return static_cast<double>(concordant2) / (2.0 * static_cast<double>(comparable));
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeMismatch("scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t g = 0; g < n;) {
        std::size_t h = g;
        while (h < n && scores[order[h]] == scores[order[g]]) ++h;
        const double midrank = 0.5 * static_cast<double>(g + 1 + h);
        for (std::size_t k = g; k < h; ++k)
            if (labels[order[k]]) {
                rank_sum += midrank;
                ++n_pos;
            }
        g = h;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw SingleClass("AUROC needs both classes");
    const double p = static_cast<double>(n_pos);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

double KmCurve::at(double t) const {
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return survival[static_cast<std::size_t>(it - times.begin()) - 1];
}

KmCurve km_curve(std::span<const SurvivalSample> samples) {
    if (samples.empty()) throw EmptyBatch("Kaplan-Meier of an empty sample");
    std::vector<SurvivalSample> s(samples.begin(), samples.end());
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
    KmCurve km;
    double surv = 1.0;
    std::size_t at_risk = s.size();
    for (std::size_t g = 0; g < s.size();) {
        std::size_t h = g, d = 0;
        while (h < s.size() && s[h].time == s[g].time) d += s[h++].event ? 1 : 0;
        if (d > 0) {
            surv *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
            km.times.push_back(s[g].time);
            km.survival.push_back(surv);
            km.at_risk.push_back(at_risk);
            km.events.push_back(d);
        }
        at_risk -= h - g;
        g = h;
    }
    return km;
}

LogRankResult logrank_test(std::span<const SurvivalSample> group_a, std::span<const SurvivalSample> group_b) {
    if (group_a.empty() || group_b.empty()) throw InsufficientGroup("log-rank test needs two nonempty groups");
    struct Item {
        double time;
        bool event;
        bool in_a;
    };
    std::vector<Item> all;
    for (const auto& s : group_a) all.push_back({s.time, s.event, true});
    for (const auto& s : group_b) all.push_back({s.time, s.event, false});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.time < b.time; });

    LogRankResult r;
    double n_a = static_cast<double>(group_a.size());
    double n_b = static_cast<double>(group_b.size());
    for (std::size_t g = 0; g < all.size();) {
        std::size_t h = g;
        double d_a = 0, d = 0, leave_a = 0, leave_b = 0;
        for (; h < all.size() && all[h].time == all[g].time; ++h) {
            if (all[h].event) {
                d += 1;
                if (all[h].in_a) d_a += 1;
            }
            (all[h].in_a ? leave_a : leave_b) += 1;
        }
        const double n = n_a + n_b;
        if (d > 0) {
            r.observed_a += d_a;
            r.expected_a += d * n_a / n;
            if (n > 1) r.variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1);
        }
        n_a -= leave_a;
        n_b -= leave_b;
        g = h;
    }
    if (r.variance > 0) {
        const double diff = r.observed_a - r.expected_a;
        r.chi2 = diff * diff / r.variance;
        r.p_value = std::erfc(std::sqrt(r.chi2 / 2.0));
    }
    return r;
}

namespace {

struct CoxTerms {
    double loglik = 0.0;
    double score = 0.0;
    double info = 0.0;
};

// Samples pre-sorted by time descending; risk sets accumulate as time decreases.
CoxTerms cox_terms(const std::vector<std::pair<SurvivalSample, int>>& s, double beta) {
    CoxTerms c;
    double s0 = 0.0, s1 = 0.0;
    const double e = std::exp(beta);
    for (std::size_t g = 0; g < s.size();) {
        std::size_t h = g;
        while (h < s.size() && s[h].first.time == s[g].first.time) {
            const double w = s[h].second ? e : 1.0;
            s0 += w;
            s1 += s[h].second ? w : 0.0;
            ++h;
        }
        for (std::size_t k = g; k < h; ++k) {
            if (!s[k].first.event) continue;
            const double x = s[k].second;
            const double mean = s1 / s0;
            c.loglik += x * beta - std::log(s0);
            c.score += x - mean;
            c.info += mean - mean * mean; // x is binary so S2 = S1
        }
        g = h;
    }
    return c;
}

} // namespace

CoxResult cox_univariate(std::span<const SurvivalSample> samples, std::span<const int> group) {
    if (samples.size() != group.size()) throw ShapeMismatch("samples and group indicator differ in length");
    std::vector<std::pair<SurvivalSample, int>> s;
    std::size_t events1 = 0, events0 = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        s.emplace_back(samples[i], group[i] ? 1 : 0);
        if (samples[i].event) (group[i] ? events1 : events0)++;
    }
    if (events1 == 0 || events0 == 0) throw Separation("Cox fit needs events in both groups");
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first.time > b.first.time; });

    CoxResult r;
    double beta = 0.0;
    CoxTerms cur = cox_terms(s, beta);
    for (int it = 1; it <= 50; ++it) {
        r.iterations = it;
        if (!(cur.info > 1e-12)) throw Separation("Cox information vanished; likelihood is monotone");
        double step = cur.score / cur.info;
        CoxTerms next = cox_terms(s, beta + step);
        for (int halve = 0; halve < 30 && next.loglik < cur.loglik; ++halve) {
            step *= 0.5;
            next = cox_terms(s, beta + step);
        }
        beta += step;
        cur = next;
        if (std::abs(beta) > 30.0) throw Separation("Cox coefficient diverges; likelihood is monotone");
        if (std::abs(step) < 1e-8) {
            r.converged = true;
            break;
        }
    }
    if (!(cur.info > 1e-12)) throw Separation("Cox information vanished at the optimum");
    r.beta = beta;
    r.hazard_ratio = std::exp(beta);
    r.std_error = 1.0 / std::sqrt(cur.info);
    r.ci_low = std::exp(beta - 1.959963984540054 * r.std_error);
    r.ci_high = std::exp(beta + 1.959963984540054 * r.std_error);
    r.score = cur.score;
    return r;
}

Stratification risk_stratify(std::span<const double> risks) {
    if (risks.size() < 2) throw InsufficientGroup("stratification needs at least two patients");
    std::vector<double> sorted(risks.begin(), risks.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    Stratification st;
    st.threshold = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (std::size_t i = 0; i < n; ++i) (risks[i] > st.threshold ? st.high : st.low).push_back(i);
    return st;
}

std::string km_csv(const std::vector<std::pair<std::string, KmCurve>>& curves) {
    std::ostringstream os;
    os << std::setprecision(10) << "group,time,survival,at_risk,events\n";
    for (const auto& [label, km] : curves) {
        os << label << ",0,1,,\n";
        for (std::size_t i = 0; i < km.times.size(); ++i)
            os << label << ',' << km.times[i] << ',' << km.survival[i] << ',' << km.at_risk[i] << ',' << km.events[i]
               << '\n';
    }
    return os.str();
}

std::string km_svg(const std::vector<std::pair<std::string, KmCurve>>& curves, const std::string& title) {
    constexpr double w = 640, h = 400, left = 60, right = 20, top = 40, bottom = 50;
    const char* colors[] = {"#c0392b", "#2471a3", "#229954", "#7d3c98"};
    double t_max = 1.0;
    for (const auto& c : curves)
        if (!c.second.times.empty()) t_max = std::max(t_max, c.second.times.back());
    auto px = [&](double t) { return left + (w - left - right) * t / t_max; };
    auto py = [&](double s) { return top + (h - top - bottom) * (1.0 - s); };

    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
       << title << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << w - right << "\" y2=\"" << py(0)
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << left << "\" y2=\"" << py(1)
       << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double s = k / 4.0;
        os << "<text x=\"" << left - 8 << "\" y=\"" << py(s) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << s
           << "</text>\n";
        const double t = t_max * k / 4.0;
        os << "<text x=\"" << px(t) << "\" y=\"" << py(0) + 16 << "\" text-anchor=\"middle\" font-size=\"11\">" << t
           << "</text>\n";
    }
    os << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10
       << "\" text-anchor=\"middle\" font-size=\"12\">time (months)</text>\n";
    for (std::size_t c = 0; c < curves.size(); ++c) {
        const KmCurve& km = curves[c].second;
        os << "<path fill=\"none\" stroke=\"" << colors[c % 4] << "\" stroke-width=\"2\" d=\"M" << px(0) << ' ' << py(1);
        double s = 1.0;
        for (std::size_t i = 0; i < km.times.size(); ++i) {
            os << " H" << px(km.times[i]) << " V" << py(km.survival[i]);
            s = km.survival[i];
        }
        os << " H" << px(t_max) << " V" << py(s) << "\"/>\n";
        os << "<text x=\"" << w - right - 140 << "\" y=\"" << top + 16 * (c + 1) << "\" font-size=\"12\" fill=\""
           << colors[c % 4] << "\">" << curves[c].first << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace prime
