#include "prime/config.hpp"

#include "prime/error.hpp"

#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace prime {

using nlohmann::json;

namespace {

class Section {
public:
    Section(const json& root, const std::string& name) : name_(name) {
        if (!root.contains(name)) return;
        node_ = &root.at(name);
        if (!node_->is_object()) throw InvalidConfig("section '" + name + "' must be an object");
    }

    ~Section() noexcept(false) {
        if (!node_ || std::uncaught_exceptions() > 0) return;
        for (const auto& [key, value] : node_->items())
            if (!seen_.count(key)) throw InvalidConfig("unknown key '" + name_ + "." + key + "'");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!node_ || !node_->contains(key)) return;
        const json& v = node_->at(key);
        try {
            read(v, out);
        } catch (const json::exception& e) {
            throw InvalidConfig("bad value for '" + name_ + "." + key + "': " + e.what());
        } catch (const InvalidConfig& e) {
            throw InvalidConfig("bad value for '" + name_ + "." + key + "': " + e.what());
        }
    }

private:
    static void read(const json& v, std::size_t& out) {
        if (!v.is_number_integer() || v.get<long long>() < 0) throw InvalidConfig("expected a non-negative integer");
        out = v.get<std::size_t>();
    }
    static void read(const json& v, double& out) {
        if (!v.is_number()) throw InvalidConfig("expected a number");
        out = v.get<double>();
    }
    static void read(const json& v, bool& out) {
        if (!v.is_boolean()) throw InvalidConfig("expected true or false");
        out = v.get<bool>();
    }
    static void read(const json& v, std::string& out) {
        if (!v.is_string()) throw InvalidConfig("expected a string");
        out = v.get<std::string>();
    }
    template <typename T, std::size_t N>
    static void read(const json& v, std::array<T, N>& out) {
        if (!v.is_array() || v.size() != N) throw InvalidConfig("expected an array of " + std::to_string(N));
        for (std::size_t i = 0; i < N; ++i) read(v[i], out[i]);
    }
    template <typename T>
    static void read(const json& v, std::vector<T>& out) {
        if (!v.is_array()) throw InvalidConfig("expected an array");
        out.assign(v.size(), T{});
        for (std::size_t i = 0; i < v.size(); ++i) read(v[i], out[i]);
    }

    std::string name_;
    const json* node_ = nullptr;
    std::set<std::string> seen_;
};

const std::set<std::string> kSections{"experiment", "data",       "tokenizer", "bank",    "fusion", "ssl", "augment",
                                      "model",      "pretrain",   "downstream", "evaluation", "sweep", "paths"};

std::string fill_name(FillMode f) { return f == FillMode::Prototype ? "prototype" : "zeros"; }
FillMode parse_fill(const std::string& s) {
    if (s == "prototype") return FillMode::Prototype;
    if (s == "zeros") return FillMode::Zeros;
    throw InvalidConfig("model.fill must be 'prototype' or 'zeros'");
}
std::string pooling_name(Pooling p) { return p == Pooling::Reliable ? "reliable" : "all"; }
Pooling parse_pooling(const std::string& s) {
    if (s == "reliable") return Pooling::Reliable;
    if (s == "all") return Pooling::All;
    throw InvalidConfig("downstream.pooling must be 'reliable' or 'all'");
}
std::string cohort_name(PretrainCohort c) { return c == PretrainCohort::Union ? "union" : "full_only"; }
PretrainCohort parse_cohort(const std::string& s) {
    if (s == "union") return PretrainCohort::Union;
    if (s == "full_only") return PretrainCohort::FullOnly;
    throw InvalidConfig("pretrain.cohort must be 'union' or 'full_only'");
}

} // namespace

ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw InvalidConfig("config root must be an object");
    for (const auto& [key, value] : j.items())
        if (!kSections.count(key)) throw InvalidConfig("unknown section '" + key + "'");

    ExperimentConfig c;
    {
        Section s(j, "experiment");
        s.get("name", c.name);
        s.get("seed", c.seed);
        s.get("threads", c.threads);
    }
    c.data.seed = c.seed;
    {
        Section s(j, "data");
        SyntheticConfig& d = c.data;
        s.get("n_patients", d.n_patients);
        s.get("latent_dim", d.latent_dim);
        s.get("nuisance_dim", d.nuisance_dim);
        s.get("lengths", d.lengths);
        s.get("dims", d.dims);
        s.get("missing_rates", d.missing_rates);
        s.get("hazard_coupling", d.hazard_coupling);
        s.get("signal_scale", d.signal_scale);
        s.get("nuisance_scale", d.nuisance_scale);
        s.get("row_noise", d.row_noise);
        s.get("median_survival_months", d.median_survival_months);
        s.get("median_pfi_months", d.median_pfi_months);
        s.get("median_censor_months", d.median_censor_months);
        s.get("n_sites", d.n_sites);
    }
    {
        Section s(j, "tokenizer");
        TokenizerConfig& t = c.model.tokenizer;
        s.get("tokens", t.tokens);
        s.get("dim", t.dim);
        s.get("heads", t.heads);
        s.get("ffn_hidden", t.ffn_hidden);
        s.get("query_init_std", t.query_init_std);
    }
    {
        Section s(j, "bank");
        BankConfig& b = c.model.bank;
        s.get("prototypes", b.prototypes);
        s.get("temperature", b.temperature);
        s.get("init_std", b.init_std);
        s.get("refine_depth", b.refine_depth);
        s.get("refine_hidden", b.refine_hidden);
    }
    {
        Section s(j, "fusion");
        FusionConfig& f = c.model.fusion;
        s.get("depth", f.depth);
        s.get("experts", f.experts);
        s.get("top_k", f.top_k);
        s.get("heads", f.heads);
        s.get("ffn_hidden", f.ffn_hidden);
        s.get("segment_embedding", f.segment_embedding);
    }
    {
        Section s(j, "ssl");
        SslConfig& l = c.model.ssl;
        s.get("proj_dim", l.proj_dim);
        s.get("align_temperature", l.align_temperature);
        s.get("fusion_temperature", l.fusion_temperature);
        s.get("lambda", l.lambda);
        s.get("lambda_router", l.lambda_router);
    }
    {
        Section s(j, "augment");
        AugmentConfig& a = c.model.augment;
        s.get("p_mod", a.p_mod);
        s.get("p_tok", a.p_tok);
        s.get("top_ks", a.top_ks);
        s.get("alpha", a.alpha);
    }
    {
        Section s(j, "model");
        std::string fill = fill_name(c.model.fill);
        s.get("fill", fill);
        c.model.fill = parse_fill(fill);
    }
    {
        Section s(j, "pretrain");
        PretrainConfig& p = c.pretrain;
        s.get("epochs", p.epochs);
        s.get("batch_size", p.batch_size);
        s.get("lr", p.lr);
        s.get("weight_decay", p.weight_decay);
        s.get("grad_clip", p.grad_clip);
        s.get("val_fraction", p.val_fraction);
        std::string cohort = cohort_name(p.cohort);
        s.get("cohort", cohort);
        p.cohort = parse_cohort(cohort);
    }
    {
        Section s(j, "downstream");
        DownstreamConfig& d = c.downstream;
        s.get("k_time", d.k_time);
        s.get("lr_ft", d.lr_ft);
        s.get("lr_lp", d.lr_lp);
        s.get("weight_decay", d.weight_decay);
        s.get("batch_size", d.batch_size);
        s.get("epochs", d.epochs);
        s.get("patience", d.patience);
        s.get("grad_clip", d.grad_clip);
        s.get("missing_p_mod", d.missing_p_mod);
        std::string pooling = pooling_name(d.pooling);
        s.get("pooling", pooling);
        d.pooling = parse_pooling(pooling);
    }
    {
        Section s(j, "evaluation");
        EvaluationConfig& e = c.evaluation;
        s.get("folds", e.folds);
        std::vector<std::string> tasks;
        for (Task t : e.tasks) tasks.emplace_back(task_name(t));
        s.get("tasks", tasks);
        e.tasks.clear();
        for (const auto& t : tasks) e.tasks.push_back(parse_task(t));
        std::string mode(mode_name(e.mode));
        s.get("mode", mode);
        e.mode = parse_mode(mode);
        s.get("missing_aware", e.missing_aware);
        s.get("label_fraction", e.label_fraction);
    }
    {
        Section s(j, "sweep");
        s.get("label_fractions", c.sweep.label_fractions);
        s.get("prototypes", c.sweep.prototypes);
        s.get("lambdas", c.sweep.lambdas);
    }
    {
        Section s(j, "paths");
        s.get("cohort_dir", c.paths.cohort_dir);
        s.get("checkpoint", c.paths.checkpoint);
        s.get("out_dir", c.paths.out_dir);
    }
    c.model.input_dims = c.data.dims;
    validate(c);
    return c;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["experiment"] = {{"name", c.name}, {"seed", c.seed}, {"threads", c.threads}};
    const SyntheticConfig& d = c.data;
    j["data"] = {{"n_patients", d.n_patients},
                 {"latent_dim", d.latent_dim},
                 {"nuisance_dim", d.nuisance_dim},
                 {"lengths", d.lengths},
                 {"dims", d.dims},
                 {"missing_rates", d.missing_rates},
                 {"hazard_coupling", d.hazard_coupling},
                 {"signal_scale", d.signal_scale},
                 {"nuisance_scale", d.nuisance_scale},
                 {"row_noise", d.row_noise},
                 {"median_survival_months", d.median_survival_months},
                 {"median_pfi_months", d.median_pfi_months},
                 {"median_censor_months", d.median_censor_months},
                 {"n_sites", d.n_sites}};
    const TokenizerConfig& t = c.model.tokenizer;
    j["tokenizer"] = {{"tokens", t.tokens},
                      {"dim", t.dim},
                      {"heads", t.heads},
                      {"ffn_hidden", t.ffn_hidden},
                      {"query_init_std", t.query_init_std}};
    const BankConfig& b = c.model.bank;
    j["bank"] = {{"prototypes", b.prototypes},
                 {"temperature", b.temperature},
                 {"init_std", b.init_std},
                 {"refine_depth", b.refine_depth},
                 {"refine_hidden", b.refine_hidden}};
    const FusionConfig& f = c.model.fusion;
    j["fusion"] = {{"depth", f.depth},         {"experts", f.experts},       {"top_k", f.top_k},
                   {"heads", f.heads},         {"ffn_hidden", f.ffn_hidden}, {"segment_embedding", f.segment_embedding}};
    const SslConfig& l = c.model.ssl;
    j["ssl"] = {{"proj_dim", l.proj_dim},
                {"align_temperature", l.align_temperature},
                {"fusion_temperature", l.fusion_temperature},
                {"lambda", l.lambda},
                {"lambda_router", l.lambda_router}};
    const AugmentConfig& a = c.model.augment;
    j["augment"] = {{"p_mod", a.p_mod}, {"p_tok", a.p_tok}, {"top_ks", a.top_ks}, {"alpha", a.alpha}};
    j["model"] = {{"fill", fill_name(c.model.fill)}};
    const PretrainConfig& p = c.pretrain;
    j["pretrain"] = {{"epochs", p.epochs},
                     {"batch_size", p.batch_size},
                     {"lr", p.lr},
                     {"weight_decay", p.weight_decay},
                     {"grad_clip", p.grad_clip},
                     {"val_fraction", p.val_fraction},
                     {"cohort", cohort_name(p.cohort)}};
    const DownstreamConfig& ds = c.downstream;
    j["downstream"] = {{"k_time", ds.k_time},
                       {"lr_ft", ds.lr_ft},
                       {"lr_lp", ds.lr_lp},
                       {"weight_decay", ds.weight_decay},
                       {"batch_size", ds.batch_size},
                       {"epochs", ds.epochs},
                       {"patience", ds.patience},
                       {"grad_clip", ds.grad_clip},
                       {"missing_p_mod", ds.missing_p_mod},
                       {"pooling", pooling_name(ds.pooling)}};
    std::vector<std::string> tasks;
    for (Task task : c.evaluation.tasks) tasks.emplace_back(task_name(task));
    j["evaluation"] = {{"folds", c.evaluation.folds},
                       {"tasks", tasks},
                       {"mode", std::string(mode_name(c.evaluation.mode))},
                       {"missing_aware", c.evaluation.missing_aware},
                       {"label_fraction", c.evaluation.label_fraction}};
    j["sweep"] = {{"label_fractions", c.sweep.label_fractions},
                  {"prototypes", c.sweep.prototypes},
                  {"lambdas", c.sweep.lambdas}};
    j["paths"] = {{"cohort_dir", c.paths.cohort_dir}, {"checkpoint", c.paths.checkpoint}, {"out_dir", c.paths.out_dir}};
    return j;
}

void validate(const ExperimentConfig& c) {
    validate(c.data);
    if (c.model.input_dims != c.data.dims) throw InvalidConfig("model input dims must match data dims");
    const auto& t = c.model.tokenizer;
    if (t.tokens == 0 || t.dim == 0 || t.heads == 0 || t.dim % t.heads != 0)
        throw InvalidConfig("tokenizer.dim must be a positive multiple of tokenizer.heads");
    if (c.model.fusion.heads == 0 || t.dim % c.model.fusion.heads != 0)
        throw InvalidConfig("tokenizer.dim must be a multiple of fusion.heads");
    if (c.model.fusion.depth % 2 != 0) throw InvalidConfig("fusion.depth must be even");
    if (c.model.fusion.experts == 0 || c.model.fusion.top_k == 0 || c.model.fusion.top_k > c.model.fusion.experts)
        throw InvalidConfig("fusion.top_k must lie in [1, experts]");
    if (c.model.bank.prototypes == 0) throw InvalidConfig("bank.prototypes must be positive");
    if (!(c.model.bank.temperature > 0)) throw InvalidConfig("bank.temperature must be positive");
    if (!(c.model.ssl.align_temperature > 0 && c.model.ssl.fusion_temperature > 0))
        throw InvalidConfig("InfoNCE temperatures must be positive");
    if (!(c.model.ssl.lambda >= 0 && c.model.ssl.lambda <= 1)) throw InvalidConfig("ssl.lambda must lie in [0, 1]");
    if (c.model.ssl.lambda_router < 0) throw InvalidConfig("ssl.lambda_router must be nonnegative");
    const auto& a = c.model.augment;
    if (!(a.p_mod >= 0 && a.p_mod < 1 && a.p_tok >= 0 && a.p_tok < 1))
        throw InvalidConfig("augment probabilities must lie in [0, 1)");
    if (a.top_ks == 0 || a.top_ks > c.model.bank.prototypes) throw InvalidConfig("augment.top_ks must lie in [1, K_c]");
    if (!(a.alpha > 0)) throw InvalidConfig("augment.alpha must be positive");
    if (c.pretrain.batch_size == 0 || c.downstream.batch_size == 0) throw InvalidConfig("batch sizes must be positive");
    if (!(c.pretrain.val_fraction > 0 && c.pretrain.val_fraction < 1))
        throw InvalidConfig("pretrain.val_fraction must lie in (0, 1)");
    if (!(c.pretrain.lr > 0 && c.downstream.lr_ft > 0 && c.downstream.lr_lp > 0))
        throw InvalidConfig("learning rates must be positive");
    if (c.downstream.k_time == 0) throw InvalidConfig("downstream.k_time must be positive");
    if (!(c.downstream.missing_p_mod >= 0 && c.downstream.missing_p_mod < 1))
        throw InvalidConfig("downstream.missing_p_mod must lie in [0, 1)");
    if (c.evaluation.folds < 2) throw InvalidConfig("evaluation.folds must be at least 2");
    if (c.evaluation.tasks.empty()) throw InvalidConfig("evaluation.tasks must not be empty");
    if (!(c.evaluation.label_fraction > 0 && c.evaluation.label_fraction <= 1))
        throw InvalidConfig("evaluation.label_fraction must lie in (0, 1]");
    for (double f : c.sweep.label_fractions)
        if (!(f > 0 && f <= 1)) throw InvalidConfig("sweep.label_fractions must lie in (0, 1]");
    for (double l : c.sweep.lambdas)
        if (!(l >= 0 && l <= 1)) throw InvalidConfig("sweep.lambdas must lie in [0, 1]");
    for (std::size_t k : c.sweep.prototypes)
        if (k == 0) throw InvalidConfig("sweep.prototypes must be positive");
    if (c.threads == 0) throw InvalidConfig("experiment.threads must be positive");
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingFile("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    }
    ExperimentConfig c = config_from_json(j);
    if (const char* v = std::getenv("PRIME_COHORT_DIR")) c.paths.cohort_dir = v;
    if (const char* v = std::getenv("PRIME_CHECKPOINT")) c.paths.checkpoint = v;
    if (const char* v = std::getenv("PRIME_OUT_DIR")) c.paths.out_dir = v;
    if (const char* v = std::getenv("PRIME_THREADS")) {
        try {
            c.threads = static_cast<std::size_t>(std::stoul(v));
        } catch (const std::exception&) {
            throw InvalidConfig("PRIME_THREADS must be a positive integer");
        }
        if (c.threads == 0) throw InvalidConfig("PRIME_THREADS must be a positive integer");
    }
    return c;
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

std::string fingerprint(const ExperimentConfig& c) {
    json j = config_to_json(c);
    j.erase("paths");
    j["experiment"].erase("threads");
    return sha256_hex(j.dump());
}

} // namespace prime
