#include "prime/diagnostics.hpp"

#include "prime/downstream.hpp"
#include "prime/error.hpp"
#include "prime/rng.hpp"

#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

namespace prime {

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.input_dims = {6, 5, 4};
    c.tokenizer.tokens = 2;
    c.tokenizer.dim = 8;
    c.tokenizer.heads = 2;
    c.tokenizer.ffn_hidden = 8;
    c.bank.prototypes = 4;
    c.bank.refine_hidden = 8;
    c.fusion.heads = 2;
    c.fusion.ffn_hidden = 8;
    c.ssl.proj_dim = 4;
    c.augment.top_ks = 2;
    return c;
}

SyntheticConfig small_cohort(std::uint64_t seed) {
    SyntheticConfig c;
    c.seed = seed;
    c.n_patients = 6;
    c.lengths = {5, 1, 4};
    c.dims = {6, 5, 4};
    c.missing_rates = {0.4, 0.4, 0.4};
    c.latent_dim = 3;
    c.nuisance_dim = 2;
    return c;
}

// Moves parameters away from their near-zero init so that gradients are not
// tiny and MoE routing margins are far wider than the difference step.
void jitter(const nn::ParamList& params, Rng& rng) {
    for (const auto& [name, p] : params) {
        const Tensor noise = normal_tensor(rng, p->value.shape(), 0.1);
        auto v = p->value.data();
        const auto n = noise.data();
        for (std::size_t k = 0; k < v.size(); ++k) v[k] += n[k];
    }
}

struct Local {
    std::vector<std::unique_ptr<ad::Parameter>> owned;

    ad::Parameter& make(Rng& rng, std::size_t rows, std::size_t cols, double std = 1.0) {
        owned.push_back(std::make_unique<ad::Parameter>(normal_tensor(rng, {rows, cols}, std)));
        return *owned.back();
    }
};

ad::Var probe(ad::Tape& t, ad::Var x, const Tensor& weights) { return ad::sum_all(ad::mul(x, t.constant(weights))); }

nn::ParamList with_prefix(const nn::ParamList& all, const std::string& prefix) {
    nn::ParamList out;
    for (const auto& np : all)
        if (np.first.rfind(prefix, 0) == 0) out.push_back(np);
    return out;
}

TokenBlock block_of(ad::Tape& t, ad::Parameter& p, Modality m, std::vector<Provenance> prov) {
    return {t.param(p), m, std::move(prov)};
}

} // namespace

std::vector<ModuleCheck> gradcheck_suite(const GradCheckSuiteOptions& options) {
    const ad::GradCheckOptions gopt{options.eps, options.max_entries_per_parameter};
    const ModelConfig cfg = small_model();
    const std::size_t T = cfg.tokenizer.tokens, D = cfg.tokenizer.dim;
    PrimeModel model(cfg, options.seed);
    Rng rng = make_rng(options.seed, {0x6C});
    const nn::ParamList all = model.parameters();
    jitter(all, rng);
    if (options.inject_nan) model.bank().parameter().value.data()[0] = std::numeric_limits<double>::quiet_NaN();

    const Cohort cohort = generate_synthetic_cohort(small_cohort(options.seed));
    std::vector<const PatientRecord*> batch;
    for (const PatientRecord& p : cohort.patients) batch.push_back(&p);

    Local local;
    std::vector<ModuleCheck> out;
    auto check = [&](const std::string& module, const ad::LossBuilder& loss, const nn::ParamList& params) {
        try {
            out.push_back({module, ad::grad_check(loss, params, gopt)});
        } catch (const NonFiniteError& e) {
            throw NonFiniteLoss(module + ": " + e.what());
        }
    };

    {
        std::array<Tensor, kNumModalities> emb, weights;
        for (Modality m : kModalities) {
            const std::size_t i = index(m);
            const std::size_t rows = i == 1 ? 1 : 4;
            emb[i] = normal_tensor(rng, {rows, cfg.input_dims[i]}, 1.0);
            weights[i] = normal_tensor(rng, {T, D}, 1.0);
        }
        for (std::size_t c = 0; c < cfg.input_dims[0]; ++c) emb[0](3, c) = 0.0; // one padding row
        check("tokenizer",
              [&](ad::Tape& t) {
                  std::vector<ad::Var> parts;
                  for (Modality m : kModalities)
                      parts.push_back(probe(t, model.tokenizers()[index(m)].tokenize(t, emb[index(m)]).tokens,
                                            weights[index(m)]));
                  return ad::sum_all(ad::concat_rows(parts));
              },
              with_prefix(all, "tokenizer."));
    }
    {
        ad::Parameter& z1 = local.make(rng, T, D);
        ad::Parameter& z2 = local.make(rng, T, D);
        const Tensor w = normal_tensor(rng, {T, D}, 1.0);
        nn::ParamList params = with_prefix(all, "bank.");
        params.emplace_back("input.Z1", &z1);
        params.emplace_back("input.Z2", &z2);
        check("prototype",
              [&](ad::Tape& t) {
                  const BankView bank = model.bank().bind(t);
                  const std::array<ad::Var, 2> q{soft_assign(bank, t.param(z1)), soft_assign(bank, t.param(z2))};
                  return probe(t, impute_missing(bank, consensus(q), Modality::Text).tokens, w);
              },
              params);
    }
    {
        ad::Parameter& z = local.make(rng, T, D);
        const Tensor w = normal_tensor(rng, {T, D}, 1.0);
        nn::ParamList params = with_prefix(all, "refiner.");
        params.emplace_back("input.Z", &z);
        check("refiner",
              [&](ad::Tape& t) {
                  ad::Var acc = t.constant(Tensor::scalar(0.0));
                  for (Modality m : kModalities) {
                      const TokenBlock b = block_of(t, z, m, {Provenance::Observed, Provenance::Imputed});
                      acc = ad::add(acc, probe(t, model.refiners()[index(m)](t, b).tokens, w));
                  }
                  return acc;
              },
              params);
    }
    {
        std::array<ad::Parameter*, kNumModalities> zs{&local.make(rng, T, D), &local.make(rng, T, D),
                                                     &local.make(rng, T, D)};
        const Tensor w = normal_tensor(rng, {kNumModalities * T, D}, 1.0);
        nn::ParamList params = with_prefix(all, "backbone.");
        for (Modality m : kModalities) params.emplace_back(std::string("input.Z") + letter(m), zs[index(m)]);
        check("backbone",
              [&](ad::Tape& t) {
                  std::array<TokenBlock, kNumModalities> blocks;
                  for (Modality m : kModalities)
                      blocks[index(m)] = block_of(t, *zs[index(m)], m,
                                                  {Provenance::Observed, m == Modality::Rna ? Provenance::Imputed
                                                                                            : Provenance::Observed});
                  std::vector<RouterRecord> records = model.backbone().make_records();
                  const FusedSequence o = model.backbone()(t, fuse_concat(blocks), &records);
                  return ad::add(probe(t, o.tokens, w), router_loss(t, records));
              },
              params);
    }
    {
        ad::Parameter& a = local.make(rng, 5, D);
        ad::Parameter& b = local.make(rng, 5, D);
        nn::ParamList params = with_prefix(all, "fusion_head.");
        params.emplace_back("input.A", &a);
        params.emplace_back("input.B", &b);
        check("projection_info_nce",
              [&](ad::Tape& t) {
                  return info_nce(model.fusion_head()(t, t.param(a)), model.fusion_head()(t, t.param(b)),
                                  cfg.ssl.fusion_temperature);
              },
              params);
    }
    {
        const std::vector<Availability> avail{
            {true, true, true}, {true, false, true}, {false, true, true}, {true, true, false}, {true, true, true}};
        std::vector<std::array<ad::Parameter*, kNumModalities>> refined;
        nn::ParamList params = with_prefix(all, "align_head.");
        for (std::size_t i = 0; i < avail.size(); ++i) {
            refined.push_back({&local.make(rng, T, D), &local.make(rng, T, D), &local.make(rng, T, D)});
            for (Modality m : kModalities)
                params.emplace_back("input." + std::to_string(i) + letter(m), refined.back()[index(m)]);
        }
        check("alignment",
              [&](ad::Tape& t) {
                  AlignmentBatch ab;
                  for (std::size_t i = 0; i < avail.size(); ++i) {
                      ab.refined.push_back({t.param(*refined[i][0]), t.param(*refined[i][1]), t.param(*refined[i][2])});
                      ab.availability.push_back(avail[i]);
                  }
                  return alignment_loss(t, model.align_heads(), ab, cfg.ssl.align_temperature);
              },
              params);
    }
    {
        std::vector<ad::Parameter*> seqs;
        nn::ParamList params = with_prefix(all, "fusion_head.");
        for (std::size_t k = 0; k < 8; ++k) {
            seqs.push_back(&local.make(rng, kNumModalities * T, D));
            params.emplace_back("input.O" + std::to_string(k), seqs.back());
        }
        check("fusion_loss",
              [&](ad::Tape& t) {
                  std::array<std::vector<ad::Var>, 2> pooled;
                  for (std::size_t k = 0; k < seqs.size(); ++k) {
                      FusedSequence s;
                      s.tokens = t.param(*seqs[k]);
                      for (Modality m : kModalities)
                          for (std::size_t j = 0; j < T; ++j) s.modality_of_token.push_back(m);
                      for (std::size_t j = 0; j < s.length(); ++j) s.reliability.push_back((j + k) % 3 != 0);
                      pooled[k % 2].push_back(masked_pool(t, s));
                  }
                  return fusion_loss(t, model.fusion_head(), pooled[0], pooled[1], cfg.ssl.fusion_temperature);
              },
              params);
    }
    {
        const std::size_t n = 7, K = 4;
        nn::Linear survival(D, K, rng), binary(D, 1, rng);
        ad::Parameter& x = local.make(rng, n, D);
        std::vector<std::size_t> bins;
        std::unique_ptr<bool[]> cens(new bool[n]);
        std::vector<double> labels;
        for (std::size_t i = 0; i < n; ++i) {
            bins.push_back(i % K);
            cens[i] = i % 3 == 0;
            labels.push_back(static_cast<double>(i % 2));
        }
        nn::ParamList ps, pb;
        survival.collect("survival_head", ps);
        binary.collect("binary_head", pb);
        ps.emplace_back("input.X", &x);
        pb.emplace_back("input.X", &x);
        check("survival_head",
              [&](ad::Tape& t) { return survival_nll(survival(t, t.param(x)), bins, {cens.get(), n}); }, ps);
        check("binary_head", [&](ad::Tape& t) { return ad::bce_with_logits(binary(t, t.param(x)), labels); }, pb);
    }
    {
        std::vector<ViewDraws> frozen;
        {
            ad::Tape t(false);
            model.pretrain_loss(t, batch, options.seed, 0, nullptr, &frozen);
        }
        check("composed_objective",
              [&](ad::Tape& t) { return model.pretrain_loss(t, batch, options.seed, 0, &frozen).loss.total; }, all);
    }
    return out;
}

std::string gradcheck_report_csv(const std::vector<ModuleCheck>& checks) {
    std::ostringstream os;
    os << "module,entries,max_rel_err,worst_parameter\n";
    for (const ModuleCheck& c : checks) {
        std::size_t entries = 0;
        for (const auto& p : c.report.per_parameter) entries += p.checked;
        os << c.module << ',' << entries << ',' << std::scientific << std::setprecision(3) << c.report.max_rel_err
           << ',' << c.report.worst_parameter << '\n'
           << std::defaultfloat;
    }
    return os.str();
}

} // namespace prime
