#include "prime/model.hpp"

#include "prime/error.hpp"

#include <cstring>

namespace prime {

PrimeModel::PrimeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    const std::size_t d = config.tokenizer.dim;
    if (d == 0 || config.tokenizer.tokens == 0) throw InvalidConfig("token count and width must be positive");
    if (config.tokenizer.heads == 0 || d % config.tokenizer.heads != 0)
        throw InvalidConfig("model width must be divisible by the number of heads");
    if (config.fusion.heads == 0 || d % config.fusion.heads != 0)
        throw InvalidConfig("model width must be divisible by the backbone heads");
    if (config.augment.top_ks == 0 || config.augment.top_ks > config.bank.prototypes)
        throw InvalidConfig("top_ks must lie in [1, K_c]");
    if (!(config.augment.alpha > 0.0)) throw InvalidConfig("Dirichlet concentration must be positive");
    if (!(config.augment.p_mod >= 0.0 && config.augment.p_mod < 1.0 && config.augment.p_tok >= 0.0 &&
          config.augment.p_tok < 1.0))
        throw InvalidConfig("dropout probabilities must lie in [0, 1)");
    if (!(config.ssl.lambda >= 0.0 && config.ssl.lambda <= 1.0)) throw InvalidConfig("lambda must lie in [0, 1]");

    Rng rng = make_rng(seed, {0x70DE1});
    for (Modality m : kModalities)
        tokenizers_[index(m)] = ModalityTokenizer(m, config.input_dims[index(m)], config.tokenizer, rng);
    bank_ = PrototypeBank(config.tokenizer.tokens, d, config.bank, rng);
    for (auto& r : refiners_) r = Refiner(d, config.tokenizer.heads, config.bank, rng);
    backbone_ = Backbone(config.fusion, d, rng);
    for (auto& h : align_heads_) h = ProjectionHead(d, config.ssl.proj_dim, rng);
    fusion_head_ = ProjectionHead(d, config.ssl.proj_dim, rng);
}

nn::ParamList PrimeModel::parameters() {
    nn::ParamList out;
    for (Modality m : kModalities) tokenizers_[index(m)].collect("tokenizer." + std::string(1, letter(m)), out);
    bank_.collect("bank", out);
    for (Modality m : kModalities) refiners_[index(m)].collect("refiner." + std::string(1, letter(m)), out);
    backbone_.collect("backbone", out);
    for (Modality m : kModalities) align_heads_[index(m)].collect("align_head." + std::string(1, letter(m)), out);
    fusion_head_.collect("fusion_head", out);
    return out;
}

CompletedPatient PrimeModel::complete(ad::Tape& t, const BankView& bank, const PatientRecord& patient,
                                      const Availability& use) {
    ObservedBlocks observed;
    for (Modality m : kModalities) {
        const std::size_t i = index(m);
        if (patient.availability[i] && use[i] && patient.embeddings[i])
            observed[i] = tokenizers_[i].tokenize(t, *patient.embeddings[i]);
    }
    bool any = false;
    for (const auto& o : observed) any = any || o.has_value();
    if (!any) throw NoObservedModality("patient " + patient.id + " has no usable modality");
    return complete_patient(t, bank, refiners_, observed, config_.fill);
}

ad::Var PrimeModel::embed(ad::Tape& t, const BankView& bank, const PatientRecord& patient, const Availability& use,
                          Pooling pooling) {
    const CompletedPatient done = complete(t, bank, patient, use);
    const FusedSequence out = backbone_(t, fuse_concat(done.refined));
    return pooling == Pooling::Reliable ? masked_pool(t, out) : ad::mean_rows(out.tokens);
}

Tensor PrimeModel::features(const PatientRecord& patient, const Availability& use, Pooling pooling) {
    ad::Tape t(false);
    const BankView bank = bank_.bind(t);
    return embed(t, bank, patient, use, pooling).value();
}

std::vector<ViewDraws> PrimeModel::draw_views(ad::Tape&, const BankView& bank, const std::vector<CompletedPatient>& done,
                                              std::span<const PatientRecord* const> batch, std::uint64_t seed,
                                              std::uint64_t epoch) const {
    std::vector<ViewDraws> draws(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::array<std::vector<double>, kNumModalities> q;
        for (Modality m : kModalities)
            if (const auto& a = done[i].assignment[index(m)]) q[index(m)] = a->value().vec();
        for (std::size_t v = 0; v < 2; ++v) {
            Rng rng = make_rng(seed, {fnv1a(batch[i]->id), v, epoch});
            draws[i][v] = draw_augmentation(rng, done[i].observed, q, bank.tokens, config_.augment);
        }
    }
    return draws;
}

PretrainStep PrimeModel::pretrain_loss(ad::Tape& t, std::span<const PatientRecord* const> batch, std::uint64_t seed,
                                       std::uint64_t epoch, const std::vector<ViewDraws>* frozen,
                                       std::vector<ViewDraws>* drawn) {
    if (batch.empty()) throw EmptyBatch("pretraining batch is empty");
    const BankView bank = bank_.bind(t);
    std::vector<CompletedPatient> done;
    done.reserve(batch.size());
    for (const PatientRecord* p : batch) done.push_back(complete(t, bank, *p));

    std::vector<ViewDraws> local;
    if (!frozen) local = draw_views(t, bank, done, batch, seed, epoch);
    const std::vector<ViewDraws>& draws = frozen ? *frozen : local;
    if (draws.size() != batch.size()) throw ShapeMismatch("one pair of augmentation draws per patient required");
    if (drawn) *drawn = draws;

    PretrainStep step;
    AlignmentBatch align_batch;
    for (const CompletedPatient& d : done) {
        align_batch.refined.push_back({d.refined[0].tokens, d.refined[1].tokens, d.refined[2].tokens});
        align_batch.availability.push_back(d.observed);
    }
    ad::Var align = alignment_loss(t, align_heads_, align_batch, config_.ssl.align_temperature, &step.alignment);

    std::vector<RouterRecord> records = backbone_.make_records();
    std::array<std::vector<ad::Var>, 2> pooled;
    for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t v = 0; v < 2; ++v) {
            const FusedSequence view = apply_augmentation(t, bank, done[i], draws[i][v], config_.fill);
            pooled[v].push_back(masked_pool(t, backbone_(t, view, &records)));
        }
    ad::Var fusion = fusion_loss(t, fusion_head_, pooled[0], pooled[1], config_.ssl.fusion_temperature);
    std::optional<ad::Var> router;
    if (backbone_.moe_blocks() > 0) router = router_loss(t, records);
    for (const RouterRecord& r : records) step.router.push_back(summarize(r));

    step.loss = total_loss(t, align, fusion, router, config_.ssl.lambda, config_.ssl.lambda_router);
    return step;
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& s) {
    return fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

std::uint64_t parameter_hash(const nn::ParamList& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, p] : params) {
        h = fnv1a({reinterpret_cast<const unsigned char*>(name.data()), name.size()}, h);
        auto d = p->value.data();
        h = fnv1a({reinterpret_cast<const unsigned char*>(d.data()), d.size() * sizeof(double)}, h);
    }
    return h;
}

} // namespace prime
