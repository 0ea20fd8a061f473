#include "prime/prototype.hpp"

#include "prime/error.hpp"

namespace prime {

PrototypeBank::PrototypeBank(std::size_t tokens, std::size_t dim, const BankConfig& config, Rng& rng)
    : size_(config.prototypes),
      tokens_(tokens),
      dim_(dim),
      temperature_(config.temperature),
      prototypes_(normal_tensor(rng, {config.prototypes, tokens * dim}, config.init_std)) {
    if (size_ == 0) throw InvalidConfig("prototype bank needs at least one prototype");
    if (!(temperature_ > 0.0)) throw InvalidConfig("prototype temperature must be positive");
}

BankView PrototypeBank::bind(ad::Tape& t) {
    ad::Var flat = t.param(prototypes_);
    return BankView{flat, ad::l2_normalize_rows(ad::block_mean_cols(flat, tokens_)), tokens_, dim_, temperature_};
}

Tensor PrototypeBank::prototype(std::size_t k) const {
    const std::size_t n = tokens_ * dim_;
    auto d = prototypes_.value.data();
    return Tensor({tokens_, dim_}, std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(k * n),
                                                       d.begin() + static_cast<std::ptrdiff_t>((k + 1) * n)));
}

void PrototypeBank::collect(const std::string& prefix, nn::ParamList& out) {
    out.emplace_back(prefix + ".prototypes", &prototypes_);
}

ad::Var soft_assign(const BankView& bank, ad::Var tokens) {
    ad::Var pooled = ad::l2_normalize_rows(ad::mean_rows(tokens));
    return ad::softmax_rows(ad::scale(ad::matmul_nt(pooled, bank.pooled), 1.0 / bank.temperature));
}

ad::Var consensus(std::span<const ad::Var> assignments) {
    if (assignments.empty()) throw NoObservedModality("consensus of an empty assignment list");
    if (assignments.size() == 1) return assignments[0];
    return ad::mean_rows(ad::concat_rows(assignments));
}

TokenBlock impute_missing(const BankView& bank, ad::Var weights, Modality modality) {
    ad::Var mix = ad::reshape(ad::matmul(weights, bank.flat), bank.tokens, bank.dim);
    return TokenBlock{mix, modality, std::vector<Provenance>(bank.tokens, Provenance::Imputed)};
}

TokenBlock zero_block(ad::Tape& t, std::size_t tokens, std::size_t dim, Modality modality) {
    return TokenBlock{t.constant(Tensor::matrix(tokens, dim)), modality,
                      std::vector<Provenance>(tokens, Provenance::Imputed)};
}

Refiner::Refiner(std::size_t dim, std::size_t heads, const BankConfig& config, Rng& rng) {
    for (std::size_t i = 0; i < config.refine_depth; ++i) blocks_.emplace_back(dim, heads, config.refine_hidden, rng);
}

TokenBlock Refiner::operator()(ad::Tape& t, const TokenBlock& block) {
    ad::Var x = block.tokens;
    for (auto& b : blocks_) x = b(t, x);
    return TokenBlock{x, block.modality, block.provenance};
}

void Refiner::collect(const std::string& prefix, nn::ParamList& out) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
}

CompletedPatient complete_patient(ad::Tape& t, const BankView& bank, Refiners& refiners,
                                  const ObservedBlocks& observed, FillMode fill) {
    CompletedPatient out;
    std::vector<ad::Var> assignments;
    for (Modality m : kModalities) {
        const auto& block = observed[index(m)];
        if (!block) continue;
        out.observed[index(m)] = true;
        ad::Var q = soft_assign(bank, block->tokens);
        out.assignment[index(m)] = q;
        assignments.push_back(q);
    }
    if (assignments.empty()) throw NoObservedModality("patient has no observed modality");
    out.consensus = consensus(assignments);

    for (Modality m : kModalities) {
        const std::size_t i = index(m);
        if (observed[i]) {
            out.pre_refine[i] = *observed[i];
        } else if (fill == FillMode::Prototype) {
            out.pre_refine[i] = impute_missing(bank, out.consensus, m);
        } else {
            out.pre_refine[i] = zero_block(t, bank.tokens, bank.dim, m);
        }
        out.refined[i] = refiners[i](t, out.pre_refine[i]);
    }
    return out;
}

} // namespace prime
