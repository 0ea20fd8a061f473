#include "prime/cohort.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace prime {

namespace fs = std::filesystem;

std::optional<bool> PatientRecord::mortality_3y() const {
    if (time_months > kThreeYearsMonths) return false;
    if (censored) return std::nullopt;
    return true;
}

std::optional<bool> PatientRecord::recurrence_3y() const {
    if (!pfi_months) return std::nullopt;
    if (*pfi_months > kThreeYearsMonths) return false;
    if (pfi_censored) return std::nullopt;
    return true;
}

void validate(const SyntheticConfig& c) {
    if (c.n_patients == 0) throw InvalidConfig("synthetic cohort needs at least one patient");
    if (c.latent_dim == 0) throw InvalidConfig("latent_dim must be positive");
    for (Modality m : kModalities) {
        const double r = c.missing_rates[index(m)];
        if (!(r >= 0.0 && r < 1.0))
            throw InvalidConfig("missing rate for " + std::string(name(m)) + " must lie in [0, 1)");
        if (c.lengths[index(m)] == 0 || c.dims[index(m)] == 0)
            throw InvalidConfig("embedding shape for " + std::string(name(m)) + " must be nonempty");
    }
    if (c.n_sites == 0) throw InvalidConfig("n_sites must be positive");
    if (!(c.median_survival_months > 0 && c.median_pfi_months > 0 && c.median_censor_months > 0))
        throw InvalidConfig("median times must be positive");
}

namespace {

std::string patient_name(std::size_t i) {
    std::ostringstream os;
    os << "P" << std::setw(5) << std::setfill('0') << i;
    return os.str();
}

std::vector<double> unit_vector(Rng& rng, std::size_t n) {
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    double norm = 0.0;
    for (double& x : v) {
        x = g(rng);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

} // namespace

Cohort generate_synthetic_cohort(const SyntheticConfig& c) {
    validate(c);
    Rng world = make_rng(c.seed, {1});
    std::array<Tensor, kNumModalities> signal_maps, nuisance_maps;
    for (Modality m : kModalities) {
        const std::size_t i = index(m);
        signal_maps[i] = normal_tensor(world, {c.dims[i], c.latent_dim}, 1.0 / std::sqrt(double(c.latent_dim)));
        nuisance_maps[i] = normal_tensor(world, {c.dims[i], std::max<std::size_t>(c.nuisance_dim, 1)},
                                         1.0 / std::sqrt(double(std::max<std::size_t>(c.nuisance_dim, 1))));
    }
    const std::vector<double> w_os = unit_vector(world, c.latent_dim);
    std::vector<double> w_pfi = unit_vector(world, c.latent_dim);
    for (std::size_t k = 0; k < c.latent_dim; ++k) w_pfi[k] = 0.8 * w_os[k] + 0.6 * w_pfi[k];

    const double base_os = std::log(2.0) / c.median_survival_months;
    const double base_pfi = std::log(2.0) / c.median_pfi_months;
    const double base_cens = std::log(2.0) / c.median_censor_months;
    constexpr double admin_censor = 120.0;

    Cohort cohort;
    cohort.dims = c.dims;
    cohort.patients.reserve(c.n_patients);
    for (std::size_t p = 0; p < c.n_patients; ++p) {
        Rng rng = make_rng(c.seed, {2, p});
        std::normal_distribution<double> g;
        std::uniform_real_distribution<double> u01;
        PatientRecord rec;
        rec.id = patient_name(p);
        rec.latent.resize(c.latent_dim);
        for (double& z : rec.latent) z = g(rng);

        for (Modality m : kModalities) rec.availability[index(m)] = !(u01(rng) < c.missing_rates[index(m)]);
        if (count(rec.availability) == 0) {
            std::uniform_int_distribution<std::size_t> pick(0, kNumModalities - 1);
            rec.availability[pick(rng)] = true;
        }
        std::uniform_int_distribution<std::size_t> site(0, c.n_sites - 1);
        rec.site = site(rng);

        for (Modality m : kModalities) {
            const std::size_t i = index(m);
            // Draw the nuisance and length even when missing so availability
            // does not shift the rest of the patient's stream.
            std::vector<double> nuisance(nuisance_maps[i].cols());
            for (double& v : nuisance) v = g(rng);
            const std::size_t full = c.lengths[i];
            std::uniform_int_distribution<std::size_t> len((full + 1) / 2, full);
            const std::size_t rows = full > 1 ? len(rng) : 1;
            if (!rec.availability[i]) continue;

            const std::size_t d = c.dims[i];
            std::vector<double> base(d, 0.0);
            for (std::size_t r = 0; r < d; ++r) {
                double s = 0.0, q = 0.0;
                for (std::size_t k = 0; k < c.latent_dim; ++k) s += signal_maps[i](r, k) * rec.latent[k];
                if (c.nuisance_dim > 0)
                    for (std::size_t k = 0; k < nuisance.size(); ++k) q += nuisance_maps[i](r, k) * nuisance[k];
                base[r] = c.signal_scale * s + c.nuisance_scale * q;
            }
            Tensor e = Tensor::matrix(rows, d);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t col = 0; col < d; ++col)
                    e(r, col) = static_cast<float>(std::tanh(base[col] + c.row_noise * g(rng)));
            rec.embeddings[i] = std::move(e);
        }

        const double eta = c.hazard_coupling * dot(w_os, rec.latent);
        const double eta_pfi = c.hazard_coupling * dot(w_pfi, rec.latent);
        std::exponential_distribution<double> t_os(base_os * std::exp(eta));
        std::exponential_distribution<double> t_pfi(base_pfi * std::exp(eta_pfi));
        std::exponential_distribution<double> t_cens(base_cens);
        const double os = t_os(rng);
        const double pfi = t_pfi(rng);
        const double cens = std::min(t_cens(rng), admin_censor);
        rec.time_months = std::min(os, cens);
        rec.censored = os > cens;
        rec.pfi_months = std::min(pfi, cens);
        rec.pfi_censored = pfi > cens;
        cohort.patients.push_back(std::move(rec));
    }
    return cohort;
}

// ---- PRIMEMB1 ----

namespace {

constexpr char kMagic[8] = {'P', 'R', 'I', 'M', 'E', 'M', 'B', '1'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
public:
    Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    template <typename T>
    T get(const char* what) {
        if (offset_ + sizeof(T) > bytes_.size())
            throw FormatError(path_ + ": truncated while reading " + what + " at byte offset " +
                              std::to_string(offset_) + " (file has " + std::to_string(bytes_.size()) + " bytes)");
        T v;
        std::memcpy(&v, bytes_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return v;
    }

    std::size_t offset() const { return offset_; }
    std::size_t size() const { return bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    std::vector<char> bytes_;
    std::string path_;
    std::size_t offset_ = 0;
};

} // namespace

void write_matrix(const fs::path& path, const Tensor& t, DType dtype) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingFile("cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof(kMagic));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
        if (dtype == DType::F32)
            put<float>(os, static_cast<float>(v));
        else
            put<double>(os, v);
    }
    if (!os) throw MissingFile("failed writing " + path.string());
}

Tensor read_matrix(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFile("cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader r(std::move(bytes), path.string());
    char magic[8];
    for (char& ch : magic) ch = r.get<char>("magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError(path.string() + ": bad magic at byte offset 0");
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) throw FormatError(path.string() + ": unknown dtype code " + std::to_string(code) + " at byte offset 8");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw FormatError(path.string() + ": unsupported rank at byte offset 9");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("dims");
    const std::size_t n = shape_numel(shape);
    const std::size_t width = code == 0 ? sizeof(float) : sizeof(double);
    if (r.size() - r.offset() != n * width) {
        const std::size_t expected = r.offset() + n * width;
        throw FormatError(path.string() + ": payload size mismatch, expected " + std::to_string(expected) +
                          " bytes, payload ends at byte offset " + std::to_string(r.size()));
    }
    Storage data(n);
    for (auto& v : data) v = code == 0 ? static_cast<double>(r.get<float>("payload")) : r.get<double>("payload");
    return Tensor(shape, std::move(data));
}

fs::path embedding_path(const fs::path& data_dir, const std::string& patient_id, Modality m) {
    return data_dir / std::string(1, letter(m)) / (patient_id + ".bin");
}

void write_cohort(const Cohort& cohort, const fs::path& dir, DType dtype) {
    fs::create_directories(dir);
    std::ofstream os(dir / "manifest.csv");
    if (!os) throw MissingFile("cannot write manifest in " + dir.string());
    os << "patient_id,time_months,censored,has_I,has_R,has_T,pfi_months,pfi_censored,site\n";
    os << std::setprecision(17);
    for (const PatientRecord& p : cohort.patients) {
        os << p.id << ',' << p.time_months << ',' << int(p.censored);
        for (Modality m : kModalities) os << ',' << int(p.availability[index(m)]);
        if (p.pfi_months)
            os << ',' << *p.pfi_months << ',' << int(p.pfi_censored);
        else
            os << ",,";
        os << ',' << p.site << '\n';
        for (Modality m : kModalities)
            if (p.embeddings[index(m)]) write_matrix(embedding_path(dir, p.id, m), *p.embeddings[index(m)], dtype);
    }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    for (auto& s : out)
        while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(where + ": not a number: '" + s + "'");
    }
}

bool parse_flag(const std::string& s, const std::string& where) {
    if (s == "0") return false;
    if (s == "1") return true;
    throw FormatError(where + ": expected 0 or 1, got '" + s + "'");
}

} // namespace

Cohort load_embeddings(const fs::path& manifest_path, const fs::path& data_dir) {
    std::ifstream is(manifest_path);
    if (!is) throw MissingFile("cannot open manifest " + manifest_path.string());
    std::string line;
    if (!std::getline(is, line)) throw FormatError(manifest_path.string() + ": empty manifest");
    const std::vector<std::string> header = split_csv(line);
    const std::vector<std::string> required{"patient_id", "time_months", "censored", "has_I", "has_R", "has_T"};
    auto column = [&](const std::string& name) -> std::optional<std::size_t> {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    std::vector<std::size_t> col;
    for (const auto& name : required) {
        const auto c = column(name);
        if (!c) throw FormatError(manifest_path.string() + ": missing column " + name);
        col.push_back(*c);
    }
    const auto pfi_col = column("pfi_months");
    const auto pfi_cens_col = column("pfi_censored");
    const auto site_col = column("site");

    Cohort cohort;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const std::vector<std::string> cells = split_csv(line);
        const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
        if (cells.size() < header.size()) throw FormatError(where + ": too few columns");
        PatientRecord rec;
        rec.id = cells[col[0]];
        if (rec.id.empty()) throw FormatError(where + ": empty patient_id");
        rec.time_months = parse_double(cells[col[1]], where);
        if (rec.time_months < 0) throw FormatError(where + ": negative time");
        rec.censored = parse_flag(cells[col[2]], where);
        if (pfi_col && pfi_cens_col && !cells[*pfi_col].empty()) {
            rec.pfi_months = parse_double(cells[*pfi_col], where);
            rec.pfi_censored = parse_flag(cells[*pfi_cens_col], where);
        }
        if (site_col && !cells[*site_col].empty()) {
            const double site = parse_double(cells[*site_col], where);
            if (site < 0 || site != std::floor(site)) throw FormatError(where + ": site must be a non-negative integer");
            rec.site = static_cast<std::size_t>(site);
        }
        for (Modality m : kModalities) {
            const std::size_t i = index(m);
            const fs::path file = embedding_path(data_dir, rec.id, m);
            if (!parse_flag(cells[col[3 + i]], where) || !fs::exists(file)) continue;
            Tensor e = read_matrix(file);
            if (e.rank() != 2) throw FormatError(file.string() + ": embedding must be a matrix");
            if (cohort.dims[i] == 0) cohort.dims[i] = e.cols();
            if (e.cols() != cohort.dims[i])
                throw DimMismatch(file.string() + ": width " + std::to_string(e.cols()) + " differs from " +
                                  std::to_string(cohort.dims[i]));
            rec.availability[i] = true;
            rec.embeddings[i] = std::move(e);
        }
        cohort.patients.push_back(std::move(rec));
    }
    std::sort(cohort.patients.begin(), cohort.patients.end(),
              [](const PatientRecord& a, const PatientRecord& b) { return a.id < b.id; });
    return cohort;
}

CohortStats cohort_stats(const std::vector<PatientRecord>& patients) {
    CohortStats s;
    s.n = patients.size();
    for (const PatientRecord& p : patients) {
        (p.censored ? s.os_censored : s.os_events)++;
        if (auto y = p.mortality_3y()) (*y ? s.mortality_pos : s.mortality_neg)++;
        if (auto y = p.recurrence_3y()) (*y ? s.recurrence_pos : s.recurrence_neg)++;
        for (Modality m : kModalities)
            if (p.availability[index(m)]) s.modality_counts[index(m)]++;
    }
    return s;
}

std::string cohort_stats_csv(const CohortStats& s) {
    std::ostringstream os;
    os << "n,os_events,os_censored,mortality_3y_pos,mortality_3y_neg,recurrence_3y_pos,recurrence_3y_neg,n_I,n_R,n_T\n";
    os << s.n << ',' << s.os_events << ',' << s.os_censored << ',' << s.mortality_pos << ',' << s.mortality_neg << ','
       << s.recurrence_pos << ',' << s.recurrence_neg << ',' << s.modality_counts[0] << ',' << s.modality_counts[1]
       << ',' << s.modality_counts[2] << '\n';
    return os.str();
}

std::pair<std::size_t, std::size_t> parse_count_pair(const std::string& cell) {
    const auto slash = cell.find('/');
    if (slash == std::string::npos) throw FormatError("expected 'a / b', got '" + cell + "'");
    auto parse = [&](std::string s) {
        s.erase(0, s.find_first_not_of(" \t"));
        s.erase(s.find_last_not_of(" \t") + 1);
        if (s.empty() || !std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
            throw FormatError("expected a count, got '" + s + "' in '" + cell + "'");
        return static_cast<std::size_t>(std::stoull(s));
    };
    return {parse(cell.substr(0, slash)), parse(cell.substr(slash + 1))};
}

std::vector<FoldSplit> make_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw InvalidConfig("need at least two folds");
    if (n < k) throw InvalidConfig("fewer patients than folds");
    Rng rng = make_rng(seed, {0xF01D});
    const std::vector<std::size_t> order = permutation(rng, n);
    const std::size_t n_val = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
    std::vector<FoldSplit> folds(k);
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t begin = f * n / k;
        const std::size_t end = (f + 1) * n / k;
        FoldSplit& s = folds[f];
        s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t pos = (end + i) % n;
            if (pos >= begin && pos < end) continue;
            rest.push_back(order[pos]);
        }
        const std::size_t v = std::min(n_val, rest.size() > 0 ? rest.size() - 1 : 0);
        s.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(v));
        s.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(v), rest.end());
        std::sort(s.test.begin(), s.test.end());
        std::sort(s.val.begin(), s.val.end());
        std::sort(s.train.begin(), s.train.end());
    }
    return folds;
}

std::vector<FoldSplit> make_site_folds(std::span<const PatientRecord> patients, std::size_t k, std::uint64_t seed) {
    std::map<std::size_t, std::vector<std::size_t>> by_site;
    for (std::size_t i = 0; i < patients.size(); ++i) by_site[patients[i].site].push_back(i);
    if (by_site.size() <= 1) return make_folds(patients.size(), k, seed);

    std::vector<FoldSplit> folds(k);
    for (const auto& [site, members] : by_site) {
        if (members.size() < k)
            throw InvalidConfig("site " + std::to_string(site) + " has " + std::to_string(members.size()) +
                                " patients, fewer than " + std::to_string(k) + " folds");
        const std::vector<FoldSplit> local = make_folds(members.size(), k, seed + 0x9E3779B97F4A7C15ULL * (site + 1));
        for (std::size_t f = 0; f < k; ++f) {
            for (std::size_t j : local[f].test) folds[f].test.push_back(members[j]);
            for (std::size_t j : local[f].val) folds[f].val.push_back(members[j]);
            for (std::size_t j : local[f].train) folds[f].train.push_back(members[j]);
        }
    }
    for (FoldSplit& s : folds) {
        std::sort(s.test.begin(), s.test.end());
        std::sort(s.val.begin(), s.val.end());
        std::sort(s.train.begin(), s.train.end());
    }
    return folds;
}

} // namespace prime
