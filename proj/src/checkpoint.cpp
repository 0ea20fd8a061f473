#include "prime/checkpoint.hpp"

#include "prime/error.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace prime {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'I', 'M', 'E', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Cursor {
public:
    Cursor(const std::filesystem::path& path) : path_(path.string()) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw MissingFile("cannot open checkpoint " + path_);
        bytes_.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    }

    void read(void* out, std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size())
            throw FormatError(path_ + ": truncated " + what + " at byte offset " + std::to_string(pos_));
        std::memcpy(out, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        read(&v, sizeof v, what);
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        std::string s(n, '\0');
        read(s.data(), n, what);
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

struct Entry {
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

CheckpointInfo read_all(const std::filesystem::path& path, std::vector<std::pair<std::string, Entry>>& entries) {
    Cursor c(path);
    char magic[8];
    c.read(magic, sizeof magic, "magic");
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(c.path() + ": bad magic at byte offset 0");
    const std::uint32_t version = c.u32("version");
    if (version != kVersion) throw FormatError(c.path() + ": unsupported version " + std::to_string(version));
    CheckpointInfo info;
    info.fingerprint = c.str("fingerprint");
    info.metadata = c.str("metadata");
    const std::uint32_t count = c.u32("tensor count");
    for (std::uint32_t k = 0; k < count; ++k) {
        std::string name = c.str("tensor name");
        Entry e;
        const std::uint32_t rank = c.u32("rank");
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(c.u32("dims"));
        e.values.resize(shape_numel(e.shape));
        c.read(e.values.data(), e.values.size() * sizeof(double), "payload");
        entries.emplace_back(std::move(name), std::move(e));
    }
    if (!c.done()) throw FormatError(c.path() + ": trailing bytes after last tensor");
    return info;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::ParamList& params, const CheckpointInfo& info) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingFile("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof kMagic);
    put_u32(os, kVersion);
    put_string(os, info.fingerprint);
    put_string(os, info.metadata);
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
        put_string(os, name);
        put_u32(os, static_cast<std::uint32_t>(p->value.rank()));
        for (std::size_t d : p->value.shape()) put_u32(os, static_cast<std::uint32_t>(d));
        const auto data = p->value.data();
        os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!os) throw MissingFile("failed writing checkpoint " + path.string());
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, const nn::ParamList& params) {
    std::vector<std::pair<std::string, Entry>> entries;
    CheckpointInfo info = read_all(path, entries);
    std::map<std::string, const Entry*> by_name;
    for (const auto& [name, e] : entries) by_name[name] = &e;
    if (by_name.size() != params.size())
        throw FormatError(path.string() + ": holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
    for (const auto& [name, p] : params) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError(path.string() + ": missing tensor " + name);
        if (it->second->shape != p->value.shape()) throw DimMismatch(path.string() + ": shape mismatch for " + name);
    }
    for (const auto& [name, p] : params) {
        const Entry& e = *by_name.at(name);
        p->value = Tensor(e.shape, e.values);
        p->zero_grad();
    }
    return info;
}

CheckpointInfo peek_checkpoint(const std::filesystem::path& path, std::vector<std::string>* names) {
    std::vector<std::pair<std::string, Entry>> entries;
    CheckpointInfo info = read_all(path, entries);
    if (names)
        for (const auto& [name, e] : entries) names->push_back(name);
    return info;
}

} // namespace prime
