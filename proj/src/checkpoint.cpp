#include "byb/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace byb {

namespace {

constexpr char kMagic[4] = {'B', 'Y', 'B', 'T'};

template <typename T>
void write_le(std::ostream& os, T value) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("checkpoint truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_le<std::uint64_t>(os, bits);
}

double read_f64(std::istream& is) {
    const std::uint64_t bits = read_le<std::uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        if (name.size() > 0xffff) throw IoError("tensor name too long: " + name);
        write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
        for (Index d : t.shape()) write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        for (Index i = 0; i < t.size(); ++i) write_f64(os, t.values()[i]);
    }
    if (!os) throw IoError("write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": bad magic, not a checkpoint");
    const auto version = read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw IoError(path + ": unsupported format version " + std::to_string(version));
    const auto count = read_le<std::uint32_t>(is);
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto name_len = read_le<std::uint16_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("checkpoint truncated in entry name");
        const auto rank = read_le<std::uint8_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<Index>(read_le<std::uint64_t>(is));
        const Index n = shape_numel(shape);
        Vec v(n);
        for (Index i = 0; i < n; ++i) v[i] = read_f64(is);
        out.emplace_back(std::move(name), Tensor::from_array(std::move(shape), std::move(v), false));
    }
    return out;
}

const Tensor& checkpoint_get(const NamedTensors& entries, const std::string& name) {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw IoError("checkpoint entry not found: " + name);
}

bool checkpoint_has(const NamedTensors& entries, const std::string& name) {
    for (const auto& [n, t] : entries)
        if (n == name) return true;
    return false;
}

}  // namespace byb
