#include "sled/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "sled/errors.hpp"

namespace sled {
namespace {

constexpr char kMagic[8] = {'S', 'L', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double d) {
    put_u64(os, std::bit_cast<std::uint64_t>(d));
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("checkpoint: truncated while reading " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw FormatError("checkpoint: truncated while reading " + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

std::string get_str(std::istream& is, const std::string& what) {
    const std::uint32_t len = get_u32(is, what + " length");
    if (len > 4096) throw FormatError("checkpoint: implausible " + what + " length");
    std::string s(len, '\0');
    if (len && !is.read(s.data(), len))
        throw FormatError("checkpoint: truncated while reading " + what);
    return s;
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t e : t.shape()) put_u64(os, static_cast<std::uint64_t>(e));
    for (double v : t.data()) put_f64(os, v);
}

std::string header_digest(std::istream& is, const std::string& path) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("checkpoint: bad magic in " + path);
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion)
        throw CompatError("checkpoint: unsupported version " + std::to_string(version));
    return get_str(is, "digest");
}

}  // namespace

void save_checkpoint(const StereoModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 8);
    put_u32(os, kVersion);
    const std::string digest = model.config().digest();
    put_u32(os, static_cast<std::uint32_t>(digest.size()));
    os.write(digest.data(), static_cast<std::streamsize>(digest.size()));
    put_u64(os, model.params().items().size() + model.buffers().items().size());
    for (const auto& [name, t] : model.params().items()) write_tensor(os, name, t);
    for (const auto& [name, t] : model.buffers().items()) write_tensor(os, name, t);
    if (!os) throw ParseError("checkpoint: write failed for " + path);
}

void load_checkpoint(StereoModel& model, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("checkpoint: cannot open " + path);
    const std::string digest = header_digest(is, path);
    if (digest != model.config().digest())
        throw CompatError("checkpoint: config digest " + digest + " does not match model " +
                          model.config().digest());
    const std::uint64_t count = get_u64(is, "tensor count");
    const std::uint64_t expected =
        model.params().items().size() + model.buffers().items().size();
    if (count != expected)
        throw CompatError("checkpoint: holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(expected));
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = get_str(is, "tensor name");
        const std::uint32_t rank = get_u32(is, "tensor rank");
        if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<std::int64_t>(get_u64(is, "extent of " + name));
        Tensor dst;
        if (model.params().contains(name))
            dst = model.params().get(name);
        else if (model.buffers().contains(name))
            dst = model.buffers().get(name);
        else
            throw CompatError("checkpoint: tensor " + name + " not present in model");
        if (dst.shape() != shape)
            throw CompatError("checkpoint: shape mismatch for " + name);
        for (double& v : dst.data()) v = std::bit_cast<double>(get_u64(is, "data of " + name));
    }
}

std::string checkpoint_digest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("checkpoint: cannot open " + path);
    return header_digest(is, path);
}

}  // namespace sled
