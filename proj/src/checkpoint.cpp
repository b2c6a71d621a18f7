#include "adafuse/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "adafuse/errors.hpp"

namespace adafuse {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("checkpoint: truncated file");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw DataError("checkpoint: truncated file");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string get_string(std::istream& in, uint32_t len) {
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw DataError("checkpoint: truncated file");
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write '" + path + "'");
    out.write(kMagic, 8);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(config_json.size()));
    out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    put_u32(out, static_cast<uint32_t>(store.size()));
    for (int i = 0; i < store.size(); ++i) {
        const std::string& name = store.name(i);
        const Tensor& t = store.value(i);
        put_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, store.trainable(i) ? 1u : 0u);
        put_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (const int d : t.shape) put_u32(out, static_cast<uint32_t>(d));
        for (const double v : t.data) put_f64(out, v);
    }
    if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

std::string load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("checkpoint: bad magic in '" + path + "'");
    const uint32_t version = get_u32(in);
    if (version != kVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    const uint32_t config_len = get_u32(in);
    const std::string config_json = get_string(in, config_len);
    const uint32_t count = get_u32(in);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(in);
        const std::string name = get_string(in, name_len);
        const bool trainable = get_u32(in) != 0;
        const uint32_t ndim = get_u32(in);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(get_u32(in));
        Tensor t(shape);
        for (double& v : t.data) v = get_f64(in);
        store.create(name, std::move(t), trainable);
    }
    return config_json;
}

}  // namespace adafuse
