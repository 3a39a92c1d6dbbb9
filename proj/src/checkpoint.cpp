#include "fsdm/checkpoint.hpp"

#include <cstdio>
#include <cstring>

#include "fsdm/errors.hpp"

namespace fsdm::train {
namespace {

constexpr char kMagic[4] = {'F', 'S', 'D', 'M'};
constexpr std::uint32_t kVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* data, std::size_t n, const std::string& path) {
    if (std::fwrite(data, 1, n, f) != n) {
        throw IoError("checkpoint: short write to " + path);
    }
}

void write_u32(std::FILE* f, std::uint32_t v, const std::string& path) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(f, b, 4, path);
}

void write_u64(std::FILE* f, std::uint64_t v, const std::string& path) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(f, b, 8, path);
}

void write_str(std::FILE* f, const std::string& s, const std::string& path) {
    write_u32(f, static_cast<std::uint32_t>(s.size()), path);
    write_bytes(f, s.data(), s.size(), path);
}

void read_bytes(std::FILE* f, void* data, std::size_t n, const std::string& path) {
    if (std::fread(data, 1, n, f) != n) {
        throw IoError("checkpoint: " + path + " is truncated or corrupt");
    }
}

std::uint32_t read_u32(std::FILE* f, const std::string& path) {
    unsigned char b[4];
    read_bytes(f, b, 4, path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::FILE* f, const std::string& path) {
    unsigned char b[8];
    read_bytes(f, b, 8, path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

std::string read_str(std::FILE* f, const std::string& path, std::uint32_t max_len) {
    std::uint32_t len = read_u32(f, path);
    if (len > max_len) {
        throw IoError("checkpoint: " + path + " has an implausible field length");
    }
    std::string s(len, '\0');
    read_bytes(f, s.data(), len, path);
    return s;
}

static_assert(sizeof(float) == 4, "checkpoint format stores 4-byte floats");

void write_f32_le(std::FILE* f, const std::vector<float>& vals, const std::string& path) {
    std::vector<unsigned char> buf(vals.size() * 4);
    for (std::size_t i = 0; i < vals.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &vals[i], 4);
        for (int j = 0; j < 4; ++j) {
            buf[i * 4 + j] = static_cast<unsigned char>((bits >> (8 * j)) & 0xff);
        }
    }
    write_bytes(f, buf.data(), buf.size(), path);
}

std::vector<float> read_f32_le(std::FILE* f, std::uint64_t count, const std::string& path) {
    std::vector<unsigned char> buf(static_cast<std::size_t>(count) * 4);
    read_bytes(f, buf.data(), buf.size(), path);
    std::vector<float> vals(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < vals.size(); ++i) {
        std::uint32_t bits = 0;
        for (int j = 0; j < 4; ++j) {
            bits |= static_cast<std::uint32_t>(buf[i * 4 + j]) << (8 * j);
        }
        std::memcpy(&vals[i], &bits, 4);
    }
    return vals;
}

}  // namespace

void write_checkpoint_file(const std::string& path, const CheckpointData& data) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
    write_bytes(f.get(), kMagic, 4, path);
    write_u32(f.get(), kVersion, path);
    write_str(f.get(), data.config_json.dump(), path);
    write_str(f.get(), data.stage, path);
    write_u64(f.get(), data.step, path);
    write_str(f.get(), data.rng_state, path);
    write_u32(f.get(), static_cast<std::uint32_t>(data.params.size()), path);
    for (const ParamBlob& p : data.params) {
        write_str(f.get(), p.name, path);
        write_u32(f.get(), static_cast<std::uint32_t>(p.dims.size()), path);
        std::uint64_t count = 1;
        for (int d : p.dims) {
            write_u32(f.get(), static_cast<std::uint32_t>(d), path);
            count *= static_cast<std::uint64_t>(d);
        }
        if (count != p.values.size()) {
            throw IoError("checkpoint: " + p.name + " value count does not match its shape");
        }
        write_u64(f.get(), count, path);
        write_f32_le(f.get(), p.values, path);
    }
    if (std::fflush(f.get()) != 0) throw IoError("checkpoint: cannot flush " + path);
}

CheckpointData read_checkpoint_file(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    read_bytes(f.get(), magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("checkpoint: " + path + " is not a checkpoint file");
    }
    std::uint32_t version = read_u32(f.get(), path);
    if (version != kVersion) {
        throw IoError("checkpoint: " + path + " has format version " + std::to_string(version) +
                      ", expected " + std::to_string(kVersion));
    }
    CheckpointData data;
    constexpr std::uint32_t kMaxField = 1u << 20;
    try {
        data.config_json = nlohmann::json::parse(read_str(f.get(), path, kMaxField));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: " + path + " has a malformed config: " + e.what());
    }
    data.stage = read_str(f.get(), path, kMaxField);
    data.step = read_u64(f.get(), path);
    data.rng_state = read_str(f.get(), path, kMaxField);
    std::uint32_t n_params = read_u32(f.get(), path);
    if (n_params > kMaxField) {
        throw IoError("checkpoint: " + path + " has an implausible parameter count");
    }
    data.params.resize(n_params);
    for (ParamBlob& p : data.params) {
        p.name = read_str(f.get(), path, kMaxField);
        std::uint32_t rank = read_u32(f.get(), path);
        if (rank > 8) throw IoError("checkpoint: " + path + " has an implausible rank");
        std::uint64_t expect = 1;
        p.dims.resize(rank);
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d = read_u32(f.get(), path);
            if (d == 0 || d > kMaxField) {
                throw IoError("checkpoint: " + path + " has an implausible dimension");
            }
            p.dims[static_cast<std::size_t>(i)] = static_cast<int>(d);
            expect *= d;
        }
        std::uint64_t count = read_u64(f.get(), path);
        if (count != expect || count > (1u << 28)) {
            throw IoError("checkpoint: " + path + " has a corrupt parameter record for " + p.name);
        }
        p.values = read_f32_le(f.get(), count, path);
    }
    unsigned char extra;
    if (std::fread(&extra, 1, 1, f.get()) != 0) {
        throw IoError("checkpoint: " + path + " has trailing bytes");
    }
    return data;
}

}  // namespace fsdm::train
