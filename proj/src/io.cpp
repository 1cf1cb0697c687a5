#include "loft/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace loft::io {

// ===========================================================================
// BinWriter
// ===========================================================================

void BinWriter::magic(const char tag[4]) { raw(tag, 4); }

void BinWriter::u16(uint16_t v) {
    uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
    raw(b, 2);
}

void BinWriter::u32(uint32_t v) {
    uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    raw(b, 4);
}

void BinWriter::u64(uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    raw(b, 8);
}

void BinWriter::f32(float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
}

void BinWriter::f32_array(std::span<const float> v) {
    // Bulk path: this is a little-endian-only build family, so the memcpy is
    // the same bytes the per-element path would produce.
    static_assert(sizeof(float) == 4);
    const size_t off = buf_.size();
    buf_.resize(off + v.size() * 4);
    std::memcpy(buf_.data() + off, v.data(), v.size() * 4);
}

void BinWriter::str(const std::string& s) {
    if (s.size() > 0xFFFF) throw FormatError("string field too long for u16 length");
    u16(static_cast<uint16_t>(s.size()));
    raw(s.data(), s.size());
}

void BinWriter::raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
}

void BinWriter::save(const std::filesystem::path& path) const {
    write_file(path, buf_);
}

// ===========================================================================
// BinReader
// ===========================================================================

BinReader::BinReader(std::vector<uint8_t> bytes, std::string origin)
    : buf_(std::move(bytes)), origin_(std::move(origin)) {}

BinReader BinReader::open(const std::filesystem::path& path) {
    return BinReader(read_file(path), path.string());
}

void BinReader::need(size_t n) const {
    if (pos_ + n > buf_.size()) {
        throw FormatError(origin_ + ": unexpected end of file (need " + std::to_string(n) +
                          " bytes at offset " + std::to_string(pos_) + ")");
    }
}

void BinReader::expect_magic(const char tag[4]) {
    need(4);
    if (std::memcmp(buf_.data() + pos_, tag, 4) != 0) {
        throw FormatError(origin_ + ": bad magic (expected '" + std::string(tag, 4) + "')");
    }
    pos_ += 4;
}

uint16_t BinReader::u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

uint32_t BinReader::u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

uint64_t BinReader::u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

float BinReader::f32() {
    uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

void BinReader::f32_array(std::span<float> out) {
    need(out.size() * 4);
    std::memcpy(out.data(), buf_.data() + pos_, out.size() * 4);
    pos_ += out.size() * 4;
}

std::string BinReader::str() {
    const uint16_t n = u16();
    return raw_str(n);
}

std::string BinReader::raw_str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
}

std::vector<float> BinReader::f32_rest() {
    const size_t rest = buf_.size() - pos_;
    if (rest % 4 != 0) {
        throw FormatError(origin_ + ": trailing payload is not a whole number of floats");
    }
    std::vector<float> out(rest / 4);
    f32_array(out);
    return out;
}

void BinReader::expect_end() const {
    if (pos_ != buf_.size()) {
        throw FormatError(origin_ + ": trailing bytes after payload (" +
                          std::to_string(buf_.size() - pos_) + ")");
    }
}

// ===========================================================================
// Hashing and file helpers
// ===========================================================================

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t hash_file(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactNotFound("cannot open " + path.string());
    f.seekg(0, std::ios::end);
    const auto n = static_cast<size_t>(f.tellg());
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(n);
    if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (!f) throw FormatError("short read from " + path.string());
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()),
                                              text.size()));
}

std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

void require_exists(const std::filesystem::path& path, const std::string& what) {
    if (!std::filesystem::exists(path)) {
        throw ArtifactNotFound(what + " not found: " + path.string());
    }
}

std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

void write_loss_trace(const std::filesystem::path& path, std::span<const double> losses) {
    std::string out = "step,loss\n";
    for (size_t i = 0; i < losses.size(); ++i) {
        out += std::to_string(i) + "," + fmt_g9(losses[i]) + "\n";
    }
    write_text(path, out);
}

}  // namespace loft::io
