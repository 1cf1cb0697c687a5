#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "loft/errors.hpp"

namespace loft::io {

// ---------------------------------------------------------------------------
// Little-endian binary containers. All artifact files go through these two
// classes so magic/truncation handling is identical everywhere.
// ---------------------------------------------------------------------------

class BinWriter {
  public:
    void magic(const char tag[4]);
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void f32_array(std::span<const float> v);
    void str(const std::string& s);  // u16 length + bytes
    void raw(const void* p, size_t n);

    const std::vector<uint8_t>& bytes() const { return buf_; }
    void save(const std::filesystem::path& path) const;

  private:
    std::vector<uint8_t> buf_;
};

class BinReader {
  public:
    explicit BinReader(std::vector<uint8_t> bytes, std::string origin = "stream");
    static BinReader open(const std::filesystem::path& path);

    void expect_magic(const char tag[4]);
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    float f32();
    void f32_array(std::span<float> out);
    std::string str();
    std::string raw_str(size_t n);
    std::vector<float> f32_rest();  // all remaining bytes as a float array
    bool at_end() const { return pos_ == buf_.size(); }
    void expect_end() const;

  private:
    void need(size_t n) const;
    std::vector<uint8_t> buf_;
    size_t pos_ = 0;
    std::string origin_;
};

// ---------------------------------------------------------------------------
// Misc file helpers
// ---------------------------------------------------------------------------

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 14695981039346656037ull);
uint64_t hash_file(const std::filesystem::path& path);
std::string hash_hex(uint64_t h);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);
void require_exists(const std::filesystem::path& path, const std::string& what);

// Stable decimal formatting used by every CSV artifact ("%.9g": round-trips
// f32 exactly and keeps files byte-stable across platforms).
std::string fmt_g9(double v);

// (step, loss) trace written as CSV with a header row.
void write_loss_trace(const std::filesystem::path& path, std::span<const double> losses);

}  // namespace loft::io
