#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace m2d::io {

// IEEE CRC-32 (reflected, 0xEDB88320), the usual zlib polynomial.
std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0);

// Little-endian buffer writer. Files are assembled fully in memory so the
// trailing CRC can cover every preceding byte.
class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void bytes(const void* p, std::size_t n);
    void str(const std::string& s);  // u32 length + UTF-8 bytes
    void append_crc();               // CRC-32 of everything written so far
    void append_crc_from(std::size_t from);

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}

    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string str();
    void raw(void* out, std::size_t n);

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }
    bool at_end() const { return pos_ == buf_.size(); }
    // CRC of bytes [from, pos)
    std::uint32_t crc_over(std::size_t from) const;
    const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
    void need(std::size_t n) const;
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

// Write-temp-then-rename so readers never observe a partial file.
void atomic_write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
void atomic_write_text(const std::string& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace m2d::io
