#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace nnbf::io {

// All on-disk formats are little endian regardless of host byte order.
void write_u32(std::ostream& os, std::uint32_t v);
void write_i32(std::ostream& os, std::int32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint32_t read_u32(std::istream& is);
std::int32_t read_i32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is);

// FNV-1a 64-bit, hex-encoded; used for config hashes in run manifests.
std::string fnv1a_hex(const std::string& text);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace nnbf::io
