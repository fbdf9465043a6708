#include "nnbf/serialize.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "nnbf/errors.hpp"

namespace nnbf::io {

namespace {
void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, bytes);
}

std::uint64_t get_le(std::istream& is, int bytes) {
  char buf[8];
  is.read(buf, bytes);
  if (!is) throw IoError("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}
}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v, 4); }
void write_i32(std::ostream& os, std::int32_t v) {
  put_le(os, static_cast<std::uint32_t>(v), 4);
}
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v, 8); }
void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le(os, bits, 8);
}

std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le(is, 4)); }
std::int32_t read_i32(std::istream& is) { return static_cast<std::int32_t>(read_u32(is)); }
std::uint64_t read_u64(std::istream& is) { return get_le(is, 8); }
double read_f64(std::istream& is) {
  std::uint64_t bits = get_le(is, 8);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("unexpected end of stream reading string");
  return s;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failed for " + path);
}

}  // namespace nnbf::io
