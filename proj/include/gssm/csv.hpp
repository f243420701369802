#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gssm::csv {

/// Shortest round-trip-safe text for a double ("%.17g").
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Line-oriented CSV output. In append mode the header is written only when
/// the file is new or empty.
class Writer {
 public:
  Writer(const std::filesystem::path& file, std::initializer_list<std::string_view> header, bool append = false) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    const bool fresh = !append || !std::filesystem::exists(file) || std::filesystem::file_size(file) == 0;
    out_.open(file, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot write " + file.string());
    if (fresh) {
      bool first = true;
      for (auto h : header) {
        out_ << (first ? "" : ",") << h;
        first = false;
      }
      out_ << '\n';
    }
  }

  Writer& field(std::string_view s) {
    out_ << (first_ ? "" : ",") << s;
    first_ = false;
    return *this;
  }
  Writer& field(double v) { return field(num(v)); }
  Writer& field(long long v) { return field(std::to_string(v)); }
  Writer& field(int v) { return field(static_cast<long long>(v)); }
  Writer& field(std::size_t v) { return field(std::to_string(v)); }
  void end() {
    out_ << '\n';
    first_ = true;
  }

 private:
  std::ofstream out_;
  bool first_ = true;
};

}  // namespace gssm::csv
