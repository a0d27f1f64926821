#include "calip/attention.hpp"

#include <cctype>

namespace calip {

LogitMask LogitMask::parse(const std::string& text) {
  unsigned bits = 0;
  std::size_t i = 0;
  bool expect_term = true;
  for (; i < text.size(); ++i) {
    const char ch = text[i];
    if (std::isspace(static_cast<unsigned char>(ch))) continue;
    if (expect_term && ch >= '1' && ch <= '4') {
      if (bits & (1u << (ch - '1'))) {
        throw ParameterError("--mask: term " + std::string(1, ch) + " repeated at position " + std::to_string(i) +
                             " in \"" + text + "\"");
      }
      bits |= 1u << (ch - '1');
      expect_term = false;
    } else if (!expect_term && ch == ',') {
      expect_term = true;
    } else {
      throw ParameterError("--mask: unexpected '" + std::string(1, ch) + "' at position " + std::to_string(i) +
                           " in \"" + text + "\" (expected terms 1-4 separated by commas)");
    }
  }
  if (bits == 0 || expect_term) {
    throw ParameterError("--mask: \"" + text + "\" must list at least one term from 1-4");
  }
  return LogitMask(bits);
}

std::string LogitMask::to_string() const {
  std::string out;
  for (int t = 1; t <= 4; ++t) {
    if (!has(t)) continue;
    if (!out.empty()) out += ',';
    out += static_cast<char>('0' + t);
  }
  return out;
}

}  // namespace calip
