#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cdnet/errors.hpp"

namespace cdnet {

/// Architecture hyperparameters of a context-detail network.
///
/// Context side: a patch of `patch_px()` pixels is cut into n sub-patches of p x p,
/// embedded to dim1. Detail side: each context sub-patch maps to a q x q region of the
/// magnified level, cut into m sub-patches of s x s embedded to dim2.
struct CDNetConfig {
  std::size_t L = 2;
  std::size_t dim1 = 32;
  std::size_t head1 = 4;
  std::size_t dim2 = 8;
  std::size_t head2 = 2;
  std::size_t p = 16;
  std::size_t q = 64;
  std::size_t s = 16;
  std::size_t n = 16;
  std::size_t m = 16;
  std::size_t mlp_ratio = 2;

  static CDNetConfig reference() { return {12, 384, 6, 24, 4, 16, 64, 16, 196, 16, 4}; }
  static CDNetConfig toy() { return {2, 32, 4, 8, 2, 16, 64, 16, 16, 16, 2}; }

  /// Context sub-patches per side (sqrt(n)).
  std::size_t grid() const { return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n)))); }
  std::size_t patch_px() const { return grid() * p; }
  std::size_t mag_ratio() const { return p == 0 ? 0 : q / p; }
  std::size_t detail_px() const { return grid() * q; }
  std::size_t sub_grid() const { return s == 0 ? 0 : q / s; }

  /// Throws ConfigError naming the first violated relation.
  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid CD-Net config: " + what);
    };
    need(L <= 1024, "L out of range");
    need(dim1 > 0 && head1 > 0 && dim1 % head1 == 0, "dim1 % head1 == 0");
    need(dim2 > 0 && head2 > 0 && dim2 % head2 == 0, "dim2 % head2 == 0");
    need(p > 0 && q > 0 && s > 0 && n > 0 && m > 0 && mlp_ratio > 0, "all extents positive");
    need(grid() * grid() == n, "n = (patch_px / p)^2 requires n to be a perfect square");
    need(q % p == 0 && q / p >= 2, "q = mag_ratio * p with integer mag_ratio >= 2");
    need(q % s == 0 && (q / s) * (q / s) == m, "m = (q / s)^2");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "L=" << L << "\ndim1=" << dim1 << "\nhead1=" << head1 << "\ndim2=" << dim2 << "\nhead2=" << head2
       << "\np=" << p << "\nq=" << q << "\ns=" << s << "\nn=" << n << "\nm=" << m << "\nmlp_ratio=" << mlp_ratio
       << '\n';
    return os.str();
  }

  bool operator==(const CDNetConfig&) const = default;
};

/// Parses flat `key=value` lines; blank lines and `#` comments are ignored.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

/// Applies recognised keys over `base`; unknown keys are rejected.
inline CDNetConfig config_from_text(const std::string& text, CDNetConfig base = CDNetConfig::toy()) {
  const std::map<std::string, std::size_t CDNetConfig::*> fields{
      {"L", &CDNetConfig::L},       {"dim1", &CDNetConfig::dim1}, {"head1", &CDNetConfig::head1},
      {"dim2", &CDNetConfig::dim2}, {"head2", &CDNetConfig::head2}, {"p", &CDNetConfig::p},
      {"q", &CDNetConfig::q},       {"s", &CDNetConfig::s},       {"n", &CDNetConfig::n},
      {"m", &CDNetConfig::m},       {"mlp_ratio", &CDNetConfig::mlp_ratio}};
  for (const auto& [key, value] : parse_key_values(text)) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      std::size_t used = 0;
      const auto v = std::stoull(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      base.*(it->second) = static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' has non-integer value '" + value + "'");
    }
  }
  base.validate();
  return base;
}

inline CDNetConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str());
}

inline CDNetConfig config_preset(const std::string& name) {
  if (name == "reference") return CDNetConfig::reference();
  if (name == "toy") return CDNetConfig::toy();
  throw ConfigError("unknown preset '" + name + "' (expected reference or toy)");
}

}  // namespace cdnet
