#pragma once

#include "kprox/errors.hpp"
#include "kprox/kernel.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace kprox {

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v)
{
  if (std::isnan(v))
    return "nan";
  if (std::isinf(v))
    return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s)
{
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  if (!s.empty() && s.front() == '+')
    s.remove_prefix(1);
  if (s.empty())
    return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    return std::nullopt;
  return v;
}

inline std::ofstream open_output(const std::filesystem::path& path)
{
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw InputError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::string read_file(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// step,particle_index,z_0..z_{D-1}
inline void write_trajectory_csv(std::ostream& out, const std::vector<ParticleEnsemble>& snaps)
{
  const std::size_t d = snaps.empty() ? 0 : snaps.front().dim();
  out << "step,particle_index";
  for (std::size_t k = 0; k < d; ++k)
    out << ",z_" << k;
  out << '\n';
  for (const auto& s : snaps) {
    for (Eigen::Index i = 0; i < s.particles.rows(); ++i) {
      out << s.step_index << ',' << i;
      for (Eigen::Index k = 0; k < s.particles.cols(); ++k)
        out << ',' << format_double(s.particles(i, k));
      out << '\n';
    }
  }
}

} // namespace kprox
