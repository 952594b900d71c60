#pragma once

// Command-line entry point. Exit codes: 0 success, 1 usage or configuration
// error, 2 runtime failure (I/O, non-finite values, corrupt inputs).

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace hmtpf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed 256-entry viridis-like table, linearly interpolated between ten
/// anchor colours from #440154 to #FDE725.
const std::array<Rgb, 256>& viridis_table();

/// Binary P6 image: each pixel of a width × height grid over the points'
/// bounding box takes the value of its nearest point, mapped min→max onto
/// viridis_table(). Row 0 is the top (largest y).
std::string render_ppm(const std::vector<double>& xy, const std::vector<double>& values, std::size_t width = 256,
                       std::size_t height = 256);

}  // namespace hmtpf
