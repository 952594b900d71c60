#include "hmtpf/dataio.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "hmtpf/errors.hpp"

namespace hmtpf {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.txt";

struct ArraySpec {
  const char* name;
  const char* file;
};
constexpr ArraySpec kArrays[] = {
    {"x_bd", "x_bd.f32"}, {"id", "id.u8"}, {"phi0", "phi0.f32"}, {"x_q", "x_q.f32"}, {"phi", "phi.f32"},
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void write_f32(const fs::path& path, std::span<const double> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError("cannot write array", path.string());
  }
}

void write_u8(const fs::path& path, std::span<const std::uint8_t> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()))) {
    throw IoError("cannot write array", path.string());
  }
}

std::string read_bytes(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFileError("missing file", path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> decode_f32(const std::string& bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    float f;
    std::memcpy(&f, &bits, 4);
    out[i] = static_cast<double>(f);
  }
  return out;
}

std::size_t parse_count(const std::map<std::string, std::string>& kv, const std::string& key,
                        const fs::path& manifest) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CorruptFileError("manifest lacks key '" + key + "'", manifest.string());
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw CorruptFileError("manifest key '" + key + "' is not a count", manifest.string());
  }
}

fs::path temp_sibling(const fs::path& dir) {
  static std::atomic<unsigned> counter{0};
  std::random_device rd;
  return dir.parent_path() /
         (dir.filename().string() + ".tmp-" + std::to_string(rd()) + "-" + std::to_string(counter++));
}

}  // namespace

// ---------------------------------------------------------------------------
// FieldPack
// ---------------------------------------------------------------------------

void FieldPack::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("FieldPack: " + msg); };
  if (d == 0) fail("d must be >= 1");
  if (t < 1) fail("t must be >= 1");
  if (!(dt > 0.0) || !std::isfinite(dt)) fail("dt must be finite and > 0");
  if (channel_names.empty()) fail("no channels");
  std::set<std::string> uniq(channel_names.begin(), channel_names.end());
  if (uniq.size() != channel_names.size()) fail("channel names must be unique");
  for (const auto& c : channel_names)
    if (c.empty() || c.find_first_of(",\n= ") != std::string::npos) fail("bad channel name '" + c + "'");
  const std::size_t np = n_phi();
  if (x_bd.size() != n_bd * d) fail("x_bd has " + std::to_string(x_bd.size()) + " values");
  if (id.size() != n_bd) fail("id has " + std::to_string(id.size()) + " values");
  if (phi0.size() != n_bd * np) fail("phi0 has " + std::to_string(phi0.size()) + " values");
  if (x_q.size() != n_q * d) fail("x_q has " + std::to_string(x_q.size()) + " values");
  if (phi.size() != t * n_q * np) fail("phi has " + std::to_string(phi.size()) + " values");
  for (double v : x_bd)
    if (!std::isfinite(v)) fail("non-finite x_bd coordinate");
  for (double v : x_q)
    if (!std::isfinite(v)) fail("non-finite x_q coordinate");
  for (auto v : id)
    if (v > 1) fail("id values must be 0 (boundary) or 1 (domain)");
}

std::size_t FieldPack::channel(const std::string& name) const {
  for (std::size_t i = 0; i < channel_names.size(); ++i)
    if (channel_names[i] == name) return i;
  throw ConfigError("FieldPack: no channel named '" + name + "'");
}

void write_fieldpack(const FieldPack& sample, const fs::path& dir) {
  sample.validate();
  fs::path target = dir;
  if (target.filename().empty()) target = target.parent_path();
  std::error_code ec;
  if (!target.parent_path().empty()) {
    fs::create_directories(target.parent_path(), ec);
    if (ec) throw IoError("cannot create parent directory (" + ec.message() + ")", target.string());
  }
  const fs::path tmp = temp_sibling(target);
  fs::create_directory(tmp, ec);
  if (ec) throw IoError("cannot create directory (" + ec.message() + ")", target.string());
  try {
    write_f32(tmp / "x_bd.f32", sample.x_bd);
    write_u8(tmp / "id.u8", sample.id);
    write_f32(tmp / "phi0.f32", sample.phi0);
    write_f32(tmp / "x_q.f32", sample.x_q);
    write_f32(tmp / "phi.f32", sample.phi);
    std::ostringstream m;
    m << "format_version = " << kFieldPackVersion << '\n'
      << "d = " << sample.d << '\n'
      << "n_bd = " << sample.n_bd << '\n'
      << "n_q = " << sample.n_q << '\n'
      << "t = " << sample.t << '\n'
      << "n_phi = " << sample.n_phi() << '\n'
      << "dt = " << format_double(sample.dt) << '\n'
      << "channel_names = " << join(sample.channel_names, ',') << '\n';
    for (const auto& a : kArrays) m << "file." << a.name << " = " << a.file << '\n';
    std::ofstream out(tmp / kManifest, std::ios::binary | std::ios::trunc);
    const std::string text = m.str();
    if (!out || !out.write(text.data(), static_cast<std::streamsize>(text.size()))) {
      throw IoError("cannot write manifest", (tmp / kManifest).string());
    }
    out.close();
    if (fs::exists(target)) fs::remove_all(target);
    fs::rename(tmp, target);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp, ec);
    throw IoError(std::string("filesystem failure: ") + e.what(), target.string());
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

FieldPack read_fieldpack(const fs::path& dir) {
  const fs::path manifest = dir / kManifest;
  const std::string text = read_bytes(manifest);
  std::map<std::string, std::string> kv;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptFileError("malformed manifest line '" + line + "'", manifest.string());
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  const std::size_t version = parse_count(kv, "format_version", manifest);
  if (version != static_cast<std::size_t>(kFieldPackVersion)) {
    throw UnsupportedVersionError("unsupported format_version " + std::to_string(version), manifest.string());
  }
  FieldPack p;
  p.d = parse_count(kv, "d", manifest);
  p.n_bd = parse_count(kv, "n_bd", manifest);
  p.n_q = parse_count(kv, "n_q", manifest);
  p.t = parse_count(kv, "t", manifest);
  const std::size_t n_phi = parse_count(kv, "n_phi", manifest);
  if (!kv.count("dt") || !kv.count("channel_names")) {
    throw CorruptFileError("manifest lacks dt or channel_names", manifest.string());
  }
  try {
    p.dt = std::stod(kv["dt"]);
  } catch (const std::exception&) {
    throw CorruptFileError("manifest dt is not a number", manifest.string());
  }
  p.channel_names = split(kv["channel_names"], ',');
  if (p.channel_names.size() != n_phi) {
    throw CorruptFileError("channel_names does not list n_phi names", manifest.string());
  }

  auto load = [&](const char* name, std::size_t count, std::size_t elem_bytes) {
    auto it = kv.find(std::string("file.") + name);
    if (it == kv.end()) throw CorruptFileError(std::string("manifest lacks file.") + name, manifest.string());
    const fs::path path = dir / it->second;
    std::string bytes = read_bytes(path);
    if (bytes.size() != count * elem_bytes) {
      throw LengthMismatchError("length mismatch: expected " + std::to_string(count * elem_bytes) +
                                    " bytes, found " + std::to_string(bytes.size()),
                                path.string());
    }
    return bytes;
  };
  p.x_bd = decode_f32(load("x_bd", p.n_bd * p.d, 4));
  const std::string id_bytes = load("id", p.n_bd, 1);
  p.id.assign(id_bytes.begin(), id_bytes.end());
  p.phi0 = decode_f32(load("phi0", p.n_bd * n_phi, 4));
  p.x_q = decode_f32(load("x_q", p.n_q * p.d, 4));
  p.phi = decode_f32(load("phi", p.t * p.n_q * n_phi, 4));
  p.validate();
  return p;
}

FieldPack quantize_f32(FieldPack sample) {
  auto q = [](std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  q(sample.x_bd);
  q(sample.phi0);
  q(sample.x_q);
  q(sample.phi);
  return sample;
}

// ---------------------------------------------------------------------------
// Analytic flows
// ---------------------------------------------------------------------------

FlowState UniformFlow::eval(double, double, double) const { return {u[0], u[1], p, rho}; }

FlowState AdvectingGaussian::eval(double x, double y, double t) const {
  const double dx = x - x0[0] - u0[0] * t;
  const double dy = y - x0[1] - u0[1] * t;
  const double rho = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
  return {u0[0], u0[1], p0, rho};
}

FlowState IsentropicVortex::eval(double x, double y, double t) const {
  const double xb = (x - center[0] - u_inf[0] * t) / radius;
  const double yb = (y - center[1] - u_inf[1] * t) / radius;
  const double r2 = xb * xb + yb * yb;
  const double pi = std::numbers::pi;
  const double bump = std::exp(0.5 * (1.0 - r2));
  const double du = strength / (2.0 * pi) * bump;
  const double temp = 1.0 - (gamma - 1.0) * strength * strength / (8.0 * gamma * pi * pi) * bump * bump;
  const double rho = std::pow(temp, 1.0 / (gamma - 1.0));
  const double p = std::pow(rho, gamma);
  return {u_inf[0] - du * yb, u_inf[1] + du * xb, p, rho};
}

FieldPack sample_flow(const AnalyticFlow& flow, std::size_t n_bd, std::size_t n_q, std::size_t t_steps,
                      double dt, std::uint64_t seed) {
  if (n_bd < 1 || n_q < 1 || t_steps < 1) throw ValidationError("sample_flow: counts must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FieldPack p;
  p.d = 2;
  p.n_bd = n_bd;
  p.n_q = n_q;
  p.t = t_steps;
  p.dt = dt;
  p.channel_names = kEulerChannels;

  p.x_bd.resize(n_bd * 2);
  for (double& v : p.x_bd) v = unit(rng);
  p.x_q.resize(n_q * 2);
  for (double& v : p.x_q) v = unit(rng);

  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_bd))));
  const std::size_t n_boundary = std::min(n_bd, 4 * side);
  p.id.assign(n_bd, static_cast<std::uint8_t>(PointKind::kDomain));
  for (std::size_t i = 0; i < n_boundary; ++i) {
    double& x = p.x_bd[2 * i];
    double& y = p.x_bd[2 * i + 1];
    const double dist[4] = {x, 1.0 - x, y, 1.0 - y};
    const auto edge = static_cast<std::size_t>(std::min_element(dist, dist + 4) - dist);
    switch (edge) {
      case 0: x = 0.0; break;
      case 1: x = 1.0; break;
      case 2: y = 0.0; break;
      default: y = 1.0; break;
    }
    p.id[i] = static_cast<std::uint8_t>(PointKind::kBoundary);
  }

  p.phi0.resize(n_bd * 4);
  for (std::size_t i = 0; i < n_bd; ++i) {
    const FlowState s = flow.eval(p.x_bd[2 * i], p.x_bd[2 * i + 1], 0.0);
    std::copy(s.begin(), s.end(), p.phi0.begin() + static_cast<std::ptrdiff_t>(i * 4));
  }
  p.phi.resize(t_steps * n_q * 4);
  for (std::size_t k = 0; k < t_steps; ++k) {
    const double time = static_cast<double>(k + 1) * dt;
    for (std::size_t i = 0; i < n_q; ++i) {
      const FlowState s = flow.eval(p.x_q[2 * i], p.x_q[2 * i + 1], time);
      std::copy(s.begin(), s.end(), p.phi.begin() + static_cast<std::ptrdiff_t>((k * n_q + i) * 4));
    }
  }
  p.validate();
  return p;
}

FieldPack gen_uniform_flow(std::size_t n_bd, std::size_t n_q, std::size_t t_steps, double dt,
                           std::uint64_t seed) {
  return sample_flow(UniformFlow{}, n_bd, n_q, t_steps, dt, seed);
}

FieldPack gen_advecting_gaussian(std::size_t n_bd, std::size_t n_q, std::size_t t_steps, double dt,
                                 std::array<double, 2> u0, double sigma, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw ValidationError("gen_advecting_gaussian: sigma must be > 0");
  AdvectingGaussian flow;
  flow.u0 = u0;
  flow.sigma = sigma;
  return sample_flow(flow, n_bd, n_q, t_steps, dt, seed);
}

FieldPack gen_isentropic_vortex(std::size_t n_bd, std::size_t n_q, std::size_t t_steps, double dt,
                                double strength, double gamma, std::uint64_t seed) {
  if (!(strength > 0.0)) throw ValidationError("gen_isentropic_vortex: strength must be > 0");
  if (!(gamma > 1.0)) throw ValidationError("gen_isentropic_vortex: gamma must be > 1");
  IsentropicVortex flow;
  flow.strength = strength;
  flow.gamma = gamma;
  return sample_flow(flow, n_bd, n_q, t_steps, dt, seed);
}

}  // namespace hmtpf
