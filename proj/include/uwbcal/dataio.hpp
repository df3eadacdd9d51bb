#pragma once

// File formats, run bundles, calibration documents and trajectory error.
//
// Text formats (all UTF-8, '\n' line ends, '#' starts a comment line):
//   trajectory   t x y z qx qy qz qw           space separated
//   ranges       t,tag_id,anchor_id,range_m   header required
//   extrinsics   tag_id,x,y,z                 header required
//   pairs        anchor_a,anchor_b,distance_m header required
//   heights      anchor_id,height_m,sigma_m   header required
// Doubles are written in shortest round-trip form, so write -> parse is
// bit-exact.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "uwbcal/apc.hpp"
#include "uwbcal/error.hpp"
#include "uwbcal/factors.hpp"
#include "uwbcal/geometry.hpp"
#include "uwbcal/lcrsf.hpp"
#include "uwbcal/simgen.hpp"

namespace uwbcal {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kCalibrationFormatVersion = 1;

// ---------------------------------------------------------------------------
// Low-level text helpers

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  if (sep == ' ') {
    std::size_t i = 0;
    while (i < s.size()) {
      while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
      std::size_t j = i;
      while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
      if (j > i) out.push_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  }
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

inline std::string where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line);
}

inline double parse_number(std::string_view tok, const std::string& source, std::size_t line,
                           const char* field) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (!tok.empty() && *first == '+') ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last)
    throw ParseError(where(source, line) + ": bad " + std::string(field) + " '" + std::string(tok) + "'");
  return v;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Calls `fn(line_number, content)` for every non-blank, non-comment line.
template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line;
    const std::string_view content = trim(text.substr(pos, end - pos));
    if (!content.empty() && content.front() != '#') fn(line, content);
    if (end == text.size()) break;
    pos = end + 1;
  }
}

/// Checks the header line of a CSV and invokes `fn` for each data row.
template <typename Fn>
void for_each_csv_row(std::string_view text, const std::string& source, const std::vector<std::string>& header,
                      Fn&& fn) {
  bool seen_header = false;
  for_each_line(text, [&](std::size_t line, std::string_view content) {
    auto cols = split(content, ',');
    if (!seen_header) {
      seen_header = true;
      bool ok = cols.size() == header.size();
      for (std::size_t i = 0; ok && i < cols.size(); ++i) ok = cols[i] == header[i];
      if (!ok) {
        std::string expect;
        for (const auto& h : header) expect += (expect.empty() ? "" : ",") + h;
        throw ParseError(where(source, line) + ": expected header '" + expect + "'");
      }
      return;
    }
    if (cols.size() != header.size())
      throw ParseError(where(source, line) + ": expected " + std::to_string(header.size()) + " columns, got " +
                       std::to_string(cols.size()));
    fn(line, cols);
  });
  if (!seen_header) throw ParseError(source + ": missing header");
}

}  // namespace detail

/// Writes via a temporary file in the same directory and renames over `path`.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Trajectory

inline std::string format_trajectory(const Trajectory& traj) {
  std::string out = "# t x y z qx qy qz qw\n";
  for (const Pose& p : traj.poses()) {
    const double v[8] = {p.t, p.p.x(), p.p.y(), p.p.z(), p.r.x(), p.r.y(), p.r.z(), p.r.w()};
    for (int i = 0; i < 8; ++i) {
      out += format_double(v[i]);
      out += i == 7 ? '\n' : ' ';
    }
  }
  return out;
}

inline Trajectory parse_trajectory_text(std::string_view text, const std::string& source = "<trajectory>",
                                        Frame frame = Frame::S) {
  std::vector<std::pair<Pose, std::size_t>> rows;
  detail::for_each_line(text, [&](std::size_t line, std::string_view content) {
    const auto tok = detail::split(content, ' ');
    if (tok.size() != 8)
      throw ParseError(detail::where(source, line) + ": expected 8 fields 't x y z qx qy qz qw', got " +
                       std::to_string(tok.size()));
    double v[8];
    static const char* names[8] = {"t", "x", "y", "z", "qx", "qy", "qz", "qw"};
    for (int i = 0; i < 8; ++i) v[i] = detail::parse_number(tok[i], source, line, names[i]);
    for (double x : v)
      if (!std::isfinite(x)) throw ParseError(detail::where(source, line) + ": non-finite value");
    const double norm = std::sqrt(v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]);
    if (std::abs(norm - 1.0) > 1e-3)
      throw ParseError(detail::where(source, line) + ": norm: quaternion norm " + format_double(norm) +
                       " is not within 1e-3 of 1");
    rows.push_back({Pose{v[0], Vec3(v[1], v[2], v[3]), Rotation::from_wxyz(v[7], v[4], v[5], v[6])}, line});
  });
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first.t < b.first.t; });
  std::vector<Pose> poses;
  poses.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i].first.t == rows[i - 1].first.t)
      throw DuplicateTimestamp(detail::where(source, rows[i].second) + ": timestamp " +
                               format_double(rows[i].first.t) + " repeats line " +
                               std::to_string(rows[i - 1].second));
    poses.push_back(rows[i].first);
  }
  return Trajectory(std::move(poses), frame);
}

inline Trajectory parse_trajectory(const fs::path& path, Frame frame = Frame::S) {
  return parse_trajectory_text(detail::read_file(path), path.string(), frame);
}

inline void write_trajectory(const fs::path& path, const Trajectory& traj) {
  write_file_atomic(path, format_trajectory(traj));
}

// ---------------------------------------------------------------------------
// Ranges

struct RangeLog {
  std::vector<RangeMeasurement> ranges;  // sorted by time
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

inline std::string format_ranges(const std::vector<RangeMeasurement>& ranges) {
  std::string out = "t,tag_id,anchor_id,range_m\n";
  for (const auto& m : ranges) out += format_double(m.t) + "," + m.tag + "," + m.anchor + "," + format_double(m.d) + "\n";
  return out;
}

inline RangeLog parse_ranges_text(std::string_view text, const std::string& source = "<ranges>") {
  RangeLog log;
  detail::for_each_csv_row(text, source, {"t", "tag_id", "anchor_id", "range_m"},
                           [&](std::size_t line, const std::vector<std::string_view>& c) {
                             const double t = detail::parse_number(c[0], source, line, "t");
                             const double d = detail::parse_number(c[3], source, line, "range_m");
                             if (c[1].empty() || c[2].empty())
                               throw ParseError(detail::where(source, line) + ": empty id");
                             if (!std::isfinite(t)) throw ParseError(detail::where(source, line) + ": non-finite t");
                             if (!std::isfinite(d) || d <= 0.0) {
                               ++log.skipped;
                               log.warnings.push_back(detail::where(source, line) + ": skipped range " +
                                                      std::string(c[3]));
                               return;
                             }
                             log.ranges.push_back({t, std::string(c[1]), std::string(c[2]), d});
                           });
  std::stable_sort(log.ranges.begin(), log.ranges.end(), [](const auto& a, const auto& b) { return a.t < b.t; });
  return log;
}

inline RangeLog parse_ranges(const fs::path& path) { return parse_ranges_text(detail::read_file(path), path.string()); }

inline void write_ranges(const fs::path& path, const std::vector<RangeMeasurement>& ranges) {
  write_file_atomic(path, format_ranges(ranges));
}

// ---------------------------------------------------------------------------
// Extrinsics and priors

inline TagExtrinsics parse_extrinsics_text(std::string_view text, const std::string& source = "<extrinsics>") {
  TagExtrinsics out;
  detail::for_each_csv_row(text, source, {"tag_id", "x", "y", "z"},
                           [&](std::size_t line, const std::vector<std::string_view>& c) {
                             const Vec3 v(detail::parse_number(c[1], source, line, "x"),
                                          detail::parse_number(c[2], source, line, "y"),
                                          detail::parse_number(c[3], source, line, "z"));
                             if (!v.allFinite()) throw ParseError(detail::where(source, line) + ": non-finite offset");
                             if (!out.emplace(std::string(c[0]), v).second)
                               throw ParseError(detail::where(source, line) + ": duplicate tag " + std::string(c[0]));
                           });
  return out;
}

inline std::string format_extrinsics(const TagExtrinsics& tags) {
  std::string out = "tag_id,x,y,z\n";
  for (const auto& [id, v] : tags)
    out += id + "," + format_double(v.x()) + "," + format_double(v.y()) + "," + format_double(v.z()) + "\n";
  return out;
}

inline std::vector<AnchorPairPrior> parse_pairs_text(std::string_view text, const std::string& source = "<pairs>") {
  std::vector<AnchorPairPrior> out;
  detail::for_each_csv_row(text, source, {"anchor_a", "anchor_b", "distance_m"},
                           [&](std::size_t line, const std::vector<std::string_view>& c) {
                             const double d = detail::parse_number(c[2], source, line, "distance_m");
                             if (!std::isfinite(d) || d <= 0.0)
                               throw ParseError(detail::where(source, line) + ": distance must be positive");
                             out.push_back({std::string(c[0]), std::string(c[1]), d});
                           });
  return out;
}

inline std::string format_pairs(const std::vector<AnchorPairPrior>& pairs) {
  std::string out = "anchor_a,anchor_b,distance_m\n";
  for (const auto& p : pairs) out += p.a + "," + p.b + "," + format_double(p.distance) + "\n";
  return out;
}

inline std::vector<AnchorHeightPrior> parse_heights_text(std::string_view text,
                                                         const std::string& source = "<heights>") {
  std::vector<AnchorHeightPrior> out;
  detail::for_each_csv_row(text, source, {"anchor_id", "height_m", "sigma_m"},
                           [&](std::size_t line, const std::vector<std::string_view>& c) {
                             const double h = detail::parse_number(c[1], source, line, "height_m");
                             const double s = detail::parse_number(c[2], source, line, "sigma_m");
                             if (!std::isfinite(h) || !(s > 0.0) || !std::isfinite(s))
                               throw ParseError(detail::where(source, line) + ": bad height prior");
                             out.push_back({std::string(c[0]), h, s});
                           });
  return out;
}

inline std::string format_heights(const std::vector<AnchorHeightPrior>& heights) {
  std::string out = "anchor_id,height_m,sigma_m\n";
  for (const auto& h : heights) out += h.anchor + "," + format_double(h.height) + "," + format_double(h.sigma) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Run bundles

struct RunBundle {
  fs::path trajectory;
  fs::path ranges;
  fs::path extrinsics;
  std::optional<fs::path> pairs;
  std::optional<fs::path> heights;
};

struct LoadedRun {
  Trajectory trajectory;
  RangeLog ranges;
  TagExtrinsics extrinsics;
  std::vector<AnchorPairPrior> pairs;
  std::vector<AnchorHeightPrior> heights;
};

/// A bundle is either a directory holding trajectory.txt, ranges.csv,
/// extrinsics.csv and optionally pairs.csv / heights.csv, or a JSON
/// manifest with those keys (paths relative to the manifest).
inline RunBundle resolve_bundle(const fs::path& path) {
  RunBundle b;
  if (fs::is_directory(path)) {
    b.trajectory = path / "trajectory.txt";
    b.ranges = path / "ranges.csv";
    b.extrinsics = path / "extrinsics.csv";
    if (fs::exists(path / "pairs.csv")) b.pairs = path / "pairs.csv";
    if (fs::exists(path / "heights.csv")) b.heights = path / "heights.csv";
  } else {
    if (!fs::exists(path)) throw IoError("bundle '" + path.string() + "' does not exist");
    json j;
    try {
      j = json::parse(detail::read_file(path));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    const fs::path base = path.parent_path();
    auto get = [&](const char* key) -> std::optional<fs::path> {
      if (!j.contains(key)) return std::nullopt;
      if (!j[key].is_string()) throw ParseError(path.string() + ": '" + key + "' must be a string");
      return base / j[key].get<std::string>();
    };
    auto need = [&](const char* key) {
      auto p = get(key);
      if (!p) throw ParseError(path.string() + ": missing '" + key + "'");
      return *p;
    };
    b.trajectory = need("trajectory");
    b.ranges = need("ranges");
    b.extrinsics = need("extrinsics");
    b.pairs = get("pairs");
    b.heights = get("heights");
  }
  for (const fs::path* p : {&b.trajectory, &b.ranges, &b.extrinsics})
    if (!fs::exists(*p)) throw IoError("missing file '" + p->string() + "'");
  for (const auto* p : {&b.pairs, &b.heights})
    if (*p && !fs::exists(**p)) throw IoError("missing file '" + (*p)->string() + "'");
  return b;
}

inline LoadedRun load_bundle(const fs::path& path) {
  const RunBundle b = resolve_bundle(path);
  LoadedRun run;
  run.trajectory = parse_trajectory(b.trajectory);
  run.ranges = parse_ranges(b.ranges);
  run.extrinsics = parse_extrinsics_text(detail::read_file(b.extrinsics), b.extrinsics.string());
  if (b.pairs) run.pairs = parse_pairs_text(detail::read_file(*b.pairs), b.pairs->string());
  if (b.heights) run.heights = parse_heights_text(detail::read_file(*b.heights), b.heights->string());
  return run;
}

// ---------------------------------------------------------------------------
// Calibration document

namespace detail {

inline json report_to_json(const SolveReport& r) {
  return {{"iterations", r.iterations},
          {"accepted_steps", r.accepted_steps},
          {"initial_cost", r.initial_cost},
          {"final_cost", r.final_cost},
          {"termination", to_string(r.termination)},
          {"cost_trace", r.cost_trace}};
}

inline SolveReport report_from_json(const json& j) {
  SolveReport r;
  r.iterations = j.at("iterations").get<int>();
  r.accepted_steps = j.at("accepted_steps").get<int>();
  r.initial_cost = j.at("initial_cost").get<double>();
  r.final_cost = j.at("final_cost").get<double>();
  const std::string t = j.at("termination").get<std::string>();
  if (t == "converged")
    r.termination = Termination::Converged;
  else if (t == "max_iters")
    r.termination = Termination::MaxIters;
  else if (t == "stalled")
    r.termination = Termination::Stalled;
  else
    throw ParseError("unknown termination '" + t + "'");
  r.cost_trace = j.at("cost_trace").get<std::vector<double>>();
  return r;
}

}  // namespace detail

inline json calibration_to_json(const CalibrationResult& r, const json& config_echo = json::object()) {
  json anchors = json::object();
  for (const auto& [id, p] : r.anchors) anchors[id] = {p.x(), p.y(), p.z()};
  json biases = json::array();
  for (const auto& [link, b] : r.biases) biases.push_back({{"tag", link.first}, {"anchor", link.second}, {"bias_m", b}});
  json links = json::array();
  for (const auto& [link, s] : r.links)
    links.push_back({{"tag", link.first},
                     {"anchor", link.second},
                     {"raw", s.raw},
                     {"inliers", s.inliers},
                     {"rejected", s.rejected},
                     {"residual_rms_m", s.residual_rms},
                     {"bias_estimated", s.bias_estimated}});
  return {{"format", "uwbcal-calibration"},
          {"version", kCalibrationFormatVersion},
          {"anchors", anchors},
          {"biases", biases},
          {"links", links},
          {"stage1", detail::report_to_json(r.stage1)},
          {"stage2", detail::report_to_json(r.stage2)},
          {"stage1_cost_on_inliers", r.stage1_cost_on_inliers},
          {"warnings", r.warnings},
          {"config", config_echo}};
}

/// Inverse of calibration_to_json. Per-measurement gate flags are not part
/// of the document. Anchors without a bias entry for a known tag get bias 0
/// and a warning appended to `warnings`.
inline CalibrationResult calibration_from_json(const json& j, const std::string& source = "<calibration>") {
  auto fail = [&](const std::string& m) -> ParseError { return ParseError(source + ": " + m); };
  if (!j.is_object()) throw fail("document must be a JSON object");
  if (!j.contains("version")) throw fail("missing 'version'");
  if (!j["version"].is_number_integer() || j["version"].get<int>() != kCalibrationFormatVersion)
    throw VersionMismatch(source + ": expected version " + std::to_string(kCalibrationFormatVersion) + ", got " +
                          j["version"].dump());
  if (!j.contains("anchors") || !j["anchors"].is_object()) throw fail("missing 'anchors'");
  CalibrationResult r;
  try {
    for (const auto& [id, v] : j["anchors"].items()) {
      if (!v.is_array() || v.size() != 3) throw fail("anchor " + id + " must be [x, y, z]");
      r.anchors[id] = Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
    }
    std::set<TagId> tags;
    if (j.contains("biases")) {
      for (const auto& b : j["biases"]) {
        const LinkKey key{b.at("tag").get<std::string>(), b.at("anchor").get<std::string>()};
        r.biases[key] = b.at("bias_m").get<double>();
        tags.insert(key.first);
      }
    }
    if (j.contains("links")) {
      for (const auto& l : j["links"]) {
        LinkStats s;
        s.raw = l.at("raw").get<std::size_t>();
        s.inliers = l.at("inliers").get<std::size_t>();
        s.rejected = l.at("rejected").get<std::size_t>();
        s.residual_rms = l.at("residual_rms_m").get<double>();
        s.bias_estimated = l.at("bias_estimated").get<bool>();
        r.links[{l.at("tag").get<std::string>(), l.at("anchor").get<std::string>()}] = s;
      }
    }
    if (j.contains("stage1")) r.stage1 = detail::report_from_json(j["stage1"]);
    if (j.contains("stage2")) r.stage2 = detail::report_from_json(j["stage2"]);
    if (j.contains("stage1_cost_on_inliers")) r.stage1_cost_on_inliers = j["stage1_cost_on_inliers"].get<double>();
    if (j.contains("warnings")) r.warnings = j["warnings"].get<std::vector<std::string>>();
    for (const auto& tag : tags)
      for (const auto& [id, p] : r.anchors)
        if (!r.biases.contains({tag, id})) {
          r.biases[{tag, id}] = 0.0;
          r.warnings.push_back("no bias for " + tag + "/" + id + "; using 0");
        }
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
  return r;
}

inline void write_calibration(const fs::path& path, const CalibrationResult& r,
                              const json& config_echo = json::object()) {
  write_file_atomic(path, calibration_to_json(r, config_echo).dump(2) + "\n");
}

inline CalibrationResult parse_calibration(const fs::path& path) {
  json j;
  try {
    j = json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return calibration_from_json(j, path.string());
}

// ---------------------------------------------------------------------------
// Absolute trajectory error

enum class AteAlignment { None, Rigid };

inline const char* to_string(AteAlignment a) { return a == AteAlignment::None ? "none" : "rigid"; }

struct AteReport {
  double rmse = 0.0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  AteAlignment alignment = AteAlignment::None;
  std::vector<double> times;   // estimate timestamps of associated pairs
  std::vector<double> errors;  // positional error per pair (m)
};

/// Associates each estimated pose with the nearest ground-truth timestamp
/// within `max_dt`, optionally aligns positions with a closed-form rigid
/// transform, and reports positional error statistics.
inline AteReport ate(const Trajectory& est, const Trajectory& gt, AteAlignment mode = AteAlignment::None,
                     double max_dt = 0.02) {
  if (est.size() == 0 || gt.size() == 0 || est.end_time() < gt.start_time() - max_dt ||
      gt.end_time() < est.start_time() - max_dt)
    throw NoOverlap("estimate and ground truth do not overlap in time");
  std::vector<Vec3> a, b;
  AteReport rep;
  rep.alignment = mode;
  const auto& g = gt.poses();
  for (const Pose& e : est.poses()) {
    auto it = std::lower_bound(g.begin(), g.end(), e.t, [](const Pose& p, double t) { return p.t < t; });
    const Pose* best = nullptr;
    double best_dt = std::numeric_limits<double>::infinity();
    if (it != g.end()) {
      best = &*it;
      best_dt = it->t - e.t;
    }
    if (it != g.begin() && e.t - std::prev(it)->t < best_dt) {
      best = &*std::prev(it);
      best_dt = e.t - best->t;
    }
    if (best_dt > max_dt) best = nullptr;
    if (!best) continue;
    a.push_back(e.p);
    b.push_back(best->p);
    rep.times.push_back(e.t);
  }
  if (a.size() < 10) throw TooFewPairs(std::to_string(a.size()) + " associated pairs (need 10)");

  if (mode == AteAlignment::Rigid) {
    Eigen::Matrix3Xd src(3, static_cast<Eigen::Index>(a.size())), dst(3, static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
      src.col(static_cast<Eigen::Index>(i)) = a[i];
      dst.col(static_cast<Eigen::Index>(i)) = b[i];
    }
    const Eigen::Matrix4d T = Eigen::umeyama(src, dst, false);
    for (auto& p : a) p = T.topLeftCorner<3, 3>() * p + T.topRightCorner<3, 1>();
  }

  double sq = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = (a[i] - b[i]).norm();
    rep.errors.push_back(e);
    sq += e * e;
    sum += e;
    rep.max = std::max(rep.max, e);
  }
  const double n = static_cast<double>(a.size());
  rep.rmse = std::sqrt(sq / n);
  rep.mean = sum / n;
  std::vector<double> sorted = rep.errors;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  rep.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return rep;
}

// ---------------------------------------------------------------------------
// Scenario configuration and outputs

namespace detail {

inline Vec3 vec3_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("'" + key + "' must be [x, y, z]");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace detail

/// Reads a scenario from JSON. Every key is optional; unknown keys are an
/// error so that typos do not silently fall back to defaults.
inline ScenarioConfig scenario_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("scenario must be a JSON object");
  ScenarioConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "volume_min") c.volume_min = detail::vec3_from_json(v, key);
      else if (key == "volume_max") c.volume_max = detail::vec3_from_json(v, key);
      else if (key == "anchor_count") c.anchor_count = v.get<int>();
      else if (key == "anchors") {
        c.anchors.clear();
        for (const auto& [id, p] : v.items()) c.anchors[id] = detail::vec3_from_json(p, "anchors." + id);
      } else if (key == "tags") {
        c.tags.clear();
        for (const auto& [id, p] : v.items()) c.tags[id] = detail::vec3_from_json(p, "tags." + id);
      } else if (key == "trajectory") c.kind = trajectory_kind_from_string(v.get<std::string>());
      else if (key == "calibration_duration") c.calibration_duration = v.get<double>();
      else if (key == "fusion_duration") c.fusion_duration = v.get<double>();
      else if (key == "sequences") c.sequences = v.get<int>();
      else if (key == "speed") c.speed = v.get<double>();
      else if (key == "height_mid") c.height_mid = v.get<double>();
      else if (key == "height_amplitude") c.height_amplitude = v.get<double>();
      else if (key == "stationary_duration") c.stationary_duration = v.get<double>();
      else if (key == "start_time") c.start_time = v.get<double>();
      else if (key == "odom_rate") c.odom_rate = v.get<double>();
      else if (key == "range_rate") c.range_rate = v.get<double>();
      else if (key == "range_sigma") c.range_sigma = v.get<double>();
      else if (key == "spike_probability") c.spike_probability = v.get<double>();
      else if (key == "spike_min") c.spike_min = v.get<double>();
      else if (key == "spike_max") c.spike_max = v.get<double>();
      else if (key == "bias_max") c.bias_max = v.get<double>();
      else if (key == "calibration_drift") c.calibration_drift = {v.at("sigma_trans").get<double>(), v.at("sigma_rot").get<double>()};
      else if (key == "fusion_drift") c.fusion_drift = {v.at("sigma_trans").get<double>(), v.at("sigma_rot").get<double>()};
      else if (key == "body_roll") c.body_roll = v.get<double>();
      else if (key == "pair_priors") c.pair_priors = v.get<bool>();
      else throw ConfigError("unknown scenario key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline json scenario_to_json(const ScenarioConfig& c) {
  auto v3 = [](const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); };
  json anchors = json::object(), tags = json::object();
  for (const auto& [id, p] : c.anchors) anchors[id] = v3(p);
  for (const auto& [id, p] : c.tags) tags[id] = v3(p);
  return {{"seed", c.seed},
          {"volume_min", v3(c.volume_min)},
          {"volume_max", v3(c.volume_max)},
          {"anchor_count", c.anchor_count},
          {"anchors", anchors},
          {"tags", tags},
          {"trajectory", to_string(c.kind)},
          {"calibration_duration", c.calibration_duration},
          {"fusion_duration", c.fusion_duration},
          {"sequences", c.sequences},
          {"speed", c.speed},
          {"height_mid", c.height_mid},
          {"height_amplitude", c.height_amplitude},
          {"stationary_duration", c.stationary_duration},
          {"start_time", c.start_time},
          {"odom_rate", c.odom_rate},
          {"range_rate", c.range_rate},
          {"range_sigma", c.range_sigma},
          {"spike_probability", c.spike_probability},
          {"spike_min", c.spike_min},
          {"spike_max", c.spike_max},
          {"bias_max", c.bias_max},
          {"calibration_drift", {{"sigma_trans", c.calibration_drift.sigma_trans}, {"sigma_rot", c.calibration_drift.sigma_rot}}},
          {"fusion_drift", {{"sigma_trans", c.fusion_drift.sigma_trans}, {"sigma_rot", c.fusion_drift.sigma_rot}}},
          {"body_roll", c.body_roll},
          {"pair_priors", c.pair_priors}};
}

/// Writes one bundle directory per sequence plus truth sidecars:
///   <out>/truth.json                  anchors, biases, S-to-U transforms
///   <out>/seqNN/{trajectory.txt, ranges.csv, extrinsics.csv, pairs.csv}
///   <out>/seqNN/truth_U.txt, labels.csv
inline void write_scenario(const fs::path& out, const ScenarioTruth& truth) {
  json t;
  json anchors = json::object();
  for (const auto& [id, p] : truth.anchors) anchors[id] = {p.x(), p.y(), p.z()};
  json biases = json::array();
  for (const auto& [link, b] : truth.biases) biases.push_back({{"tag", link.first}, {"anchor", link.second}, {"bias_m", b}});
  json seqs = json::array();
  for (const auto& seq : truth.sequences) {
    const Pose& T = seq.u_from_s;
    seqs.push_back({{"name", seq.name},
                    {"calibration", seq.calibration},
                    {"u_from_s", {{"p", {T.p.x(), T.p.y(), T.p.z()}}, {"q_xyzw", {T.r.x(), T.r.y(), T.r.z(), T.r.w()}}}}});
  }
  t["anchors"] = anchors;
  t["biases"] = biases;
  t["sequences"] = seqs;
  write_file_atomic(out / "truth.json", t.dump(2) + "\n");

  for (const auto& seq : truth.sequences) {
    const fs::path dir = out / seq.name;
    write_trajectory(dir / "trajectory.txt", seq.odometry);
    write_trajectory(dir / "truth_U.txt", seq.truth);
    write_ranges(dir / "ranges.csv", seq.ranges);
    write_file_atomic(dir / "extrinsics.csv", format_extrinsics(truth.tags));
    if (!truth.pair_priors.empty()) write_file_atomic(dir / "pairs.csv", format_pairs(truth.pair_priors));
    std::string labels = "t,tag_id,anchor_id,spike,magnitude_m\n";
    for (std::size_t i = 0; i < seq.ranges.size(); ++i)
      labels += format_double(seq.ranges[i].t) + "," + seq.ranges[i].tag + "," + seq.ranges[i].anchor + "," +
                (seq.labels[i].spike ? "1" : "0") + "," + format_double(seq.labels[i].magnitude) + "\n";
    write_file_atomic(dir / "labels.csv", labels);
  }
}

// ---------------------------------------------------------------------------
// Report emitters

inline std::string format_timing(const std::vector<WindowReport>& windows) {
  std::string out = "window,start_time,end_time,poses,ranges,iterations,final_cost,termination,wall_ms\n";
  for (const auto& w : windows)
    out += std::to_string(w.index) + "," + format_double(w.start_time) + "," + format_double(w.end_time) + "," +
           std::to_string(w.poses) + "," + std::to_string(w.ranges) + "," + std::to_string(w.solve.iterations) + "," +
           format_double(w.solve.final_cost) + "," + to_string(w.solve.termination) + "," +
           format_double(w.wall_ms) + "\n";
  return out;
}

inline std::string format_ate_series(const AteReport& rep) {
  std::string out = "t,error_m\n";
  for (std::size_t i = 0; i < rep.errors.size(); ++i)
    out += format_double(rep.times[i]) + "," + format_double(rep.errors[i]) + "\n";
  return out;
}

}  // namespace uwbcal
