#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"
#include "uwbcal/apc.hpp"
#include "uwbcal/dataio.hpp"
#include "uwbcal/simgen.hpp"

namespace uwbcal {
namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("uwbcal_dataio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(Trajectory, ParsesTwoLines) {
  const Trajectory t = parse_trajectory_text("# header\n0.0 1 2 3 0 0 0 1\n0.1 1.1 2 3 0 0 0 1\n");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_DOUBLE_EQ(t[1].t, 0.1);
  EXPECT_DOUBLE_EQ(t[1].p.x(), 1.1);
  EXPECT_LT(angular_distance(t[0].r, Rotation()), 1e-15);
}

TEST(Trajectory, RejectsBadQuaternionNorm) {
  try {
    parse_trajectory_text("0.0 1 2 3 0 0 0 0.5\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("norm"), std::string::npos);
  }
}

TEST(Trajectory, RejectsDuplicateTimestamps) {
  EXPECT_THROW(parse_trajectory_text("0.0 0 0 0 0 0 0 1\n0.0 1 0 0 0 0 0 1\n"), DuplicateTimestamp);
}

TEST(Trajectory, RejectsWrongColumnCount) {
  EXPECT_THROW(parse_trajectory_text("0.0 0 0 0 0 0 1\n"), ParseError);
}

TEST(Trajectory, SortsOutOfOrderRows) {
  const Trajectory t = parse_trajectory_text("0.2 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n");
  EXPECT_DOUBLE_EQ(t[0].t, 0.1);
  EXPECT_DOUBLE_EQ(t[0].p.x(), 1.0);
}

TEST(Trajectory, WriteParseRoundTripIsBitwise) {
  ScenarioConfig cfg;
  cfg.seed = 4;
  cfg.sequences = 1;
  cfg.calibration_duration = 1000.0;
  const ScenarioTruth truth = generate(cfg);
  const Trajectory& src = truth.sequences[0].odometry;
  ASSERT_GE(src.size(), 10000u);
  const fs::path path = temp_dir("roundtrip") / "trajectory.txt";
  write_trajectory(path, src);
  const Trajectory back = parse_trajectory(path);
  ASSERT_EQ(back.size(), src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    ASSERT_EQ(back[i].t, src[i].t);
    ASSERT_EQ(back[i].p, src[i].p);
    ASSERT_EQ(back[i].r.quaternion().coeffs(), src[i].r.quaternion().coeffs());
  }
}

TEST(Ranges, ParsesAndSkipsNonPositive) {
  const RangeLog log = parse_ranges_text("t,tag_id,anchor_id,range_m\n0.0,200A,100,5.1\n0.1,200A,101,-1\n0.2,201A,100,4.9\n");
  ASSERT_EQ(log.ranges.size(), 2u);
  EXPECT_EQ(log.skipped, 1u);
  EXPECT_EQ(log.ranges[1].tag, "201A");
  EXPECT_DOUBLE_EQ(log.ranges[1].d, 4.9);
}

TEST(Ranges, MissingHeaderIsParseError) {
  EXPECT_THROW(parse_ranges_text("0.0,200A,100,5.1\n"), ParseError);
}

TEST(Ranges, LargeFileParsesQuickly) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(1.0, 30.0);
  std::vector<RangeMeasurement> ranges;
  const std::vector<std::string> tags{"200A", "201A"};
  const std::vector<std::string> anchors{"100", "101", "102", "103"};
  const int n = 65 * 300 * 8;
  for (int i = 0; i < n; ++i)
    ranges.push_back({i / 520.0, tags[static_cast<std::size_t>(i) % 2], anchors[static_cast<std::size_t>(i / 2) % 4], d(rng)});
  const fs::path path = temp_dir("ranges") / "ranges.csv";
  write_ranges(path, ranges);
  const auto start = std::chrono::steady_clock::now();
  const RangeLog log = parse_ranges(path);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_EQ(log.ranges.size(), ranges.size());
  EXPECT_LT(seconds, 1.0);
  for (std::size_t i = 0; i < ranges.size(); i += 997) EXPECT_EQ(log.ranges[i].d, ranges[i].d);
}

TEST(Bundle, MissingRangesNamesPath) {
  const fs::path dir = temp_dir("bundle");
  write_trajectory(dir / "trajectory.txt", Trajectory({Pose::identity(0.0)}));
  write_file_atomic(dir / "extrinsics.csv", "tag_id,x,y,z\n200A,0.4,0,0\n");
  try {
    load_bundle(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("ranges.csv"), std::string::npos);
  }
}

CalibrationResult sample_calibration() {
  CalibrationResult r;
  r.anchors = {{"100", Vec3(-8.125, -7.9, 0.51)}, {"101", Vec3(8.0, -8.0, 3.5)}};
  r.biases = {{{"200A", "100"}, 0.031}, {{"200A", "101"}, -0.07}};
  r.links[{"200A", "100"}] = LinkStats{100, 95, 5, 0.05, true};
  r.links[{"200A", "101"}] = LinkStats{100, 99, 1, 0.04, true};
  r.stage1.iterations = 7;
  r.stage1.initial_cost = 12.5;
  r.stage1.final_cost = 0.1;
  r.stage1.cost_trace = {12.5, 1.0, 0.1};
  r.stage2.final_cost = 0.0625;
  r.stage1_cost_on_inliers = 0.0701;
  r.warnings = {"link 200A/102 has no data"};
  return r;
}

TEST(CalibrationJson, RoundTripIsValueIdentical) {
  const CalibrationResult r = sample_calibration();
  const json j = calibration_to_json(r, {{"tau", 0.5}});
  const CalibrationResult back = calibration_from_json(json::parse(j.dump()));
  EXPECT_EQ(back.anchors, r.anchors);
  EXPECT_EQ(back.biases, r.biases);
  EXPECT_EQ(back.stage1.cost_trace, r.stage1.cost_trace);
  EXPECT_EQ(back.stage1.iterations, r.stage1.iterations);
  EXPECT_EQ(back.stage2.final_cost, r.stage2.final_cost);
  EXPECT_EQ(back.stage1_cost_on_inliers, r.stage1_cost_on_inliers);
  EXPECT_EQ(back.links.at(std::make_pair(TagId("200A"), AnchorId("100"))).rejected, 5u);
  EXPECT_EQ(calibration_to_json(back, {{"tau", 0.5}}).dump(), j.dump());
}

TEST(CalibrationJson, MissingAnchorsIsParseError) {
  json j = calibration_to_json(sample_calibration());
  j.erase("anchors");
  EXPECT_THROW(calibration_from_json(j), ParseError);
}

TEST(CalibrationJson, AnchorWithoutBiasesDefaultsToZero) {
  json j = calibration_to_json(sample_calibration());
  j["anchors"]["102"] = {8.0, 8.0, 1.0};
  const CalibrationResult back = calibration_from_json(j);
  EXPECT_EQ(back.biases.at({"200A", "102"}), 0.0);
  bool warned = false;
  for (const auto& w : back.warnings) warned |= w.find("102") != std::string::npos;
  EXPECT_TRUE(warned);
}

TEST(CalibrationJson, WrongVersion) {
  json j = calibration_to_json(sample_calibration());
  j["version"] = 99;
  EXPECT_THROW(calibration_from_json(j), VersionMismatch);
}

Trajectory random_walk(std::mt19937_64& rng, std::size_t n, double dt = 0.1) {
  std::vector<Pose> poses;
  Vec3 p = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    p += testing::random_vec(rng, 0.2);
    poses.push_back({static_cast<double>(i) * dt, p, testing::random_rotation(rng)});
  }
  return Trajectory(std::move(poses));
}

TEST(Ate, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  const Trajectory gt = random_walk(rng, 50);
  EXPECT_EQ(ate(gt, gt).rmse, 0.0);
}

TEST(Ate, ConstantOffset) {
  std::mt19937_64 rng(2);
  const Trajectory gt = random_walk(rng, 50);
  std::vector<Pose> shifted = gt.poses();
  for (auto& p : shifted) p.p += Vec3(0.1, 0, 0);
  const Trajectory est(std::move(shifted));
  EXPECT_NEAR(ate(est, gt, AteAlignment::None).rmse, 0.1, 1e-12);
  EXPECT_NEAR(ate(est, gt, AteAlignment::Rigid).rmse, 0.0, 1e-9);
}

TEST(Ate, RigidAlignmentIsInvariantToRigidMotion) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Trajectory gt = random_walk(rng, 30);
    std::vector<Pose> noisy = gt.poses();
    for (auto& p : noisy) p.p += testing::random_vec(rng, 0.05);
    const Trajectory est(noisy);
    const Pose T = testing::random_pose(rng, 10.0);
    for (auto& p : noisy) p = compose(T, p);
    const Trajectory moved(std::move(noisy));
    EXPECT_NEAR(ate(est, gt, AteAlignment::Rigid).rmse, ate(moved, gt, AteAlignment::Rigid).rmse, 1e-9);
  }
}

TEST(Ate, MatchesBruteForcePairing) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> jitter(-0.03, 0.03);
  const Trajectory gt = random_walk(rng, 200);
  std::vector<Pose> est;
  for (const auto& g : gt.poses()) {
    Pose p = g;
    p.t += jitter(rng);
    p.p += testing::random_vec(rng, 0.1);
    est.push_back(p);
  }
  std::sort(est.begin(), est.end(), [](const Pose& a, const Pose& b) { return a.t < b.t; });
  const Trajectory e(std::move(est));
  const AteReport rep = ate(e, gt, AteAlignment::None, 0.02);
  const std::vector<double> brute = oracle::brute_force_errors(e, gt, 0.02);
  ASSERT_EQ(rep.errors.size(), brute.size());
  double sq = 0.0;
  for (double x : brute) sq += x * x;
  EXPECT_NEAR(rep.rmse, std::sqrt(sq / static_cast<double>(brute.size())), 1e-9);
}

TEST(Ate, Failures) {
  std::mt19937_64 rng(5);
  const Trajectory gt = random_walk(rng, 20);
  std::vector<Pose> late = gt.poses();
  for (auto& p : late) p.t += 100.0;
  EXPECT_THROW(ate(Trajectory(late), gt), NoOverlap);
  std::vector<Pose> few(gt.poses().begin(), gt.poses().begin() + 5);
  EXPECT_THROW(ate(Trajectory(few), gt), TooFewPairs);
}

TEST(Scenario, JsonRoundTripAndUnknownKey) {
  ScenarioConfig cfg;
  cfg.seed = 77;
  cfg.kind = TrajectoryKind::Lawnmower;
  cfg.range_sigma = 0.03;
  const ScenarioConfig back = scenario_from_json(scenario_to_json(cfg));
  EXPECT_EQ(scenario_to_json(back).dump(), scenario_to_json(cfg).dump());
  json j = scenario_to_json(cfg);
  j["bogus"] = 1;
  EXPECT_THROW(scenario_from_json(j), ConfigError);
}

}  // namespace
}  // namespace uwbcal
