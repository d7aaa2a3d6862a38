#include <attnlab/attnlab.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace attnlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("attnlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Drops the wall_time column so that two runs can be compared byte for byte.
std::string without_wall_time(const std::string& csv) {
  const auto& cols = csv_columns();
  const auto idx = std::find(cols.begin(), cols.end(), "wall_time") - cols.begin();
  std::stringstream in(csv), out;
  std::string line;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string cell;
    int k = 0;
    while (std::getline(ls, cell, ',')) {
      if (k++ != idx) out << cell << ',';
    }
    out << '\n';
  }
  return out.str();
}

SweepRecord sample_record(double alpha, const std::string& branch, double eps_t) {
  SweepRecord r;
  r.alpha = alpha;
  r.omega = 0.3;
  r.d = 500;
  r.branch = branch;
  r.source = Source::Theory;
  r.seed = 42;
  r.config_hash = "0123456789abcdef";
  r.converged = true;
  r.label = branch;
  r.eps_t = eps_t;
  r.eps_g = 0.1 / 3.0;
  r.theta = std::nextafter(0.2, 1.0);
  r.m = -1e-300;
  r.q = 0.19999999999999998;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

TEST(Io, FormatDoubleRoundTrips) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, static_cast<int>(rng.uniform() * 40) - 20);
    EXPECT_EQ(parse_double(format_double(x)), x);
  }
  EXPECT_TRUE(std::isnan(parse_double(format_double(std::nan("")))));
  EXPECT_EQ(parse_double(format_double(-INFINITY)), -INFINITY);
  EXPECT_EQ(parse_double(format_double(std::numeric_limits<double>::denorm_min())),
            std::numeric_limits<double>::denorm_min());
  EXPECT_THROW(parse_double("1.0x"), std::invalid_argument);
}

TEST(Io, DatasetRoundTripIsBitExact) {
  const fs::path dir = scratch("dataset");
  ExperimentConfig cfg;
  cfg.d = 17;
  cfg.alpha = 2.0;
  const TeacherSpec t = make_teacher(cfg, 1);
  const Dataset ds = sample_dataset(cfg, t, 1);
  save_dataset(dir / "ds.bin", ds);
  const Dataset back = load_dataset(dir / "ds.bin", &t);
  ASSERT_EQ(back.n(), ds.n());
  EXPECT_EQ(back.seed, ds.seed);
  for (int mu = 0; mu < ds.n(); ++mu) {
    EXPECT_EQ((back.sentences[mu] - ds.sentences[mu]).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((back.labels[mu] - ds.labels[mu]).cwiseAbs().maxCoeff(), 0.0);
  }
  ASSERT_EQ(back.mixings.size(), ds.mixings.size());
  EXPECT_EQ((back.mixings[3] - ds.mixings[3]).norm(), 0.0);
  // Payload size: one JSON line, then 2 n L d float64.
  std::ifstream is(dir / "ds.bin", std::ios::binary);
  std::string header;
  std::getline(is, header);
  const auto total = fs::file_size(dir / "ds.bin");
  EXPECT_EQ(total - header.size() - 1, 2u * ds.n() * 2 * 17 * sizeof(double));
}

TEST(Io, TruncatedDatasetIsRejected) {
  const fs::path dir = scratch("truncated");
  ExperimentConfig cfg;
  cfg.d = 8;
  const TeacherSpec t = make_teacher(cfg, 1);
  save_dataset(dir / "ds.bin", sample_dataset(cfg, t, 1));
  fs::resize_file(dir / "ds.bin", fs::file_size(dir / "ds.bin") - 8);
  EXPECT_THROW(load_dataset(dir / "ds.bin"), IoError);
}

TEST(Io, WeightsRoundTrip) {
  const fs::path dir = scratch("weights");
  Vec q(5);
  q << 1.0, -2.5, 1e-300, 3.0, 0.1;
  save_weights(dir / "w.f64", q);
  EXPECT_EQ((load_weights(dir / "w.f64") - q).norm(), 0.0);
}

// ---------------------------------------------------------------------------
// Records and pairing
// ---------------------------------------------------------------------------

TEST(Records, CsvRoundTripIsExact) {
  std::vector<SweepRecord> rs{sample_record(0.5, "positional", -0.129), sample_record(2.0, "semantic", -0.128)};
  rs[1].converged = false;
  rs[1].eps_g = std::nan("");
  const std::string text = records_csv(rs);
  std::istringstream is(text);
  const auto back = parse_records_csv(is);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(records_csv(back), text);
  EXPECT_EQ(back[0].theta, rs[0].theta);
  EXPECT_EQ(back[0].m, rs[0].m);
  EXPECT_FALSE(back[1].converged);
}

TEST(Records, MalformedCsvReportsLine) {
  std::istringstream is(records_csv({sample_record(1.0, "positional", 0.0)}) + "1,2,3\n");
  try {
    parse_records_csv(is, "x.csv");
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("x.csv:3"), std::string::npos) << e.what();
  }
}

TEST(Records, PairingDifferenceEqualsStoredValuesExactly) {
  std::vector<SweepRecord> rs;
  for (double a : {0.5, 1.0, 2.0}) {
    rs.push_back(sample_record(a, "positional", -0.129 + 1e-4 * a));
    rs.push_back(sample_record(a, "semantic", -0.1291 + 3e-4 * a / 7.0));
  }
  const auto pairs = pair_branches(rs);
  ASSERT_EQ(pairs.size(), 3u);
  for (const auto& p : pairs) {
    const auto pos = std::find_if(rs.begin(), rs.end(), [&](const auto& r) {
      return r.alpha == p.alpha && r.branch == "positional";
    });
    const auto sem = std::find_if(rs.begin(), rs.end(), [&](const auto& r) {
      return r.alpha == p.alpha && r.branch == "semantic";
    });
    EXPECT_EQ(p.delta_eps_t, sem->eps_t - pos->eps_t);
  }
}

TEST(Records, ConfigHashIsStable) {
  const json j = {{"a", 1}, {"b", {1.5, 2.5}}};
  EXPECT_EQ(config_hash(j), config_hash(json::parse(j.dump())));
  EXPECT_NE(config_hash(j), config_hash({{"a", 2}, {"b", {1.5, 2.5}}}));
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
}

// ---------------------------------------------------------------------------
// Root finding
// ---------------------------------------------------------------------------

TEST(Bisection, RecoversKnownRootOfSyntheticObjective) {
  const double root = 1.7;
  const SignObjective f = [&](double a) -> std::optional<Estimate> { return Estimate{std::log(root / a), 0.0}; };
  const RootBracket b = bisect_sign_change(f, 0.2, 6.0, 0.01);
  ASSERT_EQ(b.status, "root");
  EXPECT_LE(b.width(), 0.01);
  EXPECT_LE(b.lo, root);
  EXPECT_GE(b.hi, root);
  EXPECT_LT(b.f_lo * b.f_hi, 0.0);
  EXPECT_GE(b.estimate, b.lo);
  EXPECT_LE(b.estimate, b.hi);
}

TEST(Bisection, StoredEndpointsAlwaysBracketASignChange) {
  for (double root : {0.25, 0.9, 3.3, 5.9}) {
    const SignObjective f = [&](double a) -> std::optional<Estimate> { return Estimate{a - root, 0.0}; };
    TransitionOptions opt;
    opt.resolution = 0.02;
    const RootBracket b = scan_and_bisect(f, opt);
    ASSERT_TRUE(b.found()) << root;
    double flo = NAN, fhi = NAN;
    for (const auto& e : b.evaluations) {
      if (e.alpha == b.lo) flo = e.value;
      if (e.alpha == b.hi) fhi = e.value;
    }
    EXPECT_LT(flo * fhi, 0.0) << root;
    EXPECT_LE(b.width(), 0.02);
  }
}

TEST(Bisection, SameSignGivesNoBracket) {
  const SignObjective f = [](double a) -> std::optional<Estimate> { return Estimate{a + 1.0, 0.0}; };
  EXPECT_EQ(bisect_sign_change(f, 0.2, 6.0, 0.05).status, "no bracket");
  EXPECT_EQ(scan_and_bisect(f, TransitionOptions{}).status, "no bracket");
}

TEST(Bisection, NoiseLevelObjectiveGivesInterval) {
  const SignObjective f = [](double a) -> std::optional<Estimate> { return Estimate{a - 2.0, 10.0}; };
  const RootBracket b = bisect_sign_change(f, 0.2, 6.0, 1e-3);
  EXPECT_EQ(b.status, "interval");
}

TEST(Bisection, RepeatedFailureIsFlagged) {
  const SignObjective f = [](double a) -> std::optional<Estimate> {
    if (a > 0.5 && a < 5.0) return std::nullopt;
    return Estimate{a - 2.0, 0.0};
  };
  const RootBracket b = bisect_sign_change(f, 0.2, 6.0, 0.01);
  EXPECT_EQ(b.status, "flagged");
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

namespace {

SweepSpec tiny_sweep() {
  SweepSpec s;
  s.base.d = 30;
  s.alphas = {0.5, 1.0};
  s.omegas = {0.3};
  s.sources = {Source::GD, Source::LinearBaseline};
  s.seeds = 2;
  s.gd.epochs = 20;
  s.n_test = 64;
  s.baseline_mc = 2000;
  return s;
}

}  // namespace

TEST(Sweep, EmptySourceListIsRejected) {
  SweepSpec s = tiny_sweep();
  s.sources.clear();
  try {
    sweep(s);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("nothing to evaluate"), std::string::npos);
  }
}

TEST(Sweep, OneRecordPerPointBranchSourceSeed) {
  const auto rs = sweep(tiny_sweep());
  // GD: 2 alphas x 2 branches x 2 seeds; baseline: 2 alphas.
  EXPECT_EQ(rs.size(), 10u);
  std::set<std::tuple<double, std::string, std::string, std::uint64_t>> keys;
  for (const auto& r : rs) keys.insert({r.alpha, r.branch, source_name(r.source), r.seed});
  EXPECT_EQ(keys.size(), rs.size());
}

TEST(Sweep, RerunIsByteIdenticalModuloWallTime) {
  const fs::path a = scratch("sweep_a"), b = scratch("sweep_b");
  SweepOptions oa, ob;
  oa.checkpoint = a / "records.csv";
  ob.checkpoint = b / "records.csv";
  sweep(tiny_sweep(), oa);
  sweep(tiny_sweep(), ob);
  EXPECT_EQ(without_wall_time(slurp(a / "records.csv")), without_wall_time(slurp(b / "records.csv")));
}

TEST(Sweep, ResumeSkipsCompletedUnits) {
  const fs::path dir = scratch("sweep_resume");
  SweepOptions o;
  o.checkpoint = dir / "records.csv";
  const auto first = sweep(tiny_sweep(), o);
  o.resume = true;
  int recomputed = 0;
  o.on_record = [&](const SweepRecord&) { ++recomputed; };
  const auto second = sweep(tiny_sweep(), o);
  EXPECT_EQ(recomputed, 0);
  EXPECT_EQ(second.size(), first.size());
}

TEST(Sweep, TheoryBranchesHaveDistinctSignatures) {
  SweepSpec s;
  s.alphas = {2.0};
  s.omegas = {0.3};
  s.sources = {Source::Theory};
  s.theory.se.grid_nodes = 5;
  s.theory.test_mc = 5000;
  const auto rs = sweep(s);
  ASSERT_EQ(rs.size(), 2u);
  const auto& a = rs[0];
  const auto& b = rs[1];
  EXPECT_NE(a.branch, b.branch);
  EXPECT_TRUE(std::abs(a.theta - b.theta) > 1e-3 || std::abs(std::abs(a.m) - std::abs(b.m)) > 1e-3);
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

TEST(Manifest, BundledManifestsParse) {
  const fs::path root = ATTNLAB_SOURCE_DIR;
  const Manifest fig2 = load_manifest(root / "manifests" / "fig2.manifest");
  EXPECT_EQ(fig2.sweep.base.d, 500);
  EXPECT_EQ(fig2.sweep.seeds, 24);
  const Manifest other = load_manifest(root / "manifests" / "otherA.manifest");
  TokenMatrix A(2, 2);
  A << 0.3, 0.7, 0.8, 0.2;
  EXPECT_EQ((other.sweep.base.A - A).norm(), 0.0);
  EXPECT_NO_THROW(load_manifest(root / "manifests" / "smoke.manifest"));
}

TEST(Manifest, ErrorsCarryLineAndField) {
  const std::string text = "name = t\n[sweep]\nalphas = 1 2\nsources = theory\n\n[theory]\ntol = abc\n";
  try {
    parse_manifest(text, "m.manifest");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.line(), 7);
    EXPECT_EQ(e.field(), "theory.tol");
  }
  try {
    parse_manifest("[sweep]\nalphas = 1\nsources = theory\nbogus = 3\n");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.line(), 4);
    EXPECT_EQ(e.field(), "sweep.bogus");
  }
}

TEST(Manifest, EmptySweepIsAValidationError) {
  EXPECT_THROW(parse_manifest("name = x\n[sweep]\n"), ManifestError);
  EXPECT_THROW(parse_manifest("name = x\n"), ManifestError);
}

TEST(Manifest, GeometricGridAndMatrixSyntax) {
  const Manifest m =
      parse_manifest("[experiment]\nA = 0.5 0.5; 0.1 0.9\n[sweep]\nalphas = geometric 0.5 8 5\nsources = baseline\n");
  ASSERT_EQ(m.sweep.alphas.size(), 5u);
  EXPECT_NEAR(m.sweep.alphas[2], 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.sweep.base.A(1, 0), 0.1);
}

TEST(Manifest, SuiteWritesAllArtifacts) {
  const fs::path dir = scratch("suite");
  const Manifest m = parse_manifest(
      "name = t\n[experiment]\nd = 20\n[sweep]\nalphas = 1\nsources = gd baseline\nseeds = 1\nn_test = 32\n"
      "baseline_mc = 1000\n[gd]\nepochs = 5\n");
  const SuiteResult r = run_experiment_suite(m, dir);
  EXPECT_EQ(r.exit_status, kExitOk);
  EXPECT_TRUE(fs::exists(dir / "records.csv"));
  EXPECT_TRUE(fs::exists(dir / "transitions.json"));
  EXPECT_TRUE(fs::exists(dir / "manifest.lock.json"));
  int runs = 0;
  for (const auto& e : fs::directory_iterator(dir / "runs")) runs += e.path().extension() == ".json";
  EXPECT_EQ(runs, static_cast<int>(r.records.size()));
  const json lock = read_json(dir / "manifest.lock.json");
  EXPECT_EQ(lock["resolved"]["manifest_hash"], m.text_hash);
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

TEST(Calibration, ZeroEncodingIsANoOp) {
  ExperimentConfig cfg;
  cfg.d = 20;
  cfg.pos_scale = 0.0;
  TheorySettings ts;
  const TauCalibration c = calibrate_tau_scale(cfg, 20, 2, ts, OptimizerConfig{});
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.selected, TauScale::Field);
  for (const auto& k : c.candidates)
    for (double t : k.tau) EXPECT_EQ(t, 0.0);
}

TEST(Calibration, TauScalesDifferBySqrtD) {
  ExperimentConfig cfg;
  cfg.d = 400;
  const Mat p = positional_encoding(cfg);
  const auto f = tau_from_encoding(p, TauScale::Field), g = tau_from_encoding(p, TauScale::PerDimension);
  EXPECT_NEAR(f[0], kDefaultEncodingNorm, 1e-12);
  EXPECT_NEAR(f[0] / g[0], 20.0, 1e-12);
}
