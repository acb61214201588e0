#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "s2s/config.hpp"
#include "s2s/io.hpp"
#include "s2s/pipeline.hpp"
#include "support.hpp"

using namespace s2s;
using s2s::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("s2s_test_io_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(S2S_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kSmoke = std::string(S2S_CONFIG_DIR) + "/smoke.json";

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  const auto back = parse_run_config(to_json(cfg));
  EXPECT_EQ(back, cfg);
  EXPECT_EQ(canonical_string(back), canonical_string(cfg));
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"desk.json", "smoke.json"}) {
    const auto cfg = parse_run_config(io::read_bytes(fs::path(S2S_CONFIG_DIR) / name));
    EXPECT_NO_THROW(cfg.validate()) << name;
    EXPECT_EQ(parse_run_config(to_json(cfg)), cfg) << name;
  }
}

TEST(Config, DeskFileMatchesDeskScaleGeometry) {
  const auto cfg = parse_run_config(io::read_bytes(fs::path(S2S_CONFIG_DIR) / "desk.json"));
  EXPECT_EQ(cfg.geometry.build(), FanBeamGeometry::desk_scale());
  EXPECT_EQ(cfg.noise.bins().bin_count(), 5u);
  EXPECT_EQ(cfg.phantom, desk_phantom_config());
}

TEST(Config, PartialConfigKeepsDefaults) {
  const auto cfg = parse_run_config(std::string(R"({"seed": 3, "train": {"epochs": 7}})"));
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_EQ(cfg.train.epochs, 7);
  EXPECT_EQ(cfg.train.steps_per_epoch, TrainConfig{}.steps_per_epoch);
  EXPECT_EQ(cfg.geometry, GeometryConfig{});
}

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
  try {
    parse_run_config(std::string(R"({"recon": {"sirt_iteratons": 5}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("recon.sirt_iteratons"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_run_config(std::string(R"({"colour": 1})")), ConfigError);
}

TEST(Config, TypeErrorsAreRejected) {
  EXPECT_THROW(parse_run_config(std::string(R"({"seed": "abc"})")), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(R"({"geometry": {"views": -3}})")), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(R"({"train": {"epochs": 1.5}})")), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(R"({"metrics": {"roi": [1, 2, 3]}})")), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(R"({"algorithm": "fbp"})")), ConfigError);
}

TEST(Config, ValidationCatchesInconsistentValues) {
  EXPECT_THROW(parse_run_config(std::string(R"({"geometry": {"image_size": 30}})")), ConfigError);
  EXPECT_THROW(parse_run_config(std::string(R"({"metrics": {"roi": [100, 100, 64, 64]}})")),
               ConfigError);
  EXPECT_THROW(parse_run_config(std::string(R"({"noise": {"bin_edges_kev": [20, 10]}})")),
               ConfigError);
}

TEST(Config, ParseErrorsReportLineAndColumn) {
  try {
    parse_run_config(std::string("{\n  \"seed\": 1,\n  \"train\": {,}\n}"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, HashIgnoresOutputDirectory) {
  RunConfig a, b;
  b.output = "elsewhere";
  EXPECT_EQ(pipeline::config_hash(a), pipeline::config_hash(b));
  b.seed += 1;
  EXPECT_NE(pipeline::config_hash(a), pipeline::config_hash(b));
}

TEST(Arrays, Float32RoundTrip) {
  const auto dir = scratch("arrays");
  std::mt19937_64 rng(1);
  const auto t = random_tensor({5, 7}, rng);
  io::write_array(dir / "a.f32", t, {{"kind", "test"}});
  const auto back = io::read_array(dir / "a.f32");
  EXPECT_EQ(back.data.shape(), t.shape());
  EXPECT_EQ(back.meta["kind"], "test");
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back.data[i], static_cast<double>(static_cast<float>(t[i])));
  EXPECT_EQ(fs::file_size(dir / "a.f32"), 35u * 4u);
}

TEST(Arrays, LittleEndianLayout) {
  const std::vector<double> v{1.0};
  const auto bytes = io::encode_f32(v);
  ASSERT_EQ(bytes.size(), 4u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[3]), 0x3Fu);
  EXPECT_EQ(static_cast<unsigned char>(bytes[2]), 0x80u);
}

TEST(Arrays, SidecarShapeMismatchIsAnError) {
  const auto dir = scratch("mismatch");
  io::write_array(dir / "a.f32", Tensor<double>({2, 3}, 1.0));
  auto meta = io::read_json(dir / "a.json");
  meta["shape"] = {2, 4};
  io::write_json(dir / "a.json", meta);
  EXPECT_THROW(io::read_array(dir / "a.f32"), IoError);
}

TEST(Manifest, DetectsTampering) {
  const auto dir = scratch("manifest");
  io::write_array(dir / "x.f32", Tensor<double>({3}, 2.0));
  io::write_manifest(dir, {{"kind", "test"}}, {"x.f32"});
  EXPECT_NO_THROW(io::load_manifest(dir));

  // Payload change.
  io::write_array(dir / "x.f32", Tensor<double>({3}, 2.5));
  EXPECT_THROW(io::load_manifest(dir), IoError);

  // Manifest field change.
  io::write_array(dir / "x.f32", Tensor<double>({3}, 2.0));
  auto m = io::read_json(dir / io::kManifestName);
  EXPECT_NO_THROW(io::load_manifest(dir));
  m["kind"] = "other";
  io::write_json(dir / io::kManifestName, m);
  EXPECT_THROW(io::load_manifest(dir), IoError);

  fs::remove(dir / io::kManifestName);
  EXPECT_THROW(io::load_manifest(dir), IoError);
}

TEST(Manifest, DigestCoversSidecars) {
  const auto dir = scratch("sidecar");
  io::write_array(dir / "x.f32", Tensor<double>({3}, 2.0));
  const auto m = io::write_manifest(dir, {{"kind", "test"}}, {"x.f32"});
  EXPECT_TRUE(m["files"].contains("x.json"));
  io::write_json(dir / "x.json", {{"shape", {3}}, {"dtype", "float32"}, {"byte_order", "little"}});
  EXPECT_THROW(io::load_manifest(dir), IoError);
}

TEST(Png, WindowLevel) {
  EXPECT_EQ(io::window_level(0.007, 0.0, 0.007), 255);
  EXPECT_EQ(io::window_level(0.0035, 0.0, 0.007), 128);
  EXPECT_EQ(io::window_level(-1.0, 0.0, 0.007), 0);
  EXPECT_EQ(io::window_level(1.0, 0.0, 0.007), 255);
}

TEST(Png, RoundTrip) {
  const auto dir = scratch("png");
  Image img({3, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = 0.007 * static_cast<double>(i) / 11.0;
  io::write_png_gray(dir / "x.png", img, 0.0, 0.007);
  const auto back = io::read_png_gray(dir / "x.png");
  ASSERT_EQ(back.height, 3u);
  ASSERT_EQ(back.width, 4u);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(back.pixels[i], io::window_level(img[i], 0.0, 0.007));
}

TEST(Params, RoundTrip) {
  const auto dir = scratch("params");
  DenoiserArch arch;
  arch.width0 = 4;
  arch.width1 = 6;
  DenoiserNet<float> a(arch, 1), b(arch, 2);
  io::write_params(dir / "net.params", a.params());
  io::read_params(dir / "net.params", b.params());
  auto ib = b.params().begin();
  for (const auto& p : a.params()) EXPECT_EQ(p.value, (ib++)->value) << p.name;

  arch.width1 = 7;
  DenoiserNet<float> c(arch, 3);
  EXPECT_THROW(io::read_params(dir / "net.params", c.params()), IoError);
}

TEST(Csv, NumbersAndHeader) {
  EXPECT_EQ(io::csv_number(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(io::csv_number(0.5), "0.5");
  EXPECT_EQ(std::stod(io::csv_number(0.1)), 0.1);
  const auto dir = scratch("csv");
  {
    io::CsvWriter w(dir / "a.csv", {"x", "y"});
    w.row({"1", "2"});
  }
  {
    io::CsvWriter w(dir / "a.csv", {"x", "y"});
    w.row({"3", "4"});
  }
  EXPECT_EQ(io::read_bytes(dir / "a.csv"), "x,y\n1,2\n3,4\n");
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, BadArgumentsAreConfigErrors) {
  const auto dir = scratch("cli_args");
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("simulate"), 2);
  EXPECT_EQ(run_cli("reconstruct --in x --out y --algorithm fbp"), 2);
  EXPECT_EQ(run_cli("simulate --config " + (dir / "missing.json").string() + " --out " + dir.string()), 2);
  io::write_bytes(dir / "bad.json", "{\"seed\": }");
  EXPECT_EQ(run_cli("simulate --config " + (dir / "bad.json").string() + " --out " + dir.string()), 2);
  EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, MissingSimulationIsAnIoError) {
  const auto dir = scratch("cli_io");
  EXPECT_EQ(run_cli("reconstruct --config " + kSmoke + " --in " + (dir / "nothing").string() +
                    " --out " + (dir / "r").string()),
            1);
}

TEST(Cli, SimulateWritesBinsTruthAndManifest) {
  const auto dir = scratch("cli_sim");
  ASSERT_EQ(run_cli("simulate --config " + kSmoke + " --out " + (dir / "a").string()), 0);
  // Five sinograms and five ground-truth images, each with a JSON sidecar,
  // plus the manifest.
  EXPECT_EQ(count_files(dir / "a"), 21u);
  for (std::size_t b = 0; b < 5; ++b) {
    EXPECT_TRUE(fs::exists(dir / "a" / pipeline::bin_file("sino", b)));
    EXPECT_TRUE(fs::exists(dir / "a" / pipeline::bin_file("truth", b)));
  }
  const auto m = io::load_manifest(dir / "a");
  EXPECT_EQ(m["bins"], 5);
  EXPECT_EQ(m["seeds"]["master"], 20240521u);

  ASSERT_EQ(run_cli("simulate --config " + kSmoke + " --out " + (dir / "b").string()), 0);
  EXPECT_EQ(io::file_sha256(dir / "a" / "sino_bin2.f32"), io::file_sha256(dir / "b" / "sino_bin2.f32"));
  EXPECT_EQ(io::read_bytes(dir / "a" / io::kManifestName), io::read_bytes(dir / "b" / io::kManifestName));

  ASSERT_EQ(run_cli("simulate --config " + kSmoke + " --seed 5 --out " + (dir / "c").string()), 0);
  EXPECT_NE(io::file_sha256(dir / "a" / "sino_bin2.f32"), io::file_sha256(dir / "c" / "sino_bin2.f32"));
}

TEST(Cli, NoiseOffStoresIdealProjections) {
  const auto dir = scratch("cli_clean");
  auto cfg = parse_run_config(io::read_bytes(kSmoke));
  cfg.noise.enabled = false;
  io::write_json(dir / "clean.json", to_json(cfg));
  ASSERT_EQ(run_cli("simulate --config " + (dir / "clean.json").string() + " --out " + (dir / "s").string()), 0);
  const auto geom = cfg.geometry.build();
  const SystemMatrix a(geom);
  const auto truth = io::read_array(dir / "s" / "truth_bin0.f32").data;
  const auto sino = io::read_array(dir / "s" / "sino_bin0.f32").data;
  const auto expect = a.forward(truth);
  for (std::size_t i = 0; i < sino.size(); ++i) EXPECT_NEAR(sino[i], expect[i], 1e-5 * (1.0 + std::abs(expect[i])));
  EXPECT_EQ(io::read_array(dir / "s" / "sino_bin0.f32").meta["noise"], "off");
}

TEST(Cli, GeometryMismatchIsAConfigError) {
  const auto dir = scratch("cli_geom");
  ASSERT_EQ(run_cli("simulate --config " + kSmoke + " --out " + (dir / "s").string()), 0);
  auto cfg = parse_run_config(io::read_bytes(kSmoke));
  cfg.geometry.views = 40;
  io::write_json(dir / "other.json", to_json(cfg));
  EXPECT_EQ(run_cli("reconstruct --config " + (dir / "other.json").string() + " --in " +
                    (dir / "s").string() + " --out " + (dir / "r").string() + " --algorithm sirt"),
            2);
}

TEST(Cli, TamperedSimulationIsRejected) {
  const auto dir = scratch("cli_tamper");
  ASSERT_EQ(run_cli("simulate --config " + kSmoke + " --out " + (dir / "s").string()), 0);
  {
    std::fstream f(dir / "s" / "sino_bin1.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(17);
    f.put('\x7f');
  }
  EXPECT_EQ(run_cli("reconstruct --config " + kSmoke + " --in " + (dir / "s").string() + " --out " +
                    (dir / "r").string() + " --algorithm sirt"),
            1);
}

TEST(Cli, ReconstructScoreAndExport) {
  const auto dir = scratch("cli_full");
  const auto sim = (dir / "sim").string();
  ASSERT_EQ(run_cli("simulate --config " + kSmoke + " --out " + sim), 0);
  std::string dirs;
  for (const auto& alg : algorithm_names()) {
    const auto out = (dir / ("r_" + alg)).string();
    ASSERT_EQ(run_cli("reconstruct --config " + kSmoke + " --in " + sim + " --algorithm " + alg + " --out " + out), 0)
        << alg;
    const auto m = io::load_manifest(out);
    EXPECT_EQ(m["method"], alg);
    EXPECT_TRUE(fs::exists(fs::path(out) / "residuals.csv"));
    const bool learned = alg == "s2s" || alg == "n2n-post";
    EXPECT_EQ(fs::exists(fs::path(out) / "losses.csv"), learned) << alg;
    EXPECT_EQ(fs::exists(fs::path(out) / "denoiser.params"), learned) << alg;
    dirs += " " + out;
  }
  const auto csv = dir / "metrics.csv";
  ASSERT_EQ(run_cli("metrics --config " + kSmoke + " --truth " + sim + " --in" + dirs + " --out " + csv.string()), 0);
  std::ifstream in(csv);
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "method,bin,blur_fraction,psnr,rmse");
  while (std::getline(in, line)) rows += !line.empty();
  EXPECT_EQ(rows, 4u * 5u);

  const auto png = dir / "s2s_bin0.png";
  ASSERT_EQ(run_cli("export-png --in " + (dir / "r_s2s" / "recon_bin0.f32").string() +
                    " --window 0 0.07 --out " + png.string()),
            0);
  const auto img = io::read_png_gray(png);
  EXPECT_EQ(img.height, 32u);
  EXPECT_EQ(run_cli("export-png --in " + (dir / "r_s2s" / "recon_bin0.f32").string() +
                    " --window 1 0 --out " + png.string()),
            2);
}
