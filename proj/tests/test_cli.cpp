#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "polyseg/cli.hpp"

using namespace polyseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(testing::TempDir()) / ("polyseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_args(std::vector<std::string> args, std::string* err_text = nullptr) {
  args.insert(args.begin(), "polyseg");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream err;
  const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), err);
  if (err_text) *err_text = err.str();
  return rc;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

// Small dataset with lobes on every case: 2 clean, 2 generic, 4 eval-only.
fs::path small_dataset(const fs::path& dir) {
  write_text(dir / "gen.json", R"({"n_clean_specific": 2, "n_consol_generic": 2, "n_consol_specific": 4,
    "phantom": {"dims": [16, 16, 16], "consolidation_fraction": 0.4, "ground_glass_fraction": 0.2,
                "lobe_planes": true}, "seed": 3})");
  EXPECT_EQ(run_args({"gen", "--config", (dir / "gen.json").string(), "--out", (dir / "data").string()}), 0);
  return dir / "data" / "manifest.json";
}

}  // namespace

TEST(Cli, MissingConfigIsUsageError) {
  std::string err;
  EXPECT_EQ(run_args({"gen", "--out", "x"}, &err), 1);
  EXPECT_NE(err.find("--config"), std::string::npos);
}

TEST(Cli, NoSubcommandIsUsageError) { EXPECT_EQ(run_args({}), 1); }

TEST(Cli, TrainWithoutVariantIsUsageError) {
  const auto dir = scratch("novariant");
  write_text(dir / "cascade.json", "{}");
  std::string err;
  EXPECT_EQ(run_args({"train", "--config", (dir / "cascade.json").string(), "--manifest", "m.json", "--out",
                      (dir / "model").string()},
                     &err),
            1);
  EXPECT_NE(err.find("--variant"), std::string::npos);
  EXPECT_EQ(run_args({"train", "--config", "c", "--manifest", "m", "--out", "o", "--variant", "half"}), 1);
}

TEST(Cli, MissingManifestIsDataError) {
  const auto dir = scratch("nomanifest");
  write_text(dir / "cascade.json", "{}");
  EXPECT_EQ(run_args({"train", "--config", (dir / "cascade.json").string(), "--manifest",
                      (dir / "absent.json").string(), "--out", (dir / "m").string(), "--variant", "poly"}),
            2);
}

TEST(Cli, GenWritesManifest) {
  const auto dir = scratch("gen");
  const auto manifest = small_dataset(dir);
  ASSERT_TRUE(fs::exists(manifest));
  const auto entries = load_manifest(manifest);
  EXPECT_EQ(entries.size(), 8u);
  for (const auto& e : entries) {
    EXPECT_TRUE(fs::exists(fs::path(e.ct.string() + ".vol.raw")));
    EXPECT_TRUE(e.lobes.has_value());
  }
}

TEST(Cli, EvalOfGroundTruthIsPerfect) {
  const auto dir = scratch("eval");
  const auto manifest = small_dataset(dir);
  // A prediction directory that just holds copies of the truth.
  const auto pred = dir / "truth_pred";
  fs::create_directories(pred);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& e : load_manifest(manifest)) {
    if (!e.eval_only) continue;
    write_volume(read_volume(e.label), pred / (e.id + "_pred"));
    index.push_back({{"id", e.id}, {"prediction", e.id + "_pred"}});
  }
  std::ofstream(pred / "predictions.json") << index.dump();

  ASSERT_EQ(run_args({"eval", "--manifest", manifest.string(), "--pred", "truth=" + pred.string(), "--out",
                      (dir / "eval").string()}),
            0);
  const auto reports = cli::cmd_eval({manifest, {{"truth", pred}}, dir / "eval"});
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_EQ(reports[0].second.row("all", "dice").mean, 1.0);
  EXPECT_EQ(reports[0].second.row("all", "assd_mm").mean, 0.0);
  EXPECT_TRUE(fs::exists(dir / "eval" / "summary.csv"));
  EXPECT_TRUE(fs::exists(dir / "eval" / "eval_truth.csv"));
}

TEST(Cli, EvalRejectsMalformedPredSpec) {
  EXPECT_EQ(run_args({"eval", "--manifest", "m", "--pred", "nodir", "--out", "o"}), 1);
}

TEST(Cli, ClusterAssignsFourClusters) {
  const auto dir = scratch("cluster");
  const auto manifest = small_dataset(dir);
  ASSERT_EQ(run_args({"cluster", "--manifest", manifest.string(), "--out", (dir / "cl").string(), "--k", "4"}), 0);
  const auto r = cli::cmd_cluster({manifest, dir / "cl", 4, false});
  EXPECT_EQ(r.features.rows(), 4u);
  EXPECT_EQ(std::set<int>(r.assignment.begin(), r.assignment.end()), (std::set<int>{1, 2, 3, 4}));
  for (const char* f : {"features.csv", "assignment.csv", "phenotype_report.csv", "dendrogram.json"})
    EXPECT_TRUE(fs::exists(dir / "cl" / f)) << f;
}

TEST(Cli, TrainPredictRoundTrip) {
  const auto dir = scratch("train");
  const auto manifest = small_dataset(dir);
  write_text(dir / "cascade.json", R"({"steps": 2, "batch": 2, "seed": 4,
    "coarse_net": {"levels": 2, "base_channels": 2}, "fine_net": {"levels": 2, "base_channels": 2}})");
  ASSERT_EQ(run_args({"train", "--config", (dir / "cascade.json").string(), "--manifest", manifest.string(),
                      "--out", (dir / "model").string(), "--variant", "poly"}),
            0);
  for (const char* f : {"coarse.ckpt.json", "fine.ckpt.json", "train_log.csv", "cascade_config.json"})
    EXPECT_TRUE(fs::exists(dir / "model" / f)) << f;
  // Variant mismatch with the stored model is refused.
  EXPECT_EQ(run_args({"predict", "--model", (dir / "model").string(), "--manifest", manifest.string(), "--out",
                      (dir / "pred").string(), "--variant", "nonpoly"}),
            1);
  ASSERT_EQ(run_args({"predict", "--model", (dir / "model").string(), "--manifest", manifest.string(), "--out",
                      (dir / "pred").string(), "--variant", "poly"}),
            0);
  std::ifstream in(dir / "pred" / "predictions.json");
  EXPECT_EQ(nlohmann::json::parse(in).size(), 4u);
}
