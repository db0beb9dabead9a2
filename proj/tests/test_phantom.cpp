#include <gtest/gtest.h>

#include <deque>
#include <filesystem>

#include "polyseg/phantom.hpp"

using namespace polyseg;
namespace fs = std::filesystem;

namespace {

const LabelHierarchy& H = LabelHierarchy::lung();

PhantomConfig config(double cons, double gg, std::uint64_t seed, Dims3 dims = {48, 48, 48}) {
  PhantomConfig c;
  c.dims = dims;
  c.consolidation_fraction = cons;
  c.ground_glass_fraction = gg;
  c.lobe_planes = true;
  c.seed = seed;
  return c;
}

// Fraction of lung voxels at or above -100 HU, counted directly.
double dense_fraction(const Phantom& p) {
  std::size_t lung = 0, dense = 0;
  for (std::size_t i = 0; i < p.ct.size(); ++i) {
    if (p.label.vol()[i] == 0.0f) continue;
    ++lung;
    dense += p.ct[i] >= -100.0f;
  }
  return static_cast<double>(dense) / static_cast<double>(lung);
}

// Number of 6-connected components of voxels equal to `value`.
std::size_t components(const Volume& v, float value) {
  const auto& d = v.dims();
  std::vector<bool> seen(v.size(), false);
  std::size_t count = 0;
  for (std::size_t s = 0; s < v.size(); ++s) {
    if (seen[s] || v[s] != value) continue;
    ++count;
    std::deque<std::size_t> q{s};
    seen[s] = true;
    while (!q.empty()) {
      const std::size_t i = q.front();
      q.pop_front();
      const std::size_t z = i / (d[1] * d[2]), y = (i / d[2]) % d[1], x = i % d[2];
      auto visit = [&](std::size_t zz, std::size_t yy, std::size_t xx) {
        const std::size_t j = v.index(zz, yy, xx);
        if (!seen[j] && v[j] == value) {
          seen[j] = true;
          q.push_back(j);
        }
      };
      if (z > 0) visit(z - 1, y, x);
      if (z + 1 < d[0]) visit(z + 1, y, x);
      if (y > 0) visit(z, y - 1, x);
      if (y + 1 < d[1]) visit(z, y + 1, x);
      if (x > 0) visit(z, y, x - 1);
      if (x + 1 < d[2]) visit(z, y, x + 1);
    }
  }
  return count;
}

}  // namespace

TEST(Phantom, NoConsolidationMeansNoDenseLung) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto p = gen_phantom(config(0.0, 0.0, seed), H);
    EXPECT_EQ(dense_fraction(p), 0.0);
    for (std::size_t i = 0; i < p.ct.size(); ++i) {
      if (p.label.vol()[i] != 0.0f) {
        EXPECT_LE(p.ct[i], -600.0f);
        EXPECT_GE(p.ct[i], -1000.0f);
      }
    }
  }
}

TEST(Phantom, RequestedConsolidationIsMeasured) {
  for (std::uint64_t seed : {4u, 5u, 6u, 7u}) {
    const double f = dense_fraction(gen_phantom(config(0.2, 0.1, seed), H));
    EXPECT_GE(f, 0.15);
    EXPECT_LE(f, 0.25);
  }
}

TEST(Phantom, GroundGlassStaysInBand) {
  const auto p = gen_phantom(config(0.0, 0.3, 8), H);
  std::size_t lung = 0, gg = 0;
  for (std::size_t i = 0; i < p.ct.size(); ++i) {
    if (p.label.vol()[i] == 0.0f) continue;
    ++lung;
    gg += p.ct[i] >= -500.0f && p.ct[i] < -100.0f;
  }
  EXPECT_NEAR(static_cast<double>(gg) / static_cast<double>(lung), 0.3, 0.01);
}

TEST(Phantom, SameSeedIsBitwiseIdentical) {
  const auto a = gen_phantom(config(0.2, 0.1, 9), H);
  const auto b = gen_phantom(config(0.2, 0.1, 9), H);
  EXPECT_EQ(a.ct.values(), b.ct.values());
  EXPECT_EQ(a.label.vol().values(), b.label.vol().values());
  EXPECT_EQ(a.lobes->values(), b.lobes->values());
  const auto c = gen_phantom(config(0.2, 0.1, 10), H);
  EXPECT_NE(a.ct.values(), c.ct.values());
}

TEST(Phantom, LungsAreDisjointAndConnected) {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    const auto p = gen_phantom(config(0.1, 0.1, seed), H);
    const Volume& lab = p.label.vol();
    std::size_t left = 0, right = 0;
    for (float v : lab.data()) {
      left += v == 1.0f;
      right += v == 2.0f;
    }
    EXPECT_GT(left, 0u);
    EXPECT_GT(right, 0u);
    EXPECT_EQ(components(lab, 1.0f), 1u) << seed;
    EXPECT_EQ(components(lab, 2.0f), 1u) << seed;
    // Left lung sits at higher x than right lung.
    double lx = 0, rx = 0;
    for (std::size_t i = 0; i < lab.size(); ++i) {
      if (lab[i] == 1.0f) lx += static_cast<double>(i % lab.dims()[2]);
      if (lab[i] == 2.0f) rx += static_cast<double>(i % lab.dims()[2]);
    }
    EXPECT_GT(lx / static_cast<double>(left), rx / static_cast<double>(right));
  }
}

TEST(Phantom, LobesPartitionEachLung) {
  const auto p = gen_phantom(config(0.1, 0.0, 16), H);
  ASSERT_TRUE(p.lobes.has_value());
  const Volume& lab = p.label.vol();
  std::array<std::size_t, 6> counts{};
  for (std::size_t i = 0; i < lab.size(); ++i) {
    const int lobe = static_cast<int>((*p.lobes)[i]);
    const int side = static_cast<int>(lab[i]);
    ASSERT_EQ(lobe == 0, side == 0) << i;
    if (side == 2) EXPECT_TRUE(lobe >= 1 && lobe <= 3);
    if (side == 1) EXPECT_TRUE(lobe == 4 || lobe == 5);
    counts[static_cast<std::size_t>(lobe)]++;
  }
  for (int l = 1; l <= 5; ++l) EXPECT_GT(counts[static_cast<std::size_t>(l)], 0u) << l;
}

TEST(Phantom, GenericLevelUsesLungLabel) {
  auto c = config(0.1, 0.0, 17);
  c.label_level = LabelLevel::generic;
  const auto p = gen_phantom(c, H);
  EXPECT_EQ(p.label.level(), LabelLevel::generic);
  for (float v : p.label.vol().data()) EXPECT_TRUE(v == 0.0f || v == 3.0f);
}

TEST(Phantom, RejectsInvalidConfig) {
  EXPECT_THROW(gen_phantom(config(0.6, 0.5, 1), H), UsageError);
  EXPECT_THROW(gen_phantom(config(0.1, 0.0, 1, {4, 48, 48}), H), UsageError);
}

TEST(Dataset, CountsAndFlags) {
  const fs::path dir = fs::path(testing::TempDir()) / "polyseg_dataset";
  fs::remove_all(dir);
  auto base = config(0.3, 0.1, 0, {16, 16, 16});
  const auto entries = gen_dataset({10, 10, 5}, base, 42, dir, H);
  ASSERT_EQ(entries.size(), 25u);
  std::size_t eval_only = 0, generic = 0;
  for (const auto& e : entries) {
    eval_only += e.eval_only;
    generic += e.level == LabelLevel::generic;
    EXPECT_EQ(e.consolidated, e.id.rfind("consol_", 0) == 0);
  }
  EXPECT_EQ(eval_only, 5u);
  EXPECT_EQ(generic, 10u);

  const auto loaded = load_manifest(dir / "manifest.json");
  ASSERT_EQ(loaded.size(), 25u);
  for (const auto& e : loaded) {
    const LabelVolume y(read_volume(e.label), e.level, H);
    EXPECT_EQ(y.level(), e.level);
    EXPECT_TRUE(read_volume(e.ct).same_grid(y.vol()));
  }
}

TEST(Dataset, EmptyRequestWritesEmptyManifest) {
  const fs::path dir = fs::path(testing::TempDir()) / "polyseg_dataset_empty";
  fs::remove_all(dir);
  const auto entries = gen_dataset({0, 0, 0}, config(0.2, 0.0, 0, {16, 16, 16}), 1, dir, H);
  EXPECT_TRUE(entries.empty());
  std::size_t files = 0;
  for (const auto& f : fs::directory_iterator(dir)) files += f.path().filename() != "manifest.json";
  EXPECT_EQ(files, 0u);
  EXPECT_TRUE(load_manifest(dir / "manifest.json").empty());
}
