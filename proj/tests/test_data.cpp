#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "voxfuse/binvox.hpp"
#include "voxfuse/dataset.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/synth.hpp"

using namespace voxfuse;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "voxfuse_data_test";
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// exact slab-method ray/axis-aligned-cube intersection
bool ray_hits_cube(const std::array<double, 3>& o, const std::array<double, 3>& d,
                   int cx, int cy, int cz) {
  double t0 = 0.0, t1 = 1e18;
  const double lo[3] = {double(cx), double(cy), double(cz)};
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < lo[i] || o[i] > lo[i] + 1.0) return false;
    } else {
      double a = (lo[i] - o[i]) / d[i];
      double b = (lo[i] + 1.0 - o[i]) / d[i];
      if (a > b) std::swap(a, b);
      t0 = std::max(t0, a);
      t1 = std::min(t1, b);
    }
  }
  return t0 <= t1;
}

}  // namespace

TEST_CASE("binvox: write/read round trip is byte identical") {
  Rng rng(42);
  BinaryGrid g(32);
  for (auto& c : g.cells) c = rng.uniform() < 0.3;
  const auto path = temp_dir() / "rt.binvox";
  write_binvox(g, path);
  auto loaded = read_binvox(path, 32);
  CHECK(loaded == g);

  const auto path2 = temp_dir() / "rt2.binvox";
  write_binvox(loaded, path2);
  CHECK(file_bytes(path) == file_bytes(path2));
}

TEST_CASE("binvox: hand-encoded RLE for a one-corner 2^3 grid") {
  BinaryGrid g(2);
  g.set(0, 0, 0, true);  // linear index 0
  const double tr[3] = {0, 0, 0};
  const std::string bytes = encode_binvox(g, tr, 1.0);
  const std::string header = "#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n";
  REQUIRE(bytes.rfind(header, 0) == 0);
  const std::string payload = bytes.substr(header.size());
  // two runs: (1,1) then (0,7)
  REQUIRE(payload.size() == 4);
  CHECK(int(payload[0]) == 1);
  CHECK(int(payload[1]) == 1);
  CHECK(int(payload[2]) == 0);
  CHECK(int(payload[3]) == 7);
}

TEST_CASE("binvox: malformed files raise distinct errors") {
  const auto dir = temp_dir();

  SUBCASE("wrong dimensions") {
    std::ofstream f(dir / "dims.binvox", std::ios::binary);
    f << "#binvox 1\ndim 32 32 31\ntranslate 0 0 0\nscale 1\ndata\n";
    f.close();
    CHECK_THROWS_WITH_AS(read_binvox(dir / "dims.binvox"),
                         doctest::Contains("non-cubic"), DataError);
  }
  SUBCASE("resolution contract") {
    BinaryGrid g(16);
    write_binvox(g, dir / "r16.binvox");
    CHECK_THROWS_WITH_AS(read_binvox(dir / "r16.binvox", 32),
                         doctest::Contains("expected 32"), DataError);
  }
  SUBCASE("bad magic") {
    std::ofstream f(dir / "magic.binvox", std::ios::binary);
    f << "#notvox 1\ndim 2 2 2\ndata\n";
    f.close();
    CHECK_THROWS_WITH_AS(read_binvox(dir / "magic.binvox"),
                         doctest::Contains("bad magic"), DataError);
  }
  SUBCASE("truncated run stream") {
    std::ofstream f(dir / "short.binvox", std::ios::binary);
    f << "#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n";
    f.put(1);
    f.put(3);  // only 3 of 8 cells
    f.close();
    CHECK_THROWS_WITH_AS(read_binvox(dir / "short.binvox"),
                         doctest::Contains("truncated"), DataError);
  }
  SUBCASE("overrunning run stream") {
    std::ofstream f(dir / "over.binvox", std::ios::binary);
    f << "#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n";
    f.put(1);
    f.put(9);  // 9 cells into an 8-cell grid
    f.close();
    CHECK_THROWS_WITH_AS(read_binvox(dir / "over.binvox"),
                         doctest::Contains("overruns"), DataError);
  }
  SUBCASE("run value out of domain") {
    std::ofstream f(dir / "val.binvox", std::ios::binary);
    f << "#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n";
    f.put(2);
    f.put(8);
    f.close();
    CHECK_THROWS_AS(read_binvox(dir / "val.binvox"), DataError);
  }
}

TEST_CASE("ppm: solid mid-gray round trips to ~128/255") {
  auto img = Tensor<float>::full({3, 8, 8}, 128.0f / 255.0f);
  const auto path = temp_dir() / "gray.ppm";
  write_ppm(img, path);
  auto back = read_ppm<float>(path);
  for (float v : back.values()) CHECK(v == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("ppm: exact-size load is quantization-exact; resize hits target") {
  Rng rng(7);
  auto img = Tensor<float>::zeros({3, 32, 32});
  for (auto& v : img.values()) v = float(rng.uniform());
  const auto path = temp_dir() / "rand.ppm";
  write_ppm(img, path);
  auto same = load_image<float>(path, 32);
  double worst = 0;
  for (std::int64_t i = 0; i < img.size(); ++i)
    worst = std::max(worst, std::abs(double(img.ptr()[i]) - same.ptr()[i]));
  CHECK(worst <= 1.0 / 255.0 + 1e-9);

  auto wide = Tensor<float>::full({3, 50, 100}, 0.25f);
  const auto wpath = temp_dir() / "wide.ppm";
  write_ppm(wide, wpath);
  auto resized = load_image<float>(wpath, 32);
  CHECK(resized.shape() == std::vector<int>{3, 32, 32});
  for (float v : resized.values()) CHECK(v == doctest::Approx(0.25).epsilon(0.01));
}

TEST_CASE("ppm: unsupported and corrupt headers") {
  const auto dir = temp_dir();
  {
    std::ofstream f(dir / "p3.ppm", std::ios::binary);
    f << "P3\n2 2\n255\n0 0 0\n";
  }
  CHECK_THROWS_WITH_AS(read_ppm<float>(dir / "p3.ppm"),
                       doctest::Contains("unsupported format"), DataError);
  {
    std::ofstream f(dir / "bad.ppm", std::ios::binary);
    f << "P6\n-3 zz\n255\n";
  }
  CHECK_THROWS_AS(read_ppm<float>(dir / "bad.ppm"), DataError);
  {
    std::ofstream f(dir / "m16.ppm", std::ios::binary);
    f << "P6\n2 2\n65535\n";
  }
  CHECK_THROWS_WITH_AS(read_ppm<float>(dir / "m16.ppm"),
                       doctest::Contains("maxval"), DataError);
}

TEST_CASE("crop_and_rescale") {
  // two-tone image: left half 0.2, right half 0.8
  auto img = Tensor<float>::zeros({3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        img.ptr()[(c * 16 + y) * 16 + x] = x < 8 ? 0.2f : 0.8f;

  auto full = crop_and_rescale(img, 0, 0, 16, 16, 8);
  auto direct = resize_bilinear(img, 8, 8);
  CHECK(full.values() == direct.values());

  auto left = crop_and_rescale(img, 0, 0, 8, 16, 8);
  for (float v : left.values()) CHECK(v == doctest::Approx(0.2f));

  auto one = crop_and_rescale(img, 3, 3, 1, 1, 4);
  for (float v : one.values()) CHECK(v == doctest::Approx(0.2f));

  CHECK_THROWS_AS(crop_and_rescale(img, 10, 10, 8, 8, 4), BoundsError);
  CHECK_THROWS_AS(crop_and_rescale(img, -1, 0, 4, 4, 4), BoundsError);
}

TEST_CASE("synth: identical seeds give bitwise-identical samples") {
  auto a = synth_generate<float>(ShapeKind::table, 99, 3, 32, 32);
  auto b = synth_generate<float>(ShapeKind::table, 99, 3, 32, 32);
  CHECK(a.gt == b.gt);
  REQUIRE(a.views.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::memcmp(a.views[i].ptr(), b.views[i].ptr(),
                      sizeof(float) * a.views[i].size()) == 0);
  }
  auto c = synth_generate<float>(ShapeKind::table, 100, 3, 32, 32);
  CHECK_FALSE(a.gt == c.gt);
}

TEST_CASE("synth: box samples are filled cuboids") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    auto s = synth_generate<float>(ShapeKind::box, seed, 1, 16, 16);
    const auto& g = s.gt;
    int x0 = 99, x1 = -1, y0 = 99, y1 = -1, z0 = 99, z1 = -1;
    for (int x = 0; x < 16; ++x)
      for (int y = 0; y < 16; ++y)
        for (int z = 0; z < 16; ++z)
          if (g.at(x, y, z)) {
            x0 = std::min(x0, x); x1 = std::max(x1, x);
            y0 = std::min(y0, y); y1 = std::max(y1, y);
            z0 = std::min(z0, z); z1 = std::max(z1, z);
          }
    REQUIRE(x1 >= 0);
    // every cell inside the bounding box is occupied (brute-force oracle)
    for (int x = 0; x < 16; ++x)
      for (int y = 0; y < 16; ++y)
        for (int z = 0; z < 16; ++z) {
          const bool inside = x >= x0 && x <= x1 && y >= y0 && y <= y1 &&
                              z >= z0 && z <= z1;
          CHECK(g.at(x, y, z) == inside);
        }
  }
}

TEST_CASE("synth: axis view of a full grid is a fully occupied silhouette") {
  BinaryGrid full(16);
  for (auto& c : full.cells) c = 1;
  auto img = render_view<float>(full, {0, 0, 1}, 24);
  for (int p = 0; p < 24 * 24; ++p) CHECK(img.ptr()[p] == 1.0f);
}

TEST_CASE("synth: every lit pixel is backed by an occupied voxel on its ray") {
  for (auto kind : all_shape_kinds()) {
    auto s = synth_generate<double>(kind, 7, 1, 24, 16);
    // replicate the renderer's camera for the winning direction
    Rng rng(derive_seed(7, shape_kind_name(kind)));
    (void)make_shape(kind, 16, rng);  // consume the shape draws
    auto dir = random_direction(rng);

    const int R = 16, side = 24;
    const double len = std::sqrt(dir[0]*dir[0] + dir[1]*dir[1] + dir[2]*dir[2]);
    std::array<double, 3> d{dir[0]/len, dir[1]/len, dir[2]/len};
    std::array<double, 3> up = std::abs(d[1]) < 0.9 ? std::array<double,3>{0,1,0}
                                                    : std::array<double,3>{1,0,0};
    std::array<double, 3> u{up[1]*d[2]-up[2]*d[1], up[2]*d[0]-up[0]*d[2],
                            up[0]*d[1]-up[1]*d[0]};
    const double ul = std::sqrt(u[0]*u[0] + u[1]*u[1] + u[2]*u[2]);
    for (auto& e : u) e /= ul;
    std::array<double, 3> v{d[1]*u[2]-d[2]*u[1], d[2]*u[0]-d[0]*u[2],
                            d[0]*u[1]-d[1]*u[0]};
    const double cx = R / 2.0;
    const double he_u = cx * (std::abs(u[0]) + std::abs(u[1]) + std::abs(u[2]));
    const double he_v = cx * (std::abs(v[0]) + std::abs(v[1]) + std::abs(v[2]));

    std::vector<std::array<int, 3>> occupied;
    for (int x = 0; x < R; ++x)
      for (int y = 0; y < R; ++y)
        for (int z = 0; z < R; ++z)
          if (s.gt.at(x, y, z)) occupied.push_back({x, y, z});

    const double* sil = s.views[0].ptr();
    for (int py = 0; py < side; ++py) {
      const double b = ((py + 0.5) / side * 2.0 - 1.0) * he_v;
      for (int px = 0; px < side; ++px) {
        if (sil[py * side + px] <= 0) continue;
        const double a = ((px + 0.5) / side * 2.0 - 1.0) * he_u;
        std::array<double, 3> o{cx + a*u[0] + b*v[0] - R*d[0],
                                cx + a*u[1] + b*v[1] - R*d[1],
                                cx + a*u[2] + b*v[2] - R*d[2]};
        bool backed = false;
        for (const auto& cell : occupied) {
          if (ray_hits_cube(o, d, cell[0], cell[1], cell[2])) {
            backed = true;
            break;
          }
        }
        CHECK(backed);
      }
    }
  }
}

TEST_CASE("synth: jitter perturbs views but not geometry") {
  auto plain = synth_generate<float>(ShapeKind::sphere, 5, 2, 32, 32, false);
  auto jit = synth_generate<float>(ShapeKind::sphere, 5, 2, 32, 32, true);
  CHECK(plain.gt == jit.gt);
  CHECK(plain.views[0].values() != jit.views[0].values());
  for (float v : jit.views[0].values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_THROWS_AS(synth_generate<float>(ShapeKind::box, 1, 1, 32, 12), ConfigError);
  CHECK_THROWS_AS(synth_generate<float>(ShapeKind::box, 1, 0, 32, 32), ConfigError);
}

TEST_CASE("manifest: write/read round trip with file validation") {
  const auto dir = temp_dir() / "ds";
  fs::create_directories(dir / "vox");
  fs::create_directories(dir / "img");

  DatasetManifest m;
  m.root = dir;
  m.split_tag = "train";
  for (int i = 0; i < 3; ++i) {
    auto s = synth_generate<float>(ShapeKind::cross, 40 + i, 2, 16, 16);
    ManifestRecord r;
    r.id = s.id;
    r.category = s.category;
    r.gt_path = "vox/" + s.id + ".binvox";
    write_binvox(s.gt, dir / r.gt_path);
    for (std::size_t k = 0; k < s.views.size(); ++k) {
      r.view_paths.push_back("img/" + s.id + "_" + std::to_string(k) + ".ppm");
      write_ppm(s.views[k], dir / r.view_paths.back());
    }
    m.records.push_back(r);
  }
  write_manifest(m, dir / "manifest.txt");
  auto back = read_manifest(dir / "manifest.txt");
  CHECK(back.split_tag == "train");
  REQUIRE(back.records.size() == 3);
  CHECK(back.records[1].id == m.records[1].id);
  CHECK(back.records[1].view_paths == m.records[1].view_paths);

  auto sample = load_sample<float>(back, back.records[0], 16);
  CHECK(sample.views.size() == 2);
  CHECK(sample.views[0].shape() == std::vector<int>{3, 16, 16});
  CHECK(sample.gt.res == 16);

  SUBCASE("missing referenced file") {
    fs::remove(dir / m.records[2].gt_path);
    CHECK_THROWS_WITH_AS(read_manifest(dir / "manifest.txt"),
                         doctest::Contains("missing voxel file"), DataError);
  }
  SUBCASE("duplicate id") {
    auto dup = m;
    dup.records.push_back(m.records[0]);
    write_manifest(dup, dir / "dup.txt");
    CHECK_THROWS_WITH_AS(read_manifest(dir / "dup.txt"),
                         doctest::Contains("duplicate"), DataError);
  }
}

TEST_CASE("split_dataset: deterministic stratified partition") {
  DatasetManifest m;
  m.root = ".";
  const char* cats[] = {"box", "table", "sphere", "cross"};
  for (int i = 0; i < 100; ++i) {
    ManifestRecord r;
    r.id = "s" + std::to_string(i);
    r.category = cats[i % 4];
    r.gt_path = "x";
    r.view_paths = {"y"};
    m.records.push_back(r);
  }

  auto splits = split_dataset(m, {0.8, 0.1, 0.1}, 77);
  CHECK(splits[0].records.size() == 80);
  CHECK(splits[1].records.size() == 10);
  CHECK(splits[2].records.size() == 10);
  CHECK(splits[0].split_tag == "train");
  CHECK(splits[2].split_tag == "test");

  // union of splits equals the manifest (as an id set)
  std::set<std::string> all, orig;
  for (const auto& r : m.records) orig.insert(r.id);
  for (const auto& sp : splits)
    for (const auto& r : sp.records) CHECK(all.insert(r.id).second);
  CHECK(all == orig);

  // per-category proportions within one sample
  for (const auto& sp : splits) {
    std::map<std::string, int> per;
    for (const auto& r : sp.records) per[r.category]++;
    for (const auto& [cat, cnt] : per) {
      const double expect = sp.records.size() / 4.0;
      CHECK(std::abs(cnt - expect) <= 1.0);
    }
  }

  auto again = split_dataset(m, {0.8, 0.1, 0.1}, 77);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(again[i].records.size() == splits[i].records.size());
    for (std::size_t j = 0; j < again[i].records.size(); ++j)
      CHECK(again[i].records[j].id == splits[i].records[j].id);
  }

  CHECK_THROWS_AS(split_dataset(m, {0.5, 0.2, 0.2}, 1), ConfigError);
}
