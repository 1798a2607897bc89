#pragma once

// Dataset representation and the line-oriented manifest format:
//
//   # comment
//   split <tag>
//   sample <id> <category> <gt-path> <view-path> [<view-path> ...]
//
// Paths are relative to the manifest's directory. Ids must be unique and
// every referenced file must exist when the manifest is read.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "voxfuse/binvox.hpp"
#include "voxfuse/common.hpp"
#include "voxfuse/image.hpp"
#include "voxfuse/voxel.hpp"

namespace voxfuse {

template <Scalar T>
struct Sample {
  std::string id;
  std::string category;
  std::vector<Tensor<T>> views;  // [3, H, W] each, values in [0, 1]
  BinaryGrid gt;
};

struct ManifestRecord {
  std::string id;
  std::string category;
  std::string gt_path;
  std::vector<std::string> view_paths;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::string split_tag;
  std::vector<ManifestRecord> records;
};

inline void write_manifest(const DatasetManifest& m,
                           const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("manifest: cannot open '" + path.string() + "'");
  out << "# voxfuse-manifest v1\n";
  if (!m.split_tag.empty()) out << "split " << m.split_tag << "\n";
  for (const auto& r : m.records) {
    out << "sample " << r.id << " " << r.category << " " << r.gt_path;
    for (const auto& v : r.view_paths) out << " " << v;
    out << "\n";
  }
  if (!out) throw IoError("manifest: short write to '" + path.string() + "'");
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open '" + path.string() + "'");
  DatasetManifest m;
  m.root = path.parent_path();
  std::map<std::string, bool> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "split") {
      ls >> m.split_tag;
    } else if (word == "sample") {
      ManifestRecord r;
      if (!(ls >> r.id >> r.category >> r.gt_path)) {
        throw DataError("manifest: malformed sample at line " +
                        std::to_string(lineno));
      }
      std::string vp;
      while (ls >> vp) r.view_paths.push_back(vp);
      if (r.view_paths.empty()) {
        throw DataError("manifest: sample '" + r.id + "' has no views");
      }
      if (seen.count(r.id)) {
        throw DataError("manifest: duplicate sample id '" + r.id + "'");
      }
      seen[r.id] = true;
      if (!std::filesystem::exists(m.root / r.gt_path)) {
        throw DataError("manifest: missing voxel file '" + r.gt_path + "'");
      }
      for (const auto& v : r.view_paths) {
        if (!std::filesystem::exists(m.root / v)) {
          throw DataError("manifest: missing view file '" + v + "'");
        }
      }
      m.records.push_back(std::move(r));
    } else {
      throw DataError("manifest: unknown directive '" + word + "' at line " +
                      std::to_string(lineno));
    }
  }
  return m;
}

// Deterministic, disjoint, exhaustive split, stratified per category by
// largest-remainder allocation (per-category proportions within one sample).
inline std::array<DatasetManifest, 3> split_dataset(
    const DatasetManifest& m, const std::array<double, 3>& ratios,
    std::uint64_t seed) {
  double sum = 0;
  for (double r : ratios) {
    if (r < 0) throw ConfigError("split: ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split: ratios must sum to 1, got " + std::to_string(sum));
  }

  std::map<std::string, std::vector<const ManifestRecord*>> by_cat;
  for (const auto& r : m.records) by_cat[r.category].push_back(&r);

  static const char* kTags[3] = {"train", "val", "test"};
  std::array<DatasetManifest, 3> out;
  for (int i = 0; i < 3; ++i) {
    out[i].root = m.root;
    out[i].split_tag = kTags[i];
  }

  Rng rng(seed);
  for (auto& [cat, recs] : by_cat) {
    for (std::size_t i = recs.size(); i > 1; --i) {
      std::swap(recs[i - 1], recs[rng.uniform_int(0, std::int64_t(i) - 1)]);
    }
    const std::size_t n = recs.size();
    std::array<std::size_t, 3> take{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
      const double quota = double(n) * ratios[i];
      take[i] = static_cast<std::size_t>(quota);
      frac[i] = quota - double(take[i]);
      assigned += take[i];
    }
    // largest remainder; ties go to the globally smallest split so leftover
    // samples alternate across categories
    while (assigned < n) {
      int best = -1;
      for (int i = 0; i < 3; ++i) {
        if (frac[i] < 0) continue;
        if (best < 0 || frac[i] > frac[best] + 1e-12 ||
            (std::abs(frac[i] - frac[best]) <= 1e-12 &&
             out[i].records.size() + take[i] <
                 out[best].records.size() + take[best])) {
          best = i;
        }
      }
      ++take[best];
      frac[best] = -1;
      ++assigned;
    }
    std::size_t k = 0;
    for (int i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < take[i]; ++j) out[i].records.push_back(*recs[k++]);
    }
  }
  return out;
}

template <Scalar T>
Sample<T> load_sample(const DatasetManifest& m, const ManifestRecord& r,
                      int image_side) {
  Sample<T> s;
  s.id = r.id;
  s.category = r.category;
  s.gt = read_binvox(m.root / r.gt_path);
  for (const auto& v : r.view_paths) {
    s.views.push_back(load_image<T>(m.root / v, image_side));
  }
  return s;
}

template <Scalar T>
std::vector<Sample<T>> load_all_samples(const DatasetManifest& m, int image_side) {
  std::vector<Sample<T>> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back(load_sample<T>(m, r, image_side));
  return out;
}

}  // namespace voxfuse
