#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "colorcaps/colorspace.hpp"
#include "colorcaps/netpbm.hpp"
#include "colorcaps/patches.hpp"
#include "colorcaps/rng.hpp"
#include "colorcaps/tensor.hpp"

namespace colorcaps {

// Manifest-driven training-pair construction. Manifest schema:
//   {"records": [{"color": "img.ppm", "gray": "img.pgm" | null}], "n": 9, "seed": 42}
// Record paths are resolved relative to the manifest file's directory.

struct ManifestRecord {
  std::string color;
  std::optional<std::string> gray;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::uint64_t seed = 42;
  std::size_t n = 9;
};

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error(path + ": cannot open manifest");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path + ": manifest is not valid JSON: " + e.what());
  }

  DatasetManifest m;
  try {
    m.n = j.value("n", std::size_t{9});
    m.seed = j.value("seed", std::uint64_t{42});
    const auto dir = std::filesystem::path(path).parent_path();
    for (const auto& rec : j.at("records")) {
      ManifestRecord r;
      r.color = (dir / rec.at("color").get<std::string>()).string();
      if (rec.contains("gray") && !rec["gray"].is_null()) {
        r.gray = (dir / rec["gray"].get<std::string>()).string();
      }
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path + ": malformed manifest: " + e.what());
  }

  std::string missing;
  for (const auto& r : m.records) {
    if (!std::filesystem::exists(r.color)) missing += " " + r.color;
    if (r.gray && !std::filesystem::exists(*r.gray)) missing += " " + *r.gray;
  }
  if (!missing.empty()) throw io_error(path + ": manifest references missing files:" + missing);
  return m;
}

// One co-located grayscale / normalized-Lab patch pair.
struct PatchPair {
  TensorF gray;  // [1,n,n] in [0,1]
  TensorF lab;   // [3,n,n] in [0,1]
  std::string source;
  std::size_t grid_index = 0;
};

// Streams pairs record by record so corpora larger than memory stay
// tractable. Pair order is deterministic: records in manifest order, patches
// row-major within a record. Records whose provided grayscale image does not
// match the color image's dimensions are skipped and counted.
class PairStream {
 public:
  explicit PairStream(DatasetManifest manifest) : manifest_(std::move(manifest)) {}

  bool next(PatchPair& out) {
    while (cursor_ >= pending_.size()) {
      if (record_ >= manifest_.records.size()) return false;
      load_record(manifest_.records[record_++]);
    }
    out = pending_[cursor_++];
    return true;
  }

  std::size_t skipped() const { return skipped_; }
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  void load_record(const ManifestRecord& rec) {
    pending_.clear();
    cursor_ = 0;

    const ImageU8 color = load_image(rec.color);
    if (color.extent(0) != 3) {
      throw io_error(rec.color + ": expected a color (P6) image");
    }
    const std::size_t H = color.extent(1), W = color.extent(2);

    // Normalized Lab planes; L also serves as the grayscale fallback.
    TensorF lab({3, H, W});
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const LabPixel p = rgb_to_lab(
            RgbPixel{color.at(0, y, x), color.at(1, y, x), color.at(2, y, x)});
        const auto norm = normalize_lab(p);
        lab.at(0, y, x) = static_cast<float>(norm[0]);
        lab.at(1, y, x) = static_cast<float>(norm[1]);
        lab.at(2, y, x) = static_cast<float>(norm[2]);
      }
    }

    TensorF gray({1, H, W});
    if (rec.gray) {
      const ImageU8 g = load_image(*rec.gray);
      if (g.extent(0) != 1) throw io_error(*rec.gray + ": expected a grayscale (P5) image");
      if (g.extent(1) != H || g.extent(2) != W) {
        ++skipped_;
        return;  // record-level dimension mismatch
      }
      for (std::size_t i = 0; i < g.numel(); ++i) {
        gray.data[i] = static_cast<float>(g.data[i]) / 255.0f;
      }
    } else {
      for (std::size_t i = 0; i < H * W; ++i) gray.data[i] = lab.data[i];
    }

    const auto lab_sliced = slice_patches(lab, manifest_.n);
    const auto gray_sliced = slice_patches(gray, manifest_.n);
    const std::size_t count = lab_sliced.grid.rows * lab_sliced.grid.cols;
    const std::size_t n = manifest_.n;
    for (std::size_t p = 0; p < count; ++p) {
      PatchPair pair;
      pair.source = rec.color;
      pair.grid_index = p;
      pair.gray = TensorF({1, n, n});
      pair.lab = TensorF({3, n, n});
      std::copy_n(gray_sliced.patches.data.begin() + p * n * n, n * n, pair.gray.data.begin());
      std::copy_n(lab_sliced.patches.data.begin() + p * 3 * n * n, 3 * n * n,
                  pair.lab.data.begin());
      pending_.push_back(std::move(pair));
    }
  }

  DatasetManifest manifest_;
  std::size_t record_ = 0;
  std::vector<PatchPair> pending_;
  std::size_t cursor_ = 0;
  std::size_t skipped_ = 0;
};

inline PairStream build_pairs(const DatasetManifest& manifest) { return PairStream(manifest); }

inline std::vector<PatchPair> collect_pairs(PairStream stream, std::size_t* skipped = nullptr) {
  std::vector<PatchPair> out;
  PatchPair p;
  while (stream.next(p)) out.push_back(std::move(p));
  if (skipped) *skipped = stream.skipped();
  return out;
}

// Deterministic permutation of item indices derived from (seed, epoch),
// chunked into batches; the final short batch is kept.
inline std::vector<std::vector<std::size_t>> shuffle_batches(std::size_t count,
                                                             std::size_t batch_size,
                                                             std::uint64_t seed,
                                                             std::uint64_t epoch) {
  if (batch_size < 1) throw config_error("batch size must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng = Rng::for_epoch(seed, epoch);
  rng.shuffle(order);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < count; at += batch_size) {
    const std::size_t end = std::min(count, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

// Stacks selected pairs into network batches.
inline std::pair<TensorF, TensorF> stack_batch(const std::vector<PatchPair>& pairs,
                                               const std::vector<std::size_t>& indices,
                                               std::size_t n) {
  const std::size_t B = indices.size();
  TensorF gray({B, 1, n, n}), lab({B, 3, n, n});
  for (std::size_t b = 0; b < B; ++b) {
    const PatchPair& p = pairs.at(indices[b]);
    std::copy(p.gray.data.begin(), p.gray.data.end(), gray.data.begin() + b * n * n);
    std::copy(p.lab.data.begin(), p.lab.data.end(), lab.data.begin() + b * 3 * n * n);
  }
  return {std::move(gray), std::move(lab)};
}

}  // namespace colorcaps
