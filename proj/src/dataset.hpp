// SPDX-License-Identifier: Apache-2.0
/**
 * @file   dataset.hpp
 * @brief  Procedural desk-scale image datasets, PFM image files and the
 *         line-oriented dataset manifest.
 */
#ifndef DFKD_DATASET_HPP_
#define DFKD_DATASET_HPP_

#include "tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dfkd {

struct LabeledImages {
  Tensor images; // [N,C,H,W]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  /// Items at `idx` stacked as [len(idx),C,H,W].
  Tensor gather(const std::vector<std::size_t> &idx) const;
  std::vector<int> gather_labels(const std::vector<std::size_t> &idx) const;
  std::vector<std::size_t> class_counts() const;
};

/// Stroke shapes (bars, rings, crosses, ...) rendered in a chosen style.
/// "photo" is the style classifiers are trained on; "sketch" is a
/// thinner, low-contrast style; "mixed" draws each item from either style
/// and is what the generator is pretrained on.
struct ShapesSpec {
  std::size_t num_classes = 2;
  std::size_t image_size = 16;
  std::size_t per_class = 100;
  std::string domain = "photo";
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMaxShapeClasses = 10;

LabeledImages make_shapes(const ShapesSpec &spec);

/// Uniform(-1, 1) images with no meaningful labels (all zero).
LabeledImages make_uniform_noise(std::size_t count, std::size_t channels,
                                 std::size_t size, std::uint64_t seed);

/// Portable float map (float32, little-endian). 1 or 3 channels.
void write_pfm(const std::filesystem::path &path, const Tensor &image);
Tensor read_pfm(const std::filesystem::path &path);

/// 8-bit binary PGM (P5) of a [H,W] (or [1,H,W]) tensor mapped from
/// [lo, hi] to [0, 255].
void write_pgm(const std::filesystem::path &path, const Tensor &image,
               double lo, double hi);

/// One line of the dataset manifest.
struct ManifestRecord {
  std::string path; // relative to the manifest directory
  int label = 0;
  int harvest_t = -1;
  int round = -1;
  double teacher_confidence = -1.0;
  bool lca_applied = false;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::string config_hash;
  bool valid = true;
  std::vector<ManifestRecord> records;

  std::vector<std::size_t> class_counts(std::size_t num_classes) const;
};

/// Writes `<dir>/manifest.tsv` atomically (temp file + rename).
void write_manifest(const std::filesystem::path &dir, const Manifest &m);
Manifest read_manifest(const std::filesystem::path &dir);
/// Marks an existing (possibly partial) manifest as invalid.
void invalidate_manifest(const std::filesystem::path &dir,
                         const std::string &config_hash);

/// Writes every item as a PFM file plus a manifest.
void save_labeled_images(const std::filesystem::path &dir,
                         const LabeledImages &data,
                         const std::string &config_hash);
/// Loads every record of a valid manifest; throws on invalid manifests.
LabeledImages load_labeled_images(const std::filesystem::path &dir,
                                  std::size_t num_classes);

} // namespace dfkd

#endif // DFKD_DATASET_HPP_
