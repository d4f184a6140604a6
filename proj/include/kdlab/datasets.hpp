#pragma once

// Deterministic data sources. Every function that shuffles or samples takes
// an explicit seed.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdlab/autodiff.hpp"

namespace kdlab::data {

struct Dataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> features;  // n x dim, row-major
  std::vector<int> labels;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
  Dataset subset(std::span<const std::size_t> indices) const;
  ad::Tensor batch(std::span<const std::size_t> indices) const;
  ad::Tensor all_features() const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;
};

// k isotropic Gaussians (stddev sigma) with seed-determined centers at
// pairwise distance >= separation.
Dataset make_blobs(std::size_t k, std::size_t dim, std::size_t n_per_class, double separation,
                   std::uint64_t seed, double sigma = 1.0);

// k classes, each the union of clusters_per_class blobs; cluster c belongs to
// class c mod k. With one cluster per class this is make_blobs.
Dataset make_blob_mixture(std::size_t k, std::size_t clusters_per_class, std::size_t dim, std::size_t n_per_cluster,
                          double separation, std::uint64_t seed, double sigma = 1.0);

// Centers drawn by make_blobs for the same arguments.
std::vector<double> blob_centers(std::size_t k, std::size_t dim, double separation, std::uint64_t seed);

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Uncompressed IDX pair (magic 0x00000803 images, 0x00000801 labels).
// Pixels are scaled to [0, 1]; standardization happens in prepare_splits.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               std::span<const std::uint8_t> pixels, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> label_bytes);

// Class-stratified subsample of n items; per-class counts within 1 of the
// proportional share.
Dataset subsample(const Dataset& ds, std::size_t n, std::uint64_t seed);

struct Split {
  Dataset train;
  Dataset test;
};

// Class-stratified: round(train_fraction * n_c) items of class c go to train.
Split train_test_split(const Dataset& ds, double train_fraction, std::uint64_t seed);
// Index form of train_test_split, for disjointness checks.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_indices(const Dataset& ds,
                                                                                 double train_fraction,
                                                                                 std::uint64_t seed);

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& train);
  Dataset apply(const Dataset& ds) const;
};

// Split, then standardize both halves with statistics of the train half.
Split prepare_splits(const Dataset& ds, double train_fraction, std::uint64_t seed);

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

}  // namespace kdlab::data
