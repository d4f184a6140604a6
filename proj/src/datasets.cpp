#include "kdlab/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "kdlab/io.hpp"

namespace kdlab::data {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.dim = dim;
  out.classes = classes;
  out.provenance = provenance;
  out.features.reserve(indices.size() * dim);
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
    const auto r = row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

ad::Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<double> v;
  v.reserve(indices.size() * dim);
  for (auto i : indices) {
    const auto r = row(i);
    v.insert(v.end(), r.begin(), r.end());
  }
  return ad::Tensor::constant({indices.size(), dim}, std::move(v));
}

ad::Tensor Dataset::all_features() const { return ad::Tensor::constant({size(), dim}, features); }

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> c(classes, 0);
  for (int y : labels) ++c.at(static_cast<std::size_t>(y));
  return c;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with our own index draws; std::shuffle's draw pattern is
  // implementation-defined.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// blobs

std::vector<double> blob_centers(std::size_t k, std::size_t dim, double separation, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_blobs: need at least 2 classes");
  if (dim < 1) throw std::invalid_argument("make_blobs: dim must be positive");
  if (!(separation > 0.0)) throw std::invalid_argument("make_blobs: separation must be positive");
  std::mt19937_64 rng(seed);
  // Box half-width grows until rejection sampling succeeds.
  double half = separation * std::max(1.0, std::pow(static_cast<double>(k), 1.0 / static_cast<double>(dim)));
  std::vector<double> centers;
  std::size_t failures = 0;
  while (centers.size() < k * dim) {
    std::uniform_real_distribution<double> u(-half, half);
    std::vector<double> c(dim);
    for (auto& v : c) v = u(rng);
    bool ok = true;
    for (std::size_t j = 0; ok && j < centers.size() / dim; ++j) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d2 += (c[i] - centers[j * dim + i]) * (c[i] - centers[j * dim + i]);
      ok = d2 >= separation * separation;
    }
    if (ok) {
      centers.insert(centers.end(), c.begin(), c.end());
    } else if (++failures % 256 == 0) {
      half *= 1.1;
    }
  }
  return centers;
}

Dataset make_blobs(std::size_t k, std::size_t dim, std::size_t n_per_class, double separation,
                   std::uint64_t seed, double sigma) {
  if (n_per_class < 1) throw std::invalid_argument("make_blobs: n_per_class must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("make_blobs: sigma must be positive");
  const auto centers = blob_centers(k, dim, separation, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::normal_distribution<double> noise(0.0, sigma);
  Dataset ds;
  ds.dim = dim;
  ds.classes = k;
  ds.provenance = "blobs(k=" + std::to_string(k) + ",d=" + std::to_string(dim) + ",n=" +
                  std::to_string(n_per_class) + ",sep=" + io::format_double(separation) + ",sigma=" +
                  io::format_double(sigma) + ",seed=" + std::to_string(seed) + ")";
  ds.features.reserve(k * n_per_class * dim);
  // Interleave classes so any prefix is roughly balanced.
  for (std::size_t n = 0; n < n_per_class; ++n) {
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i = 0; i < dim; ++i) ds.features.push_back(centers[c * dim + i] + noise(rng));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

Dataset make_blob_mixture(std::size_t k, std::size_t clusters_per_class, std::size_t dim, std::size_t n_per_cluster,
                          double separation, std::uint64_t seed, double sigma) {
  if (clusters_per_class < 1) throw std::invalid_argument("make_blob_mixture: clusters_per_class must be positive");
  if (k < 2) throw std::invalid_argument("make_blob_mixture: need at least 2 classes");
  Dataset ds = make_blobs(k * clusters_per_class, dim, n_per_cluster, separation, seed, sigma);
  if (clusters_per_class == 1) return ds;
  for (auto& y : ds.labels) y %= static_cast<int>(k);
  ds.classes = k;
  ds.provenance = "mixture(k=" + std::to_string(k) + ",m=" + std::to_string(clusters_per_class) + ")/" + ds.provenance;
  return ds;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& file, const char* field) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw IdxError(IdxError::Kind::Truncated, file + ": truncated while reading " + field);
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_idx(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "cannot open " + p.string());
  return in;
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  auto img = open_idx(images);
  const std::string img_name = images.string();
  const auto img_magic = read_be32(img, img_name, "magic");
  if (img_magic != kImageMagic) {
    throw IdxError(IdxError::Kind::BadMagic, img_name + ": bad image magic " + std::to_string(img_magic));
  }
  const auto n_images = read_be32(img, img_name, "item count");
  const auto rows = read_be32(img, img_name, "row count");
  const auto cols = read_be32(img, img_name, "column count");

  auto lab = open_idx(labels);
  const std::string lab_name = labels.string();
  const auto lab_magic = read_be32(lab, lab_name, "magic");
  if (lab_magic != kLabelMagic) {
    throw IdxError(IdxError::Kind::BadMagic, lab_name + ": bad label magic " + std::to_string(lab_magic));
  }
  const auto n_labels = read_be32(lab, lab_name, "item count");
  if (n_images != n_labels) {
    throw IdxError(IdxError::Kind::CountMismatch, "image count " + std::to_string(n_images) +
                                                      " does not match label count " + std::to_string(n_labels));
  }

  const std::size_t dim = std::size_t{rows} * cols;
  std::vector<unsigned char> pixels(std::size_t{n_images} * dim);
  if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()))) {
    throw IdxError(IdxError::Kind::Truncated, img_name + ": truncated pixel data");
  }
  std::vector<unsigned char> label_bytes(n_labels);
  if (!lab.read(reinterpret_cast<char*>(label_bytes.data()), static_cast<std::streamsize>(label_bytes.size()))) {
    throw IdxError(IdxError::Kind::Truncated, lab_name + ": truncated label data");
  }

  Dataset ds;
  ds.dim = dim;
  ds.features.resize(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) ds.features[i] = pixels[i] / 255.0;
  int max_label = 0;
  for (auto b : label_bytes) {
    ds.labels.push_back(b);
    max_label = std::max<int>(max_label, b);
  }
  ds.classes = static_cast<std::size_t>(max_label) + 1;
  std::uint64_t h = io::fnv1a(std::string_view(reinterpret_cast<const char*>(pixels.data()), pixels.size()));
  h = io::fnv1a(std::string_view(reinterpret_cast<const char*>(label_bytes.data()), label_bytes.size()), h);
  ds.provenance = "idx:" + io::hex_digest(h, 16);
  return ds;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               std::span<const std::uint8_t> pixels, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> label_bytes) {
  if (pixels.size() != label_bytes.size() * rows * cols) {
    throw std::invalid_argument("write_idx: pixel buffer does not match label count");
  }
  io::atomic_write(images, [&](std::ostream& out) {
    write_be32(out, kImageMagic);
    write_be32(out, static_cast<std::uint32_t>(label_bytes.size()));
    write_be32(out, static_cast<std::uint32_t>(rows));
    write_be32(out, static_cast<std::uint32_t>(cols));
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  });
  io::atomic_write(labels, [&](std::ostream& out) {
    write_be32(out, kLabelMagic);
    write_be32(out, static_cast<std::uint32_t>(label_bytes.size()));
    out.write(reinterpret_cast<const char*>(label_bytes.data()), static_cast<std::streamsize>(label_bytes.size()));
  });
}

// ---------------------------------------------------------------------------
// sampling

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);
  for (std::size_t c = 0; c < ds.classes; ++c) {
    const auto order = shuffled_indices(by_class[c].size(), seed + 7919 * (c + 1));
    std::vector<std::size_t> shuffled(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) shuffled[i] = by_class[c][order[i]];
    by_class[c] = std::move(shuffled);
  }
  return by_class;
}

}  // namespace

Dataset subsample(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) throw std::invalid_argument("subsample: asked for more items than available");
  const auto by_class = indices_by_class(ds, seed);
  const double frac = ds.size() ? static_cast<double>(n) / static_cast<double>(ds.size()) : 0.0;
  // Largest-remainder apportionment keeps every class within 1 of its share.
  std::vector<std::size_t> take(ds.classes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    const double exact = frac * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    remainders.emplace_back(exact - static_cast<double>(take[c]), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n && i < remainders.size(); ++i) {
    const auto c = remainders[i].second;
    if (take[c] < by_class[c].size()) {
      ++take[c];
      ++assigned;
    }
  }
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
  }
  std::sort(chosen.begin(), chosen.end());
  return ds.subset(chosen);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_indices(const Dataset& ds,
                                                                                 double train_fraction,
                                                                                 std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw std::invalid_argument("train_test_split: fraction must be in [0, 1]");
  }
  const auto by_class = indices_by_class(ds, seed);
  std::vector<std::size_t> train, test;
  for (const auto& members : by_class) {
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(members.size())));
    train.insert(train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.insert(test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

Split train_test_split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  auto [train, test] = stratified_indices(ds, train_fraction, seed);
  return {ds.subset(train), ds.subset(test)};
}

Standardizer Standardizer::fit(const Dataset& train) {
  if (train.size() == 0) throw std::invalid_argument("Standardizer: empty training set");
  Standardizer s{std::vector<double>(train.dim, 0.0), std::vector<double>(train.dim, 0.0)};
  const double n = static_cast<double>(train.size());
  for (std::size_t r = 0; r < train.size(); ++r) {
    for (std::size_t i = 0; i < train.dim; ++i) s.mean[i] += train.features[r * train.dim + i];
  }
  for (auto& m : s.mean) m /= n;
  for (std::size_t r = 0; r < train.size(); ++r) {
    for (std::size_t i = 0; i < train.dim; ++i) {
      const double d = train.features[r * train.dim + i] - s.mean[i];
      s.stddev[i] += d * d;
    }
  }
  for (auto& v : s.stddev) {
    v = std::sqrt(v / n);
    if (v < 1e-12) v = 1.0;  // constant column
  }
  return s;
}

Dataset Standardizer::apply(const Dataset& ds) const {
  if (ds.dim != mean.size()) throw std::invalid_argument("Standardizer: dimension mismatch");
  Dataset out = ds;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t i = 0; i < ds.dim; ++i) {
      auto& v = out.features[r * ds.dim + i];
      v = (v - mean[i]) / stddev[i];
    }
  }
  return out;
}

Split prepare_splits(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  auto split = train_test_split(ds, train_fraction, seed);
  const auto s = Standardizer::fit(split.train);
  return {s.apply(split.train), s.apply(split.test)};
}

}  // namespace kdlab::data
