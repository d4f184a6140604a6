#include <doctest.h>

#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "kdlab/io.hpp"
#include "kdlab/nets.hpp"

using namespace kdlab;
using ad::Tensor;

namespace {

std::size_t expected_params(const std::vector<std::size_t>& widths, const std::vector<std::size_t>& heads) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) n += widths[i] * widths[i + 1] + widths[i + 1];
  for (auto k : heads) n += widths.back() * k + k;
  return n;
}

Tensor batch(std::size_t b, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::constant({b, d}, testing::uniform(b * d, rng));
}

}  // namespace

TEST_CASE("parameter count matches layer arithmetic") {
  for (const auto& w : std::vector<std::vector<std::size_t>>{{4, 8}, {20, 256, 256, 128}, {3, 64, 64}}) {
    const auto net = nets::MultiHeadNet::init({w, {10}}, 1);
    CHECK(net.parameter_count() == expected_params(w, {10}));
  }
  auto net = nets::MultiHeadNet::init({{5, 7, 6}, {2, 3}}, 1);
  net.add_head(4, 9);
  CHECK(net.parameter_count() == expected_params({5, 7, 6}, {2, 3, 4}));
  CHECK(net.head_count() == 3);
}

TEST_CASE("forward shapes and head errors") {
  const auto net = nets::MultiHeadNet::init({{5, 7, 6}, {3}}, 2);
  const auto out = net.forward(batch(4, 5, 1), 0);
  CHECK(out.features.shape() == ad::Shape{4, 6});
  CHECK(out.logits.shape() == ad::Shape{4, 3});
  CHECK_THROWS_AS(net.forward(batch(4, 5, 1), 1), std::out_of_range);
  CHECK_THROWS_AS(net.forward(batch(4, 4, 1), 0), ad::ShapeError);
  auto copy = net.clone();
  CHECK_THROWS_AS(copy.add_head(1, 3), std::invalid_argument);
  CHECK_THROWS_AS(nets::MlpTrunk({5}, 0), std::invalid_argument);
  CHECK_THROWS_AS(nets::MlpTrunk({5, 0, 3}, 0), std::invalid_argument);
}

TEST_CASE("initialization is a pure function of the seed") {
  const auto a = nets::MultiHeadNet::init({{5, 7, 6}, {3}}, 42);
  const auto b = nets::MultiHeadNet::init({{5, 7, 6}, {3}}, 42);
  const auto c = nets::MultiHeadNet::init({{5, 7, 6}, {3}}, 43);
  CHECK(a.bitwise_equal(b));
  CHECK_FALSE(a.bitwise_equal(c));
}

TEST_CASE("checkpoint round trip reproduces outputs bit for bit") {
  auto net = nets::MultiHeadNet::init({{5, 9, 4}, {3, 2}}, 7);
  const auto dir = std::filesystem::temp_directory_path() / "kdlab_test_nets";
  std::filesystem::create_directories(dir);
  const auto path = dir / "net.json";
  nets::save_checkpoint(net, path);
  const auto loaded = nets::load_checkpoint(path);
  CHECK(loaded.bitwise_equal(net));
  CHECK(loaded.spec().widths == net.spec().widths);
  CHECK(loaded.spec().head_classes == net.spec().head_classes);
  const auto x = batch(6, 5, 3);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto a = net.forward(x, h).logits.values();
    const auto b = loaded.forward(x, h).logits.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  CHECK_FALSE(loaded.parameters().front().requires_grad());
  CHECK(nets::load_checkpoint(path, true).parameters().front().requires_grad());

  CHECK_THROWS(nets::checkpoint_from_json("{"));
  CHECK_THROWS(nets::checkpoint_from_json(R"({"format":"other","version":1})"));
  CHECK_THROWS(nets::load_checkpoint(dir / "missing.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("frozen copy is immune to later training") {
  auto net = nets::MultiHeadNet::init({{5, 7, 6}, {3}}, 4);
  const auto frozen = net.frozen_copy();
  const auto before = frozen.flat_parameters();
  for (auto& p : frozen.parameters()) CHECK_FALSE(p.requires_grad());

  const int labels[] = {0, 1, 2, 1};
  const auto x = batch(4, 5, 8);
  for (int step = 0; step < 3; ++step) {
    auto params = net.parameters();
    for (auto& p : params) p.zero_grad();
    ad::backward(ad::softmax_cross_entropy(net.forward(x, 0).logits, labels));
    for (auto& p : params) {
      auto v = p.mutable_values();
      const auto g = p.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * g[i];
    }
  }
  CHECK(frozen.flat_parameters() == before);
  CHECK(net.flat_parameters() != before);
  // Gradients through a frozen copy never reach its tensors.
  ad::backward(ad::softmax_cross_entropy(frozen.forward(x, 0).logits, labels));
  for (auto& p : frozen.parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("parameter ordering: trunk first, weight before bias") {
  const auto net = nets::MultiHeadNet::init({{5, 7, 6}, {3, 2}}, 1);
  const auto p = net.parameters();
  REQUIRE(p.size() == 8);
  CHECK(p[0].shape() == ad::Shape{7, 5});
  CHECK(p[1].shape() == ad::Shape{7});
  CHECK(p[4].shape() == ad::Shape{3, 6});
  CHECK(p[7].shape() == ad::Shape{2});
  CHECK(net.trunk_parameters().size() == 4);
  CHECK(net.head_parameters(1).size() == 2);
}

TEST_CASE("linear transform maps student width to teacher width") {
  const auto r = nets::LinearTransform::create(16, 128, 5);
  CHECK(r(batch(3, 16, 1)).shape() == ad::Shape{3, 128});
  CHECK(r.parameters().size() == 2);
}
