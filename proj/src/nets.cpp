#include "kdlab/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "kdlab/io.hpp"
#include "kdlab/rng.hpp"

namespace kdlab::nets {

using ad::Tensor;

Dense make_dense(std::size_t in, std::size_t out, InitScheme scheme, std::uint64_t seed,
                 bool trainable) {
  if (in == 0 || out == 0) throw std::invalid_argument("make_dense: zero-width layer");
  std::mt19937_64 rng(seed);
  const double var = (scheme == InitScheme::He ? 2.0 : 1.0) / static_cast<double>(in);
  std::normal_distribution<double> dist(0.0, std::sqrt(var));
  std::vector<double> w(in * out);
  for (auto& v : w) v = dist(rng);
  std::vector<double> b(out, 0.0);
  if (trainable) return {Tensor::parameter({out, in}, std::move(w)), Tensor::parameter({out}, std::move(b))};
  return {Tensor::constant({out, in}, std::move(w)), Tensor::constant({out}, std::move(b))};
}

namespace {

Dense copy_dense(const Dense& d, bool trainable) {
  auto make = [trainable](const Tensor& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    return trainable ? Tensor::parameter(t.shape(), std::move(v)) : Tensor::constant(t.shape(), std::move(v));
  };
  return {make(d.weight), make(d.bias)};
}

}  // namespace

MlpTrunk::MlpTrunk(std::vector<std::size_t> widths, std::uint64_t seed) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw std::invalid_argument("MlpTrunk: need at least input and feature widths");
  for (auto w : widths_) {
    if (w == 0) throw std::invalid_argument("MlpTrunk: zero width");
  }
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
    const bool last = i + 2 == widths_.size();
    layers_.push_back(make_dense(widths_[i], widths_[i + 1], last ? InitScheme::LeCun : InitScheme::He,
                                 derive_seed(seed, i)));
  }
}

Tensor MlpTrunk::operator()(const Tensor& x) const {
  if (x.shape().size() != 2 || x.cols() != input_dim()) {
    throw ad::ShapeError("trunk expects [b x " + std::to_string(input_dim()) + "], got " +
                         ad::shape_string(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ad::relu(h);
  }
  return h;
}

std::size_t MlpTrunk::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

LinearTransform LinearTransform::create(std::size_t student_dim, std::size_t teacher_dim,
                                        std::uint64_t seed) {
  return {make_dense(student_dim, teacher_dim, InitScheme::LeCun, seed)};
}

MultiHeadNet MultiHeadNet::init(const NetSpec& spec, std::uint64_t seed) {
  MultiHeadNet net;
  net.trunk_ = MlpTrunk(spec.widths, seed);
  for (std::size_t k : spec.head_classes) net.add_head(k, derive_seed(seed, 1000 + net.heads_.size()));
  return net;
}

std::size_t MultiHeadNet::add_head(std::size_t classes, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("add_head: a head needs at least 2 classes");
  heads_.push_back({make_dense(trunk_.feature_dim(), classes, InitScheme::LeCun, seed)});
  return heads_.size() - 1;
}

const LinearHead& MultiHeadNet::head(std::size_t index) const {
  if (index >= heads_.size()) {
    throw std::out_of_range("head index " + std::to_string(index) + " but net has " +
                            std::to_string(heads_.size()) + " heads");
  }
  return heads_[index];
}

Tensor MultiHeadNet::features(const Tensor& x) const { return trunk_(x); }

Tensor MultiHeadNet::head_logits(const Tensor& features, std::size_t head_index) const {
  return head(head_index).layer(features);
}

ForwardResult MultiHeadNet::forward(const Tensor& x, std::size_t head_index) const {
  head(head_index);
  Tensor z = features(x);
  Tensor l = head_logits(z, head_index);
  return {z, l};
}

NetSpec MultiHeadNet::spec() const {
  NetSpec s{trunk_.widths(), {}};
  for (const auto& h : heads_) s.head_classes.push_back(h.classes());
  return s;
}

std::vector<Tensor> MultiHeadNet::trunk_parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : trunk_.layers()) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<Tensor> MultiHeadNet::head_parameters(std::size_t head_index) const {
  const auto& h = head(head_index);
  return {h.layer.weight, h.layer.bias};
}

std::vector<Tensor> MultiHeadNet::parameters() const {
  auto out = trunk_parameters();
  for (std::size_t j = 0; j < heads_.size(); ++j) {
    for (auto& t : head_parameters(j)) out.push_back(t);
  }
  return out;
}

std::size_t MultiHeadNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

MultiHeadNet MultiHeadNet::copy(bool trainable) const {
  MultiHeadNet out;
  out.trunk_ = trunk_;
  for (auto& l : out.trunk_.layers()) l = copy_dense(l, trainable);
  for (const auto& h : heads_) out.heads_.push_back({copy_dense(h.layer, trainable)});
  return out;
}

MultiHeadNet MultiHeadNet::frozen_copy() const { return copy(false); }
MultiHeadNet MultiHeadNet::clone() const { return copy(true); }

std::vector<double> MultiHeadNet::flat_parameters() const {
  std::vector<double> flat;
  for (const auto& t : parameters()) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

bool MultiHeadNet::bitwise_equal(const MultiHeadNet& other) const {
  if (spec().widths != other.spec().widths || spec().head_classes != other.spec().head_classes) {
    return false;
  }
  const auto a = flat_parameters();
  const auto b = other.flat_parameters();
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr const char* kCheckpointFormat = "kdlab.multihead_net";
constexpr int kCheckpointVersion = 1;
}  // namespace

std::string checkpoint_json(const MultiHeadNet& net) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  const auto s = net.spec();
  j["widths"] = s.widths;
  j["heads"] = s.head_classes;
  auto params = nlohmann::json::array();
  for (const auto& t : net.parameters()) {
    params.push_back(std::vector<double>(t.values().begin(), t.values().end()));
  }
  j["parameters"] = std::move(params);
  return j.dump();
}

MultiHeadNet checkpoint_from_json(const std::string& text, bool trainable) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint: ") + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) throw std::runtime_error("checkpoint: unknown format");
  if (j.value("version", 0) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  NetSpec spec{j.at("widths").get<std::vector<std::size_t>>(),
               j.at("heads").get<std::vector<std::size_t>>()};
  MultiHeadNet net = MultiHeadNet::init(spec, 0);
  if (!trainable) net = net.frozen_copy();
  auto params = net.parameters();
  const auto& stored = j.at("parameters");
  if (stored.size() != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = stored[i].get<std::vector<double>>();
    if (values.size() != params[i].size()) {
      throw std::runtime_error("checkpoint: tensor " + std::to_string(i) + " has wrong length");
    }
    std::copy(values.begin(), values.end(), params[i].mutable_values().begin());
  }
  return net;
}

void save_checkpoint(const MultiHeadNet& net, const std::filesystem::path& path) {
  io::atomic_write(path, [&](std::ostream& os) { os << checkpoint_json(net); });
}

MultiHeadNet load_checkpoint(const std::filesystem::path& path, bool trainable) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str(), trainable);
}

}  // namespace kdlab::nets
