#include "kdlab/kd_criteria.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kdlab::kd {

using ad::Tensor;

WeightDiag WeightDiag::identity(std::size_t n) {
  return {std::vector<double>(n, 1.0), WeightSource::Identity, false, 0.0};
}

HeadParams HeadParams::from(const nets::LinearHead& head) {
  HeadParams h;
  h.classes = head.layer.out_dim();
  h.dim = head.layer.in_dim();
  h.weight.assign(head.layer.weight.values().begin(), head.layer.weight.values().end());
  h.bias.assign(head.layer.bias.values().begin(), head.layer.bias.values().end());
  return h;
}

HeadParams HeadParams::identity(std::size_t k) {
  HeadParams h;
  h.classes = k;
  h.dim = k;
  h.weight.assign(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) h.weight[i * k + i] = 1.0;
  h.bias.assign(k, 0.0);
  return h;
}

std::vector<double> HeadParams::logits(std::span<const double> z) const {
  if (z.size() != dim) {
    throw ad::ShapeError("head expects " + std::to_string(dim) + " features, got " + std::to_string(z.size()));
  }
  std::vector<double> l(bias);
  for (std::size_t y = 0; y < classes; ++y) {
    const double* row = &weight[y * dim];
    double acc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) acc += row[i] * z[i];
    l[y] += acc;
  }
  return l;
}

std::vector<double> HeadParams::probabilities(std::span<const double> z) const {
  return softmax(logits(z));
}

std::vector<double> HeadParams::pullback(std::span<const double> v) const {
  if (v.size() != classes) throw ad::ShapeError("pullback: vector length does not match class count");
  std::vector<double> out(dim, 0.0);
  for (std::size_t y = 0; y < classes; ++y) {
    const double* row = &weight[y * dim];
    for (std::size_t i = 0; i < dim; ++i) out[i] += row[i] * v[y];
  }
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ad::ShapeError("softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

namespace {

void require_distribution(std::span<const double> p, const char* which) {
  double s = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("kl_divergence: ") + which + " has a negative or non-finite entry");
    }
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) {
    throw std::invalid_argument(std::string("kl_divergence: ") + which + " sums to " + std::to_string(s));
  }
}

}  // namespace

double kl_divergence(std::span<const double> p_t, std::span<const double> p_s) {
  if (p_t.size() != p_s.size()) throw ad::ShapeError("kl_divergence: length mismatch");
  require_distribution(p_t, "p_t");
  require_distribution(p_s, "p_s");
  double kl = 0.0;
  for (std::size_t i = 0; i < p_t.size(); ++i) {
    if (p_t[i] == 0.0) continue;
    if (p_s[i] < 1e-300) throw std::domain_error("kl_divergence: p_s vanishes where p_t > 0");
    kl += p_t[i] * std::log(p_t[i] / p_s[i]);
  }
  return kl;
}

double kl_divergence(const Tensor& p_t, const Tensor& p_s) {
  if (p_t.shape() != p_s.shape() || p_t.shape().size() != 2) {
    throw ad::ShapeError("kl_divergence: shapes " + ad::shape_string(p_t.shape()) + " and " +
                         ad::shape_string(p_s.shape()));
  }
  const std::size_t b = p_t.rows(), k = p_t.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    total += kl_divergence(p_t.values().subspan(i * k, k), p_s.values().subspan(i * k, k));
  }
  return total / static_cast<double>(b);
}

std::vector<double> grad_log_prob(std::span<const double> z, const HeadParams& head, int y) {
  if (y < 0 || static_cast<std::size_t>(y) >= head.classes) {
    throw std::out_of_range("label " + std::to_string(y) + " outside head with " +
                            std::to_string(head.classes) + " classes");
  }
  auto r = head.probabilities(z);
  for (auto& v : r) v = -v;
  r[static_cast<std::size_t>(y)] += 1.0;
  return head.pullback(r);
}

WeightDiag fisher_diag_full(std::span<const double> z, const HeadParams& head) {
  const auto p = head.probabilities(z);
  WeightDiag out{std::vector<double>(head.dim, 0.0), WeightSource::EmpiricalFisher, false, 0.0};
  for (std::size_t y = 0; y < head.classes; ++y) {
    const auto g = grad_log_prob(z, head, static_cast<int>(y));
    for (std::size_t i = 0; i < head.dim; ++i) out.w[i] += p[y] * g[i] * g[i];
  }
  return out;
}

std::vector<double> fisher_matrix(std::span<const double> z, const HeadParams& head) {
  const auto p = head.probabilities(z);
  const std::size_t n = head.dim;
  std::vector<double> f(n * n, 0.0);
  for (std::size_t y = 0; y < head.classes; ++y) {
    const auto g = grad_log_prob(z, head, static_cast<int>(y));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) f[i * n + j] += p[y] * g[i] * g[j];
    }
  }
  return f;
}

std::vector<double> grad_le(std::span<const double> z, const HeadParams& head, int y_star) {
  return grad_log_prob(z, head, y_star);
}

std::vector<double> grad_lh(std::span<const double> z, const HeadParams& head) {
  auto l = head.logits(z);
  const double c = 2.0 / static_cast<double>(head.classes);
  for (auto& v : l) v *= c;
  return head.pullback(l);
}

WeightDiag weight_diag(std::span<const double> grad, WeightSource source) {
  WeightDiag out{std::vector<double>(grad.size()), source, false, 0.0};
  for (std::size_t i = 0; i < grad.size(); ++i) out.w[i] = grad[i] * grad[i];
  if (source == WeightSource::Identity) std::fill(out.w.begin(), out.w.end(), 1.0);
  return out;
}

WeightDiag normalize_weight_diag(const WeightDiag& w) {
  const std::size_t n = w.w.size();
  if (n < 2) throw std::invalid_argument("normalize_weight_diag: need at least 2 entries");
  WeightDiag out{std::vector<double>(n, 1.0), w.source, true, 0.0};
  if (w.source == WeightSource::Identity) return out;
  double mu = 0.0;
  for (double v : w.w) mu += v;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double v : w.w) var += (v - mu) * (v - mu);
  var /= static_cast<double>(n);
  const double sigma = std::sqrt(var);
  if (sigma < 1e-12) return out;
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (w.w[i] - mu) / sigma + 1.0;
    if (v < 0.0) {
      out.w[i] = 0.0;
      ++clamped;
    } else {
      out.w[i] = v;
    }
  }
  out.clamp_fraction = static_cast<double>(clamped) / static_cast<double>(n);
  return out;
}

std::vector<double> normalize_unit(std::span<const double> z, double eps) {
  double ss = 0.0;
  for (double v : z) ss += v * v;
  const double d = std::max(std::sqrt(ss), eps);
  std::vector<double> out(z.begin(), z.end());
  for (auto& v : out) v /= d;
  return out;
}

Tensor normalize_unit(const Tensor& z, double eps) { return ad::normalize_rows(z, eps); }

Tensor d_g(const Tensor& z_s, const Tensor& z_t, const Tensor& weights) {
  if (z_s.shape().size() != 2 || z_s.shape() != z_t.shape() || z_s.shape() != weights.shape()) {
    throw ad::ShapeError("d_g: student " + ad::shape_string(z_s.shape()) + ", teacher " +
                         ad::shape_string(z_t.shape()) + ", weights " + ad::shape_string(weights.shape()));
  }
  const Tensor diff = ad::sub(z_s, ad::detach(z_t));
  const Tensor weighted = ad::mul(ad::square(diff), ad::detach(weights));
  return ad::scale(ad::sum(weighted), 1.0 / static_cast<double>(z_s.rows()));
}

Tensor d_g(const Tensor& z_s, const Tensor& z_t, const WeightDiag& w) {
  if (z_s.shape().size() != 2 || w.w.size() != z_s.cols()) {
    throw ad::ShapeError("d_g: weight length " + std::to_string(w.w.size()) + " vs features " +
                         ad::shape_string(z_s.shape()));
  }
  std::vector<double> tiled;
  tiled.reserve(z_s.size());
  for (std::size_t i = 0; i < z_s.rows(); ++i) tiled.insert(tiled.end(), w.w.begin(), w.w.end());
  return d_g(z_s, z_t, Tensor::constant(z_s.shape(), std::move(tiled)));
}

Tensor d_g_mc(const Tensor& z_s, const Tensor& z_t, const Tensor& weights) {
  if (z_s.shape() != z_t.shape()) {
    throw ad::ShapeError("d_g_mc: transformed student features " + ad::shape_string(z_s.shape()) +
                         " do not match teacher " + ad::shape_string(z_t.shape()));
  }
  return d_g(normalize_unit(z_s), normalize_unit(ad::detach(z_t)), weights);
}

namespace {
Tensor ones_like(const Tensor& t) { return Tensor::constant(t.shape(), std::vector<double>(t.size(), 1.0)); }
}  // namespace

Tensor d_g_bc(const Tensor& l_s, const Tensor& l_t, const Tensor& z_s, const Tensor& z_t,
              const Tensor& weights_e, double lambda_l, double lambda_f) {
  if (l_s.shape() != l_t.shape()) {
    throw ad::ShapeError("d_g_bc: logits " + ad::shape_string(l_s.shape()) + " vs " + ad::shape_string(l_t.shape()));
  }
  const Tensor logits_term = d_g(normalize_unit(l_s), normalize_unit(ad::detach(l_t)), ones_like(l_s));
  const Tensor features_term = d_g_mc(z_s, z_t, weights_e);
  return ad::add(ad::scale(logits_term, lambda_l), ad::scale(features_term, lambda_f));
}

Tensor hkd_loss(const Tensor& l_s, const Tensor& l_t, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("hkd_loss: temperature must be positive");
  if (l_s.shape() != l_t.shape() || l_s.shape().size() != 2) {
    throw ad::ShapeError("hkd_loss: logits " + ad::shape_string(l_s.shape()) + " vs " + ad::shape_string(l_t.shape()));
  }
  const double inv_t = 1.0 / temperature;
  const Tensor log_p_t = ad::log_softmax(ad::scale(ad::detach(l_t), inv_t));
  const Tensor p_t = ad::softmax(ad::scale(ad::detach(l_t), inv_t));
  double entropy_term = 0.0;  // sum p_t log p_t
  for (std::size_t i = 0; i < p_t.size(); ++i) {
    if (p_t.values()[i] > 0.0) entropy_term += p_t.values()[i] * log_p_t.values()[i];
  }
  const Tensor log_p_s = ad::log_softmax(ad::scale(l_s, inv_t));
  const Tensor cross = ad::sum(ad::mul(p_t, log_p_s));
  const double b = static_cast<double>(l_s.rows());
  const Tensor kl = ad::scale(ad::sub(Tensor::scalar(entropy_term), cross), 1.0 / b);
  return ad::scale(kl, temperature * temperature);
}

// ---------------------------------------------------------------------------
// criteria

std::string to_string(Variant v) {
  switch (v) {
    case Variant::None: return "vanilla";
    case Variant::WeightedEFeaturesSE: return "WeightedEFeaturesSE";
    case Variant::WeightedHFeaturesSE: return "WeightedHFeaturesSE";
    case Variant::FeaturesSE: return "FeaturesSE";
    case Variant::LogitsSE: return "LogitsSE";
    case Variant::CombinedBC: return "CombinedBC";
    case Variant::HintonKD: return "HintonKD";
  }
  return "?";
}

std::vector<Variant> all_variants() {
  return {Variant::None,     Variant::WeightedEFeaturesSE, Variant::WeightedHFeaturesSE, Variant::FeaturesSE,
          Variant::LogitsSE, Variant::CombinedBC,          Variant::HintonKD};
}

Variant parse_variant(std::string_view name) {
  for (auto v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  if (name == "None") return Variant::None;
  if (name == "HKD") return Variant::HintonKD;
  throw std::invalid_argument("unknown KD variant '" + std::string(name) + "'");
}

KdCriterion KdCriterion::defaults(Variant v) {
  KdCriterion c;
  c.variant = v;
  switch (v) {
    case Variant::None: c.lambda = 0.0; break;
    case Variant::WeightedEFeaturesSE:
    case Variant::WeightedHFeaturesSE:
    case Variant::FeaturesSE: c.lambda = c.lambda_f; break;
    case Variant::LogitsSE: c.lambda = c.lambda_l; break;
    case Variant::CombinedBC:
    case Variant::HintonKD: c.lambda = 1.0; break;
  }
  return c;
}

void KdCriterion::validate() const {
  if (!(lambda >= 0.0) || !(lambda_f >= 0.0) || !(lambda_l >= 0.0)) {
    throw std::invalid_argument("criterion coefficients must be nonnegative");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("criterion temperature must be positive");
}

bool KdCriterion::uses_features() const {
  return variant == Variant::WeightedEFeaturesSE || variant == Variant::WeightedHFeaturesSE ||
         variant == Variant::FeaturesSE || variant == Variant::CombinedBC;
}

bool KdCriterion::needs_labels_for_weights() const {
  return variant == Variant::WeightedEFeaturesSE || variant == Variant::CombinedBC;
}

WeightSource KdCriterion::weight_source() const {
  switch (variant) {
    case Variant::WeightedEFeaturesSE:
    case Variant::CombinedBC: return WeightSource::EmpiricalFisher;
    case Variant::WeightedHFeaturesSE: return WeightSource::LogitMagnitude;
    default: return WeightSource::Identity;
  }
}

TeacherSignals make_teacher_signals(const KdCriterion& criterion, const Tensor& teacher_features,
                                    const Tensor& teacher_logits, const HeadParams& teacher_head,
                                    std::span<const int> labels) {
  TeacherSignals s;
  s.features = ad::detach(teacher_features);
  s.logits = ad::detach(teacher_logits);
  s.probs = ad::softmax(s.logits);
  s.source = criterion.weight_source();
  if (!criterion.uses_features()) return s;

  const std::size_t b = s.features.rows(), n = s.features.cols();
  if (n != teacher_head.dim) throw ad::ShapeError("teacher features do not match the teacher head");
  if (criterion.needs_labels_for_weights() && labels.size() != b) {
    throw std::invalid_argument(to_string(criterion.variant) + " needs one label per row to weight features");
  }
  std::vector<double> weights;
  weights.reserve(b * n);
  double clamp = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto z = s.features.values().subspan(i * n, n);
    WeightDiag w;
    switch (s.source) {
      case WeightSource::EmpiricalFisher:
        w = weight_diag(grad_le(z, teacher_head, labels[i]), s.source);
        break;
      case WeightSource::LogitMagnitude:
        w = weight_diag(grad_lh(z, teacher_head), s.source);
        break;
      case WeightSource::Identity:
        w = WeightDiag::identity(n);
        break;
    }
    w = normalize_weight_diag(w);
    clamp += w.clamp_fraction;
    weights.insert(weights.end(), w.w.begin(), w.w.end());
  }
  s.weights = Tensor::constant({b, n}, std::move(weights));
  s.clamp_fraction = clamp / static_cast<double>(b);
  return s;
}

LossTerms kd_total_loss(const KdCriterion& criterion, const StudentOutputs& student,
                        const TeacherSignals& teacher, std::span<const int> labels) {
  criterion.validate();
  const Tensor ce = ad::softmax_cross_entropy(student.logits, labels);
  LossTerms out{ce, ce.item(), 0.0};
  if (criterion.variant == Variant::None) return out;

  if (!teacher.logits.defined()) throw std::invalid_argument("kd_total_loss: missing teacher signals");
  if (criterion.uses_features()) {
    if (!student.features.defined()) {
      throw std::invalid_argument(to_string(criterion.variant) + " needs transformed student features");
    }
    if (!teacher.weights.defined() || teacher.source != criterion.weight_source()) {
      throw std::invalid_argument(to_string(criterion.variant) + ": teacher signals carry the wrong weighting");
    }
  }

  Tensor divergence;
  switch (criterion.variant) {
    case Variant::WeightedEFeaturesSE:
    case Variant::WeightedHFeaturesSE:
    case Variant::FeaturesSE:
      divergence = d_g_mc(student.features, teacher.features, teacher.weights);
      break;
    case Variant::LogitsSE:
      divergence = d_g(normalize_unit(student.logits), normalize_unit(teacher.logits),
                       ones_like(student.logits));
      break;
    case Variant::CombinedBC:
      divergence = d_g_bc(student.logits, teacher.logits, student.features, teacher.features, teacher.weights,
                          criterion.lambda_l, criterion.lambda_f);
      break;
    case Variant::HintonKD:
      divergence = hkd_loss(student.logits, teacher.logits, criterion.temperature);
      break;
    case Variant::None:
      break;
  }
  out.divergence = divergence.item();
  out.total = ad::add(ce, ad::scale(divergence, criterion.lambda));
  return out;
}

}  // namespace kdlab::kd
