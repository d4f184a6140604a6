#pragma once

// Distillation criteria built on the generalized divergence
//
//   D_G(z_t, z_s) = (z_s - z_t)^T W(z_t) (z_s - z_t),
//
// with W a diagonal built from squared teacher gradients. The same quadratic
// form covers plain feature matching (W = I), gradient-weighted feature
// matching (W from log p_{y*} or from the mean-squared logits) and logit
// matching (z = logits, W = I).

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/autodiff.hpp"
#include "kdlab/nets.hpp"

namespace kdlab::kd {

enum class WeightSource {
  EmpiricalFisher,  // gradient of log p_{y*}; needs labels
  LogitMagnitude,   // gradient of (1/k) sum_y l_y^2; label free
  Identity,
};

struct WeightDiag {
  std::vector<double> w;
  WeightSource source = WeightSource::Identity;
  bool normalized = false;
  double clamp_fraction = 0.0;  // share of entries clamped to 0 by normalization

  static WeightDiag identity(std::size_t n);
};

// Frozen affine classifier l = weight . z + bias, weight is [k x dim] row-major.
struct HeadParams {
  std::size_t classes = 0;
  std::size_t dim = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  static HeadParams from(const nets::LinearHead& head);
  // z is the logits themselves.
  static HeadParams identity(std::size_t k);

  std::vector<double> logits(std::span<const double> z) const;
  std::vector<double> probabilities(std::span<const double> z) const;
  // weight^T v
  std::vector<double> pullback(std::span<const double> v) const;
};

std::vector<double> softmax(std::span<const double> logits);

// sum_y p_t log(p_t / p_s); 0 log 0 = 0.
double kl_divergence(std::span<const double> p_t, std::span<const double> p_s);
// Row-wise KL on [b x k] probability tensors, averaged over rows.
double kl_divergence(const ad::Tensor& p_t, const ad::Tensor& p_s);

// d/dz log p_y(z) = head^T (onehot(y) - p).
std::vector<double> grad_log_prob(std::span<const double> z, const HeadParams& head, int y);

// Diagonal of sum_y p_y g_y g_y^T, marginalizing over every class.
WeightDiag fisher_diag_full(std::span<const double> z, const HeadParams& head);
// Full [dim x dim] Fisher matrix, row-major.
std::vector<double> fisher_matrix(std::span<const double> z, const HeadParams& head);

// Gradient of L_E = log p_{y*} w.r.t. z.
std::vector<double> grad_le(std::span<const double> z, const HeadParams& head, int y_star);
// Gradient of L_H = (1/k) sum_y l_y^2 w.r.t. z: (2/k) head^T l.
std::vector<double> grad_lh(std::span<const double> z, const HeadParams& head);

// diag(g g^T), i.e. g squared.
WeightDiag weight_diag(std::span<const double> grad, WeightSource source);

// (w - mean) / std + 1 with population std, negatives clamped to 0.
// A (near) constant w maps to all-ones.
WeightDiag normalize_weight_diag(const WeightDiag& w);

std::vector<double> normalize_unit(std::span<const double> z, double eps = 1e-12);
// Row-wise z / max(||z||, eps); differentiable.
ad::Tensor normalize_unit(const ad::Tensor& z, double eps = 1e-12);

// Row-wise weighted squared distance averaged over the batch. `weights` is
// [b x n] with one diagonal per row and is treated as a constant, as is z_t.
ad::Tensor d_g(const ad::Tensor& z_s, const ad::Tensor& z_t, const ad::Tensor& weights);
ad::Tensor d_g(const ad::Tensor& z_s, const ad::Tensor& z_t, const WeightDiag& w);

// d_g on unit-normalized rows. z_s is the student's features after r.
ad::Tensor d_g_mc(const ad::Tensor& z_s, const ad::Tensor& z_t, const ad::Tensor& weights);

// lambda_l * SE(l_s^, l_t^) + lambda_f * weighted SE(z_s^, z_t^).
ad::Tensor d_g_bc(const ad::Tensor& l_s, const ad::Tensor& l_t, const ad::Tensor& z_s,
                  const ad::Tensor& z_t, const ad::Tensor& weights_e, double lambda_l = 15.0,
                  double lambda_f = 3.0);

// T^2 KL(softmax(l_t/T) || softmax(l_s/T)), batch mean.
ad::Tensor hkd_loss(const ad::Tensor& l_s, const ad::Tensor& l_t, double temperature);

enum class Variant {
  None,
  WeightedEFeaturesSE,
  WeightedHFeaturesSE,
  FeaturesSE,
  LogitsSE,
  CombinedBC,
  HintonKD,
};

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);
std::vector<Variant> all_variants();

struct KdCriterion {
  Variant variant = Variant::None;
  double lambda = 0.0;
  double lambda_f = 3.0;
  double lambda_l = 15.0;
  double temperature = 4.0;

  // lambda = 3 for feature variants, 15 for logits, 1 for the combined and
  // Hinton criteria, 0 for None.
  static KdCriterion defaults(Variant v);

  void validate() const;
  bool uses_features() const;
  bool needs_labels_for_weights() const;
  WeightSource weight_source() const;
};

struct TeacherSignals {
  ad::Tensor features;  // z_t, detached
  ad::Tensor logits;    // l_t, detached
  ad::Tensor probs;     // softmax(l_t)
  ad::Tensor weights;   // [b x feat] normalized diagonal per row; undefined for logit-only criteria
  WeightSource source = WeightSource::Identity;
  double clamp_fraction = 0.0;  // mean over rows
};

// Builds detached teacher signals for a batch. `labels` may be empty unless the
// criterion weights by the empirical Fisher.
TeacherSignals make_teacher_signals(const KdCriterion& criterion, const ad::Tensor& teacher_features,
                                    const ad::Tensor& teacher_logits, const HeadParams& teacher_head,
                                    std::span<const int> labels);

struct StudentOutputs {
  ad::Tensor logits;
  ad::Tensor features;  // r(g_s(x)); required by feature criteria only
};

struct LossTerms {
  ad::Tensor total;
  double cross_entropy = 0.0;
  double divergence = 0.0;  // unscaled distillation term
};

// L_CE(p_s, y*) + lambda * D, where D is the variant's divergence.
LossTerms kd_total_loss(const KdCriterion& criterion, const StudentOutputs& student,
                        const TeacherSignals& teacher, std::span<const int> labels);

}  // namespace kdlab::kd
