#pragma once

// Weighted multitask objective: BCE (gender) + CE (age group) + MSE (age in
// years), or CE over speakers for speaker-id pretraining. Every term is a
// batch mean.

#include <cmath>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "xvage/error.hpp"
#include "xvage/network.hpp"

namespace xvage {

struct LossWeights {
  double gender = 1.0;
  double age_group = 1.0;
  double age_mse = 0.001;
  double speaker = 1.0;

  void validate() const {
    if (gender < 0 || age_group < 0 || age_mse < 0 || speaker < 0)
      throw ConfigError("loss weights must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"gender", w.gender}, {"age_group", w.age_group}, {"age_mse", w.age_mse}, {"speaker", w.speaker}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
  w = LossWeights{};
  w.gender = j.value("gender", w.gender);
  w.age_group = j.value("age_group", w.age_group);
  w.age_mse = j.value("age_mse", w.age_mse);
  w.speaker = j.value("speaker", w.speaker);
  w.validate();
}

struct Targets {
  std::vector<int> gender;        // male = 1
  std::vector<int> age_group;     // 0..7
  std::vector<double> age_years;
  std::vector<int> speaker;
};

/// Unweighted per-term values and the weighted total. Terms whose head is
/// inactive stay empty.
struct LossBreakdown {
  double total = 0.0;
  std::optional<double> gender_bce;
  std::optional<double> age_group_ce;
  std::optional<double> age_mse;
  std::optional<double> speaker_ce;
};

inline nlohmann::json to_json(const LossBreakdown& l) {
  nlohmann::json j;
  j["total"] = l.total;
  if (l.gender_bce) j["gender_bce"] = *l.gender_bce;
  if (l.age_group_ce) j["age_group_ce"] = *l.age_group_ce;
  if (l.age_mse) j["age_mse"] = *l.age_mse;
  if (l.speaker_ce) j["speaker_ce"] = *l.speaker_ce;
  return j;
}

inline double binary_cross_entropy(double p, int y) {
  return -(y ? std::log(p) : std::log(1.0 - p));
}

namespace detail {

inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NanAbort(term);
}

template <class T>
double log_sum_exp(const Eigen::Ref<const RowVec<T>>& z) {
  const double m = static_cast<double>(z.maxCoeff());
  double s = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) s += std::exp(static_cast<double>(z[i]) - m);
  return m + std::log(s);
}

// Softmax cross-entropy over logits (B x K); writes d(mean CE)/dz into grad.
template <class T>
double softmax_ce(const Mat<T>& z, const std::vector<int>& target, Mat<T>* grad) {
  const auto b = z.rows();
  if (static_cast<Eigen::Index>(target.size()) != b) throw ShapeError("cross-entropy: target count mismatch");
  double loss = 0.0;
  if (grad) grad->resize(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < b; ++i) {
    const int y = target[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw OutOfRangeError("cross-entropy: class index out of range");
    const double lse = log_sum_exp<T>(z.row(i));
    loss += lse - static_cast<double>(z(i, y));
    if (grad) {
      for (Eigen::Index k = 0; k < z.cols(); ++k)
        (*grad)(i, k) = static_cast<T>(std::exp(static_cast<double>(z(i, k)) - lse) / b);
      (*grad)(i, y) -= static_cast<T>(1.0 / b);
    }
  }
  return loss / b;
}

}  // namespace detail

/// Computes the stage objective from raw head outputs. When `grads` is given
/// it receives d(total)/d(output) for every active head.
template <class T>
LossBreakdown joint_loss(const HeadOutputs<T>& out, const Targets& t, const LossWeights& w,
                         HeadOutputs<T>* grads = nullptr) {
  LossBreakdown res;
  if (out.gender_logit.size()) {
    const auto b = out.gender_logit.rows();
    if (static_cast<Eigen::Index>(t.gender.size()) != b) throw ShapeError("gender targets missing");
    double loss = 0.0;
    if (grads) grads->gender_logit.resize(b, 1);
    for (Eigen::Index i = 0; i < b; ++i) {
      const double z = out.gender_logit(i, 0);
      const int y = t.gender[static_cast<std::size_t>(i)];
      loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      if (grads) grads->gender_logit(i, 0) = static_cast<T>(w.gender * (1.0 / (1.0 + std::exp(-z)) - y) / b);
    }
    res.gender_bce = loss / b;
    detail::check_finite(*res.gender_bce, "gender_bce");
    res.total += w.gender * *res.gender_bce;
  }
  if (out.age_logits.size()) {
    Mat<T> g;
    res.age_group_ce = detail::softmax_ce<T>(out.age_logits, t.age_group, grads ? &g : nullptr);
    detail::check_finite(*res.age_group_ce, "age_group_ce");
    res.total += w.age_group * *res.age_group_ce;
    if (grads) grads->age_logits = g * static_cast<T>(w.age_group);
  }
  if (out.age_years.size()) {
    const auto b = out.age_years.rows();
    if (static_cast<Eigen::Index>(t.age_years.size()) != b) throw ShapeError("age targets missing");
    double loss = 0.0;
    if (grads) grads->age_years.resize(b, 1);
    for (Eigen::Index i = 0; i < b; ++i) {
      const double e = static_cast<double>(out.age_years(i, 0)) - t.age_years[static_cast<std::size_t>(i)];
      loss += e * e;
      if (grads) grads->age_years(i, 0) = static_cast<T>(w.age_mse * 2.0 * e / b);
    }
    res.age_mse = loss / b;
    detail::check_finite(*res.age_mse, "age_mse");
    res.total += w.age_mse * *res.age_mse;
  }
  if (out.speaker_logits.size()) {
    Mat<T> g;
    res.speaker_ce = detail::softmax_ce<T>(out.speaker_logits, t.speaker, grads ? &g : nullptr);
    detail::check_finite(*res.speaker_ce, "speaker_ce");
    res.total += w.speaker * *res.speaker_ce;
    if (grads) grads->speaker_logits = g * static_cast<T>(w.speaker);
  }
  detail::check_finite(res.total, "total");
  return res;
}

}  // namespace xvage
