#include "fppl/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace fppl {

namespace {

// log(sum(exp(z))) with max subtraction.
double log_sum_exp(const Vec& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

struct CosineParts {
  double value = 0.0;
  double a_norm = 0.0;
  double b_norm = 0.0;
};

CosineParts cosine(const Vec& a, const Vec& b) {
  CosineParts p;
  p.a_norm = a.norm();
  p.b_norm = b.norm();
  if (p.a_norm == 0.0 || p.b_norm == 0.0) {
    throw std::invalid_argument("cosine similarity: zero-norm vector");
  }
  p.value = a.dot(b) / (p.a_norm * p.b_norm);
  return p;
}

// d cos(a, b) / da for fixed b.
Vec cosine_grad_a(const Vec& a, const Vec& b, const CosineParts& p) {
  return b / (p.a_norm * p.b_norm) - (p.value / (p.a_norm * p.a_norm)) * a;
}

struct UrEval {
  double loss = 0.0;
  Vec d_feature;  // empty when the sample contributes nothing
};

UrEval ur_eval(const Vec& feature, int label, const GlobalPrototypeSet& g, double tau,
               std::span<const int> candidates, bool want_grad) {
  if (tau <= 0.0) throw std::invalid_argument("unified representation loss: tau must be positive");
  UrEval out;
  if (!g.contains(label)) return out;  // absent prototype: zero contribution

  std::vector<int> present;
  present.reserve(candidates.size());
  for (int cls : candidates) {
    if (g.contains(cls)) present.push_back(cls);
  }
  if (present.empty()) return out;

  const Eigen::Index n = static_cast<Eigen::Index>(present.size());
  Vec sims(n);
  std::vector<CosineParts> parts(present.size());
  Eigen::Index label_pos = -1;
  for (Eigen::Index i = 0; i < n; ++i) {
    parts[static_cast<size_t>(i)] = cosine(feature, g.at(present[static_cast<size_t>(i)]));
    sims(i) = parts[static_cast<size_t>(i)].value;
    if (present[static_cast<size_t>(i)] == label) label_pos = i;
  }
  if (label_pos < 0) return out;  // label not in the candidate set

  Vec z = sims / tau;
  out.loss = log_sum_exp(z) - z(label_pos);

  if (want_grad) {
    Vec p = softmax(z);
    p(label_pos) -= 1.0;
    out.d_feature = Vec::Zero(feature.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      out.d_feature +=
          (p(i) / tau) * cosine_grad_a(feature, g.at(present[static_cast<size_t>(i)]),
                                       parts[static_cast<size_t>(i)]);
    }
  }
  return out;
}

}  // namespace

double classification_loss(const Vec& logits, int label) {
  if (label < 0 || label >= logits.size()) {
    throw std::invalid_argument("classification loss: label out of range");
  }
  return log_sum_exp(logits) - logits(label);
}

double unified_representation_loss(const Vec& feature, int label, const GlobalPrototypeSet& g,
                                   double tau, std::span<const int> candidate_classes) {
  return ur_eval(feature, label, g, tau, candidate_classes, false).loss;
}

BatchEval client_eval(const FrozenBackbone& backbone, std::span<const TrainItem> batch,
                      const PromptBank& bank, const CoslinearWeights& psi, const Classifier& theta,
                      const GlobalPrototypeSet& g, const ObjectiveOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("client loss: empty batch");
  const int t = bank.task_index();
  const int dim = static_cast<int>(theta.weight.rows());
  if (opts.use_fusion && psi.task_count() != t) {
    throw std::invalid_argument("client loss: coslinear column count does not match task count");
  }

  BatchEval out;
  out.grads.d_psi = Mat::Zero(psi.w.rows(), psi.w.cols());
  out.grads.d_prompt = PromptSet::zeros(bank.current().first_layer, bank.current().span(),
                                        bank.current().prompt_len(), dim);
  out.grads.d_theta_weight = Mat::Zero(theta.weight.rows(), theta.weight.cols());
  out.grads.d_theta_bias = Vec::Zero(theta.bias.size());

  for (const TrainItem& item : batch) {
    // Forward: query -> fusion weights -> fused prompt -> feature -> logits.
    Vec logits_t;       // per-task fusion logits
    Vec fusion_wts;
    PromptSet fused;
    if (opts.use_fusion) {
      if (item.query == nullptr) {
        throw std::invalid_argument("client loss: fusion path needs a query feature");
      }
      logits_t = coslinear_logits(psi, *item.query);
      fusion_wts = softmax(logits_t);
      fused = fuse(bank, logits_t);
    } else {
      fused = bank.current();
    }

    ForwardTrace trace = backbone.prompted_forward(*item.pixels, fused);
    const Vec& feature = trace.feature;
    Vec class_logits = theta.logits(feature);

    const double ce = classification_loss(class_logits, item.label);
    out.loss.ce += ce;

    // Cross-entropy backward.
    Vec d_logits = softmax(class_logits);
    d_logits(item.label) -= 1.0;
    out.grads.d_theta_weight += feature * d_logits.transpose();
    out.grads.d_theta_bias += d_logits;
    Vec d_feature = theta.weight * d_logits;

    if (opts.use_ur) {
      UrEval ur = ur_eval(feature, item.label, g, opts.tau, opts.candidate_classes, true);
      out.loss.ur += ur.loss;
      if (ur.d_feature.size() > 0) d_feature += ur.d_feature;
    }

    // Backbone backward gives the gradient on the fused prompt rows.
    PromptSet d_fused = backbone.backward_to_prompts(trace, d_feature);

    if (opts.use_fusion) {
      // Fused prompt is a softmax mixture: current-prompt share plus the
      // mixture-weight chain back into psi.
      Vec d_wts = Vec::Zero(t);
      for (size_t l = 0; l < d_fused.layers.size(); ++l) {
        out.grads.d_prompt.layers[l] += fusion_wts(t - 1) * d_fused.layers[l];
        for (int i = 1; i <= t; ++i) {
          d_wts(i - 1) += d_fused.layers[l]
                              .cwiseProduct(bank.task_prompt(i).layers[l])
                              .sum();
        }
      }
      const double dot = d_wts.dot(fusion_wts);
      Vec d_logits_t = fusion_wts.cwiseProduct(d_wts - Vec::Constant(t, dot));
      const Vec& q = *item.query;
      const double qn = q.norm();
      for (int i = 0; i < t; ++i) {
        const Vec col = psi.w.col(i);
        const double cn = col.norm();
        const double cos = q.dot(col) / (qn * cn);
        out.grads.d_psi.col(i) += d_logits_t(i) * (q / (qn * cn) - (cos / (cn * cn)) * col);
      }
    } else {
      for (size_t l = 0; l < d_fused.layers.size(); ++l) {
        out.grads.d_prompt.layers[l] += d_fused.layers[l];
      }
    }
  }

  if (opts.reduction == Reduction::Mean) {
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.loss.ce *= inv;
    out.loss.ur *= inv;
    out.grads.d_psi *= inv;
    for (Mat& m : out.grads.d_prompt.layers) m *= inv;
    out.grads.d_theta_weight *= inv;
    out.grads.d_theta_bias *= inv;
  }
  out.loss.total = out.loss.ce + out.loss.ur;
  return out;
}

LossBreakdown client_loss(const FrozenBackbone& backbone, std::span<const TrainItem> batch,
                          const PromptBank& bank, const CoslinearWeights& psi,
                          const Classifier& theta, const GlobalPrototypeSet& g,
                          const ObjectiveOptions& opts) {
  return client_eval(backbone, batch, bank, psi, theta, g, opts).loss;
}

double debias_loss(const Classifier& theta, std::span<const std::pair<int, Vec>> prototypes) {
  if (prototypes.empty()) throw std::invalid_argument("debias loss: empty prototype list");
  double loss = 0.0;
  for (const auto& [cls, proto] : prototypes) {
    loss += classification_loss(theta.logits(proto), cls);
  }
  return loss;
}

DebiasEval debias_eval(const Classifier& theta, std::span<const std::pair<int, Vec>> prototypes,
                       Reduction reduction) {
  if (prototypes.empty()) throw std::invalid_argument("debias loss: empty prototype list");
  DebiasEval out;
  out.d_weight = Mat::Zero(theta.weight.rows(), theta.weight.cols());
  out.d_bias = Vec::Zero(theta.bias.size());
  for (const auto& [cls, proto] : prototypes) {
    Vec logits = theta.logits(proto);
    out.loss += classification_loss(logits, cls);
    Vec d_logits = softmax(logits);
    d_logits(cls) -= 1.0;
    out.d_weight += proto * d_logits.transpose();
    out.d_bias += d_logits;
  }
  if (reduction == Reduction::Mean) {
    const double inv = 1.0 / static_cast<double>(prototypes.size());
    out.loss *= inv;
    out.d_weight *= inv;
    out.d_bias *= inv;
  }
  return out;
}

}  // namespace fppl
