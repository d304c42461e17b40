#pragma once

#include <span>
#include <utility>
#include <vector>

#include "fppl/backbone.hpp"
#include "fppl/prompt.hpp"
#include "fppl/prototype.hpp"
#include "fppl/tensor.hpp"

namespace fppl {

// Linear head over the feature space; logits cover every class of the whole
// experiment, seen or not. Masking unseen classes happens at evaluation.
struct Classifier {
  Mat weight;  // embed_dim x num_classes
  Vec bias;    // num_classes

  int num_classes() const { return static_cast<int>(bias.size()); }
  Vec logits(const Vec& feature) const { return weight.transpose() * feature + bias; }
};

struct LossBreakdown {
  double ce = 0.0;
  double ur = 0.0;
  double total = 0.0;
};

enum class Reduction { Sum, Mean };

struct ObjectiveOptions {
  double tau = 0.2;
  bool use_ur = true;
  bool use_fusion = true;
  Reduction reduction = Reduction::Sum;
  std::vector<int> candidate_classes;  // denominator set of the ur loss
};

// Gradients for the tunables {psi, p_t, theta}. Frozen prompts and backbone
// weights have no slots here by construction.
struct GradientSet {
  Mat d_psi;
  PromptSet d_prompt;
  Mat d_theta_weight;
  Vec d_theta_bias;
};

struct BatchEval {
  LossBreakdown loss;
  GradientSet grads;
};

// One training sample plus its cached query feature (needed only when the
// fusion path is active; may be null otherwise).
struct TrainItem {
  const Vec* pixels = nullptr;
  int label = 0;
  const Vec* query = nullptr;
};

// Softmax cross-entropy over all classes.
double classification_loss(const Vec& logits, int label);

// Temperature-scaled contrastive pull of a feature toward its class's
// global prototype; candidates missing from the global set drop out of the
// denominator, and a sample whose own class is absent contributes zero.
double unified_representation_loss(const Vec& feature, int label, const GlobalPrototypeSet& g,
                                   double tau, std::span<const int> candidate_classes);

// Full per-batch forward and exact reverse-mode gradients through the
// classifier, the contrastive term, the prompted backbone, the fusion
// softmax and the coslinear map.
BatchEval client_eval(const FrozenBackbone& backbone, std::span<const TrainItem> batch,
                      const PromptBank& bank, const CoslinearWeights& psi, const Classifier& theta,
                      const GlobalPrototypeSet& g, const ObjectiveOptions& opts);

LossBreakdown client_loss(const FrozenBackbone& backbone, std::span<const TrainItem> batch,
                          const PromptBank& bank, const CoslinearWeights& psi,
                          const Classifier& theta, const GlobalPrototypeSet& g,
                          const ObjectiveOptions& opts);

// Sum of cross-entropies of the classifier on fixed prototype inputs.
double debias_loss(const Classifier& theta,
                   std::span<const std::pair<int, Vec>> prototypes);

struct DebiasEval {
  double loss = 0.0;
  Mat d_weight;
  Vec d_bias;
};

DebiasEval debias_eval(const Classifier& theta, std::span<const std::pair<int, Vec>> prototypes,
                       Reduction reduction);

}  // namespace fppl
