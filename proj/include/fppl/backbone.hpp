#pragma once

#include <cstdint>
#include <vector>

#include "fppl/tensor.hpp"

namespace fppl {

struct BackboneConfig {
  int embed_dim = 32;
  int num_layers = 6;
  int num_heads = 4;
  int patch_size = 4;
  int image_side = 8;
  int channels = 1;
  // 1-based, inclusive range of layers that receive prompt tokens.
  int insert_start = 1;
  int insert_end = 5;
  uint64_t seed = 1;

  int insert_layer_count() const { return insert_end - insert_start + 1; }
  int patches_per_side() const { return image_side / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int image_dim() const { return channels * image_side * image_side; }

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

// One prompt matrix (prompt_len x embed_dim) per layer of the insertion
// range, keyed by offset from first_layer. An empty `layers` list (or
// prompt_len 0) means no insertion.
struct PromptSet {
  int first_layer = 1;  // 1-based index of layers.front()
  std::vector<Mat> layers;

  int prompt_len() const { return layers.empty() ? 0 : static_cast<int>(layers.front().rows()); }
  int span() const { return static_cast<int>(layers.size()); }
  bool empty() const { return prompt_len() == 0; }

  static PromptSet zeros(int first_layer, int span, int prompt_len, int embed_dim);
  void validate() const;  // all matrices share shape

  uint64_t checksum() const;
};

PromptSet operator*(double s, const PromptSet& p);
PromptSet& operator+=(PromptSet& a, const PromptSet& b);

// Activation caches for one sample, kept so the backward pass can run
// without recomputation. Sized for desk-scale token counts.
struct ForwardTrace {
  struct LayerTrace {
    Mat x_aug;               // block input with prompt rows appended
    Vec ln1_mean, ln1_rstd;
    Mat q, k, v;
    std::vector<Mat> attn;   // per head: row-softmaxed scores
    Mat r1;                  // post-attention residual
    Vec ln2_mean, ln2_rstd;
    Mat h1;                  // pre-activation MLP hidden
    int base_tokens = 0;     // rows that continue to the next layer
  };
  std::vector<LayerTrace> layers;
  Vec cls_in;                // final-layer class token before the last norm
  double final_mean = 0.0, final_rstd = 0.0;
  Vec feature;
  bool has_prompts = false;
  int prompt_first_layer = 1;
  int prompt_span = 0;
  int prompt_len = 0;
};

// Transformer encoder with all weights drawn once from the config seed and
// immutable afterwards. Both forwards are pure; concurrent read-only use is
// safe.
class FrozenBackbone {
 public:
  explicit FrozenBackbone(const BackboneConfig& cfg);

  const BackboneConfig& config() const { return cfg_; }

  // Class-token embedding with no prompts inserted (the query path).
  Vec query_features(const Vec& image) const;

  // Class-token embedding with prompt rows appended to each layer input in
  // the insertion range and stripped from its output.
  Vec prompted_features(const Vec& image, const PromptSet& prompts) const;

  ForwardTrace prompted_forward(const Vec& image, const PromptSet& prompts) const;

  // Exact reverse-mode gradient of d_feature through the network, reported
  // for the inserted prompt rows only; backbone weights stay untouched.
  PromptSet backward_to_prompts(const ForwardTrace& trace, const Vec& d_feature) const;

  uint64_t weight_checksum() const;

 private:
  struct LayerWeights {
    Vec ln1_gamma, ln1_beta;
    Mat w_q, w_k, w_v, w_o;
    Vec b_q, b_k, b_v, b_o;
    Vec ln2_gamma, ln2_beta;
    Mat w_fc1, w_fc2;
    Vec b_fc1, b_fc2;
  };

  Mat embed_tokens(const Vec& image) const;
  Vec forward_impl(const Vec& image, const PromptSet* prompts, ForwardTrace* trace) const;
  void check_image(const Vec& image) const;
  void check_prompts(const PromptSet& prompts) const;

  BackboneConfig cfg_;
  int hidden_dim_;
  Mat patch_w;   // patch_dim x D
  Vec patch_b;
  Vec cls_token;
  Mat pos_embed;  // (1 + num_patches) x D
  std::vector<LayerWeights> layers_;
  Vec final_gamma, final_beta;
};

}  // namespace fppl
