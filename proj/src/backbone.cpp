#include "fppl/backbone.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "fppl/rng.hpp"

namespace fppl {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr int kMlpRatio = 4;

// Gain of the final feature norm. Trained transformers end with output-norm
// gains well above one; keeping that property here scales features (and so
// classifier logits) up, which lets the linear head separate classes within
// a small fixed step budget. Cosine-based consumers are scale-invariant.
constexpr double kFinalGain = 12.0;

// Scale of the sample-independent token components (class token, positional
// embeddings). Keeping these small relative to the patch-content embeddings
// stops a shared constant direction from dominating every feature vector,
// which would crowd class-specific structure into a thin cosine margin.
constexpr double kConstTokenScale = 0.05;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * std::exp(-0.5 * x * x) * inv_sqrt_2pi;
}

// Row-wise layer norm; caches per-row mean and reciprocal std.
Mat layer_norm(const Mat& x, const Vec& gamma, const Vec& beta, Vec& mean_out, Vec& rstd_out) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat y(n, d);
  mean_out.resize(n);
  rstd_out.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().sum() / static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    mean_out(i) = mean;
    rstd_out(i) = rstd;
    y.row(i) = ((x.row(i).array() - mean) * rstd) * gamma.transpose().array() + beta.transpose().array();
  }
  return y;
}

// dL/dx for y = gamma .* xhat + beta given dL/dy.
Mat layer_norm_backward(const Mat& dy, const Mat& x, const Vec& mean, const Vec& rstd, const Vec& gamma) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::ArrayXd xhat = (x.row(i).transpose().array() - mean(i)) * rstd(i);
    Eigen::ArrayXd dxhat = dy.row(i).transpose().array() * gamma.array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * xhat).mean();
    dx.row(i) = (rstd(i) * (dxhat - m1 - xhat * m2)).matrix().transpose();
  }
  return dx;
}

Mat softmax_rows(const Mat& s) {
  Mat p(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::ArrayXd e = (s.row(i).array() - s.row(i).maxCoeff()).exp();
    p.row(i) = (e / e.sum()).matrix().transpose();
  }
  return p;
}

// dS for P = softmax_rows(S) given dP.
Mat softmax_rows_backward(const Mat& p, const Mat& dp) {
  Mat ds(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double dot = (dp.row(i).array() * p.row(i).array()).sum();
    ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
  }
  return ds;
}

Mat random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = dist(rng);
    }
  }
  return m;
}

Vec random_vector(std::mt19937_64& rng, Eigen::Index n, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v(i) = dist(rng);
  }
  return v;
}

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

}  // namespace

void BackboneConfig::validate() const {
  if (embed_dim <= 0) fail("backbone: embed_dim must be positive");
  if (num_layers <= 0) fail("backbone: num_layers must be positive");
  if (num_heads <= 0) fail("backbone: num_heads must be positive");
  if (embed_dim % num_heads != 0) {
    std::ostringstream os;
    os << "backbone: num_heads (" << num_heads << ") does not divide embed_dim (" << embed_dim << ")";
    fail(os.str());
  }
  if (patch_size <= 0) fail("backbone: patch_size must be positive");
  if (image_side <= 0) fail("backbone: image_side must be positive");
  if (image_side % patch_size != 0) fail("backbone: image_side must be a multiple of patch_size");
  if (channels <= 0) fail("backbone: channels must be positive");
  if (insert_start < 1) fail("backbone: insert_start must be >= 1");
  if (insert_end < insert_start) fail("backbone: insert_end must be >= insert_start");
  if (insert_end > num_layers) fail("backbone: insert_end exceeds num_layers");
}

PromptSet PromptSet::zeros(int first_layer, int span, int prompt_len, int embed_dim) {
  PromptSet p;
  p.first_layer = first_layer;
  p.layers.assign(static_cast<size_t>(span), Mat::Zero(prompt_len, embed_dim));
  return p;
}

void PromptSet::validate() const {
  for (const Mat& m : layers) {
    if (m.rows() != layers.front().rows() || m.cols() != layers.front().cols()) {
      fail("prompt set: all layer matrices must share prompt_len x embed_dim");
    }
  }
}

uint64_t PromptSet::checksum() const {
  Checksum c;
  for (const Mat& m : layers) c.add(m);
  return c.value();
}

PromptSet operator*(double s, const PromptSet& p) {
  PromptSet out = p;
  for (Mat& m : out.layers) m *= s;
  return out;
}

PromptSet& operator+=(PromptSet& a, const PromptSet& b) {
  if (a.layers.size() != b.layers.size() || a.first_layer != b.first_layer) {
    fail("prompt set: shape mismatch in addition");
  }
  for (size_t i = 0; i < a.layers.size(); ++i) a.layers[i] += b.layers[i];
  return a;
}

FrozenBackbone::FrozenBackbone(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  hidden_dim_ = kMlpRatio * cfg_.embed_dim;
  const int d = cfg_.embed_dim;
  std::mt19937_64 rng(cfg_.seed);

  const double patch_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim()));
  const double d_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double hidden_scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim_));

  patch_w = random_matrix(rng, cfg_.patch_dim(), d, patch_scale);
  // Zero-mean columns: uniform image brightness maps to the zero embedding, so
  // features respond to patch contrast rather than a shared baseline.
  patch_w.rowwise() -= patch_w.colwise().mean();
  patch_b = Vec::Zero(d);
  cls_token = random_vector(rng, d, kConstTokenScale);
  pos_embed = random_matrix(rng, 1 + cfg_.num_patches(), d, kConstTokenScale);

  layers_.resize(static_cast<size_t>(cfg_.num_layers));
  for (LayerWeights& lw : layers_) {
    lw.ln1_gamma = Vec::Ones(d);
    lw.ln1_beta = Vec::Zero(d);
    lw.w_q = random_matrix(rng, d, d, d_scale);
    lw.w_k = random_matrix(rng, d, d, d_scale);
    lw.w_v = random_matrix(rng, d, d, d_scale);
    lw.w_o = random_matrix(rng, d, d, d_scale);
    lw.b_q = Vec::Zero(d);
    lw.b_k = Vec::Zero(d);
    lw.b_v = Vec::Zero(d);
    lw.b_o = Vec::Zero(d);
    lw.ln2_gamma = Vec::Ones(d);
    lw.ln2_beta = Vec::Zero(d);
    lw.w_fc1 = random_matrix(rng, d, hidden_dim_, d_scale);
    lw.w_fc2 = random_matrix(rng, hidden_dim_, d, hidden_scale);
    lw.b_fc1 = Vec::Zero(hidden_dim_);
    lw.b_fc2 = Vec::Zero(d);
  }
  final_gamma = Vec::Constant(d, kFinalGain);
  final_beta = Vec::Zero(d);
}

void FrozenBackbone::check_image(const Vec& image) const {
  if (image.size() != cfg_.image_dim()) {
    std::ostringstream os;
    os << "backbone: image has " << image.size() << " values, expected " << cfg_.image_dim();
    fail(os.str());
  }
}

void FrozenBackbone::check_prompts(const PromptSet& prompts) const {
  if (prompts.empty()) return;
  prompts.validate();
  if (prompts.first_layer != cfg_.insert_start || prompts.span() != cfg_.insert_layer_count()) {
    fail("backbone: prompt layer range does not match the insertion range");
  }
  if (prompts.layers.front().cols() != cfg_.embed_dim) {
    fail("backbone: prompt embed dim does not match backbone");
  }
}

// Pixel layout: [channel][row][col], patches in row-major grid order.
Mat FrozenBackbone::embed_tokens(const Vec& image) const {
  const int d = cfg_.embed_dim;
  const int p = cfg_.patch_size;
  const int side = cfg_.image_side;
  const int grid = cfg_.patches_per_side();
  Mat tokens(1 + cfg_.num_patches(), d);
  tokens.row(0) = cls_token.transpose();
  Vec patch(cfg_.patch_dim());
  for (int py = 0; py < grid; ++py) {
    for (int px = 0; px < grid; ++px) {
      int idx = 0;
      for (int c = 0; c < cfg_.channels; ++c) {
        for (int dy = 0; dy < p; ++dy) {
          for (int dx = 0; dx < p; ++dx) {
            patch(idx++) = image(c * side * side + (py * p + dy) * side + (px * p + dx));
          }
        }
      }
      tokens.row(1 + py * grid + px) = (patch_w.transpose() * patch + patch_b).transpose();
    }
  }
  tokens += pos_embed;
  return tokens;
}

Vec FrozenBackbone::forward_impl(const Vec& image, const PromptSet* prompts, ForwardTrace* trace) const {
  check_image(image);
  const bool insert = prompts != nullptr && !prompts->empty();
  if (prompts != nullptr) check_prompts(*prompts);

  const int d = cfg_.embed_dim;
  const int heads = cfg_.num_heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const int lp = insert ? prompts->prompt_len() : 0;

  Mat x = embed_tokens(image);
  const int base_tokens = static_cast<int>(x.rows());

  if (trace != nullptr) {
    trace->layers.resize(static_cast<size_t>(cfg_.num_layers));
    trace->has_prompts = insert;
    trace->prompt_first_layer = cfg_.insert_start;
    trace->prompt_span = cfg_.insert_layer_count();
    trace->prompt_len = lp;
  }

  for (int l = 0; l < cfg_.num_layers; ++l) {
    const LayerWeights& lw = layers_[static_cast<size_t>(l)];
    const int layer_1b = l + 1;
    const bool layer_prompted = insert && layer_1b >= cfg_.insert_start && layer_1b <= cfg_.insert_end;

    Mat x_aug;
    if (layer_prompted) {
      const Mat& pm = prompts->layers[static_cast<size_t>(layer_1b - prompts->first_layer)];
      x_aug.resize(base_tokens + lp, d);
      x_aug.topRows(base_tokens) = x;
      x_aug.bottomRows(lp) = pm;
    } else {
      x_aug = x;
    }
    const Eigen::Index m = x_aug.rows();

    Vec ln1_mean, ln1_rstd;
    Mat a = layer_norm(x_aug, lw.ln1_gamma, lw.ln1_beta, ln1_mean, ln1_rstd);

    Mat q = a * lw.w_q;
    q.rowwise() += lw.b_q.transpose();
    Mat k = a * lw.w_k;
    k.rowwise() += lw.b_k.transpose();
    Mat v = a * lw.w_v;
    v.rowwise() += lw.b_v.transpose();

    Mat o(m, d);
    std::vector<Mat> attn(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto qh = q.middleCols(h * dh, dh);
      auto kh = k.middleCols(h * dh, dh);
      auto vh = v.middleCols(h * dh, dh);
      Mat scores = qh * kh.transpose() * inv_sqrt_dh;
      attn[static_cast<size_t>(h)] = softmax_rows(scores);
      o.middleCols(h * dh, dh) = attn[static_cast<size_t>(h)] * vh;
    }

    Mat attn_out = o * lw.w_o;
    attn_out.rowwise() += lw.b_o.transpose();
    Mat r1 = x_aug + attn_out;

    Vec ln2_mean, ln2_rstd;
    Mat b = layer_norm(r1, lw.ln2_gamma, lw.ln2_beta, ln2_mean, ln2_rstd);
    Mat h1 = b * lw.w_fc1;
    h1.rowwise() += lw.b_fc1.transpose();
    Mat g = h1.unaryExpr([](double u) { return gelu(u); });
    Mat h2 = g * lw.w_fc2;
    h2.rowwise() += lw.b_fc2.transpose();
    Mat r2 = r1 + h2;

    if (trace != nullptr) {
      ForwardTrace::LayerTrace& lt = trace->layers[static_cast<size_t>(l)];
      lt.x_aug = std::move(x_aug);
      lt.ln1_mean = std::move(ln1_mean);
      lt.ln1_rstd = std::move(ln1_rstd);
      lt.q = std::move(q);
      lt.k = std::move(k);
      lt.v = std::move(v);
      lt.attn = std::move(attn);
      lt.r1 = std::move(r1);
      lt.ln2_mean = std::move(ln2_mean);
      lt.ln2_rstd = std::move(ln2_rstd);
      lt.h1 = std::move(h1);
      lt.base_tokens = base_tokens;
    }

    x = r2.topRows(base_tokens);
  }

  // Final norm on the class token.
  Vec cls = x.row(0).transpose();
  const double mean = cls.mean();
  const double var = (cls.array() - mean).square().sum() / static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  Vec feature =
      (((cls.array() - mean) * rstd) * final_gamma.array() + final_beta.array()).matrix();

  if (trace != nullptr) {
    trace->cls_in = cls;
    trace->final_mean = mean;
    trace->final_rstd = rstd;
    trace->feature = feature;
  }
  return feature;
}

Vec FrozenBackbone::query_features(const Vec& image) const {
  return forward_impl(image, nullptr, nullptr);
}

Vec FrozenBackbone::prompted_features(const Vec& image, const PromptSet& prompts) const {
  return forward_impl(image, &prompts, nullptr);
}

ForwardTrace FrozenBackbone::prompted_forward(const Vec& image, const PromptSet& prompts) const {
  ForwardTrace trace;
  forward_impl(image, &prompts, &trace);
  return trace;
}

PromptSet FrozenBackbone::backward_to_prompts(const ForwardTrace& trace, const Vec& d_feature) const {
  const int d = cfg_.embed_dim;
  const int heads = cfg_.num_heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const int lp = trace.prompt_len;

  PromptSet d_prompts =
      PromptSet::zeros(trace.prompt_first_layer, trace.has_prompts ? trace.prompt_span : 0, lp, d);

  // Final layer norm backward on the class token row.
  Eigen::ArrayXd xhat = (trace.cls_in.array() - trace.final_mean) * trace.final_rstd;
  Eigen::ArrayXd dxhat = d_feature.array() * final_gamma.array();
  const double m1 = dxhat.mean();
  const double m2 = (dxhat * xhat).mean();
  Vec d_cls = (trace.final_rstd * (dxhat - m1 - xhat * m2)).matrix();

  const int base_tokens = trace.layers.front().base_tokens;
  Mat dx = Mat::Zero(base_tokens, d);
  dx.row(0) = d_cls.transpose();

  for (int l = cfg_.num_layers - 1; l >= 0; --l) {
    const LayerWeights& lw = layers_[static_cast<size_t>(l)];
    const ForwardTrace::LayerTrace& lt = trace.layers[static_cast<size_t>(l)];
    const int layer_1b = l + 1;
    const Eigen::Index m = lt.x_aug.rows();
    const bool layer_prompted = m > base_tokens;

    // Prompt rows were stripped after the block, so their downstream
    // gradient is zero.
    Mat dr2 = Mat::Zero(m, d);
    dr2.topRows(base_tokens) = dx;

    Mat dr1 = dr2;
    // MLP branch.
    Mat dg = dr2 * lw.w_fc2.transpose();
    Mat dh1 = dg.cwiseProduct(lt.h1.unaryExpr([](double u) { return gelu_grad(u); }));
    Mat db = dh1 * lw.w_fc1.transpose();
    dr1 += layer_norm_backward(db, lt.r1, lt.ln2_mean, lt.ln2_rstd, lw.ln2_gamma);

    Mat dx_aug = dr1;
    // Attention branch.
    Mat do_ = dr1 * lw.w_o.transpose();
    Mat dq(m, d), dk(m, d), dv(m, d);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = lt.attn[static_cast<size_t>(h)];
      auto qh = lt.q.middleCols(h * dh, dh);
      auto kh = lt.k.middleCols(h * dh, dh);
      auto vh = lt.v.middleCols(h * dh, dh);
      auto doh = do_.middleCols(h * dh, dh);
      Mat dp = doh * vh.transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * doh;
      Mat ds = softmax_rows_backward(p, dp);
      dq.middleCols(h * dh, dh) = ds * kh * inv_sqrt_dh;
      dk.middleCols(h * dh, dh) = ds.transpose() * qh * inv_sqrt_dh;
    }
    Mat da = dq * lw.w_q.transpose() + dk * lw.w_k.transpose() + dv * lw.w_v.transpose();
    dx_aug += layer_norm_backward(da, lt.x_aug, lt.ln1_mean, lt.ln1_rstd, lw.ln1_gamma);

    if (layer_prompted) {
      d_prompts.layers[static_cast<size_t>(layer_1b - trace.prompt_first_layer)] =
          dx_aug.bottomRows(lp);
    }
    dx = dx_aug.topRows(base_tokens);
  }
  return d_prompts;
}

uint64_t FrozenBackbone::weight_checksum() const {
  Checksum c;
  c.add(patch_w);
  c.add(patch_b);
  c.add(cls_token);
  c.add(pos_embed);
  for (const LayerWeights& lw : layers_) {
    c.add(lw.ln1_gamma);
    c.add(lw.ln1_beta);
    c.add(lw.w_q);
    c.add(lw.w_k);
    c.add(lw.w_v);
    c.add(lw.w_o);
    c.add(lw.b_q);
    c.add(lw.b_k);
    c.add(lw.b_v);
    c.add(lw.b_o);
    c.add(lw.ln2_gamma);
    c.add(lw.ln2_beta);
    c.add(lw.w_fc1);
    c.add(lw.w_fc2);
    c.add(lw.b_fc1);
    c.add(lw.b_fc2);
  }
  c.add(final_gamma);
  c.add(final_beta);
  return c.value();
}

}  // namespace fppl
