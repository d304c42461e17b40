#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "fppl/backbone.hpp"
#include "fppl/rng.hpp"

using namespace fppl;

namespace {

BackboneConfig small_config(uint64_t seed = 7) {
  BackboneConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 4;
  c.patch_size = 4;
  c.image_side = 8;
  c.channels = 1;
  c.insert_start = 1;
  c.insert_end = 2;
  c.seed = seed;
  return c;
}

Vec random_image(const BackboneConfig& c, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Vec img(c.image_dim());
  for (Eigen::Index i = 0; i < img.size(); ++i) img(i) = dist(rng);
  return img;
}

PromptSet random_prompts(const BackboneConfig& c, int prompt_len, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  PromptSet p;
  p.first_layer = c.insert_start;
  p.layers.assign(static_cast<size_t>(c.insert_layer_count()), Mat(prompt_len, c.embed_dim));
  for (Mat& m : p.layers) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index col = 0; col < m.cols(); ++col) m(r, col) = dist(rng);
    }
  }
  return p;
}

}  // namespace

TEST_CASE("config validation names the violated constraint") {
  BackboneConfig c = small_config();
  CHECK_NOTHROW(c.validate());

  BackboneConfig bad_heads = c;
  bad_heads.num_heads = 3;  // 3 does not divide 16
  CHECK_THROWS_AS(bad_heads.validate(), std::invalid_argument);

  BackboneConfig bad_insert = c;
  bad_insert.insert_end = 3;  // only 2 layers exist
  CHECK_THROWS_AS(bad_insert.validate(), std::invalid_argument);

  BackboneConfig bad_patch = c;
  bad_patch.patch_size = 3;  // 3 does not divide 8
  CHECK_THROWS_AS(bad_patch.validate(), std::invalid_argument);

  BackboneConfig bad_dim = c;
  bad_dim.embed_dim = 0;
  CHECK_THROWS_AS(bad_dim.validate(), std::invalid_argument);

  CHECK_THROWS_AS(FrozenBackbone{bad_heads}, std::invalid_argument);
}

TEST_CASE("derived dimensions") {
  BackboneConfig c = small_config();
  CHECK(c.insert_layer_count() == 2);
  CHECK(c.patches_per_side() == 2);
  CHECK(c.num_patches() == 4);
  CHECK(c.patch_dim() == 16);
  CHECK(c.image_dim() == 64);
}

TEST_CASE("same config and seed build identical networks") {
  BackboneConfig c = small_config(11);
  FrozenBackbone a(c), b(c);
  CHECK(a.weight_checksum() == b.weight_checksum());
  Vec img = random_image(c, 1);
  Vec fa = a.query_features(img);
  Vec fb = b.query_features(img);
  CHECK(fa.size() == c.embed_dim);
  CHECK((fa - fb).cwiseAbs().maxCoeff() == 0.0);

  BackboneConfig other = small_config(12);
  FrozenBackbone o(other);
  CHECK(o.weight_checksum() != a.weight_checksum());
}

TEST_CASE("query path is pure and non-degenerate") {
  BackboneConfig c = small_config();
  FrozenBackbone net(c);
  Vec img1 = random_image(c, 21);
  Vec img2 = random_image(c, 22);

  Vec f1a = net.query_features(img1);
  Vec f1b = net.query_features(img1);
  CHECK((f1a - f1b).cwiseAbs().maxCoeff() == 0.0);

  Vec f2 = net.query_features(img2);
  CHECK((f1a - f2).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("image size mismatch is rejected") {
  FrozenBackbone net(small_config());
  Vec tiny = Vec::Zero(10);
  CHECK_THROWS_AS(net.query_features(tiny), std::invalid_argument);
}

TEST_CASE("empty prompt insertion is the identity") {
  BackboneConfig c = small_config();
  FrozenBackbone net(c);
  Vec img = random_image(c, 31);
  Vec q = net.query_features(img);

  PromptSet none;  // no layers at all
  Vec f_none = net.prompted_features(img, none);
  CHECK((q - f_none).cwiseAbs().maxCoeff() == 0.0);

  PromptSet zero_len = PromptSet::zeros(c.insert_start, c.insert_layer_count(), 0, c.embed_dim);
  Vec f_zero = net.prompted_features(img, zero_len);
  CHECK((q - f_zero).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("prompted features react to prompt changes") {
  BackboneConfig c = small_config();
  FrozenBackbone net(c);
  Vec img = random_image(c, 41);
  PromptSet p = random_prompts(c, 2, 42);
  Vec f1 = net.prompted_features(img, p);
  Vec f1_again = net.prompted_features(img, p);
  CHECK((f1 - f1_again).cwiseAbs().maxCoeff() == 0.0);

  PromptSet p2 = p;
  p2.layers[0](0, 0) += 1.0;
  Vec f2 = net.prompted_features(img, p2);
  CHECK((f1 - f2).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("prompt shape mismatches are rejected") {
  BackboneConfig c = small_config();
  FrozenBackbone net(c);
  Vec img = random_image(c, 51);

  PromptSet wrong_span = random_prompts(c, 2, 52);
  wrong_span.layers.pop_back();
  CHECK_THROWS_AS(net.prompted_features(img, wrong_span), std::invalid_argument);

  PromptSet wrong_start = random_prompts(c, 2, 53);
  wrong_start.first_layer = 2;
  CHECK_THROWS_AS(net.prompted_features(img, wrong_start), std::invalid_argument);

  PromptSet wrong_dim = wrong_start;
  wrong_dim.first_layer = c.insert_start;
  for (Mat& m : wrong_dim.layers) m = Mat::Zero(2, c.embed_dim + 1);
  CHECK_THROWS_AS(net.prompted_features(img, wrong_dim), std::invalid_argument);
}

TEST_CASE("prompt gradient matches central finite differences") {
  // Scalar objective s = u . feature; backward_to_prompts must reproduce
  // ds/dP for every prompt coordinate.
  BackboneConfig c = small_config(77);
  FrozenBackbone net(c);
  Vec img = random_image(c, 61);
  PromptSet p = random_prompts(c, 2, 62);

  std::mt19937_64 rng(63);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Vec u(c.embed_dim);
  for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = dist(rng);

  ForwardTrace trace = net.prompted_forward(img, p);
  CHECK((trace.feature - net.prompted_features(img, p)).cwiseAbs().maxCoeff() == 0.0);
  PromptSet analytic = net.backward_to_prompts(trace, u);
  REQUIRE(analytic.span() == p.span());

  const double h = 1e-5;
  double worst = 0.0;
  for (size_t l = 0; l < p.layers.size(); ++l) {
    for (Eigen::Index r = 0; r < p.layers[l].rows(); ++r) {
      for (Eigen::Index col = 0; col < p.layers[l].cols(); ++col) {
        PromptSet plus = p, minus = p;
        plus.layers[l](r, col) += h;
        minus.layers[l](r, col) -= h;
        const double fd =
            (u.dot(net.prompted_features(img, plus)) - u.dot(net.prompted_features(img, minus))) /
            (2.0 * h);
        const double an = analytic.layers[l](r, col);
        const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, err);
      }
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("prompt rows do not leak into the next layer") {
  // A prompt on layer 1 only must still influence the feature (through
  // attention) even though its rows are stripped after the block.
  BackboneConfig c = small_config();
  c.insert_start = 1;
  c.insert_end = 1;
  FrozenBackbone net(c);
  Vec img = random_image(c, 71);
  PromptSet p = random_prompts(c, 3, 72);
  REQUIRE(p.span() == 1);
  Vec f = net.prompted_features(img, p);
  Vec q = net.query_features(img);
  CHECK(f.size() == q.size());
  CHECK((f - q).cwiseAbs().maxCoeff() > 0.0);
}
