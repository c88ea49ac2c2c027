#include "doctest.h"

#include "robtok/grad_check.hpp"
#include "robtok/vit.hpp"
#include "test_util.hpp"

#include <array>
#include <cmath>

using namespace robtok;
using robtok::testing::bit_equal;
using robtok::testing::random_images;
using robtok::testing::random_tensor;

namespace {

ViTConfig tiny_config() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

// Inverse of patchify, written independently for the round-trip check.
Vector unpatchify(const Tensor& patches, const ViTConfig& c) {
  const Index n = patches.dim(0), g = c.grid(), ps = c.patch_size, s = c.image_size;
  Vector img(n * c.channels * s * s);
  const auto& v = patches.value();
  Index k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index p = 0; p < g * g; ++p)
      for (Index dy = 0; dy < ps; ++dy)
        for (Index dx = 0; dx < ps; ++dx)
          for (Index ch = 0; ch < c.channels; ++ch) {
            const Index y = (p / g) * ps + dy, x = (p % g) * ps + dx;
            img[((i * c.channels + ch) * s + y) * s + x] = v[k++];
          }
  return img;
}

void randomize_norm(LayerNormParams& p, std::uint64_t seed) {
  p.gamma.mutable_value() = random_tensor(p.gamma.shape(), seed, 0.5, 1.5).value();
  p.beta.mutable_value() = random_tensor(p.beta.shape(), seed + 1, -0.3, 0.3).value();
}

using Row = std::array<double, 2>;

Row ln2(const Row& v, const Vector& g, const Vector& b, double eps) {
  const double mu = 0.5 * (v[0] + v[1]);
  const double var = 0.5 * ((v[0] - mu) * (v[0] - mu) + (v[1] - mu) * (v[1] - mu));
  const double s = 1.0 / std::sqrt(var + eps);
  return {(v[0] - mu) * s * g[0] + b[0], (v[1] - mu) * s * g[1] + b[1]};
}

}  // namespace

TEST_CASE("patchify geometry") {
  ViTConfig c;
  c.patch_size = 8;
  auto images = random_images(2, 32, 1);
  auto p = patchify(images, c);
  CHECK(p.shape() == Shape{2, 16, 192});
  CHECK(bit_equal(unpatchify(p, c), images.value()));

  auto flat = patchify(Tensor::full({1, 3, 32, 32}, 0.25), c);
  for (Index i = 1; i < 16; ++i) CHECK(flat.matrix().row(i) == flat.matrix().row(0));

  CHECK_THROWS_AS(patchify(Tensor::zeros({1, 3, 30, 30}), c), ShapeError);
}

TEST_CASE("config validation") {
  ViTConfig c;
  c.patch_size = 7;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = ViTConfig{};
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("embed layout and counts") {
  ViTConfig c;
  c.patch_size = 8;
  c.dim = 64;
  auto model = ModelWeights::init(c, 1);
  auto images = random_images(2, 32, 2);
  auto seq = embed(model, images);
  CHECK(seq.tokens.shape() == Shape{2, 17, 64});
  CHECK(seq.layout.length() == 17);

  c.num_registers = 4;
  auto with_reg = ModelWeights::init(c, 1);
  auto rob = random_tensor({10, 64}, 3);
  auto seq2 = embed(with_reg, images, rob);
  CHECK(seq2.tokens.shape() == Shape{2, 31, 64});
  const auto& l = seq2.layout;
  CHECK(l.rob_begin == 0);
  CHECK(l.rob_end == 10);
  CHECK(l.cls == 10);
  CHECK(l.reg_begin == 11);
  CHECK(l.reg_end == 15);
  CHECK(l.patch_begin == 15);
  CHECK(l.patch_end == 31);
  // Robustness slots carry the raw token values: no positional embedding.
  CHECK(bit_equal(slice(slice(seq2.tokens, 0, 1, 2), 1, 0, 10).value(), rob.value()));

  CHECK_THROWS_AS(embed(model, images, random_tensor({10, 63}, 3)), ShapeError);
}

TEST_CASE("forward preserves shape and is permutation-equivariant over patch tokens") {
  auto c = tiny_config();
  auto model = ModelWeights::init(c, 4);
  auto seq = embed(model, random_images(1, 8, 5), random_tensor({2, 8}, 6));
  auto out = forward(model, seq);
  CHECK(out.output.tokens.shape() == seq.tokens.shape());
  CHECK(out.hidden.size() == static_cast<size_t>(c.depth + 1));

  // Swap patch slots a and b (token values already include positions).
  const Index t = seq.tokens.dim(1), d = c.dim;
  const Index a = seq.layout.patch_begin, b = seq.layout.patch_begin + 2;
  std::vector<Index> idx;
  for (Index i = 0; i < t; ++i) {
    const Index src = i == a ? b : i == b ? a : i;
    for (Index j = 0; j < d; ++j) idx.push_back(src * d + j);
  }
  TokenSequence swapped{gather(seq.tokens, idx, seq.tokens.shape()), seq.layout};
  auto out2 = forward(model, swapped).output.tokens;
  auto expect = gather(out.output.tokens, idx, seq.tokens.shape());
  CHECK((out2.value() - expect.value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single block matches a straight-line attention oracle") {
  ViTConfig c;
  c.image_size = 4;
  c.patch_size = 4;
  c.dim = 2;
  c.depth = 1;
  c.heads = 1;
  c.mlp_ratio = 4;
  auto model = ModelWeights::init(c, 9);
  auto& blk = model.blocks[0];
  randomize_norm(blk.norm1, 10);
  randomize_norm(blk.norm2, 12);
  randomize_norm(model.norm, 14);
  blk.qkv.bias.mutable_value() = random_tensor({6}, 16, -0.2, 0.2).value();
  blk.fc1.bias.mutable_value() = random_tensor({8}, 17, -0.2, 0.2).value();

  const std::array<Row, 2> x{{{0.7, -0.4}, {-1.1, 0.9}}};
  SequenceLayout layout;
  layout.cls = 0;
  layout.reg_begin = layout.reg_end = 1;
  layout.patch_begin = 1;
  layout.patch_end = 2;
  TokenSequence seq{Tensor::from({1, 2, 2}, {x[0][0], x[0][1], x[1][0], x[1][1]}), layout};
  auto out = forward(model, seq);

  const double eps = c.ln_eps;
  const auto& wqkv = blk.qkv.weight.value();  // [2, 6] row-major
  const auto& bqkv = blk.qkv.bias.value();
  std::array<std::array<double, 6>, 2> qkv{};
  std::array<Row, 2> h{};
  for (int i = 0; i < 2; ++i) {
    h[i] = ln2(x[i], blk.norm1.gamma.value(), blk.norm1.beta.value(), eps);
    for (int j = 0; j < 6; ++j) qkv[i][j] = h[i][0] * wqkv[0 * 6 + j] + h[i][1] * wqkv[1 * 6 + j] + bqkv[j];
  }
  std::array<Row, 2> x1{};
  for (int i = 0; i < 2; ++i) {
    double s[2], z = 0.0;
    for (int j = 0; j < 2; ++j) {
      s[j] = (qkv[i][0] * qkv[j][2] + qkv[i][1] * qkv[j][3]) / std::sqrt(2.0);
    }
    const double m = std::max(s[0], s[1]);
    for (int j = 0; j < 2; ++j) z += (s[j] = std::exp(s[j] - m));
    Row o{};
    for (int j = 0; j < 2; ++j) {
      o[0] += s[j] / z * qkv[j][4];
      o[1] += s[j] / z * qkv[j][5];
    }
    const auto& wp = blk.proj.weight.value();
    const auto& bp = blk.proj.bias.value();
    for (int k = 0; k < 2; ++k) x1[i][k] = x[i][k] + o[0] * wp[0 * 2 + k] + o[1] * wp[1 * 2 + k] + bp[k];
  }
  for (int i = 0; i < 2; ++i) {
    const Row h2 = ln2(x1[i], blk.norm2.gamma.value(), blk.norm2.beta.value(), eps);
    const auto& w1 = blk.fc1.weight.value();  // [2, 8]
    const auto& b1 = blk.fc1.bias.value();
    const auto& w2 = blk.fc2.weight.value();  // [8, 2]
    const auto& b2 = blk.fc2.bias.value();
    Row x2 = x1[i];
    for (int u = 0; u < 8; ++u) {
      const double pre = h2[0] * w1[u] + h2[1] * w1[8 + u] + b1[u];
      const double act = 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
      x2[0] += act * w2[u * 2 + 0];
      x2[1] += act * w2[u * 2 + 1];
    }
    for (int k = 0; k < 2; ++k) x2[k] += b2[k];
    CHECK(out.hidden[1].value()[i * 2 + 0] == doctest::Approx(x2[0]).epsilon(1e-10));
    CHECK(out.hidden[1].value()[i * 2 + 1] == doctest::Approx(x2[1]).epsilon(1e-10));
    const Row y = ln2(x2, model.norm.gamma.value(), model.norm.beta.value(), eps);
    CHECK(std::abs(out.output.tokens.value()[i * 2 + 0] - y[0]) < 1e-10);
    CHECK(std::abs(out.output.tokens.value()[i * 2 + 1] - y[1]) < 1e-10);
  }
}

TEST_CASE("features: shapes, empty-token identity, determinism") {
  ViTConfig c;
  c.patch_size = 8;
  c.dim = 64;
  auto model = ModelWeights::init(c, 21);
  auto images = random_images(2, 32, 22);
  auto f = features(model, images);
  CHECK(f.class_feature().shape() == Shape{2, 64});
  CHECK(f.patch_features().shape() == Shape{2, 16, 64});

  auto empty = features(model, images, Tensor::zeros({0, 64}));
  CHECK(bit_equal(empty.tokens.value(), f.tokens.value()));
  CHECK(bit_equal(features(model, images).tokens.value(), f.tokens.value()));

  c.num_registers = 2;
  auto reg_model = ModelWeights::init(c, 21);
  CHECK(features(reg_model, images, random_tensor({3, 64}, 1)).tokens.shape() == Shape{2, 17, 64});
}

TEST_CASE("feature_cosine aggregation") {
  auto a = random_tensor({1, 4, 3}, 31);
  CHECK(feature_cosine({a}, {a})[0] == doctest::Approx(1.0).epsilon(1e-11));

  auto e0 = Tensor::from({1, 2, 2}, {1, 0, 1, 0});
  auto e1 = Tensor::from({1, 2, 2}, {0, 1, 0, 1});
  CHECK(feature_cosine({e0}, {e1})[0] == 0.0);

  auto half = Tensor::from({1, 2, 2}, {1, 0, 0, 1});
  CHECK(feature_cosine({e0}, {half})[0] == doctest::Approx(0.5).epsilon(1e-11));

  // A zero token falls back to 0 similarity instead of NaN.
  auto zero = Tensor::from({1, 2, 2}, {0, 0, 1, 0});
  CHECK(feature_cosine({zero}, {e0})[0] == doctest::Approx(0.5).epsilon(1e-12));

  CHECK(feature_cosine({e0}, {e0}, FeatureAggregation::Flattened)[0] == doctest::Approx(1.0));
  CHECK_THROWS_AS(feature_cosine({e0}, {random_tensor({1, 3, 2}, 1)}), ShapeError);
}

TEST_CASE("activation stats equal a brute-force scan of stored activations") {
  ViTConfig c = tiny_config();
  c.num_registers = 2;
  auto model = ModelWeights::init(c, 41);
  auto seq = embed(model, random_images(3, 8, 42), random_tensor({2, 8}, 43, -5.0, 5.0));
  auto out = forward(model, seq);
  REQUIRE(out.stats.size() == 3);
  const auto& l = seq.layout;
  for (Index i = 0; i < 3; ++i) {
    REQUIRE(out.stats[i].max_abs.size() == static_cast<size_t>(c.depth + 1));
    for (size_t layer = 0; layer < out.hidden.size(); ++layer) {
      double brute = 0.0;
      for (Index tok = 0; tok < l.length(); ++tok) {
        const bool counted = tok == l.cls || (tok >= l.patch_begin && tok < l.patch_end);
        if (!counted) continue;
        for (Index j = 0; j < c.dim; ++j) {
          brute = std::max(brute, std::abs(out.hidden[layer].value()[(i * l.length() + tok) * c.dim + j]));
        }
      }
      CHECK(out.stats[i].max_abs[layer] == brute);
    }
  }
}

TEST_CASE("gradients reach robustness tokens and the full toy ViT loss passes grad_check") {
  auto c = tiny_config();
  auto model = ModelWeights::init(c, 51);
  auto images = random_images(2, 8, 52);
  auto clean = features(model, images).tokens.detach();
  auto loss = [&](const Tensor& rob) { return sum(feature_cosine({clean}, features(model, images, rob))); };

  auto r = grad_check(loss, random_tensor({3, 8}, 53, -0.5, 0.5));
  CHECK(r.max_relative_error < 1e-3);
  CHECK(r.analytic.cwiseAbs().maxCoeff() > 1e-8);

  // Same check w.r.t. pixels, which is what the attack differentiates.
  auto pix = [&](const Tensor& x) { return sum(feature_cosine({clean}, features(model, x))); };
  auto p = grad_check(pix, random_images(2, 8, 55));
  CHECK(p.max_relative_error < 1e-3);
}
