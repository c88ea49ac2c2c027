#include "robtok/attacks.hpp"

#include "test_util.hpp"

#include <doctest.h>

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
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

// Linear toy "model": one feature token equal to x W, for x flattened per image.
struct LinearToy {
  RowMatrix w;  // [M, D]

  FeatureFn fn() const {
    const Tensor wt({w.rows(), w.cols()}, Eigen::Map<const Vector>(w.data(), w.size()));
    return [wt](const Tensor& x) {
      const Index n = x.dim(0);
      return FeatureSet{reshape(matmul(reshape(x, {n, x.size() / n}), wt), {n, 1, wt.dim(1)})};
    };
  }

  // d/dx [cos(a, b) - lambda * mean((x - x0)^2)] with a = W^T x0, b = W^T x.
  Vector gradient(const Vector& x0, const Vector& x, double lambda) const {
    const Vector a = w.transpose() * x0;
    const Vector b = w.transpose() * x;
    const double na = a.norm(), nb = b.norm();
    const double cos = a.dot(b) / (na * nb);
    const Vector db = a / (na * nb) - cos * b / (nb * nb);
    return w * db - lambda * 2.0 * (x - x0) / static_cast<double>(x.size());
  }
};

double sign(double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); }

Vector signed_step_oracle(const Vector& clean, const Vector& start, const Vector& grad, double step, double eps) {
  Vector out(clean.size());
  for (Index i = 0; i < clean.size(); ++i) {
    double v = start[i] - step * sign(grad[i]);
    v = std::min(std::max(v, clean[i] - eps), clean[i] + eps);
    out[i] = std::min(std::max(v, 0.0), 1.0);
  }
  return out;
}

}  // namespace

TEST_CASE("psnr closed forms") {
  const Vector a = Vector::Constant(300, 0.4);
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr(a, a) > 0);
  const Vector b = a.array() + 1.0 / 255.0;
  CHECK(psnr(a, b) == doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-12));
  CHECK(psnr(a, b) == doctest::Approx(48.1308).epsilon(1e-5));
  CHECK(psnr(Vector::Zero(12), Vector::Ones(12)) == doctest::Approx(0.0));
}

TEST_CASE("quantize rounds half up onto the 8-bit grid") {
  CHECK(quantize(0.0) == 0.0);
  CHECK(quantize(1.0) == 1.0);
  CHECK(quantize(0.5) == 128.0 / 255.0);
  CHECK(quantize(1.49 / 255.0) == 1.0 / 255.0);
  CHECK(quantize(1.51 / 255.0) == 2.0 / 255.0);
  const Vector x = random_tensor({500}, 3, 0.0, 1.0).value();
  const Vector q = quantize(x);
  CHECK(bit_equal(quantize(q), q));
  for (Index i = 0; i < q.size(); ++i) {
    const double k = q[i] * 255.0;
    CHECK(std::abs(k - std::round(k)) < 1e-9);
    CHECK(std::abs(q[i] - x[i]) <= 0.5 / 255.0 + 1e-15);
  }
}

TEST_CASE("attack config validation") {
  AttackConfig c;
  CHECK(c.step() == doctest::Approx(0.8 / 255.0));
  c.steps = -1;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = AttackConfig{};
  c.eps_inf = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = AttackConfig{};
  c.eps_inf = 1.5;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = AttackConfig{};
  c.step_size = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("one PGD step on the linear toy matches the analytic sign-step oracle") {
  const Index m = 3 * 2 * 2;
  LinearToy toy{random_tensor({m, 4}, 11).matrix()};
  const Tensor clean = random_images(2, 2, 12);
  // Explicit start away from the clean point, including pixels pinned at the box edge.
  Vector start = clean.value() + 0.02 * random_tensor({clean.size()}, 13).value();
  start = start.cwiseMax(0.0).cwiseMin(1.0);

  AttackConfig cfg;
  cfg.steps = 1;
  cfg.quantize = false;
  cfg.psnr_projection = false;
  cfg.eps_inf = 0.03;
  cfg.step_size = 0.004;
  for (double lambda : {0.0, 1.0, 5.0}) {
    cfg.mse_weight = lambda;
    const auto adv = pgd_feature_attack(toy.fn(), clean, cfg, Tensor(clean.shape(), start));
    REQUIRE(adv.size() == 2);
    for (Index s = 0; s < 2; ++s) {
      const Vector c = clean.value().segment(s * m, m);
      const Vector x = start.segment(s * m, m);
      const Vector expect = signed_step_oracle(c, x, toy.gradient(c, x, lambda), 0.004, 0.03);
      CHECK((adv[static_cast<std::size_t>(s)].image.value() - expect).cwiseAbs().maxCoeff() < 1e-15);
    }
  }
}

TEST_CASE("FGSM on the linear toy is one full-budget sign step") {
  const Index m = 3 * 2 * 2;
  LinearToy toy{random_tensor({m, 5}, 21).matrix()};
  const Tensor clean = random_images(3, 2, 22);
  const Vector start = (clean.value() + 0.001 * random_tensor({clean.size()}, 23).value()).cwiseMax(0.0).cwiseMin(1.0);
  AttackConfig cfg;
  cfg.quantize = false;
  cfg.psnr_projection = false;
  cfg.steps = 17;        // ignored by FGSM
  cfg.step_size = 1e-4;  // ignored by FGSM
  const auto adv = fgsm_feature_attack(toy.fn(), clean, cfg, Tensor(clean.shape(), start));
  for (Index s = 0; s < 3; ++s) {
    const Vector c = clean.value().segment(s * m, m);
    const Vector x = start.segment(s * m, m);
    const Vector expect = signed_step_oracle(c, x, toy.gradient(c, x, 1.0), cfg.eps_inf, cfg.eps_inf);
    CHECK((adv[static_cast<std::size_t>(s)].image.value() - expect).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(adv[static_cast<std::size_t>(s)].loss_trace.size() == 1);
  }

  // Same thing spelled as PGD.
  AttackConfig as_pgd = cfg;
  as_pgd.steps = 1;
  as_pgd.step_size = cfg.eps_inf;
  const auto pgd = pgd_feature_attack(toy.fn(), clean, as_pgd, Tensor(clean.shape(), start));
  for (std::size_t s = 0; s < 3; ++s) CHECK(bit_equal(pgd[s].image.value(), adv[s].image.value()));
}

TEST_CASE("zero steps returns the quantized clean image with infinite PSNR") {
  const ModelWeights model = ModelWeights::init(tiny_config(), 1, false);
  const Tensor clean = random_images(3, 8, 5);
  AttackConfig cfg;
  cfg.steps = 0;
  const auto adv = pgd_feature_attack(model, clean, cfg);
  REQUIRE(adv.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(bit_equal(adv[s].image.value(), quantize(Vector(clean.value().segment(static_cast<Index>(s) * 192, 192)))));
    CHECK(std::isinf(adv[s].psnr_db));
    CHECK(adv[s].psnr_ok);
    CHECK(adv[s].loss_trace.empty());
  }
}

TEST_CASE("constant model leaves the image unchanged") {
  const Tensor clean = random_images(2, 4, 8);
  const FeatureFn constant = [](const Tensor& x) {
    return FeatureSet{Tensor::full({x.dim(0), 2, 3}, 0.7)};
  };
  for (bool fgsm : {false, true}) {
    const auto adv = fgsm ? fgsm_feature_attack(constant, clean, AttackConfig{})
                          : pgd_feature_attack(constant, clean, AttackConfig{});
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(bit_equal(adv[s].image.value(), clean.value().segment(static_cast<Index>(s) * 48, 48)));
    }
  }
}

TEST_CASE("attack_loss at the clean image is one and mse_weight zero is pure cosine") {
  const ModelWeights model = ModelWeights::init(tiny_config(), 2, false);
  const Tensor clean = random_images(4, 8, 9);
  AttackConfig cfg;
  CHECK(attack_loss(model, clean, clean, cfg).item() == doctest::Approx(1.0).epsilon(1e-10));
  const Tensor other = random_images(4, 8, 10);
  cfg.mse_weight = 0.0;
  const double pure = feature_cosine(features(model, clean), features(model, other)).value().mean();
  CHECK(attack_loss(model, clean, other, cfg).item() == doctest::Approx(pure).epsilon(1e-12));
  cfg.mse_weight = 2.0;
  const double m = (other.value() - clean.value()).squaredNorm() / static_cast<double>(clean.size());
  CHECK(attack_loss(model, clean, other, cfg).item() == doctest::Approx(pure - 2.0 * m).epsilon(1e-12));
}

TEST_CASE("PGD on a random ViT: budget, grid, PSNR floor, frozen weights, decreasing loss") {
  const ModelWeights model = ModelWeights::init(tiny_config(), 3, false);
  const ModelWeights before = model.clone();
  const Tensor clean = random_images(6, 8, 14);
  const long grads_before = gradient_count();
  AttackConfig cfg;
  cfg.steps = 12;
  const auto adv = pgd_feature_attack(model, clean, cfg);
  CHECK(gradient_count() - grads_before == cfg.steps);
  CHECK(bit_identical(model, before));
  for (std::size_t s = 0; s < adv.size(); ++s) {
    const Vector c = clean.value().segment(static_cast<Index>(s) * 192, 192);
    const Vector& a = adv[s].image.value();
    CHECK((a - c).cwiseAbs().maxCoeff() <= cfg.eps_inf + 1.0 / 510.0 + 1e-12);
    CHECK(a.minCoeff() >= 0.0);
    CHECK(a.maxCoeff() <= 1.0);
    CHECK(bit_equal(quantize(a), a));
    CHECK(adv[s].psnr_db >= 40.0);
    CHECK(adv[s].psnr_ok);
    REQUIRE(adv[s].loss_trace.size() == 12);
    CHECK(adv[s].loss_trace.front() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(*std::min_element(adv[s].loss_trace.begin(), adv[s].loss_trace.end()) < adv[s].loss_trace.front());
  }
}

TEST_CASE("without the PSNR projection a saturated attack is flagged, not thrown") {
  const ModelWeights model = ModelWeights::init(tiny_config(), 4, false);
  const Tensor clean = Tensor::full({2, 3, 8, 8}, 0.5);
  AttackConfig cfg;
  cfg.psnr_projection = false;
  cfg.steps = 20;
  cfg.step_size = cfg.eps_inf;
  cfg.start_jitter = 1.0;
  std::vector<AdversarialExample> adv;
  CHECK_NOTHROW(adv = pgd_feature_attack(model, clean, cfg));
  for (const auto& ex : adv) {
    CHECK(ex.psnr_db < 40.0);
    CHECK_FALSE(ex.psnr_ok);
  }
}

TEST_CASE("task attack raises cross-entropy and rejects bad labels") {
  const ViTConfig cfg_model = tiny_config();
  const ModelWeights model = ModelWeights::init(cfg_model, 5, true);
  const Linear head = *model.head;
  const Tensor clean = random_images(6, 8, 15);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  AttackConfig cfg;
  cfg.steps = 10;
  const auto adv = pgd_task_attack(model, head, clean, labels, cfg);
  const double before = cross_entropy(head_logits(head, features(model, clean).class_feature()), labels).item();
  const double after = cross_entropy(head_logits(head, features(model, stack_images(adv)).class_feature()), labels).item();
  CHECK(after >= before);
  for (std::size_t s = 0; s < adv.size(); ++s) {
    const Vector c = clean.value().segment(static_cast<Index>(s) * 192, 192);
    CHECK((adv[s].image.value() - c).cwiseAbs().maxCoeff() <= cfg.eps_inf + 1.0 / 510.0 + 1e-12);
  }

  cfg.steps = 0;
  const auto noop = pgd_task_attack(model, head, clean, labels, cfg);
  CHECK(bit_equal(stack_images(noop).value(), clean.value()));

  const std::vector<int> bad{0, 1, 3, 0, 1, 2};
  CHECK_THROWS_AS(pgd_task_attack(model, head, clean, bad, cfg), ContractError);
}

TEST_CASE("attacks never see robustness tokens") {
  const ModelWeights model = ModelWeights::init(tiny_config(), 6, false);
  const Tensor clean = random_images(2, 8, 16);
  clear_attack_audit_log();
  AttackConfig cfg;
  cfg.steps = 2;
  pgd_feature_attack(model, clean, cfg);
  fgsm_feature_attack(model, clean, cfg);
  const auto log = attack_audit_log();
  REQUIRE(log.size() == 2);
  for (const auto& entry : log) {
    CHECK(entry.rob_slots == 0);
    CHECK(entry.sequence_length == 1 + model.config.num_patches());
    CHECK(entry.batch == 2);
  }
  CHECK(log[0].family == "pgd");
  CHECK(log[1].family == "fgsm");
}

TEST_CASE("attacks are deterministic") {
  const ModelWeights model = ModelWeights::init(tiny_config(), 7, false);
  const Tensor clean = random_images(3, 8, 17);
  AttackConfig cfg;
  cfg.steps = 5;
  const auto a = pgd_feature_attack(model, clean, cfg);
  const auto b = pgd_feature_attack(model, clean, cfg);
  CHECK(bit_equal(stack_images(a).value(), stack_images(b).value()));
}
