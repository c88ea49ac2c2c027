#include "robtok/vit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

namespace robtok {

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || dim <= 0 || depth < 0 || heads <= 0 || mlp_ratio <= 0) {
    throw ContractError("ViT config extents must be positive");
  }
  if (image_size % patch_size != 0) throw ContractError("image_size must be divisible by patch_size");
  if (dim % heads != 0) throw ContractError("dim must be divisible by heads");
  if (num_registers < 0) throw ContractError("num_registers must be >= 0");
  if (num_classes <= 0) throw ContractError("num_classes must be positive");
  if (!(ln_eps > 0.0)) throw ContractError("ln_eps must be positive");
  if (!(pixel_std > 0.0) || !std::isfinite(pixel_mean)) throw ContractError("pixel normalization must have std > 0");
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor xavier(Index in, Index out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Vector v(in * out);
    for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng_);
    return Tensor({in, out}, std::move(v));
  }

  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Vector v(numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng_);
    return Tensor(std::move(shape), std::move(v));
  }

  Linear linear(Index in, Index out) { return {xavier(in, out), Tensor::zeros({out})}; }

 private:
  std::mt19937_64 rng_;
};

LayerNormParams unit_norm(Index d) { return {Tensor::full({d}, 1.0), Tensor::zeros({d})}; }

template <class F>
void for_each_tensor(const ModelWeights& m, F&& f) {
  for (auto& [name, t] : m.named_tensors()) f(name, t);
}

Tensor attention(const BlockWeights& b, const Tensor& x, int heads) {
  const Index n = x.dim(0), t = x.dim(1), d = x.dim(2);
  const Index hd = d / heads;
  Tensor qkv = reshape(b.qkv(x), {n, t, 3, heads, hd});
  qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3, N, H, T, hd]
  const Shape head_shape{n, heads, t, hd};
  Tensor q = reshape(slice(qkv, 0, 0, 1), head_shape);
  Tensor k = reshape(slice(qkv, 0, 1, 2), head_shape);
  Tensor v = reshape(slice(qkv, 0, 2, 3), head_shape);
  Tensor scores = matmul(q, transpose(k)) * (1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor mixed = matmul(softmax(scores, -1), v);  // [N, H, T, hd]
  mixed = reshape(permute(mixed, {0, 2, 1, 3}), {n, t, d});
  return b.proj(mixed);
}

}  // namespace

ModelWeights ModelWeights::init(const ViTConfig& config, std::uint64_t seed, bool with_head) {
  config.validate();
  Initializer init(seed);
  const Index d = config.dim;
  ModelWeights m;
  m.config = config;
  m.patch_embed = init.linear(config.patch_dim(), d);
  m.pos_embed = init.normal({1 + config.num_patches(), d}, 0.02);
  m.cls_token = init.normal({1, d}, 0.02);
  m.registers = init.normal({config.num_registers, d}, 0.02);
  for (int i = 0; i < config.depth; ++i) {
    BlockWeights b;
    b.norm1 = unit_norm(d);
    b.qkv = init.linear(d, 3 * d);
    b.proj = init.linear(d, d);
    b.norm2 = unit_norm(d);
    b.fc1 = init.linear(d, static_cast<Index>(config.mlp_ratio) * d);
    b.fc2 = init.linear(static_cast<Index>(config.mlp_ratio) * d, d);
    m.blocks.push_back(std::move(b));
  }
  m.norm = unit_norm(d);
  if (with_head) m.head = init.linear(d, config.num_classes);
  return m;
}

std::vector<std::pair<std::string, Tensor>> ModelWeights::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out{
      {"patch_embed.weight", patch_embed.weight},
      {"patch_embed.bias", patch_embed.bias},
      {"pos_embed", pos_embed},
      {"cls_token", cls_token},
      {"registers", registers},
  };
  for (size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const auto& b = blocks[i];
    out.insert(out.end(), {
                              {p + "norm1.gamma", b.norm1.gamma},
                              {p + "norm1.beta", b.norm1.beta},
                              {p + "attn.qkv.weight", b.qkv.weight},
                              {p + "attn.qkv.bias", b.qkv.bias},
                              {p + "attn.proj.weight", b.proj.weight},
                              {p + "attn.proj.bias", b.proj.bias},
                              {p + "norm2.gamma", b.norm2.gamma},
                              {p + "norm2.beta", b.norm2.beta},
                              {p + "mlp.fc1.weight", b.fc1.weight},
                              {p + "mlp.fc1.bias", b.fc1.bias},
                              {p + "mlp.fc2.weight", b.fc2.weight},
                              {p + "mlp.fc2.bias", b.fc2.bias},
                          });
  }
  out.emplace_back("norm.gamma", norm.gamma);
  out.emplace_back("norm.beta", norm.beta);
  if (head) {
    out.emplace_back("head.weight", head->weight);
    out.emplace_back("head.bias", head->bias);
  }
  return out;
}

ModelWeights ModelWeights::from_named(const ViTConfig& config,
                                      const std::vector<std::pair<std::string, Tensor>>& named) {
  ModelWeights m = init(config, 0, std::any_of(named.begin(), named.end(),
                                               [](const auto& p) { return p.first == "head.weight"; }));
  auto expected = m.named_tensors();
  for (auto& [name, slot] : expected) {
    auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == name; });
    if (it == named.end()) throw ContractError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != slot.shape()) {
      throw ShapeError("tensor '" + name + "' has shape " + to_string(it->second.shape()) + ", config expects " +
                       to_string(slot.shape()));
    }
    Tensor copy = it->second.clone(false);
    // named_tensors() hands out handles to the same nodes, so overwrite in place.
    slot.mutable_value() = copy.value();
  }
  return m;
}

void ModelWeights::set_trainable(bool trainable) const {
  for_each_tensor(*this, [&](const std::string&, Tensor t) { t.set_requires_grad(trainable); });
}

ModelWeights ModelWeights::clone() const {
  ModelWeights m = *this;
  m.patch_embed = {patch_embed.weight.clone(), patch_embed.bias.clone()};
  m.pos_embed = pos_embed.clone();
  m.cls_token = cls_token.clone();
  m.registers = registers.clone();
  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    m.blocks[i] = {{b.norm1.gamma.clone(), b.norm1.beta.clone()},
                   {b.qkv.weight.clone(), b.qkv.bias.clone()},
                   {b.proj.weight.clone(), b.proj.bias.clone()},
                   {b.norm2.gamma.clone(), b.norm2.beta.clone()},
                   {b.fc1.weight.clone(), b.fc1.bias.clone()},
                   {b.fc2.weight.clone(), b.fc2.bias.clone()}};
  }
  m.norm = {norm.gamma.clone(), norm.beta.clone()};
  if (head) m.head = Linear{head->weight.clone(), head->bias.clone()};
  return m;
}

ModelWeights ModelWeights::without_head() const {
  ModelWeights m = *this;
  m.head.reset();
  return m;
}

bool bit_identical(const ModelWeights& a, const ModelWeights& b) {
  if (!(a.config == b.config)) return false;
  auto na = a.named_tensors(), nb = b.named_tensors();
  if (na.size() != nb.size()) return false;
  for (size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first || na[i].second.shape() != nb[i].second.shape()) return false;
    const auto& va = na[i].second.value();
    const auto& vb = nb[i].second.value();
    if (!std::equal(va.data(), va.data() + va.size(), vb.data(),
                    [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); })) {
      return false;
    }
  }
  return true;
}

Tensor FeatureSet::class_feature() const { return reshape(slice(tokens, 1, 0, 1), {tokens.dim(0), tokens.dim(2)}); }

Tensor FeatureSet::patch_features() const { return slice(tokens, 1, 1, tokens.dim(1)); }

Tensor patchify(const Tensor& images, const ViTConfig& config) {
  const Index c = config.channels, s = config.image_size, ps = config.patch_size, g = config.grid();
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != s || images.dim(3) != s) {
    throw ShapeError("patchify expects [N, " + std::to_string(c) + ", " + std::to_string(s) + ", " +
                     std::to_string(s) + "], got " + to_string(images.shape()));
  }
  const Index n = images.dim(0);
  const Index pd = ps * ps * c;
  std::vector<Index> index(static_cast<size_t>(n * g * g * pd));
  size_t k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index gy = 0; gy < g; ++gy)
      for (Index gx = 0; gx < g; ++gx)
        for (Index dy = 0; dy < ps; ++dy)
          for (Index dx = 0; dx < ps; ++dx)
            for (Index ch = 0; ch < c; ++ch) index[k++] = ((i * c + ch) * s + gy * ps + dy) * s + gx * ps + dx;
  return gather(images, index, {n, g * g, pd});
}

TokenSequence embed(const ModelWeights& model, const Tensor& images, const std::optional<Tensor>& rob) {
  const auto& cfg = model.config;
  const Index d = cfg.dim, p = cfg.num_patches();
  if (rob && (rob->rank() != 2 || rob->dim(1) != d)) {
    throw ShapeError("robustness tokens must be [R, " + std::to_string(d) + "], got " + to_string(rob->shape()));
  }
  Tensor patches = patchify(images, cfg);
  if (cfg.pixel_mean != 0.0 || cfg.pixel_std != 1.0) patches = (patches - cfg.pixel_mean) * (1.0 / cfg.pixel_std);
  const Index n = patches.dim(0);
  patches = model.patch_embed(patches) + slice(model.pos_embed, 0, 1, 1 + p);
  Tensor cls = broadcast_to(model.cls_token + slice(model.pos_embed, 0, 0, 1), {n, 1, d});

  std::vector<Tensor> parts;
  SequenceLayout layout;
  const Index r = rob ? rob->dim(0) : 0;
  if (r > 0) parts.push_back(broadcast_to(*rob, {n, r, d}));
  layout.rob_end = r;
  layout.cls = r;
  parts.push_back(cls);
  layout.reg_begin = r + 1;
  layout.reg_end = layout.reg_begin + cfg.num_registers;
  if (cfg.num_registers > 0) parts.push_back(broadcast_to(model.registers, {n, cfg.num_registers, d}));
  parts.push_back(patches);
  layout.patch_begin = layout.reg_end;
  layout.patch_end = layout.patch_begin + p;
  return {concat(parts, 1), layout};
}

ForwardResult forward(const ModelWeights& model, const TokenSequence& seq) {
  const auto& lay = seq.layout;
  if (seq.tokens.rank() != 3 || seq.tokens.dim(1) != lay.length() || seq.tokens.dim(2) != model.config.dim) {
    throw ShapeError("token sequence " + to_string(seq.tokens.shape()) + " does not match its layout");
  }
  const double eps = model.config.ln_eps;
  ForwardResult result;
  Tensor x = seq.tokens;
  result.hidden.push_back(x);
  for (const auto& b : model.blocks) {
    x = x + attention(b, layer_norm(x, b.norm1.gamma, b.norm1.beta, eps), model.config.heads);
    Tensor h = layer_norm(x, b.norm2.gamma, b.norm2.beta, eps);
    x = x + b.fc2(gelu(b.fc1(h)));
    result.hidden.push_back(x);
  }
  result.output = {layer_norm(x, model.norm.gamma, model.norm.beta, eps), lay};

  const Index n = x.dim(0), t = x.dim(1), d = x.dim(2);
  result.stats.resize(static_cast<size_t>(n));
  for (const auto& h : result.hidden) {
    for (Index i = 0; i < n; ++i) {
      const double* base = h.value().data() + i * t * d;
      double mx = ConstMatrixMap(base + lay.cls * d, 1, d).cwiseAbs().maxCoeff();
      if (lay.patch_end > lay.patch_begin) {
        mx = std::max(mx, ConstMatrixMap(base + lay.patch_begin * d, lay.patch_end - lay.patch_begin, d)
                              .cwiseAbs()
                              .maxCoeff());
      }
      result.stats[static_cast<size_t>(i)].max_abs.push_back(mx);
    }
  }
  return result;
}

FeatureSet features(const ModelWeights& model, const Tensor& images, const std::optional<Tensor>& rob) {
  auto seq = embed(model, images, rob);
  auto out = forward(model, seq).output;
  const auto& lay = out.layout;
  return {concat(slice(out.tokens, 1, lay.cls, lay.cls + 1), slice(out.tokens, 1, lay.patch_begin, lay.patch_end), 1)};
}

Tensor feature_cosine(const FeatureSet& a, const FeatureSet& b, FeatureAggregation aggregation) {
  if (a.tokens.shape() != b.tokens.shape()) {
    throw ShapeError("feature sets differ in shape: " + to_string(a.tokens.shape()) + " vs " + to_string(b.tokens.shape()));
  }
  if (aggregation == FeatureAggregation::Flattened) {
    const Index n = a.tokens.dim(0);
    const Index w = a.tokens.size() / std::max<Index>(n, 1);
    return cosine_similarity_rows(reshape(a.tokens, {n, w}), reshape(b.tokens, {n, w}));
  }
  return mean(cosine_similarity_rows(a.tokens, b.tokens), 1);
}

Tensor head_logits(const Linear& head, const Tensor& class_features) { return head(class_features); }

}  // namespace robtok
