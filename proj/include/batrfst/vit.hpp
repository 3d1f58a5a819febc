// Mini Vision Transformer: patchify, class token, learnable positional
// embeddings, pre-LN encoder blocks, and a lightweight MAE-style decoder for
// Stage-I masked-image-modeling pretraining. Masked patches are replaced by
// a shared learnable mask token, so shapes stay (L+1) x D throughout.

#ifndef BATRFST_VIT_HPP_
#define BATRFST_VIT_HPP_

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "batrfst/error.hpp"
#include "batrfst/optim.hpp"
#include "batrfst/rng.hpp"
#include "batrfst/tensor.hpp"
#include "batrfst/tokens.hpp"

namespace batr {

template <typename S>
struct image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<S> pixels;  // channel-major, values in [0,1]
  int label = -1;

  S at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  S& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
};

struct backbone_config {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t decoder_depth = 2;
  double dropout_rate = 0.1;
  double mask_ratio = 0.75;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_count() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const {
    if (channels != 1 && channels != 3)
      throw parameter_error("backbone: channels must be 1 or 3");
    if (patch_size == 0 || image_size % patch_size != 0)
      throw parameter_error("backbone: image_size must be divisible by patch_size");
    if (heads == 0 || embed_dim % heads != 0)
      throw parameter_error("backbone: embed_dim must be divisible by heads");
    if (!(mask_ratio > 0.0) || !(mask_ratio < 1.0))
      throw parameter_error("backbone: mask_ratio must be in (0,1)");
    if (depth == 0 || decoder_depth == 0)
      throw parameter_error("backbone: depth and decoder_depth must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw parameter_error("backbone: dropout_rate must be in [0,1)");
  }
};

// Set of masked patch indices (0-based patch positions; the class token can
// never appear here by construction).
struct mask_plan {
  std::vector<std::size_t> masked;
  double ratio = 0.0;
};

inline mask_plan make_mask_plan(std::size_t patch_count, double ratio, rng_stream& rng) {
  if (!(ratio > 0.0) || ratio > 1.0)
    throw parameter_error("mask_plan: ratio must be in (0,1]");
  std::size_t m = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(patch_count)));
  m = std::min(m, patch_count);
  mask_plan plan;
  plan.ratio = ratio;
  plan.masked = rng.sample_without_replacement(patch_count, m);
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

template <typename S>
class vit_backbone {
 public:
  vit_backbone(const backbone_config& cfg, model_state<S>& state) : cfg_(cfg), state_(&state) {
    cfg_.validate();
  }

  const backbone_config& config() const { return cfg_; }
  model_state<S>& state() const { return *state_; }

  static void init_params(const backbone_config& cfg, model_state<S>& state) {
    cfg.validate();
    std::size_t d = cfg.embed_dim, f = cfg.ffn_mult * d, pd = cfg.patch_dim();
    std::size_t l = cfg.patch_count();
    auto w = [&](const std::string& name, std::vector<std::size_t> shape, double stddev) {
      rng_stream rng = make_stream(state.seed, rng_purpose::param_init, fnv1a64(name));
      state.add(name, tensor<S>::randn(std::move(shape), rng, static_cast<S>(stddev)));
    };
    auto zeros = [&](const std::string& name, std::vector<std::size_t> shape) {
      state.add(name, tensor<S>::zeros(std::move(shape)));
    };
    auto ones = [&](const std::string& name, std::vector<std::size_t> shape) {
      state.add(name, tensor<S>::full(std::move(shape), S(1)));
    };

    w("vit.patch_embed.w", {pd, d}, 0.02);
    zeros("vit.patch_embed.b", {d});
    w("vit.cls_token", {1, d}, 0.02);
    w("vit.pos_embed", {l + 1, d}, 0.02);
    w("vit.mask_token", {1, d}, 0.02);
    auto block = [&](const std::string& prefix) {
      ones(prefix + ".ln1.g", {d});
      zeros(prefix + ".ln1.b", {d});
      w(prefix + ".attn.wq", {d, d}, 0.02);
      w(prefix + ".attn.wk", {d, d}, 0.02);
      w(prefix + ".attn.wv", {d, d}, 0.02);
      w(prefix + ".attn.wo", {d, d}, 0.02);
      zeros(prefix + ".attn.bo", {d});
      ones(prefix + ".ln2.g", {d});
      zeros(prefix + ".ln2.b", {d});
      w(prefix + ".ffn.w1", {d, f}, 0.02);
      zeros(prefix + ".ffn.b1", {f});
      w(prefix + ".ffn.w2", {f, d}, 0.02);
      zeros(prefix + ".ffn.b2", {d});
    };
    for (std::size_t i = 0; i < cfg.depth; ++i) block("vit.block" + std::to_string(i));
    ones("vit.ln_f.g", {d});
    zeros("vit.ln_f.b", {d});
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i) block("dec.block" + std::to_string(i));
    w("dec.head.w", {d, pd}, 0.02);
    zeros("dec.head.b", {pd});
  }

  // Row p is the flattened p-th patch in raster order (channel-major inside
  // the patch). Produces a leaf tensor; pixels carry no gradients.
  tensor<S> patchify(const image<S>& img) const {
    if (img.channels != cfg_.channels)
      throw dimension_error("patchify: channel mismatch");
    if (img.height % cfg_.patch_size != 0 || img.width % cfg_.patch_size != 0)
      throw dimension_error("patchify: image dims not divisible by patch size");
    std::size_t p = cfg_.patch_size;
    std::size_t gy = img.height / p, gx = img.width / p;
    std::size_t pd = p * p * img.channels;
    std::vector<S> out(gx * gy * pd);
    for (std::size_t by = 0; by < gy; ++by)
      for (std::size_t bx = 0; bx < gx; ++bx) {
        S* row = out.data() + (by * gx + bx) * pd;
        std::size_t o = 0;
        for (std::size_t c = 0; c < img.channels; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              row[o++] = img.at(c, by * p + y, bx * p + x);
      }
    return tensor<S>::from({gx * gy, pd}, std::move(out));
  }

  image<S> unpatchify(const tensor<S>& patches, std::size_t height, std::size_t width) const {
    std::size_t p = cfg_.patch_size;
    std::size_t gy = height / p, gx = width / p;
    if (patches.dim(0) != gx * gy || patches.dim(1) != p * p * cfg_.channels)
      throw dimension_error("unpatchify: shape mismatch");
    image<S> img;
    img.channels = cfg_.channels;
    img.height = height;
    img.width = width;
    img.pixels.assign(cfg_.channels * height * width, S(0));
    for (std::size_t by = 0; by < gy; ++by)
      for (std::size_t bx = 0; bx < gx; ++bx) {
        std::size_t o = 0;
        for (std::size_t c = 0; c < cfg_.channels; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              img.at(c, by * p + y, bx * p + x) = patches.at(by * gx + bx, o++);
      }
    return img;
  }

  // Full encoder pass: (L+1) x D tokens, row 0 the class token. `plan`
  // substitutes the mask token for masked patches before the block stack.
  tensor<S> encode(const image<S>& img, const mask_plan* plan, rng_stream* drop_rng,
                   bool training) const {
    tensor<S> patches = patchify(img);
    std::size_t l = patches.dim(0);
    tensor<S> tok = add(matmul(patches, state_->at("vit.patch_embed.w")),
                        state_->at("vit.patch_embed.b"));
    if (plan != nullptr && !plan->masked.empty()) {
      std::vector<S> keep(l, S(1)), drop(l, S(0));
      for (std::size_t p : plan->masked) {
        if (p >= l) throw parameter_error("encode: mask index out of range");
        keep[p] = S(0);
        drop[p] = S(1);
      }
      tensor<S> mt = repeat_row(state_->at("vit.mask_token"), l);
      tok = add(scale_rows(tok, keep), scale_rows(mt, drop));
    }
    tensor<S> x = concat(state_->at("vit.cls_token"), tok, 0);
    x = add(x, state_->at("vit.pos_embed"));
    for (std::size_t i = 0; i < cfg_.depth; ++i)
      x = block(x, "vit.block" + std::to_string(i), drop_rng, training);
    x = ln_affine(x, "vit.ln_f");
    return x;
  }

  token_set<S> encode_tokens(const image<S>& img, std::size_t image_id, std::size_t view_id,
                             rng_stream* drop_rng, bool training) const {
    token_set<S> ts;
    ts.tokens = encode(img, nullptr, drop_rng, training);
    ts.image_id = image_id;
    ts.view_id = view_id;
    return ts;
  }

  // Decoder stack over the encoded tokens plus a linear head back to patch
  // pixel space; returns L x (P*P*C) reconstructions.
  tensor<S> reconstruct(const tensor<S>& encoded, rng_stream* drop_rng, bool training) const {
    tensor<S> x = encoded;
    for (std::size_t i = 0; i < cfg_.decoder_depth; ++i)
      x = block(x, "dec.block" + std::to_string(i), drop_rng, training);
    std::vector<std::size_t> patch_rows(x.dim(0) - 1);
    for (std::size_t i = 0; i < patch_rows.size(); ++i) patch_rows[i] = i + 1;
    tensor<S> patch_tok = take_rows(x, patch_rows);
    return add(matmul(patch_tok, state_->at("dec.head.w")), state_->at("dec.head.b"));
  }

  // Reduction of the reconstruction objective: squared error over masked
  // patch pixels only, averaged across the plan's |M| patches; unmasked
  // patches contribute nothing. With one masked patch this is plain MSE on
  // that patch.
  static tensor<S> masked_patch_mse(const tensor<S>& recon, const tensor<S>& target,
                                    const mask_plan& plan) {
    if (plan.masked.empty())
      throw parameter_error("mim_loss: empty mask plan (division by |M|)");
    return mse(take_rows(recon, plan.masked), take_rows(target, plan.masked));
  }

  tensor<S> mim_loss(const image<S>& img, const mask_plan& plan, rng_stream& rng,
                     bool training = true) const {
    tensor<S> enc = encode(img, &plan, &rng, training);
    tensor<S> recon = reconstruct(enc, &rng, training);
    return masked_patch_mse(recon, patchify(img), plan);
  }

 private:
  tensor<S> ln_affine(const tensor<S>& x, const std::string& prefix) const {
    return add(scale_cols(layernorm_rows(x), state_->at(prefix + ".g")),
               state_->at(prefix + ".b"));
  }

  tensor<S> block(const tensor<S>& x, const std::string& prefix, rng_stream* drop_rng,
                  bool training) const {
    tensor<S> h = ln_affine(x, prefix + ".ln1");
    tensor<S> q = matmul(h, state_->at(prefix + ".attn.wq"));
    tensor<S> k = matmul(h, state_->at(prefix + ".attn.wk"));
    tensor<S> v = matmul(h, state_->at(prefix + ".attn.wv"));
    std::size_t dh = cfg_.embed_dim / cfg_.heads;
    S scale_t = static_cast<S>(std::sqrt(static_cast<double>(dh)));
    tensor<S> merged;
    for (std::size_t head = 0; head < cfg_.heads; ++head) {
      tensor<S> qh = take_cols(q, head * dh, dh);
      tensor<S> kh = take_cols(k, head * dh, dh);
      tensor<S> vh = take_cols(v, head * dh, dh);
      tensor<S> attn = softmax_rows(matmul_nt(qh, kh), scale_t);
      tensor<S> oh = matmul(attn, vh);
      merged = head == 0 ? oh : concat(merged, oh, 1);
    }
    tensor<S> proj = add(matmul(merged, state_->at(prefix + ".attn.wo")),
                         state_->at(prefix + ".attn.bo"));
    if (training && drop_rng != nullptr)
      proj = dropout(proj, cfg_.dropout_rate, *drop_rng, true);
    tensor<S> a = add(x, proj);

    tensor<S> h2 = ln_affine(a, prefix + ".ln2");
    tensor<S> f = gelu(add(matmul(h2, state_->at(prefix + ".ffn.w1")),
                           state_->at(prefix + ".ffn.b1")));
    if (training && drop_rng != nullptr) f = dropout(f, cfg_.dropout_rate, *drop_rng, true);
    tensor<S> f2 = add(matmul(f, state_->at(prefix + ".ffn.w2")),
                       state_->at(prefix + ".ffn.b2"));
    if (training && drop_rng != nullptr) f2 = dropout(f2, cfg_.dropout_rate, *drop_rng, true);
    return add(a, f2);
  }

  backbone_config cfg_;
  model_state<S>* state_;
};

struct pretrain_options {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double lr = 0.05;
  double momentum = 0.9;
  bool cosine_decay = true;
};

struct pretrain_stats {
  std::size_t steps = 0;
  std::vector<double> epoch_losses;
  double first_step_loss = 0.0;
  double last_step_loss = 0.0;
};

// Stage-I training loop: SGD with momentum and cosine-decayed lr over
// shuffled batches, one mask plan per image per step.
template <typename S>
pretrain_stats pretrain(vit_backbone<S>& backbone, const std::vector<image<S>>& dataset,
                        const pretrain_options& opt,
                        const std::function<void(std::size_t, double)>& on_epoch = nullptr) {
  if (dataset.empty()) throw dataset_error("pretrain: empty dataset");
  const backbone_config& cfg = backbone.config();
  for (const auto& img : dataset)
    if (img.height % cfg.patch_size != 0 || img.width % cfg.patch_size != 0)
      throw dataset_error("pretrain: image dims not divisible by patch size");

  model_state<S>& state = backbone.state();
  sgd<S> opt_sgd(static_cast<S>(opt.lr), static_cast<S>(opt.momentum));
  std::size_t per_epoch = (dataset.size() + opt.batch_size - 1) / opt.batch_size;
  std::size_t total_steps = per_epoch * opt.epochs;

  pretrain_stats stats;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_stream shuffle_rng = make_stream(state.seed, rng_purpose::shuffle, epoch);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::size_t end = std::min(order.size(), start + opt.batch_size);
      if (opt.cosine_decay) {
        double progress = static_cast<double>(step) / static_cast<double>(total_steps);
        opt_sgd.set_learning_rate(
            static_cast<S>(opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))));
      }
      rng_stream mask_rng = make_stream(state.seed, rng_purpose::mask_plan, step);
      rng_stream drop_rng = make_stream(state.seed, rng_purpose::dropout, step);
      tensor<S> loss;
      for (std::size_t i = start; i < end; ++i) {
        mask_plan plan = make_mask_plan(cfg.patch_count(), cfg.mask_ratio, mask_rng);
        tensor<S> li = backbone.mim_loss(dataset[order[i]], plan, drop_rng, true);
        loss = (i == start) ? li : add(loss, li);
      }
      loss = scale(loss, static_cast<S>(1.0 / static_cast<double>(end - start)));
      double loss_v = static_cast<double>(loss.value());
      if (step == 0) stats.first_step_loss = loss_v;
      stats.last_step_loss = loss_v;
      backward(loss);
      opt_sgd.step(state);
      epoch_loss += loss_v;
      ++epoch_batches;
      ++step;
    }
    stats.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
    if (on_epoch) on_epoch(epoch, stats.epoch_losses.back());
  }
  stats.steps = step;
  return stats;
}

}  // namespace batr

#endif  // BATRFST_VIT_HPP_
