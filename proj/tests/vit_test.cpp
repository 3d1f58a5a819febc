#include "batrfst/vit.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"

using batr::backbone_config;
using batr::image;
using batr::mask_plan;
using batr::model_state;
using batr::vit_backbone;
using td = batr::tensor<double>;

namespace {

backbone_config tiny_config() {
  backbone_config cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.decoder_depth = 1;
  cfg.dropout_rate = 0.1;
  return cfg;
}

image<double> ramp_image(const backbone_config& cfg) {
  image<double> img;
  img.channels = cfg.channels;
  img.height = cfg.image_size;
  img.width = cfg.image_size;
  img.pixels.resize(cfg.channels * cfg.image_size * cfg.image_size);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<double>(i % 17) / 17.0;
  return img;
}

struct fixture {
  backbone_config cfg;
  model_state<double> state;
  vit_backbone<double> backbone;

  explicit fixture(backbone_config c, std::uint64_t seed = 7)
      : cfg(c), state(), backbone((state.seed = seed, vit_backbone<double>::init_params(c, state),
                                   c),
                                  state) {}
};

}  // namespace

TEST(Patchify, TopLeftBlockDefinition) {
  backbone_config cfg = tiny_config();
  cfg.image_size = 4;
  cfg.patch_size = 2;
  fixture fx(cfg);
  image<double> img;
  img.channels = 1;
  img.height = 4;
  img.width = 4;
  img.pixels = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
  td patches = fx.backbone.patchify(img);
  EXPECT_EQ(patches.dim(0), 4u);
  EXPECT_EQ(patches.dim(1), 4u);
  // Row 0 = top-left 2x2 block in raster order.
  EXPECT_EQ(patches.at(0, 0), 0.0);
  EXPECT_EQ(patches.at(0, 1), 1.0);
  EXPECT_EQ(patches.at(0, 2), 4.0);
  EXPECT_EQ(patches.at(0, 3), 5.0);
}

TEST(Patchify, RoundTripExact) {
  backbone_config cfg = tiny_config();
  cfg.channels = 1;
  fixture fx(cfg);
  image<double> img = ramp_image(cfg);
  td patches = fx.backbone.patchify(img);
  image<double> back = fx.backbone.unpatchify(patches, img.height, img.width);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Patchify, PatchCountArithmetic) {
  backbone_config cfg = tiny_config();
  cfg.image_size = 8;
  cfg.patch_size = 4;
  EXPECT_EQ(cfg.patch_count(), 4u);
}

TEST(Patchify, NonDivisibleRejected) {
  fixture fx(tiny_config());
  image<double> img;
  img.channels = 1;
  img.height = 7;
  img.width = 8;
  img.pixels.assign(56, 0.0);
  EXPECT_THROW(fx.backbone.patchify(img), batr::error);
}

TEST(Encode, DeterministicInEvalMode) {
  fixture fx(tiny_config());
  image<double> img = ramp_image(fx.cfg);
  td a = fx.backbone.encode(img, nullptr, nullptr, false);
  td b = fx.backbone.encode(img, nullptr, nullptr, false);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(a.dim(0), fx.cfg.patch_count() + 1);
  EXPECT_EQ(a.dim(1), fx.cfg.embed_dim);
}

TEST(Encode, FullMaskStaysFinite) {
  fixture fx(tiny_config());
  image<double> img = ramp_image(fx.cfg);
  mask_plan plan;
  plan.ratio = 1.0;
  for (std::size_t p = 0; p < fx.cfg.patch_count(); ++p) plan.masked.push_back(p);
  td enc = fx.backbone.encode(img, &plan, nullptr, false);
  EXPECT_EQ(enc.dim(0), fx.cfg.patch_count() + 1);
  for (double v : enc.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encode, MaskIndexOutOfRangeRejected) {
  fixture fx(tiny_config());
  image<double> img = ramp_image(fx.cfg);
  mask_plan plan;
  plan.masked = {99};
  EXPECT_THROW(fx.backbone.encode(img, &plan, nullptr, false), batr::error);
}

// With positional embeddings zeroed the encoder must be permutation
// equivariant over patches: swapping two input patches swaps the two output
// patch tokens.
TEST(Encode, PermutationEquivarianceWithoutPosEmb) {
  fixture fx(tiny_config());
  auto& pos = fx.state.at("vit.pos_embed").mutable_values();
  std::fill(pos.begin(), pos.end(), 0.0);

  image<double> img = ramp_image(fx.cfg);
  td enc1 = fx.backbone.encode(img, nullptr, nullptr, false);

  // Swap patches 1 and 2 (pixel blocks) of an 8x8/patch-4 image.
  image<double> swapped = img;
  std::size_t p = fx.cfg.patch_size;
  for (std::size_t y = 0; y < p; ++y)
    for (std::size_t x = 0; x < p; ++x)
      std::swap(swapped.at(0, y, p + x), swapped.at(0, p + y, x));
  td enc2 = fx.backbone.encode(swapped, nullptr, nullptr, false);

  std::size_t d = fx.cfg.embed_dim;
  auto row_near = [&](const td& a, std::size_t i, const td& b, std::size_t j) {
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(a.at(i, k), b.at(j, k), 1e-9);
  };
  row_near(enc1, 0, enc2, 0);  // class token
  row_near(enc1, 1, enc2, 1);  // patch 0 unchanged
  row_near(enc1, 2, enc2, 3);  // patch 1 <-> patch 2
  row_near(enc1, 3, enc2, 2);
  row_near(enc1, 4, enc2, 4);  // patch 3 unchanged
}

TEST(MaskPlan, SizeAndRange) {
  batr::rng_stream rng(5, 1);
  mask_plan plan = batr::make_mask_plan(64, 0.75, rng);
  EXPECT_EQ(plan.masked.size(), 48u);  // round(0.75 * 64)
  for (std::size_t p : plan.masked) EXPECT_LT(p, 64u);
}

TEST(MimLoss, PerfectReconstructionIsZero) {
  batr::rng_stream rng(1, 2);
  td target = td::randn({4, 16}, rng, 1.0);
  mask_plan plan;
  plan.masked = {0, 2};
  td loss = vit_backbone<double>::masked_patch_mse(target, target, plan);
  EXPECT_EQ(loss.value(), 0.0);
}

TEST(MimLoss, ConstantOffsetClosedForm) {
  batr::rng_stream rng(1, 3);
  td target = td::randn({4, 16}, rng, 1.0);
  std::vector<double> shifted = target.values();
  for (auto& v : shifted) v += 1.0;
  td recon = td::from({4, 16}, std::move(shifted));
  mask_plan plan;
  plan.masked = {1, 3};
  td loss = vit_backbone<double>::masked_patch_mse(recon, target, plan);
  EXPECT_NEAR(loss.value(), 1.0, 1e-12);
}

TEST(MimLoss, SingleMaskedPatchEqualsPlainMse) {
  batr::rng_stream rng(1, 4);
  td recon = td::randn({4, 16}, rng, 1.0);
  td target = td::randn({4, 16}, rng, 1.0);
  mask_plan plan;
  plan.masked = {2};
  td loss = vit_backbone<double>::masked_patch_mse(recon, target, plan);
  td row_r = batr::take_rows(recon, {2});
  td row_t = batr::take_rows(target, {2});
  EXPECT_NEAR(loss.value(), batr::mse(row_r, row_t).value(), 1e-12);
}

TEST(MimLoss, EmptyPlanRejected) {
  td a = td::zeros({2, 4});
  mask_plan plan;
  EXPECT_THROW(vit_backbone<double>::masked_patch_mse(a, a, plan), batr::error);
}

TEST(MimLoss, GradientsMatchFiniteDifferences) {
  fixture fx(tiny_config());
  fx.cfg.dropout_rate = 0.0;
  image<double> img = ramp_image(fx.cfg);
  mask_plan plan;
  plan.masked = {0, 3};
  plan.ratio = 0.5;

  std::vector<std::string> leaves = {"vit.patch_embed.w", "vit.mask_token", "vit.pos_embed",
                                     "vit.block0.attn.wq", "vit.block0.ffn.w1", "dec.head.w",
                                     "vit.ln_f.g"};
  std::vector<td*> ptrs;
  for (const auto& name : leaves) ptrs.push_back(&fx.state.at(name));
  // Disable grads on the rest so the sweep stays focused.
  for (auto& [name, t] : fx.state.params)
    if (std::find(leaves.begin(), leaves.end(), name) == leaves.end())
      t.set_requires_grad(false);

  batr::rng_stream rng(3, 5);
  auto res = gradcheck::check(ptrs, [&] { return fx.backbone.mim_loss(img, plan, rng, false); });
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_GT(res.checked, 100u);
}

TEST(Pretrain, StepBookkeeping) {
  fixture fx(tiny_config());
  std::vector<image<double>> data = {ramp_image(fx.cfg)};
  batr::pretrain_options opt;
  opt.epochs = 1;
  opt.batch_size = 16;
  opt.lr = 0.0;
  auto stats = batr::pretrain(fx.backbone, data, opt);
  EXPECT_EQ(stats.steps, 1u);  // ceil(1/16) steps per epoch
}

TEST(Pretrain, SameSeedBitIdenticalStates) {
  backbone_config cfg = tiny_config();
  std::vector<image<double>> data;
  for (int i = 0; i < 4; ++i) {
    auto img = ramp_image(cfg);
    for (auto& v : img.pixels) v = std::fmod(v + 0.1 * i, 1.0);
    data.push_back(img);
  }
  batr::pretrain_options opt;
  opt.epochs = 2;
  opt.batch_size = 2;
  opt.lr = 0.05;

  fixture fx1(cfg, 99), fx2(cfg, 99);
  batr::pretrain(fx1.backbone, data, opt);
  batr::pretrain(fx2.backbone, data, opt);
  EXPECT_EQ(fx1.state.content_hash(), fx2.state.content_hash());
}

TEST(Pretrain, LossDecreasesOnStripes) {
  backbone_config cfg = tiny_config();
  cfg.dropout_rate = 0.0;
  fixture fx(cfg, 11);
  std::vector<image<double>> data;
  for (int i = 0; i < 8; ++i) {
    image<double> img;
    img.channels = 1;
    img.height = cfg.image_size;
    img.width = cfg.image_size;
    img.pixels.resize(cfg.image_size * cfg.image_size);
    for (std::size_t y = 0; y < cfg.image_size; ++y)
      for (std::size_t x = 0; x < cfg.image_size; ++x)
        img.pixels[y * cfg.image_size + x] = ((x + i) % 4 < 2) ? 0.9 : 0.1;
    data.push_back(std::move(img));
  }
  batr::pretrain_options opt;
  opt.epochs = 10;
  opt.batch_size = 8;
  opt.lr = 0.05;
  auto stats = batr::pretrain(fx.backbone, data, opt);
  EXPECT_LT(stats.epoch_losses.back(), stats.epoch_losses.front());
}

TEST(Pretrain, EmptyDatasetRejected) {
  fixture fx(tiny_config());
  std::vector<image<double>> data;
  EXPECT_THROW(batr::pretrain(fx.backbone, data, {}), batr::error);
}
