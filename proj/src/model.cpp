#include "attnseg/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace attnseg {

using nlohmann::json;

std::string to_string(Backbone b) {
  return b == Backbone::desk_small ? "desk_small" : "deeplabv3plus";
}

Backbone backbone_from_string(const std::string& s) {
  if (s == "desk_small") return Backbone::desk_small;
  if (s == "deeplabv3plus") return Backbone::deeplabv3plus;
  throw std::invalid_argument("unknown backbone '" + s + "'");
}

void ModelConfig::validate() const {
  if (input_size < 16 || input_size % 16 != 0)
    throw std::invalid_argument("input_size must be a positive multiple of 16, got " +
                                std::to_string(input_size));
  if (encoder_channels.size() != 4)
    throw std::invalid_argument("encoder_channels must list 4 stage widths");
  for (int c : encoder_channels)
    if (c < 1) throw std::invalid_argument("encoder channel widths must be >= 1");
  if (classifier_hidden < 0) throw std::invalid_argument("classifier_hidden must be >= 0");
  if (attention_classgate && !with_classifier)
    throw std::invalid_argument("classification-gated attention requires the classifier branch");
  if (attention_spatial) {
    int feat = encoder_channels[0];
    int embed = selfattn_embed_channels;
    if (embed < 0 || embed > feat)
      throw std::invalid_argument("selfattn_embed_channels " + std::to_string(embed) +
                                  " exceeds feature channels " + std::to_string(feat));
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["backbone"] = to_string(backbone);
  j["input_size"] = input_size;
  j["encoder_channels"] = encoder_channels;
  j["attention_spatial"] = attention_spatial;
  j["attention_classgate"] = attention_classgate;
  j["selfattn_embed_channels"] = selfattn_embed_channels;
  j["classifier_hidden"] = classifier_hidden;
  j["with_classifier"] = with_classifier;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  c.input_size = j.at("input_size").get<int>();
  c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  c.attention_spatial = j.at("attention_spatial").get<bool>();
  c.attention_classgate = j.at("attention_classgate").get<bool>();
  c.selfattn_embed_channels = j.at("selfattn_embed_channels").get<int>();
  c.classifier_hidden = j.at("classifier_hidden").get<int>();
  c.with_classifier = j.at("with_classifier").get<bool>();
  return c;
}

// ---------------------------------------------------------------------------
// desk_small trunk: 4 strided 3x3 convs down, mirrored bilinear-up decoder,
// one skip connection from the first stage.
// ---------------------------------------------------------------------------
namespace {

struct DeskCtx : TrunkCtx {
  Conv2d::Ctx e1, e2, e3, e4, d3, d2, d1, fuse;
  Tensor e1_pre, e2_pre, e3_pre, e4_pre;  // pre-ReLU
  Tensor d3_pre, d2_pre, d1_pre, fuse_pre;
  Tensor e1_out;
  int up3_h = 0, up2_h = 0, up1_h = 0;  // input extents of the up2 ops
};

class DeskSmallTrunk : public Trunk {
 public:
  explicit DeskSmallTrunk(const ModelConfig& cfg) {
    const auto& w = cfg.encoder_channels;
    e1_.configure(3, w[0], 3, 2, 1);
    e2_.configure(w[0], w[1], 3, 2, 1);
    e3_.configure(w[1], w[2], 3, 2, 1);
    e4_.configure(w[2], w[3], 3, 2, 1);
    d3_.configure(w[3], w[2], 3, 1, 1);
    d2_.configure(w[2], w[1], 3, 1, 1);
    d1_.configure(w[1], w[0], 3, 1, 1);
    fuse_.configure(2 * w[0], w[0], 3, 1, 1);
    feat_ch_ = w[0];
    coarse_ch_ = w[3];
  }

  void init(Rng& rng) override {
    e1_.init_he(rng);
    e2_.init_he(rng);
    e3_.init_he(rng);
    e4_.init_he(rng);
    d3_.init_he(rng);
    d2_.init_he(rng);
    d1_.init_he(rng);
    fuse_.init_he(rng);
  }

  TrunkOut forward(const Tensor& image, std::unique_ptr<TrunkCtx>* ctx) const override {
    auto c = std::make_unique<DeskCtx>();
    DeskCtx* p = ctx ? c.get() : nullptr;

    Tensor e1p = e1_.forward(image, p ? &p->e1 : nullptr);
    Tensor e1 = relu(e1p);
    Tensor e2p = e2_.forward(e1, p ? &p->e2 : nullptr);
    Tensor e2 = relu(e2p);
    Tensor e3p = e3_.forward(e2, p ? &p->e3 : nullptr);
    Tensor e3 = relu(e3p);
    Tensor e4p = e4_.forward(e3, p ? &p->e4 : nullptr);
    Tensor e4 = relu(e4p);

    Tensor u3 = bilinear_up2(e4);
    Tensor d3p = d3_.forward(u3, p ? &p->d3 : nullptr);
    Tensor d3 = relu(d3p);
    Tensor u2 = bilinear_up2(d3);
    Tensor d2p = d2_.forward(u2, p ? &p->d2 : nullptr);
    Tensor d2 = relu(d2p);
    Tensor u1 = bilinear_up2(d2);
    Tensor d1p = d1_.forward(u1, p ? &p->d1 : nullptr);
    Tensor d1 = relu(d1p);

    Tensor cat = concat_channels(d1, e1);
    Tensor fp = fuse_.forward(cat, p ? &p->fuse : nullptr);
    Tensor feat = relu(fp);

    if (p) {
      p->e1_pre = std::move(e1p);
      p->e2_pre = std::move(e2p);
      p->e3_pre = std::move(e3p);
      p->e4_pre = std::move(e4p);
      p->d3_pre = std::move(d3p);
      p->d2_pre = std::move(d2p);
      p->d1_pre = std::move(d1p);
      p->fuse_pre = std::move(fp);
      p->e1_out = e1;
      p->up3_h = e4.h();
      p->up2_h = d3.h();
      p->up1_h = d2.h();
      *ctx = std::move(c);
    }
    return {std::move(feat), std::move(e4)};
  }

  void backward(TrunkCtx& ctx_, const Tensor& dfeatures, const Tensor& dcoarsest) override {
    auto& c = dynamic_cast<DeskCtx&>(ctx_);

    Tensor dfuse = relu_backward(c.fuse_pre, dfeatures);
    Tensor dcat = fuse_.backward(c.fuse, dfuse);
    Tensor dd1, de1_skip;
    split_channels(dcat, d1_.out_ch, dd1, de1_skip);

    Tensor dd1p = relu_backward(c.d1_pre, dd1);
    Tensor du1 = d1_.backward(c.d1, dd1p);
    Tensor dd2 = bilinear_up2_backward(c.up1_h, c.up1_h, d2_.out_ch, du1);

    Tensor dd2p = relu_backward(c.d2_pre, dd2);
    Tensor du2 = d2_.backward(c.d2, dd2p);
    Tensor dd3 = bilinear_up2_backward(c.up2_h, c.up2_h, d3_.out_ch, du2);

    Tensor dd3p = relu_backward(c.d3_pre, dd3);
    Tensor du3 = d3_.backward(c.d3, dd3p);
    Tensor de4 = bilinear_up2_backward(c.up3_h, c.up3_h, e4_.out_ch, du3);

    de4.vec() += dcoarsest.vec();

    Tensor de4p = relu_backward(c.e4_pre, de4);
    Tensor de3 = e4_.backward(c.e4, de4p);
    Tensor de3p = relu_backward(c.e3_pre, de3);
    Tensor de2 = e3_.backward(c.e3, de3p);
    Tensor de2p = relu_backward(c.e2_pre, de2);
    Tensor de1 = e2_.backward(c.e2, de2p);
    de1.vec() += de1_skip.vec();
    Tensor de1p = relu_backward(c.e1_pre, de1);
    e1_.backward(c.e1, de1p);
  }

  void params(std::vector<ParamRef>& out) override {
    encoder_params(out);
    d3_.params("decoder.conv3", out);
    d2_.params("decoder.conv2", out);
    d1_.params("decoder.conv1", out);
    fuse_.params("decoder.fuse", out);
  }

  void encoder_params(std::vector<ParamRef>& out) override {
    e1_.params("encoder.conv1", out);
    e2_.params("encoder.conv2", out);
    e3_.params("encoder.conv3", out);
    e4_.params("encoder.conv4", out);
  }

  int feature_channels() const override { return feat_ch_; }
  int coarsest_channels() const override { return coarse_ch_; }

 private:
  Conv2d e1_, e2_, e3_, e4_, d3_, d2_, d1_, fuse_;
  int feat_ch_ = 0, coarse_ch_ = 0;
};

// ---------------------------------------------------------------------------
// deeplabv3plus trunk, desk scale: output-stride-16 conv encoder, ASPP with
// dilated 3x3 branches and an image-pooling branch, low-level skip decoder.
// The classification branch taps the post-ASPP map.
// ---------------------------------------------------------------------------
struct DeepLabCtx : TrunkCtx {
  Conv2d::Ctx stem, e2, e3, e4;
  Tensor stem_pre, e2_pre, e3_pre, e4_pre;
  Tensor e2_out, e4_out;
  Conv2d::Ctx a1, a2, a3;
  Tensor a1_pre, a2_pre, a3_pre;
  VecX pool_in, pool_pre;
  Tensor proj_pre;
  Conv2d::Ctx proj;
  Conv2d::Ctx red, dconv1, dconv2;
  Tensor red_pre, dconv1_pre, dconv2_pre;
  int os16_h = 0, os8_h = 0, os4_h = 0;
};

class DeepLabV3PlusTrunk : public Trunk {
 public:
  explicit DeepLabV3PlusTrunk(const ModelConfig& cfg) {
    const auto& w = cfg.encoder_channels;
    stem_.configure(3, w[0], 3, 2, 1);
    e2_.configure(w[0], w[1], 3, 2, 1);
    e3_.configure(w[1], w[2], 3, 2, 1);
    e4_.configure(w[2], w[3], 3, 2, 1);
    const int a = w[2];
    a1_.configure(w[3], a, 1, 1, 0);
    a2_.configure(w[3], a, 3, 1, 2, 2);
    a3_.configure(w[3], a, 3, 1, 4, 4);
    pool_fc_.configure(w[3], a);
    proj_.configure(4 * a, w[2], 1, 1, 0);
    red_.configure(w[1], w[0], 1, 1, 0);
    dconv1_.configure(w[2] + w[0], w[1], 3, 1, 1);
    dconv2_.configure(w[1], w[0], 3, 1, 1);
    feat_ch_ = w[0];
    coarse_ch_ = w[2];
    branch_ch_ = a;
  }

  void init(Rng& rng) override {
    stem_.init_he(rng);
    e2_.init_he(rng);
    e3_.init_he(rng);
    e4_.init_he(rng);
    a1_.init_he(rng);
    a2_.init_he(rng);
    a3_.init_he(rng);
    pool_fc_.init_he(rng);
    proj_.init_he(rng);
    red_.init_he(rng);
    dconv1_.init_he(rng);
    dconv2_.init_he(rng);
  }

  TrunkOut forward(const Tensor& image, std::unique_ptr<TrunkCtx>* ctx) const override {
    auto c = std::make_unique<DeepLabCtx>();
    DeepLabCtx* p = ctx ? c.get() : nullptr;

    Tensor sp = stem_.forward(image, p ? &p->stem : nullptr);
    Tensor s = relu(sp);
    Tensor e2p = e2_.forward(s, p ? &p->e2 : nullptr);
    Tensor e2 = relu(e2p);
    Tensor e3p = e3_.forward(e2, p ? &p->e3 : nullptr);
    Tensor e3 = relu(e3p);
    Tensor e4p = e4_.forward(e3, p ? &p->e4 : nullptr);
    Tensor e4 = relu(e4p);

    // ASPP
    Tensor b1p = a1_.forward(e4, p ? &p->a1 : nullptr);
    Tensor b1 = relu(b1p);
    Tensor b2p = a2_.forward(e4, p ? &p->a2 : nullptr);
    Tensor b2 = relu(b2p);
    Tensor b3p = a3_.forward(e4, p ? &p->a3 : nullptr);
    Tensor b3 = relu(b3p);
    VecX pooled = global_avg_pool(e4);
    VecX poolp = pool_fc_.forward(pooled);
    VecX poolv = poolp.cwiseMax(0.0);
    Tensor bpool({e4.h(), e4.w(), branch_ch_});
    bpool.pixmat().rowwise() = poolv.transpose();

    Tensor cat = concat_channels(concat_channels(b1, b2), concat_channels(b3, bpool));
    Tensor projp = proj_.forward(cat, p ? &p->proj : nullptr);
    Tensor aspp = relu(projp);

    // decoder: x4 up to OS4, merge reduced low-level features, then to OS2
    Tensor up = bilinear_up2(bilinear_up2(aspp));
    Tensor redp = red_.forward(e2, p ? &p->red : nullptr);
    Tensor low = relu(redp);
    Tensor dcat = concat_channels(up, low);
    Tensor d1p = dconv1_.forward(dcat, p ? &p->dconv1 : nullptr);
    Tensor d1 = relu(d1p);
    Tensor d2p = dconv2_.forward(d1, p ? &p->dconv2 : nullptr);
    Tensor d2 = relu(d2p);
    Tensor feat = bilinear_up2(d2);

    if (p) {
      p->stem_pre = std::move(sp);
      p->e2_pre = std::move(e2p);
      p->e3_pre = std::move(e3p);
      p->e4_pre = std::move(e4p);
      p->e2_out = e2;
      p->e4_out = e4;
      p->a1_pre = std::move(b1p);
      p->a2_pre = std::move(b2p);
      p->a3_pre = std::move(b3p);
      p->pool_in = pooled;
      p->pool_pre = poolp;
      p->proj_pre = std::move(projp);
      p->red_pre = std::move(redp);
      p->dconv1_pre = std::move(d1p);
      p->dconv2_pre = std::move(d2p);
      p->os16_h = e4.h();
      p->os8_h = 2 * e4.h();
      p->os4_h = d2.h();
      *ctx = std::move(c);
    }
    return {std::move(feat), std::move(aspp)};
  }

  void backward(TrunkCtx& ctx_, const Tensor& dfeatures, const Tensor& dcoarsest) override {
    auto& c = dynamic_cast<DeepLabCtx&>(ctx_);

    Tensor dd2 = bilinear_up2_backward(c.os4_h, c.os4_h, dconv2_.out_ch, dfeatures);
    Tensor dd2p = relu_backward(c.dconv2_pre, dd2);
    Tensor dd1 = dconv2_.backward(c.dconv2, dd2p);
    Tensor dd1p = relu_backward(c.dconv1_pre, dd1);
    Tensor ddcat = dconv1_.backward(c.dconv1, dd1p);

    Tensor dup, dlow;
    split_channels(ddcat, proj_.out_ch, dup, dlow);

    Tensor dredp = relu_backward(c.red_pre, dlow);
    Tensor de2_low = red_.backward(c.red, dredp);

    Tensor daspp = bilinear_up2_backward(c.os16_h, c.os16_h, proj_.out_ch,
                                         bilinear_up2_backward(c.os8_h, c.os8_h, proj_.out_ch, dup));
    daspp.vec() += dcoarsest.vec();

    Tensor dprojp = relu_backward(c.proj_pre, daspp);
    Tensor dcat = proj_.backward(c.proj, dprojp);

    const int a = branch_ch_;
    Tensor d12, d34, db1, db2, db3, dbpool;
    split_channels(dcat, 2 * a, d12, d34);
    split_channels(d12, a, db1, db2);
    split_channels(d34, a, db3, dbpool);

    Tensor de4({c.e4_out.h(), c.e4_out.w(), e4_.out_ch});

    Tensor db1p = relu_backward(c.a1_pre, db1);
    de4.vec() += a1_.backward(c.a1, db1p).vec();
    Tensor db2p = relu_backward(c.a2_pre, db2);
    de4.vec() += a2_.backward(c.a2, db2p).vec();
    Tensor db3p = relu_backward(c.a3_pre, db3);
    de4.vec() += a3_.backward(c.a3, db3p).vec();

    VecX dpoolv = dbpool.pixmat().colwise().sum().transpose();
    VecX dpoolp = (c.pool_pre.array() > 0).select(dpoolv, VecX::Zero(dpoolv.size()));
    VecX dpooled = pool_fc_.backward(c.pool_in, dpoolp);
    de4.vec() +=
        global_avg_pool_backward(c.e4_out.h(), c.e4_out.w(), e4_.out_ch, dpooled).vec();

    Tensor de4p = relu_backward(c.e4_pre, de4);
    Tensor de3 = e4_.backward(c.e4, de4p);
    Tensor de3p = relu_backward(c.e3_pre, de3);
    Tensor de2 = e3_.backward(c.e3, de3p);
    de2.vec() += de2_low.vec();
    Tensor de2p = relu_backward(c.e2_pre, de2);
    Tensor ds = e2_.backward(c.e2, de2p);
    Tensor dsp = relu_backward(c.stem_pre, ds);
    stem_.backward(c.stem, dsp);
  }

  void params(std::vector<ParamRef>& out) override {
    encoder_params(out);
    a1_.params("aspp.branch1", out);
    a2_.params("aspp.branch2", out);
    a3_.params("aspp.branch3", out);
    pool_fc_.params("aspp.pool", out);
    proj_.params("aspp.proj", out);
    red_.params("decoder.lowlevel", out);
    dconv1_.params("decoder.conv1", out);
    dconv2_.params("decoder.conv2", out);
  }

  void encoder_params(std::vector<ParamRef>& out) override {
    stem_.params("encoder.stem", out);
    e2_.params("encoder.conv2", out);
    e3_.params("encoder.conv3", out);
    e4_.params("encoder.conv4", out);
  }

  int feature_channels() const override { return feat_ch_; }
  int coarsest_channels() const override { return coarse_ch_; }

 private:
  Conv2d stem_, e2_, e3_, e4_;
  Conv2d a1_, a2_, a3_, proj_, red_, dconv1_, dconv2_;
  Linear pool_fc_;
  int feat_ch_ = 0, coarse_ch_ = 0, branch_ch_ = 0;
};

std::unique_ptr<Trunk> make_trunk(const ModelConfig& cfg) {
  if (cfg.backbone == Backbone::desk_small) return std::make_unique<DeskSmallTrunk>(cfg);
  return std::make_unique<DeepLabV3PlusTrunk>(cfg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build_();
}

void Model::build_() {
  trunk_ = make_trunk(cfg_);
  head_.configure(trunk_->feature_channels(), 1, 1, 1, 0);
  if (cfg_.with_classifier) {
    int cc = trunk_->coarsest_channels();
    if (cfg_.classifier_hidden > 0) {
      cls_hidden_.configure(cc, cfg_.classifier_hidden);
      cls_out_.configure(cfg_.classifier_hidden, 1);
    } else {
      cls_out_.configure(cc, 1);
    }
  }
  if (cfg_.attention_spatial) {
    int feat = trunk_->feature_channels();
    int embed = cfg_.selfattn_embed_channels > 0 ? cfg_.selfattn_embed_channels
                                                 : std::max(feat / 8, 1);
    attn_.configure(feat, embed);
  }
}

int Model::selfattn_embed_channels() const { return attn_.embed_ch; }

void Model::init(uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  // Draw order: trunk, segmentation head, classifier, attention. Models that
  // share a trunk under the same seed get bit-identical shared parameters
  // whatever blocks are enabled downstream.
  trunk_->init(rng);
  head_.init_he(rng);
  if (cfg_.with_classifier) {
    if (cfg_.classifier_hidden > 0) {
      cls_hidden_.init_normal(rng, 0.05);
      cls_out_.init_normal(rng, 0.05);
    } else {
      cls_out_.init_normal(rng, 0.05);
    }
  }
  if (cfg_.attention_spatial) attn_.init(rng);
  gate_.alpha.v[0] = 0.0;
}

void Model::init_pretrained_encoder(uint64_t seed, const std::string& weight_file) {
  init(seed);
  auto [file_cfg, tensors] = load_checkpoint(weight_file);
  (void)file_cfg;
  std::vector<ParamRef> enc;
  trunk_->encoder_params(enc);
  std::vector<std::string> bad;
  for (auto& p : enc) {
    auto it = tensors.find(p.name);
    if (it == tensors.end() || !it->second.same_shape(*p.value)) {
      bad.push_back(p.name);
      continue;
    }
    *p.value = it->second;
  }
  if (!bad.empty()) {
    std::string msg = "weight file '" + weight_file + "' incompatible with backbone; mismatched tensors:";
    for (auto& n : bad) msg += " " + n;
    throw std::runtime_error(msg);
  }
}

SegClassOutput Model::forward(const Tensor& image, FwdCtx* ctx) const {
  if (image.rank() != 3 || image.c() != 3 || image.h() != cfg_.input_size ||
      image.w() != cfg_.input_size)
    throw std::invalid_argument("forward: expected " + std::to_string(cfg_.input_size) + "x" +
                                std::to_string(cfg_.input_size) + "x3 image, got " +
                                image.shape_str());

  std::unique_ptr<TrunkCtx> tctx;
  TrunkOut t = trunk_->forward(image, ctx ? &tctx : nullptr);

  SegClassOutput out;
  Scalar s = 0.0;
  VecX pooled, hidden_pre, hidden;
  if (cfg_.with_classifier) {
    pooled = global_avg_pool(t.coarsest);
    Scalar logit;
    if (cfg_.classifier_hidden > 0) {
      hidden_pre = cls_hidden_.forward(pooled);
      hidden = hidden_pre.cwiseMax(0.0);
      logit = cls_out_.forward(hidden)(0);
    } else {
      logit = cls_out_.forward(pooled)(0);
    }
    s = sigmoid(logit);
    out.class_logit = logit;
    out.class_prob = s;
  }

  Tensor att = cfg_.attention_spatial ? attn_.forward(t.features, ctx ? &ctx->attn : nullptr)
                                      : t.features;
  Tensor a_half = head_.forward(att, ctx ? &ctx->head : nullptr);

  Tensor a_full = bilinear_up2(a_half);
  Tensor logits = cfg_.attention_classgate ? gate_.forward(a_full, s, ctx ? &ctx->gate : nullptr)
                                           : a_full;

  out.seg_logits = logits;
  out.seg_prob = sigmoid(logits);
  out.alpha = cfg_.attention_classgate ? gate_.alpha.v[0] : 0.0;

  if (ctx) {
    ctx->trunk = std::move(tctx);
    ctx->features = std::move(t.features);
    ctx->att_out = std::move(att);
    ctx->a_half = std::move(a_half);
    ctx->a_full = std::move(a_full);
    ctx->seg_prob = out.seg_prob;
    ctx->pooled = std::move(pooled);
    ctx->hidden_pre = std::move(hidden_pre);
    ctx->hidden = std::move(hidden);
    ctx->class_prob = s;
    ctx->coarsest = std::move(t.coarsest);
  }
  return out;
}

void Model::backward(FwdCtx& ctx, const Tensor& d_seg_prob, Scalar d_class_prob) {
  check_same_shape(ctx.seg_prob, d_seg_prob, "model backward");

  // through the output sigmoid
  Tensor dlogits = d_seg_prob;
  for (size_t i = 0; i < dlogits.v.size(); ++i) {
    Scalar p = ctx.seg_prob.v[i];
    dlogits.v[i] *= p * (1.0 - p);
  }

  Scalar ds = 0.0;
  Tensor da_full =
      cfg_.attention_classgate ? gate_.backward(ctx.gate, dlogits, &ds) : dlogits;

  Tensor da_half =
      bilinear_up2_backward(ctx.a_half.h(), ctx.a_half.w(), 1, da_full);
  Tensor datt = head_.backward(ctx.head, da_half);

  Tensor dfeat = cfg_.attention_spatial ? attn_.backward(ctx.attn, datt) : datt;

  Tensor dcoarsest({ctx.coarsest.h(), ctx.coarsest.w(), ctx.coarsest.c()});
  if (cfg_.with_classifier) {
    Scalar dp = d_class_prob + ds;
    Scalar s = ctx.class_prob;
    Scalar dlogit = dp * s * (1.0 - s);
    VecX dl(1);
    dl(0) = dlogit;
    VecX dpooled;
    if (cfg_.classifier_hidden > 0) {
      VecX dhidden = cls_out_.backward(ctx.hidden, dl);
      VecX dhidden_pre =
          (ctx.hidden_pre.array() > 0).select(dhidden, VecX::Zero(dhidden.size()));
      dpooled = cls_hidden_.backward(ctx.pooled, dhidden_pre);
    } else {
      dpooled = cls_out_.backward(ctx.pooled, dl);
    }
    dcoarsest =
        global_avg_pool_backward(ctx.coarsest.h(), ctx.coarsest.w(), ctx.coarsest.c(), dpooled);
  }

  trunk_->backward(*ctx.trunk, dfeat, dcoarsest);
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  trunk_->params(out);
  head_.params("head.proj", out);
  if (cfg_.with_classifier) {
    if (cfg_.classifier_hidden > 0) {
      cls_hidden_.params("classifier.fc1", out);
      cls_out_.params("classifier.fc2", out);
    } else {
      cls_out_.params("classifier.fc", out);
    }
  }
  if (cfg_.attention_spatial) attn_.params("selfattn", out);
  if (cfg_.attention_classgate) gate_.params("gate", out);
  return out;
}

std::vector<ParamRef> Model::encoder_params() {
  std::vector<ParamRef> out;
  trunk_->encoder_params(out);
  return out;
}

void Model::zero_grads() {
  for (auto& p : params()) p.grad->set_zero();
}

Scalar Model::alpha() const { return gate_.alpha.v[0]; }

std::map<std::string, Tensor> Model::state_dict() const {
  std::map<std::string, Tensor> out;
  for (auto& p : const_cast<Model*>(this)->params()) out[p.name] = *p.value;
  return out;
}

void Model::load_state_dict(const std::map<std::string, Tensor>& state) {
  std::vector<std::string> bad;
  for (auto& p : params()) {
    auto it = state.find(p.name);
    if (it == state.end() || !it->second.same_shape(*p.value)) {
      bad.push_back(p.name);
      continue;
    }
    *p.value = it->second;
  }
  if (!bad.empty()) {
    std::string msg = "checkpoint incompatible with model; mismatched tensors:";
    for (auto& n : bad) msg += " " + n;
    throw std::runtime_error(msg);
  }
}

void Model::save(const std::string& path) const {
  save_checkpoint(path, cfg_, state_dict());
}

Model Model::load(const std::string& path) {
  auto [cfg, tensors] = load_checkpoint(path);
  Model m(cfg);
  m.load_state_dict(tensors);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

static constexpr char kMagic[] = "attnseg-v1\n";

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const std::map<std::string, Tensor>& tensors) {
  json header;
  header["format"] = "attnseg-v1";
  header["config"] = json::parse(cfg.to_json());
  json table = json::array();
  uint64_t offset = 0;
  for (auto& [name, t] : tensors) {
    json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    offset += static_cast<uint64_t>(t.size());
    table.push_back(e);
  }
  header["tensors"] = table;
  header["dtype"] = "f64le";
  std::string htext = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint to " + tmp);
    f.write(kMagic, sizeof(kMagic) - 1);
    uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (auto& [name, t] : tensors) {
      (void)name;
      f.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(Scalar)));
    }
    if (!f) throw std::runtime_error("short write on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::pair<ModelConfig, std::map<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[sizeof(kMagic) - 1];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path + " is not an attnseg-v1 checkpoint");
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("truncated checkpoint header in " + path);
  json header = json::parse(htext);

  ModelConfig cfg = ModelConfig::from_json(header.at("config").dump());
  std::map<std::string, Tensor> tensors;
  for (auto& e : header.at("tensors")) {
    std::string name = e.at("name").get<std::string>();
    std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.v.data()),
           static_cast<std::streamsize>(t.v.size() * sizeof(Scalar)));
    if (!f) throw std::runtime_error("truncated tensor '" + name + "' in " + path);
    tensors.emplace(std::move(name), std::move(t));
  }
  return {cfg, std::move(tensors)};
}

Model build_model(const ModelConfig& cfg, InitKind init, uint64_t seed,
                  const std::string& weight_file) {
  Model m(cfg);
  if (init == InitKind::pretrained_encoder) {
    if (weight_file.empty())
      throw std::invalid_argument("pretrained-encoder init requires a weight file");
    m.init_pretrained_encoder(seed, weight_file);
  } else {
    m.init(seed);
  }
  return m;
}

}  // namespace attnseg
