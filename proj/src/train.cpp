#include "attnseg/train.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

#include "attnseg/image_io.hpp"
#include "attnseg/rng.hpp"

namespace attnseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda must be in [0, 1]");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("threshold must be in (0, 1)");
  if (input_size < 1) throw std::invalid_argument("input_size must be positive");
}

std::string TrainConfig::to_json() const {
  json j;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["lambda"] = lambda;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["optimizer"] = "adam";
  j["input_size"] = input_size;
  j["checkpoint_dir"] = checkpoint_dir;
  j["deterministic"] = deterministic;
  j["hflip"] = hflip;
  j["threshold"] = threshold;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  static const std::set<std::string> known = {
      "lr",         "weight_decay",   "lambda",        "epochs", "batch_size", "seed",
      "optimizer",  "input_size",     "checkpoint_dir", "deterministic", "hflip",
      "threshold"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("unknown training config key '" + it.key() + "'");
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda = j.value("lambda", c.lambda);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) {
    std::string opt = j.at("optimizer").get<std::string>();
    if (opt != "adam") throw std::invalid_argument("unknown optimizer '" + opt + "'");
  }
  c.input_size = j.value("input_size", c.input_size);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.hflip = j.value("hflip", c.hflip);
  c.threshold = j.value("threshold", c.threshold);
  return c;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(Scalar lr, Scalar weight_decay, Scalar beta1, Scalar beta2, Scalar eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(const std::vector<ParamRef>& params, Scalar lr_scale) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const auto n = static_cast<Eigen::Index>(params[i].value->v.size());
      m_[i] = VecX::Zero(n);
      v_[i] = VecX::Zero(n);
    }
  }
  if (m_.size() != params.size())
    throw std::invalid_argument("optimizer step with a different parameter list");

  ++t_;
  const Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
  const Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
  const Scalar lr_eff = lr_ * lr_scale;

  for (size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value->vec();
    auto g = params[i].grad->vec();
    if (p.size() != m_[i].size())
      throw std::invalid_argument("parameter '" + params[i].name + "' changed shape");
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    VecX update = (m_[i] / bc1).cwiseQuotient(((v_[i] / bc2).cwiseSqrt().array() + eps_).matrix());
    p -= lr_eff * (update + wd_ * p);
  }
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

namespace {

Tensor hflip_tensor(const Tensor& x) {
  Tensor out(x.shape());
  const int h = x.h(), w = x.w(), c = x.c();
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int ch = 0; ch < c; ++ch) out.at(y, xx, ch) = x.at(y, w - 1 - xx, ch);
  return out;
}

// image/mask pairs resized to the training resolution once, up front
std::vector<SampleRecord> prepare_records(const std::vector<const SampleRecord*>& recs,
                                          int size) {
  std::vector<SampleRecord> out;
  out.reserve(recs.size());
  for (const auto* r : recs) {
    SampleRecord s;
    s.id = r->id;
    s.label = r->label;
    if (r->image.h() == size && r->image.w() == size) {
      s.image = r->image;
      s.mask = r->mask;
    } else {
      s.image = resize_image(r->image, size);
      s.mask = resize_mask_nearest(r->mask, size);
    }
    out.push_back(std::move(s));
  }
  return out;
}

LossBreakdown sample_loss(const Model& model, const SegClassOutput& out,
                          const SampleRecord& rec, Scalar lambda) {
  if (model.config().with_classifier)
    return joint_loss(out.seg_prob, rec.mask, *out.class_prob,
                      static_cast<Scalar>(rec.label), lambda);
  return seg_only_loss(out.seg_prob, rec.mask);
}

json loss_to_json(const LossBreakdown& lb) {
  json j;
  j["seg_loss"] = lb.seg_loss;
  j["class_loss"] = lb.class_loss;
  j["total"] = lb.total;
  j["lambda"] = lb.lambda;
  return j;
}

}  // namespace

EvalOutcome evaluate_split(const Model& model, const std::vector<const SampleRecord*>& records,
                           Scalar lambda, Scalar threshold) {
  if (records.empty()) throw std::invalid_argument("evaluate_split: empty record list");
  std::vector<SampleRecord> prepared = prepare_records(records, model.config().input_size);

  std::vector<SegClassOutput> outputs;
  std::vector<EvalRecord> evals;
  outputs.reserve(prepared.size());
  evals.reserve(prepared.size());

  LossBreakdown sum;
  for (const auto& rec : prepared) {
    SegClassOutput out = model.forward(rec.image);
    LossBreakdown lb = sample_loss(model, out, rec, lambda);
    sum.seg_loss += lb.seg_loss;
    sum.class_loss += lb.class_loss;
    sum.total += lb.total;
    sum.lambda = lb.lambda;
    evals.push_back({rec.mask, rec.label});
    outputs.push_back(std::move(out));
  }
  const auto n = static_cast<Scalar>(prepared.size());
  sum.seg_loss /= n;
  sum.class_loss /= n;
  sum.total /= n;

  EvalOutcome outcome;
  outcome.loss = sum;
  outcome.metrics = evaluate_corpus(outputs, evals, threshold);
  return outcome;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string EpochRecord::to_json() const {
  json j;
  j["epoch"] = epoch;
  j["train_loss"] = loss_to_json(train_loss);
  j["val_loss"] = loss_to_json(val_loss);
  j["val_metrics"] = json::parse(val_metrics.to_json());
  j["lr"] = lr;
  j["best"] = best;
  return j.dump();
}

TrainResult train(Model& model, const DatasetManifest& manifest, const TrainConfig& config) {
  config.validate();
  if (config.input_size != model.config().input_size)
    throw std::invalid_argument("training input_size " + std::to_string(config.input_size) +
                                " does not match the model's " +
                                std::to_string(model.config().input_size));

  auto train_ptrs = manifest.split_records(Split::train);
  auto val_ptrs = manifest.split_records(Split::val);
  if (train_ptrs.empty() || val_ptrs.empty())
    throw std::invalid_argument("manifest must provide non-empty train and val splits");

  std::vector<SampleRecord> train_set = prepare_records(train_ptrs, config.input_size);

  const bool with_cls = model.config().with_classifier;
  const Scalar lambda = with_cls ? config.lambda : 1.0;

  AdamW opt(config.lr, config.weight_decay);
  std::vector<ParamRef> params = model.params();

  const bool persist = !config.checkpoint_dir.empty();
  fs::path ckpt_dir(config.checkpoint_dir);
  if (persist) fs::create_directories(ckpt_dir);

  TrainResult result;
  result.best_val_total = std::numeric_limits<Scalar>::infinity();
  std::map<std::string, Tensor> best_state;

  std::ofstream history;
  if (persist) {
    result.history_path = (ckpt_dir / "history.jsonl").string();
    history.open(result.history_path, std::ios::trunc);
    if (!history) throw std::runtime_error("cannot write " + result.history_path);
  }

  std::vector<size_t> order(train_set.size());
  constexpr uint64_t kEpochStream = 0x65706f6368ULL;  // shuffle/augment stream tag

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng erng(mix_seed(config.seed, kEpochStream + static_cast<uint64_t>(epoch)));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    erng.shuffle(order);

    LossBreakdown train_sum;
    size_t cursor = 0;
    int batch_index = 0;
    while (cursor < order.size()) {
      const size_t batch_n = std::min(order.size() - cursor, static_cast<size_t>(config.batch_size));
      model.zero_grads();
      for (size_t k = 0; k < batch_n; ++k) {
        const SampleRecord& rec = train_set[order[cursor + k]];
        const bool flip = config.hflip && erng.bernoulli(0.5);
        const Tensor& img = flip ? hflip_tensor(rec.image) : rec.image;
        const Tensor& msk = flip ? hflip_tensor(rec.mask) : rec.mask;

        Model::FwdCtx ctx;
        SegClassOutput out = model.forward(img, &ctx);

        LossBreakdown lb;
        if (with_cls)
          lb = joint_loss(out.seg_prob, msk, *out.class_prob, static_cast<Scalar>(rec.label),
                          lambda);
        else
          lb = seg_only_loss(out.seg_prob, msk);
        if (!std::isfinite(lb.total))
          throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
        train_sum.seg_loss += lb.seg_loss;
        train_sum.class_loss += lb.class_loss;
        train_sum.total += lb.total;
        train_sum.lambda = lb.lambda;

        Tensor d_seg = bce_grad(out.seg_prob, msk);
        const Scalar seg_scale = lambda / static_cast<Scalar>(batch_n);
        for (Scalar& v : d_seg.v) v *= seg_scale;
        Scalar d_cls = 0.0;
        if (with_cls)
          d_cls = (1.0 - lambda) / static_cast<Scalar>(batch_n) *
                  bce_grad(*out.class_prob, static_cast<Scalar>(rec.label));
        model.backward(ctx, d_seg, d_cls);
      }
      const Scalar scale = config.lr_schedule ? config.lr_schedule(epoch - 1) : 1.0;
      opt.step(params, scale);
      cursor += batch_n;
      ++batch_index;
    }
    const auto n_train = static_cast<Scalar>(train_set.size());
    train_sum.seg_loss /= n_train;
    train_sum.class_loss /= n_train;
    train_sum.total /= n_train;

    EvalOutcome val = evaluate_split(model, val_ptrs, lambda, config.threshold);
    if (!std::isfinite(val.loss.total))
      throw std::runtime_error("training diverged: non-finite validation loss at epoch " +
                               std::to_string(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_sum;
    rec.val_loss = val.loss;
    rec.val_metrics = val.metrics;
    rec.lr = config.lr * (config.lr_schedule ? config.lr_schedule(epoch - 1) : 1.0);
    rec.best = val.loss.total < result.best_val_total;
    if (rec.best) {
      result.best_val_total = val.loss.total;
      result.best_epoch = epoch;
      best_state = model.state_dict();
      if (persist) {
        result.best_checkpoint = (ckpt_dir / "best.ckpt").string();
        model.save(result.best_checkpoint);
      }
    }
    result.history.push_back(rec);
    if (persist) history << rec.to_json() << "\n";
    if (config.verbose) {
      std::printf("epoch %3d  train %.6f  val %.6f  val mIoU %.4f  cons %.4f%s\n", epoch,
                  train_sum.total, val.loss.total, val.metrics.mean_iou,
                  val.metrics.avg_consistency, rec.best ? "  *" : "");
      std::fflush(stdout);
    }
  }

  if (persist) {
    result.last_checkpoint = (ckpt_dir / "last.ckpt").string();
    model.save(result.last_checkpoint);
    history.close();
  }

  // leave the caller holding the best-validation weights
  model.load_state_dict(best_state);
  return result;
}

std::vector<SegClassOutput> predict(const Model& model, const std::vector<Tensor>& images) {
  std::vector<SegClassOutput> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(model.forward(img));
  return out;
}

}  // namespace attnseg
