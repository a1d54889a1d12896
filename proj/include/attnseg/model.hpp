#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attnseg/layers.hpp"
#include "attnseg/tensor.hpp"

namespace attnseg {

enum class Backbone { desk_small, deeplabv3plus };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct ModelConfig {
  Backbone backbone = Backbone::desk_small;
  int input_size = 64;
  std::vector<int> encoder_channels = {16, 32, 64, 128};
  bool attention_spatial = true;
  bool attention_classgate = true;
  int selfattn_embed_channels = 0;  // 0 -> max(C/8, 1) of the gated feature map
  int classifier_hidden = 8;        // 0 -> single affine from pooled features
  bool with_classifier = true;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& json_text);
};

struct SegClassOutput {
  Tensor seg_logits;  // H x W x 1, pre-sigmoid
  Tensor seg_prob;    // H x W x 1, sigmoid(seg_logits)
  std::optional<Scalar> class_logit;
  std::optional<Scalar> class_prob;
  Scalar alpha = 0.0;
};

enum class InitKind { random, pretrained_encoder };

// ---------------------------------------------------------------------------
// Encoder-decoder trunk behind a common interface. Emits the pre-head feature
// map at half input resolution plus the coarsest encoder tensor feeding the
// classification branch.
// ---------------------------------------------------------------------------
struct TrunkCtx {
  virtual ~TrunkCtx() = default;
};

struct TrunkOut {
  Tensor features;  // S/2 x S/2 x feature_channels
  Tensor coarsest;
};

class Trunk {
 public:
  virtual ~Trunk() = default;
  virtual void init(Rng& rng) = 0;
  virtual TrunkOut forward(const Tensor& image, std::unique_ptr<TrunkCtx>* ctx) const = 0;
  virtual void backward(TrunkCtx& ctx, const Tensor& dfeatures, const Tensor& dcoarsest) = 0;
  virtual void params(std::vector<ParamRef>& out) = 0;
  virtual void encoder_params(std::vector<ParamRef>& out) = 0;
  virtual int feature_channels() const = 0;
  virtual int coarsest_channels() const = 0;
};

// ---------------------------------------------------------------------------
// Joint classification / segmentation model.
//
// image -> encoder -> decoder -> [spatial self-attention] -> 1-channel
// projection (restores full resolution) = A(x) -> [classification gate,
// A' = A + alpha * s * A] -> seg logits. The classification branch pools
// the coarsest encoder features into s(x); its probability both feeds the
// gate and carries the classification loss.
// ---------------------------------------------------------------------------
class Model {
 public:
  struct FwdCtx;

  Model() = default;
  explicit Model(const ModelConfig& cfg);

  /// Random init; classifier weights ~ N(0, 0.05), alpha = 0, He elsewhere.
  void init(uint64_t seed);
  /// Random init, then overwrite encoder tensors from an attnseg-v1 weight file.
  void init_pretrained_encoder(uint64_t seed, const std::string& weight_file);

  SegClassOutput forward(const Tensor& image, FwdCtx* ctx = nullptr) const;
  /// Gradients of a scalar loss w.r.t. seg_prob and class_prob; accumulates
  /// into parameter grads. d_class_prob ignored when the model has no
  /// classification branch.
  void backward(FwdCtx& ctx, const Tensor& d_seg_prob, Scalar d_class_prob);

  std::vector<ParamRef> params();
  std::vector<ParamRef> encoder_params();
  void zero_grads();

  const ModelConfig& config() const { return cfg_; }
  Scalar alpha() const;
  int selfattn_embed_channels() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

  /// Flat name -> tensor map of all parameters (copies).
  std::map<std::string, Tensor> state_dict() const;
  /// Strict load; throws listing mismatched tensor names.
  void load_state_dict(const std::map<std::string, Tensor>& state);

  struct FwdCtx {
    std::unique_ptr<TrunkCtx> trunk;
    Tensor features;    // trunk output
    Tensor coarsest;    // coarsest encoder tensor
    Tensor att_out;     // after spatial attention (or features if disabled)
    Tensor a_half;      // 1-channel map at half resolution
    Tensor a_full;      // A(x), full-resolution logit map before the gate
    Tensor seg_prob;
    VecX pooled;
    VecX hidden_pre, hidden;
    Scalar class_prob = 0.0;
    Conv2d::Ctx head;
    SpatialSelfAttention::Ctx attn;
    ClassGate::Ctx gate;
  };

 private:
  void build_();

  ModelConfig cfg_;
  std::unique_ptr<Trunk> trunk_;
  Conv2d head_;             // 1x1 projection to one channel
  Linear cls_hidden_, cls_out_;
  SpatialSelfAttention attn_;
  ClassGate gate_;
};

// ---------------------------------------------------------------------------
// Checkpoint I/O (format "attnseg-v1"): magic line, little-endian u64 JSON
// header length, JSON header {format, config, tensors}, raw f64 payload.
// ---------------------------------------------------------------------------
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const std::map<std::string, Tensor>& tensors);
std::pair<ModelConfig, std::map<std::string, Tensor>> load_checkpoint(const std::string& path);

/// build_model per the config; seed drives all random draws.
Model build_model(const ModelConfig& cfg, InitKind init, uint64_t seed,
                  const std::string& weight_file = "");

}  // namespace attnseg
