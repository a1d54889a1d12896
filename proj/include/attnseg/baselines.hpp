#pragma once

#include <string>
#include <vector>

#include "attnseg/data.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/model.hpp"
#include "attnseg/train.hpp"

namespace attnseg {

/// Controlled comparison variants sharing one trunk architecture:
///   seg_only        - no classification branch, segmentation loss alone
///   multitask_plain - joint loss, both attention blocks disabled
///   naive_mask      - multitask_plain network; at inference the mask is
///                     zeroed whenever the classifier says non-fire
///   proposed_full   - spatial self-attention + classification-gated channel
///                     attention
enum class VariantName { seg_only, multitask_plain, naive_mask, proposed_full };

std::string to_string(VariantName v);
VariantName variant_from_string(const std::string& s);

struct VariantSpec {
  VariantName name = VariantName::proposed_full;
  ModelConfig base_config;
};

/// Applies the variant's flag pattern onto a shared base configuration.
VariantSpec make_variant(VariantName name, const ModelConfig& base);
std::vector<VariantSpec> default_variants(const ModelConfig& base);

/// If class_prob < threshold the segmentation probabilities are replaced by
/// zeros; otherwise the output passes through. Classification fields are
/// never touched. Outputs without a classification branch pass through.
SegClassOutput apply_naive_rule(const SegClassOutput& output, Scalar threshold);

struct AblationRow {
  std::string variant;
  bool ok = false;
  std::string error;  // populated when ok is false
  MetricReport report;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string split_hash;  // shared-split witness: hash over ids by split

  std::string to_json() const;
  std::string render_table() const;
};

/// Hash over the manifest's split assignment (train, val, test id sequences).
std::string split_id_hash(const DatasetManifest& manifest);

/// Trains every variant under the identical seed and split, evaluates each on
/// the test split, and reports one row per variant. A variant that fails to
/// train yields a failed row; the others still run. When a multitask_plain
/// row has already been trained in the same call, naive_mask reuses its
/// network instead of retraining.
AblationResult run_ablation(const DatasetManifest& manifest,
                            const std::vector<VariantSpec>& variants,
                            const TrainConfig& config);

}  // namespace attnseg
