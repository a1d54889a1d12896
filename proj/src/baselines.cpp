#include "attnseg/baselines.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "attnseg/image_io.hpp"

namespace attnseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(VariantName v) {
  switch (v) {
    case VariantName::seg_only: return "seg_only";
    case VariantName::multitask_plain: return "multitask_plain";
    case VariantName::naive_mask: return "naive_mask";
    default: return "proposed_full";
  }
}

VariantName variant_from_string(const std::string& s) {
  if (s == "seg_only") return VariantName::seg_only;
  if (s == "multitask_plain") return VariantName::multitask_plain;
  if (s == "naive_mask") return VariantName::naive_mask;
  if (s == "proposed_full") return VariantName::proposed_full;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

VariantSpec make_variant(VariantName name, const ModelConfig& base) {
  VariantSpec spec;
  spec.name = name;
  spec.base_config = base;
  switch (name) {
    case VariantName::seg_only:
      spec.base_config.with_classifier = false;
      spec.base_config.attention_spatial = false;
      spec.base_config.attention_classgate = false;
      break;
    case VariantName::multitask_plain:
    case VariantName::naive_mask:
      spec.base_config.with_classifier = true;
      spec.base_config.attention_spatial = false;
      spec.base_config.attention_classgate = false;
      break;
    case VariantName::proposed_full:
      spec.base_config.with_classifier = true;
      spec.base_config.attention_spatial = true;
      spec.base_config.attention_classgate = true;
      break;
  }
  spec.base_config.validate();
  return spec;
}

std::vector<VariantSpec> default_variants(const ModelConfig& base) {
  return {make_variant(VariantName::seg_only, base),
          make_variant(VariantName::multitask_plain, base),
          make_variant(VariantName::naive_mask, base),
          make_variant(VariantName::proposed_full, base)};
}

SegClassOutput apply_naive_rule(const SegClassOutput& output, Scalar threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("threshold must be in (0, 1)");
  if (!output.class_prob || *output.class_prob >= threshold) return output;
  SegClassOutput zeroed = output;
  for (Scalar& v : zeroed.seg_prob.v) v = 0.0;
  return zeroed;
}

std::string split_id_hash(const DatasetManifest& manifest) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (Split s : {Split::train, Split::val, Split::test}) {
    mix(to_string(s));
    mix("|");
    for (const auto* r : manifest.split_records(s)) {
      mix(r->id);
      mix("\n");
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string AblationResult::to_json() const {
  json j;
  j["split_hash"] = split_hash;
  json rs = json::array();
  for (const auto& r : rows) {
    json e;
    e["variant"] = r.variant;
    e["ok"] = r.ok;
    if (r.ok)
      e["report"] = json::parse(r.report.to_json());
    else
      e["error"] = r.error;
    rs.push_back(e);
  }
  j["rows"] = rs;
  return j.dump(2);
}

std::string AblationResult::render_table() const {
  std::vector<std::pair<std::string, MetricReport>> ok_rows;
  std::string failures;
  for (const auto& r : rows) {
    if (r.ok)
      ok_rows.emplace_back(r.variant, r.report);
    else
      failures += r.variant + "  FAILED: " + r.error + "\n";
  }
  std::string out = render_metric_table(ok_rows);
  if (!failures.empty()) out += "\n" + failures;
  return out;
}

namespace {

MetricReport evaluate_test(const Model& model, const std::vector<const SampleRecord*>& test,
                           bool naive, Scalar threshold) {
  const int size = model.config().input_size;
  std::vector<SegClassOutput> outputs;
  std::vector<EvalRecord> evals;
  outputs.reserve(test.size());
  evals.reserve(test.size());
  for (const auto* r : test) {
    const bool fits = r->image.h() == size && r->image.w() == size;
    SegClassOutput out = model.forward(fits ? r->image : resize_image(r->image, size));
    if (naive) out = apply_naive_rule(out, threshold);
    outputs.push_back(std::move(out));
    evals.push_back({fits ? r->mask : resize_mask_nearest(r->mask, size), r->label});
  }
  return evaluate_corpus(outputs, evals, threshold);
}

}  // namespace

AblationResult run_ablation(const DatasetManifest& manifest,
                            const std::vector<VariantSpec>& variants,
                            const TrainConfig& config) {
  if (variants.empty()) throw std::invalid_argument("run_ablation: no variants given");
  auto test = manifest.split_records(Split::test);
  if (test.empty()) throw std::invalid_argument("manifest has an empty test split");

  AblationResult result;
  result.split_hash = split_id_hash(manifest);

  // trained weights per model-config snapshot; lets naive_mask reuse the
  // multitask_plain network trained in the same call
  std::map<std::string, std::map<std::string, Tensor>> trained;

  for (const auto& spec : variants) {
    AblationRow row;
    row.variant = to_string(spec.name);
    try {
      const std::string key = spec.base_config.to_json();
      Model model(spec.base_config);
      auto cached = spec.name == VariantName::naive_mask ? trained.find(key) : trained.end();
      if (cached != trained.end()) {
        model.init(config.seed);
        model.load_state_dict(cached->second);
      } else {
        model.init(config.seed);
        TrainConfig vcfg = config;
        if (!config.checkpoint_dir.empty())
          vcfg.checkpoint_dir = (fs::path(config.checkpoint_dir) / row.variant).string();
        if (config.verbose) std::printf("--- training %s ---\n", row.variant.c_str());
        train(model, manifest, vcfg);
        trained[key] = model.state_dict();
      }
      row.report =
          evaluate_test(model, test, spec.name == VariantName::naive_mask, config.threshold);
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace attnseg
