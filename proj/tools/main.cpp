// Command-line surface: dataset synthesis, training, evaluation, prediction
// with overlay rendering, and the variant comparison table.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "attnseg/baselines.hpp"
#include "attnseg/data.hpp"
#include "attnseg/image_io.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/model.hpp"
#include "attnseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attnseg;

namespace {

constexpr const char* kVersion = "0.1.0";

int g_exit_code = 0;

std::string iso_utc_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_run_manifest(const fs::path& dir, const std::string& command, const json& resolved,
                        uint64_t seed, const std::string& started) {
  json j;
  j["command"] = command;
  j["config_snapshot"] = resolved;
  j["code_version"] = kVersion;
  j["seed"] = seed;
  j["timestamps"] = {{"started", started}, {"finished", iso_utc_now()}};
  fs::create_directories(dir);
  std::ofstream f(dir / "run_manifest.json");
  if (!f) throw std::runtime_error("cannot write run manifest under " + dir.string());
  f << j.dump(2) << "\n";
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  json j = json::parse(f);
  static const std::set<std::string> known = {"model", "train", "synth"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("unknown config section '" + it.key() + "'");
  return j;
}

// partial override of ModelConfig defaults; unknown keys rejected
ModelConfig model_from_section(const json& j) {
  ModelConfig c;
  static const std::set<std::string> known = {
      "backbone",          "input_size",        "encoder_channels",
      "attention_spatial", "attention_classgate", "selfattn_embed_channels",
      "classifier_hidden", "with_classifier"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("unknown model config key '" + it.key() + "'");
  if (j.contains("backbone")) c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  c.input_size = j.value("input_size", c.input_size);
  if (j.contains("encoder_channels"))
    c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  c.attention_spatial = j.value("attention_spatial", c.attention_spatial);
  c.attention_classgate = j.value("attention_classgate", c.attention_classgate);
  c.selfattn_embed_channels = j.value("selfattn_embed_channels", c.selfattn_embed_channels);
  c.classifier_hidden = j.value("classifier_hidden", c.classifier_hidden);
  c.with_classifier = j.value("with_classifier", c.with_classifier);
  return c;
}

SynthConfig synth_from_section(const json& j) {
  SynthConfig c;
  static const std::set<std::string> known = {"n_images",       "image_size",
                                              "fire_fraction",  "distractor_fraction",
                                              "min_blob_area",  "max_blob_area",
                                              "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("unknown synth config key '" + it.key() + "'");
  c.n_images = j.value("n_images", c.n_images);
  c.image_size = j.value("image_size", c.image_size);
  c.fire_fraction = j.value("fire_fraction", c.fire_fraction);
  c.distractor_fraction = j.value("distractor_fraction", c.distractor_fraction);
  c.min_blob_area = j.value("min_blob_area", c.min_blob_area);
  c.max_blob_area = j.value("max_blob_area", c.max_blob_area);
  c.seed = j.value("seed", c.seed);
  return c;
}

json synth_to_section(const SynthConfig& c) {
  json j;
  j["n_images"] = c.n_images;
  j["image_size"] = c.image_size;
  j["fire_fraction"] = c.fire_fraction;
  j["distractor_fraction"] = c.distractor_fraction;
  j["min_blob_area"] = c.min_blob_area;
  j["max_blob_area"] = c.max_blob_area;
  j["seed"] = c.seed;
  return j;
}

bool dir_nonempty(const fs::path& p) {
  return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fire segmentation / classification toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // ---- synth ------------------------------------------------------------
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset directory");
  struct {
    int n = 0, size = 0, min_area = 0, max_area = 0;
    double fire_fraction = 0, distractor_fraction = 0;
    uint64_t seed = 1;
    std::string out, config;
    bool force = false, deterministic = true;
  } sy;
  synth_cmd->add_option("--n", sy.n, "number of images");
  synth_cmd->add_option("--size", sy.size, "square image size in pixels");
  synth_cmd->add_option("--fire-fraction", sy.fire_fraction, "fraction of fire images");
  synth_cmd->add_option("--distractor-fraction", sy.distractor_fraction,
                        "fraction of non-fire images with warm distractor blobs");
  synth_cmd->add_option("--min-blob-area", sy.min_area, "minimum blob area, pixels");
  synth_cmd->add_option("--max-blob-area", sy.max_area, "maximum blob area, pixels");
  synth_cmd->add_option("--seed", sy.seed, "generation and split seed");
  synth_cmd->add_option("--out", sy.out, "output dataset directory")->required();
  synth_cmd->add_option("--config", sy.config, "JSON config file");
  synth_cmd->add_flag("--force", sy.force, "overwrite a non-empty output directory");
  synth_cmd->add_flag("--deterministic,!--no-deterministic", sy.deterministic,
                      "reproducible mode (default on)");
  synth_cmd->callback([&] {
    const std::string started = iso_utc_now();
    json cfg_file = load_config_file(sy.config);
    SynthConfig cfg = synth_from_section(cfg_file.value("synth", json::object()));
    if (synth_cmd->count("--n")) cfg.n_images = sy.n;
    if (synth_cmd->count("--size")) cfg.image_size = sy.size;
    if (synth_cmd->count("--fire-fraction")) cfg.fire_fraction = sy.fire_fraction;
    if (synth_cmd->count("--distractor-fraction")) cfg.distractor_fraction = sy.distractor_fraction;
    if (synth_cmd->count("--min-blob-area")) cfg.min_blob_area = sy.min_area;
    if (synth_cmd->count("--max-blob-area")) cfg.max_blob_area = sy.max_area;
    if (synth_cmd->count("--seed")) cfg.seed = sy.seed;
    cfg.validate();

    if (dir_nonempty(sy.out) && !sy.force)
      throw std::runtime_error("output directory " + sy.out +
                               " is not empty; pass --force to overwrite");

    DatasetManifest m = generate_synthetic(cfg);
    split(m, cfg.seed);
    save_dataset(m, sy.out);

    json resolved;
    resolved["synth"] = synth_to_section(cfg);
    write_run_manifest(sy.out, "synth", resolved, cfg.seed, started);
    std::printf("wrote %zu images (%d fire) to %s\n", m.records.size(),
                static_cast<int>(std::llround(cfg.n_images * cfg.fire_fraction)),
                sy.out.c_str());
  });

  // ---- train ------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train one model variant");
  struct {
    std::string data, out = "train_out", variant = "proposed_full", config, backbone,
                pretrained;
    double lr = 0, wd = 0, lambda = 0, threshold = 0;
    int epochs = 0, batch = 0, input_size = 0;
    uint64_t seed = 1;
    bool hflip = false, deterministic = true, quiet = false;
  } tr;
  train_cmd->add_option("--data", tr.data, "dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "output directory for checkpoints and history");
  train_cmd->add_option("--variant", tr.variant,
                        "seg_only | multitask_plain | naive_mask | proposed_full");
  train_cmd->add_option("--backbone", tr.backbone, "desk_small | deeplabv3plus");
  train_cmd->add_option("--pretrained-encoder", tr.pretrained,
                        "checkpoint whose encoder tensors seed this run");
  train_cmd->add_option("--lr", tr.lr, "learning rate");
  train_cmd->add_option("--weight-decay", tr.wd, "decoupled weight decay");
  train_cmd->add_option("--lambda", tr.lambda, "segmentation loss weight in [0,1]");
  train_cmd->add_option("--epochs", tr.epochs, "training epochs");
  train_cmd->add_option("--batch-size", tr.batch, "batch size");
  train_cmd->add_option("--input-size", tr.input_size, "model input resolution");
  train_cmd->add_option("--threshold", tr.threshold, "validation binarization threshold");
  train_cmd->add_option("--seed", tr.seed, "init/shuffle seed");
  train_cmd->add_flag("--hflip", tr.hflip, "horizontal-flip augmentation");
  train_cmd->add_option("--config", tr.config, "JSON config file");
  train_cmd->add_flag("--deterministic,!--no-deterministic", tr.deterministic,
                      "reproducible mode (default on)");
  train_cmd->add_flag("--quiet", tr.quiet, "suppress the per-epoch log");
  train_cmd->callback([&] {
    const std::string started = iso_utc_now();
    json cfg_file = load_config_file(tr.config);

    ModelConfig mc = model_from_section(cfg_file.value("model", json::object()));
    if (train_cmd->count("--backbone")) mc.backbone = backbone_from_string(tr.backbone);
    if (train_cmd->count("--input-size")) mc.input_size = tr.input_size;
    VariantSpec spec = make_variant(variant_from_string(tr.variant), mc);
    mc = spec.base_config;

    TrainConfig tc = TrainConfig::from_json(cfg_file.value("train", json::object()).dump());
    if (train_cmd->count("--lr")) tc.lr = tr.lr;
    if (train_cmd->count("--weight-decay")) tc.weight_decay = tr.wd;
    if (train_cmd->count("--lambda")) tc.lambda = tr.lambda;
    if (train_cmd->count("--epochs")) tc.epochs = tr.epochs;
    if (train_cmd->count("--batch-size")) tc.batch_size = tr.batch;
    if (train_cmd->count("--threshold")) tc.threshold = tr.threshold;
    if (train_cmd->count("--seed")) tc.seed = tr.seed;
    if (train_cmd->count("--hflip")) tc.hflip = tr.hflip;
    if (train_cmd->count("--deterministic") || train_cmd->count("--no-deterministic"))
      tc.deterministic = tr.deterministic;
    tc.input_size = mc.input_size;
    tc.checkpoint_dir = tr.out;
    tc.verbose = !tr.quiet;
    tc.validate();
    if (spec.name == VariantName::seg_only) tc.lambda = 1.0;

    DatasetManifest data = load_corpus_with_split(tr.data, tc.seed);

    Model model = tr.pretrained.empty()
                      ? build_model(mc, InitKind::random, tc.seed, "")
                      : build_model(mc, InitKind::pretrained_encoder, tc.seed, tr.pretrained);
    TrainResult res = train(model, data, tc);

    json resolved;
    resolved["model"] = json::parse(mc.to_json());
    resolved["train"] = json::parse(tc.to_json());
    resolved["variant"] = tr.variant;
    write_run_manifest(tr.out, "train", resolved, tc.seed, started);
    std::printf("best epoch %d (val loss %.6f); checkpoint %s\n", res.best_epoch,
                res.best_val_total, res.best_checkpoint.c_str());
  });

  // ---- eval -------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  struct {
    std::string ckpt, data, split_name = "test", out, config;
    double threshold = 0.5, lambda = 0.6;
    uint64_t seed = 1;
    bool deterministic = true;
  } ev;
  eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "dataset directory")->required();
  eval_cmd->add_option("--split", ev.split_name, "train | val | test");
  eval_cmd->add_option("--threshold", ev.threshold, "mask binarization threshold");
  eval_cmd->add_option("--lambda", ev.lambda, "loss weight for the reported loss");
  eval_cmd->add_option("--out", ev.out, "directory for report files (optional)");
  eval_cmd->add_option("--seed", ev.seed, "split seed when the dataset has none stored");
  eval_cmd->add_option("--config", ev.config, "JSON config file");
  eval_cmd->add_flag("--deterministic,!--no-deterministic", ev.deterministic,
                     "reproducible mode (default on)");
  eval_cmd->callback([&] {
    const std::string started = iso_utc_now();
    Split sp = split_from_string(ev.split_name);  // usage error on bad name
    if (!(ev.threshold > 0.0 && ev.threshold < 1.0))
      throw CLI::ValidationError("--threshold", "must be in (0, 1)");

    Model model = Model::load(ev.ckpt);
    DatasetManifest data = load_corpus_with_split(ev.data, ev.seed);
    auto recs = data.split_records(sp);
    if (recs.empty())
      throw std::runtime_error("split '" + ev.split_name + "' is empty in " + ev.data);

    EvalOutcome outcome = evaluate_split(model, recs, ev.lambda, ev.threshold);
    std::vector<std::pair<std::string, MetricReport>> rows = {{ev.split_name, outcome.metrics}};
    std::string table = render_metric_table(rows);
    std::printf("%s", table.c_str());

    json report;
    report["split"] = ev.split_name;
    report["threshold"] = ev.threshold;
    report["n_images"] = recs.size();
    report["loss"] = {{"seg_loss", outcome.loss.seg_loss},
                      {"class_loss", outcome.loss.class_loss},
                      {"total", outcome.loss.total},
                      {"lambda", outcome.loss.lambda}};
    report["metrics"] = json::parse(outcome.metrics.to_json());
    if (!ev.out.empty()) {
      fs::create_directories(ev.out);
      std::ofstream(fs::path(ev.out) / "report.json") << report.dump(2) << "\n";
      std::ofstream(fs::path(ev.out) / "report.txt") << table;
      json resolved;
      resolved["eval"] = {{"ckpt", ev.ckpt},   {"data", ev.data},
                          {"split", ev.split_name}, {"threshold", ev.threshold},
                          {"lambda", ev.lambda}};
      resolved["model"] = json::parse(model.config().to_json());
      write_run_manifest(ev.out, "eval", resolved, ev.seed, started);
    }
  });

  // ---- predict ----------------------------------------------------------
  auto* pred_cmd = app.add_subcommand("predict", "segment images and render overlays");
  struct {
    std::string ckpt, out, config;
    std::vector<std::string> images;
    double threshold = 0.5;
    bool naive = false, deterministic = true;
    uint64_t seed = 1;
  } pr;
  pred_cmd->add_option("--ckpt", pr.ckpt, "checkpoint file")->required();
  pred_cmd->add_option("--out", pr.out, "output directory")->required();
  pred_cmd->add_option("images", pr.images, "input image files")->required();
  pred_cmd->add_option("--threshold", pr.threshold, "mask binarization threshold");
  pred_cmd->add_flag("--apply-naive", pr.naive,
                     "zero the mask when the classifier says non-fire");
  pred_cmd->add_option("--seed", pr.seed, "unused; accepted for interface uniformity");
  pred_cmd->add_option("--config", pr.config, "JSON config file");
  pred_cmd->add_flag("--deterministic,!--no-deterministic", pr.deterministic,
                     "reproducible mode (default on)");
  pred_cmd->callback([&] {
    const std::string started = iso_utc_now();
    if (!(pr.threshold > 0.0 && pr.threshold < 1.0))
      throw CLI::ValidationError("--threshold", "must be in (0, 1)");
    Model model = Model::load(pr.ckpt);
    const int size = model.config().input_size;
    fs::create_directories(pr.out);

    json results = json::array();
    json failures = json::array();
    std::set<std::string> used;
    int index = 0;
    for (const auto& path : pr.images) {
      ++index;
      try {
        Tensor img = load_image_rgb(path);
        const bool fits = img.h() == size && img.w() == size;
        SegClassOutput out = model.forward(fits ? img : resize_image(img, size));
        if (pr.naive) out = apply_naive_rule(out, pr.threshold);
        Tensor mask = binarize(out.seg_prob, pr.threshold);

        std::string stem = fs::path(path).stem().string();
        if (!used.insert(stem).second) {
          stem += "_" + std::to_string(index);
          used.insert(stem);
        }
        // mask and overlay are written at the original resolution
        Tensor full_mask = fits ? mask : resize_mask_nearest(mask, img.h(), img.w());
        std::string mask_path = (fs::path(pr.out) / (stem + "_mask.png")).string();
        std::string overlay_path = (fs::path(pr.out) / (stem + "_overlay.png")).string();
        save_mask(mask_path, full_mask);
        save_image_rgb(overlay_path, render_overlay(img, full_mask));

        json e;
        e["image"] = path;
        e["mask"] = mask_path;
        e["overlay"] = overlay_path;
        e["class_prob"] = out.class_prob ? json(*out.class_prob) : json(nullptr);
        e["fire_pixels"] = static_cast<long long>(
            std::llround(std::accumulate(full_mask.v.begin(), full_mask.v.end(), 0.0)));
        results.push_back(e);
      } catch (const std::exception& e) {
        failures.push_back({{"image", path}, {"error", e.what()}});
        std::fprintf(stderr, "predict: %s: %s\n", path.c_str(), e.what());
        g_exit_code = 3;  // partial failure
      }
    }
    json summary;
    summary["predictions"] = results;
    summary["failures"] = failures;
    std::ofstream(fs::path(pr.out) / "predictions.json") << summary.dump(2) << "\n";

    json resolved;
    resolved["predict"] = {{"ckpt", pr.ckpt},
                           {"threshold", pr.threshold},
                           {"apply_naive", pr.naive},
                           {"n_images", pr.images.size()}};
    write_run_manifest(pr.out, "predict", resolved, pr.seed, started);
    if (results.empty() && !failures.empty()) g_exit_code = 1;
  });

  // ---- ablate -----------------------------------------------------------
  auto* abl_cmd = app.add_subcommand("ablate", "train and compare the model variants");
  struct {
    std::string data, out = "ablate_out", config, backbone;
    std::vector<std::string> variants;
    double lr = 0, wd = 0, lambda = 0, threshold = 0;
    int epochs = 0, batch = 0, input_size = 0;
    uint64_t seed = 1;
    bool deterministic = true, quiet = false;
  } ab;
  abl_cmd->add_option("--data", ab.data, "dataset directory")->required();
  abl_cmd->add_option("--out", ab.out, "output directory");
  abl_cmd->add_option("--variants", ab.variants,
                      "subset of: seg_only multitask_plain naive_mask proposed_full")
      ->delimiter(',');
  abl_cmd->add_option("--backbone", ab.backbone, "desk_small | deeplabv3plus");
  abl_cmd->add_option("--lr", ab.lr, "learning rate");
  abl_cmd->add_option("--weight-decay", ab.wd, "decoupled weight decay");
  abl_cmd->add_option("--lambda", ab.lambda, "segmentation loss weight in [0,1]");
  abl_cmd->add_option("--epochs", ab.epochs, "training epochs per variant");
  abl_cmd->add_option("--batch-size", ab.batch, "batch size");
  abl_cmd->add_option("--input-size", ab.input_size, "model input resolution");
  abl_cmd->add_option("--threshold", ab.threshold, "mask binarization threshold");
  abl_cmd->add_option("--seed", ab.seed, "shared init/shuffle/split seed");
  abl_cmd->add_option("--config", ab.config, "JSON config file");
  abl_cmd->add_flag("--deterministic,!--no-deterministic", ab.deterministic,
                    "reproducible mode (default on)");
  abl_cmd->add_flag("--quiet", ab.quiet, "suppress per-epoch logs");
  abl_cmd->callback([&] {
    const std::string started = iso_utc_now();
    json cfg_file = load_config_file(ab.config);

    ModelConfig mc = model_from_section(cfg_file.value("model", json::object()));
    if (abl_cmd->count("--backbone")) mc.backbone = backbone_from_string(ab.backbone);
    if (abl_cmd->count("--input-size")) mc.input_size = ab.input_size;

    TrainConfig tc = TrainConfig::from_json(cfg_file.value("train", json::object()).dump());
    if (abl_cmd->count("--lr")) tc.lr = ab.lr;
    if (abl_cmd->count("--weight-decay")) tc.weight_decay = ab.wd;
    if (abl_cmd->count("--lambda")) tc.lambda = ab.lambda;
    if (abl_cmd->count("--epochs")) tc.epochs = ab.epochs;
    if (abl_cmd->count("--batch-size")) tc.batch_size = ab.batch;
    if (abl_cmd->count("--threshold")) tc.threshold = ab.threshold;
    if (abl_cmd->count("--seed")) tc.seed = ab.seed;
    tc.input_size = mc.input_size;
    tc.checkpoint_dir = (fs::path(ab.out) / "checkpoints").string();
    tc.verbose = !ab.quiet;
    tc.validate();

    std::vector<VariantSpec> specs;
    if (ab.variants.empty()) {
      specs = default_variants(mc);
    } else {
      for (const auto& name : ab.variants)
        specs.push_back(make_variant(variant_from_string(name), mc));
    }

    DatasetManifest data = load_corpus_with_split(ab.data, tc.seed);
    AblationResult res = run_ablation(data, specs, tc);

    std::string table = res.render_table();
    std::printf("%s", table.c_str());
    fs::create_directories(ab.out);
    std::ofstream(fs::path(ab.out) / "ablation.json") << res.to_json() << "\n";
    std::ofstream(fs::path(ab.out) / "ablation.txt") << table;

    json resolved;
    resolved["model"] = json::parse(mc.to_json());
    resolved["train"] = json::parse(tc.to_json());
    json vnames = json::array();
    for (const auto& s : specs) vnames.push_back(to_string(s.name));
    resolved["variants"] = vnames;
    write_run_manifest(ab.out, "ablate", resolved, tc.seed, started);

    for (const auto& row : res.rows)
      if (!row.ok) g_exit_code = 1;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return g_exit_code;
}
