// Python surface over the C++ core: the attention gate, losses, metrics,
// model forward/save/load, synthetic data, and training.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <stdexcept>

#include "attnseg/baselines.hpp"
#include "attnseg/data.hpp"
#include "attnseg/layers.hpp"
#include "attnseg/loss.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/model.hpp"
#include "attnseg/train.hpp"

namespace py = pybind11;
using namespace attnseg;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                         int want_channels) {
  py::buffer_info info = a.request();
  std::vector<int> shape;
  if (info.ndim == 2) {
    shape = {static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]), 1};
  } else if (info.ndim == 3) {
    shape = {static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]),
             static_cast<int>(info.shape[2])};
  } else {
    throw std::invalid_argument("expected a 2-D or 3-D array");
  }
  if (want_channels > 0 && shape[2] != want_channels)
    throw std::invalid_argument("expected " + std::to_string(want_channels) +
                                " channel(s), got " + std::to_string(shape[2]));
  Tensor t(shape);
  const double* src = static_cast<const double*>(info.ptr);
  std::copy(src, src + t.v.size(), t.v.begin());
  return t;
}

py::array_t<double> array_from_tensor(const Tensor& t, bool squeeze) {
  if (squeeze && t.c() == 1) {
    py::array_t<double> a({t.h(), t.w()});
    std::copy(t.v.begin(), t.v.end(), a.mutable_data());
    return a;
  }
  py::array_t<double> a({t.h(), t.w(), t.c()});
  std::copy(t.v.begin(), t.v.end(), a.mutable_data());
  return a;
}

py::dict loss_dict(const LossBreakdown& lb) {
  py::dict d;
  d["seg_loss"] = lb.seg_loss;
  d["class_loss"] = lb.class_loss;
  d["total"] = lb.total;
  d["lambda"] = lb.lambda;
  return d;
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["pixel_accuracy"] = r.pixel_accuracy;
  d["iou_fire"] = r.iou_fire;
  d["iou_background"] = r.iou_background;
  d["mean_iou"] = r.mean_iou;
  d["class_accuracy"] = r.class_accuracy ? py::object(py::float_(*r.class_accuracy))
                                         : py::object(py::none());
  d["avg_consistency"] = r.avg_consistency;
  return d;
}

py::dict output_dict(const SegClassOutput& out) {
  py::dict d;
  d["seg_prob"] = array_from_tensor(out.seg_prob, true);
  d["seg_logits"] = array_from_tensor(out.seg_logits, true);
  d["class_prob"] =
      out.class_prob ? py::object(py::float_(*out.class_prob)) : py::object(py::none());
  d["alpha"] = out.alpha;
  return d;
}

}  // namespace

PYBIND11_MODULE(_attnseg, m) {
  m.doc() = "joint fire classification and segmentation core";

  m.def(
      "gated_attention",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a, double s,
         double alpha) {
        Tensor t = tensor_from_array(a, 0);
        return array_from_tensor(gated_attention(t, s, alpha), true);
      },
      py::arg("attention_map"), py::arg("class_prob"), py::arg("alpha"),
      "Classification-gated channel attention: out = a + alpha * s * a");

  m.def(
      "bce",
      [](py::object prob, py::object target) -> double {
        if (py::isinstance<py::float_>(prob) || py::isinstance<py::int_>(prob))
          return bce(prob.cast<double>(), target.cast<double>());
        Tensor p = tensor_from_array(prob.cast<py::array_t<double>>(), 0);
        Tensor t = tensor_from_array(target.cast<py::array_t<double>>(), 0);
        return bce(p, t);
      },
      py::arg("prob"), py::arg("target"), "Mean binary cross-entropy (clamped)");

  m.def(
      "joint_loss",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> seg_prob,
         py::array_t<double, py::array::c_style | py::array::forcecast> mask, double class_prob,
         double label, double lam) {
        return loss_dict(joint_loss(tensor_from_array(seg_prob, 1), tensor_from_array(mask, 1),
                                    class_prob, label, lam));
      },
      py::arg("seg_prob"), py::arg("mask"), py::arg("class_prob"), py::arg("label"),
      py::arg("lam"), "L = lam * L_S + (1 - lam) * L_C");

  m.def(
      "binarize",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> prob, double threshold) {
        return array_from_tensor(binarize(tensor_from_array(prob, 1), threshold), true);
      },
      py::arg("seg_prob"), py::arg("threshold") = 0.5);

  m.def(
      "iou_pair",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> pred,
         py::array_t<double, py::array::c_style | py::array::forcecast> gt) {
        auto [fire, background] = iou_pair(tensor_from_array(pred, 1), tensor_from_array(gt, 1));
        return py::make_tuple(fire, background);
      },
      py::arg("pred"), py::arg("gt"), "(iou_fire, iou_background); empty union counts as 1");

  m.def(
      "consistency",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> mask, int label) {
        return consistency(tensor_from_array(mask, 1), label);
      },
      py::arg("pred_mask"), py::arg("label"),
      "1 when the label inferred from the mask matches the given label");

  m.def(
      "evaluate_corpus",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& probs,
         py::object class_probs,
         const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& masks,
         const std::vector<int>& labels, double threshold) {
        std::vector<SegClassOutput> outputs(probs.size());
        std::vector<EvalRecord> records(masks.size());
        for (size_t i = 0; i < probs.size(); ++i) {
          outputs[i].seg_prob = tensor_from_array(probs[i], 1);
          outputs[i].seg_logits = outputs[i].seg_prob;
        }
        if (!class_probs.is_none()) {
          auto cps = class_probs.cast<std::vector<double>>();
          if (cps.size() != outputs.size())
            throw std::invalid_argument("class_probs length mismatch");
          for (size_t i = 0; i < cps.size(); ++i) outputs[i].class_prob = cps[i];
        }
        for (size_t i = 0; i < masks.size(); ++i) {
          records[i].mask = tensor_from_array(masks[i], 1);
          records[i].label = i < labels.size() ? labels[i] : 0;
        }
        if (labels.size() != masks.size())
          throw std::invalid_argument("labels length mismatch");
        return report_dict(evaluate_corpus(outputs, records, threshold));
      },
      py::arg("seg_probs"), py::arg("class_probs"), py::arg("masks"), py::arg("labels"),
      py::arg("threshold") = 0.5);

  m.def(
      "generate_dataset",
      [](const std::string& out_dir, int n_images, int image_size, double fire_fraction,
         double distractor_fraction, uint64_t seed) {
        SynthConfig cfg;
        cfg.n_images = n_images;
        cfg.image_size = image_size;
        cfg.fire_fraction = fire_fraction;
        cfg.distractor_fraction = distractor_fraction;
        cfg.seed = seed;
        DatasetManifest man = generate_synthetic(cfg);
        split(man, seed);
        save_dataset(man, out_dir);
        return static_cast<int>(man.records.size());
      },
      py::arg("out_dir"), py::arg("n_images") = 400, py::arg("image_size") = 64,
      py::arg("fire_fraction") = 0.5, py::arg("distractor_fraction") = 0.5, py::arg("seed") = 1,
      "Writes images/, masks/, labels.csv and manifest.json; returns the record count");

  py::class_<Model>(m, "Model")
      .def_static(
          "create",
          [](const std::string& config_json, uint64_t seed) {
            Model mdl(ModelConfig::from_json(config_json));
            mdl.init(seed);
            return mdl;
          },
          py::arg("config_json"), py::arg("seed") = 1)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def("config_json", [](const Model& mdl) { return mdl.config().to_json(); })
      .def_property_readonly("alpha", &Model::alpha)
      .def(
          "forward",
          [](const Model& mdl,
             py::array_t<double, py::array::c_style | py::array::forcecast> image) {
            return output_dict(mdl.forward(tensor_from_array(image, 3)));
          },
          py::arg("image"), "image: (H, W, 3) float64 in [0, 1]");

  m.def(
      "default_model_config",
      [](int input_size, bool attention_spatial, bool attention_classgate, bool with_classifier) {
        ModelConfig c;
        c.input_size = input_size;
        c.attention_spatial = attention_spatial;
        c.attention_classgate = attention_classgate;
        c.with_classifier = with_classifier;
        if (!with_classifier) c.attention_classgate = false;
        c.validate();
        return c.to_json();
      },
      py::arg("input_size") = 64, py::arg("attention_spatial") = true,
      py::arg("attention_classgate") = true, py::arg("with_classifier") = true);

  m.def(
      "train_model",
      [](Model& mdl, const std::string& data_dir, const std::string& train_json) {
        TrainConfig tc = TrainConfig::from_json(train_json);
        DatasetManifest man = load_corpus_with_split(data_dir, tc.seed);
        tc.input_size = mdl.config().input_size;
        TrainResult res = train(mdl, man, tc);
        py::list history;
        for (const auto& rec : res.history) {
          py::dict d;
          d["epoch"] = rec.epoch;
          d["train"] = loss_dict(rec.train_loss);
          d["val"] = loss_dict(rec.val_loss);
          d["val_metrics"] = report_dict(rec.val_metrics);
          d["best"] = rec.best;
          history.append(d);
        }
        py::dict out;
        out["history"] = history;
        out["best_epoch"] = res.best_epoch;
        out["best_val_total"] = res.best_val_total;
        return out;
      },
      py::arg("model"), py::arg("data_dir"), py::arg("train_json") = "{}",
      "Trains in place on the directory's train split; leaves the best weights loaded");

  m.def(
      "apply_naive_rule",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> seg_prob,
         double class_prob, double threshold) {
        SegClassOutput out;
        out.seg_prob = tensor_from_array(seg_prob, 1);
        out.seg_logits = out.seg_prob;
        out.class_prob = class_prob;
        return array_from_tensor(apply_naive_rule(out, threshold).seg_prob, true);
      },
      py::arg("seg_prob"), py::arg("class_prob"), py::arg("threshold") = 0.5,
      "Zeroes the mask when the classifier output falls below the threshold");
}
