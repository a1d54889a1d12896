#include "attnseg/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace attnseg {

using nlohmann::json;

void ConfusionCounts::add(const Tensor& pred, const Tensor& gt) {
  check_same_shape(pred, gt, "confusion");
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool p = pred.v[i] != 0.0;
    bool g = gt.v[i] != 0.0;
    if (p && g)
      ++tp;
    else if (p && !g)
      ++fp;
    else if (!p && g)
      ++fn;
    else
      ++tn;
  }
}

Tensor binarize(const Tensor& seg_prob, Scalar threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("binarization threshold must lie strictly between 0 and 1");
  Tensor m = seg_prob;
  for (auto& v : m.v) v = v >= threshold ? 1.0 : 0.0;
  return m;
}

std::pair<Scalar, Scalar> iou_pair(const Tensor& pred, const Tensor& gt) {
  ConfusionCounts c;
  c.add(pred, gt);
  auto iou = [](long long inter, long long uni) {
    return uni == 0 ? Scalar(1.0) : static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
  };
  Scalar fire = iou(c.tp, c.tp + c.fp + c.fn);
  Scalar background = iou(c.tn, c.tn + c.fp + c.fn);
  return {fire, background};
}

int consistency(const Tensor& pred_mask, int label) {
  bool any = false;
  for (Scalar v : pred_mask.v)
    if (v != 0.0) {
      any = true;
      break;
    }
  int inferred = any ? 1 : 0;
  return inferred == label ? 1 : 0;
}

MetricReport evaluate_corpus(const std::vector<SegClassOutput>& outputs,
                             const std::vector<EvalRecord>& records, Scalar threshold) {
  if (outputs.size() != records.size())
    throw std::invalid_argument("evaluate_corpus: " + std::to_string(outputs.size()) +
                                " outputs vs " + std::to_string(records.size()) + " records");
  if (outputs.empty()) throw std::invalid_argument("evaluate_corpus: empty corpus");

  ConfusionCounts global;
  Scalar acc_sum = 0.0, cons_sum = 0.0;
  long long cls_hits = 0, cls_n = 0;

  for (size_t i = 0; i < outputs.size(); ++i) {
    Tensor pred = binarize(outputs[i].seg_prob, threshold);
    const Tensor& gt = records[i].mask;
    check_same_shape(pred, gt, "evaluate_corpus");

    ConfusionCounts c;
    c.add(pred, gt);
    global.tp += c.tp;
    global.fp += c.fp;
    global.tn += c.tn;
    global.fn += c.fn;
    acc_sum += static_cast<Scalar>(c.tp + c.tn) / static_cast<Scalar>(c.total());
    cons_sum += consistency(pred, records[i].label);

    if (outputs[i].class_prob.has_value()) {
      int pred_label = *outputs[i].class_prob >= 0.5 ? 1 : 0;
      if (pred_label == records[i].label) ++cls_hits;
      ++cls_n;
    }
  }

  auto iou = [](long long inter, long long uni) {
    return uni == 0 ? Scalar(1.0) : static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
  };

  MetricReport r;
  r.pixel_accuracy = acc_sum / static_cast<Scalar>(outputs.size());
  r.iou_fire = iou(global.tp, global.tp + global.fp + global.fn);
  r.iou_background = iou(global.tn, global.tn + global.fp + global.fn);
  r.mean_iou = (r.iou_fire + r.iou_background) / 2.0;
  r.avg_consistency = cons_sum / static_cast<Scalar>(outputs.size());
  if (cls_n > 0) r.class_accuracy = static_cast<Scalar>(cls_hits) / static_cast<Scalar>(cls_n);
  return r;
}

std::string MetricReport::to_json() const {
  json j;
  j["pixel_accuracy"] = pixel_accuracy;
  j["iou_fire"] = iou_fire;
  j["iou_background"] = iou_background;
  j["mean_iou"] = mean_iou;
  if (class_accuracy)
    j["class_accuracy"] = *class_accuracy;
  else
    j["class_accuracy"] = nullptr;
  j["avg_consistency"] = avg_consistency;
  return j.dump();
}

MetricReport MetricReport::from_json(const std::string& text) {
  json j = json::parse(text);
  MetricReport r;
  r.pixel_accuracy = j.at("pixel_accuracy").get<Scalar>();
  r.iou_fire = j.at("iou_fire").get<Scalar>();
  r.iou_background = j.at("iou_background").get<Scalar>();
  r.mean_iou = j.at("mean_iou").get<Scalar>();
  if (!j.at("class_accuracy").is_null()) r.class_accuracy = j.at("class_accuracy").get<Scalar>();
  r.avg_consistency = j.at("avg_consistency").get<Scalar>();
  return r;
}

std::string render_metric_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  size_t name_w = 8;
  for (auto& [name, r] : rows) name_w = std::max(name_w, name.size());

  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w) + 2) << "variant"
     << std::right << std::setw(10) << "Accuracy" << std::setw(16) << "mean Accuracy"
     << std::setw(10) << "mean IOU" << std::setw(18) << "Avg. Consistency" << "\n";
  os << std::string(name_w + 2 + 10 + 16 + 10 + 18, '-') << "\n";
  for (auto& [name, r] : rows) {
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << name << std::right
       << std::fixed << std::setprecision(4);
    if (r.class_accuracy)
      os << std::setw(10) << *r.class_accuracy;
    else
      os << std::setw(10) << "-";
    os << std::setw(16) << r.pixel_accuracy << std::setw(10) << r.mean_iou << std::setw(18)
       << r.avg_consistency << "\n";
  }
  return os.str();
}

}  // namespace attnseg
