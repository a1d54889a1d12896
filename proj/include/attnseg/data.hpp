#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnseg/tensor.hpp"

namespace attnseg {

/// One image, its binary fire mask, and its scalar fire label. The mask is
/// always materialized; non-fire records without a mask file get an all-zero
/// mask at ingestion.
struct SampleRecord {
  std::string id;
  Tensor image;  // H x W x 3, values in [0, 1]
  Tensor mask;   // H x W x 1, values in {0, 1}
  int label = 0;
};

/// Throws unless label == 1(sum mask > 0) and shapes agree.
void validate_record(const SampleRecord& rec);

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::map<std::string, Split> split_assignment;
  uint64_t seed = 0;

  std::vector<const SampleRecord*> split_records(Split s) const;
  const SampleRecord* find(const std::string& id) const;
};

struct SynthConfig {
  int n_images = 400;
  int image_size = 64;
  double fire_fraction = 0.5;
  double distractor_fraction = 0.5;
  int min_blob_area = 30;
  int max_blob_area = 300;
  uint64_t seed = 1;

  void validate() const;
};

/// Elliptical blob in image coordinates; the mask support of a fire blob is
/// exactly the set of pixel centers with radius2() <= 1.
struct SynthBlob {
  double cy = 0, cx = 0;
  double ax = 0, ay = 0;  // semi-axes
  double angle = 0;
  double r = 0, g = 0, b = 0;  // warm fill, r > g > b
  bool fire = false;

  double radius2(double y, double x) const;
};

/// Deterministic per-record renderer; the record at `index` depends only on
/// (config, index). Blob parameters are returned for re-render checks.
SampleRecord render_synth_record(const SynthConfig& cfg, int index,
                                 std::vector<SynthBlob>* blobs = nullptr);

/// Desk-scale surrogate corpus: warm elliptical fire blobs with exact masks
/// on cool backgrounds; a fraction of non-fire images carry warm distractor
/// blobs so color alone cannot separate the classes.
DatasetManifest generate_synthetic(const SynthConfig& cfg);

/// Directory layout: root/images/<id>.png, root/masks/<id>.png (optional for
/// non-fire ids), root/labels.csv with columns (id, label).
DatasetManifest load_corpus(const std::string& root);

/// load_corpus, then adopt the split stored in root/manifest.json when it
/// covers every record; otherwise draw a fresh 60/20/20 split from `seed`.
DatasetManifest load_corpus_with_split(const std::string& root, uint64_t seed);

/// Deterministic stratified 60/20/20 assignment.
void split(DatasetManifest& manifest, uint64_t seed);

/// Writes the directory layout plus manifest.json. Masks are written for
/// fire records only.
void save_dataset(const DatasetManifest& manifest, const std::string& root);

std::string manifest_to_json(const DatasetManifest& manifest);

}  // namespace attnseg
