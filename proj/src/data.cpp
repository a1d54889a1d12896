#include "attnseg/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "attnseg/image_io.hpp"
#include "attnseg/rng.hpp"

namespace attnseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Records and manifests
// ---------------------------------------------------------------------------

void validate_record(const SampleRecord& rec) {
  if (rec.image.rank() != 3 || rec.image.c() != 3)
    throw std::runtime_error("record '" + rec.id + "': image must be HxWx3, got " +
                             rec.image.shape_str());
  if (rec.mask.rank() != 3 || rec.mask.c() != 1)
    throw std::runtime_error("record '" + rec.id + "': mask must be HxWx1, got " +
                             rec.mask.shape_str());
  if (rec.mask.h() != rec.image.h() || rec.mask.w() != rec.image.w())
    throw std::runtime_error("record '" + rec.id + "': size mismatch, image " +
                             rec.image.shape_str() + " vs mask " + rec.mask.shape_str());
  bool any = false;
  for (Scalar v : rec.mask.v) {
    if (v != 0.0 && v != 1.0)
      throw std::runtime_error("record '" + rec.id + "': mask is not binary");
    if (v != 0.0) any = true;
  }
  int inferred = any ? 1 : 0;
  if (inferred != rec.label)
    throw std::runtime_error("record '" + rec.id + "': label/mask inconsistency (label " +
                             std::to_string(rec.label) + ", mask indicator " +
                             std::to_string(inferred) + ")");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<const SampleRecord*> DatasetManifest::split_records(Split s) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records) {
    auto it = split_assignment.find(r.id);
    if (it != split_assignment.end() && it->second == s) out.push_back(&r);
  }
  return out;
}

const SampleRecord* DatasetManifest::find(const std::string& id) const {
  for (const auto& r : records)
    if (r.id == id) return &r;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (n_images < 5)
    throw std::invalid_argument("n_images must be >= 5 to form three non-empty splits, got " +
                                std::to_string(n_images));
  if (image_size < 16) throw std::invalid_argument("image_size must be >= 16");
  if (fire_fraction < 0.0 || fire_fraction > 1.0)
    throw std::invalid_argument("fire_fraction must be in [0, 1]");
  if (distractor_fraction < 0.0 || distractor_fraction > 1.0)
    throw std::invalid_argument("distractor_fraction must be in [0, 1]");
  if (min_blob_area < 4) throw std::invalid_argument("min_blob_area must be >= 4");
  if (min_blob_area > max_blob_area ||
      static_cast<long long>(max_blob_area) >=
          static_cast<long long>(image_size) * image_size)
    throw std::invalid_argument("blob areas must satisfy min <= max < image_size^2");
}

double SynthBlob::radius2(double y, double x) const {
  double dy = y - cy, dx = x - cx;
  double ca = std::cos(angle), sa = std::sin(angle);
  double u = (dx * ca + dy * sa) / ax;
  double v = (-dx * sa + dy * ca) / ay;
  return u * u + v * v;
}

namespace {

SynthBlob draw_blob(Rng& rng, const SynthConfig& cfg, bool fire) {
  SynthBlob blob;
  double area = rng.uniform(cfg.min_blob_area, cfg.max_blob_area);
  double aspect = rng.uniform(0.4, 1.0);
  blob.ax = std::sqrt(area * aspect / M_PI);
  blob.ay = std::sqrt(area / (aspect * M_PI));
  blob.angle = rng.uniform(0.0, M_PI);
  blob.cy = rng.uniform(2.0, cfg.image_size - 3.0);
  blob.cx = rng.uniform(2.0, cfg.image_size - 3.0);
  // warm fill, R > G > B by construction
  blob.r = rng.uniform(0.85, 1.0);
  blob.g = rng.uniform(0.35, 0.7);
  blob.b = rng.uniform(0.02, 0.2);
  blob.fire = fire;
  return blob;
}

}  // namespace

SampleRecord render_synth_record(const SynthConfig& cfg, int index,
                                 std::vector<SynthBlob>* blobs_out) {
  const int sz = cfg.image_size;
  Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(index)));

  const long long n_fire = std::llround(cfg.n_images * cfg.fire_fraction);
  const bool fire = index < n_fire;

  // cool background: two corner colors, random gradient orientation
  double bg0[3] = {rng.uniform(0.02, 0.25), rng.uniform(0.25, 0.6), rng.uniform(0.45, 0.95)};
  double bg1[3] = {rng.uniform(0.02, 0.25), rng.uniform(0.25, 0.6), rng.uniform(0.45, 0.95)};
  double horiz_w = rng.uniform(0.0, 1.0);

  std::vector<SynthBlob> blobs;
  if (fire) {
    int k = rng.uniform_int(1, 3);
    for (int i = 0; i < k; ++i) blobs.push_back(draw_blob(rng, cfg, true));
  } else if (rng.bernoulli(cfg.distractor_fraction)) {
    int k = rng.uniform_int(1, 2);
    for (int i = 0; i < k; ++i) blobs.push_back(draw_blob(rng, cfg, false));
  }

  SampleRecord rec;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%06d", index);
  rec.id = buf;
  rec.label = fire ? 1 : 0;
  rec.image = Tensor({sz, sz, 3});
  rec.mask = Tensor({sz, sz, 1});

  constexpr double kGlowExtent = 2.2;  // fire halo, in normalized blob radii

  for (int y = 0; y < sz; ++y) {
    for (int x = 0; x < sz; ++x) {
      double noise[3] = {rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02),
                         rng.uniform(-0.02, 0.02)};
      double tx = sz > 1 ? static_cast<double>(x) / (sz - 1) : 0.0;
      double ty = sz > 1 ? static_cast<double>(y) / (sz - 1) : 0.0;
      double t = horiz_w * tx + (1.0 - horiz_w) * ty;
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = bg0[c] + t * (bg1[c] - bg0[c]);

      // nearest blob in normalized radius wins the pixel
      const SynthBlob* hit = nullptr;
      double best = 1.0;
      double glow = 0.0;
      for (const auto& blob : blobs) {
        double r2 = blob.radius2(y + 0.0, x + 0.0);
        if (r2 <= best) {
          best = r2;
          hit = &blob;
        }
        if (blob.fire && r2 > 1.0 && r2 <= kGlowExtent * kGlowExtent) {
          double rr = std::sqrt(r2);
          glow = std::max(glow, 0.45 * (kGlowExtent - rr) / (kGlowExtent - 1.0));
        }
      }

      if (hit) {
        if (hit->fire) {
          // hot core shading toward the warm edge color
          double rho = std::sqrt(best);
          double core[3] = {1.0, 0.95, 0.6};
          for (int c = 0; c < 3; ++c) {
            double edge = c == 0 ? hit->r : (c == 1 ? hit->g : hit->b);
            px[c] = core[c] + rho * (edge - core[c]);
          }
          rec.mask.at(y, x, 0) = 1.0;
        } else {
          px[0] = hit->r;
          px[1] = hit->g;
          px[2] = hit->b;
        }
      } else if (glow > 0.0) {
        px[0] += glow * 1.0;
        px[1] += glow * 0.8;
        px[2] += glow * 0.4;
      }

      for (int c = 0; c < 3; ++c) {
        double v = px[c] + noise[c];
        rec.image.at(y, x, c) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      }
    }
  }

  // a fire blob always covers its own center pixel, so fire masks are nonempty
  validate_record(rec);
  if (blobs_out) *blobs_out = std::move(blobs);
  return rec;
}

DatasetManifest generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  DatasetManifest m;
  m.seed = cfg.seed;
  m.records.reserve(static_cast<size_t>(cfg.n_images));
  for (int i = 0; i < cfg.n_images; ++i) m.records.push_back(render_synth_record(cfg, i));
  return m;
}

// ---------------------------------------------------------------------------
// Corpus ingestion
// ---------------------------------------------------------------------------

namespace {

std::map<std::string, int> read_labels_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open label file: " + path);
  std::map<std::string, int> labels;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first && line == "id,label") {
      first = false;
      continue;
    }
    first = false;
    auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("malformed line in " + path + ": '" + line + "'");
    std::string id = line.substr(0, comma);
    std::string value = line.substr(comma + 1);
    if (value != "0" && value != "1")
      throw std::runtime_error("label for '" + id + "' must be 0 or 1, got '" + value + "'");
    if (!labels.emplace(id, value == "1" ? 1 : 0).second)
      throw std::runtime_error("duplicate label entry for '" + id + "'");
  }
  return labels;
}

}  // namespace

DatasetManifest load_corpus(const std::string& root) {
  fs::path base(root);
  if (!fs::is_directory(base)) throw std::runtime_error("dataset root is not a directory: " + root);
  fs::path images_dir = base / "images";
  fs::path masks_dir = base / "masks";
  if (!fs::is_directory(images_dir))
    throw std::runtime_error("missing images/ directory under " + root);

  auto labels = read_labels_csv((base / "labels.csv").string());

  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    if (!e.is_regular_file()) continue;
    ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());

  DatasetManifest m;
  for (const std::string& id : ids) {
    auto it = labels.find(id);
    if (it == labels.end())
      throw std::runtime_error("missing label entry for id '" + id + "' in labels.csv");

    SampleRecord rec;
    rec.id = id;
    rec.label = it->second;
    rec.image = load_image_rgb((images_dir / (id + ".png")).string());

    fs::path mask_path = masks_dir / (id + ".png");
    if (fs::exists(mask_path)) {
      rec.mask = load_mask(mask_path.string());
      if (rec.mask.h() != rec.image.h() || rec.mask.w() != rec.image.w())
        throw std::runtime_error("record '" + id + "': size mismatch, image " +
                                 rec.image.shape_str() + " vs mask " + rec.mask.shape_str());
    } else if (rec.label == 0) {
      rec.mask = Tensor({rec.image.h(), rec.image.w(), 1});  // synthesized all-zero
    } else {
      throw std::runtime_error("record '" + id + "': labeled fire but has no mask file");
    }

    validate_record(rec);
    m.records.push_back(std::move(rec));
  }

  // every labeled id must resolve to a readable image
  for (const auto& [id, label] : labels) {
    (void)label;
    if (!m.find(id))
      throw std::runtime_error("cannot read image for labeled id '" + id + "': " +
                               (images_dir / (id + ".png")).string());
  }
  return m;
}

DatasetManifest load_corpus_with_split(const std::string& root, uint64_t seed) {
  DatasetManifest m = load_corpus(root);
  fs::path mpath = fs::path(root) / "manifest.json";
  if (fs::exists(mpath)) {
    std::ifstream f(mpath);
    json j = json::parse(f);  // a malformed manifest is a hard error
    if (j.contains("split_assignment")) {
      std::map<std::string, Split> sa;
      for (auto& [id, s] : j.at("split_assignment").items())
        sa[id] = split_from_string(s.get<std::string>());
      bool covers = !m.records.empty();
      for (const auto& r : m.records)
        if (!sa.count(r.id)) covers = false;
      if (covers) {
        m.split_assignment = std::move(sa);
        m.seed = j.value("seed", seed);
        return m;
      }
    }
  }
  split(m, seed);
  return m;
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

namespace {

// floor quotas plus largest-remainder distribution of the leftover
std::array<int, 3> largest_remainder(int n, const std::array<double, 3>& props) {
  std::array<int, 3> q;
  std::array<double, 3> frac;
  int used = 0;
  for (int s = 0; s < 3; ++s) {
    double exact = n * props[s];
    q[s] = static_cast<int>(std::floor(exact));
    frac[s] = exact - q[s];
    used += q[s];
  }
  int left = n - used;
  std::array<int, 3> order = {0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (frac[a] != frac[b]) return frac[a] > frac[b];
    return a < b;
  });
  for (int i = 0; i < left; ++i) ++q[order[static_cast<size_t>(i)]];
  return q;
}

}  // namespace

void split(DatasetManifest& manifest, uint64_t seed) {
  const int n = static_cast<int>(manifest.records.size());
  if (n < 5)
    throw std::runtime_error("cannot split " + std::to_string(n) +
                             " samples into three non-empty 60/20/20 splits (need >= 5)");

  const std::array<double, 3> props = {0.6, 0.2, 0.2};
  std::array<int, 3> targets = largest_remainder(n, props);

  // group ids by label, fire first; shuffle each group deterministically
  std::array<std::vector<std::string>, 2> groups;  // [0] fire, [1] non-fire
  for (const auto& r : manifest.records) groups[r.label == 1 ? 0 : 1].push_back(r.id);
  for (int g = 0; g < 2; ++g) {
    std::sort(groups[g].begin(), groups[g].end());
    Rng rng(mix_seed(seed, 0x73706c6974ULL + static_cast<uint64_t>(g)));
    rng.shuffle(groups[g]);
  }

  // per-group floor quotas, then leftovers to the split with the largest
  // fractional need that still has global capacity
  std::array<std::array<int, 3>, 2> quota{};
  std::array<int, 3> cap = targets;
  for (int g = 0; g < 2; ++g) {
    int ng = static_cast<int>(groups[g].size());
    for (int s = 0; s < 3; ++s) {
      quota[g][s] = static_cast<int>(std::floor(ng * props[s]));
      cap[s] -= quota[g][s];
    }
  }
  for (int g = 0; g < 2; ++g) {
    int ng = static_cast<int>(groups[g].size());
    int assigned = quota[g][0] + quota[g][1] + quota[g][2];
    for (int i = assigned; i < ng; ++i) {
      int best = -1;
      double best_need = -1.0;
      for (int s = 0; s < 3; ++s) {
        if (cap[s] <= 0) continue;
        double need = ng * props[s] - quota[g][s];
        if (need > best_need) {
          best_need = need;
          best = s;
        }
      }
      if (best < 0) throw std::logic_error("split quota accounting error");
      ++quota[g][best];
      --cap[best];
    }
  }

  // coverage repair: every group with >= 3 members should reach all splits
  for (int g = 0; g < 2; ++g) {
    if (groups[g].size() < 3) continue;
    int other = 1 - g;
    for (int s = 0; s < 3; ++s) {
      if (quota[g][s] > 0) continue;
      for (int s2 = 0; s2 < 3 && quota[g][s] == 0; ++s2) {
        if (s2 == s || quota[g][s2] < 2 || quota[other][s] < 2) continue;
        --quota[g][s2];
        ++quota[g][s];
        --quota[other][s];
        ++quota[other][s2];
      }
    }
  }

  manifest.split_assignment.clear();
  for (int g = 0; g < 2; ++g) {
    size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      for (int i = 0; i < quota[g][s]; ++i)
        manifest.split_assignment[groups[g][pos++]] = static_cast<Split>(s);
    }
  }
  manifest.seed = seed;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string manifest_to_json(const DatasetManifest& manifest) {
  json j;
  json recs = json::array();
  for (const auto& r : manifest.records) {
    json e;
    e["id"] = r.id;
    e["image"] = "images/" + r.id + ".png";
    e["mask"] = r.label == 1 ? json("masks/" + r.id + ".png") : json(nullptr);
    e["label"] = r.label;
    recs.push_back(e);
  }
  j["records"] = recs;
  json sa = json::object();
  for (const auto& [id, s] : manifest.split_assignment) sa[id] = to_string(s);
  j["split_assignment"] = sa;
  j["seed"] = manifest.seed;
  return j.dump(2);
}

void save_dataset(const DatasetManifest& manifest, const std::string& root) {
  fs::path base(root);
  fs::create_directories(base / "images");
  fs::create_directories(base / "masks");

  std::ofstream csv(base / "labels.csv");
  if (!csv) throw std::runtime_error("cannot write labels.csv under " + root);
  csv << "id,label\n";
  for (const auto& r : manifest.records) {
    save_image_rgb((base / "images" / (r.id + ".png")).string(), r.image);
    if (r.label == 1) save_mask((base / "masks" / (r.id + ".png")).string(), r.mask);
    csv << r.id << "," << r.label << "\n";
  }
  csv.close();

  std::ofstream mj(base / "manifest.json");
  if (!mj) throw std::runtime_error("cannot write manifest.json under " + root);
  mj << manifest_to_json(manifest) << "\n";
}

}  // namespace attnseg
