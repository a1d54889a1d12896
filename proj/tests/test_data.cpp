#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "attnseg/data.hpp"
#include "attnseg/image_io.hpp"
#include "testutil.hpp"

using namespace attnseg;
namespace fs = std::filesystem;

namespace {

SynthConfig tiny_config() {
  SynthConfig c;
  c.n_images = 24;
  c.image_size = 32;
  c.min_blob_area = 12;
  c.max_blob_area = 60;
  c.seed = 9;
  return c;
}

int count_labels(const DatasetManifest& m, int label) {
  int n = 0;
  for (auto& r : m.records) n += (r.label == label);
  return n;
}

}  // namespace

TEST_SUITE("record validation") {
  TEST_CASE("consistent records pass, inconsistent ones name the id") {
    SampleRecord rec;
    rec.id = "r0";
    rec.image = Tensor({4, 4, 3});
    rec.mask = Tensor({4, 4, 1});
    rec.label = 0;
    CHECK_NOTHROW(validate_record(rec));

    rec.label = 1;  // fire label but empty mask
    CHECK_THROWS_WITH_AS(validate_record(rec), doctest::Contains("r0"),
                         std::runtime_error);

    rec.mask.at(1, 1, 0) = 1.0;
    CHECK_NOTHROW(validate_record(rec));

    rec.mask.at(2, 2, 0) = 0.5;  // not binary
    CHECK_THROWS(validate_record(rec));

    rec.mask = Tensor({3, 4, 1});  // shape mismatch
    CHECK_THROWS(validate_record(rec));
  }
}

TEST_SUITE("synthetic rendering") {
  TEST_CASE("records are deterministic in (config, index)") {
    SynthConfig cfg = tiny_config();
    SampleRecord a = render_synth_record(cfg, 3);
    SampleRecord b = render_synth_record(cfg, 3);
    CHECK(a.image.v == b.image.v);
    CHECK(a.mask.v == b.mask.v);
    CHECK(a.label == b.label);

    SampleRecord c = render_synth_record(cfg, 4);
    CHECK(a.image.v != c.image.v);
  }

  TEST_CASE("fire masks are the exact union of blob supports") {
    SynthConfig cfg = tiny_config();
    for (int idx = 0; idx < 6; ++idx) {  // fire indices come first
      std::vector<SynthBlob> blobs;
      SampleRecord rec = render_synth_record(cfg, idx, &blobs);
      REQUIRE(rec.label == 1);
      REQUIRE_FALSE(blobs.empty());
      for (int y = 0; y < cfg.image_size; ++y)
        for (int x = 0; x < cfg.image_size; ++x) {
          bool inside = false;
          for (auto& bl : blobs)
            if (bl.fire && bl.radius2(y, x) <= 1.0) inside = true;
          CHECK(rec.mask.at(y, x, 0) == (inside ? 1.0 : 0.0));
        }
    }
  }

  TEST_CASE("label counts follow fire_fraction and values stay in range") {
    SynthConfig cfg = tiny_config();
    DatasetManifest m = generate_synthetic(cfg);
    REQUIRE(static_cast<int>(m.records.size()) == cfg.n_images);
    CHECK(count_labels(m, 1) == std::llround(cfg.n_images * cfg.fire_fraction));
    for (auto& r : m.records) {
      CHECK_NOTHROW(validate_record(r));
      for (Scalar v : r.image.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }

  TEST_CASE("some non-fire images carry warm distractors") {
    SynthConfig cfg = tiny_config();
    cfg.n_images = 40;
    cfg.distractor_fraction = 1.0;
    DatasetManifest m = generate_synthetic(cfg);
    int warm_nonfire = 0;
    for (auto& r : m.records) {
      if (r.label != 0) continue;
      // warm pixels read red-dominant; the cool gradient background never does
      for (size_t i = 0; i + 2 < r.image.v.size(); i += 3)
        if (r.image.v[i] > 0.5 && r.image.v[i] > r.image.v[i + 2] + 0.2) {
          ++warm_nonfire;
          break;
        }
    }
    CHECK(warm_nonfire == count_labels(m, 0));  // every non-fire image got one
    for (auto& r : m.records)
      if (r.label == 0)
        for (Scalar v : r.mask.v) CHECK(v == 0.0);  // distractors never enter the mask
  }

  TEST_CASE("config validation") {
    SynthConfig c = tiny_config();
    c.n_images = 4;
    CHECK_THROWS(c.validate());
    c = tiny_config();
    c.fire_fraction = 1.5;
    CHECK_THROWS(c.validate());
    c = tiny_config();
    c.max_blob_area = c.image_size * c.image_size;
    CHECK_THROWS(c.validate());
    c = tiny_config();
    c.min_blob_area = c.max_blob_area + 1;
    CHECK_THROWS(c.validate());
    CHECK_NOTHROW(tiny_config().validate());
  }
}

TEST_SUITE("splitting") {
  TEST_CASE("proportions and stratification on a balanced corpus") {
    SynthConfig cfg = tiny_config();
    cfg.n_images = 100;
    DatasetManifest m = generate_synthetic(cfg);
    split(m, 17);

    std::map<Split, int> per_split;
    std::map<Split, int> fire_per_split;
    for (auto& r : m.records) {
      Split s = m.split_assignment.at(r.id);
      per_split[s]++;
      fire_per_split[s] += r.label;
    }
    CHECK(per_split[Split::train] == 60);
    CHECK(per_split[Split::val] == 20);
    CHECK(per_split[Split::test] == 20);
    CHECK(fire_per_split[Split::train] == 30);
    CHECK(fire_per_split[Split::val] == 10);
    CHECK(fire_per_split[Split::test] == 10);
  }

  TEST_CASE("every split sees both classes even when counts are tight") {
    SynthConfig cfg = tiny_config();
    cfg.n_images = 10;
    cfg.fire_fraction = 0.3;  // 3 fire records for 3 splits
    DatasetManifest m = generate_synthetic(cfg);
    split(m, 23);
    std::map<Split, std::set<int>> classes;
    for (auto& r : m.records) classes[m.split_assignment.at(r.id)].insert(r.label);
    for (Split s : {Split::train, Split::val, Split::test}) {
      CHECK(classes[s].count(0) == 1);
      CHECK(classes[s].count(1) == 1);
    }
  }

  TEST_CASE("assignment is deterministic in the seed") {
    SynthConfig cfg = tiny_config();
    DatasetManifest a = generate_synthetic(cfg);
    DatasetManifest b = generate_synthetic(cfg);
    split(a, 31);
    split(b, 31);
    CHECK(a.split_assignment == b.split_assignment);
    split(b, 32);
    CHECK(a.split_assignment != b.split_assignment);
  }

  TEST_CASE("tiny corpora are rejected") {
    SynthConfig cfg = tiny_config();
    DatasetManifest m = generate_synthetic(cfg);
    m.records.resize(4);
    CHECK_THROWS(split(m, 1));
  }

  TEST_CASE("split_records returns pointers into the manifest") {
    DatasetManifest m = generate_synthetic(tiny_config());
    split(m, 37);
    auto train = m.split_records(Split::train);
    size_t total = train.size() + m.split_records(Split::val).size() +
                   m.split_records(Split::test).size();
    CHECK(total == m.records.size());
    for (auto* r : train) CHECK(m.split_assignment.at(r->id) == Split::train);
  }

  TEST_CASE("split names roundtrip") {
    for (Split s : {Split::train, Split::val, Split::test})
      CHECK(split_from_string(to_string(s)) == s);
    CHECK_THROWS(split_from_string("holdout"));
  }
}

TEST_SUITE("dataset directory") {
  TEST_CASE("save then load reproduces records up to 8-bit quantization") {
    testutil::TempDir tmp;
    SynthConfig cfg = tiny_config();
    DatasetManifest m = generate_synthetic(cfg);
    split(m, 41);
    const std::string root = tmp.file("data");
    save_dataset(m, root);

    CHECK(fs::exists(root + "/labels.csv"));
    CHECK(fs::exists(root + "/manifest.json"));
    int mask_files = 0;
    for (auto& e : fs::directory_iterator(root + "/masks")) {
      (void)e;
      ++mask_files;
    }
    CHECK(mask_files == count_labels(m, 1));

    DatasetManifest r = load_corpus(root);
    REQUIRE(r.records.size() == m.records.size());
    for (size_t i = 0; i < m.records.size(); ++i) {
      const auto& orig = m.records[i];
      const auto* back = r.find(orig.id);
      REQUIRE(back != nullptr);
      CHECK(back->label == orig.label);
      CHECK(back->mask.v == orig.mask.v);  // binary masks survive exactly
      REQUIRE(back->image.same_shape(orig.image));
      for (size_t j = 0; j < orig.image.v.size(); ++j)
        CHECK(std::abs(back->image.v[j] - orig.image.v[j]) <= 0.5 / 255.0 + 1e-9);
    }
  }

  TEST_CASE("stored split is adopted when it covers the corpus") {
    testutil::TempDir tmp;
    DatasetManifest m = generate_synthetic(tiny_config());
    split(m, 43);
    const std::string root = tmp.file("data");
    save_dataset(m, root);

    DatasetManifest r = load_corpus_with_split(root, 999);  // seed must not matter
    CHECK(r.split_assignment == m.split_assignment);
  }

  TEST_CASE("without a stored manifest the seed draws the split") {
    testutil::TempDir tmp;
    DatasetManifest m = generate_synthetic(tiny_config());
    split(m, 47);
    const std::string root = tmp.file("data");
    save_dataset(m, root);
    fs::remove(root + "/manifest.json");

    DatasetManifest a = load_corpus_with_split(root, 5);
    DatasetManifest b = load_corpus_with_split(root, 5);
    DatasetManifest c = load_corpus_with_split(root, 6);
    CHECK(a.split_assignment == b.split_assignment);
    CHECK(a.split_assignment != c.split_assignment);
  }

  TEST_CASE("malformed stored manifest is an error, not a fallback") {
    testutil::TempDir tmp;
    DatasetManifest m = generate_synthetic(tiny_config());
    split(m, 53);
    const std::string root = tmp.file("data");
    save_dataset(m, root);
    {
      std::ofstream f(root + "/manifest.json", std::ios::trunc);
      f << "{ definitely not json";
    }
    CHECK_THROWS(load_corpus_with_split(root, 5));
  }

  TEST_CASE("loader errors name the offending record") {
    testutil::TempDir tmp;
    DatasetManifest m = generate_synthetic(tiny_config());
    const std::string root = tmp.file("data");
    save_dataset(m, root);

    SUBCASE("missing label row") {
      std::string csv = testutil::read_file(root + "/labels.csv");
      auto pos = csv.find("\nsynth_000003");
      REQUIRE(pos != std::string::npos);
      auto end = csv.find('\n', pos + 1);
      csv.erase(pos, end - pos);
      std::ofstream(root + "/labels.csv", std::ios::trunc) << csv;
      CHECK_THROWS_WITH_AS(load_corpus(root), doctest::Contains("synth_000003"),
                           std::runtime_error);
    }

    SUBCASE("fire record without a mask file") {
      fs::remove(root + "/masks/synth_000000.png");
      CHECK_THROWS_WITH_AS(load_corpus(root), doctest::Contains("synth_000000"),
                           std::runtime_error);
    }

    SUBCASE("duplicate label row") {
      std::ofstream f(root + "/labels.csv", std::ios::app);
      f << "synth_000001,0\n";
      f.close();
      CHECK_THROWS_WITH_AS(load_corpus(root), doctest::Contains("synth_000001"),
                           std::runtime_error);
    }
  }

  TEST_CASE("manifest json lists records, paths, and the split") {
    DatasetManifest m = generate_synthetic(tiny_config());
    split(m, 59);
    auto j = nlohmann::json::parse(manifest_to_json(m));
    REQUIRE(j.at("records").size() == m.records.size());
    CHECK(j.at("seed").get<uint64_t>() == m.seed);
    int with_mask = 0, without = 0;
    for (auto& e : j.at("records")) {
      CHECK(e.at("image").is_string());
      e.at("mask").is_null() ? ++without : ++with_mask;
    }
    CHECK(with_mask == count_labels(m, 1));
    CHECK(without == count_labels(m, 0));
    CHECK(j.at("split_assignment").size() == m.records.size());
  }
}
