#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <string>

#include "attnseg/loss.hpp"
#include "attnseg/model.hpp"
#include "testutil.hpp"

using namespace attnseg;
using testutil::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.backbone = Backbone::desk_small;
  c.input_size = 16;
  c.encoder_channels = {4, 6, 8, 10};
  c.classifier_hidden = 4;
  return c;
}

bool states_equal(const std::map<std::string, Tensor>& a,
                  const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || !t.same_shape(it->second) || t.v != it->second.v) return false;
  }
  return true;
}

Scalar sample_sd(const Tensor& t) {
  Scalar ss = 0.0;
  for (Scalar x : t.v) ss += x * x;
  return std::sqrt(ss / static_cast<Scalar>(t.v.size()));
}

}  // namespace

TEST_SUITE("model config") {
  TEST_CASE("json roundtrip") {
    ModelConfig c = small_config();
    c.backbone = Backbone::deeplabv3plus;
    c.attention_spatial = false;
    c.selfattn_embed_channels = 2;
    ModelConfig r = ModelConfig::from_json(c.to_json());
    CHECK(r.to_json() == c.to_json());
    CHECK(r.backbone == Backbone::deeplabv3plus);
    CHECK(r.encoder_channels == c.encoder_channels);
  }

  TEST_CASE("validation rejects bad shapes and flag combinations") {
    ModelConfig c = small_config();
    c.input_size = 20;
    CHECK_THROWS(c.validate());

    c = small_config();
    c.encoder_channels = {4, 6, 8};
    CHECK_THROWS(c.validate());

    c = small_config();
    c.with_classifier = false;  // gate left on
    CHECK_THROWS(c.validate());

    c = small_config();
    c.selfattn_embed_channels = c.encoder_channels[0] + 1;
    CHECK_THROWS(c.validate());

    CHECK_NOTHROW(small_config().validate());
  }

  TEST_CASE("backbone name mapping") {
    CHECK(backbone_from_string("desk_small") == Backbone::desk_small);
    CHECK(backbone_from_string("deeplabv3plus") == Backbone::deeplabv3plus);
    CHECK(to_string(Backbone::desk_small) == "desk_small");
    CHECK_THROWS(backbone_from_string("resnet50"));
  }
}

TEST_SUITE("model forward") {
  TEST_CASE("shapes, ranges, and the classification branch") {
    Model m(small_config());
    m.init(7);
    Rng rng(11);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    SegClassOutput out = m.forward(img);

    REQUIRE(out.seg_prob.shape() == std::vector<int>{16, 16, 1});
    REQUIRE(out.seg_logits.shape() == std::vector<int>{16, 16, 1});
    for (Scalar p : out.seg_prob.v) {
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
    REQUIRE(out.class_prob.has_value());
    REQUIRE(out.class_logit.has_value());
    CHECK(*out.class_prob == doctest::Approx(sigmoid(*out.class_logit)));
    CHECK(out.alpha == 0.0);
    CHECK(m.alpha() == 0.0);
  }

  TEST_CASE("segmentation-only model has no classification output") {
    ModelConfig c = small_config();
    c.with_classifier = false;
    c.attention_classgate = false;
    Model m(c);
    m.init(7);
    Rng rng(13);
    SegClassOutput out = m.forward(random_tensor({16, 16, 3}, rng, 0.0, 1.0));
    CHECK_FALSE(out.class_prob.has_value());
    CHECK_FALSE(out.class_logit.has_value());
  }

  TEST_CASE("rejects off-size input") {
    Model m(small_config());
    m.init(7);
    Rng rng(17);
    Tensor wrong = random_tensor({32, 32, 3}, rng);
    CHECK_THROWS(m.forward(wrong));
  }

  TEST_CASE("forward is deterministic and seed-dependent") {
    Rng rng(19);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    Model a(small_config()), b(small_config()), c(small_config());
    a.init(5);
    b.init(5);
    c.init(6);
    CHECK(states_equal(a.state_dict(), b.state_dict()));
    CHECK_FALSE(states_equal(a.state_dict(), c.state_dict()));
    CHECK(a.forward(img).seg_prob.v == b.forward(img).seg_prob.v);
  }
}

TEST_SUITE("model init") {
  TEST_CASE("classifier weights are drawn tight around sd 0.05") {
    ModelConfig c;  // default 64px config: fc1 alone holds 1024 weights
    Model m(c);
    m.init(21);
    auto state = m.state_dict();
    const Tensor& fc1 = state.at("classifier.fc1.W");
    const Tensor& fc2 = state.at("classifier.fc2.W");
    Tensor all({static_cast<int>(fc1.v.size() + fc2.v.size())});
    std::copy(fc1.v.begin(), fc1.v.end(), all.v.begin());
    std::copy(fc2.v.begin(), fc2.v.end(),
              all.v.begin() + static_cast<long>(fc1.v.size()));
    REQUIRE(all.v.size() >= 1000);
    const Scalar sd = sample_sd(all);
    CHECK(sd > 0.04);
    CHECK(sd < 0.06);
    for (Scalar x : state.at("classifier.fc1.b").v) CHECK(x == 0.0);

    // trunk convs use the fan-in rule, clearly wider than the classifier draw
    CHECK(sample_sd(state.at("encoder.conv1.W")) > 0.15);
  }

  TEST_CASE("attention flags leave shared parameters untouched") {
    ModelConfig plain = small_config();
    plain.attention_spatial = false;
    plain.attention_classgate = false;

    ModelConfig full = small_config();
    full.attention_spatial = true;
    full.attention_classgate = true;

    Model mp(plain), mf(full);
    mp.init(33);
    mf.init(33);

    auto sp = mp.state_dict();
    auto sf = mf.state_dict();
    for (auto& [name, t] : sp) {
      REQUIRE(sf.count(name) == 1);
      CHECK(sf.at(name).v == t.v);
    }
    // classification path is identical: it branches off before the attention
    Rng rng(35);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    CHECK(*mp.forward(img).class_prob == *mf.forward(img).class_prob);
  }

  TEST_CASE("gate with zero alpha is invisible in the forward pass") {
    ModelConfig plain = small_config();
    plain.attention_spatial = false;
    plain.attention_classgate = false;

    ModelConfig gate_only = small_config();
    gate_only.attention_spatial = false;
    gate_only.attention_classgate = true;

    Model mp(plain), mg(gate_only);
    mp.init(41);
    mg.init(41);
    Rng rng(43);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    SegClassOutput op = mp.forward(img);
    SegClassOutput og = mg.forward(img);
    CHECK(op.seg_prob.v == og.seg_prob.v);  // bitwise
    CHECK(op.seg_logits.v == og.seg_logits.v);
    CHECK(*op.class_prob == *og.class_prob);
  }

  TEST_CASE("nonzero alpha actually gates") {
    Model m(small_config());
    m.init(47);
    Rng rng(49);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    Tensor before = m.forward(img).seg_logits;
    for (auto& p : m.params())
      if (p.name == "gate.alpha") p.value->v[0] = 0.5;
    CHECK(m.alpha() == 0.5);
    SegClassOutput out = m.forward(img);
    CHECK(out.alpha == 0.5);
    CHECK(out.seg_logits.v != before.v);
  }
}

TEST_SUITE("model gradients") {
  TEST_CASE("joint loss gradients match finite differences end to end") {
    Model m(small_config());
    m.init(53);
    Rng rng(55);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    Tensor mask({16, 16, 1});
    for (auto& v : mask.v) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const Scalar label = 1.0;
    const Scalar lambda = 0.6;

    auto loss = [&] {
      SegClassOutput out = m.forward(img);
      return joint_loss(out.seg_prob, mask, *out.class_prob, label, lambda).total;
    };

    Model::FwdCtx ctx;
    SegClassOutput out = m.forward(img, &ctx);
    Tensor d_seg = bce_grad(out.seg_prob, mask);
    for (auto& v : d_seg.v) v *= lambda;
    Scalar d_cls = (1.0 - lambda) * bce_grad(*out.class_prob, label);
    m.zero_grads();
    m.backward(ctx, d_seg, d_cls);

    std::vector<testutil::FdProbe> probes;
    for (auto& p : m.params()) probes.push_back({p.value, p.grad});
    double worst = testutil::fd_max_rel_error(loss, probes, rng, 3, 1e-5);
    CHECK(worst < 1e-4);
  }

  TEST_CASE("deeplab trunk gradients match finite differences") {
    ModelConfig c = small_config();
    c.backbone = Backbone::deeplabv3plus;
    c.encoder_channels = {4, 6, 8, 8};
    Model m(c);
    m.init(59);
    Rng rng(61);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    Tensor mask({16, 16, 1});
    for (auto& v : mask.v) v = rng.bernoulli(0.5) ? 1.0 : 0.0;

    auto loss = [&] {
      SegClassOutput out = m.forward(img);
      return joint_loss(out.seg_prob, mask, *out.class_prob, 0.0, 0.5).total;
    };

    Model::FwdCtx ctx;
    SegClassOutput out = m.forward(img, &ctx);
    Tensor d_seg = bce_grad(out.seg_prob, mask);
    for (auto& v : d_seg.v) v *= 0.5;
    Scalar d_cls = 0.5 * bce_grad(*out.class_prob, 0.0);
    m.zero_grads();
    m.backward(ctx, d_seg, d_cls);

    std::vector<testutil::FdProbe> probes;
    for (auto& p : m.params()) probes.push_back({p.value, p.grad});
    double worst = testutil::fd_max_rel_error(loss, probes, rng, 2, 1e-5);
    CHECK(worst < 1e-4);
  }
}

TEST_SUITE("checkpoints") {
  TEST_CASE("save and load reproduce the model bit for bit") {
    testutil::TempDir tmp;
    Model m(small_config());
    m.init(67);
    const std::string path = tmp.file("model.ckpt");
    m.save(path);

    const std::string raw = testutil::read_file(path);
    CHECK(raw.rfind("attnseg-v1\n", 0) == 0);

    Model r = Model::load(path);
    CHECK(r.config().to_json() == m.config().to_json());
    CHECK(states_equal(r.state_dict(), m.state_dict()));

    Rng rng(71);
    Tensor img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
    CHECK(m.forward(img).seg_prob.v == r.forward(img).seg_prob.v);
  }

  TEST_CASE("identical saves are byte-identical") {
    testutil::TempDir tmp;
    Model m(small_config());
    m.init(73);
    m.save(tmp.file("a.ckpt"));
    m.save(tmp.file("b.ckpt"));
    CHECK(testutil::files_byte_equal(tmp.file("a.ckpt"), tmp.file("b.ckpt")));
  }

  TEST_CASE("loading rejects missing or malformed files") {
    testutil::TempDir tmp;
    CHECK_THROWS(Model::load(tmp.file("absent.ckpt")));
    {
      std::ofstream f(tmp.file("junk.ckpt"), std::ios::binary);
      f << "not a checkpoint at all";
    }
    CHECK_THROWS_WITH_AS(Model::load(tmp.file("junk.ckpt")),
                         doctest::Contains("attnseg-v1"), std::runtime_error);
  }

  TEST_CASE("state dict loading is strict") {
    Model m(small_config());
    m.init(79);
    auto good = m.state_dict();

    auto missing = good;
    missing.erase("head.proj.W");
    CHECK_THROWS_WITH_AS(m.load_state_dict(missing), doctest::Contains("head.proj.W"),
                         std::runtime_error);

    auto reshaped = good;
    reshaped.at("head.proj.b") = Tensor({3});
    CHECK_THROWS(m.load_state_dict(reshaped));

    CHECK_NOTHROW(m.load_state_dict(good));
  }
}

TEST_SUITE("pretrained encoder") {
  TEST_CASE("encoder tensors come from the weight file, the rest stays fresh") {
    testutil::TempDir tmp;
    Model donor(small_config());
    donor.init(83);
    const std::string path = tmp.file("donor.ckpt");
    donor.save(path);

    Model m = build_model(small_config(), InitKind::pretrained_encoder, 97, path);
    auto ds = donor.state_dict();
    auto ms = m.state_dict();
    for (auto& [name, t] : ds) {
      if (name.rfind("encoder.", 0) == 0)
        CHECK(ms.at(name).v == t.v);
    }
    CHECK(ms.at("head.proj.W").v != ds.at("head.proj.W").v);
  }

  TEST_CASE("shape mismatches are reported, not silently skipped") {
    testutil::TempDir tmp;
    ModelConfig narrow = small_config();
    narrow.encoder_channels = {2, 4, 6, 8};
    Model donor(narrow);
    donor.init(101);
    const std::string path = tmp.file("narrow.ckpt");
    donor.save(path);

    CHECK_THROWS_WITH_AS(build_model(small_config(), InitKind::pretrained_encoder, 5, path),
                         doctest::Contains("incompatible"), std::runtime_error);
  }

  TEST_CASE("pretrained init requires a weight file") {
    CHECK_THROWS(build_model(small_config(), InitKind::pretrained_encoder, 5, ""));
  }
}
