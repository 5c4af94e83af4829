#include <catch2/catch_amalgamated.hpp>

#include "ifss/gradcheck.hpp"
#include "ifss/model.hpp"
#include "loss_builders.hpp"
#include "op_builders.hpp"
#include "oracles.hpp"

using namespace ifss;

namespace {

ParamSet tiny_params(uint64_t seed = 3, int embed = 8) {
  ModelConfig cfg;
  cfg.embed_dim = embed;
  cfg.channels = {4, 6};
  cfg.strides = {2, 2};
  return ParamSet::init(cfg, 3, seed);
}

Tensor<float> rand_image(Rng& rng, int H, int W, int C = 3) {
  Tensor<float> t({H, W, C});
  for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(0, 1));
  return t;
}

PrototypeClassifier random_classifier(Rng& rng, int classes, int d, bool with_anchors) {
  PrototypeClassifier cls;
  for (int c = 0; c <= classes; ++c) {  // includes background 0
    Prototype p;
    p.class_id = c;
    p.session_born = 0;
    p.vector = Tensor<float>({d});
    for (int i = 0; i < d; ++i) p.vector[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-1.5, 1.5));
    if (with_anchors) {
      p.has_anchor = true;
      p.anchor = p.vector;
    }
    cls.prototypes.push_back(std::move(p));
  }
  return cls;
}

}  // namespace

TEST_CASE("extract: zero image and zero params give a zero feature map") {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.channels = {4, 4};
  cfg.strides = {1, 2};
  ParamSet p = ParamSet::init(cfg, 3, 1);
  for (auto& cp : p.extractor) {
    cp.w.fill(0.0f);
    cp.b.fill(0.0f);
  }
  p.head_w.fill(0.0f);
  p.head_b.fill(0.0f);
  auto f = extract(p, Tensor<float>({24, 24, 3}));
  for (size_t i = 0; i < f.size(); ++i) REQUIRE(f[i] == 0.0f);
}

TEST_CASE("extract: 48x48x3 with d=32 yields 12x12x32 and is deterministic") {
  ParamSet p = ParamSet::init(ModelConfig{}, 3, 9);
  Rng rng(4);
  auto img = rand_image(rng, 48, 48);
  auto f1 = extract(p, img);
  REQUIRE(f1.shape() == std::vector<int>({12, 12, 32}));
  auto f2 = extract(p, img);
  REQUIRE(f1.vec() == f2.vec());
}

TEST_CASE("extract flags non-finite activations with the layer index") {
  ParamSet p = tiny_params(2);
  p.extractor[1].w.fill(std::numeric_limits<float>::quiet_NaN());
  Rng rng(4);
  try {
    extract(p, rand_image(rng, 16, 16));
    FAIL("expected numeric-blowup");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Numeric);
    REQUIRE(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("map_prototype: constant features under a full mask give the constant") {
  Tensor<float> f = Tensor<float>::full({4, 4, 3}, 2.5f);
  auto v = map_prototype({f}, {Tensor<float>::full({4, 4}, 1.0f)});
  for (int i = 0; i < 3; ++i) REQUIRE(v[static_cast<size_t>(i)] == Catch::Approx(2.5f));
}

TEST_CASE("map_prototype: disjoint two-shot case matches the pixel-loop oracle") {
  Rng rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Tensor<float>> feats;
    std::vector<Tensor<float>> masks;
    std::vector<Tensor<double>> dfeats, dmasks;
    for (int n = 0; n < 2; ++n) {
      Tensor<float> f({5, 5, 4});
      for (size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(rng.uniform(-1, 1));
      Tensor<float> m({5, 5});
      for (size_t i = 0; i < m.size(); ++i) {
        const bool left = i % 5 < 2;
        m[i] = (n == 0 ? left : !left) && rng.uniform() < 0.7 ? 1.0f : 0.0f;
      }
      if (n == 0) m[0] = 1.0f;
      else m[4] = 1.0f;
      feats.push_back(f);
      masks.push_back(m);
      dfeats.push_back(f.cast<double>());
      dmasks.push_back(m.cast<double>());
    }
    auto v = map_prototype(feats, masks);
    auto ref = oracles::map_prototype_ref(dfeats, dmasks);
    for (int d = 0; d < 4; ++d) {
      REQUIRE(static_cast<double>(v[static_cast<size_t>(d)]) ==
              Catch::Approx(ref[static_cast<size_t>(d)]).margin(1e-6));
    }
  }
}

TEST_CASE("map_prototype: empty shots are dropped, all-empty rejected") {
  Tensor<float> f = Tensor<float>::full({4, 4, 2}, 1.0f);
  Tensor<float> f2 = Tensor<float>::full({4, 4, 2}, 3.0f);
  Tensor<float> empty({4, 4});
  auto v = map_prototype({f, f2}, {empty, Tensor<float>::full({4, 4}, 1.0f)});
  REQUIRE(v[0] == Catch::Approx(3.0f));  // only the second shot counts
  REQUIRE_THROWS_WITH(map_prototype({f}, {empty}),
                      Catch::Matchers::ContainsSubstring("empty-support"));
}

TEST_CASE("project: identity initialization is the identity map") {
  ParamSet p = tiny_params(5);
  Tensor<float> v({8});
  Rng rng(6);
  for (int i = 0; i < 8; ++i) v[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-2, 2));
  auto out = project_vectors(p, v);
  for (int i = 0; i < 8; ++i) REQUIRE(out[static_cast<size_t>(i)] == Catch::Approx(v[static_cast<size_t>(i)]));

  auto zero = project_vectors(p, Tensor<float>({8}));
  for (int i = 0; i < 8; ++i) REQUIRE(zero[static_cast<size_t>(i)] == 0.0f);
}

TEST_CASE("project gradient w.r.t. theta_g passes the finite-difference check") {
  auto builder = [](auto& g, Rng& rng) {
    using T = typename std::decay_t<decltype(g)>::scalar_type;
    GradCheckModel<T> m;
    ParamSet p = tiny_params(rng.next_u64() % 1000, 8);
    auto lv = lift_params(g, p, TrainScope::HeadAndProjector);
    auto vecs = gradcheck::random_tensor<float>(rng, {3, 8}, -1.5, 1.5);
    auto* out = project_forward(g, lv, g.constant(vecs.template cast<T>()));
    m.root = testutil::weighted_sum(g, out, rng);
    m.params = {lv.proj_w, lv.proj_b};
    return m;
  };
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    auto rep = grad_check("project", builder, seed, 1e-4);
    INFO("seed " << seed << " err " << rep.max_rel_error);
    REQUIRE(rep.passed);
  }
}

TEST_CASE("score_pixels: singleton classifier scores 1 everywhere") {
  ParamSet p = tiny_params(7);
  Rng rng(8);
  Tensor<float> feats({3, 3, 8});
  for (size_t i = 0; i < feats.size(); ++i) feats[i] = static_cast<float>(rng.uniform(-1, 1));
  PrototypeClassifier cls;
  Prototype pr;
  pr.class_id = 0;
  pr.vector = Tensor<float>::full({8}, 0.5f);
  cls.prototypes.push_back(pr);
  auto s = score_pixels(p, feats, cls, 0.1);
  for (size_t i = 0; i < s.size(); ++i) REQUIRE(s[i] == Catch::Approx(1.0f));
}

TEST_CASE("score_pixels: aligned vs orthogonal prototype at tau=1 gives ratio e") {
  ParamSet p = tiny_params(7);  // identity projector
  Tensor<float> feats({1, 1, 8});
  feats[0] = 1.0f;  // e_0
  PrototypeClassifier cls;
  Prototype a, b;
  a.class_id = 0;
  a.vector = Tensor<float>({8});
  a.vector[0] = 2.0f;  // aligned with the pixel
  b.class_id = 1;
  b.vector = Tensor<float>({8});
  b.vector[1] = 3.0f;  // orthogonal
  cls.prototypes = {a, b};
  auto s = score_pixels(p, feats, cls, 1.0);
  const double ratio = static_cast<double>(s.at(0, 0, 0)) / static_cast<double>(s.at(0, 0, 1));
  REQUIRE(ratio == Catch::Approx(std::exp(1.0)).epsilon(1e-4));
}

TEST_CASE("score_pixels matches the brute-force oracle") {
  Rng rng(23);
  ParamSet p = tiny_params(11);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor<float> feats({8, 8, 8});
    for (size_t i = 0; i < feats.size(); ++i) feats[i] = static_cast<float>(rng.uniform(-1, 1));
    auto cls = random_classifier(rng, 3, 8, false);
    auto s = score_pixels(p, feats, cls, 0.1);

    std::vector<std::vector<double>> protos;
    for (const auto& pr : cls.prototypes) {
      auto proj = project_vectors(p, pr.vector);  // identity here
      std::vector<double> row;
      for (size_t i = 0; i < proj.size(); ++i) row.push_back(proj[i]);
      protos.push_back(row);
    }
    auto ref = oracles::score_pixels_ref(feats.cast<double>(), protos, 0.1);
    for (size_t i = 0; i < ref.size(); ++i) {
      REQUIRE(static_cast<double>(s[i]) == Catch::Approx(ref[i]).margin(1e-6));
    }
    // rows sum to one
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        double acc = 0;
        for (int c = 0; c < cls.size(); ++c) acc += s.at(y, x, c);
        REQUIRE(acc == Catch::Approx(1.0).margin(1e-6));
      }
  }
}

TEST_CASE("ce loss: one-hot scores give zero, uniform gives ln N") {
  Graph<float> g;
  // two pixels, 3 classes, true class 1 with probability ~1
  Tensor<float> sc({1, 2, 3});
  sc.at(0, 0, 1) = 1.0f;
  sc.at(0, 1, 2) = 1.0f;
  Tensor<int> idx({1, 2});
  idx.at(0, 0) = 1;
  idx.at(0, 1) = 2;
  auto* loss = ce_from_scores(g, g.constant(sc), idx);
  REQUIRE(loss->value[0] == Catch::Approx(0.0f).margin(1e-6));

  Graph<float> g2;
  Tensor<float> uni = Tensor<float>::full({2, 2, 5}, 0.2f);
  Tensor<int> idx2 = Tensor<int>::full({2, 2}, 3);
  auto* loss2 = ce_from_scores(g2, g2.constant(uni), idx2);
  REQUIRE(loss2->value[0] == Catch::Approx(std::log(5.0)).margin(1e-6));
}

TEST_CASE("ce loss matches the per-pixel oracle on random cases") {
  Rng rng(29);
  for (int rep = 0; rep < 20; ++rep) {
    Graph<float> g;
    Tensor<float> logits({4, 4, 5});
    for (size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<float>(rng.uniform(-2, 2));
    auto* sc = ops::softmax(g, g.constant(logits), 2);
    Tensor<int> idx({4, 4});
    for (size_t i = 0; i < idx.size(); ++i) {
      idx[i] = rng.uniform() < 0.15 ? -1 : rng.uniform_int(0, 4);
    }
    idx[0] = 1;
    auto* loss = ce_from_scores(g, sc, idx);
    const double ref = oracles::ce_ref(sc->value.cast<double>(), idx);
    REQUIRE(static_cast<double>(loss->value[0]) == Catch::Approx(ref).margin(1e-6));
  }
}

TEST_CASE("label_index_map validates labels and honors restriction") {
  PrototypeClassifier cls;
  for (int c : {0, 3, 7}) {
    Prototype p;
    p.class_id = c;
    p.vector = Tensor<float>({4});
    cls.prototypes.push_back(p);
  }
  Tensor<uint8_t> mask({2, 2});
  mask.at(0, 0) = 0;
  mask.at(0, 1) = 3;
  mask.at(1, 0) = 7;
  mask.at(1, 1) = 255;
  auto idx = label_index_map(mask, cls);
  REQUIRE(idx.at(0, 0) == 0);
  REQUIRE(idx.at(0, 1) == 1);
  REQUIRE(idx.at(1, 0) == 2);
  REQUIRE(idx.at(1, 1) == -1);

  std::set<int> only7 = {7};
  auto idx2 = label_index_map(mask, cls, &only7);
  REQUIRE(idx2.at(0, 0) == -1);
  REQUIRE(idx2.at(0, 1) == -1);
  REQUIRE(idx2.at(1, 0) == 2);

  mask.at(0, 0) = 9;
  REQUIRE_THROWS_WITH(label_index_map(mask, cls),
                      Catch::Matchers::ContainsSubstring("unknown-label"));
}

TEST_CASE("redistribution loss: forced value for orthogonal new prototypes") {
  // identity projector, anchors equal to old vectors -> denominator terms = 1;
  // new prototypes orthogonal to all anchors -> numerator terms = 0.5
  ParamSet p = tiny_params(13);
  PrototypeClassifier cls;
  const int d = 8;
  for (int i = 0; i < 3; ++i) {  // old, born session 0 (ids 1..3)
    Prototype pr;
    pr.class_id = i + 1;
    pr.session_born = 0;
    pr.vector = Tensor<float>({d});
    pr.vector[static_cast<size_t>(i)] = 1.0f;
    pr.has_anchor = true;
    pr.anchor = pr.vector;
    cls.prototypes.push_back(pr);
  }
  for (int j = 0; j < 2; ++j) {  // new, born session 1, orthogonal axes
    Prototype pr;
    pr.class_id = 10 + j;
    pr.session_born = 1;
    pr.vector = Tensor<float>({d});
    pr.vector[static_cast<size_t>(4 + j)] = 1.0f;
    cls.prototypes.push_back(pr);
  }
  Graph<float> g;
  auto lv = lift_params(g, p, TrainScope::HeadAndProjector);
  auto* loss = redistribution_loss_forward(g, lv, cls, 1, RedistributionKind::Ratio);
  const double expected = (3.0 * 2.0 * 0.5) / (3.0 * 1.0 + 1e-6);
  REQUIRE(static_cast<double>(loss->value[0]) == Catch::Approx(expected).margin(1e-5));
}

TEST_CASE("redistribution loss matches the direct formula oracle") {
  Rng rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    const int d = 6;
    Graph<float> g;
    auto anchors_t = gradcheck::random_tensor_away_from_zero<float>(rng, {2, d}, 0.3, 1.5);
    auto proj_old_t = gradcheck::random_tensor_away_from_zero<float>(rng, {2, d}, 0.3, 1.5);
    auto proj_new_t = gradcheck::random_tensor_away_from_zero<float>(rng, {1, d}, 0.3, 1.5);
    auto* anchors = g.constant(anchors_t);
    auto* loss = redistribution_loss_builder(g, anchors, g.constant(proj_old_t), anchors,
                                             g.constant(proj_new_t));
    auto rows = [](const Tensor<float>& t) {
      std::vector<std::vector<double>> out;
      for (int i = 0; i < t.extent(0); ++i) {
        std::vector<double> r;
        for (int j = 0; j < t.extent(1); ++j) r.push_back(t.at(i, j));
        out.push_back(r);
      }
      return out;
    };
    const double ref =
        oracles::redistribution_ref(rows(anchors_t), rows(proj_old_t), rows(proj_new_t));
    REQUIRE(static_cast<double>(loss->value[0]) == Catch::Approx(ref).margin(1e-6));
  }
}

TEST_CASE("inter loss: identical and orthogonal extremes plus oracle") {
  const int d = 5;
  Graph<float> g;
  Tensor<float> e0({2, d});
  e0.at(0, 0) = 1.0f;
  e0.at(1, 0) = 1.0f;
  auto* same = inter_loss_builder(g, g.constant(e0), g.constant(e0));
  REQUIRE(static_cast<double>(same->value[0]) == Catch::Approx(2.0 * 2.0 * 1.0).margin(1e-5));

  Tensor<float> e1({1, d});
  e1.at(0, 1) = 1.0f;
  auto* orth = inter_loss_builder(g, g.constant(e0), g.constant(e1));
  REQUIRE(static_cast<double>(orth->value[0]) == Catch::Approx(2.0 * 1.0 * 0.5).margin(1e-5));

  Rng rng(37);
  auto a = gradcheck::random_tensor_away_from_zero<float>(rng, {3, d}, 0.3, 1.5);
  auto b = gradcheck::random_tensor_away_from_zero<float>(rng, {2, d}, 0.3, 1.5);
  Graph<float> g2;
  auto* li = inter_loss_builder(g2, g2.constant(a), g2.constant(b));
  std::vector<std::vector<double>> ar, br;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> r;
    for (int j = 0; j < d; ++j) r.push_back(a.at(i, j));
    ar.push_back(r);
  }
  for (int i = 0; i < 2; ++i) {
    std::vector<double> r;
    for (int j = 0; j < d; ++j) r.push_back(b.at(i, j));
    br.push_back(r);
  }
  REQUIRE(static_cast<double>(li->value[0]) ==
          Catch::Approx(oracles::inter_ref(ar, br)).margin(1e-6));
}

TEST_CASE("redistribution loss gradients pass the finite-difference check") {
  // w.r.t. the projected prototypes directly
  auto builder = [](auto& g, Rng& rng) {
    using T = typename std::decay_t<decltype(g)>::scalar_type;
    GradCheckModel<T> m;
    auto anchors = gradcheck::random_tensor_away_from_zero<T>(rng, {3, 8}, 0.5, 1.5);
    auto* po = g.param(gradcheck::random_tensor_away_from_zero<T>(rng, {3, 8}, 0.5, 1.5));
    auto* pn = g.param(gradcheck::random_tensor_away_from_zero<T>(rng, {2, 8}, 0.5, 1.5));
    auto* a = g.constant(std::move(anchors));
    m.root = redistribution_loss_builder(g, a, po, a, pn);
    m.params = {po, pn};
    return m;
  };
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    auto rep = grad_check("redistribution", builder, seed, 1e-4);
    INFO("seed " << seed << " err " << rep.max_rel_error);
    REQUIRE(rep.passed);
  }

  // Eq. 3 on 3 old + 2 new through theta_g
  auto through_proj = [](auto& g, Rng& rng) {
    using T = typename std::decay_t<decltype(g)>::scalar_type;
    GradCheckModel<T> m;
    ParamSet p = tiny_params(17, 8);
    PrototypeClassifier cls;
    for (int i = 0; i < 5; ++i) {
      Prototype pr;
      pr.class_id = i + 1;
      pr.session_born = i < 3 ? 0 : 1;
      pr.vector = gradcheck::random_tensor_away_from_zero<float>(rng, {8}, 0.5, 1.5);
      if (i < 3) {
        pr.has_anchor = true;
        pr.anchor = gradcheck::random_tensor_away_from_zero<float>(rng, {8}, 0.5, 1.5);
      }
      cls.prototypes.push_back(pr);
    }
    auto lv = lift_params(g, p, TrainScope::HeadAndProjector);
    m.root = redistribution_loss_forward(g, lv, cls, 1, RedistributionKind::Ratio);
    m.params = {lv.proj_w, lv.proj_b};
    return m;
  };
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    auto rep = grad_check("redistribution-through-projector", through_proj, seed, 1e-4);
    INFO("seed " << seed << " err " << rep.max_rel_error);
    REQUIRE(rep.passed);
  }
}

TEST_CASE("redistribution loss decreases as a new prototype rotates away") {
  // anchors clustered near +x; rotate the new prototype from +x toward -x
  ParamSet p = tiny_params(19, 8);
  PrototypeClassifier base_cls;
  Rng rng(41);
  for (int i = 0; i < 3; ++i) {
    Prototype pr;
    pr.class_id = i + 1;
    pr.session_born = 0;
    pr.vector = Tensor<float>({8});
    pr.vector[0] = 1.0f;
    pr.vector[1] = static_cast<float>(0.1 * rng.uniform(-1, 1));
    pr.has_anchor = true;
    pr.anchor = pr.vector;
    base_cls.prototypes.push_back(pr);
  }
  double prev = 1e300;
  for (int step = 0; step <= 10; ++step) {
    const double angle = 3.14159265358979 * step / 10.0;
    PrototypeClassifier cls = base_cls;
    Prototype np;
    np.class_id = 99;
    np.session_born = 1;
    np.vector = Tensor<float>({8});
    np.vector[0] = static_cast<float>(std::cos(angle));
    np.vector[2] = static_cast<float>(std::sin(angle));
    cls.prototypes.push_back(np);
    Graph<float> g;
    auto lv = lift_params(g, p, TrainScope::None);
    auto* loss = redistribution_loss_forward(g, lv, cls, 1, RedistributionKind::Ratio);
    const double v = loss->value[0];
    REQUIRE(v < prev);
    prev = v;
  }
}

TEST_CASE("redistribution loss error paths") {
  ParamSet p = tiny_params(23, 8);
  Graph<float> g;
  auto lv = lift_params(g, p, TrainScope::None);
  Rng rng(43);
  // missing anchors
  PrototypeClassifier cls;
  for (int i = 0; i < 2; ++i) {
    Prototype pr;
    pr.class_id = i + 1;
    pr.session_born = i;  // class 1 old, class 2 new at session 1
    pr.vector = gradcheck::random_tensor<float>(rng, {8});
    cls.prototypes.push_back(pr);
  }
  REQUIRE_THROWS_WITH(redistribution_loss_forward(g, lv, cls, 1, RedistributionKind::Ratio),
                      Catch::Matchers::ContainsSubstring("anchor-missing"));
  // empty old set (only background is old)
  PrototypeClassifier cls2;
  Prototype bg;
  bg.class_id = 0;
  bg.session_born = 0;
  bg.vector = gradcheck::random_tensor<float>(rng, {8});
  bg.has_anchor = true;
  bg.anchor = bg.vector;
  cls2.prototypes.push_back(bg);
  Prototype nv;
  nv.class_id = 5;
  nv.session_born = 1;
  nv.vector = gradcheck::random_tensor<float>(rng, {8});
  cls2.prototypes.push_back(nv);
  REQUIRE_THROWS_AS(redistribution_loss_forward(g, lv, cls2, 1, RedistributionKind::Ratio),
                    Error);
}

TEST_CASE("expand_classifier keeps old entries and refreshes anchors") {
  ParamSet p = tiny_params(29, 8);
  Rng rng(47);
  auto cls = random_classifier(rng, 8, 8, false);  // 9 entries: bg + 8
  REQUIRE(cls.size() == 9);

  // zero expansion: unchanged
  auto same = expand_classifier(cls, {}, p);
  REQUIRE(classifier_hash(same) == classifier_hash(cls));

  Prototype np;
  np.class_id = 42;
  np.session_born = 1;
  np.vector = gradcheck::random_tensor<float>(rng, {8});
  auto grown = expand_classifier(cls, {np}, p);
  REQUIRE(grown.size() == 10);
  for (int i = 0; i < 9; ++i) {
    REQUIRE(grown.prototypes[static_cast<size_t>(i)].class_id ==
            cls.prototypes[static_cast<size_t>(i)].class_id);
    REQUIRE(grown.prototypes[static_cast<size_t>(i)].vector.vec() ==
            cls.prototypes[static_cast<size_t>(i)].vector.vec());
    REQUIRE(grown.prototypes[static_cast<size_t>(i)].has_anchor);
    // identity projector: anchor equals vector
    REQUIRE(grown.prototypes[static_cast<size_t>(i)].anchor.vec() ==
            cls.prototypes[static_cast<size_t>(i)].vector.vec());
  }
  REQUIRE(grown.prototypes[9].class_id == 42);
  REQUIRE(!grown.prototypes[9].has_anchor);

  REQUIRE_THROWS_WITH(expand_classifier(grown, {np}, p),
                      Catch::Matchers::ContainsSubstring("duplicate class id"));
}

TEST_CASE("expansion preserves the old-class argmax at every pixel") {
  ParamSet p = tiny_params(31, 8);
  Rng rng(49);
  auto cls = random_classifier(rng, 4, 8, false);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor<float> feats({6, 6, 8});
    for (size_t i = 0; i < feats.size(); ++i) feats[i] = static_cast<float>(rng.uniform(-1, 1));
    auto before = score_pixels(p, feats, cls, 0.1);

    Prototype np;
    np.class_id = 100 + rep;
    np.session_born = 1;
    np.vector = gradcheck::random_tensor<float>(rng, {8});
    auto grown = expand_classifier(cls, {np}, p);
    auto after = score_pixels(p, feats, grown, 0.1);

    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        int best_before = 0, best_after = 0;
        for (int c = 1; c < cls.size(); ++c) {
          if (before.at(y, x, c) > before.at(y, x, best_before)) best_before = c;
          if (after.at(y, x, c) > after.at(y, x, best_after)) best_after = c;
        }
        REQUIRE(best_before == best_after);
      }
    cls = grown;
  }
}

TEST_CASE("full loss through the extractor passes grad check at 1e-3") {
  // CE + lambda * L_r through extract on a 2-class toy task
  for (const auto& c : testutil::loss_gradient_battery()) {
    if (c.name != "loss-meta-extractor" && c.name != "loss-ce-extractor") continue;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      auto rep = c.run(c.seed_base + seed);
      INFO(c.name << " seed " << rep.seed << " err " << rep.max_rel_error);
      REQUIRE(rep.passed);
    }
  }
}

TEST_CASE("frozen backbone output is bit-identical when head and projector change") {
  ParamSet p = tiny_params(37, 8);
  Rng rng(53);
  auto img = rand_image(rng, 16, 16);
  auto before = backbone_features(p, img);
  // mutate theta_seg and theta_g the way incremental sessions do
  for (size_t i = 0; i < p.head_w.size(); ++i) p.head_w[i] += 0.37f;
  for (size_t i = 0; i < p.proj_w.size(); ++i) p.proj_w[i] -= 0.21f;
  auto after = backbone_features(p, img);
  REQUIRE(before.vec() == after.vec());
  REQUIRE(p.extractor_hash() == ParamSet(p).extractor_hash());
}
