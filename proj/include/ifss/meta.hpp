#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ifss/error.hpp"
#include "ifss/metrics.hpp"
#include "ifss/model.hpp"
#include "ifss/rng.hpp"
#include "ifss/synth.hpp"

// Meta-training over pseudo-incremental sequences: supervised base
// initialization, inner-loop fast adaptation on each pseudo task, and the
// first-order meta update evaluated on the accumulated meta-test set.

namespace ifss {

// ----- optimizer ----------------------------------------------------------------

struct SgdState {
  std::map<std::string, Tensor<float>> velocity;

  void apply(ParamSet& params, const std::vector<std::pair<std::string, Tensor<float>>>& grads,
             double lr, double momentum) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, g] : grads) by_name[name] = &g;
    params.for_each_array([&](const std::string& name, Tensor<float>& w) {
      auto it = by_name.find(name);
      if (it == by_name.end()) return;
      const Tensor<float>& g = *it->second;
      if (momentum > 0.0) {
        auto [vit, inserted] = velocity.try_emplace(name, Tensor<float>(w.shape()));
        Tensor<float>& v = vit->second;
        (void)inserted;
        for (size_t i = 0; i < w.size(); ++i) {
          v[i] = static_cast<float>(momentum * v[i] + g[i]);
          w[i] -= static_cast<float>(lr * v[i]);
        }
      } else {
        for (size_t i = 0; i < w.size(); ++i) {
          w[i] -= static_cast<float>(lr * g[i]);
        }
      }
    });
  }
};

// ----- shared loss builders -------------------------------------------------------

template <typename T>
Node<T>* classifier_protos_node(Graph<T>& g, const ParamLeaves<T>& lv,
                                const PrototypeClassifier& cls) {
  std::vector<const Tensor<float>*> rows;
  for (const auto& p : cls.prototypes) rows.push_back(&p.vector);
  return project_forward(g, lv, g.constant(stack_vectors(rows).template cast<T>()));
}

template <typename T>
Node<T>* scene_ce_node(Graph<T>& g, const ParamLeaves<T>& lv, Node<T>* projected_protos,
                       const PrototypeClassifier& cls, const Scene& scene,
                       const std::set<int>* restrict_to = nullptr,
                       Tensor<float>* scores_out = nullptr) {
  auto* feats = features_forward(g, lv, g.constant(scene.image.template cast<T>()));
  auto* scores = scores_forward(g, feats, projected_protos, lv.tau);
  const auto ds = downsample_mask_nearest(scene.mask, feats->value.extent(0),
                                          feats->value.extent(1));
  const auto idx = label_index_map(ds, cls, restrict_to);
  if (scores_out) *scores_out = scores->value.template cast<float>();
  return ce_from_scores(g, scores, idx);
}

template <typename T>
Node<T>* mean_of(Graph<T>& g, const std::vector<Node<T>*>& terms) {
  Node<T>* acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = ops::add(g, acc, terms[i]);
  return terms.size() == 1 ? acc : ops::scale(g, acc, 1.0 / static_cast<double>(terms.size()));
}

// ----- adaptation ------------------------------------------------------------------

struct AdaptOptions {
  double lr = 0.05;
  int steps = 1;
  RedistributionKind kind = RedistributionKind::None;
  double lambda = 0.0;
  int session = 0;                            // session index for the loss's old/new split
  const std::set<int>* restrict_labels = nullptr;
  bool train_backbone = false;
  bool reprojected_numerator = false;
  std::vector<double>* loss_trace = nullptr;  // per-step loss values, when wanted
};

// Plain gradient steps on theta_{g,seg} (optionally theta_f too); the input
// parameters are untouched, the adapted clone is returned.
inline ParamSet adapt_params(const ParamSet& params, const PrototypeClassifier& cls,
                             const std::vector<const Scene*>& train, const AdaptOptions& opt) {
  if (train.empty()) throw Error::data("adaptation needs a non-empty task");
  ParamSet adapted = params;
  SgdState sgd;  // plain steps: no momentum across tasks
  for (int step = 0; step < opt.steps; ++step) {
    Graph<float> g;
    auto lv = lift_params(g, adapted,
                          opt.train_backbone ? TrainScope::All : TrainScope::HeadAndProjector);
    auto* protos = classifier_protos_node(g, lv, cls);
    std::vector<Node<float>*> terms;
    for (const Scene* s : train) {
      terms.push_back(scene_ce_node(g, lv, protos, cls, *s, opt.restrict_labels));
    }
    Node<float>* loss = mean_of(g, terms);
    if (opt.kind != RedistributionKind::None && opt.lambda > 0.0) {
      auto* lr_node = redistribution_loss_forward(g, lv, cls, opt.session, opt.kind,
                                                  opt.reprojected_numerator);
      loss = ops::add(g, loss, ops::scale(g, lr_node, opt.lambda));
    }
    if (!std::isfinite(static_cast<double>(loss->value[0]))) {
      throw Error::numeric("diverged: non-finite adaptation loss at step " +
                           std::to_string(step));
    }
    if (opt.loss_trace) opt.loss_trace->push_back(loss->value[0]);
    g.backward(loss);
    sgd.apply(adapted, leaf_grads(lv), opt.lr, 0.0);
  }
  return adapted;
}

// Eq.-4 fast adaptation: L plain CE gradient steps on a cloned theta_{g,seg}.
inline ParamSet inner_adapt(const ParamSet& params, const PrototypeClassifier& cls,
                            const std::vector<const Scene*>& task, double alpha, int steps,
                            std::vector<double>* loss_trace = nullptr) {
  AdaptOptions opt;
  opt.lr = alpha;
  opt.steps = steps;
  opt.loss_trace = loss_trace;
  return adapt_params(params, cls, task, opt);
}

// ----- meta update -----------------------------------------------------------------

struct MetaStepInfo {
  double meta_loss = 0;
  double meta_ce = 0;
  double redistribution_share = 0;  // lambda * L_r summed over the meta set
};

// First-order meta update: the meta loss is evaluated at the adapted
// parameters and summed over the accumulated meta-test set; its gradient is
// applied to the persistent parameters.
inline MetaStepInfo meta_step(ParamSet& params, const ParamSet& adapted,
                              const PrototypeClassifier& cls,
                              const std::vector<const Scene*>& meta_set, double beta,
                              double lambda, RedistributionKind kind, int session,
                              SgdState& outer_state, double outer_momentum,
                              bool reprojected_numerator = false,
                              ConfusionAccumulator* confusion = nullptr) {
  if (meta_set.empty()) throw Error::data("meta step needs a non-empty meta-test set");
  Graph<float> g;
  auto lv = lift_params(g, adapted, TrainScope::HeadAndProjector);
  auto* protos = classifier_protos_node(g, lv, cls);
  std::vector<Node<float>*> terms;
  for (const Scene* s : meta_set) {
    Tensor<float> scores;
    terms.push_back(scene_ce_node(g, lv, protos, cls, *s, nullptr,
                                  confusion ? &scores : nullptr));
    if (confusion) {
      const auto pred = upsample_nearest(predict_labels(scores, cls), s->mask.extent(0),
                                         s->mask.extent(1));
      confusion->add(pred, s->mask);
    }
  }
  Node<float>* ce_sum = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) ce_sum = ops::add(g, ce_sum, terms[i]);

  MetaStepInfo info;
  info.meta_ce = ce_sum->value[0];
  Node<float>* loss = ce_sum;
  if (kind != RedistributionKind::None && lambda > 0.0) {
    auto* lr_node = redistribution_loss_forward(g, lv, cls, session, kind,
                                                reprojected_numerator);
    // per-sample meta loss carries lambda * L_r for every meta-test scene
    auto* share = ops::scale(g, lr_node, lambda * static_cast<double>(meta_set.size()));
    info.redistribution_share = share->value[0];
    loss = ops::add(g, loss, share);
  }
  info.meta_loss = loss->value[0];
  if (!std::isfinite(info.meta_loss)) {
    throw Error::numeric("diverged: non-finite meta loss");
  }
  if (beta != 0.0) {
    g.backward(loss);
    outer_state.apply(params, leaf_grads(lv), beta, outer_momentum);
  }
  return info;
}

// ----- base initialization ----------------------------------------------------------

struct BaseInitConfig {
  int epochs = 10;
  double lr = 0.1;
  double momentum = 0.9;
  int batch_size = 8;
  int prototype_scenes_per_class = 10;
  uint64_t seed = 0;
};

namespace detail {

inline std::vector<int> sorted_class_ids(const std::vector<const Scene*>& scenes) {
  std::set<int> ids;
  for (const Scene* s : scenes) ids.insert(s->primary_class);
  return {ids.begin(), ids.end()};
}

}  // namespace detail

// Supervised base training with batch-episodic prototypes: every batch builds
// in-graph MAP prototypes (plus background) from its own scenes and trains CE
// through them, so gradients flow through Eq. 1 itself. Returns the final MAP
// classifier over the base split. theta_f is trained here and frozen by every
// later stage.
inline PrototypeClassifier base_init(ParamSet& params, const std::vector<const Scene*>& base_train,
                                     const BaseInitConfig& cfg,
                                     std::vector<double>* epoch_losses = nullptr) {
  if (base_train.empty()) throw Error::data("base initialization needs training scenes");
  SgdState sgd;
  std::vector<size_t> order(base_train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, "base-epoch", static_cast<uint64_t>(epoch)));
    erng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<const Scene*> batch;
      for (size_t i = start; i < end; ++i) batch.push_back(base_train[order[i]]);

      Graph<float> g;
      auto lv = lift_params(g, params, TrainScope::All);
      // per-scene features, shared by prototype construction and scoring
      std::vector<Node<float>*> feats;
      std::vector<Tensor<uint8_t>> ds_masks;
      for (const Scene* s : batch) {
        auto* f = features_forward(g, lv, g.constant(s->image));
        feats.push_back(f);
        ds_masks.push_back(
            downsample_mask_nearest(s->mask, f->value.extent(0), f->value.extent(1)));
      }
      // batch prototypes: background first, then each class present
      const auto class_ids = detail::sorted_class_ids(batch);
      PrototypeClassifier batch_cls;
      std::vector<Node<float>*> proto_nodes;
      {
        std::vector<Node<float>*> bg_feats;
        std::vector<Tensor<float>> bg_masks;
        for (size_t i = 0; i < batch.size(); ++i) {
          auto m = class_mask<float>(ds_masks[i], 0);
          bool nonempty = false;
          for (size_t k = 0; k < m.size(); ++k) nonempty |= m[k] != 0.0f;
          if (!nonempty) continue;
          bg_feats.push_back(feats[i]);
          bg_masks.push_back(std::move(m));
        }
        if (bg_feats.empty()) continue;  // degenerate batch, skip
        proto_nodes.push_back(map_prototype_forward(g, bg_feats, bg_masks));
        Prototype bg;
        bg.class_id = 0;
        batch_cls.prototypes.push_back(bg);
      }
      for (int c : class_ids) {
        std::vector<Node<float>*> cf;
        std::vector<Tensor<float>> cm;
        for (size_t i = 0; i < batch.size(); ++i) {
          if (batch[i]->primary_class != c) continue;
          auto m = class_mask<float>(ds_masks[i], c);
          bool nonempty = false;
          for (size_t k = 0; k < m.size(); ++k) nonempty |= m[k] != 0.0f;
          if (!nonempty) continue;
          cf.push_back(feats[i]);
          cm.push_back(std::move(m));
        }
        if (cf.empty()) continue;
        proto_nodes.push_back(map_prototype_forward(g, cf, cm));
        Prototype p;
        p.class_id = c;
        batch_cls.prototypes.push_back(p);
      }
      auto* protos = project_forward(g, lv, ops::concat_rows(g, proto_nodes));

      std::vector<Node<float>*> terms;
      for (size_t i = 0; i < batch.size(); ++i) {
        auto* scores = scores_forward(g, feats[i], protos, lv.tau);
        const auto idx = label_index_map(ds_masks[i], batch_cls);
        terms.push_back(ce_from_scores(g, scores, idx));
      }
      Node<float>* loss = mean_of(g, terms);
      const double lv_loss = loss->value[0];
      if (!std::isfinite(lv_loss)) {
        throw Error::numeric("diverged: non-finite base loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += lv_loss;
      ++batches;
      g.backward(loss);
      sgd.apply(params, leaf_grads(lv), cfg.lr, cfg.momentum);
    }
    if (epoch_losses) epoch_losses->push_back(batches ? epoch_loss / batches : 0.0);
  }

  return PrototypeClassifier{build_prototypes(params, base_train,
                                              detail::sorted_class_ids(base_train), 0,
                                              cfg.prototype_scenes_per_class, true)};
}

// ----- the meta-training loop --------------------------------------------------------

struct MetaConfig {
  double alpha = 0.05;   // inner learning rate
  double beta = 0.01;    // outer learning rate
  int inner_steps = 3;   // L
  double lambda = 0.3;
  int tasks = 3;         // T pseudo sessions per sequence
  int shots = 1;         // K
  int epochs = 30;
  uint64_t seed = 0;
  double outer_momentum = 0.0;
  RedistributionKind kind = RedistributionKind::Ratio;
  bool reprojected_numerator = false;
  PseudoOptions pseudo;
  int prototype_scenes_per_class = 10;

  void validate() const {
    if (alpha <= 0 || beta <= 0) throw Error::usage("meta learning rates must be positive");
    if (inner_steps < 1) throw Error::usage("inner step count must be >= 1");
    if (lambda < 0) throw Error::usage("lambda must be nonnegative");
    if (tasks < 1) throw Error::usage("pseudo session count must be >= 1");
    if (shots < 1) throw Error::usage("shots must be >= 1");
  }
};

struct MetaLogRecord {
  int epoch = 0;
  int task = 0;
  std::vector<double> inner_losses;
  double meta_loss = 0;
  double meta_ce = 0;
  double redistribution_share = 0;
  int meta_set_size = 0;
  int classifier_size = 0;
  double pseudo_miou_base = 0;  // over the accumulated meta set, fraction scale
  double pseudo_miou_novel = 0;
  double pseudo_hm = 0;
};

struct MetaTrainResult {
  PrototypeClassifier classifier;  // base classifier rebuilt with final params
  std::vector<MetaLogRecord> log;
  uint64_t guard_violations = 0;
};

// One epoch = one pseudo-incremental sequence: rebuild the classifier on the
// pseudo base split, then expand -> inner-adapt -> accumulate meta-test ->
// meta-update for each pseudo task. theta_f stays frozen throughout.
inline MetaTrainResult run_meta_training(
    const Corpus& corpus, const std::map<int, std::vector<int>>& base_pools, ParamSet& params,
    const MetaConfig& cfg, int start_epoch = 0, SgdState* outer_state_io = nullptr,
    const std::function<void(int, const ParamSet&, const SgdState&,
                             const std::vector<MetaLogRecord>&)>& on_epoch = {}) {
  cfg.validate();
  if (static_cast<int>(base_pools.size()) <= cfg.tasks) {
    throw Error::data("insufficient-data: meta training needs more base classes than pseudo "
                      "sessions");
  }
  const uint64_t theta_f_before = params.extractor_hash();
  MetaTrainResult result;
  SgdState local_state;
  SgdState& outer_state = outer_state_io ? *outer_state_io : local_state;

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const uint64_t seq_seed = derive_seed(cfg.seed, "sequence", static_cast<uint64_t>(epoch));
    const auto stream =
        sample_pseudo_sequence(base_pools, cfg.tasks, cfg.shots, seq_seed, cfg.pseudo);
    AccessGuard guard;

    // classifier re-initialized on the fresh pseudo base split
    const auto pseudo_base = guarded_fetch(guard, stream, corpus, 0, Split::Train);
    PrototypeClassifier cls{build_prototypes(params, pseudo_base,
                                             stream.sessions[0].class_ids, 0,
                                             cfg.pseudo.pseudo_base_scenes, true)};

    std::vector<const Scene*> meta_set;
    for (int task = 1; task <= cfg.tasks; ++task) {
      guard.current_session = task;
      const auto train = guarded_fetch(guard, stream, corpus, task, Split::Train);
      const auto fresh =
          build_prototypes(params, train, stream.sessions[static_cast<size_t>(task)].class_ids,
                           task, cfg.shots, false);
      cls = expand_classifier(cls, fresh, params);

      MetaLogRecord rec;
      rec.epoch = epoch;
      rec.task = task;
      const ParamSet adapted =
          inner_adapt(params, cls, train, cfg.alpha, cfg.inner_steps, &rec.inner_losses);

      const auto test = guarded_fetch(guard, stream, corpus, task, Split::Test);
      meta_set.insert(meta_set.end(), test.begin(), test.end());

      ConfusionAccumulator confusion;
      const auto info =
          meta_step(params, adapted, cls, meta_set, cfg.beta, cfg.lambda, cfg.kind, task,
                    outer_state, cfg.outer_momentum, cfg.reprojected_numerator, &confusion);
      rec.meta_loss = info.meta_loss;
      rec.meta_ce = info.meta_ce;
      rec.redistribution_share = info.redistribution_share;
      rec.meta_set_size = static_cast<int>(meta_set.size());
      rec.classifier_size = cls.size();
      std::vector<int> novel_ids;
      for (int t = 1; t <= task; ++t) {
        for (int c : stream.sessions[static_cast<size_t>(t)].class_ids) novel_ids.push_back(c);
      }
      rec.pseudo_miou_base = compute_miou(confusion, stream.sessions[0].class_ids);
      rec.pseudo_miou_novel = compute_miou(confusion, novel_ids);
      rec.pseudo_hm = harmonic_mean(rec.pseudo_miou_base, rec.pseudo_miou_novel);
      result.log.push_back(std::move(rec));
    }
    meta_set.clear();  // D_meta reset, once per sequence
    result.guard_violations += guard.violations.size();

    if (on_epoch) on_epoch(epoch, params, outer_state, result.log);
  }

  if (params.extractor_hash() != theta_f_before) {
    throw Error::numeric("frozen-backbone contract broken during meta training");
  }
  std::vector<int> base_ids;
  for (const auto& [c, ids] : base_pools) base_ids.push_back(c);
  std::vector<const Scene*> base_scenes;
  for (const auto& [c, ids] : base_pools) {
    for (int id : ids) base_scenes.push_back(&corpus.scenes[static_cast<size_t>(id)]);
  }
  result.classifier = PrototypeClassifier{build_prototypes(
      params, base_scenes, base_ids, 0, cfg.prototype_scenes_per_class, true)};
  return result;
}

}  // namespace ifss
