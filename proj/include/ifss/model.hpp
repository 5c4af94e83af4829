#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ifss/autograd.hpp"
#include "ifss/error.hpp"
#include "ifss/ops.hpp"
#include "ifss/rng.hpp"
#include "ifss/synth.hpp"
#include "ifss/tensor.hpp"

// The segmentation network: a compact conv backbone (theta_f), a 1x1 conv
// head refining channels to the embedding dimension (theta_seg), a prototype
// projector (theta_g), masked-average-pool prototype construction, cosine
// prototype scoring, and the redistribution losses.

namespace ifss {

struct ModelConfig {
  int embed_dim = 32;
  double tau = 0.1;
  std::vector<int> channels = {16, 32, 32, 32};  // conv stack, 3x3 each
  std::vector<int> strides = {1, 2, 1, 2};       // two stride-2 stages: h = H/4
  // Alternative reading of the redistribution numerator: compare reprojected
  // old prototypes (instead of frozen anchors) against the new ones.
  bool redistribution_reprojected_numerator = false;
};

struct ConvParam {
  Tensor<float> w;  // [3,3,Cin,Cout]
  Tensor<float> b;  // [Cout]
  int stride = 1;
};

struct ParamSet {
  ModelConfig config;
  std::vector<ConvParam> extractor;  // theta_f (frozen after base init)
  Tensor<float> head_w, head_b;      // theta_seg: 1x1 conv as [C,d]
  Tensor<float> proj_w, proj_b;      // theta_g: [d,d], [d]

  static ParamSet init(const ModelConfig& cfg, int image_channels, uint64_t seed) {
    ParamSet p;
    p.config = cfg;
    Rng rng(derive_seed(seed, "params"));
    int cin = image_channels;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
      ConvParam cp;
      const int cout = cfg.channels[i];
      cp.stride = cfg.strides[i];
      cp.w = Tensor<float>({3, 3, cin, cout});
      const double std_dev = std::sqrt(2.0 / (9.0 * cin));
      for (size_t k = 0; k < cp.w.size(); ++k) {
        cp.w[k] = static_cast<float>(std_dev * rng.normal());
      }
      // small positive bias keeps relu units alive at init
      cp.b = Tensor<float>::full({cout}, 0.05f);
      p.extractor.push_back(std::move(cp));
      cin = cout;
    }
    p.head_w = Tensor<float>({cin, cfg.embed_dim});
    const double head_std = std::sqrt(1.0 / cin);
    for (size_t k = 0; k < p.head_w.size(); ++k) {
      p.head_w[k] = static_cast<float>(head_std * rng.normal());
    }
    p.head_b = Tensor<float>({cfg.embed_dim});
    // projector starts as the identity map
    p.proj_w = Tensor<float>({cfg.embed_dim, cfg.embed_dim});
    for (int i = 0; i < cfg.embed_dim; ++i) p.proj_w.at(i, i) = 1.0f;
    p.proj_b = Tensor<float>({cfg.embed_dim});
    return p;
  }

  void for_each_array(const std::function<void(const std::string&, Tensor<float>&)>& fn) {
    for (size_t i = 0; i < extractor.size(); ++i) {
      fn("conv" + std::to_string(i) + ".w", extractor[i].w);
      fn("conv" + std::to_string(i) + ".b", extractor[i].b);
    }
    fn("head.w", head_w);
    fn("head.b", head_b);
    fn("proj.w", proj_w);
    fn("proj.b", proj_b);
  }

  void for_each_array(
      const std::function<void(const std::string&, const Tensor<float>&)>& fn) const {
    const_cast<ParamSet*>(this)->for_each_array(
        [&fn](const std::string& n, Tensor<float>& t) { fn(n, t); });
  }

  uint64_t extractor_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& cp : extractor) {
      h = fnv1a64(cp.w.data(), cp.w.size() * sizeof(float), h);
      h = fnv1a64(cp.b.data(), cp.b.size() * sizeof(float), h);
    }
    return h;
  }

  uint64_t full_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for_each_array([&h](const std::string& name, const Tensor<float>& t) {
      h = fnv1a64(name, h);
      h = fnv1a64(t.data(), t.size() * sizeof(float), h);
    });
    return h;
  }
};

struct Prototype {
  int class_id = 0;
  Tensor<float> vector;  // pre-projection embedding, d
  int session_born = 0;
  bool has_anchor = false;
  Tensor<float> anchor;  // projected snapshot at the end of the previous session
};

struct PrototypeClassifier {
  std::vector<Prototype> prototypes;  // index-stable across expansion

  int size() const { return static_cast<int>(prototypes.size()); }

  int index_of(int class_id) const {
    for (size_t i = 0; i < prototypes.size(); ++i) {
      if (prototypes[i].class_id == class_id) return static_cast<int>(i);
    }
    return -1;
  }
};

// ----- parameter lifting ----------------------------------------------------

enum class TrainScope { None, HeadAndProjector, All };

template <typename T>
struct ParamLeaves {
  std::vector<std::pair<Node<T>*, Node<T>*>> conv;  // (w, b)
  std::vector<int> strides;
  Node<T>* head_w = nullptr;
  Node<T>* head_b = nullptr;
  Node<T>* proj_w = nullptr;
  Node<T>* proj_b = nullptr;
  int embed_dim = 0;
  double tau = 0.1;
};

template <typename T>
ParamLeaves<T> lift_params(Graph<T>& g, const ParamSet& p, TrainScope scope) {
  ParamLeaves<T> lv;
  const bool train_f = scope == TrainScope::All;
  const bool train_gs = scope != TrainScope::None;
  for (const auto& cp : p.extractor) {
    lv.conv.emplace_back(g.leaf(cp.w.template cast<T>(), train_f, "conv.w"),
                         g.leaf(cp.b.template cast<T>(), train_f, "conv.b"));
    lv.strides.push_back(cp.stride);
  }
  lv.head_w = g.leaf(p.head_w.template cast<T>(), train_gs, "head.w");
  lv.head_b = g.leaf(p.head_b.template cast<T>(), train_gs, "head.b");
  lv.proj_w = g.leaf(p.proj_w.template cast<T>(), train_gs, "proj.w");
  lv.proj_b = g.leaf(p.proj_b.template cast<T>(), train_gs, "proj.b");
  lv.embed_dim = p.config.embed_dim;
  lv.tau = p.config.tau;
  return lv;
}

// Named gradient read-back matching ParamSet::for_each_array order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> leaf_grads(const ParamLeaves<T>& lv) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (size_t i = 0; i < lv.conv.size(); ++i) {
    out.emplace_back("conv" + std::to_string(i) + ".w", grad_or_zero(lv.conv[i].first));
    out.emplace_back("conv" + std::to_string(i) + ".b", grad_or_zero(lv.conv[i].second));
  }
  out.emplace_back("head.w", grad_or_zero(lv.head_w));
  out.emplace_back("head.b", grad_or_zero(lv.head_b));
  out.emplace_back("proj.w", grad_or_zero(lv.proj_w));
  out.emplace_back("proj.b", grad_or_zero(lv.proj_b));
  return out;
}

// ----- forward builders ------------------------------------------------------

// taps, when given, collects the pre-relu conv outputs (used by diagnostics
// that need kink proximity, e.g. finite-difference validity checks).
template <typename T>
Node<T>* backbone_forward(Graph<T>& g, const ParamLeaves<T>& lv, Node<T>* x,
                          std::vector<Node<T>*>* taps = nullptr) {
  Node<T>* h = x;
  for (size_t i = 0; i < lv.conv.size(); ++i) {
    Node<T>* pre = ops::conv2d(g, h, lv.conv[i].first, lv.conv[i].second, lv.strides[i]);
    if (!pre->value.all_finite()) {
      throw Error::numeric("numeric-blowup: non-finite activations at extractor layer " +
                           std::to_string(i));
    }
    if (taps) taps->push_back(pre);
    h = ops::relu(g, pre);
  }
  return h;
}

template <typename T>
Node<T>* features_forward(Graph<T>& g, const ParamLeaves<T>& lv, Node<T>* x,
                          std::vector<Node<T>*>* taps = nullptr) {
  Node<T>* h = backbone_forward(g, lv, x, taps);
  Node<T>* f = ops::linear(g, h, lv.head_w, lv.head_b);  // 1x1 conv over channels
  if (!f->value.all_finite()) {
    throw Error::numeric("numeric-blowup: non-finite activations at segmentation head");
  }
  return f;
}

template <typename T>
Node<T>* project_forward(Graph<T>& g, const ParamLeaves<T>& lv, Node<T>* vectors) {
  return ops::linear(g, vectors, lv.proj_w, lv.proj_b);
}

// Scores: softmax over exp(cos(F_i, p_c)/tau).
template <typename T>
Node<T>* scores_forward(Graph<T>& g, Node<T>* features, Node<T>* projected_protos, double tau) {
  if (tau <= 0.0) throw Error::data("temperature must be positive");
  const int H = features->value.extent(0);
  const int W = features->value.extent(1);
  const int D = features->value.extent(2);
  const int N = projected_protos->value.extent(0);
  auto* flat = ops::reshape(g, features, {H * W, D});
  auto* cos = ops::cosine_matrix(g, flat, projected_protos);
  auto* logits = ops::reshape(g, ops::scale(g, cos, 1.0 / tau), {H, W, N});
  return ops::softmax(g, logits, 2);
}

// K-shot prototype: mean over shots of per-shot masked averages; shots whose
// downsampled mask is empty are dropped (K shrinks accordingly).
template <typename T>
Node<T>* map_prototype_forward(Graph<T>& g, const std::vector<Node<T>*>& features,
                               const std::vector<Tensor<T>>& masks) {
  if (features.size() != masks.size() || features.empty()) {
    throw Error::data("map_prototype needs matching non-empty feature/mask lists");
  }
  std::vector<Node<T>*> shot_means;
  for (size_t n = 0; n < features.size(); ++n) {
    double msum = 0;
    for (size_t i = 0; i < masks[n].size(); ++i) msum += static_cast<double>(masks[n][i]);
    if (msum == 0.0) continue;
    shot_means.push_back(ops::masked_average_pool(g, features[n], masks[n]));
  }
  if (shot_means.empty()) {
    throw Error::data("empty-support: every shot mask is empty after downsampling");
  }
  if (shot_means.size() == 1) return shot_means[0];
  auto* stacked = ops::concat_rows(g, shot_means);
  const int K = stacked->value.extent(0);
  const int D = stacked->value.extent(1);
  // mean over the K shot rows, viewed as a [K,1,D] grid
  return ops::mean_pool(g, ops::reshape(g, stacked, {K, 1, D}));
}

// ----- masks and labels -------------------------------------------------------

inline Tensor<uint8_t> downsample_mask_nearest(const Tensor<uint8_t>& mask, int h, int w) {
  const int H = mask.extent(0), W = mask.extent(1);
  const int fy = H / h, fx = W / w;
  Tensor<uint8_t> out({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out.at(y, x) = mask.at(y * fy + fy / 2, x * fx + fx / 2);
    }
  }
  return out;
}

template <typename T>
Tensor<T> class_mask(const Tensor<uint8_t>& mask, int class_id) {
  Tensor<T> out(mask.shape());
  for (size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] == class_id ? T{1} : T{0};
  return out;
}

// Maps raw mask labels to classifier column indices; 255 is the ignore label.
// Labels outside the classifier are an error, never silently skipped; labels
// outside `restrict_to` (when given) are ignored deliberately.
inline Tensor<int> label_index_map(const Tensor<uint8_t>& mask, const PrototypeClassifier& cls,
                                   const std::set<int>* restrict_to = nullptr) {
  Tensor<int> out(mask.shape());
  for (size_t i = 0; i < mask.size(); ++i) {
    const int label = mask[i];
    if (label == 255) {
      out[i] = -1;
      continue;
    }
    const int idx = cls.index_of(label);
    if (idx < 0) {
      throw Error::data("unknown-label: mask label " + std::to_string(label) +
                        " is not in the classifier");
    }
    out[i] = (restrict_to && !restrict_to->count(label)) ? -1 : idx;
  }
  return out;
}

// Mean negative log-probability of the true class over non-ignored pixels.
template <typename T>
Node<T>* ce_from_scores(Graph<T>& g, Node<T>* scores, const Tensor<int>& label_idx) {
  return ops::neg(g, ops::mean(g, ops::log(g, ops::select_labels(g, scores, label_idx))));
}

// ----- redistribution losses --------------------------------------------------

// Similarity mapped to [0,1]: s(a,b) = (1 + cos(a,b)) / 2.
template <typename T>
Node<T>* similarity01_sum(Graph<T>& g, Node<T>* cos_map) {
  return ops::sum(g, ops::add_const(g, ops::scale(g, cos_map, 0.5), 0.5));
}

// Ratio loss on explicit operands: sum_ij s(anchor_i, new_j) over
// sum_i s(anchor_i, old_i) + eps.
template <typename T>
Node<T>* redistribution_loss_builder(Graph<T>& g, Node<T>* numerator_old, Node<T>* proj_old,
                                     Node<T>* anchors, Node<T>* proj_new, double eps = 1e-6) {
  auto* num = similarity01_sum(g, ops::cosine_matrix(g, numerator_old, proj_new));
  auto* den = similarity01_sum(g, ops::cosine_pairs(g, anchors, proj_old));
  return ops::div(g, num, ops::add_const(g, den, eps));
}

template <typename T>
Node<T>* inter_loss_builder(Graph<T>& g, Node<T>* anchors, Node<T>* proj_new) {
  return similarity01_sum(g, ops::cosine_matrix(g, anchors, proj_new));
}

enum class RedistributionKind { None, Inter, Ratio };

inline Tensor<float> stack_vectors(const std::vector<const Tensor<float>*>& rows) {
  const int n = static_cast<int>(rows.size());
  const int d = rows[0]->extent(0);
  Tensor<float> out({n, d});
  for (int i = 0; i < n; ++i) {
    std::copy(rows[static_cast<size_t>(i)]->data(), rows[static_cast<size_t>(i)]->data() + d,
              out.data() + static_cast<size_t>(i) * d);
  }
  return out;
}

// Classifier-level redistribution loss for session `current`: old = non-
// background prototypes born earlier (their anchors), new = prototypes born
// this session, both projected through the live theta_g leaves.
template <typename T>
Node<T>* redistribution_loss_forward(Graph<T>& g, const ParamLeaves<T>& lv,
                                     const PrototypeClassifier& cls, int current_session,
                                     RedistributionKind kind,
                                     bool reprojected_numerator = false, double eps = 1e-6) {
  std::vector<const Tensor<float>*> old_vecs, old_anchors, new_vecs;
  for (const auto& p : cls.prototypes) {
    if (p.session_born == current_session) {
      new_vecs.push_back(&p.vector);
    } else if (p.session_born < current_session && p.class_id != 0) {
      old_vecs.push_back(&p.vector);
      if (!p.has_anchor) {
        throw Error::data("anchor-missing: prototype of class " + std::to_string(p.class_id) +
                          " born in session " + std::to_string(p.session_born) +
                          " has no anchor");
      }
      old_anchors.push_back(&p.anchor);
    }
  }
  if (old_vecs.empty() || new_vecs.empty()) {
    throw Error::data("redistribution loss needs non-empty old and new prototype sets (old " +
                      std::to_string(old_vecs.size()) + ", new " +
                      std::to_string(new_vecs.size()) + ")");
  }
  auto* anchors = g.constant(stack_vectors(old_anchors).template cast<T>());
  auto* proj_new =
      project_forward(g, lv, g.constant(stack_vectors(new_vecs).template cast<T>()));
  if (kind == RedistributionKind::Inter) {
    return inter_loss_builder(g, anchors, proj_new);
  }
  auto* proj_old =
      project_forward(g, lv, g.constant(stack_vectors(old_vecs).template cast<T>()));
  Node<T>* numerator_old = reprojected_numerator ? proj_old : anchors;
  return redistribution_loss_builder(g, numerator_old, proj_old, anchors, proj_new, eps);
}

// ----- data-level wrappers (forward only, graph discarded) ---------------------

inline Tensor<float> backbone_features(const ParamSet& p, const Tensor<float>& image) {
  Graph<float> g;
  auto lv = lift_params(g, p, TrainScope::None);
  return backbone_forward(g, lv, g.constant(image))->value;
}

inline Tensor<float> extract(const ParamSet& p, const Tensor<float>& image) {
  if (!image.all_finite()) throw Error::numeric("numeric-blowup: non-finite input image");
  Graph<float> g;
  auto lv = lift_params(g, p, TrainScope::None);
  return features_forward(g, lv, g.constant(image))->value;
}

inline Tensor<float> project_vectors(const ParamSet& p, const Tensor<float>& vectors) {
  Graph<float> g;
  auto lv = lift_params(g, p, TrainScope::None);
  const bool single = vectors.rank() == 1;
  auto* in = g.constant(single ? Tensor<float>({1, vectors.extent(0)}, vectors.vec()) : vectors);
  auto out = project_forward(g, lv, in)->value;
  if (single) return Tensor<float>({out.extent(1)}, out.vec());
  return out;
}

inline Tensor<float> map_prototype(const std::vector<Tensor<float>>& features,
                                   const std::vector<Tensor<float>>& masks) {
  Graph<float> g;
  std::vector<Node<float>*> nodes;
  nodes.reserve(features.size());
  for (const auto& f : features) nodes.push_back(g.constant(f));
  return map_prototype_forward(g, nodes, masks)->value;
}

inline Tensor<float> score_pixels(const ParamSet& p, const Tensor<float>& features,
                                  const PrototypeClassifier& cls, double tau) {
  if (cls.size() == 0) throw Error::data("empty classifier");
  Graph<float> g;
  auto lv = lift_params(g, p, TrainScope::None);
  std::vector<const Tensor<float>*> rows;
  for (const auto& pr : cls.prototypes) rows.push_back(&pr.vector);
  auto* protos = project_forward(g, lv, g.constant(stack_vectors(rows)));
  return scores_forward(g, g.constant(features), protos, tau)->value;
}

// Argmax prediction over classifier columns, mapped back to class ids.
inline Tensor<uint8_t> predict_labels(const Tensor<float>& scores,
                                      const PrototypeClassifier& cls) {
  const int H = scores.extent(0), W = scores.extent(1), N = scores.extent(2);
  Tensor<uint8_t> out({H, W});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      int best = 0;
      float bv = scores.at(y, x, 0);
      for (int c = 1; c < N; ++c) {
        if (scores.at(y, x, c) > bv) {
          bv = scores.at(y, x, c);
          best = c;
        }
      }
      out.at(y, x) = static_cast<uint8_t>(cls.prototypes[static_cast<size_t>(best)].class_id);
    }
  }
  return out;
}

inline Tensor<uint8_t> upsample_nearest(const Tensor<uint8_t>& labels, int H, int W) {
  const int h = labels.extent(0), w = labels.extent(1);
  Tensor<uint8_t> out({H, W});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      out.at(y, x) = labels.at(y * h / H, x * w / W);
    }
  }
  return out;
}

// ----- classifier construction -------------------------------------------------

// MAP prototypes for the given classes from their scenes (capped per class),
// optionally with a background prototype pooled over the same scenes.
inline std::vector<Prototype> build_prototypes(const ParamSet& params,
                                               const std::vector<const Scene*>& scenes,
                                               const std::vector<int>& class_ids,
                                               int session_born, int max_scenes_per_class,
                                               bool include_background) {
  std::map<int, std::vector<const Scene*>> by_class;
  for (const Scene* s : scenes) by_class[s->primary_class].push_back(s);

  std::map<int, Tensor<float>> feature_cache;
  std::map<int, Tensor<uint8_t>> mask_cache;
  auto features_of = [&](const Scene* s) -> const Tensor<float>& {
    auto it = feature_cache.find(s->id);
    if (it == feature_cache.end()) {
      it = feature_cache.emplace(s->id, extract(params, s->image)).first;
      const auto& f = it->second;
      mask_cache.emplace(s->id, downsample_mask_nearest(s->mask, f.extent(0), f.extent(1)));
    }
    return it->second;
  };

  std::vector<Prototype> out;
  std::vector<const Scene*> used_for_background;
  if (include_background) {
    Prototype bg;
    bg.class_id = 0;
    bg.session_born = session_born;
    out.push_back(std::move(bg));  // filled below, keeps index 0
  }
  for (int c : class_ids) {
    auto it = by_class.find(c);
    if (it == by_class.end() || it->second.empty()) {
      throw Error::data("empty-support: no scenes for class " + std::to_string(c));
    }
    std::vector<Tensor<float>> feats;
    std::vector<Tensor<float>> masks;
    int used = 0;
    for (const Scene* s : it->second) {
      if (used >= max_scenes_per_class) break;
      feats.push_back(features_of(s));
      masks.push_back(class_mask<float>(mask_cache.at(s->id), c));
      used_for_background.push_back(s);
      ++used;
    }
    Prototype p;
    p.class_id = c;
    p.session_born = session_born;
    p.vector = map_prototype(feats, masks);
    out.push_back(std::move(p));
  }
  if (include_background) {
    std::vector<Tensor<float>> feats;
    std::vector<Tensor<float>> masks;
    for (const Scene* s : used_for_background) {
      feats.push_back(feature_cache.at(s->id));
      masks.push_back(class_mask<float>(mask_cache.at(s->id), 0));
    }
    out[0].vector = map_prototype(feats, masks);
  }
  return out;
}

// Appends freshly built prototypes; retained prototypes keep index and vector
// and get fresh anchors — their projected values under the current theta_g.
inline PrototypeClassifier expand_classifier(const PrototypeClassifier& cls,
                                             const std::vector<Prototype>& fresh,
                                             const ParamSet& params) {
  if (fresh.empty()) return cls;
  PrototypeClassifier out = cls;
  for (auto& p : out.prototypes) {
    p.anchor = project_vectors(params, p.vector);
    p.has_anchor = true;
  }
  for (const auto& np : fresh) {
    if (out.index_of(np.class_id) >= 0) {
      throw Error::data("duplicate class id " + std::to_string(np.class_id) +
                        " in classifier expansion");
    }
    out.prototypes.push_back(np);
  }
  return out;
}

inline uint64_t classifier_hash(const PrototypeClassifier& cls) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : cls.prototypes) {
    h = fnv1a64(&p.class_id, sizeof(p.class_id), h);
    h = fnv1a64(&p.session_born, sizeof(p.session_born), h);
    h = fnv1a64(p.vector.data(), p.vector.size() * sizeof(float), h);
    if (p.has_anchor) h = fnv1a64(p.anchor.data(), p.anchor.size() * sizeof(float), h);
  }
  return h;
}

}  // namespace ifss
