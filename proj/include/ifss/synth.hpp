#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ifss/error.hpp"
#include "ifss/rng.hpp"
#include "ifss/tensor.hpp"

// Parametric-shape segmentation corpus plus the session machinery: fold
// splits, incremental session streams, pseudo-incremental sequences sampled
// from base classes, and the access guard enforcing the session protocol.

namespace ifss {

enum class ShapeFamily {
  Disk,
  Ring,
  Square,
  Frame,
  Triangle,
  Cross,
  BarH,
  BarV,
  Diamond,
  LShape,
  TShape,
  CheckerBlob,
};

inline const char* family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Disk: return "disk";
    case ShapeFamily::Ring: return "ring";
    case ShapeFamily::Square: return "square";
    case ShapeFamily::Frame: return "frame";
    case ShapeFamily::Triangle: return "triangle";
    case ShapeFamily::Cross: return "cross";
    case ShapeFamily::BarH: return "bar-h";
    case ShapeFamily::BarV: return "bar-v";
    case ShapeFamily::Diamond: return "diamond";
    case ShapeFamily::LShape: return "l-shape";
    case ShapeFamily::TShape: return "t-shape";
    case ShapeFamily::CheckerBlob: return "checker-blob";
  }
  return "unknown";
}

inline ShapeFamily family_from_name(const std::string& s) {
  static const std::array<ShapeFamily, 12> all = {
      ShapeFamily::Disk,    ShapeFamily::Ring,   ShapeFamily::Square,
      ShapeFamily::Frame,   ShapeFamily::Triangle, ShapeFamily::Cross,
      ShapeFamily::BarH,    ShapeFamily::BarV,   ShapeFamily::Diamond,
      ShapeFamily::LShape,  ShapeFamily::TShape, ShapeFamily::CheckerBlob};
  for (ShapeFamily f : all) {
    if (s == family_name(f)) return f;
  }
  throw Error::data("unknown shape family '" + s + "'");
}

struct ClassSpec {
  int id = 0;
  ShapeFamily family = ShapeFamily::Disk;
  double hue = 0.0;         // base hue in [0,1)
  double hue_jitter = 0.04; // per-instance hue wobble
  double rot_jitter = 0.0;  // max |rotation| in radians
};

struct ClassCatalog {
  std::vector<ClassSpec> entries;

  int size() const { return static_cast<int>(entries.size()); }

  const ClassSpec& spec_of(int class_id) const {
    for (const auto& e : entries) {
      if (e.id == class_id) return e;
    }
    throw Error::data("class id " + std::to_string(class_id) + " not in catalog");
  }

  // 12 families, ids contiguous from 1, hues spread by the golden ratio.
  // Orientation-defining or rotation-ambiguous families (bars, square vs
  // diamond) get small rotation jitter only.
  static ClassCatalog default12() {
    ClassCatalog cat;
    const std::array<std::pair<ShapeFamily, double>, 12> fams = {{
        {ShapeFamily::Disk, 0.0},
        {ShapeFamily::Ring, 0.0},
        {ShapeFamily::Square, 0.12},
        {ShapeFamily::Frame, 0.12},
        {ShapeFamily::Triangle, 0.35},
        {ShapeFamily::Cross, 0.12},
        {ShapeFamily::BarH, 0.15},
        {ShapeFamily::BarV, 0.15},
        {ShapeFamily::Diamond, 0.12},
        {ShapeFamily::LShape, 0.25},
        {ShapeFamily::TShape, 0.25},
        {ShapeFamily::CheckerBlob, 0.0},
    }};
    for (int i = 0; i < 12; ++i) {
      ClassSpec s;
      s.id = i + 1;
      s.family = fams[static_cast<size_t>(i)].first;
      s.rot_jitter = fams[static_cast<size_t>(i)].second;
      s.hue = std::fmod(0.618033988749895 * (i + 1), 1.0);
      cat.entries.push_back(s);
    }
    return cat;
  }
};

struct Scene {
  int id = 0;
  int primary_class = 0;
  Tensor<float> image;   // H x W x 3, values in [0,1]
  Tensor<uint8_t> mask;  // H x W, 0 = background, 255 = ignore
};

struct Corpus {
  int height = 48;
  int width = 48;
  int channels = 3;
  int scenes_per_class = 0;
  uint64_t seed = 0;
  ClassCatalog catalog;
  std::vector<Scene> scenes;

  std::vector<int> scene_ids_of_class(int class_id) const {
    std::vector<int> out;
    for (const auto& s : scenes) {
      if (s.primary_class == class_id) out.push_back(s.id);
    }
    return out;
  }
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// Membership test in shape-local coordinates (unit radius).
inline bool shape_member(ShapeFamily f, double u, double v) {
  switch (f) {
    case ShapeFamily::Disk:
      return u * u + v * v <= 1.0;
    case ShapeFamily::Ring: {
      const double q = u * u + v * v;
      return q <= 1.0 && q >= 0.55 * 0.55;
    }
    case ShapeFamily::Square:
      return std::max(std::abs(u), std::abs(v)) <= 0.82;
    case ShapeFamily::Frame: {
      const double m = std::max(std::abs(u), std::abs(v));
      return m <= 0.9 && m >= 0.5;
    }
    case ShapeFamily::Triangle:
      // apex up, base at v = 0.8
      return v <= 0.8 && v >= -1.0 && std::abs(u) <= 0.95 * (v + 1.0) / 1.8;
    case ShapeFamily::Cross:
      return (std::abs(u) <= 0.33 && std::abs(v) <= 1.0) ||
             (std::abs(v) <= 0.33 && std::abs(u) <= 1.0);
    case ShapeFamily::BarH:
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.3;
    case ShapeFamily::BarV:
      return std::abs(u) <= 0.3 && std::abs(v) <= 1.0;
    case ShapeFamily::Diamond:
      return std::abs(u) + std::abs(v) <= 1.15;
    case ShapeFamily::LShape:
      return (u >= -0.75 && u <= -0.2 && v >= -1.0 && v <= 1.0) ||
             (u >= -0.75 && u <= 0.85 && v >= 0.45 && v <= 1.0);
    case ShapeFamily::TShape:
      return (v >= -1.0 && v <= -0.45 && std::abs(u) <= 1.0) ||
             (std::abs(u) <= 0.28 && v >= -0.45 && v <= 1.0);
    case ShapeFamily::CheckerBlob:
      return u * u + v * v <= 1.0;
  }
  return false;
}

struct Instance {
  double cx, cy, radius, cos_t, sin_t;
  double rgb_a[3];
  double rgb_b[3];  // second checker color
  ShapeFamily family;
};

inline bool render_scene_attempt(const ClassSpec& spec, int H, int W, Rng& rng,
                                 Tensor<float>& image, Tensor<uint8_t>& mask) {
  const double r0 = 0.16 * std::min(H, W);
  const int count = rng.uniform_int(1, 3);
  std::vector<Instance> instances;
  for (int i = 0; i < count; ++i) {
    Instance in;
    in.family = spec.family;
    in.radius = r0 * rng.uniform(0.6, 1.4);
    const double margin = in.radius * 1.1 + 1.0;
    if (2.0 * margin >= W - 1 || 2.0 * margin >= H - 1) return false;
    in.cx = rng.uniform(margin, W - 1 - margin);
    in.cy = rng.uniform(margin, H - 1 - margin);
    const double theta = rng.uniform(-spec.rot_jitter, spec.rot_jitter);
    in.cos_t = std::cos(theta);
    in.sin_t = std::sin(theta);
    const double hue = spec.hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter);
    const double sat = rng.uniform(0.55, 0.85);
    const double val = rng.uniform(0.6, 0.95);
    hsv_to_rgb(hue, sat, val, in.rgb_a);
    hsv_to_rgb(hue + 0.5, sat, val * 0.8, in.rgb_b);
    instances.push_back(in);
  }

  // background: textured gray, sigma 0.05
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = 0.35 + 0.05 * rng.normal();
        image.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      mask.at(y, x) = 0;
    }
  }

  int fg = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (const auto& in : instances) {
        const double dx = x - in.cx;
        const double dy = y - in.cy;
        const double u = (dx * in.cos_t + dy * in.sin_t) / in.radius;
        const double v = (-dx * in.sin_t + dy * in.cos_t) / in.radius;
        if (!shape_member(in.family, u, v)) continue;
        const double* rgb = in.rgb_a;
        if (in.family == ShapeFamily::CheckerBlob) {
          const int cell = static_cast<int>(std::floor(u / 0.45)) +
                           static_cast<int>(std::floor(v / 0.45));
          if (((cell % 2) + 2) % 2 == 1) rgb = in.rgb_b;
        }
        for (int c = 0; c < 3; ++c) {
          const double pv = rgb[c] + 0.05 * rng.normal();
          image.at(y, x, c) = static_cast<float>(std::clamp(pv, 0.0, 1.0));
        }
        if (mask.at(y, x) == 0) ++fg;
        mask.at(y, x) = static_cast<uint8_t>(spec.id);
        break;
      }
    }
  }
  return fg >= 16;
}

}  // namespace detail

// Deterministic in (catalog, sizes, seed); each scene draws from its own
// counter-derived stream.
inline Corpus generate_corpus(const ClassCatalog& catalog, int scenes_per_class, int height,
                              int width, uint64_t seed) {
  if (height < 24 || width < 24) {
    throw Error::data("placement-infeasible: grid " + std::to_string(height) + "x" +
                      std::to_string(width) + " too small to place the minimum instance "
                      "(minimum 24x24)");
  }
  if (height > 96 || width > 96) {
    throw Error::data("grid " + std::to_string(height) + "x" + std::to_string(width) +
                      " above the supported 96x96 maximum");
  }
  Corpus corpus;
  corpus.height = height;
  corpus.width = width;
  corpus.scenes_per_class = scenes_per_class;
  corpus.seed = seed;
  corpus.catalog = catalog;
  int id = 0;
  for (const auto& spec : catalog.entries) {
    for (int s = 0; s < scenes_per_class; ++s) {
      Scene scene;
      scene.id = id;
      scene.primary_class = spec.id;
      scene.image = Tensor<float>({height, width, 3});
      scene.mask = Tensor<uint8_t>({height, width});
      bool ok = false;
      for (uint64_t attempt = 0; attempt < 64 && !ok; ++attempt) {
        Rng rng(derive_seed(seed, "scene", static_cast<uint64_t>(id) * 64 + attempt));
        ok = detail::render_scene_attempt(spec, height, width, rng, scene.image, scene.mask);
      }
      if (!ok) {
        throw Error::data("placement-infeasible: could not place class " +
                          std::to_string(spec.id) + " with >= 16 pixels on a " +
                          std::to_string(height) + "x" + std::to_string(width) + " grid");
      }
      corpus.scenes.push_back(std::move(scene));
      ++id;
    }
  }
  return corpus;
}

// Even class partition; the test fold becomes the novel set.
inline std::pair<std::vector<int>, std::vector<int>> split_folds(const ClassCatalog& catalog,
                                                                 int fold_count, int test_fold) {
  if (fold_count <= 0 || catalog.size() % fold_count != 0) {
    throw Error::data("catalog of " + std::to_string(catalog.size()) +
                      " classes is not divisible into " + std::to_string(fold_count) + " folds");
  }
  if (test_fold < 0 || test_fold >= fold_count) {
    throw Error::data("test fold " + std::to_string(test_fold) + " out of range for " +
                      std::to_string(fold_count) + " folds");
  }
  std::vector<int> ids;
  for (const auto& e : catalog.entries) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  const int per = catalog.size() / fold_count;
  std::vector<int> novel(ids.begin() + static_cast<long>(test_fold) * per,
                         ids.begin() + static_cast<long>(test_fold + 1) * per);
  std::vector<int> base;
  for (int c : ids) {
    if (std::find(novel.begin(), novel.end(), c) == novel.end()) base.push_back(c);
  }
  return {base, novel};
}

enum class StreamMode { SingleStep, MultiStep };

inline const char* mode_name(StreamMode m) {
  return m == StreamMode::SingleStep ? "single-step" : "multi-step";
}

struct Session {
  std::vector<int> class_ids;
  std::vector<int> train;  // scene ids
  std::vector<int> test;   // scene ids
};

struct SessionStream {
  StreamMode mode = StreamMode::MultiStep;
  int shots = 1;
  std::vector<Session> sessions;
};

struct StreamOptions {
  int test_per_class = 10;
};

// Session 0 carries the abundant base split; novel sessions carry exactly K
// train scenes per class. Train and test pools are disjoint per class.
inline SessionStream build_stream(const Corpus& corpus, const std::vector<int>& base_set,
                                  const std::vector<int>& novel_set, StreamMode mode, int shots,
                                  uint64_t seed, StreamOptions opts = {}) {
  if (shots < 1) throw Error::data("shots must be >= 1");
  SessionStream stream;
  stream.mode = mode;
  stream.shots = shots;

  std::map<int, std::vector<int>> train_pool, test_pool;
  auto classes = base_set;
  classes.insert(classes.end(), novel_set.begin(), novel_set.end());
  for (int c : classes) {
    auto ids = corpus.scene_ids_of_class(c);
    if (static_cast<int>(ids.size()) < opts.test_per_class + 1) {
      throw Error::data("insufficient-data: class " + std::to_string(c) + " has " +
                        std::to_string(ids.size()) + " scenes, needs > " +
                        std::to_string(opts.test_per_class));
    }
    Rng rng(derive_seed(seed, "stream-split", static_cast<uint64_t>(c)));
    rng.shuffle(ids.begin(), ids.end());
    test_pool[c].assign(ids.begin(), ids.begin() + opts.test_per_class);
    train_pool[c].assign(ids.begin() + opts.test_per_class, ids.end());
  }

  Session base;
  base.class_ids = base_set;
  std::sort(base.class_ids.begin(), base.class_ids.end());
  for (int c : base.class_ids) {
    const auto& tp = train_pool[c];
    if (static_cast<int>(tp.size()) < 20 * shots) {
      throw Error::data("insufficient-data: base class " + std::to_string(c) + " has " +
                        std::to_string(tp.size()) + " train scenes; the base session needs >= " +
                        std::to_string(20 * shots) + " (20x the novel per-class shots)");
    }
    base.train.insert(base.train.end(), tp.begin(), tp.end());
    base.test.insert(base.test.end(), test_pool[c].begin(), test_pool[c].end());
  }
  stream.sessions.push_back(std::move(base));

  auto novel_sorted = novel_set;
  std::sort(novel_sorted.begin(), novel_sorted.end());
  auto make_novel_session = [&](const std::vector<int>& cls) {
    Session s;
    s.class_ids = cls;
    for (int c : cls) {
      const auto& tp = train_pool[c];
      if (static_cast<int>(tp.size()) < shots) {
        throw Error::data("insufficient-data: class " + std::to_string(c) + " has only " +
                          std::to_string(tp.size()) + " train scenes for " +
                          std::to_string(shots) + " shots");
      }
      s.train.insert(s.train.end(), tp.begin(), tp.begin() + shots);
      s.test.insert(s.test.end(), test_pool[c].begin(), test_pool[c].end());
    }
    return s;
  };

  if (mode == StreamMode::MultiStep) {
    for (int c : novel_sorted) stream.sessions.push_back(make_novel_session({c}));
  } else if (!novel_sorted.empty()) {
    stream.sessions.push_back(make_novel_session(novel_sorted));
  }
  return stream;
}

struct PseudoOptions {
  int pseudo_base_scenes = 10;    // per-class cap for the pseudo base split
  int pseudo_test_per_class = 2;  // meta-test scenes per class
};

// Samples a pseudo-incremental sequence from base classes: a majority of the
// classes form the pseudo base session, T one-class K-shot sessions follow.
// pools maps each base class to the scene ids the offline stage may touch;
// pseudo train/test picks are disjoint within the sequence.
inline SessionStream sample_pseudo_sequence(const std::map<int, std::vector<int>>& pools, int T,
                                            int shots, uint64_t seed, PseudoOptions opts = {}) {
  const int n = static_cast<int>(pools.size());
  if (T < 0) throw Error::data("pseudo session count must be >= 0");
  if (T > 0 && 2 * T >= n) {
    throw Error::data("insufficient-data: " + std::to_string(T) +
                      " pseudo sessions from " + std::to_string(n) +
                      " base classes leaves no pseudo-base majority");
  }
  std::vector<int> classes;
  for (const auto& [c, ids] : pools) classes.push_back(c);
  std::sort(classes.begin(), classes.end());
  Rng rng(derive_seed(seed, "pseudo-classes"));
  rng.shuffle(classes.begin(), classes.end());
  std::vector<int> pseudo_novel(classes.begin(), classes.begin() + T);
  std::vector<int> pseudo_base(classes.begin() + T, classes.end());
  std::sort(pseudo_base.begin(), pseudo_base.end());

  SessionStream stream;
  stream.mode = StreamMode::MultiStep;
  stream.shots = shots;

  auto pick = [&](int c, int want_train, Session& s) {
    auto ids = pools.at(c);
    Rng crng(derive_seed(seed, "pseudo-scenes", static_cast<uint64_t>(c)));
    crng.shuffle(ids.begin(), ids.end());
    const int need = want_train + opts.pseudo_test_per_class;
    if (static_cast<int>(ids.size()) < need) {
      throw Error::data("insufficient-data: class " + std::to_string(c) + " has " +
                        std::to_string(ids.size()) + " scenes, pseudo sequence needs " +
                        std::to_string(need));
    }
    s.class_ids.push_back(c);
    s.train.insert(s.train.end(), ids.begin(), ids.begin() + want_train);
    s.test.insert(s.test.end(), ids.begin() + want_train,
                  ids.begin() + want_train + opts.pseudo_test_per_class);
  };

  Session base;
  for (int c : pseudo_base) {
    const int avail = static_cast<int>(pools.at(c).size()) - opts.pseudo_test_per_class;
    pick(c, std::min(opts.pseudo_base_scenes, avail), base);
  }
  std::sort(base.class_ids.begin(), base.class_ids.end());
  stream.sessions.push_back(std::move(base));

  for (int c : pseudo_novel) {
    Session s;
    pick(c, shots, s);
    stream.sessions.push_back(std::move(s));
  }
  return stream;
}

struct AccessGuard {
  struct Violation {
    int requested = 0;
    int current = 0;
    bool train = false;
  };
  int current_session = 0;
  std::vector<Violation> violations;
};

enum class Split { Train, Test };

// Protocol rule: train data only for the current session; test data for every
// session encountered so far. Violations are logged, then rejected.
inline std::vector<const Scene*> guarded_fetch(AccessGuard& guard, const SessionStream& stream,
                                               const Corpus& corpus, int session, Split split) {
  if (session < 0 || session >= static_cast<int>(stream.sessions.size())) {
    throw Error::data("session " + std::to_string(session) + " out of range for stream of " +
                      std::to_string(stream.sessions.size()) + " sessions");
  }
  const bool is_train = split == Split::Train;
  const bool legal = is_train ? session == guard.current_session
                              : session <= guard.current_session;
  if (!legal) {
    guard.violations.push_back({session, guard.current_session, is_train});
    throw Error::protocol("protocol-violation: " + std::string(is_train ? "train" : "test") +
                          " fetch of session " + std::to_string(session) +
                          " while current session is " + std::to_string(guard.current_session));
  }
  const auto& ids = is_train ? stream.sessions[static_cast<size_t>(session)].train
                             : stream.sessions[static_cast<size_t>(session)].test;
  std::vector<const Scene*> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(&corpus.scenes[static_cast<size_t>(id)]);
  return out;
}

}  // namespace ifss
