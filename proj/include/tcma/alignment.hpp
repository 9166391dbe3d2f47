// Video, frame and patch level alignment heads, evaluated directly on tensors.
//
// Three video representations are scored against each sentence:
//   video  mean of the frame features (text-agnostic),
//   frame  frames weighted by a softmax of frame . sentence at the
//          sentence's dynamic temperature,
//   patch  per frame, the top-K_p patches after fusing each patch with its
//          frame (G_a) and scoring it against the pooled video (G_b); each of
//          the top-K_w words (scored by G_w) attends over all T * K_p selected
//          patches at its own dynamic temperature, and the per-word results
//          are averaged.
//
// Selection scores are reused downstream so that the scoring maps receive
// gradient: a patch's score is added to its attention logit, and word results
// are averaged with weights softmax(selected word scores). Zero-initialized
// scoring maps give zero scores, which reduces both to the plain attention
// and the unweighted word average.

#ifndef TCMA_ALIGNMENT_HPP
#define TCMA_ALIGNMENT_HPP

#include <cmath>
#include <numbers>
#include <string_view>
#include <vector>

#include "tcma/error.hpp"
#include "tcma/parallel.hpp"
#include "tcma/tensor.hpp"

namespace tcma {

/// Every trainable weight of the aggregation and selection heads.
struct HeadParameters {
  static constexpr double kEpsilon = 0.001;
  static constexpr double kMinLogitScale = 0.0;                 // exp = 1
  static inline const double kMaxLogitScale = std::log(1000.0);  // exp = 1000

  std::size_t dim = 0;
  std::size_t k_words = 8;
  std::size_t k_patches = 3;

  Tensor w_tau;         // [D]      temperature projection
  Tensor b_tau;         // [1]
  Tensor word_weight;   // [2D]     G_w over concat(word, sentence)
  Tensor word_bias;     // [1]
  Tensor fuse_weight;   // [D x 2D] G_a over concat(patch, frame)
  Tensor fuse_bias;     // [D]
  Tensor patch_weight;  // [2D]     G_b over concat(fused patch, pooled video)
  Tensor patch_bias;    // [1]
  Tensor logit_scale;   // [1]      log of the contrastive logit multiplier

  /// W_tau = 0 and b_tau = ln(e - 1) give tau = 1 + epsilon; G_w and G_b start
  /// at zero; G_a starts as [I | 0] so fused patches equal raw patches.
  static HeadParameters initial(std::size_t dim, std::size_t k_words = 8, std::size_t k_patches = 3) {
    if (dim == 0) throw ConfigError("head dimension must be positive");
    if (k_words == 0 || k_patches == 0) throw ConfigError("K_w and K_p must be positive");
    HeadParameters h;
    h.dim = dim;
    h.k_words = k_words;
    h.k_patches = k_patches;
    h.w_tau = Tensor({dim});
    h.b_tau = Tensor::scalar(std::log(std::numbers::e - 1.0));
    h.word_weight = Tensor({2 * dim});
    h.word_bias = Tensor::scalar(0.0);
    h.fuse_weight = Tensor({dim, 2 * dim});
    for (std::size_t i = 0; i < dim; ++i) h.fuse_weight.at(i, i) = 1.0;
    h.fuse_bias = Tensor({dim});
    h.patch_weight = Tensor({2 * dim});
    h.patch_bias = Tensor::scalar(0.0);
    h.logit_scale = Tensor::scalar(std::log(100.0));
    return h;
  }

  /// Visits every trainable tensor with a stable name, in a fixed order.
  template <class F>
  void for_each(F&& f) {
    f(std::string_view("w_tau"), w_tau);
    f(std::string_view("b_tau"), b_tau);
    f(std::string_view("g_w.weight"), word_weight);
    f(std::string_view("g_w.bias"), word_bias);
    f(std::string_view("g_a.weight"), fuse_weight);
    f(std::string_view("g_a.bias"), fuse_bias);
    f(std::string_view("g_b.weight"), patch_weight);
    f(std::string_view("g_b.bias"), patch_bias);
    f(std::string_view("logit_scale"), logit_scale);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<HeadParameters*>(this)->for_each(
        [&](std::string_view name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  double contrastive_scale() const { return std::exp(logit_scale[0]); }

  void clamp_logit_scale() { logit_scale[0] = std::clamp(logit_scale[0], kMinLogitScale, kMaxLogitScale); }

  /// Startup check against corpus extents.
  void validate(std::size_t corpus_dim, std::size_t patches_per_frame) const {
    if (dim != corpus_dim) {
      throw ConfigError("head dimension " + std::to_string(dim) + " does not match corpus dimension " +
                        std::to_string(corpus_dim));
    }
    if (k_patches > patches_per_frame) {
      throw ConfigError("K_p=" + std::to_string(k_patches) + " exceeds patches per frame M=" +
                        std::to_string(patches_per_frame));
    }
  }

  friend bool operator==(const HeadParameters&, const HeadParameters&) = default;
};

/// Rows index texts, columns index videos.
struct SimilarityBundle {
  Tensor s_video;
  Tensor s_frame;
  Tensor s_patch;
};

/// Text-agnostic representation: the mean over frames.
inline Tensor pool_video(const Tensor& frames) {
  if (frames.empty() || frames.rank() != 2) throw SizeError("pool_video: expected a non-empty T x D frame matrix");
  return mean_axis(frames, 0);
}

/// softplus(W_tau . text + b_tau) + epsilon.
inline double dynamic_temperature(std::span<const double> text, const HeadParameters& heads) {
  return softplus(dot(heads.w_tau.data(), text) + heads.b_tau[0]) + HeadParameters::kEpsilon;
}

/// Attention weights over frames for one sentence.
inline std::vector<double> frame_attention(const Tensor& frames, std::span<const double> text,
                                           const HeadParameters& heads) {
  if (frames.empty()) throw SizeError("aggregate_frames: no frames");
  const std::size_t t_count = frames.extent(0);
  std::vector<double> scores(t_count);
  for (std::size_t t = 0; t < t_count; ++t) scores[t] = dot(frames.slice(t), text);
  return softmax_temp(scores, dynamic_temperature(text, heads));
}

/// Sentence-guided frame aggregation: sum_i a_i frame_i.
inline Tensor aggregate_frames(const Tensor& frames, std::span<const double> text, const HeadParameters& heads) {
  const auto weights = frame_attention(frames, text, heads);
  const std::size_t d = frames.extent(1);
  Tensor out({d});
  for (std::size_t t = 0; t < weights.size(); ++t) {
    auto row = frames.slice(t);
    for (std::size_t k = 0; k < d; ++k) out[k] += weights[t] * row[k];
  }
  return out;
}

struct WordSelection {
  Tensor selected;                   // K' x D
  std::vector<std::size_t> indices;  // ascending, into the word rows
  std::vector<double> scores;        // G_w score of each selected word
};

/// G_w score of one word: weight . concat(word, sentence) + bias.
inline double word_score(std::span<const double> word, std::span<const double> sentence, const HeadParameters& heads) {
  const std::size_t d = heads.dim;
  auto w = heads.word_weight.data();
  return dot(w.first(d), word) + dot(w.subspan(d, d), sentence) + heads.word_bias[0];
}

/// Keeps the min(K_w, valid) highest-scoring valid words.
inline WordSelection select_words(const Tensor& words, std::size_t valid, std::span<const double> sentence,
                                  const HeadParameters& heads) {
  if (valid == 0) throw SizeError("select_words: caption has no valid words");
  if (words.rank() != 2 || valid > words.extent(0)) {
    throw DimensionError("select_words: valid=" + std::to_string(valid) + " exceeds word rows " +
                         shape_string(words.shape()));
  }
  std::vector<double> scores(valid);
  for (std::size_t l = 0; l < valid; ++l) scores[l] = word_score(words.slice(l), sentence, heads);
  WordSelection sel;
  sel.indices = topk_indices(scores, std::min(heads.k_words, valid));
  const std::size_t d = words.extent(1);
  sel.selected = Tensor({sel.indices.size(), d});
  for (std::size_t r = 0; r < sel.indices.size(); ++r) {
    auto src = words.slice(sel.indices[r]);
    std::copy(src.begin(), src.end(), sel.selected.slice(r).begin());
    sel.scores.push_back(scores[sel.indices[r]]);
  }
  return sel;
}

struct PatchSelection {
  Tensor selected;                   // T x K_p x D, fused (G_a) representations
  std::vector<std::size_t> indices;  // T * K_p within-frame patch indices, ascending per frame
  std::vector<double> scores;        // G_b score of each selected patch
};

/// G_a(concat(patch, frame)) written into `out`.
inline void fuse_patch(std::span<const double> patch, std::span<const double> frame, const HeadParameters& heads,
                       std::span<double> out) {
  const std::size_t d = heads.dim;
  for (std::size_t r = 0; r < d; ++r) {
    auto row = heads.fuse_weight.slice(r);
    out[r] = dot(row.first(d), patch) + dot(row.subspan(d, d), frame) + heads.fuse_bias[r];
  }
}

/// G_b score: weight . concat(fused patch, pooled video) + bias.
inline double patch_score(std::span<const double> fused, std::span<const double> video, const HeadParameters& heads) {
  const std::size_t d = heads.dim;
  auto w = heads.patch_weight.data();
  return dot(w.first(d), fused) + dot(w.subspan(d, d), video) + heads.patch_bias[0];
}

/// Per frame, keeps the K_p fused patches with the highest G_b scores.
inline PatchSelection select_patches(const Tensor& patches, const Tensor& frames, std::span<const double> video_feat,
                                     const HeadParameters& heads) {
  if (patches.rank() != 3 || frames.rank() != 2 || patches.extent(0) != frames.extent(0) ||
      patches.extent(2) != frames.extent(1)) {
    throw DimensionError("select_patches: patches " + shape_string(patches.shape()) + " incompatible with frames " +
                         shape_string(frames.shape()));
  }
  const std::size_t t_count = patches.extent(0), m = patches.extent(1), d = patches.extent(2);
  if (heads.k_patches > m) {
    throw ConfigError("K_p=" + std::to_string(heads.k_patches) + " exceeds patches per frame M=" + std::to_string(m));
  }
  PatchSelection sel;
  sel.selected = Tensor({t_count, heads.k_patches, d});
  std::vector<double> fused(m * d);
  std::vector<double> scores(m);
  for (std::size_t t = 0; t < t_count; ++t) {
    auto frame = frames.slice(t);
    for (std::size_t j = 0; j < m; ++j) {
      auto out = std::span<double>(fused).subspan(j * d, d);
      fuse_patch(patches.data().subspan((t * m + j) * d, d), frame, heads, out);
      scores[j] = patch_score(out, video_feat, heads);
    }
    const auto keep = topk_indices(scores, heads.k_patches);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      std::copy_n(fused.begin() + static_cast<std::ptrdiff_t>(keep[r] * d), d,
                  sel.selected.data().begin() + static_cast<std::ptrdiff_t>((t * heads.k_patches + r) * d));
      sel.indices.push_back(keep[r]);
      sel.scores.push_back(scores[keep[r]]);
    }
  }
  return sel;
}

/// Word-guided patch aggregation over all T * K_p selected patches.
inline Tensor aggregate_patches(const PatchSelection& patches, const WordSelection& words, const HeadParameters& heads) {
  const std::size_t d = patches.selected.shape().back();
  const std::size_t n = patches.selected.size() / d;
  const std::size_t k = words.selected.extent(0);
  if (k == 0) throw SizeError("aggregate_patches: no selected words");
  if (words.selected.extent(1) != d) throw DimensionError("aggregate_patches: word and patch widths differ");
  std::vector<double> prior(n, 0.0), gate_scores(k, 0.0);
  if (patches.scores.size() == n) prior = patches.scores;
  if (words.scores.size() == k) gate_scores = words.scores;
  const auto gate = softmax_temp(gate_scores, 1.0);
  const auto pview = patches.selected.data();
  Tensor out({d});
  std::vector<double> logits(n);
  for (std::size_t l = 0; l < k; ++l) {
    auto word = words.selected.slice(l);
    const double tau = dynamic_temperature(word, heads);
    for (std::size_t j = 0; j < n; ++j) logits[j] = dot(word, pview.subspan(j * d, d)) / tau + prior[j];
    const auto a = softmax_temp(logits, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = gate[l] * a[j];
      auto p = pview.subspan(j * d, d);
      for (std::size_t c = 0; c < d; ++c) out[c] += w * p[c];
    }
  }
  return out;
}

/// Unscored form: plain attention and an unweighted word average.
inline Tensor aggregate_patches(const Tensor& selected_patches, const Tensor& selected_words, const HeadParameters& heads) {
  PatchSelection p{selected_patches, {}, {}};
  WordSelection w{selected_words, {}, {}};
  return aggregate_patches(p, w, heads);
}

/// Text-independent per-video state: pooled vector and patch selection.
struct PreparedVideo {
  const Tensor* frames = nullptr;
  Tensor pooled;
  PatchSelection patches;
};

/// Video-independent per-caption state.
struct PreparedText {
  Tensor sentence;
  WordSelection words;
};

inline PreparedVideo prepare_video(const Tensor& frames, const Tensor& patches, const HeadParameters& heads) {
  PreparedVideo v;
  v.frames = &frames;
  v.pooled = pool_video(frames);
  v.patches = select_patches(patches, frames, v.pooled.data(), heads);
  return v;
}

inline PreparedText prepare_text(const Tensor& sentence, const Tensor& words, std::size_t valid,
                                 const HeadParameters& heads) {
  PreparedText t;
  t.sentence = sentence;
  t.words = select_words(words, valid, sentence.data(), heads);
  return t;
}

/// The three video representations for one (text, video) pair.
struct PairRepresentations {
  Tensor video;
  Tensor frame;
  Tensor patch;
};

inline PairRepresentations pair_representations(const PreparedText& text, const PreparedVideo& video,
                                                const HeadParameters& heads) {
  return {video.pooled, aggregate_frames(*video.frames, text.sentence.data(), heads),
          aggregate_patches(video.patches, text.words, heads)};
}

struct LevelScores {
  double video = 0.0;
  double frame = 0.0;
  double patch = 0.0;
};

inline LevelScores pair_scores(const PreparedText& text, const PreparedVideo& video, const HeadParameters& heads) {
  const auto reps = pair_representations(text, video, heads);
  const auto s = text.sentence.data();
  return {cosine(s, reps.video.data()), cosine(s, reps.frame.data()), cosine(s, reps.patch.data())};
}

/// All three similarity matrices for a batch. Rows are computed independently.
inline SimilarityBundle forward_batch(const std::vector<PreparedVideo>& videos, const std::vector<PreparedText>& texts,
                                      const HeadParameters& heads) {
  if (videos.empty() || texts.empty()) throw SizeError("forward_batch: empty batch");
  const std::size_t bt = texts.size(), bv = videos.size();
  SimilarityBundle out{Tensor({bt, bv}), Tensor({bt, bv}), Tensor({bt, bv})};
  parallel_for(bt, [&](std::size_t i) {
    for (std::size_t j = 0; j < bv; ++j) {
      const auto s = pair_scores(texts[i], videos[j], heads);
      out.s_video.at(i, j) = s.video;
      out.s_frame.at(i, j) = s.frame;
      out.s_patch.at(i, j) = s.patch;
    }
  });
  return out;
}

}  // namespace tcma

#endif  // TCMA_ALIGNMENT_HPP
