// Two-stage retrieval and recall metrics.
//
// Stage 1 ranks every candidate by the text-agnostic video-level cosine.
// Stage 2 rescores the best N with the text-conditioned frame and patch levels
// and sorts them by the fused score; candidates outside the top N follow in
// stage-1 order.

#ifndef TCMA_RETRIEVAL_HPP
#define TCMA_RETRIEVAL_HPP

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcma/alignment.hpp"
#include "tcma/corpus.hpp"
#include "tcma/error.hpp"
#include "tcma/parallel.hpp"

namespace tcma {

inline constexpr std::size_t kDefaultCandidates = 50;

/// Fusion weights over (video, frame, patch); normalized by their sum.
struct FusionWeights {
  double video = 5.0;
  double frame = 5.0;
  double patch = 1.0;

  double sum() const { return video + frame + patch; }

  void validate() const {
    for (double w : {video, frame, patch}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("fusion weights must be finite and non-negative");
    }
    if (!(sum() > 0.0)) throw ConfigError("fusion weights must not all be zero");
  }

  double fuse(const LevelScores& s) const {
    return (video * s.video + frame * s.frame + patch * s.patch) / sum();
  }

  friend bool operator==(const FusionWeights&, const FusionWeights&) = default;
};

/// Fusion weights for a level setting: video, video+frame or video+frame+patch.
inline FusionWeights fusion_for_levels(const std::string& levels, const FusionWeights& base = {}) {
  if (levels == "video") return {1.0, 0.0, 0.0};
  if (levels == "video+frame") return {base.video, base.frame, 0.0};
  if (levels == "video+frame+patch" || levels == "all") return base;
  throw ConfigError("unknown --levels value '" + levels + "' (expected video, video+frame or video+frame+patch)");
}

/// Text-agnostic side of retrieval, built once per (corpus, heads).
struct VideoIndex {
  const Corpus* corpus = nullptr;
  std::vector<std::string> ids;      // manifest order
  Tensor pooled;                     // [V x D], unit rows
  std::vector<PreparedVideo> videos;  // frames by reference, patch selections by value

  std::size_t size() const { return ids.size(); }
};

inline VideoIndex build_index(const Corpus& corpus, const HeadParameters& heads) {
  if (corpus.videos.empty()) throw CorpusError("build_index: corpus has no videos");
  heads.validate(corpus.dims.dim, corpus.dims.patches_per_frame);
  VideoIndex index;
  index.corpus = &corpus;
  const std::size_t n = corpus.videos.size(), d = corpus.dims.dim;
  index.pooled = Tensor({n, d});
  index.videos.resize(n);
  for (const auto& v : corpus.videos) index.ids.push_back(v.id);
  parallel_for(n, [&](std::size_t j) {
    const auto& v = corpus.videos[j];
    index.videos[j] = prepare_video(v.frames, v.patches, heads);
    const Tensor unit = l2_normalize(index.videos[j].pooled, 0);
    std::copy(unit.data().begin(), unit.data().end(), index.pooled.slice(j).begin());
  });
  return index;
}

/// Every caption prepared for scoring (word selection done once).
inline std::vector<PreparedText> prepare_captions(const Corpus& corpus, const HeadParameters& heads) {
  std::vector<PreparedText> out(corpus.captions.size());
  parallel_for(out.size(), [&](std::size_t c) {
    const auto& cap = corpus.captions[c];
    out[c] = prepare_text(cap.sentence, cap.words, cap.valid_words, heads);
  });
  return out;
}

struct RankedCandidate {
  std::size_t index = 0;  // into corpus videos (t2v) or captions (v2t)
  std::string id;
  double fused = 0.0;
  LevelScores levels;
};

struct RetrievalResult {
  std::string query_id;
  std::size_t candidates = 0;          // effective N after clamping
  std::vector<RankedCandidate> ranked;  // top-N by fused score
  std::vector<std::size_t> order;      // full ranking: top-N then stage-1 tail

  /// 1-based position of a candidate in the full ranking.
  std::size_t rank_of(std::size_t index) const {
    const auto it = std::find(order.begin(), order.end(), index);
    if (it == order.end()) throw ContractError("rank_of: candidate not in ranking");
    return static_cast<std::size_t>(it - order.begin()) + 1;
  }
};

namespace detail {

/// Shared two-stage core. `coarse[i]` is the stage-1 score of candidate i;
/// `fine(i)` returns all three level scores for candidate i.
template <class Fine>
RetrievalResult two_stage(std::string query_id, const std::vector<double>& coarse, std::size_t n_candidates,
                          const FusionWeights& fusion, Fine&& fine, const std::vector<std::string>& ids) {
  if (n_candidates == 0) throw ConfigError("candidate count N must be at least 1");
  fusion.validate();
  const std::size_t n = coarse.size();
  RetrievalResult r;
  r.query_id = std::move(query_id);
  r.candidates = std::min(n_candidates, n);
  r.order.resize(n);
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) { return coarse[a] > coarse[b]; });
  r.ranked.resize(r.candidates);
  for (std::size_t k = 0; k < r.candidates; ++k) {
    auto& c = r.ranked[k];
    c.index = r.order[k];
    c.id = ids[c.index];
    c.levels = fine(c.index);
    c.levels.video = coarse[c.index];
    c.fused = fusion.fuse(c.levels);
  }
  std::sort(r.ranked.begin(), r.ranked.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.fused != b.fused) return a.fused > b.fused;
    return a.index < b.index;
  });
  for (std::size_t k = 0; k < r.candidates; ++k) r.order[k] = r.ranked[k].index;
  return r;
}

inline std::vector<std::string> caption_ids(const Corpus& corpus) {
  std::vector<std::string> ids;
  ids.reserve(corpus.captions.size());
  for (const auto& c : corpus.captions) ids.push_back(c.id);
  return ids;
}

}  // namespace detail

/// Ranks all indexed videos for one prepared caption.
inline RetrievalResult retrieve_t2v(const std::string& query_id, const PreparedText& query, const VideoIndex& index,
                                    const HeadParameters& heads, std::size_t n_candidates = kDefaultCandidates,
                                    const FusionWeights& fusion = {}) {
  const Tensor unit = l2_normalize(query.sentence, 0);
  std::vector<double> coarse(index.size());
  for (std::size_t j = 0; j < coarse.size(); ++j) coarse[j] = dot(unit.data(), index.pooled.slice(j));
  return detail::two_stage(
      query_id, coarse, n_candidates, fusion,
      [&](std::size_t j) { return pair_scores(query, index.videos[j], heads); }, index.ids);
}

/// Ranks all prepared captions for one indexed video.
inline RetrievalResult retrieve_v2t(std::size_t video, const VideoIndex& index, const std::vector<PreparedText>& captions,
                                    const std::vector<std::string>& caption_ids, const HeadParameters& heads,
                                    std::size_t n_candidates = kDefaultCandidates, const FusionWeights& fusion = {}) {
  const auto pooled = index.pooled.slice(video);
  std::vector<double> coarse(captions.size());
  for (std::size_t c = 0; c < coarse.size(); ++c) coarse[c] = cosine(captions[c].sentence.data(), pooled);
  return detail::two_stage(
      index.ids.at(video), coarse, n_candidates, fusion,
      [&](std::size_t c) { return pair_scores(captions[c], index.videos[video], heads); }, caption_ids);
}

enum class Direction { TextToVideo, VideoToText };

inline const char* direction_name(Direction d) { return d == Direction::TextToVideo ? "t2v" : "v2t"; }

struct MetricsReport {
  Direction direction = Direction::TextToVideo;
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;  // percentages
  double median_rank = 0.0;               // lower median
  double mean_rank = 0.0;
  std::size_t queries = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// R@K, lower-median rank and mean rank from 1-based ranks.
inline MetricsReport metrics_from_ranks(const std::vector<std::size_t>& ranks, Direction direction) {
  if (ranks.empty()) throw SizeError("metrics_from_ranks: no queries");
  MetricsReport m;
  m.direction = direction;
  m.queries = ranks.size();
  std::size_t hit1 = 0, hit5 = 0, hit10 = 0;
  double total = 0.0;
  for (std::size_t r : ranks) {
    if (r == 0) throw ContractError("metrics_from_ranks: ranks are 1-based");
    hit1 += r <= 1;
    hit5 += r <= 5;
    hit10 += r <= 10;
    total += static_cast<double>(r);
  }
  const double q = static_cast<double>(ranks.size());
  m.r1 = 100.0 * static_cast<double>(hit1) / q;
  m.r5 = 100.0 * static_cast<double>(hit5) / q;
  m.r10 = 100.0 * static_cast<double>(hit10) / q;
  m.mean_rank = total / q;
  auto sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  m.median_rank = static_cast<double>(sorted[(sorted.size() - 1) / 2]);
  return m;
}

struct EvaluationRun {
  MetricsReport report;
  std::vector<std::size_t> ranks;        // per query, query order
  std::vector<RetrievalResult> results;  // per query, query order
};

struct EvalOptions {
  std::size_t candidates = kDefaultCandidates;
  FusionWeights fusion{};
};

/// t2v: one query per caption, ground truth its video. v2t: one query per
/// video, rank = best rank among its captions.
inline EvaluationRun evaluate(const Corpus& corpus, const HeadParameters& heads, Direction direction,
                              const EvalOptions& opt = {}) {
  if (corpus.videos.empty() || corpus.captions.empty()) throw CorpusError("evaluate: empty split");
  const VideoIndex index = build_index(corpus, heads);
  const auto texts = prepare_captions(corpus, heads);
  EvaluationRun run;
  if (direction == Direction::TextToVideo) {
    run.results.resize(texts.size());
    run.ranks.resize(texts.size());
    parallel_for(texts.size(), [&](std::size_t c) {
      run.results[c] = retrieve_t2v(corpus.captions[c].id, texts[c], index, heads, opt.candidates, opt.fusion);
      run.ranks[c] = run.results[c].rank_of(corpus.captions[c].video);
    });
  } else {
    const auto ids = detail::caption_ids(corpus);
    const auto groups = corpus.captions_by_video();
    for (std::size_t v = 0; v < groups.size(); ++v) {
      if (groups[v].empty()) throw CorpusError("evaluate: video '" + corpus.videos[v].id + "' has no caption");
    }
    run.results.resize(corpus.videos.size());
    run.ranks.resize(corpus.videos.size());
    parallel_for(corpus.videos.size(), [&](std::size_t v) {
      run.results[v] = retrieve_v2t(v, index, texts, ids, heads, opt.candidates, opt.fusion);
      std::size_t best = run.results[v].order.size();
      for (std::size_t k = 0; k < run.results[v].order.size(); ++k) {
        if (corpus.captions[run.results[v].order[k]].video == v) {
          best = k + 1;
          break;
        }
      }
      run.ranks[v] = best;
    });
  }
  run.report = metrics_from_ranks(run.ranks, direction);
  return run;
}

inline nlohmann::ordered_json to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["direction"] = direction_name(m.direction);
  j["R@1"] = m.r1;
  j["R@5"] = m.r5;
  j["R@10"] = m.r10;
  j["MdR"] = m.median_rank;
  j["MnR"] = m.mean_rank;
  j["queries"] = m.queries;
  return j;
}

inline nlohmann::ordered_json to_json(const RetrievalResult& r, std::size_t ground_truth_rank) {
  nlohmann::ordered_json j;
  j["query"] = r.query_id;
  j["rank"] = ground_truth_rank;
  j["candidates"] = r.candidates;
  auto& list = j["ranked"] = nlohmann::ordered_json::array();
  for (const auto& c : r.ranked) {
    list.push_back({{"id", c.id},
                    {"score", c.fused},
                    {"video", c.levels.video},
                    {"frame", c.levels.frame},
                    {"patch", c.levels.patch}});
  }
  return j;
}

/// One JSON object per query, query order.
inline void write_results_jsonl(const EvaluationRun& run, const std::filesystem::path& path) {
  std::string text;
  for (std::size_t q = 0; q < run.results.size(); ++q) text += to_json(run.results[q], run.ranks[q]).dump() + "\n";
  io::write_file(path, text);
}

}  // namespace tcma

#endif  // TCMA_RETRIEVAL_HPP
