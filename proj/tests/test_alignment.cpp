#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "test_support.hpp"

using namespace tcma;
using namespace tcma::testing;

namespace {

// Straight-line oracles written without the library's helpers.
double oracle_tau(std::span<const double> x, const HeadParameters& h) {
  double z = h.b_tau[0];
  for (std::size_t k = 0; k < x.size(); ++k) z += h.w_tau[k] * x[k];
  return std::log1p(std::exp(z)) + 0.001;
}

std::vector<double> oracle_softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
  for (double& v : e) v /= s;
  return e;
}

std::vector<std::size_t> oracle_topk(const std::vector<double>& s, std::size_t k) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return s[a] > s[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

TEST(PoolVideo, Examples) {
  EXPECT_EQ(pool_video(Tensor::matrix({{1, 0}, {0, 1}})), Tensor::vector({0.5, 0.5}));
  const Tensor rep = pool_video(Tensor::matrix({{0.3, -2}, {0.3, -2}, {0.3, -2}}));
  EXPECT_NEAR(rep[0], 0.3, 1e-15);
  EXPECT_NEAR(rep[1], -2.0, 1e-15);
  Rng rng(1);
  const Tensor f = random_tensor(rng, {12, 64});
  const Tensor p = pool_video(f);
  for (std::size_t k = 0; k < 64; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t < 12; ++t) s += f.at(t, k);
    EXPECT_NEAR(p[k], s / 12, 1e-14);
  }
}

TEST(DynamicTemperature, Examples) {
  auto h = HeadParameters::initial(4);
  const std::vector<double> x{0.3, -1, 2, 0.5};
  EXPECT_NEAR(dynamic_temperature(x, h), 1.001, 1e-12);
  h.b_tau[0] = 0.0;
  EXPECT_NEAR(dynamic_temperature(x, h), 0.694147, 1e-6);
  EXPECT_NEAR(dynamic_temperature(x, h), std::log(2.0) + 0.001, 1e-15);
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    auto r = random_heads(rng, 4, 2, 1, 3.0);
    const auto v = random_tensor(rng, {4}, 3.0);
    EXPECT_NEAR(dynamic_temperature(v.data(), r), oracle_tau(v.data(), r), 1e-12);
    EXPECT_GT(dynamic_temperature(v.data(), r), 0.001);
  }
  h.b_tau[0] = -800.0;  // softplus underflows; the floor still holds
  EXPECT_GE(dynamic_temperature(x, h), 0.001);
}

TEST(AggregateFrames, Examples) {
  const auto h = HeadParameters::initial(3);
  const Tensor same = Tensor::matrix({{0.2, 0.4, -1}, {0.2, 0.4, -1}});
  const Tensor out = aggregate_frames(same, std::vector<double>{5, -3, 1}, h);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out[k], same.at(0, k), 1e-15);

  // Sharpest reachable temperature: tau -> epsilon.
  auto sharp = HeadParameters::initial(2);
  sharp.b_tau[0] = -30.0;
  const Tensor ortho = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor f1 = aggregate_frames(ortho, std::vector<double>{1, 0}, sharp);
  EXPECT_NEAR(f1[0], 1.0, 1e-4);
  EXPECT_NEAR(f1[1], 0.0, 1e-4);
}

TEST(AggregateFrames, MatchesCompositionOracleAndIsConvex) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = random_heads(rng, 6, 2, 1);
    const Tensor frames = random_tensor(rng, {5, 6});
    const Tensor text = random_tensor(rng, {6});
    const double tau = oracle_tau(text.data(), h);
    std::vector<double> z(5);
    for (std::size_t t = 0; t < 5; ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k) s += frames.at(t, k) * text[k];
      z[t] = s / tau;
    }
    const auto a = oracle_softmax(z);
    const auto weights = frame_attention(frames, text.data(), h);
    double total = 0.0;
    for (std::size_t t = 0; t < 5; ++t) {
      EXPECT_NEAR(weights[t], a[t], 1e-12);
      EXPECT_GE(weights[t], 0.0);
      total += weights[t];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    const Tensor out = aggregate_frames(frames, text.data(), h);
    for (std::size_t k = 0; k < 6; ++k) {
      double want = 0.0;
      for (std::size_t t = 0; t < 5; ++t) want += a[t] * frames.at(t, k);
      EXPECT_NEAR(out[k], want, 1e-12);
    }
  }
}

TEST(AggregateFrames, ArgmaxInvariantUnderPositiveScaling) {
  Rng rng(4);
  const auto h = HeadParameters::initial(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor frames = random_tensor(rng, {6, 5});
    const Tensor text = random_tensor(rng, {5});
    Tensor scaled = frames;
    for (double& v : scaled.data()) v *= 3.7;
    const auto a = frame_attention(frames, text.data(), h);
    const auto b = frame_attention(scaled, text.data(), h);
    EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(), std::max_element(b.begin(), b.end()) - b.begin());
  }
}

TEST(SelectWords, Examples) {
  auto h = HeadParameters::initial(2, 8, 3);
  const Tensor words = Tensor::matrix({{1, 0}, {0, 1}, {1, 1}, {9, 9}, {9, 9}});
  const auto sel = select_words(words, 3, std::vector<double>{1, 1}, h);
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{0, 1, 2}));
  auto h2 = HeadParameters::initial(2, 2, 3);
  EXPECT_EQ(select_words(words, 5, std::vector<double>{1, 1}, h2).indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(select_words(words, 0, std::vector<double>{1, 1}, h), SizeError);
}

TEST(SelectWords, MatchesSortOracleAndIgnoresPadding) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = random_heads(rng, 4, 3, 1);
    Tensor words = random_tensor(rng, {7, 4});
    const std::size_t valid = 1 + rng.below(7);
    for (std::size_t l = valid; l < 7; ++l)
      for (double& v : words.slice(l)) v = 100.0;  // loud padding must never win
    const Tensor sent = random_tensor(rng, {4});
    std::vector<double> s(valid);
    for (std::size_t l = 0; l < valid; ++l) {
      s[l] = h.word_bias[0];
      for (std::size_t k = 0; k < 4; ++k) s[l] += h.word_weight[k] * words.at(l, k) + h.word_weight[4 + k] * sent[k];
    }
    const auto want = oracle_topk(s, std::min<std::size_t>(3, valid));
    const auto sel = select_words(words, valid, sent.data(), h);
    EXPECT_EQ(sel.indices, want);
    for (std::size_t r = 0; r < want.size(); ++r) {
      EXPECT_NEAR(sel.scores[r], s[want[r]], 1e-12);
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(sel.selected.at(r, k), words.at(want[r], k));
    }
  }
}

TEST(SelectPatches, Examples) {
  Rng rng(6);
  const auto h = HeadParameters::initial(3, 8, 4);
  const Tensor patches = random_tensor(rng, {2, 4, 3});
  const Tensor frames = random_tensor(rng, {2, 3});
  const auto sel = select_patches(patches, frames, pool_video(frames).data(), h);
  EXPECT_EQ(sel.selected, patches);  // M = K_p, identity fusion
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{0, 1, 2, 3, 0, 1, 2, 3}));
  const auto h2 = HeadParameters::initial(3, 8, 2);
  EXPECT_EQ(select_patches(patches, frames, pool_video(frames).data(), h2).indices,
            (std::vector<std::size_t>{0, 1, 0, 1}));
  EXPECT_THROW(select_patches(patches, frames, pool_video(frames).data(), HeadParameters::initial(3, 8, 5)),
               ConfigError);
}

TEST(SelectPatches, MatchesPerFrameSortOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 4, t_count = 3, m = 5;
    const auto h = random_heads(rng, d, 3, 2);
    const Tensor patches = random_tensor(rng, {t_count, m, d});
    const Tensor frames = random_tensor(rng, {t_count, d});
    const Tensor video = pool_video(frames);
    const auto sel = select_patches(patches, frames, video.data(), h);
    for (std::size_t t = 0; t < t_count; ++t) {
      std::vector<std::vector<double>> fused(m, std::vector<double>(d));
      std::vector<double> s(m);
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t r = 0; r < d; ++r) {
          double acc = h.fuse_bias[r];
          for (std::size_t k = 0; k < d; ++k)
            acc += h.fuse_weight.at(r, k) * patches.at(t, j, k) + h.fuse_weight.at(r, d + k) * frames.at(t, k);
          fused[j][r] = acc;
        }
        s[j] = h.patch_bias[0];
        for (std::size_t k = 0; k < d; ++k) s[j] += h.patch_weight[k] * fused[j][k] + h.patch_weight[d + k] * video[k];
      }
      const auto keep = oracle_topk(s, 2);
      for (std::size_t r = 0; r < 2; ++r) {
        EXPECT_EQ(sel.indices[t * 2 + r], keep[r]);
        for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(sel.selected.at(t, r, k), fused[keep[r]][k], 1e-12);
      }
    }
  }
}

TEST(SelectPatches, PermutingPatchesKeepsSelectedSet) {
  Rng rng(8);
  const auto h = random_heads(rng, 4, 3, 2);
  const Tensor patches = random_tensor(rng, {2, 5, 4});
  const Tensor frames = random_tensor(rng, {2, 4});
  const Tensor video = pool_video(frames);
  Tensor shuffled = patches;
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 4; ++k) shuffled.at(t, j, k) = patches.at(t, perm[j], k);
  auto rows = [](const Tensor& sel) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < sel.size() / 4; ++i) {
      const auto s = sel.data().subspan(i * 4, 4);
      out.emplace_back(s.begin(), s.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  EXPECT_EQ(rows(select_patches(patches, frames, video.data(), h).selected),
            rows(select_patches(shuffled, frames, video.data(), h).selected));
}

TEST(AggregatePatches, Examples) {
  const auto h = HeadParameters::initial(3);
  const Tensor one_patch = Tensor({1, 1, 3}, std::vector<double>{0.1, 0.2, 0.3});
  const Tensor one_word = Tensor::matrix({{1, -1, 2}});
  EXPECT_EQ(aggregate_patches(one_patch, one_word, h), Tensor::vector({0.1, 0.2, 0.3}));
  const Tensor same = Tensor({2, 2, 3}, std::vector<double>{1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3});
  const Tensor out = aggregate_patches(same, Tensor::matrix({{5, 0, 0}, {0, -5, 1}}), h);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out[k], k + 1.0, 1e-14);
}

TEST(AggregatePatches, MatchesHandComposition) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = random_heads(rng, 3, 2, 1);
    const Tensor patches = random_tensor(rng, {3, 1, 3});  // N = 3
    const Tensor words = random_tensor(rng, {2, 3});       // K' = 2
    std::vector<double> prior(3), gate_s(2);
    for (double& v : prior) v = rng.normal();
    for (double& v : gate_s) v = rng.normal();
    const auto gate = oracle_softmax(gate_s);
    Tensor want({3});
    for (std::size_t l = 0; l < 2; ++l) {
      const double tau = oracle_tau(words.slice(l), h);
      std::vector<double> z(3);
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += words.at(l, k) * patches[j * 3 + k];
        z[j] = s / tau + prior[j];
      }
      const auto a = oracle_softmax(z);
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t k = 0; k < 3; ++k) want[k] += gate[l] * a[j] * patches[j * 3 + k];
    }
    PatchSelection ps{patches, {0, 0, 0}, prior};
    WordSelection ws{words, {0, 1}, gate_s};
    const Tensor got = aggregate_patches(ps, ws, h);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
  }
}

TEST(ForwardBatch, VideoLevelMatchesTwoLoopOracle) {
  const auto corpus = tiny_corpus(11, 4);
  Rng rng(11);
  const auto h = random_heads(rng, 8, 3, 2);
  std::vector<PreparedVideo> vids;
  std::vector<PreparedText> texts;
  for (const auto& v : corpus.videos) vids.push_back(prepare_video(v.frames, v.patches, h));
  for (const auto& c : corpus.captions) texts.push_back(prepare_text(c.sentence, c.words, c.valid_words, h));
  const auto b = forward_batch(vids, texts, h);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const auto& s = corpus.captions[i].sentence;
      const Tensor p = pool_video(corpus.videos[j].frames);
      double num = 0, ns = 0, np = 0;
      for (std::size_t k = 0; k < 8; ++k) {
        num += s[k] * p[k];
        ns += s[k] * s[k];
        np += p[k] * p[k];
      }
      EXPECT_NEAR(b.s_video.at(i, j), num / std::sqrt(ns * np), 1e-12);
      for (const Tensor* m : {&b.s_video, &b.s_frame, &b.s_patch}) {
        EXPECT_LE(std::abs(m->at(i, j)), 1.0 + 1e-9);
      }
    }
}

TEST(ForwardBatch, DuplicateVideosAndPermutedTexts) {
  const auto corpus = tiny_corpus(12, 3);
  Rng rng(12);
  const auto h = random_heads(rng, 8, 3, 2);
  std::vector<PreparedVideo> vids;
  std::vector<PreparedText> texts, reversed;
  for (std::size_t j : {0, 1, 0}) vids.push_back(prepare_video(corpus.videos[j].frames, corpus.videos[j].patches, h));
  for (const auto& c : corpus.captions) texts.push_back(prepare_text(c.sentence, c.words, c.valid_words, h));
  reversed.assign(texts.rbegin(), texts.rend());
  const auto b = forward_batch(vids, texts, h);
  const auto r = forward_batch(vids, reversed, h);
  for (const auto& [m, mr] : {std::pair{&b.s_video, &r.s_video}, {&b.s_frame, &r.s_frame}, {&b.s_patch, &r.s_patch}}) {
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(m->at(i, 0), m->at(i, 2));
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m->at(i, j), mr->at(2 - i, j));
    }
  }
}

TEST(ForwardBatch, NoiselessPairScoresAtLeastVideoLevel) {
  SyntheticOptions o;
  o.videos = 1;
  o.captions_per_video = 1;
  o.noise = 0.0;
  o.dims = {8, 4, 6, 6};
  const auto c = generate_synthetic_corpus(o);
  const auto h = HeadParameters::initial(8, 3, 2);
  const auto v = prepare_video(c.videos[0].frames, c.videos[0].patches, h);
  const auto t = prepare_text(c.captions[0].sentence, c.captions[0].words, c.captions[0].valid_words, h);
  const auto s = pair_scores(t, v, h);
  const double hand = cosine(c.captions[0].sentence.data(), pool_video(c.videos[0].frames).data());
  EXPECT_NEAR(hand, 1.0, 1e-12);
  EXPECT_GE(s.video, hand - 1e-12);
  EXPECT_GE(s.frame, hand - 1e-12);
  EXPECT_GE(s.patch, hand - 1e-12);
}
