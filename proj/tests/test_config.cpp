#include <gtest/gtest.h>

#include "tcma/run_config.hpp"
#include "test_support.hpp"

using namespace tcma;
using namespace tcma::testing;

namespace {

// Mirrors the executable: --config lives on the root, options on a subcommand.
struct Parsed {
  CLI::App root;
  CLI::App* sub = nullptr;
  RunConfig rc;
  const CLI::App& app() const { return *sub; }
};

std::unique_ptr<Parsed> parse(std::vector<std::string> args, unsigned groups) {
  auto p = std::make_unique<Parsed>();
  enable_config_file(p->root);
  p->sub = p->root.add_subcommand("run");
  bind_options(*p->sub, p->rc, groups);
  args.insert(args.begin(), "run");
  std::reverse(args.begin(), args.end());  // CLI11 consumes vectors from the back
  p->root.parse(args);
  return p;
}

}  // namespace

TEST(RunConfig, DefaultsMatchDocumentedValues) {
  const auto p = parse({"--out", "o", "--corpus", "c.json"}, kCorpusInput | kTraining | kScoring | kCheckpointInput);
  const auto& t = p->rc.training();
  EXPECT_EQ(t.lr_heads, 1e-4);
  EXPECT_EQ(t.batch_size, 64u);
  EXPECT_EQ(t.k_words, 8u);
  EXPECT_EQ(t.k_patches, 3u);
  EXPECT_EQ(t.loss.alpha, 0.05);
  EXPECT_EQ(t.loss.beta, 0.001);
  EXPECT_EQ(t.loss.lambda_video, 5.0);
  EXPECT_EQ(t.loss.lambda_patch, 1.0);
  EXPECT_EQ(t.warmup_fraction, 0.1);
  EXPECT_EQ(p->rc.evaluation().candidates, 50u);
}

TEST(RunConfig, FileValuesAndFlagPrecedence) {
  const auto dir = scratch_dir("config_file");
  io::write_file(dir / "run.toml", "corpus = \"from_file.json\"\nlr = 0.005\nepochs = 3\nalpha = 0.2\n");
  const auto p = parse({"--config", (dir / "run.toml").string(), "--out", "o", "--epochs", "7"},
                       kCorpusInput | kTraining);
  EXPECT_EQ(p->rc.corpus, "from_file.json");
  EXPECT_EQ(p->rc.train.lr_heads, 0.005);
  EXPECT_EQ(p->rc.train.epochs, 7u);  // the flag wins
  EXPECT_EQ(p->rc.train.loss.alpha, 0.2);
}

TEST(RunConfig, DumpRoundTrips) {
  const auto first = parse({"--out", "o", "--corpus", "c.json", "--lr", "0.003", "--holdout", "4"},
                           kCorpusInput | kTraining | kSplit);
  const std::string dumped = dump_config(first->app());
  EXPECT_NE(dumped.find("lr=0.003"), std::string::npos) << dumped;
  EXPECT_NE(dumped.find("batch-size=64"), std::string::npos) << dumped;  // defaults included
  const auto dir = scratch_dir("config_dump");
  io::write_file(dir / "dump.toml", dumped);
  const auto second = parse({"--config", (dir / "dump.toml").string()}, kCorpusInput | kTraining | kSplit);
  EXPECT_EQ(second->rc.train, first->rc.train);
  EXPECT_EQ(second->rc.holdout, 4u);
  EXPECT_EQ(dump_config(second->app()), dumped);
}

TEST(RunConfig, RunHashIgnoresLocationAndThreads) {
  const unsigned g = kCorpusInput | kTraining;
  const auto a = parse({"--out", "a", "--corpus", "c.json", "--threads", "1"}, g);
  const auto b = parse({"--out", "b", "--corpus", "c.json", "--threads", "4", "--max-steps", "3"}, g);
  const auto c = parse({"--out", "a", "--corpus", "c.json", "--seed", "8"}, g);
  EXPECT_EQ(run_hash(dump_config(a->app())), run_hash(dump_config(b->app())));
  EXPECT_NE(run_hash(dump_config(a->app())), run_hash(dump_config(c->app())));
}

TEST(RunConfig, RejectsBadValues) {
  EXPECT_THROW(parse({"--out", "o", "--noise", "-1"}, kSynthesis), CLI::ValidationError);
  EXPECT_THROW(parse({"--out", "o", "--corpus", "c", "--levels", "frame"}, kCorpusInput | kScoring),
               CLI::ValidationError);
  EXPECT_THROW(parse({"--corpus", "c"}, kCorpusInput), CLI::RequiredError);
  EXPECT_THROW(parse({"--out", "o", "--corpus", "c", "--checkpoint", "x", "--init-heads"},
                     kCorpusInput | kCheckpointInput),
               CLI::ExcludesError);
  const auto p = parse({"--out", "o", "--corpus", "c", "--warmup-fraction", "0.9"}, kCorpusInput | kTraining);
  EXPECT_THROW(p->rc.training().validate(), ConfigError);
}

TEST(RunConfig, LevelsSelectFusion) {
  const auto p = parse({"--out", "o", "--corpus", "c", "--levels", "video"}, kCorpusInput | kScoring);
  const auto f = p->rc.evaluation().fusion;
  EXPECT_EQ(f.video, 1.0);
  EXPECT_EQ(f.frame, 0.0);
  EXPECT_EQ(f.patch, 0.0);
  const auto q = parse({"--out", "o", "--corpus", "c", "--fusion-patch", "2"}, kCorpusInput | kScoring);
  EXPECT_EQ(q->rc.evaluation().fusion.patch, 2.0);
}

TEST(SplitCorpus, HoldsOutTrailingVideos) {
  const auto corpus = tiny_corpus(1, 6);
  const auto train = split_corpus(corpus, 2, "train");
  const auto held = split_corpus(corpus, 2, "holdout");
  ASSERT_EQ(train.videos.size(), 4u);
  ASSERT_EQ(held.videos.size(), 2u);
  EXPECT_EQ(held.videos[0].id, corpus.videos[4].id);
  EXPECT_EQ(split_corpus(corpus, 2, "all").videos.size(), 6u);
  EXPECT_THROW(split_corpus(corpus, 6, "train"), ConfigError);
  EXPECT_THROW(split_corpus(corpus, 0, "holdout"), ConfigError);
}

TEST(RunConfig, UnknownFileKeyIsAnError) {
  const auto dir = scratch_dir("config_unknown");
  io::write_file(dir / "bad.toml", "corpus = \"c.json\"\nlearning_rate = 0.1\n");
  EXPECT_THROW(parse({"--config", (dir / "bad.toml").string(), "--out", "o"}, kCorpusInput | kTraining),
               CLI::ConfigError);
}
