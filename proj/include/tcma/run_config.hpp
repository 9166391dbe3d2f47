// Run configuration shared by every command-line subcommand.
//
// Values come from a flat TOML-style file (--config) with flags layered on
// top; CLI11 handles both and dumps the merged result, defaults included.

#ifndef TCMA_RUN_CONFIG_HPP
#define TCMA_RUN_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tcma/binary_format.hpp"
#include "tcma/corpus.hpp"
#include "tcma/retrieval.hpp"
#include "tcma/trainer.hpp"

namespace tcma {

struct RunConfig {
  std::string corpus;      // manifest path
  std::string out;         // output directory
  std::string checkpoint;  // checkpoint directory for eval / query
  std::size_t threads = 0;  // 0: TCMA_THREADS or hardware
  std::uint64_t seed = 7;

  // synth
  std::size_t videos = 50;
  std::size_t captions_per_video = 5;
  std::size_t dim = 64;
  std::size_t frames = 12;
  std::size_t patches = 16;
  std::size_t words = 32;
  double noise = 0.3;
  double salient_fraction = 0.25;
  bool unplanted = false;

  // split: the last `holdout` videos in manifest order are held out
  std::size_t holdout = 0;
  std::string subset = "all";  // eval split: all | train | holdout

  TrainConfig train{};
  std::uint64_t max_steps = 0;  // 0: run to completion
  bool resume = false;

  // eval / query
  std::string levels = "video+frame+patch";
  FusionWeights fusion{};
  std::size_t candidates = kDefaultCandidates;
  bool init_heads = false;
  std::string caption;
  std::string sentence_file;
  std::string words_file;
  std::size_t top = 10;

  // ingest
  bool seal = false;

  SyntheticOptions synthetic() const {
    SyntheticOptions o;
    o.seed = seed;
    o.videos = videos;
    o.captions_per_video = captions_per_video;
    o.dims = {dim, frames, patches, words};
    o.noise = noise;
    o.salient_fraction = salient_fraction;
    o.planted = !unplanted;
    return o;
  }

  TrainConfig training() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  EvalOptions evaluation() const { return {candidates, fusion_for_levels(levels, fusion)}; }
};

/// Option groups a subcommand can expose.
enum OptionGroup : unsigned {
  kCorpusInput = 1u << 0,
  kSynthesis = 1u << 1,
  kTraining = 1u << 2,
  kScoring = 1u << 3,
  kCheckpointInput = 1u << 4,
  kQuery = 1u << 5,
  kIngest = 1u << 6,
  kSplit = 1u << 7,
};

/// Reads a flat key = value file and files every key under the subcommand
/// being run, so one file format serves all subcommands.
class SubcommandConfig : public CLI::ConfigTOML {
 public:
  explicit SubcommandConfig(const CLI::App* root) : root_(root) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigTOML::from_config(input);
    const auto active = root_->get_subcommands();
    if (active.empty()) return items;
    for (auto& item : items) {
      if (item.parents.empty()) item.parents.push_back(active.front()->get_name());
    }
    return items;
  }

 private:
  const CLI::App* root_;
};

/// Installs --config on the root app. CLI11 reads config files only at the
/// root, so subcommands must fall through to it. Call before adding subcommands.
inline void enable_config_file(CLI::App& root) {
  root.fallthrough();
  root.allow_config_extras(CLI::config_extras_mode::error);  // typos in a config file are usage errors
  root.config_formatter(std::make_shared<SubcommandConfig>(&root));
  root.set_config("--config", "", "TOML-style key = value file; flags override it");
}

/// Registers the options of `groups` on `app`, bound to fields of `rc`.
inline void bind_options(CLI::App& app, RunConfig& rc, unsigned groups) {
  app.option_defaults()->always_capture_default();
  app.add_option("--threads", rc.threads, "worker threads (0: TCMA_THREADS or hardware)");
  app.add_option("--seed", rc.seed, "random seed");
  if (groups & kIngest) {
    app.add_option("--corpus", rc.corpus, "manifest.json to validate")->required();
    app.add_flag("--seal", rc.seal, "rewrite per-file and manifest checksums before validating");
  } else {
    app.add_option("--out", rc.out, "output directory")->required();
  }
  if (groups & kCorpusInput) app.add_option("--corpus", rc.corpus, "corpus manifest.json")->required();
  if (groups & kSynthesis) {
    app.add_option("--videos", rc.videos, "number of videos")->check(CLI::PositiveNumber);
    app.add_option("--captions-per-video", rc.captions_per_video, "captions per video")->check(CLI::PositiveNumber);
    app.add_option("--dim", rc.dim, "embedding dimension D")->check(CLI::PositiveNumber);
    app.add_option("--frames", rc.frames, "frames per video T")->check(CLI::PositiveNumber);
    app.add_option("--patches", rc.patches, "patches per frame M")->check(CLI::PositiveNumber);
    app.add_option("--words", rc.words, "padded words per caption L")->check(CLI::PositiveNumber);
    app.add_option("--noise", rc.noise, "noise scale sigma")->check(CLI::NonNegativeNumber);
    app.add_option("--salient-fraction", rc.salient_fraction, "salient patch and word fraction")
        ->check(CLI::Range(0.0, 1.0));
    app.add_flag("--unplanted", rc.unplanted, "independent caption topics (null corpus)");
  }
  if (groups & kSplit) app.add_option("--holdout", rc.holdout, "videos held out at the end of the manifest");
  if (groups & (kTraining | kScoring | kQuery)) {
    app.add_option("--k-words", rc.train.k_words, "K_w selected words")->check(CLI::PositiveNumber);
    app.add_option("--k-patches", rc.train.k_patches, "K_p selected patches per frame")->check(CLI::PositiveNumber);
  }
  if (groups & kTraining) {
    auto& t = rc.train;
    app.add_option("--epochs", t.epochs, "training epochs");
    app.add_option("--lr", t.lr_heads, "peak learning rate of the heads");
    app.add_option("--batch-size", t.batch_size, "batch size (clamped to the corpus)");
    app.add_option("--warmup-fraction", t.warmup_fraction, "fraction of steps in linear warm-up");
    app.add_option("--beta1", t.beta1, "Adam beta1");
    app.add_option("--beta2", t.beta2, "Adam beta2");
    app.add_option("--eps", t.eps, "Adam epsilon");
    app.add_option("--alpha", t.loss.alpha, "cross-channel Pearson weight");
    app.add_option("--beta", t.loss.beta, "same-channel Pearson weight");
    app.add_option("--lambda-video", t.loss.lambda_video, "video level loss weight");
    app.add_option("--lambda-frame", t.loss.lambda_frame, "frame level loss weight");
    app.add_option("--lambda-patch", t.loss.lambda_patch, "patch level loss weight");
    app.add_option("--max-steps", rc.max_steps, "stop after this many steps in this invocation (0: all)");
    app.add_flag("--resume", rc.resume, "continue from <out>/checkpoint when present");
  }
  if (groups & (kScoring | kQuery)) {
    app.add_option("--fusion-video", rc.fusion.video, "video level fusion weight");
    app.add_option("--fusion-frame", rc.fusion.frame, "frame level fusion weight");
    app.add_option("--fusion-patch", rc.fusion.patch, "patch level fusion weight");
    app.add_option("--candidates", rc.candidates, "stage-1 candidate count N")->check(CLI::PositiveNumber);
    app.add_option("--levels", rc.levels, "video | video+frame | video+frame+patch")
        ->check(CLI::IsMember({"video", "video+frame", "video+frame+patch"}));
  }
  if (groups & kCheckpointInput) {
    auto* ck = app.add_option("--checkpoint", rc.checkpoint, "checkpoint directory");
    auto* init = app.add_flag("--init-heads", rc.init_heads, "score with untrained initial heads");
    ck->excludes(init);
  }
  if (groups & kScoring) {
    app.add_option("--subset", rc.subset, "split to evaluate")->check(CLI::IsMember({"all", "train", "holdout"}));
  }
  if (groups & kQuery) {
    app.add_option("--caption", rc.caption, "caption id from the corpus");
    app.add_option("--sentence", rc.sentence_file, "sentence embedding file [D]");
    app.add_option("--word-embeddings", rc.words_file, "word embedding file [L x D] for --sentence");
    app.add_option("--top", rc.top, "results to print")->check(CLI::PositiveNumber);
  }
}

/// The merged configuration, defaults expanded, in TOML-style syntax.
inline std::string dump_config(const CLI::App& app) { return app.config_to_str(true, false); }

/// Hash of the settings that influence results; output location, config file
/// name and thread count are excluded.
inline std::string run_hash(const std::string& dumped) {
  std::istringstream in(dumped);
  std::string line, kept;
  while (std::getline(in, line)) {
    const auto key = line.substr(0, line.find('='));
    const auto trimmed = key.substr(0, key.find_last_not_of(' ') + 1);
    if (trimmed == "out" || trimmed == "config" || trimmed == "threads" || trimmed == "resume" ||
        trimmed == "max-steps") {
      continue;
    }
    kept += line + "\n";
  }
  return io::crc_hex(io::crc32_of({reinterpret_cast<const std::uint8_t*>(kept.data()), kept.size()}));
}

/// Corpus restricted to a split; `holdout` trailing videos form the held-out part.
inline Corpus split_corpus(const Corpus& corpus, std::size_t holdout, const std::string& subset) {
  const std::size_t n = corpus.videos.size();
  if (holdout >= n && subset != "all") {
    throw ConfigError("holdout=" + std::to_string(holdout) + " leaves no training videos out of " + std::to_string(n));
  }
  if (subset == "all") return corpus;
  std::vector<std::size_t> pick;
  const std::size_t first = subset == "holdout" ? n - holdout : 0;
  const std::size_t last = subset == "holdout" ? n : n - holdout;
  for (std::size_t v = first; v < last; ++v) pick.push_back(v);
  if (pick.empty()) throw ConfigError("subset '" + subset + "' is empty (holdout=" + std::to_string(holdout) + ")");
  return corpus.subset(pick);
}

}  // namespace tcma

#endif  // TCMA_RUN_CONFIG_HPP
