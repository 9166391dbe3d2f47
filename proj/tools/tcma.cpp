// tcma: synth, ingest, train, eval and query over embedding corpora.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "tcma/run_config.hpp"
#include "tcma/tcma.hpp"

namespace fs = std::filesystem;
using namespace tcma;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Bad invocation detected after parsing (exit 2).
struct UsageError : Error {
  using Error::Error;
};

void apply_threads(const RunConfig& rc) {
  if (rc.threads > 0) set_max_threads(rc.threads);
}

/// Writes the merged configuration before any work starts.
std::string dump_effective_config(const CLI::App& sub, const RunConfig& rc) {
  fs::create_directories(rc.out);
  const std::string text = dump_config(sub);
  io::write_file(fs::path(rc.out) / (sub.get_name() + ".config.toml"), text);
  return text;
}

HeadParameters heads_for_scoring(const RunConfig& rc, const Corpus& corpus) {
  HeadParameters heads;
  if (rc.init_heads) {
    heads = HeadParameters::initial(corpus.dims.dim, rc.train.k_words, rc.train.k_patches);
  } else {
    if (rc.checkpoint.empty()) throw UsageError("--checkpoint or --init-heads is required");
    if (!fs::exists(fs::path(rc.checkpoint) / kCheckpointFile)) {
      throw UsageError("no checkpoint at " + rc.checkpoint);
    }
    heads = load_heads(rc.checkpoint);
  }
  heads.validate(corpus.dims.dim, corpus.dims.patches_per_frame);
  return heads;
}

int cmd_synth(const CLI::App& sub, const RunConfig& rc) {
  dump_effective_config(sub, rc);
  const auto corpus = generate_synthetic_corpus(rc.synthetic());
  const auto manifest = write_corpus(corpus, rc.out);
  std::printf("wrote %zu videos, %zu captions (D=%zu T=%zu M=%zu L=%zu, sigma=%g, seed=%llu) to %s\n",
              corpus.videos.size(), corpus.captions.size(), corpus.dims.dim, corpus.dims.frames_per_video,
              corpus.dims.patches_per_frame, corpus.dims.max_words, rc.noise,
              static_cast<unsigned long long>(rc.seed), manifest.string().c_str());
  return 0;
}

int cmd_ingest(const RunConfig& rc) {
  if (rc.seal) seal_manifest(rc.corpus);
  const auto corpus = load_corpus(rc.corpus);
  std::printf("ok: %zu videos, %zu captions (D=%zu T=%zu M=%zu L=%zu)\n", corpus.videos.size(),
              corpus.captions.size(), corpus.dims.dim, corpus.dims.frames_per_video, corpus.dims.patches_per_frame,
              corpus.dims.max_words);
  return 0;
}

int cmd_train(const CLI::App& sub, const RunConfig& rc) {
  const auto hash = run_hash(dump_effective_config(sub, rc));
  const TrainConfig cfg = rc.training();
  cfg.validate();
  const auto full = load_corpus(rc.corpus);
  const auto train_split = split_corpus(full, rc.holdout, rc.holdout > 0 ? "train" : "all");
  std::optional<Corpus> validation;
  if (rc.holdout > 0) validation = split_corpus(full, rc.holdout, "holdout");
  const Corpus* val = validation ? &*validation : nullptr;

  const fs::path ckpt = fs::path(rc.out) / "checkpoint";
  const bool resuming = rc.resume && fs::exists(ckpt / kCheckpointFile);
  Trainer trainer = resuming ? Trainer::resume(train_split, ckpt, cfg, val, hash) : Trainer(train_split, cfg, val);
  const auto start = trainer.step();
  trainer.run(rc.max_steps > 0 ? rc.max_steps : std::numeric_limits<std::uint64_t>::max());
  trainer.save_checkpoint(ckpt, hash);

  std::string log;
  for (const auto& r : trainer.log()) log += r.to_json().dump() + "\n";
  io::write_file(fs::path(rc.out) / "metrics.jsonl", log);
  for (const auto& r : trainer.log()) {
    std::printf("epoch %3zu  step %5llu  loss %.6f", r.epoch, static_cast<unsigned long long>(r.step), r.mean.total);
    if (r.validation_r1) std::printf("  val R@1 %.2f", *r.validation_r1);
    std::printf("\n");
  }
  std::printf("steps %llu -> %llu of %llu, checkpoint %s\n", static_cast<unsigned long long>(start),
              static_cast<unsigned long long>(trainer.step()), static_cast<unsigned long long>(trainer.total_steps()),
              ckpt.string().c_str());
  return 0;
}

int cmd_eval(const CLI::App& sub, const RunConfig& rc) {
  dump_effective_config(sub, rc);
  const auto full = load_corpus(rc.corpus);
  const auto corpus = split_corpus(full, rc.holdout, rc.subset);
  const auto heads = heads_for_scoring(rc, corpus);
  const auto opts = rc.evaluation();
  opts.fusion.validate();

  nlohmann::ordered_json summary;
  summary["levels"] = rc.levels;
  summary["fusion"] = {opts.fusion.video, opts.fusion.frame, opts.fusion.patch};
  summary["candidates"] = opts.candidates;
  summary["subset"] = rc.subset;
  std::printf("%-5s %8s %8s %8s %8s %8s %8s\n", "dir", "R@1", "R@5", "R@10", "MdR", "MnR", "queries");
  for (Direction d : {Direction::TextToVideo, Direction::VideoToText}) {
    const auto run = evaluate(corpus, heads, d, opts);
    const auto& m = run.report;
    std::printf("%-5s %8.2f %8.2f %8.2f %8.1f %8.2f %8zu\n", direction_name(d), m.r1, m.r5, m.r10, m.median_rank,
                m.mean_rank, m.queries);
    summary[direction_name(d)] = to_json(m);
    write_results_jsonl(run, fs::path(rc.out) / (std::string("results_") + direction_name(d) + ".jsonl"));
  }
  io::write_file(fs::path(rc.out) / "eval_summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_query(const CLI::App& sub, const RunConfig& rc) {
  dump_effective_config(sub, rc);
  if (rc.caption.empty() == rc.sentence_file.empty()) throw UsageError("give exactly one of --caption or --sentence");
  const auto corpus = load_corpus(rc.corpus);
  const auto heads = heads_for_scoring(rc, corpus);
  const auto opts = rc.evaluation();
  opts.fusion.validate();

  PreparedText text;
  std::string query_id;
  if (!rc.caption.empty()) {
    const auto c = corpus.find_caption(rc.caption);
    if (!c) throw UsageError("unknown caption id '" + rc.caption + "'");
    const auto& cap = corpus.captions[*c];
    text = prepare_text(cap.sentence, cap.words, cap.valid_words, heads);
    query_id = cap.id;
  } else {
    const Tensor sentence = io::read_embeddings(rc.sentence_file);
    if (sentence.rank() != 1 || sentence.size() != corpus.dims.dim) {
      throw UsageError("sentence embedding must have shape [" + std::to_string(corpus.dims.dim) + "], got " +
                       shape_string(sentence.shape()));
    }
    Tensor words = rc.words_file.empty() ? sentence.reshaped({1, sentence.size()}) : io::read_embeddings(rc.words_file);
    if (words.rank() != 2 || words.extent(1) != corpus.dims.dim) {
      throw UsageError("word embeddings must have shape [L x " + std::to_string(corpus.dims.dim) + "]");
    }
    text = prepare_text(sentence, words, words.extent(0), heads);
    query_id = fs::path(rc.sentence_file).stem().string();
  }
  const auto index = build_index(corpus, heads);
  const auto result = retrieve_t2v(query_id, text, index, heads, opts.candidates, opts.fusion);
  const std::size_t shown = std::min(rc.top, result.ranked.size());
  std::printf("query %s (N=%zu)\n%4s  %-24s %9s %9s %9s %9s\n", query_id.c_str(), result.candidates, "rank", "video",
              "fused", "video", "frame", "patch");
  nlohmann::ordered_json out{{"query", query_id}, {"candidates", result.candidates}};
  auto& list = out["results"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < shown; ++k) {
    const auto& c = result.ranked[k];
    std::printf("%4zu  %-24s %9.6f %9.6f %9.6f %9.6f\n", k + 1, c.id.c_str(), c.fused, c.levels.video,
                c.levels.frame, c.levels.patch);
    list.push_back({{"rank", k + 1},
                    {"id", c.id},
                    {"score", c.fused},
                    {"video", c.levels.video},
                    {"frame", c.levels.frame},
                    {"patch", c.levels.patch}});
  }
  io::write_file(fs::path(rc.out) / "query.json", out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical text-video retrieval over precomputed embeddings"};
  app.require_subcommand(1);
  enable_config_file(app);
  RunConfig rc;
  auto* synth = app.add_subcommand("synth", "write a synthetic planted corpus");
  bind_options(*synth, rc, kSynthesis);
  auto* ingest = app.add_subcommand("ingest", "validate an external corpus manifest");
  bind_options(*ingest, rc, kIngest);
  auto* train = app.add_subcommand("train", "train the alignment heads");
  bind_options(*train, rc, kCorpusInput | kTraining | kSplit);
  auto* eval = app.add_subcommand("eval", "retrieval metrics in both directions");
  bind_options(*eval, rc, kCorpusInput | kScoring | kCheckpointInput | kSplit);
  auto* query = app.add_subcommand("query", "rank videos for one caption");
  bind_options(*query, rc, kCorpusInput | kQuery | kCheckpointInput);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    apply_threads(rc);
    if (synth->parsed()) return cmd_synth(*synth, rc);
    if (ingest->parsed()) return cmd_ingest(rc);
    if (train->parsed()) return cmd_train(*train, rc);
    if (eval->parsed()) return cmd_eval(*eval, rc);
    if (query->parsed()) return cmd_query(*query, rc);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const NonFiniteLoss& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
