// Head training: Adam with a linear warm-up then cosine decay, deterministic
// batching, and checkpoints that resume bit-identically.

#ifndef TCMA_TRAINER_HPP
#define TCMA_TRAINER_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcma/binary_format.hpp"
#include "tcma/objective.hpp"
#include "tcma/random.hpp"
#include "tcma/retrieval.hpp"

namespace tcma {

struct TrainConfig {
  double lr_heads = 1e-4;
  std::size_t batch_size = 64;  // clamped to the corpus size
  std::size_t epochs = 10;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t k_words = 8;
  std::size_t k_patches = 3;
  LossConfig loss{};

  void validate() const {
    if (!(lr_heads > 0.0) || !std::isfinite(lr_heads)) throw ConfigError("lr_heads must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 0.5)) throw ConfigError("warmup_fraction must lie in [0, 0.5]");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
    if (k_words == 0 || k_patches == 0) throw ConfigError("K_w and K_p must be positive");
    loss.validate();
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"lr_heads", c.lr_heads},         {"batch_size", c.batch_size}, {"epochs", c.epochs},
          {"warmup_fraction", c.warmup_fraction}, {"seed", c.seed},      {"beta1", c.beta1},
          {"beta2", c.beta2},               {"eps", c.eps},               {"k_words", c.k_words},
          {"k_patches", c.k_patches},       {"alpha", c.loss.alpha},      {"beta", c.loss.beta},
          {"lambda_video", c.loss.lambda_video}, {"lambda_frame", c.loss.lambda_frame},
          {"lambda_patch", c.loss.lambda_patch}, {"use_logit_scale", c.loss.use_logit_scale}};
}

/// CRC32 of the canonical JSON form; changes whenever any field does.
inline std::string config_hash(const TrainConfig& c) {
  const std::string text = to_json(c).dump();
  return io::crc_hex(io::crc32_of({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
}

inline std::size_t warmup_steps(std::size_t total_steps, double warmup_fraction) {
  return static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
}

/// Linear ramp 0 -> lr over the warm-up steps, then half-cosine decay to 0 at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) throw ContractError("lr_schedule: total_steps must be positive");
  if (step > total_steps) throw ContractError("lr_schedule: step exceeds total_steps");
  const std::size_t warm = warmup_steps(total_steps, cfg.warmup_fraction);
  if (step <= warm && warm > 0) return cfg.lr_heads * static_cast<double>(step) / static_cast<double>(warm);
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return cfg.lr_heads * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Bias-corrected Adam; `step` is the 1-based update count.
inline void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::uint64_t step, double lr,
                        double beta1, double beta2, double eps) {
  require_same_shape(param, grad, "adam_update");
  require_same_shape(param, m, "adam_update");
  require_same_shape(param, v, "adam_update");
  if (step == 0) throw ContractError("adam_update: step is 1-based");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  auto p = param.data();
  auto g = grad.data();
  auto mm = m.data();
  auto vv = v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
    vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
    p[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
  }
}

/// First and second moments per head tensor, in HeadParameters::for_each order.
struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const HeadParameters& heads) {
    AdamState s;
    heads.for_each([&](std::string_view, const Tensor& t) {
      s.m.emplace_back(t.shape());
      s.v.emplace_back(t.shape());
    });
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os.precision(17);
  os << "video(contrastive=" << b.video.contrastive << ", pearson=" << b.video.pearson << ") frame(contrastive="
     << b.frame.contrastive << ", pearson=" << b.frame.pearson << ") patch(contrastive=" << b.patch.contrastive
     << ", pearson=" << b.patch.pearson << ") total=" << b.total;
  return os.str();
}

/// One optimizer step on `batch` at learning rate `lr`. Returns the loss
/// before the update. Throws NonFiniteLoss, leaving heads untouched.
inline LossBreakdown train_step(const Batch& batch, HeadParameters& heads, AdamState& state, const TrainConfig& cfg,
                                double lr) {
  ad::Graph g;
  const auto hv = ad::HeadVars::bind(g, heads);
  const auto nodes = build_objective(g, hv, heads, batch, cfg.loss);
  if (!std::isfinite(nodes.breakdown.total)) {
    throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.step + 1) + ": " + describe(nodes.breakdown));
  }
  g.backward(nodes.loss);
  std::vector<Tensor> grads;
  hv.for_each([&](std::string_view, ad::Var v) { grads.push_back(g.grad(v)); });
  for (const auto& gr : grads) {
    if (!gr.all_finite()) throw NonFiniteLoss("non-finite gradient: " + describe(nodes.breakdown));
  }
  ++state.step;
  std::size_t slot = 0;
  heads.for_each([&](std::string_view, Tensor& p) {
    adam_update(p, grads[slot], state.m[slot], state.v[slot], state.step, lr, cfg.beta1, cfg.beta2, cfg.eps);
    ++slot;
  });
  heads.clamp_logit_scale();
  return nodes.breakdown;
}

/// Mean losses of one epoch plus optional validation recall.
struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;  // optimizer steps completed at the end of the epoch
  double lr = 0.0;         // rate used by the last step of the epoch
  LossBreakdown mean;
  std::optional<double> validation_r1;

  nlohmann::ordered_json to_json() const {
    auto level = [](const LevelLoss& l) {
      return nlohmann::ordered_json{{"contrastive", l.contrastive}, {"pearson", l.pearson}};
    };
    nlohmann::ordered_json j{{"epoch", epoch},         {"step", step},
                             {"lr", lr},               {"loss", mean.total},
                             {"video", level(mean.video)}, {"frame", level(mean.frame)},
                             {"patch", level(mean.patch)}};
    j["validation_r1"] = validation_r1 ? nlohmann::ordered_json(*validation_r1) : nlohmann::ordered_json(nullptr);
    return j;
  }
};

/// Deterministic training loop over a fixed corpus. Batches in epoch e come
/// from a shuffle seeded by (seed, e); video v contributes its caption
/// number e mod (caption count).
class Trainer {
 public:
  Trainer(const Corpus& corpus, TrainConfig cfg, const Corpus* validation = nullptr)
      : corpus_(corpus), cfg_(std::move(cfg)), validation_(validation) {
    cfg_.validate();
    if (corpus_.videos.size() < 2) throw CorpusError("training needs at least two videos");
    heads_ = HeadParameters::initial(corpus_.dims.dim, cfg_.k_words, cfg_.k_patches);
    heads_.validate(corpus_.dims.dim, corpus_.dims.patches_per_frame);
    adam_ = AdamState::zeros_like(heads_);
    captions_ = corpus_.captions_by_video();
    for (std::size_t v = 0; v < captions_.size(); ++v) {
      if (captions_[v].empty()) throw CorpusError("video '" + corpus_.videos[v].id + "' has no caption");
    }
    batch_size_ = std::min(cfg_.batch_size, corpus_.videos.size());
    const std::size_t n = corpus_.videos.size();
    // A trailing singleton batch would have no negatives; it joins the previous batch.
    batches_per_epoch_ = n / batch_size_ + (n % batch_size_ >= 2 ? 1 : 0);
  }

  const HeadParameters& heads() const { return heads_; }
  const AdamState& optimizer() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<EpochRecord>& log() const { return log_; }
  std::uint64_t step() const { return adam_.step; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::uint64_t total_steps() const { return static_cast<std::uint64_t>(cfg_.epochs) * batches_per_epoch_; }
  bool done() const { return step() >= total_steps(); }

  /// Video indices of every batch in epoch `epoch`.
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t epoch) const {
    std::vector<std::size_t> order(corpus_.videos.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = Rng::stream(cfg_.seed, epoch);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out(batches_per_epoch_);
    for (std::size_t i = 0; i < order.size(); ++i) out[std::min(i / batch_size_, batches_per_epoch_ - 1)].push_back(order[i]);
    return out;
  }

  Batch make_epoch_batch(std::size_t epoch, const std::vector<std::size_t>& videos) const {
    std::vector<std::size_t> caps;
    for (std::size_t v : videos) caps.push_back(captions_[v][epoch % captions_[v].size()]);
    return make_batch(corpus_, videos, caps);
  }

  /// Runs at most `max_steps` further steps (all remaining by default).
  void run(std::uint64_t max_steps = std::numeric_limits<std::uint64_t>::max()) {
    const std::uint64_t total = total_steps();
    std::uint64_t budget = max_steps;
    while (!done() && budget > 0) {
      const std::size_t epoch = static_cast<std::size_t>(step() / batches_per_epoch_);
      const std::size_t within = static_cast<std::size_t>(step() % batches_per_epoch_);
      const auto batches = epoch_batches(epoch);
      const double lr = lr_schedule(static_cast<std::size_t>(step() + 1), static_cast<std::size_t>(total), cfg_);
      const auto b = train_step(make_epoch_batch(epoch, batches[within]), heads_, adam_, cfg_, lr);
      accumulate(b);
      last_lr_ = lr;
      --budget;
      if (within + 1 == batches_per_epoch_) close_epoch(epoch);
    }
  }

  void save_checkpoint(const std::filesystem::path& dir, const std::string& run_hash = {}) const;
  static Trainer resume(const Corpus& corpus, const std::filesystem::path& dir, TrainConfig cfg,
                        const Corpus* validation = nullptr, const std::string& run_hash = {});

 private:
  void accumulate(const LossBreakdown& b) {
    auto add = [](LevelLoss& dst, const LevelLoss& src) {
      dst.contrastive += src.contrastive;
      dst.pearson += src.pearson;
    };
    add(acc_.video, b.video);
    add(acc_.frame, b.frame);
    add(acc_.patch, b.patch);
    acc_.total += b.total;
    ++acc_count_;
  }

  void close_epoch(std::size_t epoch) {
    EpochRecord r;
    r.epoch = epoch;
    r.step = step();
    r.lr = last_lr_;
    const double inv = 1.0 / static_cast<double>(acc_count_);
    auto scale = [inv](LevelLoss l) { return LevelLoss{l.contrastive * inv, l.pearson * inv}; };
    r.mean.video = scale(acc_.video);
    r.mean.frame = scale(acc_.frame);
    r.mean.patch = scale(acc_.patch);
    r.mean.total = acc_.total * inv;
    if (validation_ != nullptr) r.validation_r1 = evaluate(*validation_, heads_, Direction::TextToVideo).report.r1;
    log_.push_back(r);
    acc_ = {};
    acc_count_ = 0;
  }

  const Corpus& corpus_;
  TrainConfig cfg_;
  const Corpus* validation_ = nullptr;
  HeadParameters heads_;
  AdamState adam_;
  std::vector<std::vector<std::size_t>> captions_;
  std::size_t batch_size_ = 0;
  std::size_t batches_per_epoch_ = 0;
  LossBreakdown acc_{};
  std::size_t acc_count_ = 0;
  double last_lr_ = 0.0;
  std::vector<EpochRecord> log_;
};

struct FitResult {
  HeadParameters heads;
  std::vector<EpochRecord> log;
};

inline FitResult fit(const Corpus& corpus, const TrainConfig& cfg, const Corpus* validation = nullptr) {
  Trainer t(corpus, cfg, validation);
  t.run();
  return {t.heads(), t.log()};
}

// ---------------------------------------------------------------- checkpoints

namespace detail {

inline nlohmann::ordered_json level_json(const LevelLoss& l) {
  return {{"contrastive", l.contrastive}, {"pearson", l.pearson}};
}

inline LevelLoss level_from_json(const nlohmann::json& j) {
  return {j.at("contrastive").get<double>(), j.at("pearson").get<double>()};
}

inline std::string tensor_file(const std::string& group, std::string_view name) {
  return group + "." + std::string(name) + ".tcma";
}

}  // namespace detail

inline constexpr const char* kCheckpointFile = "checkpoint.json";

/// Writes head and moment tensors (float64 containers) plus checkpoint.json.
inline void Trainer::save_checkpoint(const std::filesystem::path& dir, const std::string& run_hash) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["format"] = "tcma-checkpoint";
  meta["step"] = adam_.step;
  meta["total_steps"] = total_steps();
  meta["config_hash"] = config_hash(cfg_);
  meta["run_hash"] = run_hash;
  meta["dim"] = heads_.dim;
  meta["k_words"] = heads_.k_words;
  meta["k_patches"] = heads_.k_patches;
  meta["config"] = to_json(cfg_);
  auto& files = meta["tensors"] = nlohmann::ordered_json::array();
  std::size_t slot = 0;
  heads_.for_each([&](std::string_view name, const Tensor& t) {
    for (const auto& [group, tensor] : {std::pair<std::string, const Tensor*>{"heads", &t},
                                        {"adam_m", &adam_.m[slot]},
                                        {"adam_v", &adam_.v[slot]}}) {
      const auto file = detail::tensor_file(group, name);
      const auto crc = io::write_embeddings(*tensor, dir / file, io::Precision::Float64);
      files.push_back({{"group", group}, {"name", std::string(name)}, {"file", file}, {"crc32", io::crc_hex(crc)}});
    }
    ++slot;
  });
  auto& acc = meta["epoch_accumulator"];
  acc["count"] = acc_count_;
  acc["last_lr"] = last_lr_;
  acc["video"] = detail::level_json(acc_.video);
  acc["frame"] = detail::level_json(acc_.frame);
  acc["patch"] = detail::level_json(acc_.patch);
  acc["total"] = acc_.total;
  auto& log = meta["log"] = nlohmann::ordered_json::array();
  for (const auto& r : log_) log.push_back(r.to_json());
  const auto tmp = dir / (std::string(kCheckpointFile) + ".tmp");
  io::write_file(tmp, meta.dump(2) + "\n");
  std::filesystem::rename(tmp, dir / kCheckpointFile);
}

namespace detail {

inline nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir) {
  const auto path = dir / kCheckpointFile;
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  try {
    auto meta = nlohmann::json::parse(io::read_file_text(path));
    if (meta.value("format", std::string()) != "tcma-checkpoint") throw FormatError(path.string() + ": not a checkpoint");
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint metadata: " + e.what());
  }
}

/// Loads one float64 tensor listed in the sidecar, checking CRC and shape.
inline Tensor load_checkpoint_tensor(const std::filesystem::path& dir, const nlohmann::json& meta,
                                     const std::string& file, const Shape& shape) {
  const auto path = dir / file;
  const nlohmann::json* entry = nullptr;
  for (const auto& f : meta.at("tensors"))
    if (f.at("file").get<std::string>() == file) entry = &f;
  if (entry == nullptr) throw FormatError((dir / kCheckpointFile).string() + ": missing tensor entry " + file);
  const auto bytes = io::read_file(path);
  if (io::crc_hex(io::crc32_of(bytes)) != entry->at("crc32").get<std::string>()) {
    throw FormatError(path.string() + ": checksum mismatch");
  }
  Tensor t = io::decode_tensor(bytes, path.string(), io::kFloat64Version);
  if (t.shape() != shape) {
    throw FormatError(path.string() + ": shape " + shape_string(t.shape()) + " expected " + shape_string(shape));
  }
  return t;
}

}  // namespace detail

/// Heads stored in a checkpoint directory (no optimizer state).
inline HeadParameters load_heads(const std::filesystem::path& dir) {
  const auto meta = detail::read_checkpoint_meta(dir);
  try {
    auto heads = HeadParameters::initial(meta.at("dim").get<std::size_t>(), meta.at("k_words").get<std::size_t>(),
                                         meta.at("k_patches").get<std::size_t>());
    heads.for_each([&](std::string_view name, Tensor& t) {
      t = detail::load_checkpoint_tensor(dir, meta, detail::tensor_file("heads", name), t.shape());
    });
    return heads;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / kCheckpointFile).string() + ": invalid checkpoint metadata: " + e.what());
  }
}

inline Trainer Trainer::resume(const Corpus& corpus, const std::filesystem::path& dir, TrainConfig cfg,
                               const Corpus* validation, const std::string& run_hash) {
  Trainer t(corpus, std::move(cfg), validation);
  const auto meta = detail::read_checkpoint_meta(dir);
  if (meta.at("config_hash").get<std::string>() != config_hash(t.cfg_)) {
    throw ConfigError("checkpoint was written with a different training configuration");
  }
  if (!run_hash.empty() && meta.value("run_hash", std::string()) != run_hash) {
    throw ConfigError("checkpoint was written by a different run configuration");
  }
  t.heads_ = load_heads(dir);
  std::size_t slot = 0;
  t.heads_.for_each([&](std::string_view name, const Tensor&) {
    const Shape& shape = t.adam_.m[slot].shape();
    t.adam_.m[slot] = detail::load_checkpoint_tensor(dir, meta, detail::tensor_file("adam_m", name), shape);
    t.adam_.v[slot] = detail::load_checkpoint_tensor(dir, meta, detail::tensor_file("adam_v", name), shape);
    ++slot;
  });
  t.adam_.step = meta.at("step").get<std::uint64_t>();
  const auto& acc = meta.at("epoch_accumulator");
  t.acc_count_ = acc.at("count").get<std::size_t>();
  t.last_lr_ = acc.at("last_lr").get<double>();
  t.acc_.video = detail::level_from_json(acc.at("video"));
  t.acc_.frame = detail::level_from_json(acc.at("frame"));
  t.acc_.patch = detail::level_from_json(acc.at("patch"));
  t.acc_.total = acc.at("total").get<double>();
  for (const auto& r : meta.at("log")) {
    EpochRecord e;
    e.epoch = r.at("epoch").get<std::size_t>();
    e.step = r.at("step").get<std::uint64_t>();
    e.lr = r.at("lr").get<double>();
    e.mean.total = r.at("loss").get<double>();
    e.mean.video = detail::level_from_json(r.at("video"));
    e.mean.frame = detail::level_from_json(r.at("frame"));
    e.mean.patch = detail::level_from_json(r.at("patch"));
    if (!r.at("validation_r1").is_null()) e.validation_r1 = r.at("validation_r1").get<double>();
    t.log_.push_back(e);
  }
  return t;
}

}  // namespace tcma

#endif  // TCMA_TRAINER_HPP
