// Corpus of precomputed embeddings: in-memory records, the JSON manifest that
// indexes the binary embedding files, and the planted synthetic generator.
//
// Manifest layout (JSON, keys in this order, two-space indentation):
//
//   {
//     "checksum": "<crc32 hex>",       // CRC-32 of the whole manifest with these
//                                      // 8 hex digits replaced by '0'
//     "version": 1,
//     "dim": D, "frames_per_video": T, "patches_per_frame": M, "max_words": L,
//     "videos": [ { "video_id", "frame_file", "frame_crc32",
//                   "patch_file", "patch_crc32", "category"? } ... ],
//     "captions": [ { "caption_id", "video_id", "sentence_file", "sentence_crc32",
//                     "word_file", "word_crc32", "valid_words", "text"? } ... ]
//   }
//
// File paths are relative to the manifest's directory. Frame files hold T x D,
// patch files T x M x D, sentence files D and word files L x D tensors.

#ifndef TCMA_CORPUS_HPP
#define TCMA_CORPUS_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "tcma/binary_format.hpp"
#include "tcma/error.hpp"
#include "tcma/parallel.hpp"
#include "tcma/random.hpp"
#include "tcma/tensor.hpp"

namespace tcma {

struct CorpusDims {
  std::size_t dim = 64;               // D
  std::size_t frames_per_video = 12;  // T
  std::size_t patches_per_frame = 16; // M
  std::size_t max_words = 32;         // L

  friend bool operator==(const CorpusDims&, const CorpusDims&) = default;
};

struct VideoRecord {
  std::string id;
  Tensor frames;   // T x D
  Tensor patches;  // T x M x D
  std::string category;
};

struct CaptionRecord {
  std::string id;
  std::size_t video = 0;  // index into Corpus::videos
  Tensor sentence;        // D
  Tensor words;           // L x D; rows >= valid_words are padding
  std::size_t valid_words = 1;
  std::string text;
};

struct Corpus {
  CorpusDims dims;
  std::vector<VideoRecord> videos;
  std::vector<CaptionRecord> captions;

  /// Caption indices grouped by video, in caption order.
  std::vector<std::vector<std::size_t>> captions_by_video() const {
    std::vector<std::vector<std::size_t>> out(videos.size());
    for (std::size_t c = 0; c < captions.size(); ++c) out[captions[c].video].push_back(c);
    return out;
  }

  std::optional<std::size_t> find_caption(const std::string& id) const {
    for (std::size_t c = 0; c < captions.size(); ++c)
      if (captions[c].id == id) return c;
    return std::nullopt;
  }

  std::optional<std::size_t> find_video(const std::string& id) const {
    for (std::size_t v = 0; v < videos.size(); ++v)
      if (videos[v].id == id) return v;
    return std::nullopt;
  }

  /// Corpus restricted to the given videos (in the given order) and their captions.
  Corpus subset(const std::vector<std::size_t>& video_indices) const {
    Corpus out;
    out.dims = dims;
    std::map<std::size_t, std::size_t> remap;
    for (std::size_t v : video_indices) {
      remap[v] = out.videos.size();
      out.videos.push_back(videos.at(v));
    }
    for (const auto& c : captions) {
      if (auto it = remap.find(c.video); it != remap.end()) {
        out.captions.push_back(c);
        out.captions.back().video = it->second;
      }
    }
    return out;
  }
};

/// Throws CorpusError unless every record matches the declared extents and
/// every video has at least one caption.
inline void validate_corpus(const Corpus& corpus) {
  const auto& d = corpus.dims;
  if (d.dim == 0 || d.frames_per_video == 0 || d.patches_per_frame == 0 || d.max_words == 0) {
    throw CorpusError("corpus dimensions must all be positive");
  }
  std::set<std::string> ids;
  for (const auto& v : corpus.videos) {
    if (!ids.insert(v.id).second) throw CorpusError("duplicate video_id '" + v.id + "'");
    if (v.frames.shape() != Shape{d.frames_per_video, d.dim}) {
      throw CorpusError("video '" + v.id + "': frames " + shape_string(v.frames.shape()) + ", expected " +
                        shape_string({d.frames_per_video, d.dim}));
    }
    if (v.patches.shape() != Shape{d.frames_per_video, d.patches_per_frame, d.dim}) {
      throw CorpusError("video '" + v.id + "': patches " + shape_string(v.patches.shape()) + ", expected " +
                        shape_string({d.frames_per_video, d.patches_per_frame, d.dim}));
    }
  }
  ids.clear();
  std::vector<bool> has_caption(corpus.videos.size(), false);
  for (const auto& c : corpus.captions) {
    if (!ids.insert(c.id).second) throw CorpusError("duplicate caption_id '" + c.id + "'");
    if (c.video >= corpus.videos.size()) throw CorpusError("caption '" + c.id + "': dangling video reference");
    has_caption[c.video] = true;
    if (c.sentence.shape() != Shape{d.dim}) {
      throw CorpusError("caption '" + c.id + "': sentence " + shape_string(c.sentence.shape()) + ", expected " +
                        shape_string({d.dim}));
    }
    if (c.words.shape() != Shape{d.max_words, d.dim}) {
      throw CorpusError("caption '" + c.id + "': words " + shape_string(c.words.shape()) + ", expected " +
                        shape_string({d.max_words, d.dim}));
    }
    if (c.valid_words < 1 || c.valid_words > d.max_words) {
      throw CorpusError("caption '" + c.id + "': valid_words " + std::to_string(c.valid_words) +
                        " outside 1.." + std::to_string(d.max_words));
    }
  }
  for (std::size_t v = 0; v < corpus.videos.size(); ++v) {
    if (!has_caption[v]) throw CorpusError("video '" + corpus.videos[v].id + "' has no caption");
  }
}

namespace manifest {

inline constexpr const char* kChecksumPrefix = "{\n  \"checksum\": \"";
inline constexpr std::size_t kChecksumDigits = 8;

/// Renders an ordered JSON document whose first key is "checksum" and fills
/// in the self-checksum.
inline std::string seal(nlohmann::ordered_json doc) {
  nlohmann::ordered_json sealed;
  sealed["checksum"] = std::string(kChecksumDigits, '0');
  for (auto& [key, value] : doc.items()) {
    if (key != "checksum") sealed[key] = value;
  }
  std::string text = sealed.dump(2) + "\n";
  const std::size_t at = std::string(kChecksumPrefix).size();
  const auto crc = io::crc32_of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  text.replace(at, kChecksumDigits, io::crc_hex(crc));
  return text;
}

/// Verifies the self-checksum of a sealed manifest. Throws FormatError.
inline void verify(const std::string& text, const std::string& name) {
  const std::string prefix = kChecksumPrefix;
  if (text.size() < prefix.size() + kChecksumDigits + 1 || text.compare(0, prefix.size(), prefix) != 0) {
    throw FormatError(name + ": manifest must begin with a \"checksum\" field");
  }
  const std::string stored = text.substr(prefix.size(), kChecksumDigits);
  for (char ch : stored) {
    if (!((ch >= '0' && ch <= '9') || (ch >= 'a' && ch <= 'f'))) {
      throw FormatError(name + ": malformed manifest checksum '" + stored + "'");
    }
  }
  if (text[prefix.size() + kChecksumDigits] != '"') throw FormatError(name + ": malformed manifest checksum");
  std::string zeroed = text;
  zeroed.replace(prefix.size(), kChecksumDigits, std::string(kChecksumDigits, '0'));
  const auto crc = io::crc32_of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(zeroed.data()), zeroed.size()));
  if (io::crc_hex(crc) != stored) {
    throw FormatError(name + ": manifest checksum mismatch (stored " + stored + ", computed " + io::crc_hex(crc) + ")");
  }
}

}  // namespace manifest

namespace detail {

inline std::string file_stem_safe(const std::string& id) {
  std::string out;
  for (char ch : id) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9') || ch == '-' ||
                    ch == '_' || ch == '.';
    out.push_back(ok ? ch : '_');
  }
  return out;
}

}  // namespace detail

/// Writes every embedding file plus `manifest.json` under `dir`. The manifest
/// is written last, via a temporary file and rename, so an interrupted write
/// never leaves a manifest behind. Returns the manifest path.
inline std::filesystem::path write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  validate_corpus(corpus);
  std::error_code ec;
  fs::create_directories(dir / "videos", ec);
  fs::create_directories(dir / "captions", ec);
  if (ec) throw IoError("cannot create corpus directory " + dir.string() + ": " + ec.message());

  nlohmann::ordered_json doc;
  doc["checksum"] = "";
  doc["version"] = 1;
  doc["dim"] = corpus.dims.dim;
  doc["frames_per_video"] = corpus.dims.frames_per_video;
  doc["patches_per_frame"] = corpus.dims.patches_per_frame;
  doc["max_words"] = corpus.dims.max_words;
  auto videos = nlohmann::ordered_json::array();
  for (const auto& v : corpus.videos) {
    const std::string stem = detail::file_stem_safe(v.id);
    const std::string frame_file = "videos/" + stem + ".frames.tcma";
    const std::string patch_file = "videos/" + stem + ".patches.tcma";
    nlohmann::ordered_json entry;
    entry["video_id"] = v.id;
    entry["frame_file"] = frame_file;
    entry["frame_crc32"] = io::crc_hex(io::write_embeddings(v.frames, dir / frame_file));
    entry["patch_file"] = patch_file;
    entry["patch_crc32"] = io::crc_hex(io::write_embeddings(v.patches, dir / patch_file));
    if (!v.category.empty()) entry["category"] = v.category;
    videos.push_back(std::move(entry));
  }
  doc["videos"] = std::move(videos);
  auto captions = nlohmann::ordered_json::array();
  for (const auto& c : corpus.captions) {
    const std::string stem = detail::file_stem_safe(c.id);
    const std::string sentence_file = "captions/" + stem + ".sentence.tcma";
    const std::string word_file = "captions/" + stem + ".words.tcma";
    nlohmann::ordered_json entry;
    entry["caption_id"] = c.id;
    entry["video_id"] = corpus.videos[c.video].id;
    entry["sentence_file"] = sentence_file;
    entry["sentence_crc32"] = io::crc_hex(io::write_embeddings(c.sentence, dir / sentence_file));
    entry["word_file"] = word_file;
    entry["word_crc32"] = io::crc_hex(io::write_embeddings(c.words, dir / word_file));
    entry["valid_words"] = c.valid_words;
    if (!c.text.empty()) entry["text"] = c.text;
    captions.push_back(std::move(entry));
  }
  doc["captions"] = std::move(captions);

  const fs::path manifest = dir / "manifest.json";
  const fs::path tmp = dir / "manifest.json.tmp";
  io::write_file(tmp, manifest::seal(std::move(doc)));
  fs::rename(tmp, manifest, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot finalize " + manifest.string());
  }
  return manifest;
}

struct LoadOptions {
  /// When false, the manifest self-checksum and per-file CRCs are not checked
  /// (used when ingesting hand-written manifests before sealing them).
  bool verify_checksums = true;
};

/// Loads and validates a corpus. Either the full corpus is returned or an
/// exception names the offending entry; nothing is partially loaded.
inline Corpus load_corpus(const std::filesystem::path& manifest_path, LoadOptions options = {}) {
  namespace fs = std::filesystem;
  using nlohmann::json;
  const std::string name = manifest_path.string();
  if (!fs::exists(manifest_path)) throw CorpusError("manifest not found: " + name);
  const auto raw = io::read_file(manifest_path);
  const std::string text(raw.begin(), raw.end());
  if (options.verify_checksums) manifest::verify(text, name);

  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(name + ": invalid JSON: " + e.what());
  }

  const fs::path base = manifest_path.parent_path();
  Corpus corpus;
  struct PendingFile {
    fs::path path;
    std::string crc;
    std::string owner;
    Shape expected;
    Tensor* target;
  };
  std::vector<PendingFile> pending;
  try {
    if (!doc.is_object()) throw FormatError(name + ": manifest must be a JSON object");
    if (doc.at("version").get<int>() != 1) {
      throw FormatError(name + ": unsupported manifest version " + doc.at("version").dump());
    }
    auto extent = [&](const char* key) {
      const auto& v = doc.at(key);
      if (!v.is_number_integer() || v.get<long long>() <= 0) {
        throw FormatError(name + ": '" + key + "' must be a positive integer");
      }
      return static_cast<std::size_t>(v.get<long long>());
    };
    corpus.dims.dim = extent("dim");
    corpus.dims.frames_per_video = extent("frames_per_video");
    corpus.dims.patches_per_frame = extent("patches_per_frame");
    corpus.dims.max_words = extent("max_words");
    const auto& d = corpus.dims;

    auto string_field = [&](const json& entry, const char* key, const std::string& owner) {
      const auto& v = entry.at(key);
      if (!v.is_string()) throw FormatError(name + ": " + owner + " field '" + key + "' must be a string");
      return v.get<std::string>();
    };
    auto crc_field = [&](const json& entry, const char* key, const std::string& owner) -> std::string {
      if (!options.verify_checksums && !entry.contains(key)) return {};
      return string_field(entry, key, owner);
    };

    const auto& videos = doc.at("videos");
    const auto& captions = doc.at("captions");
    if (!videos.is_array() || !captions.is_array()) {
      throw FormatError(name + ": 'videos' and 'captions' must be arrays");
    }
    corpus.videos.resize(videos.size());
    corpus.captions.resize(captions.size());
    std::map<std::string, std::size_t> video_index;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      const auto& e = videos[i];
      if (!e.is_object()) throw FormatError(name + ": video entry " + std::to_string(i) + " is not an object");
      auto& rec = corpus.videos[i];
      rec.id = string_field(e, "video_id", "video entry " + std::to_string(i));
      const std::string owner = "video '" + rec.id + "'";
      if (!video_index.emplace(rec.id, i).second) throw CorpusError(name + ": duplicate video_id '" + rec.id + "'");
      if (e.contains("category")) rec.category = string_field(e, "category", owner);
      pending.push_back({base / string_field(e, "frame_file", owner), crc_field(e, "frame_crc32", owner),
                         owner + " frame_file", {d.frames_per_video, d.dim}, &rec.frames});
      pending.push_back({base / string_field(e, "patch_file", owner), crc_field(e, "patch_crc32", owner),
                         owner + " patch_file", {d.frames_per_video, d.patches_per_frame, d.dim}, &rec.patches});
    }
    std::set<std::string> caption_ids;
    for (std::size_t i = 0; i < captions.size(); ++i) {
      const auto& e = captions[i];
      if (!e.is_object()) throw FormatError(name + ": caption entry " + std::to_string(i) + " is not an object");
      auto& rec = corpus.captions[i];
      rec.id = string_field(e, "caption_id", "caption entry " + std::to_string(i));
      const std::string owner = "caption '" + rec.id + "'";
      if (!caption_ids.insert(rec.id).second) throw CorpusError(name + ": duplicate caption_id '" + rec.id + "'");
      const std::string vid = string_field(e, "video_id", owner);
      auto it = video_index.find(vid);
      if (it == video_index.end()) {
        throw CorpusError(name + ": " + owner + " references unknown video_id '" + vid + "'");
      }
      rec.video = it->second;
      const auto& valid = e.at("valid_words");
      if (!valid.is_number_integer() || valid.get<long long>() < 1 ||
          valid.get<long long>() > static_cast<long long>(d.max_words)) {
        throw CorpusError(name + ": " + owner + " valid_words must be an integer in 1.." + std::to_string(d.max_words));
      }
      rec.valid_words = static_cast<std::size_t>(valid.get<long long>());
      if (e.contains("text")) rec.text = string_field(e, "text", owner);
      pending.push_back({base / string_field(e, "sentence_file", owner), crc_field(e, "sentence_crc32", owner),
                         owner + " sentence_file", {d.dim}, &rec.sentence});
      pending.push_back({base / string_field(e, "word_file", owner), crc_field(e, "word_crc32", owner),
                         owner + " word_file", {d.max_words, d.dim}, &rec.words});
    }
  } catch (const json::exception& e) {
    throw FormatError(name + ": malformed manifest: " + e.what());
  }

  for (const auto& p : pending) {
    if (!fs::exists(p.path)) throw CorpusError(p.owner + ": file not found: " + p.path.string());
  }
  parallel_for(pending.size(), [&](std::size_t i) {
    const auto& p = pending[i];
    const auto bytes = io::read_file(p.path);
    if (options.verify_checksums) {
      const std::string actual = io::crc_hex(io::crc32_of(bytes));
      if (actual != p.crc) {
        throw FormatError(p.owner + ": checksum mismatch for " + p.path.string() + " (manifest " + p.crc +
                          ", file " + actual + ")");
      }
    }
    Tensor t = io::decode_tensor(bytes, p.path.string(), io::kFloat32Version);
    if (t.shape() != p.expected) {
      throw CorpusError(p.owner + ": " + p.path.string() + " has shape " + shape_string(t.shape()) +
                        ", manifest declares " + shape_string(p.expected));
    }
    *p.target = std::move(t);
  });
  validate_corpus(corpus);
  return corpus;
}

/// Re-writes a manifest with fresh per-file CRCs and self-checksum after a
/// successful unverified load. Embedding files are left untouched.
inline void seal_manifest(const std::filesystem::path& manifest_path) {
  using nlohmann::ordered_json;
  load_corpus(manifest_path, LoadOptions{false});
  const auto raw = io::read_file(manifest_path);
  ordered_json doc = ordered_json::parse(std::string(raw.begin(), raw.end()));
  const auto base = manifest_path.parent_path();
  auto crc_of = [&](const ordered_json& file) { return io::crc_hex(io::crc32_of(io::read_file(base / file.get<std::string>()))); };
  for (auto& v : doc["videos"]) {
    v["frame_crc32"] = crc_of(v["frame_file"]);
    v["patch_crc32"] = crc_of(v["patch_file"]);
  }
  for (auto& c : doc["captions"]) {
    c["sentence_crc32"] = crc_of(c["sentence_file"]);
    c["word_crc32"] = crc_of(c["word_file"]);
  }
  io::write_file(manifest_path, manifest::seal(std::move(doc)));
}

struct SyntheticOptions {
  std::uint64_t seed = 7;
  std::size_t videos = 50;
  std::size_t captions_per_video = 5;
  CorpusDims dims{};
  /// Noise scale sigma. Each noise vector has i.i.d. N(0, sigma^2 / D)
  /// components, so its expected squared norm is sigma^2.
  double noise = 0.3;
  /// Fraction of patches per frame and of valid words per caption drawn with
  /// sigma / 4 (salient); the rest use 4 sigma (distractors).
  double salient_fraction = 0.25;
  /// When false every caption gets its own independent topic (null corpus).
  bool planted = true;
};

namespace detail {

inline std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double sq = 0.0;
  for (double& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double inv = 1.0 / std::max(std::sqrt(sq), kNormFloor);
  for (double& x : v) x *= inv;
  return v;
}

// normalize(topic + N(0, (sigma^2 / D) I)) written into `out`.
inline void noisy_copy(Rng& rng, const std::vector<double>& topic, double sigma, std::span<double> out) {
  const double scale = sigma / std::sqrt(static_cast<double>(topic.size()));
  double sq = 0.0;
  for (std::size_t k = 0; k < topic.size(); ++k) {
    out[k] = topic[k] + scale * rng.normal();
    sq += out[k] * out[k];
  }
  const double inv = 1.0 / std::max(std::sqrt(sq), kNormFloor);
  for (double& x : out) x *= inv;
}

// Marks round(fraction * n) (at least one) positions out of n as salient.
inline std::vector<bool> salient_mask(Rng& rng, std::size_t n, double fraction) {
  const auto count = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < count; ++i) mask[order[i]] = true;
  return mask;
}

}  // namespace detail

/// Builds a planted corpus in memory. Every video has a latent unit topic;
/// frames, patches, sentences and words are noisy unit-normalized copies of it.
/// Deterministic for a fixed options value.
inline Corpus generate_synthetic_corpus(const SyntheticOptions& opt) {
  if (opt.videos == 0 || opt.captions_per_video == 0) throw ConfigError("synthetic corpus needs positive counts");
  const auto& d = opt.dims;
  if (d.dim == 0 || d.frames_per_video == 0 || d.patches_per_frame == 0 || d.max_words == 0) {
    throw ConfigError("synthetic corpus needs positive dimensions");
  }
  if (!(opt.noise >= 0.0) || !std::isfinite(opt.noise)) throw ConfigError("noise must be finite and non-negative");
  if (!(opt.salient_fraction >= 0.0 && opt.salient_fraction <= 1.0)) throw ConfigError("salient_fraction must lie in [0, 1]");
  const double sigma = opt.noise;
  Corpus corpus;
  corpus.dims = d;
  corpus.videos.resize(opt.videos);
  corpus.captions.resize(opt.videos * opt.captions_per_video);
  parallel_for(opt.videos, [&](std::size_t v) {
    Rng rng = Rng::stream(opt.seed, v);
    const auto topic = detail::random_unit(rng, d.dim);
    auto& video = corpus.videos[v];
    char id[32];
    std::snprintf(id, sizeof id, "video%05zu", v);
    video.id = id;
    video.frames = Tensor({d.frames_per_video, d.dim});
    video.patches = Tensor({d.frames_per_video, d.patches_per_frame, d.dim});
    for (std::size_t t = 0; t < d.frames_per_video; ++t) {
      detail::noisy_copy(rng, topic, sigma, video.frames.slice(t));
      const auto mask = detail::salient_mask(rng, d.patches_per_frame, opt.salient_fraction);
      for (std::size_t m = 0; m < d.patches_per_frame; ++m) {
        auto out = video.patches.data().subspan((t * d.patches_per_frame + m) * d.dim, d.dim);
        detail::noisy_copy(rng, topic, mask[m] ? sigma / 4.0 : 4.0 * sigma, out);
      }
    }
    for (std::size_t k = 0; k < opt.captions_per_video; ++k) {
      auto& cap = corpus.captions[v * opt.captions_per_video + k];
      const auto caption_topic = opt.planted ? topic : detail::random_unit(rng, d.dim);
      char cid[48];
      std::snprintf(cid, sizeof cid, "caption%05zu_%zu", v, k);
      cap.id = cid;
      cap.video = v;
      cap.text = std::string("synthetic caption ") + std::to_string(k) + " of " + video.id;
      cap.sentence = Tensor({d.dim});
      detail::noisy_copy(rng, caption_topic, sigma, cap.sentence.data());
      const std::size_t lo = (d.max_words + 1) / 2;
      cap.valid_words = lo + static_cast<std::size_t>(rng.below(d.max_words - lo + 1));
      cap.words = Tensor({d.max_words, d.dim});
      const auto mask = detail::salient_mask(rng, cap.valid_words, opt.salient_fraction);
      for (std::size_t l = 0; l < cap.valid_words; ++l) {
        detail::noisy_copy(rng, caption_topic, mask[l] ? sigma / 4.0 : 4.0 * sigma, cap.words.slice(l));
      }
    }
  });
  return corpus;
}

}  // namespace tcma

#endif  // TCMA_CORPUS_HPP
