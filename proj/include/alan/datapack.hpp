#pragma once

// On-disk corpus model: feature blobs, the JSON manifest, validation, and a
// synthetic paired-corpus generator with planted cross-modal codes.
//
// Blob layout (all little-endian):
//   bytes 0..3   magic "VARF"
//   bytes 4..7   u32 version (1)
//   bytes 8..11  u32 T (rows)
//   bytes 12..15 u32 d_in (cols)
//   then T*d_in f32 values, row-major
//
// The manifest schema is documented in docs/pack_format.md.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "alan/core.hpp"

namespace alan {

enum class Stream { object, motion, audio, token };
enum class PhraseKind { noun_phrase, verb_phrase };
enum class Split { train, test };
enum class QueryModality { text, audio };

inline const char* to_string(Stream s) {
  switch (s) {
    case Stream::object: return "object";
    case Stream::motion: return "motion";
    case Stream::audio: return "audio";
    case Stream::token: return "token";
  }
  return "?";
}
inline const char* to_string(PhraseKind k) {
  return k == PhraseKind::noun_phrase ? "noun_phrase" : "verb_phrase";
}
inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline const char* to_string(QueryModality m) { return m == QueryModality::text ? "text" : "audio"; }

inline PhraseKind parse_phrase_kind(const std::string& s) {
  if (s == "noun_phrase") return PhraseKind::noun_phrase;
  if (s == "verb_phrase") return PhraseKind::verb_phrase;
  throw ValidationError("unknown phrase kind '" + s + "'");
}
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}
inline QueryModality parse_modality(const std::string& s) {
  if (s == "text") return QueryModality::text;
  if (s == "audio") return QueryModality::audio;
  throw ValidationError("unknown query modality '" + s + "'");
}

/// T clip (or token) features of width d_in for one stream of one item.
struct FeatureSequence {
  std::string item_id;
  Stream stream = Stream::object;
  MatF data;  // T x d_in

  [[nodiscard]] std::size_t length() const { return static_cast<std::size_t>(data.rows()); }
  [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }
};

/// Half-open token range [start, end).
struct PhraseSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  PhraseKind kind = PhraseKind::noun_phrase;

  bool operator==(const PhraseSpan&) const = default;
};

struct Caption {
  std::string text;
  std::vector<int> tokens;
  std::vector<PhraseSpan> phrases;

  bool operator==(const Caption&) const = default;
};

struct PairedItem {
  std::string id;
  FeatureSequence object;
  FeatureSequence motion;
  std::optional<Caption> caption;        // text corpora
  std::optional<FeatureSequence> audio;  // audio corpora
  int label = 0;                         // 1 = contains an anomaly
  std::vector<std::uint8_t> truth_mask;  // per-clip, synthetic data only; empty when absent

  [[nodiscard]] std::size_t length() const { return object.length(); }
};

struct CorpusManifest {
  Split split = Split::train;
  QueryModality modality = QueryModality::text;
  std::vector<std::string> vocabulary;  // index = token id
  std::vector<PairedItem> items;
};

// ---------------------------------------------------------------------------
// Blobs

inline constexpr std::array<char, 4> kBlobMagic{'V', 'A', 'R', 'F'};
inline constexpr std::uint32_t kBlobVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffull) throw ValidationError(std::string("dimension overflow: ") + what);
  return static_cast<std::uint32_t>(v);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::string encode_blob(const MatF& m) {
  std::string out;
  out.reserve(16 + 4 * static_cast<std::size_t>(m.size()));
  out.append(kBlobMagic.data(), 4);
  detail::put_u32(out, kBlobVersion);
  detail::put_u32(out, detail::checked_u32(static_cast<std::size_t>(m.rows()), "T"));
  detail::put_u32(out, detail::checked_u32(static_cast<std::size_t>(m.cols()), "d_in"));
  for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(out, m.data()[i]);
  return out;
}

inline MatF decode_blob(const std::string& bytes, const std::string& where = "blob") {
  if (bytes.size() < 16) throw ShapeError(where + ": shape mismatch (header truncated)");
  if (std::memcmp(bytes.data(), kBlobMagic.data(), 4) != 0) throw ValidationError(where + ": bad magic");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kBlobVersion) throw ValidationError(where + ": unsupported version " + std::to_string(version));
  const std::uint64_t rows = detail::get_u32(bytes.data() + 8);
  const std::uint64_t cols = detail::get_u32(bytes.data() + 12);
  const std::uint64_t expected = 16 + 4 * rows * cols;
  if (bytes.size() != expected) {
    throw ShapeError(where + ": shape mismatch (header says " + std::to_string(rows) + "x" +
                     std::to_string(cols) + ", " + std::to_string(expected) + " bytes; file has " +
                     std::to_string(bytes.size()) + ")");
  }
  MatF m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_f32(bytes.data() + 16 + 4 * i);
  return m;
}

inline void write_blob(const std::filesystem::path& path, const MatF& m) {
  detail::write_file(path, encode_blob(m));
}

inline MatF read_blob(const std::filesystem::path& path) {
  return decode_blob(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Validation

inline void validate_sequence(const FeatureSequence& s, const std::string& what) {
  if (s.data.rows() < 1) throw ValidationError(what + ": empty sequence (T must be >= 1)");
  if (s.data.cols() < 1) throw ValidationError(what + ": zero feature width");
  if (!s.data.allFinite()) throw ValidationError(what + ": non-finite value (NaN/inf) in features");
}

inline void validate_caption(const Caption& c, std::size_t vocab_size, const std::string& where) {
  if (c.tokens.empty()) throw ValidationError(where + ": empty caption");
  for (int tok : c.tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab_size) {
      throw ValidationError(where + ": token id " + std::to_string(tok) + " not in vocabulary");
    }
  }
  std::vector<PhraseSpan> spans = c.phrases;
  std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (s.end <= s.start) throw ValidationError(where + ": empty phrase span");
    if (s.end > c.tokens.size()) {
      throw ValidationError(where + ": phrase span [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                            ") out of bounds for " + std::to_string(c.tokens.size()) + " tokens");
    }
    if (i > 0 && spans[i - 1].end > s.start) throw ValidationError(where + ": overlapping phrase spans");
  }
}

/// Checks every invariant of the loaded types; throws ValidationError on the
/// first violation.
inline void validate(const CorpusManifest& m) {
  std::set<std::string> ids;
  std::optional<std::size_t> obj_dim, mot_dim, aud_dim;
  for (const auto& item : m.items) {
    const std::string where = "item '" + item.id + "'";
    if (item.id.empty()) throw ValidationError("item with empty id");
    if (!ids.insert(item.id).second) throw ValidationError("duplicate item id '" + item.id + "'");
    validate_sequence(item.object, where + " object");
    validate_sequence(item.motion, where + " motion");
    if (item.object.length() != item.motion.length()) {
      throw ValidationError(where + ": object and motion lengths differ");
    }
    if (obj_dim && *obj_dim != item.object.dim()) throw ValidationError(where + ": object width differs from corpus");
    if (mot_dim && *mot_dim != item.motion.dim()) throw ValidationError(where + ": motion width differs from corpus");
    obj_dim = item.object.dim();
    mot_dim = item.motion.dim();
    if (item.label != 0 && item.label != 1) throw ValidationError(where + ": label must be 0 or 1");
    if (!item.truth_mask.empty()) {
      if (item.truth_mask.size() != item.length()) throw ValidationError(where + ": truth mask length != T");
      for (auto v : item.truth_mask) {
        if (v > 1) throw ValidationError(where + ": truth mask must be binary");
      }
    }
    if (m.modality == QueryModality::text) {
      if (!item.caption) throw ValidationError(where + ": text corpus item without caption");
      validate_caption(*item.caption, m.vocabulary.size(), where);
    } else {
      if (!item.audio) throw ValidationError(where + ": audio corpus item without audio");
      validate_sequence(*item.audio, where + " audio");
      if (aud_dim && *aud_dim != item.audio->dim()) throw ValidationError(where + ": audio width differs from corpus");
      aud_dim = item.audio->dim();
    }
  }
}

// ---------------------------------------------------------------------------
// Pack I/O

inline std::string blob_name(const std::string& id, Stream s) {
  return "blobs/" + id + "." + to_string(s) + ".bin";
}

inline nlohmann::json manifest_to_json(const CorpusManifest& m) {
  using nlohmann::json;
  json items = json::array();
  for (const auto& item : m.items) {
    json rec;
    rec["id"] = item.id;
    rec["label"] = item.label;
    rec["T"] = item.length();
    rec["object"] = {{"blob", blob_name(item.id, Stream::object)}, {"d_in", item.object.dim()}};
    rec["motion"] = {{"blob", blob_name(item.id, Stream::motion)}, {"d_in", item.motion.dim()}};
    if (item.caption) {
      json phrases = json::array();
      for (const auto& p : item.caption->phrases) {
        phrases.push_back({{"start", p.start}, {"end", p.end}, {"kind", to_string(p.kind)}});
      }
      rec["caption"] = {{"text", item.caption->text}, {"tokens", item.caption->tokens}, {"phrases", phrases}};
    }
    if (item.audio) {
      rec["audio"] = {{"blob", blob_name(item.id, Stream::audio)},
                      {"T", item.audio->length()},
                      {"d_in", item.audio->dim()}};
    }
    if (!item.truth_mask.empty()) rec["truth_mask"] = item.truth_mask;
    items.push_back(std::move(rec));
  }
  return json{{"format", "alan-pack"},
              {"version", 1},
              {"split", to_string(m.split)},
              {"query_modality", to_string(m.modality)},
              {"vocabulary", m.vocabulary},
              {"items", items}};
}

/// Serializes the manifest to `directory/manifest.json` and each feature
/// sequence to its own blob under `directory/blobs/`.
inline void write_pack(const CorpusManifest& m, const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(directory / "blobs", ec);
  if (ec) throw IoError("cannot create " + (directory / "blobs").string() + ": " + ec.message());
  for (const auto& item : m.items) {
    write_blob(directory / blob_name(item.id, Stream::object), item.object.data);
    write_blob(directory / blob_name(item.id, Stream::motion), item.motion.data);
    if (item.audio) write_blob(directory / blob_name(item.id, Stream::audio), item.audio->data);
  }
  detail::write_file(directory / "manifest.json", manifest_to_json(m).dump(1) + "\n");
}

inline CorpusManifest read_pack(const std::filesystem::path& directory) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(detail::read_file(directory / "manifest.json"));
  } catch (const json::exception& e) {
    throw ValidationError("manifest.json: " + std::string(e.what()));
  }
  CorpusManifest m;
  try {
    if (doc.at("format").get<std::string>() != "alan-pack") throw ValidationError("manifest.json: wrong format tag");
    if (doc.at("version").get<int>() != 1) throw ValidationError("manifest.json: unsupported version");
    m.split = parse_split(doc.at("split").get<std::string>());
    m.modality = parse_modality(doc.at("query_modality").get<std::string>());
    m.vocabulary = doc.at("vocabulary").get<std::vector<std::string>>();
    for (const auto& rec : doc.at("items")) {
      PairedItem item;
      item.id = rec.at("id").get<std::string>();
      item.label = rec.at("label").get<int>();
      const auto T = rec.at("T").get<std::size_t>();
      auto load = [&](const json& ref, Stream s, std::size_t rows) {
        FeatureSequence fs{item.id, s, read_blob(directory / ref.at("blob").get<std::string>())};
        if (fs.length() != rows || fs.dim() != ref.at("d_in").get<std::size_t>()) {
          throw ShapeError("item '" + item.id + "' " + to_string(s) + ": blob shape disagrees with manifest");
        }
        return fs;
      };
      item.object = load(rec.at("object"), Stream::object, T);
      item.motion = load(rec.at("motion"), Stream::motion, T);
      if (rec.contains("caption")) {
        const auto& c = rec.at("caption");
        Caption cap;
        cap.text = c.at("text").get<std::string>();
        cap.tokens = c.at("tokens").get<std::vector<int>>();
        for (const auto& p : c.at("phrases")) {
          cap.phrases.push_back({p.at("start").get<std::size_t>(), p.at("end").get<std::size_t>(),
                                 parse_phrase_kind(p.at("kind").get<std::string>())});
        }
        item.caption = std::move(cap);
      }
      if (rec.contains("audio")) {
        const auto& a = rec.at("audio");
        item.audio = load(a, Stream::audio, a.at("T").get<std::size_t>());
      }
      if (rec.contains("truth_mask")) item.truth_mask = rec.at("truth_mask").get<std::vector<std::uint8_t>>();
      m.items.push_back(std::move(item));
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest.json: " + std::string(e.what()));
  }
  validate(m);
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticConfig {
  std::size_t n_pairs = 32;
  std::size_t T = 32;
  std::size_t d_in = 8;
  std::size_t vocab_size = 64;
  double anomaly_ratio = 0.5;
  std::uint64_t seed = 0;
  QueryModality modality = QueryModality::text;
  Split split = Split::train;
  double noise = 0.3;        // std-dev of background clip noise
  double code_scale = 1.0;   // magnitude of each planted token code
  double anomaly_scale = 1.5;
  std::string id_prefix = "item";
};

/// Fixed sentence frame "a ADJ NOUN VERB in|near the PLACE": four content
/// slots drawn from disjoint vocabulary pools.
inline constexpr std::array<const char*, 4> kFillerWords{"a", "the", "in", "near"};
inline constexpr std::size_t kContentSlots = 4;

inline std::size_t synthetic_pool_size(std::size_t vocab_size) {
  return vocab_size < kFillerWords.size() ? 0 : (vocab_size - kFillerWords.size()) / kContentSlots;
}

/// Minimum vocabulary size that gives every pair a distinct content combo.
inline std::size_t synthetic_min_vocab(std::size_t n_pairs) {
  std::size_t pool = 2;
  auto combos = [](std::size_t p) {
    std::size_t c = 1;
    for (std::size_t i = 0; i < kContentSlots; ++i) c *= p;
    return c;
  };
  while (combos(pool) < n_pairs) ++pool;
  return kFillerWords.size() + kContentSlots * pool;
}

/// The planted codes generated alongside a synthetic corpus. Each content
/// token owns one random d_in vector per stream; an item's code for a stream
/// is the sum of its four content tokens' vectors.
struct SyntheticCodes {
  MatF object;  // vocab x d_in
  MatF motion;
  MatF audio;
  RowVec<float> anomaly_object, anomaly_motion, anomaly_audio;
};

inline CorpusManifest generate_synthetic(const SyntheticConfig& cfg, SyntheticCodes* codes_out = nullptr) {
  if (cfg.n_pairs < 1 || cfg.T < 1 || cfg.d_in < 1 || cfg.vocab_size < 1) {
    throw ValidationError("synthetic config: all counts must be positive");
  }
  if (!(cfg.anomaly_ratio >= 0.0 && cfg.anomaly_ratio <= 1.0)) {
    throw ValidationError("synthetic config: anomaly_ratio must lie in [0,1]");
  }
  const std::size_t needed = synthetic_min_vocab(cfg.n_pairs);
  if (cfg.vocab_size < needed) {
    throw ValidationError("synthetic config: vocab_size " + std::to_string(cfg.vocab_size) + " < " +
                          std::to_string(needed) + " distinct phrase tokens required for " +
                          std::to_string(cfg.n_pairs) + " pairs");
  }
  const std::size_t pool = synthetic_pool_size(cfg.vocab_size);
  const auto d = static_cast<Eigen::Index>(cfg.d_in);
  const auto T = static_cast<Eigen::Index>(cfg.T);

  Rng root(cfg.seed);
  Rng code_rng = root.derive("codes");
  Rng item_rng = root.derive("items");

  CorpusManifest m;
  m.split = cfg.split;
  m.modality = cfg.modality;
  for (const char* w : kFillerWords) m.vocabulary.emplace_back(w);
  const std::array<const char*, kContentSlots> slot_names{"adj", "noun", "verb", "place"};
  for (std::size_t s = 0; s < kContentSlots; ++s) {
    for (std::size_t i = 0; i < pool; ++i) m.vocabulary.push_back(std::string(slot_names[s]) + std::to_string(i));
  }
  while (m.vocabulary.size() < cfg.vocab_size) m.vocabulary.push_back("w" + std::to_string(m.vocabulary.size()));

  auto random_table = [&](Eigen::Index rows) {
    MatF t(rows, d);
    const double scale = cfg.code_scale / std::sqrt(static_cast<double>(cfg.d_in));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(scale * code_rng.normal());
    return t;
  };
  SyntheticCodes codes;
  const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
  codes.object = random_table(V);
  codes.motion = random_table(V);
  codes.audio = random_table(V);
  auto direction = [&] {
    RowVec<float> v(d);
    for (Eigen::Index i = 0; i < d; ++i) v(i) = static_cast<float>(code_rng.normal());
    v *= static_cast<float>(cfg.anomaly_scale / v.norm());
    return v;
  };
  codes.anomaly_object = direction();
  codes.anomaly_motion = direction();
  codes.anomaly_audio = direction();

  // labels: exactly round(ratio * n) abnormal items, positions shuffled
  const auto n_abnormal = static_cast<std::size_t>(std::llround(cfg.anomaly_ratio * static_cast<double>(cfg.n_pairs)));
  std::vector<int> labels(cfg.n_pairs, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_abnormal), 1);
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[item_rng.index(i)]);

  // distinct content combos
  std::set<std::array<std::size_t, kContentSlots>> used;
  const auto min_w = static_cast<std::size_t>(std::max<double>(1.0, std::ceil(0.1 * static_cast<double>(cfg.T))));
  const auto max_w = std::max(min_w, static_cast<std::size_t>(std::floor(0.5 * static_cast<double>(cfg.T))));

  for (std::size_t n = 0; n < cfg.n_pairs; ++n) {
    std::array<std::size_t, kContentSlots> combo{};
    do {
      for (auto& c : combo) c = item_rng.index(pool);
    } while (!used.insert(combo).second);
    std::array<int, kContentSlots> content{};
    for (std::size_t s = 0; s < kContentSlots; ++s) {
      content[s] = static_cast<int>(kFillerWords.size() + s * pool + combo[s]);
    }

    PairedItem item;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%04zu", n);
    item.id = cfg.id_prefix + idbuf;
    item.label = labels[n];

    const std::size_t width = min_w + item_rng.index(max_w - min_w + 1);
    const std::size_t start = item_rng.index(cfg.T - width + 1);

    auto code_of = [&](const MatF& table) {
      RowVec<float> c = RowVec<float>::Zero(d);
      for (int tok : content) c += table.row(tok);
      return c;
    };
    auto make_stream = [&](Stream s, const MatF& table, const RowVec<float>& anomaly) {
      FeatureSequence fs{item.id, s, MatF(T, d)};
      for (Eigen::Index i = 0; i < fs.data.size(); ++i) fs.data.data()[i] = static_cast<float>(cfg.noise * item_rng.normal());
      const RowVec<float> code = code_of(table);
      for (std::size_t t = start; t < start + width; ++t) {
        fs.data.row(static_cast<Eigen::Index>(t)) += code;
        if (item.label == 1) fs.data.row(static_cast<Eigen::Index>(t)) += anomaly;
      }
      return fs;
    };
    item.object = make_stream(Stream::object, codes.object, codes.anomaly_object);
    item.motion = make_stream(Stream::motion, codes.motion, codes.anomaly_motion);
    item.truth_mask.assign(cfg.T, 0);
    if (item.label == 1) std::fill(item.truth_mask.begin() + static_cast<std::ptrdiff_t>(start),
                                   item.truth_mask.begin() + static_cast<std::ptrdiff_t>(start + width), 1);

    if (cfg.modality == QueryModality::text) {
      Caption cap;
      const int prep = item_rng.bernoulli(0.5) ? 2 : 3;  // "in" | "near"
      cap.tokens = {0, content[0], content[1], content[2], prep, 1, content[3]};
      cap.phrases = {{1, 3, PhraseKind::noun_phrase}, {3, 4, PhraseKind::verb_phrase}, {5, 7, PhraseKind::noun_phrase}};
      for (std::size_t i = 0; i < cap.tokens.size(); ++i) {
        if (i) cap.text += ' ';
        cap.text += m.vocabulary[static_cast<std::size_t>(cap.tokens[i])];
      }
      item.caption = std::move(cap);
    } else {
      item.audio = make_stream(Stream::audio, codes.audio, codes.anomaly_audio);
    }
    m.items.push_back(std::move(item));
  }
  if (codes_out) *codes_out = std::move(codes);
  return m;
}

}  // namespace alan
