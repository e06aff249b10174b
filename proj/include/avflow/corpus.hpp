#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avflow/tensor.hpp"

namespace avflow {

// Closure events are lip apertures below this distance (scene units).
constexpr double kClosureThreshold = 1e-2;
// Smile events are face-code channel 1 above this level.
constexpr double kSmileThreshold = 0.3;
constexpr int kTokenDim = 29;
constexpr int kMelDim = 80;
constexpr int kPoseDim = 7;
constexpr int kParticipantDim = 56;
constexpr double kFps = 86.0;

struct Symbol {
  char ch = '?';
  Tensor mel_template;  // [80], non-negative; silence is all zero
  Tensor face_stroke;   // [face_dim]; stroke[0] carries the lip aperture
  float aperture = 0.0f;
  int min_frames = 8;
  int max_frames = 20;
};

struct SymbolLexicon {
  std::vector<Symbol> symbols;  // index 0 is silence
  int64_t face_dim = 16;

  static SymbolLexicon standard(int64_t face_dim);
  int id_for_char(char c) const;  // -1 when unknown
  char char_for_id(int id) const { return symbols[static_cast<size_t>(id)].ch; }
  size_t size() const { return symbols.size(); }
  uint64_t hash() const;
  void validate() const;
  std::string alphabet() const;
};

struct Turn {
  int symbol = 0;
  int64_t frames = 0;
};

struct SmileEvent {
  int64_t frame = 0;
  int64_t duration = 0;
};

struct ReactionLink {
  int64_t participant_frame = 0;
  int64_t offset = 0;  // actor reacts this many frames later
};

struct DyadScript {
  std::vector<Turn> actor;
  std::vector<Turn> participant;
  std::vector<SmileEvent> participant_smiles;
  std::vector<ReactionLink> reactions;
  int64_t total_frames = 0;
};

struct CorpusRecord {
  Tensor tokens;              // [n,29]
  Tensor mel;                 // [n,80]
  Tensor face;                // [n,face_dim]
  Tensor head_pose;           // [n,7]
  Tensor participant_feats;   // [n,56]
  Tensor participant_tokens;  // [n,29]
  std::vector<int32_t> symbol_per_frame;
  std::vector<int64_t> beat_frames;     // acoustic symbol onsets
  std::vector<int64_t> closure_frames;  // aperture below threshold
  std::vector<int64_t> smile_frames;    // smile channel above threshold
  DyadScript script;

  int64_t frames() const { return tokens.defined() ? tokens.dim(0) : 0; }
  void validate(const SymbolLexicon& lex) const;
};

struct CorpusConfig {
  int64_t records = 200;
  double seconds = 20.0;
  int64_t face_dim = 16;
  uint64_t seed = 0;
  int64_t onset_jitter = 2;     // shared audio/visual micro-timing, frames
  int64_t reaction_offset = 4;  // actor smile delay after a participant smile
};

struct Corpus {
  CorpusConfig config;
  SymbolLexicon lexicon;
  std::vector<CorpusRecord> records;
};

DyadScript make_script(const SymbolLexicon& lex, int64_t frames, Rng& rng,
                       int64_t reaction_offset);
DyadScript silence_script(int64_t frames);

CorpusRecord generate_record(const SymbolLexicon& lex, const DyadScript& script,
                             const CorpusConfig& cfg, Rng& rng);
Corpus generate_corpus(const CorpusConfig& cfg);

// expected actor smile-onset frames, one per reaction link
std::vector<int64_t> participant_reaction_oracle(const DyadScript& script);

void write_corpus(const Corpus& corpus, const std::string& path);
Corpus read_corpus(const std::string& path);

struct CorpusHeader {
  uint32_t version = 1;
  int64_t records = 0;
  double fps = kFps;
  int64_t face_dim = 16;
  uint64_t lexicon_hash = 0;
  uint64_t seed = 0;
  double seconds = 0.0;
  int64_t onset_jitter = 2;
  int64_t reaction_offset = 4;
};

// One-record-at-a-time reader; holds a single payload buffer.
class CorpusReader {
 public:
  explicit CorpusReader(const std::string& path);
  ~CorpusReader();
  CorpusReader(const CorpusReader&) = delete;
  CorpusReader& operator=(const CorpusReader&) = delete;

  const CorpusHeader& header() const { return header_; }
  std::optional<CorpusRecord> next();
  size_t buffered_bytes() const { return buffer_capacity_; }

 private:
  struct Impl;
  Impl* impl_ = nullptr;
  CorpusHeader header_;
  size_t buffer_capacity_ = 0;
};

}  // namespace avflow
