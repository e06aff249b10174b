#include "avflow/corpus.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "avflow/quat.hpp"

namespace avflow {

namespace {

constexpr uint64_t kLexiconSeed = 0x1e71c0ull;
constexpr char kMagic[4] = {'A', 'V', 'F', 'C'};

double smile_envelope(int64_t i, const std::vector<SmileEvent>& events) {
  double v = 0.0;
  for (const SmileEvent& e : events) {
    if (i < e.frame || i >= e.frame + e.duration) continue;
    double up = static_cast<double>(i - e.frame + 1) / 4.0;
    double down = static_cast<double>(e.frame + e.duration - i) / 4.0;
    v = std::max(v, std::min({1.0, up, down}));
  }
  return v;
}

Quat quat_mul(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quat quat_exp(double wx, double wy, double wz) {
  double angle = std::sqrt(wx * wx + wy * wy + wz * wz);
  if (angle < 1e-12) return {1.0, 0.0, 0.0, 0.0};
  double s = std::sin(angle * 0.5) / angle;
  return {std::cos(angle * 0.5), wx * s, wy * s, wz * s};
}

struct Segment {
  int symbol = 0;
  int64_t nominal_start = 0;
  int64_t actual_start = 0;
  int64_t actual_end = 0;
};

std::vector<Turn> expand_clip(const std::vector<Turn>& turns, int64_t n) {
  std::vector<Turn> out;
  int64_t cur = 0;
  for (const Turn& t : turns) {
    if (cur >= n) break;
    int64_t take = std::min(t.frames, n - cur);
    out.push_back({t.symbol, take});
    cur += take;
  }
  if (cur < n) out.push_back({0, n - cur});
  return out;
}

// acoustic segments with shared audio-visual onset jitter
std::vector<Segment> jittered_segments(const std::vector<Turn>& turns, int64_t n,
                                       int64_t jitter, Rng& rng) {
  std::vector<Segment> segs;
  int64_t cur = 0;
  for (const Turn& t : turns) {
    Segment s;
    s.symbol = t.symbol;
    s.nominal_start = cur;
    s.actual_start = cur;
    if (cur > 0 && jitter > 0) {
      int64_t d = rng.uniform_int(-jitter, jitter);
      s.actual_start = std::clamp<int64_t>(cur + d, 1, n - 1);
    }
    segs.push_back(s);
    cur += t.frames;
  }
  for (size_t k = 0; k < segs.size(); ++k)
    segs[k].actual_end = (k + 1 < segs.size()) ? segs[k + 1].actual_start : n;
  return segs;
}

void fill_tokens(Tensor& tokens, const std::vector<int32_t>& sym_per_frame, Rng& rng) {
  int64_t n = tokens.dim(0);
  for (int64_t i = 0; i < n; ++i) {
    float* row = tokens.mutable_data() + i * kTokenDim;
    for (int64_t c = 0; c < kTokenDim; ++c) row[c] = static_cast<float>(rng.normal() * 0.3);
    row[sym_per_frame[static_cast<size_t>(i)]] = 5.0f;
  }
}

template <typename T>
void put_raw(std::vector<uint8_t>& buf, const T* data, size_t count) {
  size_t off = buf.size();
  buf.resize(off + count * sizeof(T));
  std::memcpy(buf.data() + off, data, count * sizeof(T));
}

template <typename T>
void get_raw(const std::vector<uint8_t>& buf, size_t& off, T* data, size_t count) {
  if (off + count * sizeof(T) > buf.size())
    fail(ErrKind::CorruptRecord, "record payload truncated");
  std::memcpy(data, buf.data() + off, count * sizeof(T));
  off += count * sizeof(T);
}

void put_i64_list(std::vector<uint8_t>& buf, const std::vector<int64_t>& v) {
  uint32_t cnt = static_cast<uint32_t>(v.size());
  put_raw(buf, &cnt, 1);
  put_raw(buf, v.data(), v.size());
}

std::vector<int64_t> get_i64_list(const std::vector<uint8_t>& buf, size_t& off) {
  uint32_t cnt = 0;
  get_raw(buf, off, &cnt, 1);
  std::vector<int64_t> v(cnt);
  get_raw(buf, off, v.data(), cnt);
  return v;
}

std::vector<uint8_t> encode_record(const CorpusRecord& r) {
  std::vector<uint8_t> buf;
  uint32_t n = static_cast<uint32_t>(r.frames());
  put_raw(buf, &n, 1);
  uint32_t face_dim = static_cast<uint32_t>(r.face.dim(1));
  put_raw(buf, &face_dim, 1);
  put_raw(buf, r.tokens.data(), static_cast<size_t>(r.tokens.numel()));
  put_raw(buf, r.mel.data(), static_cast<size_t>(r.mel.numel()));
  put_raw(buf, r.face.data(), static_cast<size_t>(r.face.numel()));
  put_raw(buf, r.head_pose.data(), static_cast<size_t>(r.head_pose.numel()));
  put_raw(buf, r.participant_feats.data(), static_cast<size_t>(r.participant_feats.numel()));
  put_raw(buf, r.participant_tokens.data(), static_cast<size_t>(r.participant_tokens.numel()));
  put_raw(buf, r.symbol_per_frame.data(), r.symbol_per_frame.size());
  put_i64_list(buf, r.beat_frames);
  put_i64_list(buf, r.closure_frames);
  put_i64_list(buf, r.smile_frames);
  auto put_turns = [&](const std::vector<Turn>& turns) {
    uint32_t cnt = static_cast<uint32_t>(turns.size());
    put_raw(buf, &cnt, 1);
    for (const Turn& t : turns) {
      int32_t s = t.symbol;
      put_raw(buf, &s, 1);
      put_raw(buf, &t.frames, 1);
    }
  };
  put_turns(r.script.actor);
  put_turns(r.script.participant);
  uint32_t cnt = static_cast<uint32_t>(r.script.participant_smiles.size());
  put_raw(buf, &cnt, 1);
  for (const SmileEvent& e : r.script.participant_smiles) {
    put_raw(buf, &e.frame, 1);
    put_raw(buf, &e.duration, 1);
  }
  cnt = static_cast<uint32_t>(r.script.reactions.size());
  put_raw(buf, &cnt, 1);
  for (const ReactionLink& l : r.script.reactions) {
    put_raw(buf, &l.participant_frame, 1);
    put_raw(buf, &l.offset, 1);
  }
  put_raw(buf, &r.script.total_frames, 1);
  return buf;
}

CorpusRecord decode_record(const std::vector<uint8_t>& buf) {
  CorpusRecord r;
  size_t off = 0;
  uint32_t n = 0, face_dim = 0;
  get_raw(buf, off, &n, 1);
  get_raw(buf, off, &face_dim, 1);
  r.tokens = Tensor({n, kTokenDim});
  r.mel = Tensor({n, kMelDim});
  r.face = Tensor({n, face_dim});
  r.head_pose = Tensor({n, kPoseDim});
  r.participant_feats = Tensor({n, kParticipantDim});
  r.participant_tokens = Tensor({n, kTokenDim});
  get_raw(buf, off, r.tokens.mutable_data(), static_cast<size_t>(r.tokens.numel()));
  get_raw(buf, off, r.mel.mutable_data(), static_cast<size_t>(r.mel.numel()));
  get_raw(buf, off, r.face.mutable_data(), static_cast<size_t>(r.face.numel()));
  get_raw(buf, off, r.head_pose.mutable_data(), static_cast<size_t>(r.head_pose.numel()));
  get_raw(buf, off, r.participant_feats.mutable_data(),
          static_cast<size_t>(r.participant_feats.numel()));
  get_raw(buf, off, r.participant_tokens.mutable_data(),
          static_cast<size_t>(r.participant_tokens.numel()));
  r.symbol_per_frame.resize(n);
  get_raw(buf, off, r.symbol_per_frame.data(), n);
  r.beat_frames = get_i64_list(buf, off);
  r.closure_frames = get_i64_list(buf, off);
  r.smile_frames = get_i64_list(buf, off);
  auto get_turns = [&]() {
    uint32_t cnt = 0;
    get_raw(buf, off, &cnt, 1);
    std::vector<Turn> turns(cnt);
    for (Turn& t : turns) {
      int32_t s = 0;
      get_raw(buf, off, &s, 1);
      get_raw(buf, off, &t.frames, 1);
      t.symbol = s;
    }
    return turns;
  };
  r.script.actor = get_turns();
  r.script.participant = get_turns();
  uint32_t cnt = 0;
  get_raw(buf, off, &cnt, 1);
  r.script.participant_smiles.resize(cnt);
  for (SmileEvent& e : r.script.participant_smiles) {
    get_raw(buf, off, &e.frame, 1);
    get_raw(buf, off, &e.duration, 1);
  }
  get_raw(buf, off, &cnt, 1);
  r.script.reactions.resize(cnt);
  for (ReactionLink& l : r.script.reactions) {
    get_raw(buf, off, &l.participant_frame, 1);
    get_raw(buf, off, &l.offset, 1);
  }
  get_raw(buf, off, &r.script.total_frames, 1);
  return r;
}

}  // namespace

SymbolLexicon SymbolLexicon::standard(int64_t face_dim) {
  if (face_dim < 2) fail(ErrKind::BadLexicon, "face dim must be >= 2");
  SymbolLexicon lex;
  lex.face_dim = face_dim;
  Rng rng(kLexiconSeed);
  const char* chars = "_abcdefghijk";
  const int count = 12;
  for (int s = 0; s < count; ++s) {
    Symbol sym;
    sym.ch = chars[s];
    sym.mel_template = Tensor::zeros({kMelDim});
    sym.face_stroke = Tensor::zeros({face_dim});
    sym.min_frames = 8;
    sym.max_frames = 20;
    if (s == 0) {
      sym.aperture = 0.0f;  // silence: zero-energy template, closed lips
    } else {
      // formant-like bumps on a small broadband floor
      for (int64_t c = 0; c < kMelDim; ++c) sym.mel_template.at(c) = 0.02f;
      int bumps = 2 + static_cast<int>(rng.uniform_int(0, 1));
      for (int b = 0; b < bumps; ++b) {
        double center = rng.uniform(6.0, 74.0);
        double width = rng.uniform(2.5, 7.0);
        double amp = rng.uniform(0.8, 2.0);
        for (int64_t c = 0; c < kMelDim; ++c) {
          double d = (static_cast<double>(c) - center) / width;
          sym.mel_template.at(c) += static_cast<float>(amp * std::exp(-0.5 * d * d));
        }
      }
      // symbol 4 is the bilabial stand-in with closed lips mid-speech
      sym.aperture = (s == 4) ? 0.0f : static_cast<float>(rng.uniform(0.45, 1.0));
      sym.face_stroke.at(0) = sym.aperture;
      for (int64_t dcol = 2; dcol < face_dim; ++dcol)
        sym.face_stroke.at(dcol) = static_cast<float>(rng.normal() * 0.4);
    }
    lex.symbols.push_back(std::move(sym));
  }
  lex.validate();
  return lex;
}

int SymbolLexicon::id_for_char(char c) const {
  for (size_t s = 0; s < symbols.size(); ++s)
    if (symbols[s].ch == c) return static_cast<int>(s);
  return -1;
}

std::string SymbolLexicon::alphabet() const {
  std::string a;
  for (const Symbol& s : symbols) a.push_back(s.ch);
  return a;
}

uint64_t SymbolLexicon::hash() const {
  // FNV-1a over the defining floats
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, size_t len) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    for (size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const Symbol& s : symbols) {
    mix(&s.ch, 1);
    mix(&s.aperture, sizeof(float));
    mix(s.mel_template.data(), static_cast<size_t>(s.mel_template.numel()) * 4);
    mix(s.face_stroke.data(), static_cast<size_t>(s.face_stroke.numel()) * 4);
  }
  return h;
}

void SymbolLexicon::validate() const {
  if (symbols.empty()) fail(ErrKind::BadLexicon, "empty lexicon");
  const Symbol& sil = symbols[0];
  if (sil.aperture != 0.0f) fail(ErrKind::BadLexicon, "silence must have closed lips");
  for (int64_t c = 0; c < sil.mel_template.numel(); ++c)
    if (sil.mel_template.at(c) != 0.0f)
      fail(ErrKind::BadLexicon, "silence template must carry zero energy");
  for (const Symbol& s : symbols) {
    if (s.min_frames < 1 || s.max_frames < s.min_frames)
      fail(ErrKind::BadLexicon, "bad duration range");
    if (s.face_stroke.numel() != face_dim) fail(ErrKind::BadLexicon, "stroke width");
  }
}

DyadScript make_script(const SymbolLexicon& lex, int64_t frames, Rng& rng,
                       int64_t reaction_offset) {
  DyadScript script;
  script.total_frames = frames;
  auto fill_turns = [&](std::vector<Turn>& turns) {
    int64_t cur = 0;
    while (cur < frames) {
      int64_t burst = rng.uniform_int(3, 9);
      for (int64_t b = 0; b < burst && cur < frames; ++b) {
        int sym = static_cast<int>(rng.uniform_int(1, static_cast<int64_t>(lex.size()) - 1));
        const Symbol& sd = lex.symbols[static_cast<size_t>(sym)];
        int64_t len = rng.uniform_int(sd.min_frames, sd.max_frames);
        turns.push_back({sym, len});
        cur += len;
      }
      int64_t pause = rng.uniform_int(35, 95);
      turns.push_back({0, pause});
      cur += pause;
    }
    turns = expand_clip(turns, frames);
  };
  fill_turns(script.actor);
  fill_turns(script.participant);

  int64_t want = std::max<int64_t>(1, frames / 344);  // roughly one smile per 4 s
  std::vector<SmileEvent> events;
  for (int64_t k = 0; k < want * 2 && static_cast<int64_t>(events.size()) < want; ++k) {
    int64_t dur = rng.uniform_int(45, 70);
    if (frames - dur - reaction_offset - 1 < 1) break;
    int64_t f = rng.uniform_int(0, frames - dur - reaction_offset - 1);
    bool clash = false;
    for (const SmileEvent& e : events)
      if (std::abs(e.frame - f) < 90) clash = true;
    if (!clash) events.push_back({f, dur});
  }
  std::sort(events.begin(), events.end(),
            [](const SmileEvent& a, const SmileEvent& b) { return a.frame < b.frame; });
  script.participant_smiles = events;
  for (const SmileEvent& e : events) script.reactions.push_back({e.frame, reaction_offset});
  return script;
}

DyadScript silence_script(int64_t frames) {
  DyadScript s;
  s.total_frames = frames;
  s.actor.push_back({0, frames});
  s.participant.push_back({0, frames});
  return s;
}

std::vector<int64_t> participant_reaction_oracle(const DyadScript& script) {
  std::vector<int64_t> out;
  out.reserve(script.reactions.size());
  for (const ReactionLink& l : script.reactions)
    out.push_back(l.participant_frame + l.offset);
  return out;
}

CorpusRecord generate_record(const SymbolLexicon& lex, const DyadScript& script,
                             const CorpusConfig& cfg, Rng& rng) {
  lex.validate();
  int64_t n = script.total_frames;
  if (n < 1) fail(ErrKind::BadLexicon, "empty script");
  int64_t fd = lex.face_dim;

  CorpusRecord r;
  r.script = script;
  r.tokens = Tensor({n, kTokenDim});
  r.mel = Tensor({n, kMelDim});
  r.face = Tensor({n, fd});
  r.head_pose = Tensor({n, kPoseDim});
  r.participant_feats = Tensor({n, kParticipantDim});
  r.participant_tokens = Tensor({n, kTokenDim});

  // nominal per-frame symbols drive the tokens
  r.symbol_per_frame.reserve(static_cast<size_t>(n));
  for (const Turn& t : script.actor)
    for (int64_t k = 0; k < t.frames; ++k)
      r.symbol_per_frame.push_back(static_cast<int32_t>(t.symbol));
  r.symbol_per_frame.resize(static_cast<size_t>(n), 0);
  fill_tokens(r.tokens, r.symbol_per_frame, rng);

  std::vector<int32_t> p_sym;
  p_sym.reserve(static_cast<size_t>(n));
  for (const Turn& t : script.participant)
    for (int64_t k = 0; k < t.frames; ++k) p_sym.push_back(static_cast<int32_t>(t.symbol));
  p_sym.resize(static_cast<size_t>(n), 0);
  fill_tokens(r.participant_tokens, p_sym, rng);

  // the acoustic timeline shares one onset jitter across audio, face and head
  std::vector<Segment> segs = jittered_segments(script.actor, n, cfg.onset_jitter, rng);
  std::vector<int64_t> onsets;
  std::vector<int32_t> acoustic_sym(static_cast<size_t>(n), 0);
  std::vector<int64_t> seg_onset(static_cast<size_t>(n), 0);
  std::vector<int32_t> prev_sym_of(static_cast<size_t>(n), 0);
  {
    int prev = 0;
    for (const Segment& s : segs) {
      for (int64_t i = s.actual_start; i < s.actual_end; ++i) {
        acoustic_sym[static_cast<size_t>(i)] = static_cast<int32_t>(s.symbol);
        seg_onset[static_cast<size_t>(i)] = s.actual_start;
        prev_sym_of[static_cast<size_t>(i)] = static_cast<int32_t>(prev);
      }
      if (s.symbol != 0 && s.actual_end > s.actual_start) onsets.push_back(s.actual_start);
      prev = s.symbol;
    }
  }
  r.beat_frames = onsets;

  // motion gate dips just before each onset so kinetic velocity bottoms out
  std::vector<double> gate(static_cast<size_t>(n), 1.0);
  for (int64_t p : onsets) {
    for (int64_t i = std::max<int64_t>(0, p - 6); i < std::min(n, p + 5); ++i) {
      double d = static_cast<double>(i - (p - 1)) / 1.5;
      gate[static_cast<size_t>(i)] -= std::exp(-0.5 * d * d);
    }
  }
  for (double& g : gate) g = std::max(0.05, g);

  double lfo_phase = rng.uniform(0.0, 6.283185307179586);
  for (int64_t i = 0; i < n; ++i) {
    int sym = acoustic_sym[static_cast<size_t>(i)];
    const Symbol& sd = lex.symbols[static_cast<size_t>(sym)];
    double env = 0.0;
    if (sym != 0) {
      double tau = static_cast<double>(i - seg_onset[static_cast<size_t>(i)]);
      env = 0.55 + 0.45 * std::exp(-tau / 12.0);
    }
    double lfo = 1.0 + 0.08 * std::sin(2.0 * 3.141592653589793 * i / 150.0 + lfo_phase);
    float* mel_row = r.mel.mutable_data() + i * kMelDim;
    for (int64_t c = 0; c < kMelDim; ++c) {
      double v = sd.mel_template.at(c) * env * lfo + 0.004 * std::abs(rng.normal());
      mel_row[c] = static_cast<float>(v);
    }
  }

  // face codes: aperture on dim 0 (3-frame crossfade at boundaries), smile on
  // dim 1 as a delayed copy of the participant smile, strokes + gated wobble
  // on the rest
  std::vector<double> wob_freq(static_cast<size_t>(fd), 0.0), wob_phase(static_cast<size_t>(fd));
  for (int64_t d = 2; d < fd; ++d) {
    wob_freq[static_cast<size_t>(d)] = rng.uniform(0.15, 0.5);
    wob_phase[static_cast<size_t>(d)] = rng.uniform(0.0, 6.283185307179586);
  }
  int64_t offset = script.reactions.empty() ? cfg.reaction_offset : script.reactions[0].offset;
  for (int64_t i = 0; i < n; ++i) {
    int sym = acoustic_sym[static_cast<size_t>(i)];
    const Symbol& sd = lex.symbols[static_cast<size_t>(sym)];
    int prev = prev_sym_of[static_cast<size_t>(i)];
    double tau = static_cast<double>(i - seg_onset[static_cast<size_t>(i)]);
    double blend = std::min(1.0, (tau + 1.0) / 3.0);
    double aperture = blend * sd.aperture +
                      (1.0 - blend) * lex.symbols[static_cast<size_t>(prev)].aperture;
    double ef = (sym == 0) ? 0.0 : 0.6 + 0.4 * std::exp(-tau / 10.0);
    float* face_row = r.face.mutable_data() + i * fd;
    face_row[0] = static_cast<float>(aperture);
    int64_t src = i - offset;
    face_row[1] = static_cast<float>(
        src >= 0 ? smile_envelope(src, script.participant_smiles) : 0.0);
    for (int64_t d = 2; d < fd; ++d) {
      double wob = 0.12 * std::sin(wob_freq[static_cast<size_t>(d)] * i +
                                   wob_phase[static_cast<size_t>(d)]) *
                   gate[static_cast<size_t>(i)];
      face_row[d] = static_cast<float>(sd.face_stroke.at(d) * ef + wob);
    }
  }

  // head: gated Ornstein-Uhlenbeck angular drift plus a pitch nod after each
  // onset, integrated on the quaternion
  {
    Quat q{1, 0, 0, 0};
    double drift[3] = {0, 0, 0};
    double trans[3] = {0, 0, 0};
    double tvel[3] = {0, 0, 0};
    for (int64_t i = 0; i < n; ++i) {
      float* row = r.head_pose.mutable_data() + i * kPoseDim;
      Quat qc = q.canonical();
      row[0] = static_cast<float>(qc.w);
      row[1] = static_cast<float>(qc.x);
      row[2] = static_cast<float>(qc.y);
      row[3] = static_cast<float>(qc.z);
      for (int k = 0; k < 3; ++k) row[4 + k] = static_cast<float>(trans[k]);

      for (int k = 0; k < 3; ++k)
        drift[k] = drift[k] * 0.92 + 0.004 * rng.normal();
      double nod = 0.0;
      for (int64_t p : onsets) {
        int64_t tau = i - p - 1;
        if (tau >= 0 && tau < 6) nod += 0.05 * std::sin(3.141592653589793 * (tau + 0.5) / 6.0);
      }
      double g = gate[static_cast<size_t>(i)];
      Quat dq = quat_exp(drift[0] * g + nod, drift[1] * g, drift[2] * g);
      q = quat_mul(q, dq).normalized();
      for (int k = 0; k < 3; ++k) {
        tvel[k] = tvel[k] * 0.9 + 0.002 * rng.normal();
        trans[k] += tvel[k] * g;
      }
    }
  }

  // participant features from their own symbol track through a fixed map
  {
    Rng map_rng(kLexiconSeed ^ 0x5e1full);
    std::vector<float> expr_map(static_cast<size_t>(49 * lex.size()));
    for (auto& v : expr_map) v = static_cast<float>(map_rng.normal() * 0.3);
    std::vector<float> rot_map(static_cast<size_t>(3 * lex.size()));
    for (auto& v : rot_map) v = static_cast<float>(map_rng.normal() * 0.1);

    std::vector<Segment> psegs = jittered_segments(script.participant, n, 0, rng);
    std::vector<int64_t> ponset(static_cast<size_t>(n), 0);
    for (const Segment& s : psegs)
      for (int64_t i = s.actual_start; i < s.actual_end; ++i)
        ponset[static_cast<size_t>(i)] = s.actual_start;

    for (int64_t i = 0; i < n; ++i) {
      int sym = p_sym[static_cast<size_t>(i)];
      const Symbol& sd = lex.symbols[static_cast<size_t>(sym)];
      double tau = static_cast<double>(i - ponset[static_cast<size_t>(i)]);
      double ef = (sym == 0) ? 0.0 : 0.6 + 0.4 * std::exp(-tau / 10.0);
      double smile = smile_envelope(i, script.participant_smiles);
      float* row = r.participant_feats.mutable_data() + i * kParticipantDim;
      row[0] = static_cast<float>(smile);
      for (int64_t e = 1; e < 50; ++e)
        row[e] = static_cast<float>(expr_map[static_cast<size_t>((e - 1) * lex.size() + sym)] * ef);
      row[50] = static_cast<float>(sd.aperture * ef);  // jaw follows the aperture
      row[51] = static_cast<float>(0.1 * ef);
      row[52] = 0.0f;
      for (int64_t k = 0; k < 3; ++k)
        row[53 + k] =
            static_cast<float>(rot_map[static_cast<size_t>(k * lex.size() + sym)] * ef);
    }
  }

  for (int64_t i = 0; i < n; ++i) {
    if (r.face.at(i * fd + 0) < kClosureThreshold) r.closure_frames.push_back(i);
    if (r.face.at(i * fd + 1) > kSmileThreshold) r.smile_frames.push_back(i);
  }
  r.validate(lex);
  return r;
}

void CorpusRecord::validate(const SymbolLexicon& lex) const {
  int64_t n = frames();
  if (mel.dim(0) != n || face.dim(0) != n || head_pose.dim(0) != n ||
      participant_feats.dim(0) != n || participant_tokens.dim(0) != n ||
      static_cast<int64_t>(symbol_per_frame.size()) != n)
    fail(ErrKind::LengthMismatch, "record streams disagree on frame count");
  if (face.dim(1) != lex.face_dim) fail(ErrKind::DimensionMismatch, "face width");
  // annotations must match the signals they describe
  size_t ci = 0, si = 0;
  for (int64_t i = 0; i < n; ++i) {
    bool closed = face.at(i * face.dim(1) + 0) < kClosureThreshold;
    bool listed = ci < closure_frames.size() && closure_frames[ci] == i;
    if (closed != listed) fail(ErrKind::CorruptRecord, "closure annotation mismatch");
    if (listed) ++ci;
    bool smiling = face.at(i * face.dim(1) + 1) > kSmileThreshold;
    bool slisted = si < smile_frames.size() && smile_frames[si] == i;
    if (smiling != slisted) fail(ErrKind::CorruptRecord, "smile annotation mismatch");
    if (slisted) ++si;
  }
  for (int64_t b : beat_frames)
    if (b < 0 || b >= n) fail(ErrKind::CorruptRecord, "beat frame out of range");
}

Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.records < 1 || cfg.seconds <= 0.0) fail(ErrKind::ConfigInvalid, "corpus size");
  Corpus corpus;
  corpus.config = cfg;
  corpus.lexicon = SymbolLexicon::standard(cfg.face_dim);
  int64_t n = static_cast<int64_t>(std::llround(cfg.seconds * kFps));
  Rng root(cfg.seed);
  for (int64_t rec = 0; rec < cfg.records; ++rec) {
    Rng rng = root.fork(static_cast<uint64_t>(rec));
    DyadScript script = make_script(corpus.lexicon, n, rng, cfg.reaction_offset);
    corpus.records.push_back(generate_record(corpus.lexicon, script, cfg, rng));
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrKind::Io, "cannot open " + path + " for write");
  os.write(kMagic, 4);
  nlohmann::json hdr = {{"version", 1},
                        {"records", corpus.records.size()},
                        {"fps", kFps},
                        {"face_dim", corpus.config.face_dim},
                        {"token_dim", kTokenDim},
                        {"mel_dim", kMelDim},
                        {"lexicon_hash", corpus.lexicon.hash()},
                        {"seed", corpus.config.seed},
                        {"seconds", corpus.config.seconds},
                        {"onset_jitter", corpus.config.onset_jitter},
                        {"reaction_offset", corpus.config.reaction_offset}};
  std::string hs = hdr.dump();
  uint32_t hlen = static_cast<uint32_t>(hs.size());
  os.write(reinterpret_cast<const char*>(&hlen), 4);
  os.write(hs.data(), hlen);
  for (const CorpusRecord& r : corpus.records) {
    std::vector<uint8_t> payload = encode_record(r);
    uint64_t plen = payload.size();
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
    os.write(reinterpret_cast<const char*>(&plen), 8);
    os.write(reinterpret_cast<const char*>(&crc), 4);
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
  }
  if (!os) fail(ErrKind::Io, "write failed for " + path);
}

struct CorpusReader::Impl {
  std::ifstream is;
  std::vector<uint8_t> buf;
};

CorpusReader::CorpusReader(const std::string& path) : impl_(new Impl) {
  impl_->is.open(path, std::ios::binary);
  if (!impl_->is) fail(ErrKind::CorpusUnreadable, "cannot open " + path);
  char magic[4];
  impl_->is.read(magic, 4);
  if (!impl_->is || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrKind::CorpusUnreadable, path + " is not a corpus file");
  uint32_t hlen = 0;
  impl_->is.read(reinterpret_cast<char*>(&hlen), 4);
  std::string hs(hlen, '\0');
  impl_->is.read(hs.data(), hlen);
  if (!impl_->is) fail(ErrKind::CorpusUnreadable, "truncated corpus header");
  nlohmann::json hdr = nlohmann::json::parse(hs, nullptr, false);
  if (hdr.is_discarded()) fail(ErrKind::CorpusUnreadable, "corpus header is not valid JSON");
  header_.version = hdr.value("version", 0u);
  header_.records = hdr.value("records", 0);
  header_.fps = hdr.value("fps", kFps);
  header_.face_dim = hdr.value("face_dim", 16);
  header_.lexicon_hash = hdr.value("lexicon_hash", 0ull);
  header_.seed = hdr.value("seed", 0ull);
  header_.seconds = hdr.value("seconds", 0.0);
  header_.onset_jitter = hdr.value("onset_jitter", 2);
  header_.reaction_offset = hdr.value("reaction_offset", 4);
}

CorpusReader::~CorpusReader() { delete impl_; }

std::optional<CorpusRecord> CorpusReader::next() {
  uint64_t plen = 0;
  impl_->is.read(reinterpret_cast<char*>(&plen), 8);
  if (impl_->is.eof()) return std::nullopt;
  uint32_t crc = 0;
  impl_->is.read(reinterpret_cast<char*>(&crc), 4);
  if (!impl_->is) fail(ErrKind::CorruptRecord, "truncated record frame");
  if (plen > (1ull << 32)) fail(ErrKind::CorruptRecord, "implausible record size");
  impl_->buf.resize(plen);
  impl_->is.read(reinterpret_cast<char*>(impl_->buf.data()),
                 static_cast<std::streamsize>(plen));
  if (!impl_->is) fail(ErrKind::CorruptRecord, "truncated record payload");
  uint32_t got = static_cast<uint32_t>(
      ::crc32(0L, impl_->buf.data(), static_cast<uInt>(impl_->buf.size())));
  if (got != crc) fail(ErrKind::CorruptRecord, "record checksum mismatch");
  buffer_capacity_ = std::max(buffer_capacity_, impl_->buf.capacity());
  return decode_record(impl_->buf);
}

Corpus read_corpus(const std::string& path) {
  CorpusReader reader(path);
  Corpus corpus;
  corpus.config.records = reader.header().records;
  corpus.config.seconds = reader.header().seconds;
  corpus.config.face_dim = reader.header().face_dim;
  corpus.config.seed = reader.header().seed;
  corpus.config.onset_jitter = reader.header().onset_jitter;
  corpus.config.reaction_offset = reader.header().reaction_offset;
  corpus.lexicon = SymbolLexicon::standard(reader.header().face_dim);
  if (corpus.lexicon.hash() != reader.header().lexicon_hash)
    fail(ErrKind::CorpusUnreadable, "corpus was built with a different lexicon");
  while (auto rec = reader.next()) corpus.records.push_back(std::move(*rec));
  if (static_cast<int64_t>(corpus.records.size()) != reader.header().records)
    fail(ErrKind::CorruptRecord, "record count disagrees with the header");
  return corpus;
}

}  // namespace avflow
