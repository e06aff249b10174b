#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "avflow/corpus.hpp"
#include "test_util.hpp"

using namespace avflow;
using testutil::bits_equal;

namespace {

CorpusConfig small_cfg(int64_t records = 3, double seconds = 3.0) {
  CorpusConfig cfg;
  cfg.records = records;
  cfg.seconds = seconds;
  cfg.face_dim = 16;
  cfg.seed = 11;
  return cfg;
}

bool corpora_equal(const Corpus& a, const Corpus& b) {
  if (a.records.size() != b.records.size()) return false;
  for (size_t i = 0; i < a.records.size(); ++i) {
    const CorpusRecord& x = a.records[i];
    const CorpusRecord& y = b.records[i];
    if (!bits_equal(x.tokens, y.tokens) || !bits_equal(x.mel, y.mel) ||
        !bits_equal(x.face, y.face) || !bits_equal(x.head_pose, y.head_pose) ||
        !bits_equal(x.participant_feats, y.participant_feats) ||
        !bits_equal(x.participant_tokens, y.participant_tokens))
      return false;
    if (x.symbol_per_frame != y.symbol_per_frame || x.beat_frames != y.beat_frames ||
        x.closure_frames != y.closure_frames || x.smile_frames != y.smile_frames)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("lexicon invariants") {
  SymbolLexicon lex = SymbolLexicon::standard(16);
  CHECK(lex.size() == 12);
  CHECK(lex.symbols[0].aperture == 0.0f);
  for (int64_t c = 0; c < 80; ++c) CHECK(lex.symbols[0].mel_template.at(c) == 0.0f);
  CHECK(lex.id_for_char('_') == 0);
  CHECK(lex.id_for_char('a') == 1);
  CHECK(lex.id_for_char('Z') == -1);
  // one mid-speech closure symbol besides silence
  int closed = 0;
  for (size_t s = 1; s < lex.size(); ++s)
    if (lex.symbols[s].aperture == 0.0f) ++closed;
  CHECK(closed == 1);
  CHECK(lex.hash() == SymbolLexicon::standard(16).hash());
  CHECK(lex.hash() != SymbolLexicon::standard(8).hash());
}

TEST_CASE("silence-only script produces silence") {
  SymbolLexicon lex = SymbolLexicon::standard(16);
  CorpusConfig cfg = small_cfg();
  Rng rng(5);
  CorpusRecord r = generate_record(lex, silence_script(200), cfg, rng);
  CHECK(r.frames() == 200);
  CHECK(r.beat_frames.empty());
  double max_mel = 0.0;
  for (int64_t i = 0; i < r.mel.numel(); ++i)
    max_mel = std::max(max_mel, static_cast<double>(r.mel.at(i)));
  CHECK(max_mel < 0.05);
  for (int64_t i = 0; i < 200; ++i) CHECK(r.face.at(i * 16 + 0) == 0.0f);
  CHECK(r.closure_frames.size() == 200);
}

TEST_CASE("same seed twice gives a bitwise-identical corpus") {
  Corpus a = generate_corpus(small_cfg());
  Corpus b = generate_corpus(small_cfg());
  CHECK(corpora_equal(a, b));

  SUBCASE("different seeds differ") {
    CorpusConfig cfg = small_cfg();
    cfg.seed = 999;
    Corpus c = generate_corpus(cfg);
    CHECK_FALSE(corpora_equal(a, c));
  }
}

TEST_CASE("tokens are one-hot dominant on the scripted symbol") {
  Corpus corpus = generate_corpus(small_cfg(2, 2.0));
  for (const CorpusRecord& r : corpus.records) {
    for (int64_t i = 0; i < r.frames(); ++i) {
      int argmax = 0;
      float best = r.tokens.at(i * kTokenDim);
      for (int64_t c = 1; c < kTokenDim; ++c)
        if (r.tokens.at(i * kTokenDim + c) > best) {
          best = r.tokens.at(i * kTokenDim + c);
          argmax = static_cast<int>(c);
        }
      CHECK(argmax == r.symbol_per_frame[static_cast<size_t>(i)]);
      CHECK(best == 5.0f);
    }
  }
}

TEST_CASE("record annotations are consistent by construction") {
  Corpus corpus = generate_corpus(small_cfg(4, 4.0));
  for (const CorpusRecord& r : corpus.records) {
    r.validate(corpus.lexicon);  // throws on inconsistency
    // beats sit on spectral-flux spikes: rectified per-channel rise at the
    // beat frame clearly exceeds the rise two frames earlier
    auto flux_at = [&](int64_t i) {
      double f = 0.0;
      for (int64_t c = 0; c < kMelDim; ++c) {
        double d = static_cast<double>(r.mel.at(i * kMelDim + c)) -
                   r.mel.at((i - 1) * kMelDim + c);
        if (d > 0.0) f += d;
      }
      return f;
    };
    for (int64_t b : r.beat_frames) {
      if (b < 3) continue;
      CHECK(flux_at(b) > 2.0 * flux_at(b - 2));
    }
  }

  SUBCASE("corrupted annotations are caught") {
    CorpusRecord r = corpus.records[0];
    r.closure_frames.push_back(r.frames() - 1);  // silence tail makes this a duplicate or lie
    std::sort(r.closure_frames.begin(), r.closure_frames.end());
    bool threw = false;
    try {
      CorpusRecord r2 = corpus.records[0];
      r2.closure_frames.clear();
      r2.validate(corpus.lexicon);
    } catch (const Error& e) {
      threw = e.kind() == ErrKind::CorruptRecord;
    }
    CHECK(threw);
  }
}

TEST_CASE("reaction oracle") {
  SUBCASE("offset arithmetic") {
    DyadScript s;
    s.total_frames = 400;
    s.participant_smiles.push_back({100, 50});
    s.reactions.push_back({100, 20});
    auto frames = participant_reaction_oracle(s);
    REQUIRE(frames.size() == 1);
    CHECK(frames[0] == 120);
  }
  SUBCASE("no links gives an empty list") {
    CHECK(participant_reaction_oracle(silence_script(100)).empty());
  }
  SUBCASE("generated actor smiles appear at the expected frames") {
    Corpus corpus = generate_corpus(small_cfg(3, 6.0));
    int checked = 0;
    for (const CorpusRecord& r : corpus.records) {
      auto expect = participant_reaction_oracle(r.script);
      for (int64_t f : expect) {
        // find the smile-run onset nearest the oracle frame
        int64_t best = -1000;
        for (size_t k = 0; k < r.smile_frames.size(); ++k) {
          bool run_start = k == 0 || r.smile_frames[k - 1] + 1 != r.smile_frames[k];
          if (run_start && std::abs(r.smile_frames[k] - f) < std::abs(best - f))
            best = r.smile_frames[k];
        }
        if (f + 10 < r.frames()) {
          CHECK(std::abs(best - f) <= 2);
          ++checked;
        }
      }
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("corpus file round trip is lossless") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "avfc_io";
  fs::create_directories(dir);
  std::string path = (dir / "c.avfc").string();

  Corpus corpus = generate_corpus(small_cfg(3, 2.0));
  write_corpus(corpus, path);
  Corpus loaded = read_corpus(path);
  CHECK(corpora_equal(corpus, loaded));
  CHECK(loaded.lexicon.hash() == corpus.lexicon.hash());

  SUBCASE("scripts survive the trip") {
    CHECK(loaded.records[0].script.reactions.size() ==
          corpus.records[0].script.reactions.size());
    CHECK(loaded.records[0].script.total_frames == corpus.records[0].script.total_frames);
  }

  SUBCASE("truncated file reports a corrupt record") {
    fs::resize_file(path, fs::file_size(path) - 13);
    bool threw = false;
    try {
      read_corpus(path);
    } catch (const Error& e) {
      threw = e.kind() == ErrKind::CorruptRecord;
    }
    CHECK(threw);
  }

  SUBCASE("flipped payload byte fails the checksum") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-40, std::ios::end);
    char b;
    f.read(&b, 1);
    f.seekp(-40, std::ios::end);
    b = static_cast<char>(b ^ 0x40);
    f.write(&b, 1);
    f.close();
    bool threw = false;
    try {
      read_corpus(path);
    } catch (const Error& e) {
      threw = e.kind() == ErrKind::CorruptRecord;
    }
    CHECK(threw);
  }
  fs::remove_all(dir);
}

TEST_CASE("streaming keeps only one record in memory") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "avfc_stream";
  fs::create_directories(dir);
  std::string path = (dir / "s.avfc").string();

  Corpus corpus = generate_corpus(small_cfg(100, 1.0));
  write_corpus(corpus, path);
  size_t file_bytes = static_cast<size_t>(fs::file_size(path));

  CorpusReader reader(path);
  int64_t count = 0;
  while (auto rec = reader.next()) {
    CHECK(rec->frames() == 86);
    ++count;
  }
  CHECK(count == 100);
  // the reader's scratch buffer never grows beyond a couple of records
  CHECK(reader.buffered_bytes() < file_bytes / 20);
  fs::remove_all(dir);
}

TEST_CASE("per-channel statistics are reproducible for a fixed seed") {
  auto stats = [](const Corpus& c) {
    std::vector<double> mean(kMelDim, 0.0);
    int64_t frames = 0;
    for (const CorpusRecord& r : c.records) {
      for (int64_t i = 0; i < r.frames(); ++i)
        for (int64_t ch = 0; ch < kMelDim; ++ch)
          mean[static_cast<size_t>(ch)] += r.mel.at(i * kMelDim + ch);
      frames += r.frames();
    }
    for (double& m : mean) m /= static_cast<double>(frames);
    return mean;
  };
  auto a = stats(generate_corpus(small_cfg()));
  auto b = stats(generate_corpus(small_cfg()));
  for (size_t c = 0; c < a.size(); ++c) CHECK(std::abs(a[c] - b[c]) < 1e-6);
}

TEST_CASE("bad configs are rejected") {
  CorpusConfig cfg = small_cfg();
  cfg.records = 0;
  CHECK_THROWS_AS(generate_corpus(cfg), Error);
  SymbolLexicon lex = SymbolLexicon::standard(16);
  SymbolLexicon broken = lex;
  broken.symbols[0].aperture = 0.3f;
  CorpusConfig cfg2 = small_cfg();
  Rng rng(1);
  bool threw = false;
  try {
    generate_record(broken, silence_script(50), cfg2, rng);
  } catch (const Error& e) {
    threw = e.kind() == ErrKind::BadLexicon;
  }
  CHECK(threw);
}
