#include <random>

#include "doctest.h"
#include "fuzz.hpp"
#include "mmseq/error.hpp"
#include "mmseq/refiner.hpp"
#include "mmseq/stream_parser.hpp"
#include "oracles.hpp"

using namespace mmseq;

namespace {

bool has(const std::vector<Violation>& vs, ViolationKind k) {
  return std::any_of(vs.begin(), vs.end(), [&](const Violation& v) { return v.kind == k; });
}

}  // namespace

TEST_CASE("validate: worked examples") {
  const auto v = fuzz::three_modalities();
  const TokenId soim = v.begin_token("image"), eoim = v.end_token("image");
  const TokenId i1 = v.to_global("image", 1), i2 = v.to_global("image", 2);
  CHECK(validate(v, std::vector<TokenId>{soim, i1, i2, eoim}).empty());

  const auto wrong = validate(v, std::vector<TokenId>{soim, i1, v.end_token("speech")});
  CHECK(has(wrong, ViolationKind::UnmatchedBracket));
  CHECK(has(wrong, ViolationKind::WrongEndBracket));

  const auto orphan = validate(v, std::vector<TokenId>{'a', v.to_global("music", 3)});
  REQUIRE(orphan.size() == 1);
  CHECK(orphan[0].kind == ViolationKind::OrphanModalityToken);
  CHECK(orphan[0].position == 1);

  CHECK(has(validate(v, std::vector<TokenId>{soim, soim, eoim}), ViolationKind::NestedSpan));
  CHECK(has(validate(v, std::vector<TokenId>{soim, v.to_global("speech", 0), eoim}), ViolationKind::WrongModalityToken));
  CHECK(has(validate(v, std::vector<TokenId>{v.total_size()}), ViolationKind::OutOfVocabulary));
  CHECK(has(validate(v, std::vector<TokenId>{eoim}), ViolationKind::UnmatchedBracket));
}

TEST_CASE("parse_segments: structure and strictness") {
  const auto v = fuzz::three_modalities();
  const std::vector<DocumentChunk> doc = {DocumentChunk::of_text("ab"), DocumentChunk::of_media("image", {4, 5}),
                                          DocumentChunk::of_text("c")};
  const auto built = build_interleaved_sample(v, doc);
  const auto segs = parse_segments(v, built.tokens);
  REQUIRE(segs.size() == 4);
  CHECK(segs[0].kind == SegmentKind::Text);
  CHECK(segs[1].kind == SegmentKind::Modality);
  CHECK(segs[1].name == "image");
  CHECK(segs[1].payload == std::vector<std::uint32_t>{4, 5});
  CHECK(segs[2].kind == SegmentKind::Text);
  CHECK(segs[3].kind == SegmentKind::Special);
  CHECK(segs[3].name == "<eos>");
  CHECK(segs == built.segments);

  const auto plain = build_interleaved_sample(v, std::vector<DocumentChunk>{DocumentChunk::of_text("hello")});
  CHECK(parse_segments(v, plain.tokens).size() == 2);

  const std::vector<TokenId> broken = {v.begin_token("image"), v.to_global("image", 1)};
  CHECK_THROWS_AS(parse_segments(v, broken), Error);
  const auto salvaged = parse_segments(v, broken, ParseMode::Salvage);
  REQUIRE(salvaged.size() == 1);
  CHECK(salvaged[0].payload == std::vector<std::uint32_t>{1});

  const std::vector<TokenId> orphan = {'x', v.to_global("music", 2), 'y'};
  const auto dropped = parse_segments(v, orphan, ParseMode::Salvage);
  REQUIRE(dropped.size() == 2);
  CHECK(dropped[0].kind == SegmentKind::Text);
}

TEST_CASE("fuzzed builder output validates, reparses and covers the input") {
  const auto v = fuzz::three_modalities();
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<TokenSequence> samples;
    for (int i = 0; i < 3; ++i) samples.push_back(fuzz::random_sample(v, rng));
    const auto packed = pack(samples, 512);
    for (const auto& s : packed) {
      REQUIRE(validate(v, s.tokens).empty());
      const auto segs = parse_segments(v, s.tokens);
      CHECK(segs == s.segments);
      std::size_t cursor = 0;
      for (const auto& g : segs) {
        CHECK(g.start == cursor);
        CHECK(g.end > g.start);
        cursor = g.end;
      }
      CHECK(cursor == s.size());
    }
  }
}

TEST_CASE("detokenize routes each modality to its codec") {
  // Image: one layer, K=4, D=2.
  CodebookSet img;
  img.config.frame_dim = 2;
  img.config.num_layers = 1;
  img.config.codebook_size = 4;
  img.data = {0, 0, 1, 1, 2, 2, 3, 3};

  const Frames music_frames = oracle::gaussian_frames(600, 3, 2);
  RVQConfig mc = RVQConfig::music_preset(3, 8, 1);
  const auto music_books = train_codebooks(music_frames, mc);

  const Frames speech_frames = oracle::gaussian_frames(400, 3, 4);
  RVQConfig sc = RVQConfig::speech_preset(3, 1);
  sc.codebook_size = 8;
  const auto speech_books = train_codebooks(speech_frames, sc);

  CodecMap codecs;
  codecs["image"] = {MediaLayout::image(4), &img};
  codecs["music"] = {MediaLayout::music(8), &music_books};
  codecs["speech"] = {MediaLayout::speech(8), &speech_books};

  Segment is{SegmentKind::Modality, "image", 0, 3, {3}};
  CHECK(detokenize(is, codecs).data == std::vector<float>{3, 3});

  CodeMatrix m(250, 4);
  std::mt19937_64 rng(1);
  for (auto& c : m.codes) c = static_cast<std::uint32_t>(rng() % 8);
  Segment ms{SegmentKind::Modality, "music", 0, 0, flatten_codes(m, 8)};
  CHECK(ms.payload.size() == 1000);
  const auto mf = detokenize(ms, codecs);
  CHECK(mf.rows() == 250);
  CHECK(mf.data == decode(m, music_books).data);

  const CodeMatrix sp = encode(oracle::gaussian_frames(40, 3, 9), speech_books);
  const auto oracle_pred = make_oracle_predictor(sp, 8);
  const SpeechRefinement refine_with{oracle_pred.get(), RefineSchedule::cosine(4)};
  Segment ss{SegmentKind::Modality, "speech", 0, 0, MediaLayout::speech(8).to_local_ids(sp)};
  CHECK(detokenize(ss, codecs, &refine_with).data == decode(sp, speech_books).data);
  CHECK(detokenize(ss, codecs).data == decode(sp, speech_books, 1).data);

  Segment bad_layer{SegmentKind::Modality, "music", 0, 0, {1, 2, 3, 4}};
  CHECK_THROWS_AS(detokenize(bad_layer, codecs), Error);
  Segment bad_len{SegmentKind::Modality, "music", 0, 0, {1, 9}};
  CHECK_THROWS_AS(detokenize(bad_len, codecs), Error);
  codecs.erase("image");
  try {
    detokenize(is, codecs);
    FAIL("expected MissingCodebooks");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MissingCodebooks);
  }
}

TEST_CASE("segment dump format") {
  const std::vector<Segment> segs = {{SegmentKind::Text, {}, 0, 2, {}}, {SegmentKind::Modality, "image", 2, 5, {1}}};
  const auto j = segments_to_json(segs);
  CHECK(j[0]["kind"] == "text");
  CHECK(j[1]["kind"] == "image");
  CHECK(j[1]["payload"] == nlohmann::json::array({1}));
}
