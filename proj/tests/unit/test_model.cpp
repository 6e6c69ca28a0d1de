#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mmseq/error.hpp"
#include "mmseq/model.hpp"
#include "oracles.hpp"

using namespace mmseq;

namespace {

ModelConfig tiny(std::uint32_t vocab = 16) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.max_seq_len = 12;
  c.seed = 3;
  c.init_std = 0.5;
  return c;
}

TokenSequence random_seq(std::size_t n, std::uint32_t vocab, std::mt19937_64& rng, bool partial_mask) {
  TokenSequence s;
  for (std::size_t i = 0; i < n; ++i) {
    s.tokens.push_back(static_cast<TokenId>(rng() % vocab));
    s.loss_mask.push_back(partial_mask ? static_cast<std::uint8_t>(rng() % 3 != 0) : 1);
  }
  s.loss_mask[1] = 1;
  return s;
}

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::Io;
}

}  // namespace

TEST_CASE("init_model is seeded and shaped by the config") {
  const auto c = tiny(22);
  const auto a = init_model(c), b = init_model(c);
  CHECK(a == b);
  CHECK(a.token_embedding().shape == std::vector<std::size_t>{22, 8});
  CHECK(a.output_projection().shape == std::vector<std::size_t>{8, 22});
  auto c2 = c;
  c2.seed = 4;
  CHECK_FALSE(init_model(c2) == a);

  const std::vector<TokenId> prompt = {1, 5, 21, 0, 7};
  const auto logits = forward(a, prompt);
  CHECK(logits.size() == prompt.size() * 22);
  for (double x : logits) CHECK(std::isfinite(x));
  const auto probs = softmax_rows(logits, 22);
  for (std::size_t r = 0; r < prompt.size(); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 22; ++k) s += probs[r * 22 + k];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  auto bad = c;
  bad.num_heads = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("analytic gradients match central finite differences") {
  const auto params = init_model(tiny());
  std::mt19937_64 rng(8);
  const std::vector<TokenSequence> batch = {random_seq(9, 16, rng, true), random_seq(12, 16, rng, false),
                                            random_seq(5, 16, rng, true)};
  ModelParams grad;
  const double loss = loss_and_grad(params, batch, &grad);
  CHECK(std::isfinite(loss));

  const double h = 1e-5;
  double diff2 = 0.0, ref2 = 0.0, ana2 = 0.0;
  ModelParams p = params;
  for (std::size_t t = 0; t < p.tensors.size(); ++t) {
    for (std::size_t i = 0; i < p.tensors[t].data.size(); ++i) {
      const double orig = p.tensors[t].data[i];
      p.tensors[t].data[i] = orig + h;
      const double up = loss_and_grad(p, batch, nullptr);
      p.tensors[t].data[i] = orig - h;
      const double down = loss_and_grad(p, batch, nullptr);
      p.tensors[t].data[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = grad.tensors[t].data[i];
      diff2 += (fd - an) * (fd - an);
      ref2 += fd * fd;
      ana2 += an * an;
    }
  }
  const double rel = std::sqrt(diff2) / std::max(std::sqrt(ref2), std::sqrt(ana2));
  MESSAGE("gradient relative error " << rel);
  CHECK(ana2 > 0.0);
  CHECK(rel < 1e-4);
}

TEST_CASE("expand_vocab keeps old parameters and old logits") {
  auto c = tiny(10);
  const auto old = init_model(c);
  const auto grown = expand_vocab(old, 14, 77);
  CHECK(grown.config.vocab_size == 14);
  CHECK(grown.token_embedding().shape[0] == 14);
  for (std::size_t i = 0; i < old.token_embedding().data.size(); ++i) {
    CHECK(grown.token_embedding().data[i] == old.token_embedding().data[i]);
  }
  for (std::size_t t = 1; t + 1 < old.tensors.size(); ++t) CHECK(grown.tensors[t] == old.tensors[t]);

  const std::vector<TokenId> prompt = {1, 9, 3, 3, 0};
  const auto l0 = forward(old, prompt), l1 = forward(grown, prompt);
  const auto p0 = softmax_rows(l0, 10), p1 = softmax_rows(l1, 14);
  for (std::size_t r = 0; r < prompt.size(); ++r) {
    for (std::size_t k = 0; k < 10; ++k) {
      CHECK(std::abs(l1[r * 14 + k] - l0[r * 10 + k]) <= 1e-12);
      CHECK(p1[r * 14 + k] <= p0[r * 10 + k]);
    }
  }
  CHECK(code_of([&] { expand_vocab(old, 9, 1); }) == Errc::ShrinkNotAllowed);
}

TEST_CASE("nll_loss") {
  const std::size_t v = 5;
  std::vector<double> sure(3 * v, -1e4);
  const std::vector<TokenId> targets = {1, 4, 0};
  for (std::size_t r = 0; r < 3; ++r) sure[r * v + targets[r]] = 1e4;
  const std::vector<std::uint8_t> all = {1, 1, 1};
  CHECK(nll_loss(sure, targets, all, v) == doctest::Approx(0.0));

  const std::vector<double> uniform(3 * v, 0.25);
  CHECK(nll_loss(uniform, targets, all, v) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  const std::vector<std::uint8_t> none = {0, 0, 0};
  CHECK(code_of([&] { nll_loss(uniform, targets, none, v); }) == Errc::EmptyMask);

  // Padding with a false mask leaves the batch loss unchanged.
  const auto params = init_model(tiny());
  std::mt19937_64 rng(1);
  const TokenSequence s = random_seq(7, 16, rng, false);
  TokenSequence padded = s;
  for (int i = 0; i < 4; ++i) {
    padded.tokens.push_back(0);
    padded.loss_mask.push_back(0);
  }
  CHECK(loss_and_grad(params, std::vector<TokenSequence>{padded}, nullptr) ==
        doctest::Approx(loss_and_grad(params, std::vector<TokenSequence>{s}, nullptr)).epsilon(1e-12));

  // n tokens feed n - 1 positions, so 13 still fits max_seq_len 12.
  CHECK_NOTHROW(loss_and_grad(params, std::vector<TokenSequence>{random_seq(13, 16, rng, false)}, nullptr));
  TokenSequence too_long = random_seq(14, 16, rng, false);
  CHECK(code_of([&] { loss_and_grad(params, std::vector<TokenSequence>{too_long}, nullptr); }) == Errc::SampleTooLong);
}

TEST_CASE("learning-rate schedule and clipping") {
  TrainConfig t;
  t.peak_lr = 1e-3;
  t.warmup_ratio = 0.1;
  t.steps = 100;
  CHECK(t.warmup_steps() == 10);
  CHECK(t.lr_at(0) < t.lr_at(9));
  CHECK(t.lr_at(9) == doctest::Approx(1e-3));
  CHECK(t.lr_at(55) < t.lr_at(20));
  CHECK(t.lr_at(99) < 1e-5);
  TrainConfig bad = t;
  bad.warmup_ratio = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = t;
  bad.clip_norm = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);

  auto g = init_model(tiny()).zeros_like();
  g.tensors[0].data[0] = 6.0;
  g.tensors[3].data[1] = 8.0;
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(10.0));
  CHECK(std::sqrt(g.squared_norm()) == doctest::Approx(1.0));
  CHECK(g.tensors[0].data[0] == doctest::Approx(0.6));
  CHECK(clip_global_norm(g, 5.0) == doctest::Approx(1.0));
  CHECK(std::sqrt(g.squared_norm()) == doctest::Approx(1.0));
}

TEST_CASE("training memorizes 32 short sequences in 200 steps, deterministically") {
  ModelConfig c;
  c.vocab_size = 24;
  c.dim = 32;
  c.num_layers = 2;
  c.num_heads = 4;
  c.max_seq_len = 16;
  c.seed = 5;
  c.init_std = 0.05;
  std::mt19937_64 rng(12);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 32; ++i) {
    TokenSequence s;
    s.tokens.push_back(static_cast<TokenId>(i % 24));  // distinct-ish start
    s.tokens.push_back(static_cast<TokenId>(i / 24));
    for (int j = 0; j < 10; ++j) s.tokens.push_back(static_cast<TokenId>(rng() % 24));
    s.loss_mask.assign(s.tokens.size(), 1);
    s.loss_mask[1] = 0;  // the second token of a prefix cannot be predicted
    corpus.push_back(s);
  }
  TrainConfig t;
  t.peak_lr = 1e-2;
  t.warmup_ratio = 0.05;
  t.steps = 200;
  t.batch_size = 32;

  auto run = [&] {
    auto p = init_model(c);
    auto adam = AdamState::for_params(p);
    std::vector<double> losses;
    for (std::size_t step = 0; step < t.steps; ++step) {
      const auto r = train_step(p, adam, corpus, t, step);
      losses.push_back(r.loss);
      CHECK(r.grad_norm >= 0.0);
    }
    return std::make_pair(p, losses);
  };
  const auto [p1, l1] = run();
  const double final_loss = loss_and_grad(p1, corpus, nullptr);
  MESSAGE("memorization loss " << final_loss);
  CHECK(final_loss < 0.1);
  CHECK(p1.all_finite());
  const auto [p2, l2] = run();
  CHECK(l1 == l2);
  CHECK(p1 == p2);
}

TEST_CASE("train_step rejects non-finite losses") {
  auto p = init_model(tiny());
  p.tensors[0].data[0] = std::nan("");
  auto adam = AdamState::for_params(p);
  TokenSequence s;
  s.tokens = {0, 1, 2};
  s.loss_mask = {1, 1, 1};
  TrainConfig t;
  t.steps = 10;
  CHECK(code_of([&] { train_step(p, adam, std::vector<TokenSequence>{s}, t, 0); }) == Errc::NonFiniteLoss);
}

TEST_CASE("checkpoint roundtrip stores float32 values") {
  const auto p = init_model(tiny());
  const auto dir = oracle::scratch("ckpt");
  save_checkpoint(dir / "m.mmlm", p);
  const auto back = load_checkpoint(dir / "m.mmlm");
  CHECK(back.config == p.config);
  REQUIRE(back.tensors.size() == p.tensors.size());
  for (std::size_t t = 0; t < p.tensors.size(); ++t) {
    CHECK(back.tensors[t].name == p.tensors[t].name);
    CHECK(back.tensors[t].shape == p.tensors[t].shape);
    for (std::size_t i = 0; i < p.tensors[t].data.size(); ++i) {
      CHECK(back.tensors[t].data[i] == static_cast<double>(static_cast<float>(p.tensors[t].data[i])));
    }
  }
  std::ifstream f(dir / "m.mmlm", std::ios::binary);
  char magic[4];
  f.read(magic, 4);
  CHECK(std::string(magic, 4) == "MMLM");

  std::ofstream(dir / "junk.mmlm") << "nope";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.mmlm"), Error);
}

TEST_CASE("incremental decoding reproduces full forward logits") {
  const auto p = init_model(tiny());
  const std::vector<TokenId> toks = {3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8};
  const auto full = forward(p, toks);
  IncrementalDecoder dec(p);
  auto state = dec.start();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto row = dec.append(state, toks[i]);
    for (std::size_t k = 0; k < 16; ++k) CHECK(row[k] == full[i * 16 + k]);
  }
  CHECK(code_of([&] { dec.append(state, 0); }) == Errc::PromptTooLong);
}
