#include "mmseq/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include "mmseq/error.hpp"
#include "mmseq/kernels.hpp"

namespace mmseq {

void ModelConfig::validate() const {
  if (vocab_size == 0) throw Error(Errc::InvalidConfig, "vocab_size must be positive");
  if (dim == 0 || num_heads == 0 || dim % num_heads != 0) {
    throw Error(Errc::InvalidConfig, "dim must be a positive multiple of num_heads");
  }
  if (num_layers == 0) throw Error(Errc::InvalidConfig, "num_layers must be positive");
  if (max_seq_len < 2) throw Error(Errc::InvalidConfig, "max_seq_len must be at least 2");
  if (!(init_std > 0.0)) throw Error(Errc::InvalidConfig, "init_std must be positive");
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.data.size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& t : tensors) {
    for (double v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  z.config = config;
  z.tensors.reserve(tensors.size());
  for (const auto& t : tensors) z.tensors.push_back({t.name, t.shape, std::vector<double>(t.data.size(), 0.0)});
  return z;
}

double ModelParams::squared_norm() const {
  double s = 0.0;
  for (const auto& t : tensors) {
    for (double v : t.data) s += v * v;
  }
  return s;
}

namespace {

constexpr double kNormEps = 1e-5;

std::vector<Tensor> layout(const ModelConfig& c) {
  const std::size_t v = c.vocab_size, d = c.dim, h = c.hidden();
  std::vector<Tensor> ts;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    ts.push_back({std::move(name), std::move(shape), std::vector<double>(n, 0.0)});
  };
  add("tok_emb", {v, d});
  add("pos_emb", {c.max_seq_len, d});
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "ln1", {d});
    add(p + "wq", {d, d});
    add(p + "wk", {d, d});
    add(p + "wv", {d, d});
    add(p + "wo", {d, d});
    add(p + "ln2", {d});
    add(p + "w1", {d, h});
    add(p + "b1", {h});
    add(p + "w2", {h, d});
    add(p + "b2", {d});
  }
  add("ln_f", {d});
  add("w_out", {d, v});
  return ts;
}

bool is_gain(const std::string& name) {
  return name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_f";
}

bool is_bias(const std::string& name) { return name.ends_with("b1") || name.ends_with("b2"); }

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

double rmsnorm_row(const double* x, const double* g, double* y, std::size_t d) {
  double ms = 0.0;
  for (std::size_t j = 0; j < d; ++j) ms += x[j] * x[j];
  const double r = std::sqrt(ms / static_cast<double>(d) + kNormEps);
  for (std::size_t j = 0; j < d; ++j) y[j] = x[j] / r * g[j];
  return r;
}

void rmsnorm_backward_row(const double* dy, const double* x, double r, const double* g, double* dx, double* dg,
                          std::size_t d) {
  double dot = 0.0;
  for (std::size_t j = 0; j < d; ++j) dot += g[j] * dy[j] * x[j];
  const double r3 = r * r * r * static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j) {
    dx[j] += g[j] * dy[j] / r - x[j] * dot / r3;
    dg[j] += dy[j] * x[j] / r;
  }
}

// Causal attention output for query row i against key/value rows 0..i.
// `probs` (heads x stride) receives the attention weights when non-null.
void attention_row(std::size_t i, const double* q, const double* keys, const double* values, std::size_t d,
                   std::size_t heads, double* out, double* probs, std::size_t stride, std::vector<double>& scratch) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  scratch.resize(i + 1);
  for (std::size_t h = 0; h < heads; ++h) {
    const double* qh = q + h * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) {
      const double* kh = keys + j * d + h * dh;
      double s = 0.0;
      for (std::size_t e = 0; e < dh; ++e) s += qh[e] * kh[e];
      scratch[j] = s * scale;
      mx = std::max(mx, scratch[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      scratch[j] = std::exp(scratch[j] - mx);
      sum += scratch[j];
    }
    double* oh = out + h * dh;
    for (std::size_t e = 0; e < dh; ++e) oh[e] = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double p = scratch[j] / sum;
      if (probs) probs[h * stride + j] = p;
      const double* vh = values + j * d + h * dh;
      for (std::size_t e = 0; e < dh; ++e) oh[e] += p * vh[e];
    }
  }
}

struct LayerCache {
  std::vector<double> xin, r1, xn1, q, k, v, probs, att, xmid, r2, xn2, hpre, hact;
};

struct SequenceCache {
  std::size_t n = 0;
  std::vector<LayerCache> layers;
  std::vector<double> xfin, rf, xf, logits;
};

void check_token(const ModelConfig& c, TokenId t) {
  if (t >= c.vocab_size) {
    throw Error(Errc::OutOfRange, "token " + std::to_string(t) + " >= model vocabulary " + std::to_string(c.vocab_size));
  }
}

void forward_cached(const ModelParams& p, std::span<const TokenId> tokens, SequenceCache& c) {
  const auto& cfg = p.config;
  const std::size_t n = tokens.size(), d = cfg.dim, h = cfg.hidden(), heads = cfg.num_heads, V = cfg.vocab_size;
  if (n > cfg.max_seq_len) {
    throw Error(Errc::SampleTooLong, std::to_string(n) + " positions exceed max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  c.n = n;
  std::vector<double> x(n * d);
  const auto& emb = p.token_embedding().data;
  const auto& pos = p.position_embedding().data;
  for (std::size_t i = 0; i < n; ++i) {
    check_token(cfg, tokens[i]);
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = emb[tokens[i] * d + j] + pos[i * d + j];
  }
  c.layers.resize(cfg.num_layers);
  std::vector<double> scratch;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto& lc = c.layers[l];
    using S = ModelParams::LayerSlot;
    lc.xin = x;
    lc.r1.assign(n, 0.0);
    lc.xn1.assign(n * d, 0.0);
    const double* g1 = p.layer(l, S::Ln1).data.data();
    for (std::size_t i = 0; i < n; ++i) lc.r1[i] = rmsnorm_row(&x[i * d], g1, &lc.xn1[i * d], d);
    lc.q.assign(n * d, 0.0);
    lc.k.assign(n * d, 0.0);
    lc.v.assign(n * d, 0.0);
    kernels::matmul_acc(lc.xn1, p.layer(l, S::Wq).data, lc.q, n, d, d);
    kernels::matmul_acc(lc.xn1, p.layer(l, S::Wk).data, lc.k, n, d, d);
    kernels::matmul_acc(lc.xn1, p.layer(l, S::Wv).data, lc.v, n, d, d);
    lc.probs.assign(heads * n * n, 0.0);
    lc.att.assign(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      attention_row(i, &lc.q[i * d], lc.k.data(), lc.v.data(), d, heads, &lc.att[i * d], &lc.probs[i * n], n * n, scratch);
    }
    std::vector<double> proj(n * d, 0.0);
    kernels::matmul_acc(lc.att, p.layer(l, S::Wo).data, proj, n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
    lc.xmid = x;
    lc.r2.assign(n, 0.0);
    lc.xn2.assign(n * d, 0.0);
    const double* g2 = p.layer(l, S::Ln2).data.data();
    for (std::size_t i = 0; i < n; ++i) lc.r2[i] = rmsnorm_row(&x[i * d], g2, &lc.xn2[i * d], d);
    lc.hpre.assign(n * h, 0.0);
    kernels::matmul_acc(lc.xn2, p.layer(l, S::W1).data, lc.hpre, n, d, h);
    const auto& b1 = p.layer(l, S::B1).data;
    lc.hact.resize(n * h);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < h; ++j) {
        lc.hpre[i * h + j] += b1[j];
        lc.hact[i * h + j] = gelu(lc.hpre[i * h + j]);
      }
    }
    std::vector<double> mlp(n * d, 0.0);
    kernels::matmul_acc(lc.hact, p.layer(l, S::W2).data, mlp, n, h, d);
    const auto& b2 = p.layer(l, S::B2).data;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] += mlp[i * d + j] + b2[j];
    }
  }
  c.xfin = x;
  c.rf.assign(n, 0.0);
  c.xf.assign(n * d, 0.0);
  const double* gf = p.final_norm().data.data();
  for (std::size_t i = 0; i < n; ++i) c.rf[i] = rmsnorm_row(&x[i * d], gf, &c.xf[i * d], d);
  c.logits.assign(n * V, 0.0);
  kernels::matmul_acc(c.xf, p.output_projection().data, c.logits, n, d, V);
}

void backward(const ModelParams& p, std::span<const TokenId> tokens, const SequenceCache& c,
              std::span<const double> dlogits, ModelParams& g) {
  const auto& cfg = p.config;
  const std::size_t n = c.n, d = cfg.dim, h = cfg.hidden(), heads = cfg.num_heads, V = cfg.vocab_size;
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  using S = ModelParams::LayerSlot;

  kernels::matmul_tn_acc(c.xf, dlogits, g.output_projection().data, n, d, V);
  std::vector<double> dxf(n * d, 0.0);
  kernels::matmul_nt_acc(dlogits, p.output_projection().data, dxf, n, d, V);
  std::vector<double> dx(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    rmsnorm_backward_row(&dxf[i * d], &c.xfin[i * d], c.rf[i], p.final_norm().data.data(), &dx[i * d],
                         g.final_norm().data.data(), d);
  }

  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    const auto& lc = c.layers[l];
    // MLP branch.
    auto& db2 = g.layer(l, S::B2).data;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) db2[j] += dx[i * d + j];
    }
    kernels::matmul_tn_acc(lc.hact, dx, g.layer(l, S::W2).data, n, h, d);
    std::vector<double> dh_act(n * h, 0.0);
    kernels::matmul_nt_acc(dx, p.layer(l, S::W2).data, dh_act, n, h, d);
    auto& db1 = g.layer(l, S::B1).data;
    for (std::size_t i = 0; i < n * h; ++i) dh_act[i] *= gelu_grad(lc.hpre[i]);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < h; ++j) db1[j] += dh_act[i * h + j];
    }
    kernels::matmul_tn_acc(lc.xn2, dh_act, g.layer(l, S::W1).data, n, d, h);
    std::vector<double> dxn2(n * d, 0.0);
    kernels::matmul_nt_acc(dh_act, p.layer(l, S::W1).data, dxn2, n, d, h);
    for (std::size_t i = 0; i < n; ++i) {
      rmsnorm_backward_row(&dxn2[i * d], &lc.xmid[i * d], lc.r2[i], p.layer(l, S::Ln2).data.data(), &dx[i * d],
                           g.layer(l, S::Ln2).data.data(), d);
    }

    // Attention branch.
    kernels::matmul_tn_acc(lc.att, dx, g.layer(l, S::Wo).data, n, d, d);
    std::vector<double> datt(n * d, 0.0);
    kernels::matmul_nt_acc(dx, p.layer(l, S::Wo).data, datt, n, d, d);
    std::vector<double> dq(n * d, 0.0), dk(n * d, 0.0), dv(n * d, 0.0);
    std::vector<double> dp(n);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* probs = &lc.probs[hh * n * n + i * n];
        const double* doi = &datt[i * d + hh * dh];
        double weighted = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = &lc.v[j * d + hh * dh];
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += doi[e] * vj[e];
          dp[j] = s;
          weighted += probs[j] * s;
          double* dvj = &dv[j * d + hh * dh];
          for (std::size_t e = 0; e < dh; ++e) dvj[e] += probs[j] * doi[e];
        }
        const double* qi = &lc.q[i * d + hh * dh];
        double* dqi = &dq[i * d + hh * dh];
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = probs[j] * (dp[j] - weighted) * scale;
          if (ds == 0.0) continue;
          const double* kj = &lc.k[j * d + hh * dh];
          double* dkj = &dk[j * d + hh * dh];
          for (std::size_t e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    kernels::matmul_tn_acc(lc.xn1, dq, g.layer(l, S::Wq).data, n, d, d);
    kernels::matmul_tn_acc(lc.xn1, dk, g.layer(l, S::Wk).data, n, d, d);
    kernels::matmul_tn_acc(lc.xn1, dv, g.layer(l, S::Wv).data, n, d, d);
    std::vector<double> dxn1(n * d, 0.0);
    kernels::matmul_nt_acc(dq, p.layer(l, S::Wq).data, dxn1, n, d, d);
    kernels::matmul_nt_acc(dk, p.layer(l, S::Wk).data, dxn1, n, d, d);
    kernels::matmul_nt_acc(dv, p.layer(l, S::Wv).data, dxn1, n, d, d);
    for (std::size_t i = 0; i < n; ++i) {
      rmsnorm_backward_row(&dxn1[i * d], &lc.xin[i * d], lc.r1[i], p.layer(l, S::Ln1).data.data(), &dx[i * d],
                           g.layer(l, S::Ln1).data.data(), d);
    }
  }

  auto& demb = g.token_embedding().data;
  auto& dpos = g.position_embedding().data;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      demb[tokens[i] * d + j] += dx[i * d + j];
      dpos[i * d + j] += dx[i * d + j];
    }
  }
}

void add_into(ModelParams& acc, const ModelParams& g) {
  for (std::size_t t = 0; t < acc.tensors.size(); ++t) {
    auto& a = acc.tensors[t].data;
    const auto& b = g.tensors[t].data;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  }
}

}  // namespace

ModelParams init_model(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.tensors = layout(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  for (auto& t : p.tensors) {
    if (is_gain(t.name)) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (!is_bias(t.name)) {
      for (double& v : t.data) v = normal(rng);
    }
  }
  return p;
}

ModelParams expand_vocab(const ModelParams& params, std::uint32_t new_vocab_size, std::uint64_t seed) {
  const std::uint32_t old_v = params.config.vocab_size;
  if (new_vocab_size < old_v) {
    throw Error(Errc::ShrinkNotAllowed, "cannot shrink vocabulary from " + std::to_string(old_v) + " to " +
                                            std::to_string(new_vocab_size));
  }
  ModelParams out = params;
  out.config.vocab_size = new_vocab_size;
  const std::size_t d = params.config.dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, params.config.init_std);

  auto& emb = out.token_embedding();
  emb.shape = {new_vocab_size, d};
  for (std::size_t i = static_cast<std::size_t>(old_v) * d; i < static_cast<std::size_t>(new_vocab_size) * d; ++i) {
    emb.data.push_back(normal(rng));
  }

  auto& w = out.output_projection();
  const auto& old_w = params.output_projection().data;
  w.shape = {d, new_vocab_size};
  w.data.assign(d * new_vocab_size, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    std::copy_n(old_w.begin() + static_cast<std::ptrdiff_t>(r * old_v), old_v,
                w.data.begin() + static_cast<std::ptrdiff_t>(r * new_vocab_size));
    for (std::size_t c = old_v; c < new_vocab_size; ++c) w.data[r * new_vocab_size + c] = normal(rng);
  }
  return out;
}

std::vector<double> forward(const ModelParams& params, std::span<const TokenId> tokens) {
  SequenceCache cache;
  forward_cached(params, tokens, cache);
  return std::move(cache.logits);
}

std::vector<double> softmax_rows(std::span<const double> logits, std::size_t vocab) {
  std::vector<double> out(logits.size());
  const std::size_t n = logits.size() / vocab;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) sum += out[i * vocab + v] = std::exp(row[v] - mx);
    for (std::size_t v = 0; v < vocab; ++v) out[i * vocab + v] /= sum;
  }
  return out;
}

namespace {

// -log softmax(row)[target]
double row_nll(const double* row, std::size_t vocab, TokenId target) {
  const double mx = *std::max_element(row, row + vocab);
  double sum = 0.0;
  for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(row[v] - mx);
  return std::log(sum) + mx - row[target];
}

}  // namespace

double nll_loss(std::span<const double> logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                std::size_t vocab) {
  if (targets.size() != mask.size() || logits.size() != targets.size() * vocab) {
    throw Error(Errc::DimensionMismatch, "logits, targets and mask must be aligned");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    if (targets[i] >= vocab) throw Error(Errc::OutOfRange, "target outside vocabulary");
    total += row_nll(logits.data() + i * vocab, vocab, targets[i]);
    ++count;
  }
  if (count == 0) throw Error(Errc::EmptyMask, "no positions selected by the loss mask");
  return total / static_cast<double>(count);
}

double loss_and_grad(const ModelParams& params, std::span<const TokenSequence> batch, ModelParams* grad) {
  const std::size_t V = params.config.vocab_size;
  std::size_t count = 0;
  for (const auto& s : batch) {
    if (s.tokens.size() != s.loss_mask.size()) throw Error(Errc::DimensionMismatch, "tokens and loss mask differ in length");
    for (std::size_t i = 1; i < s.tokens.size(); ++i) count += s.loss_mask[i] ? 1 : 0;
  }
  if (count == 0) throw Error(Errc::EmptyMask, "batch has no loss positions");
  const double inv = 1.0 / static_cast<double>(count);

  std::vector<double> losses(batch.size(), 0.0);
  std::vector<ModelParams> grads(grad ? batch.size() : 0);
  const auto nseq = static_cast<std::ptrdiff_t>(batch.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t b = 0; b < nseq; ++b) {
    try {
      const auto& s = batch[b];
      if (s.tokens.size() < 2) continue;
      const std::size_t n = s.tokens.size() - 1;
      const std::span<const TokenId> inputs(s.tokens.data(), n);
      SequenceCache cache;
      forward_cached(params, inputs, cache);
      std::vector<double> dlogits(grad ? n * V : 0, 0.0);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!s.loss_mask[i + 1]) continue;
        const TokenId target = s.tokens[i + 1];
        if (target >= V) throw Error(Errc::OutOfRange, "target outside vocabulary");
        const double* row = &cache.logits[i * V];
        total += row_nll(row, V, target);
        if (grad) {
          const double mx = *std::max_element(row, row + V);
          double sum = 0.0;
          for (std::size_t v = 0; v < V; ++v) sum += dlogits[i * V + v] = std::exp(row[v] - mx);
          for (std::size_t v = 0; v < V; ++v) dlogits[i * V + v] *= inv / sum;
          dlogits[i * V + target] -= inv;
        }
      }
      losses[b] = total;
      if (grad) {
        grads[b] = params.zeros_like();
        backward(params, inputs, cache, dlogits, grads[b]);
      }
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  double total = 0.0;
  for (double l : losses) total += l;
  if (grad) {
    *grad = params.zeros_like();
    for (const auto& g : grads) {
      if (!g.tensors.empty()) add_into(*grad, g);
    }
  }
  return total * inv;
}

// ---------------------------------------------------------------------------
// Optimisation

void TrainConfig::validate() const {
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw Error(Errc::InvalidConfig, "warmup_ratio must be in [0, 1]");
  if (!(clip_norm > 0.0)) throw Error(Errc::InvalidConfig, "clip_norm must be positive");
  if (!(peak_lr > 0.0)) throw Error(Errc::InvalidConfig, "peak_lr must be positive");
  if (batch_size == 0 || steps == 0) throw Error(Errc::InvalidConfig, "batch_size and steps must be positive");
}

std::size_t TrainConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(steps)));
}

double TrainConfig::lr_at(std::size_t step) const {
  const std::size_t warm = warmup_steps();
  if (step < warm) return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(1, steps - warm));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(ModelParams& grad, double max_norm) {
  const double norm = std::sqrt(grad.squared_norm());
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& t : grad.tensors) {
      for (double& v : t.data) v *= s;
    }
  }
  return norm;
}

AdamState AdamState::for_params(const ModelParams& params) {
  return AdamState{params.zeros_like(), params.zeros_like(), 0};
}

StepResult train_step(ModelParams& params, AdamState& state, std::span<const TokenSequence> batch,
                      const TrainConfig& config, std::size_t step) {
  config.validate();
  if (state.m.tensors.size() != params.tensors.size()) state = AdamState::for_params(params);
  ModelParams grad;
  StepResult r;
  r.loss = loss_and_grad(params, batch, &grad);
  if (!std::isfinite(r.loss)) throw Error(Errc::NonFiniteLoss, "loss is " + std::to_string(r.loss) + " at step " + std::to_string(step));
  r.grad_norm = clip_global_norm(grad, config.clip_norm);
  if (!std::isfinite(r.grad_norm)) throw Error(Errc::NonFiniteLoss, "gradient norm is not finite at step " + std::to_string(step));
  r.lr = config.lr_at(step);

  ++state.t;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto& p = params.tensors[t].data;
    auto& m = state.m.tensors[t].data;
    auto& v = state.v.tensors[t].data;
    const auto& g = grad.tensors[t].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      p[i] -= r.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
  if (!params.all_finite()) throw Error(Errc::NonFiniteLoss, "parameters became non-finite at step " + std::to_string(step));
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[4] = {'M', 'M', 'L', 'M'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  const U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

struct ByteReader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  template <typename T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw Error(Errc::BadFormat, "checkpoint truncated");
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(bytes[pos + i]) << (8 * i);
    pos += sizeof(T);
    return static_cast<T>(u);
  }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  const auto& c = params.config;
  std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 4);
  put(out, kCkptVersion);
  put(out, c.vocab_size);
  put(out, c.dim);
  put(out, c.num_layers);
  put(out, c.num_heads);
  put(out, c.max_seq_len);
  put(out, c.seed);
  put(out, std::bit_cast<std::uint64_t>(c.init_std));
  put(out, static_cast<std::uint32_t>(params.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : params.tensors) {
    put(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto s : t.shape) put(out, static_cast<std::uint64_t>(s));
    put(out, offset);
    offset += t.data.size() * 4;
  }
  for (const auto& t : params.tensors) {
    for (double v : t.data) put(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(Errc::Io, "write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) throw Error(Errc::BadFormat, "missing MMLM magic");
  ByteReader r{bytes, 4};
  if (r.get<std::uint32_t>() != kCkptVersion) throw Error(Errc::BadFormat, "unsupported checkpoint version");
  ModelConfig c;
  c.vocab_size = r.get<std::uint32_t>();
  c.dim = r.get<std::uint32_t>();
  c.num_layers = r.get<std::uint32_t>();
  c.num_heads = r.get<std::uint32_t>();
  c.max_seq_len = r.get<std::uint32_t>();
  c.seed = r.get<std::uint64_t>();
  c.init_std = std::bit_cast<double>(r.get<std::uint64_t>());
  c.validate();
  ModelParams p;
  p.config = c;
  p.tensors = layout(c);
  if (r.get<std::uint32_t>() != p.tensors.size()) throw Error(Errc::BadFormat, "tensor count mismatch");
  std::vector<std::uint64_t> offsets;
  for (auto& t : p.tensors) {
    const auto len = r.get<std::uint32_t>();
    if (r.pos + len > bytes.size()) throw Error(Errc::BadFormat, "checkpoint truncated");
    const std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos), bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
    r.pos += len;
    const auto ndim = r.get<std::uint32_t>();
    std::vector<std::size_t> shape(ndim);
    for (auto& s : shape) s = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (name != t.name || shape != t.shape) throw Error(Errc::BadFormat, "unexpected tensor " + name);
    offsets.push_back(r.get<std::uint64_t>());
  }
  const std::size_t base = r.pos;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    auto& t = p.tensors[i];
    ByteReader tr{bytes, base + offsets[i]};
    for (double& v : t.data) {
      const float fv = std::bit_cast<float>(tr.get<std::uint32_t>());
      if (!std::isfinite(fv)) throw Error(Errc::BadFormat, "non-finite parameter in " + t.name);
      v = fv;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Incremental decoding

DecoderState IncrementalDecoder::start() const {
  DecoderState s;
  s.keys.resize(params_.config.num_layers);
  s.values.resize(params_.config.num_layers);
  return s;
}

std::vector<double> IncrementalDecoder::append(DecoderState& state, TokenId token) const {
  const auto& p = params_;
  const auto& cfg = p.config;
  const std::size_t d = cfg.dim, h = cfg.hidden(), heads = cfg.num_heads, V = cfg.vocab_size;
  const std::size_t i = state.length;
  if (i >= cfg.max_seq_len) throw Error(Errc::PromptTooLong, "context exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  check_token(cfg, token);
  using S = ModelParams::LayerSlot;

  std::vector<double> x(d), xn(d), q(d), att(d), proj(d), hid(h), mlp(d), scratch;
  const auto& emb = p.token_embedding().data;
  const auto& pos = p.position_embedding().data;
  for (std::size_t j = 0; j < d; ++j) x[j] = emb[token * d + j] + pos[i * d + j];
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    rmsnorm_row(x.data(), p.layer(l, S::Ln1).data.data(), xn.data(), d);
    auto& keys = state.keys[l];
    auto& values = state.values[l];
    keys.resize((i + 1) * d, 0.0);
    values.resize((i + 1) * d, 0.0);
    std::fill(q.begin(), q.end(), 0.0);
    kernels::matmul_acc(xn, p.layer(l, S::Wq).data, q, 1, d, d);
    kernels::matmul_acc(xn, p.layer(l, S::Wk).data, std::span<double>(keys).subspan(i * d, d), 1, d, d);
    kernels::matmul_acc(xn, p.layer(l, S::Wv).data, std::span<double>(values).subspan(i * d, d), 1, d, d);
    attention_row(i, q.data(), keys.data(), values.data(), d, heads, att.data(), nullptr, 0, scratch);
    std::fill(proj.begin(), proj.end(), 0.0);
    kernels::matmul_acc(att, p.layer(l, S::Wo).data, proj, 1, d, d);
    for (std::size_t j = 0; j < d; ++j) x[j] += proj[j];
    rmsnorm_row(x.data(), p.layer(l, S::Ln2).data.data(), xn.data(), d);
    std::fill(hid.begin(), hid.end(), 0.0);
    kernels::matmul_acc(xn, p.layer(l, S::W1).data, hid, 1, d, h);
    const auto& b1 = p.layer(l, S::B1).data;
    for (std::size_t j = 0; j < h; ++j) {
      hid[j] += b1[j];
      hid[j] = gelu(hid[j]);
    }
    std::fill(mlp.begin(), mlp.end(), 0.0);
    kernels::matmul_acc(hid, p.layer(l, S::W2).data, mlp, 1, h, d);
    const auto& b2 = p.layer(l, S::B2).data;
    for (std::size_t j = 0; j < d; ++j) x[j] += mlp[j] + b2[j];
  }
  rmsnorm_row(x.data(), p.final_norm().data.data(), xn.data(), d);
  std::vector<double> logits(V, 0.0);
  kernels::matmul_acc(xn, p.output_projection().data, logits, 1, d, V);
  state.length = i + 1;
  return logits;
}

}  // namespace mmseq
