#include "ual/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <thread>

#include "ual/error.hpp"
#include "ual/loss.hpp"
#include "ual/tokenizer.hpp"

namespace ual {

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw InputError(std::string("invalid model config: ") + what);
  };
  require(vocab_size >= 2, "vocab_size must be >= 2");
  require(context_length >= 2, "context_length must be >= 2");
  require(embed_dim >= 1 && num_heads >= 1, "embed_dim and num_heads must be positive");
  require(embed_dim % num_heads == 0, "embed_dim must be divisible by num_heads");
  require(num_layers >= 0, "num_layers must be non-negative");
  require(mlp_ratio >= 1, "mlp_ratio must be >= 1");
}

ParameterLayout ParameterLayout::for_config(const ModelConfig& config) {
  config.validate();
  ParameterLayout layout;
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto T = static_cast<std::size_t>(config.context_length);
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const auto h = static_cast<std::size_t>(config.hidden_dim());

  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t size = 1;
    for (auto s : shape) size *= s;
    layout.tensors.push_back({std::move(name), std::move(shape), layout.total, size});
    layout.total += size;
    return layout.tensors.size() - 1;
  };

  layout.token_embedding = add("wte", {V, d});
  layout.position_embedding = add("wpe", {T, d});
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b{};
    b.ln1_gain = add(p + "ln1.gain", {d});
    b.ln1_bias = add(p + "ln1.bias", {d});
    b.query = add(p + "attn.query", {d, d});
    b.key = add(p + "attn.key", {d, d});
    b.value = add(p + "attn.value", {d, d});
    b.output = add(p + "attn.output", {d, d});
    b.ln2_gain = add(p + "ln2.gain", {d});
    b.ln2_bias = add(p + "ln2.bias", {d});
    b.fc_in = add(p + "mlp.fc_in.weight", {d, h});
    b.fc_in_bias = add(p + "mlp.fc_in.bias", {h});
    b.fc_out = add(p + "mlp.fc_out.weight", {h, d});
    b.fc_out_bias = add(p + "mlp.fc_out.bias", {d});
    layout.blocks.push_back(b);
  }
  layout.final_gain = add("ln_f.gain", {d});
  layout.final_bias = add("ln_f.bias", {d});
  layout.lm_head = add("lm_head", {d, V});
  return layout;
}

const TensorInfo* ParameterLayout::find(const std::string& name) const noexcept {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <typename Real>
Parameters<Real> Parameters<Real>::zeros(const ModelConfig& config) {
  Parameters p{config, ParameterLayout::for_config(config), {}};
  p.data.assign(p.layout.total, Real{0});
  return p;
}

template <typename Real>
Parameters<Real> Parameters<Real>::initialized(const ModelConfig& config) {
  auto p = zeros(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * std::max(1, config.num_layers));

  auto fill_normal = [&](std::size_t idx, double stddev) {
    for (auto& x : p.tensor(p.layout.tensors[idx])) x = static_cast<Real>(stddev * normal(rng));
  };
  auto fill_const = [&](std::size_t idx, Real value) {
    auto t = p.tensor(p.layout.tensors[idx]);
    std::fill(t.begin(), t.end(), value);
  };

  fill_normal(p.layout.token_embedding, base);
  fill_normal(p.layout.position_embedding, base);
  for (const auto& b : p.layout.blocks) {
    fill_const(b.ln1_gain, Real{1});
    fill_normal(b.query, base);
    fill_normal(b.key, base);
    fill_normal(b.value, base);
    fill_normal(b.output, residual);
    fill_const(b.ln2_gain, Real{1});
    fill_normal(b.fc_in, base);
    fill_normal(b.fc_out, residual);
  }
  fill_const(p.layout.final_gain, Real{1});
  fill_normal(p.layout.lm_head, base);
  return p;
}

namespace {

constexpr double kLayerNormEps = 1e-5;

// out[n x o] = in[n x i] * w[i x o] (+ bias)
template <typename Real>
void linear_forward(Real* out, const Real* in, const Real* w, const Real* bias, std::size_t n, std::size_t in_dim,
                    std::size_t out_dim) {
  for (std::size_t r = 0; r < n; ++r) {
    Real* o = out + r * out_dim;
    if (bias) {
      std::copy(bias, bias + out_dim, o);
    } else {
      std::fill(o, o + out_dim, Real{0});
    }
    const Real* x = in + r * in_dim;
    for (std::size_t k = 0; k < in_dim; ++k) {
      const Real a = x[k];
      const Real* wk = w + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += a * wk[j];
    }
  }
}

// din += dout * w^T; dw += in^T * dout; dbias += colsum(dout)
template <typename Real>
void linear_backward(Real* din, Real* dw, Real* dbias, const Real* dout, const Real* in, const Real* w,
                     std::size_t n, std::size_t in_dim, std::size_t out_dim) {
  for (std::size_t r = 0; r < n; ++r) {
    const Real* g = dout + r * out_dim;
    const Real* x = in + r * in_dim;
    Real* dx = din + r * in_dim;
    for (std::size_t k = 0; k < in_dim; ++k) {
      const Real* wk = w + k * out_dim;
      Real* dwk = dw + k * out_dim;
      const Real a = x[k];
      Real acc = 0;
      for (std::size_t j = 0; j < out_dim; ++j) {
        acc += g[j] * wk[j];
        dwk[j] += a * g[j];
      }
      dx[k] += acc;
    }
    if (dbias) {
      for (std::size_t j = 0; j < out_dim; ++j) dbias[j] += g[j];
    }
  }
}

template <typename Real>
void layer_norm_forward(Real* out, Real* mean, Real* rstd, const Real* in, const Real* gain, const Real* bias,
                        std::size_t n, std::size_t d) {
  for (std::size_t r = 0; r < n; ++r) {
    const Real* x = in + r * d;
    Real m = 0;
    for (std::size_t k = 0; k < d; ++k) m += x[k];
    m /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t k = 0; k < d; ++k) var += (x[k] - m) * (x[k] - m);
    var /= static_cast<Real>(d);
    const Real s = Real{1} / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    Real* o = out + r * d;
    for (std::size_t k = 0; k < d; ++k) o[k] = (x[k] - m) * s * gain[k] + bias[k];
    mean[r] = m;
    rstd[r] = s;
  }
}

// din += d(loss)/d(in) given dout; dgain/dbias accumulate.
template <typename Real>
void layer_norm_backward(Real* din, Real* dgain, Real* dbias, const Real* dout, const Real* in, const Real* mean,
                         const Real* rstd, const Real* gain, std::size_t n, std::size_t d) {
  for (std::size_t r = 0; r < n; ++r) {
    const Real* x = in + r * d;
    const Real* g = dout + r * d;
    Real mean_dxhat = 0;
    Real mean_dxhat_xhat = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const Real xhat = (x[k] - mean[r]) * rstd[r];
      const Real dxhat = g[k] * gain[k];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
      dgain[k] += g[k] * xhat;
      dbias[k] += g[k];
    }
    mean_dxhat /= static_cast<Real>(d);
    mean_dxhat_xhat /= static_cast<Real>(d);
    Real* dx = din + r * d;
    for (std::size_t k = 0; k < d; ++k) {
      const Real xhat = (x[k] - mean[r]) * rstd[r];
      const Real dxhat = g[k] * gain[k];
      dx[k] += rstd[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

template <typename Real>
constexpr Real kGeluScale = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)

template <typename Real>
Real gelu(Real x) {
  const Real inner = kGeluScale<Real> * (x + Real{0.044715} * x * x * x);
  return Real{0.5} * x * (Real{1} + std::tanh(inner));
}

template <typename Real>
Real gelu_grad(Real x) {
  const Real inner = kGeluScale<Real> * (x + Real{0.044715} * x * x * x);
  const Real th = std::tanh(inner);
  const Real dinner = kGeluScale<Real> * (Real{1} + Real{3} * Real{0.044715} * x * x);
  return Real{0.5} * (Real{1} + th) + Real{0.5} * x * (Real{1} - th * th) * dinner;
}

template <typename Real>
struct BlockCache {
  std::vector<Real> input;
  std::vector<Real> ln1_out, ln1_mean, ln1_rstd;
  std::vector<Real> q, k, v;
  std::vector<Real> probs;  // H x n x n
  std::vector<Real> attn_out;
  std::vector<Real> mid;
  std::vector<Real> ln2_out, ln2_mean, ln2_rstd;
  std::vector<Real> pre_act, act;
};

template <typename Real>
struct SequenceCache {
  std::size_t n = 0;
  std::vector<BlockCache<Real>> blocks;
  std::vector<Real> final_in, final_mean, final_rstd;
  std::vector<Real> features;
  std::vector<Real> logits;
};

template <typename Real>
void forward_sequence(const Parameters<Real>& params, std::span<const int> tokens, SequenceCache<Real>& cache) {
  const auto& cfg = params.config;
  const auto& L = params.layout;
  const std::size_t n = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto H = static_cast<std::size_t>(cfg.num_heads);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const auto hidden = static_cast<std::size_t>(cfg.hidden_dim());
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(hd));
  auto P = [&](std::size_t idx) { return params.data.data() + L.tensors[idx].offset; };

  if (n > static_cast<std::size_t>(cfg.context_length)) {
    throw ShapeMismatch("sequence length " + std::to_string(n) + " exceeds context length " +
                        std::to_string(cfg.context_length));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw ShapeMismatch("token id " + std::to_string(t) + " outside vocabulary");
  }

  cache.n = n;
  std::vector<Real> x(n * d);
  const Real* wte = P(L.token_embedding);
  const Real* wpe = P(L.position_embedding);
  for (std::size_t t = 0; t < n; ++t) {
    const Real* e = wte + static_cast<std::size_t>(tokens[t]) * d;
    const Real* p = wpe + t * d;
    for (std::size_t k = 0; k < d; ++k) x[t * d + k] = e[k] + p[k];
  }

  cache.blocks.resize(L.blocks.size());
  for (std::size_t l = 0; l < L.blocks.size(); ++l) {
    const auto& b = L.blocks[l];
    auto& c = cache.blocks[l];
    c.input = x;
    c.ln1_out.resize(n * d);
    c.ln1_mean.resize(n);
    c.ln1_rstd.resize(n);
    layer_norm_forward(c.ln1_out.data(), c.ln1_mean.data(), c.ln1_rstd.data(), c.input.data(), P(b.ln1_gain),
                       P(b.ln1_bias), n, d);
    c.q.resize(n * d);
    c.k.resize(n * d);
    c.v.resize(n * d);
    linear_forward<Real>(c.q.data(), c.ln1_out.data(), P(b.query), nullptr, n, d, d);
    linear_forward<Real>(c.k.data(), c.ln1_out.data(), P(b.key), nullptr, n, d, d);
    linear_forward<Real>(c.v.data(), c.ln1_out.data(), P(b.value), nullptr, n, d, d);

    c.probs.assign(H * n * n, Real{0});
    c.attn_out.assign(n * d, Real{0});
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        Real* row = c.probs.data() + (h * n + t) * n;
        const Real* qt = c.q.data() + t * d + off;
        Real max = -std::numeric_limits<Real>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          if (tokens[u] == kPad) continue;
          const Real* ku = c.k.data() + u * d + off;
          Real s = 0;
          for (std::size_t j = 0; j < hd; ++j) s += qt[j] * ku[j];
          row[u] = s * scale;
          max = std::max(max, row[u]);
        }
        if (max == -std::numeric_limits<Real>::infinity()) continue;  // no visible keys
        Real sum = 0;
        for (std::size_t u = 0; u <= t; ++u) {
          if (tokens[u] == kPad) continue;
          row[u] = std::exp(row[u] - max);
          sum += row[u];
        }
        Real* ot = c.attn_out.data() + t * d + off;
        for (std::size_t u = 0; u <= t; ++u) {
          if (tokens[u] == kPad) continue;
          row[u] /= sum;
          const Real* vu = c.v.data() + u * d + off;
          for (std::size_t j = 0; j < hd; ++j) ot[j] += row[u] * vu[j];
        }
      }
    }

    c.mid.resize(n * d);
    linear_forward<Real>(c.mid.data(), c.attn_out.data(), P(b.output), nullptr, n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) c.mid[i] += c.input[i];

    c.ln2_out.resize(n * d);
    c.ln2_mean.resize(n);
    c.ln2_rstd.resize(n);
    layer_norm_forward(c.ln2_out.data(), c.ln2_mean.data(), c.ln2_rstd.data(), c.mid.data(), P(b.ln2_gain),
                       P(b.ln2_bias), n, d);
    c.pre_act.resize(n * hidden);
    c.act.resize(n * hidden);
    linear_forward<Real>(c.pre_act.data(), c.ln2_out.data(), P(b.fc_in), P(b.fc_in_bias), n, d, hidden);
    for (std::size_t i = 0; i < n * hidden; ++i) c.act[i] = gelu(c.pre_act[i]);
    linear_forward<Real>(x.data(), c.act.data(), P(b.fc_out), P(b.fc_out_bias), n, hidden, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += c.mid[i];
  }

  cache.final_in = std::move(x);
  cache.final_mean.resize(n);
  cache.final_rstd.resize(n);
  cache.features.resize(n * d);
  layer_norm_forward(cache.features.data(), cache.final_mean.data(), cache.final_rstd.data(), cache.final_in.data(),
                     P(L.final_gain), P(L.final_bias), n, d);
  cache.logits.resize(n * V);
  linear_forward<Real>(cache.logits.data(), cache.features.data(), P(L.lm_head), nullptr, n, d, V);
}

template <typename Real>
void backward_sequence(const Parameters<Real>& params, std::span<const int> tokens, const SequenceCache<Real>& cache,
                       std::span<const Real> dlogits, Parameters<Real>& grads) {
  const auto& cfg = params.config;
  const auto& L = params.layout;
  const std::size_t n = cache.n;
  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto H = static_cast<std::size_t>(cfg.num_heads);
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  const auto hidden = static_cast<std::size_t>(cfg.hidden_dim());
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(hd));
  auto P = [&](std::size_t idx) { return params.data.data() + L.tensors[idx].offset; };
  auto G = [&](std::size_t idx) { return grads.data.data() + L.tensors[idx].offset; };

  std::vector<Real> dfeatures(n * d, Real{0});
  linear_backward<Real>(dfeatures.data(), G(L.lm_head), nullptr, dlogits.data(), cache.features.data(),
                        P(L.lm_head), n, d, V);
  std::vector<Real> dx(n * d, Real{0});
  layer_norm_backward(dx.data(), G(L.final_gain), G(L.final_bias), dfeatures.data(), cache.final_in.data(),
                      cache.final_mean.data(), cache.final_rstd.data(), P(L.final_gain), n, d);

  std::vector<Real> dact(n * hidden), dpre(n * hidden), dln(n * d), dattn(n * d);
  std::vector<Real> dq(n * d), dk(n * d), dv(n * d), dprob(n);
  for (std::size_t l = L.blocks.size(); l-- > 0;) {
    const auto& b = L.blocks[l];
    const auto& c = cache.blocks[l];

    // x_out = mid + fc_out(gelu(fc_in(ln2(mid))))
    std::fill(dact.begin(), dact.end(), Real{0});
    linear_backward<Real>(dact.data(), G(b.fc_out), G(b.fc_out_bias), dx.data(), c.act.data(), P(b.fc_out), n,
                          hidden, d);
    for (std::size_t i = 0; i < n * hidden; ++i) dpre[i] = dact[i] * gelu_grad(c.pre_act[i]);
    std::fill(dln.begin(), dln.end(), Real{0});
    linear_backward<Real>(dln.data(), G(b.fc_in), G(b.fc_in_bias), dpre.data(), c.ln2_out.data(), P(b.fc_in), n, d,
                          hidden);
    // dx now holds d(loss)/d(mid)
    layer_norm_backward(dx.data(), G(b.ln2_gain), G(b.ln2_bias), dln.data(), c.mid.data(), c.ln2_mean.data(),
                        c.ln2_rstd.data(), P(b.ln2_gain), n, d);

    // mid = input + output(attn)
    std::fill(dattn.begin(), dattn.end(), Real{0});
    linear_backward<Real>(dattn.data(), G(b.output), nullptr, dx.data(), c.attn_out.data(), P(b.output), n, d, d);

    std::fill(dq.begin(), dq.end(), Real{0});
    std::fill(dk.begin(), dk.end(), Real{0});
    std::fill(dv.begin(), dv.end(), Real{0});
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        const Real* row = c.probs.data() + (h * n + t) * n;
        const Real* dot = dattn.data() + t * d + off;
        Real weighted = 0;
        for (std::size_t u = 0; u <= t; ++u) {
          if (row[u] == Real{0}) {
            dprob[u] = 0;
            continue;
          }
          const Real* vu = c.v.data() + u * d + off;
          Real* dvu = dv.data() + u * d + off;
          Real s = 0;
          for (std::size_t j = 0; j < hd; ++j) {
            s += dot[j] * vu[j];
            dvu[j] += row[u] * dot[j];
          }
          dprob[u] = s;
          weighted += row[u] * s;
        }
        const Real* qt = c.q.data() + t * d + off;
        Real* dqt = dq.data() + t * d + off;
        for (std::size_t u = 0; u <= t; ++u) {
          if (row[u] == Real{0}) continue;
          const Real ds = row[u] * (dprob[u] - weighted) * scale;
          const Real* ku = c.k.data() + u * d + off;
          Real* dku = dk.data() + u * d + off;
          for (std::size_t j = 0; j < hd; ++j) {
            dqt[j] += ds * ku[j];
            dku[j] += ds * qt[j];
          }
        }
      }
    }

    std::fill(dln.begin(), dln.end(), Real{0});
    linear_backward<Real>(dln.data(), G(b.query), nullptr, dq.data(), c.ln1_out.data(), P(b.query), n, d, d);
    linear_backward<Real>(dln.data(), G(b.key), nullptr, dk.data(), c.ln1_out.data(), P(b.key), n, d, d);
    linear_backward<Real>(dln.data(), G(b.value), nullptr, dv.data(), c.ln1_out.data(), P(b.value), n, d, d);
    // dx now holds d(loss)/d(input)
    layer_norm_backward(dx.data(), G(b.ln1_gain), G(b.ln1_bias), dln.data(), c.input.data(), c.ln1_mean.data(),
                        c.ln1_rstd.data(), P(b.ln1_gain), n, d);
  }

  Real* dwte = G(L.token_embedding);
  Real* dwpe = G(L.position_embedding);
  for (std::size_t t = 0; t < n; ++t) {
    Real* de = dwte + static_cast<std::size_t>(tokens[t]) * d;
    Real* dp = dwpe + t * d;
    for (std::size_t k = 0; k < d; ++k) {
      de[k] += dx[t * d + k];
      dp[k] += dx[t * d + k];
    }
  }
}

template <typename Fn>
void run_strided(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void check_batch(const ModelConfig& config, const Batch& batch) {
  const std::size_t cells = batch.batch_size() * batch.seq_len();
  if (batch.inputs.tokens.size() != cells || batch.targets.size() != cells || batch.loss_mask.size() != cells ||
      batch.smoothing.size() != batch.batch_size()) {
    throw ShapeMismatch("batch arrays disagree with B x T");
  }
  for (std::size_t i = 0; i < cells; ++i) {
    if (batch.loss_mask[i] && (batch.targets[i] < 0 || batch.targets[i] >= config.vocab_size)) {
      throw ShapeMismatch("target id outside vocabulary");
    }
  }
}

}  // namespace

template <typename Real>
ForwardResult<Real> forward(const Parameters<Real>& params, const TokenBatch& tokens, bool want_features) {
  if (tokens.tokens.size() != tokens.batch_size * tokens.seq_len) throw ShapeMismatch("token matrix is not B x T");
  const auto V = static_cast<std::size_t>(params.config.vocab_size);
  const auto d = static_cast<std::size_t>(params.config.embed_dim);
  ForwardResult<Real> out;
  out.batch_size = tokens.batch_size;
  out.seq_len = tokens.seq_len;
  out.logits.resize(tokens.batch_size * tokens.seq_len * V);
  if (want_features) out.features.emplace(tokens.batch_size * tokens.seq_len * d);
  SequenceCache<Real> cache;
  for (std::size_t b = 0; b < tokens.batch_size; ++b) {
    forward_sequence(params, tokens.row(b), cache);
    std::copy(cache.logits.begin(), cache.logits.end(), out.logits.begin() + b * tokens.seq_len * V);
    if (want_features) {
      std::copy(cache.features.begin(), cache.features.end(), out.features->begin() + b * tokens.seq_len * d);
    }
  }
  return out;
}

template <typename Real>
LossAndGrad<Real> loss_and_grad(const Parameters<Real>& params, const Batch& batch,
                                const SmoothingOverride& override_smoothing, int threads) {
  check_batch(params.config, batch);
  const std::size_t B = batch.batch_size();
  const std::size_t T = batch.seq_len();
  const auto V = static_cast<std::size_t>(params.config.vocab_size);
  if (B == 0) throw ShapeMismatch("empty batch");

  LossAndGrad<Real> result{Real{0}, Parameters<Real>::zeros(params.config), std::vector<double>(B),
                           std::vector<double>(B)};
  std::vector<std::size_t> counts(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) counts[b] += batch.loss_mask[b * T + t] ? 1 : 0;
    if (counts[b] == 0) throw EmptyMask();
  }

  std::vector<SequenceCache<Real>> caches(B);
  run_strided(B, threads, [&](std::size_t b) {
    forward_sequence(params, batch.inputs.row(b), caches[b]);
    double nll = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      if (!batch.loss_mask[b * T + t]) continue;
      std::span<const Real> row(caches[b].logits.data() + t * V, V);
      nll += static_cast<double>(smoothed_token_loss<Real>(row, static_cast<std::size_t>(batch.targets[b * T + t]), 0.0));
    }
    result.sample_nll[b] = nll / static_cast<double>(counts[b]);
  });

  for (std::size_t b = 0; b < B; ++b) {
    result.smoothing[b] = override_smoothing ? override_smoothing(b, result.sample_nll[b]) : batch.smoothing[b];
  }

  std::vector<Real> sample_loss(B, Real{0});
  std::vector<Parameters<Real>> sample_grads(threads > 1 ? B : 0);
  Parameters<Real> scratch = threads > 1 ? Parameters<Real>{} : Parameters<Real>::zeros(params.config);
  auto backward_one = [&](std::size_t b, Parameters<Real>& grad) {
    const Real norm = Real{1} / static_cast<Real>(counts[b] * B);
    std::vector<Real> dlogits(T * V, Real{0});
    Real total = 0;
    for (std::size_t t = 0; t < T; ++t) {
      if (!batch.loss_mask[b * T + t]) continue;
      const auto target = static_cast<std::size_t>(batch.targets[b * T + t]);
      std::span<const Real> row(caches[b].logits.data() + t * V, V);
      std::span<Real> drow(dlogits.data() + t * V, V);
      total += smoothed_token_loss<Real>(row, target, result.smoothing[b]);
      smoothed_token_grad<Real>(row, target, result.smoothing[b], drow);
      for (auto& g : drow) g *= norm;
    }
    sample_loss[b] = total / static_cast<Real>(counts[b]);
    backward_sequence(params, batch.inputs.row(b), caches[b], std::span<const Real>(dlogits), grad);
  };

  if (threads > 1) {
    run_strided(B, threads, [&](std::size_t b) {
      sample_grads[b] = Parameters<Real>::zeros(params.config);
      backward_one(b, sample_grads[b]);
      caches[b] = {};
    });
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < result.grads.data.size(); ++i) result.grads.data[i] += sample_grads[b].data[i];
    }
  } else {
    for (std::size_t b = 0; b < B; ++b) {
      std::fill(scratch.data.begin(), scratch.data.end(), Real{0});
      backward_one(b, scratch);
      caches[b] = {};
      for (std::size_t i = 0; i < result.grads.data.size(); ++i) result.grads.data[i] += scratch.data[i];
    }
  }

  for (std::size_t b = 0; b < B; ++b) result.loss += sample_loss[b];
  result.loss /= static_cast<Real>(B);
  return result;
}

template struct Parameters<float>;
template struct Parameters<double>;
template ForwardResult<float> forward(const Parameters<float>&, const TokenBatch&, bool);
template ForwardResult<double> forward(const Parameters<double>&, const TokenBatch&, bool);
template LossAndGrad<float> loss_and_grad(const Parameters<float>&, const Batch&, const SmoothingOverride&, int);
template LossAndGrad<double> loss_and_grad(const Parameters<double>&, const Batch&, const SmoothingOverride&, int);

}  // namespace ual
