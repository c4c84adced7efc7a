#include "daptkit/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <numbers>
#include <sstream>

#include "daptkit/hash.hpp"
#include "daptkit/rng.hpp"

namespace daptkit::model {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstVecMap = Eigen::Map<const RowVec<T>>;
template <typename T>
using VecMap = Eigen::Map<RowVec<T>>;

constexpr double kNormEpsilon = 1e-12;
constexpr double kInitStddev = 0.02;
constexpr std::size_t kTensorsBeforeLayers = 4;
constexpr std::size_t kTensorsPerLayer = 16;
constexpr char kMagic[8] = {'D', 'A', 'P', 'T', 'C', 'K', 'P', 'T'};

// Storage slots; must agree with parameter_layout().
struct LayerSlots {
  std::size_t query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  std::size_t attn_scale, attn_shift;
  std::size_t ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  std::size_t ffn_scale, ffn_shift;
};

struct Slots {
  std::size_t token = 0, position = 1, emb_scale = 2, emb_shift = 3;
  std::vector<LayerSlots> layers;
  std::size_t mlm_bias = 0, cls_w = 0, cls_b = 0;

  explicit Slots(int num_layers) {
    for (int l = 0; l < num_layers; ++l) {
      const std::size_t b = kTensorsBeforeLayers + kTensorsPerLayer * static_cast<std::size_t>(l);
      layers.push_back({b, b + 1, b + 2, b + 3, b + 4, b + 5, b + 6, b + 7, b + 8, b + 9, b + 10, b + 11, b + 12,
                        b + 13, b + 14, b + 15});
    }
    mlm_bias = kTensorsBeforeLayers + kTensorsPerLayer * static_cast<std::size_t>(num_layers);
    cls_w = mlm_bias + 1;
    cls_b = mlm_bias + 2;
  }
};

template <typename T>
ConstMatMap<T> mat(const Parameters<T>& p, std::size_t slot) {
  const auto& t = p.tensors[slot];
  return {t.values.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1])};
}

template <typename T>
MatMap<T> mat(Parameters<T>& p, std::size_t slot) {
  auto& t = p.tensors[slot];
  return {t.values.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1])};
}

template <typename T>
ConstVecMap<T> vec(const Parameters<T>& p, std::size_t slot) {
  const auto& t = p.tensors[slot];
  return {t.values.data(), static_cast<Eigen::Index>(t.values.size())};
}

template <typename T>
VecMap<T> vec(Parameters<T>& p, std::size_t slot) {
  auto& t = p.tensors[slot];
  return {t.values.data(), static_cast<Eigen::Index>(t.values.size())};
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
struct NormCache {
  Mat<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
Mat<T> norm_forward(const Mat<T>& x, ConstVecMap<T> scale, ConstVecMap<T> shift, NormCache<T>& cache) {
  const auto rows = x.rows();
  cache.xhat.resize(rows, x.cols());
  cache.inv_std.resize(static_cast<std::size_t>(rows));
  Mat<T> y(rows, x.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const RowVec<T> centered = x.row(r).array() - mean;
    const T var = centered.squaredNorm() / T(x.cols());
    const T inv = T(1) / std::sqrt(var + T(kNormEpsilon));
    cache.inv_std[static_cast<std::size_t>(r)] = inv;
    cache.xhat.row(r) = centered * inv;
    y.row(r) = cache.xhat.row(r).cwiseProduct(scale) + shift;
  }
  return y;
}

template <typename T>
Mat<T> norm_backward(const Mat<T>& dy, const NormCache<T>& cache, ConstVecMap<T> scale, VecMap<T> dscale,
                     VecMap<T> dshift) {
  dscale += dy.cwiseProduct(cache.xhat).colwise().sum();
  dshift += dy.colwise().sum();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVec<T> dxhat = dy.row(r).cwiseProduct(scale);
    const T mean_d = dxhat.mean();
    const T mean_dx = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
    dx.row(r) = (dxhat.array() - mean_d - cache.xhat.row(r).array() * mean_dx) * cache.inv_std[static_cast<std::size_t>(r)];
  }
  return dx;
}

template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Mat<T> mask(rows, cols);
  const T keep_scale = T(1.0 / (1.0 - rate));
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) mask(r, c) = rng.uniform() < rate ? T(0) : keep_scale;
  }
  return mask;
}

template <typename T>
struct LayerCache {
  Mat<T> input;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;
  Mat<T> context;
  Mat<T> attn_mask;
  NormCache<T> attn_norm;
  Mat<T> hidden;
  Mat<T> ffn_pre;
  Mat<T> ffn_act;
  Mat<T> ffn_mask;
  NormCache<T> ffn_norm;
};

template <typename T>
struct EncoderCache {
  Mat<T> emb_mask;
  NormCache<T> emb_norm;
  std::vector<LayerCache<T>> layers;
  Mat<T> output;
};

// Runs the encoder over the first n positions only. Keys at or beyond n are
// excluded from every softmax, which is exactly additive -inf masking of the
// padded columns; padded query rows never feed back into unpadded ones.
template <typename T>
class Encoder {
 public:
  explicit Encoder(const Parameters<T>& params) : p_(params), slots_(params.config.num_layers) {}

  const Slots& slots() const { return slots_; }

  void forward(std::span<const TokenId> ids, Eigen::Index n, Rng* dropout, EncoderCache<T>& cache) const {
    const ModelConfig& cfg = p_.config;
    const Eigen::Index hidden = cfg.hidden_dim;
    const double rate = cfg.dropout_rate;
    const bool drop = dropout != nullptr && rate > 0.0;

    const auto tok = mat(p_, slots_.token);
    const auto pos = mat(p_, slots_.position);
    Mat<T> x(n, hidden);
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = tok.row(ids[static_cast<std::size_t>(i)]) + pos.row(i);
    Mat<T> h = norm_forward(x, vec(p_, slots_.emb_scale), vec(p_, slots_.emb_shift), cache.emb_norm);
    if (drop) {
      cache.emb_mask = dropout_mask<T>(n, hidden, rate, *dropout);
      h = h.cwiseProduct(cache.emb_mask);
    }

    const int heads = cfg.num_heads;
    const Eigen::Index head_dim = hidden / heads;
    const T scale = T(1) / std::sqrt(T(head_dim));
    cache.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (std::size_t l = 0; l < slots_.layers.size(); ++l) {
      const LayerSlots& s = slots_.layers[l];
      LayerCache<T>& lc = cache.layers[l];
      lc.input = std::move(h);
      lc.q = (lc.input * mat(p_, s.query_w)).rowwise() + vec(p_, s.query_b);
      lc.k = (lc.input * mat(p_, s.key_w)).rowwise() + vec(p_, s.key_b);
      lc.v = (lc.input * mat(p_, s.value_w)).rowwise() + vec(p_, s.value_b);

      lc.context.resize(n, hidden);
      lc.probs.resize(static_cast<std::size_t>(heads));
      for (int hd = 0; hd < heads; ++hd) {
        const Eigen::Index c0 = hd * head_dim;
        Mat<T> scores = (lc.q.middleCols(c0, head_dim) * lc.k.middleCols(c0, head_dim).transpose()) * scale;
        for (Eigen::Index r = 0; r < n; ++r) {
          const T m = scores.row(r).maxCoeff();
          scores.row(r) = (scores.row(r).array() - m).exp();
          scores.row(r) /= scores.row(r).sum();
        }
        lc.context.middleCols(c0, head_dim) = scores * lc.v.middleCols(c0, head_dim);
        lc.probs[static_cast<std::size_t>(hd)] = std::move(scores);
      }

      Mat<T> attn = (lc.context * mat(p_, s.out_w)).rowwise() + vec(p_, s.out_b);
      if (drop) {
        lc.attn_mask = dropout_mask<T>(n, hidden, rate, *dropout);
        attn = attn.cwiseProduct(lc.attn_mask);
      }
      lc.hidden = norm_forward(Mat<T>(lc.input + attn), vec(p_, s.attn_scale), vec(p_, s.attn_shift), lc.attn_norm);

      lc.ffn_pre = (lc.hidden * mat(p_, s.ffn_in_w)).rowwise() + vec(p_, s.ffn_in_b);
      lc.ffn_act = lc.ffn_pre.unaryExpr([](T v) { return gelu(v); });
      Mat<T> ffn = (lc.ffn_act * mat(p_, s.ffn_out_w)).rowwise() + vec(p_, s.ffn_out_b);
      if (drop) {
        lc.ffn_mask = dropout_mask<T>(n, hidden, rate, *dropout);
        ffn = ffn.cwiseProduct(lc.ffn_mask);
      }
      h = norm_forward(Mat<T>(lc.hidden + ffn), vec(p_, s.ffn_scale), vec(p_, s.ffn_shift), lc.ffn_norm);
    }
    cache.output = std::move(h);
  }

  void backward(std::span<const TokenId> ids, const EncoderCache<T>& cache, Mat<T> d_out, Parameters<T>& g) const {
    const ModelConfig& cfg = p_.config;
    const Eigen::Index n = d_out.rows();
    const int heads = cfg.num_heads;
    const Eigen::Index head_dim = cfg.hidden_dim / heads;
    const T scale = T(1) / std::sqrt(T(head_dim));

    Mat<T> dh = std::move(d_out);
    for (std::size_t li = slots_.layers.size(); li-- > 0;) {
      const LayerSlots& s = slots_.layers[li];
      const LayerCache<T>& lc = cache.layers[li];

      Mat<T> dsum = norm_backward(dh, lc.ffn_norm, vec(p_, s.ffn_scale), vec(g, s.ffn_scale), vec(g, s.ffn_shift));
      Mat<T> dhidden = dsum;
      const Mat<T> dffn = lc.ffn_mask.size() ? Mat<T>(dsum.cwiseProduct(lc.ffn_mask)) : dsum;
      mat(g, s.ffn_out_w) += lc.ffn_act.transpose() * dffn;
      vec(g, s.ffn_out_b) += dffn.colwise().sum();
      const Mat<T> dpre = (dffn * mat(p_, s.ffn_out_w).transpose())
                              .cwiseProduct(lc.ffn_pre.unaryExpr([](T v) { return gelu_grad(v); }));
      mat(g, s.ffn_in_w) += lc.hidden.transpose() * dpre;
      vec(g, s.ffn_in_b) += dpre.colwise().sum();
      dhidden += dpre * mat(p_, s.ffn_in_w).transpose();

      Mat<T> dres = norm_backward(dhidden, lc.attn_norm, vec(p_, s.attn_scale), vec(g, s.attn_scale),
                                  vec(g, s.attn_shift));
      Mat<T> dinput = dres;
      const Mat<T> dattn = lc.attn_mask.size() ? Mat<T>(dres.cwiseProduct(lc.attn_mask)) : dres;
      mat(g, s.out_w) += lc.context.transpose() * dattn;
      vec(g, s.out_b) += dattn.colwise().sum();
      const Mat<T> dctx = dattn * mat(p_, s.out_w).transpose();

      Mat<T> dq(n, cfg.hidden_dim), dk(n, cfg.hidden_dim), dv(n, cfg.hidden_dim);
      for (int hd = 0; hd < heads; ++hd) {
        const Eigen::Index c0 = hd * head_dim;
        const Mat<T>& probs = lc.probs[static_cast<std::size_t>(hd)];
        const Mat<T> dc = dctx.middleCols(c0, head_dim);
        dv.middleCols(c0, head_dim) = probs.transpose() * dc;
        Mat<T> dscores = dc * lc.v.middleCols(c0, head_dim).transpose();
        for (Eigen::Index r = 0; r < n; ++r) {
          const T dot = dscores.row(r).dot(probs.row(r));
          dscores.row(r) = probs.row(r).cwiseProduct((dscores.row(r).array() - dot).matrix());
        }
        dscores *= scale;
        dq.middleCols(c0, head_dim) = dscores * lc.k.middleCols(c0, head_dim);
        dk.middleCols(c0, head_dim) = dscores.transpose() * lc.q.middleCols(c0, head_dim);
      }
      mat(g, s.query_w) += lc.input.transpose() * dq;
      vec(g, s.query_b) += dq.colwise().sum();
      mat(g, s.key_w) += lc.input.transpose() * dk;
      vec(g, s.key_b) += dk.colwise().sum();
      mat(g, s.value_w) += lc.input.transpose() * dv;
      vec(g, s.value_b) += dv.colwise().sum();
      dinput += dq * mat(p_, s.query_w).transpose();
      dinput += dk * mat(p_, s.key_w).transpose();
      dinput += dv * mat(p_, s.value_w).transpose();
      dh = std::move(dinput);
    }

    if (cache.emb_mask.size()) dh = dh.cwiseProduct(cache.emb_mask);
    const Mat<T> dx = norm_backward(dh, cache.emb_norm, vec(p_, slots_.emb_scale), vec(g, slots_.emb_scale),
                                    vec(g, slots_.emb_shift));
    auto gtok = mat(g, slots_.token);
    auto gpos = mat(g, slots_.position);
    for (Eigen::Index i = 0; i < n; ++i) {
      gtok.row(ids[static_cast<std::size_t>(i)]) += dx.row(i);
      gpos.row(i) += dx.row(i);
    }
  }

 private:
  const Parameters<T>& p_;
  Slots slots_;
};

// Cross-entropy of each logit row against its target. Writes the loss-scaled
// softmax-minus-onehot into `dlogits` when requested.
template <typename T>
double cross_entropy_rows(const Mat<T>& logits, std::span<const TokenId> targets, T weight, Mat<T>* dlogits,
                          std::int64_t& correct) {
  double loss = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg = 0;
    const T m = logits.row(r).maxCoeff(&arg);
    const T lse = m + std::log((logits.row(r).array() - m).exp().sum());
    const auto target = static_cast<Eigen::Index>(targets[static_cast<std::size_t>(r)]);
    loss += static_cast<double>(weight * (lse - logits(r, target)));
    if (arg == target) ++correct;
    if (dlogits) {
      dlogits->row(r) = (logits.row(r).array() - lse).exp() * weight;
      (*dlogits)(r, target) -= weight;
    }
  }
  return loss;
}

void check_ids(std::span<const TokenId> ids, std::int32_t attention_len, const ModelConfig& cfg, std::size_t index) {
  if (ids.size() != static_cast<std::size_t>(cfg.max_seq)) {
    throw ValidationError("example " + std::to_string(index) + ": expected " + std::to_string(cfg.max_seq) +
                          " input ids, got " + std::to_string(ids.size()));
  }
  if (attention_len < 1 || attention_len > cfg.max_seq) {
    throw ValidationError("example " + std::to_string(index) + ": attention_len " + std::to_string(attention_len) +
                          " outside [1, " + std::to_string(cfg.max_seq) + "]");
  }
  for (std::int32_t i = 0; i < attention_len; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= cfg.vocab_size) {
      throw ValidationError("example " + std::to_string(index) + ": token id " + std::to_string(id) +
                            " outside the model vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
}

std::size_t count_masked(std::span<const mlm::MlmExample> batch, const ModelConfig& cfg) {
  if (batch.empty()) throw ValidationError("batch is empty");
  std::size_t total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    check_ids(ex.input_ids, ex.attention_len, cfg, i);
    if (ex.mask_positions.size() != ex.target_ids.size()) {
      throw ValidationError("example " + std::to_string(i) + ": mask_positions and target_ids differ in length");
    }
    for (std::size_t k = 0; k < ex.mask_positions.size(); ++k) {
      const auto p = ex.mask_positions[k];
      if (p < 0 || p >= ex.attention_len || (k > 0 && p <= ex.mask_positions[k - 1])) {
        throw ValidationError("example " + std::to_string(i) + ": mask positions must be sorted, unique and < " +
                              "attention_len");
      }
      if (ex.target_ids[k] < 0 || ex.target_ids[k] >= cfg.vocab_size) {
        throw ValidationError("example " + std::to_string(i) + ": target id out of range");
      }
    }
    total += ex.mask_positions.size();
  }
  if (total == 0) throw ValidationError("batch has no masked positions; the MLM loss is undefined");
  return total;
}

void check_classify_batch(std::span<const mlm::ClassifyExample> batch, const ModelConfig& cfg) {
  if (batch.empty()) throw ValidationError("batch is empty");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_ids(batch[i].input_ids, batch[i].attention_len, cfg, i);
    if (batch[i].label < 0 || batch[i].label >= cfg.num_labels) {
      throw ValidationError("example " + std::to_string(i) + ": label " + std::to_string(batch[i].label) +
                            " outside [0, " + std::to_string(cfg.num_labels) + ")");
    }
  }
}

template <typename Fn>
void parallel_for(std::size_t count, unsigned jobs, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1U, jobs), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> tasks;
  for (std::size_t w = 0; w < workers; ++w) {
    tasks.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < count; i += workers) fn(i);
    }));
  }
  for (auto& t : tasks) t.get();
}

template <typename T>
void add_into(Parameters<T>& total, const Parameters<T>& part) {
  for (std::size_t t = 0; t < total.tensors.size(); ++t) {
    auto& dst = total.tensors[t].values;
    const auto& src = part.tensors[t].values;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

template <typename T>
void zero(Parameters<T>& p) {
  for (auto& t : p.tensors) std::fill(t.values.begin(), t.values.end(), T(0));
}

// Per-example results; gradients are summed in example order so the result
// does not depend on the number of workers.
struct ExampleResult {
  double loss = 0.0;
  std::int64_t correct = 0;
};

template <typename T, typename Example, typename RunFn>
LossAndGrads<T> accumulate(const Parameters<T>& params, std::span<const Example> batch, const ForwardOptions& options,
                           RunFn&& run) {
  LossAndGrads<T> out;
  out.grads = params.zeros_like();
  std::vector<ExampleResult> results(batch.size());
  if (std::max(1U, options.jobs) == 1 || batch.size() < 2) {
    Parameters<T> scratch = params.zeros_like();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      zero(scratch);
      results[i] = run(i, &scratch);
      add_into(out.grads, scratch);
    }
  } else {
    std::vector<Parameters<T>> per_example(batch.size());
    parallel_for(batch.size(), options.jobs, [&](std::size_t i) {
      per_example[i] = params.zeros_like();
      results[i] = run(i, &per_example[i]);
    });
    for (const auto& g : per_example) add_into(out.grads, g);
  }
  for (const auto& r : results) {
    out.loss += r.loss;
    out.correct += r.correct;
  }
  return out;
}

template <typename T>
std::optional<Rng> dropout_rng(const ForwardOptions& options, std::size_t index) {
  if (!options.train_mode) return std::nullopt;
  return Rng(derive_seed(options.dropout_seed, index));
}

template <typename T>
ExampleResult run_mlm_example(const Encoder<T>& enc, const Parameters<T>& params, const mlm::MlmExample& ex, T weight,
                              std::optional<Rng> rng, Parameters<T>* grads, T* logits_out) {
  ExampleResult res;
  const Eigen::Index m = static_cast<Eigen::Index>(ex.mask_positions.size());
  if (m == 0) return res;
  EncoderCache<T> cache;
  enc.forward(ex.input_ids, ex.attention_len, rng ? &*rng : nullptr, cache);
  const auto& cfg = params.config;
  const auto emb = mat(params, enc.slots().token);
  Mat<T> gathered(m, cfg.hidden_dim);
  for (Eigen::Index r = 0; r < m; ++r) gathered.row(r) = cache.output.row(ex.mask_positions[static_cast<std::size_t>(r)]);
  const Mat<T> logits = (gathered * emb.transpose()).rowwise() + vec(params, enc.slots().mlm_bias);
  if (logits_out) std::copy(logits.data(), logits.data() + logits.size(), logits_out);

  Mat<T> dlogits;
  res.loss = cross_entropy_rows<T>(logits, ex.target_ids, weight, grads ? &dlogits : nullptr, res.correct);
  if (!grads) return res;

  // Tied output layer: its gradient lands in the token embedding tensor.
  mat(*grads, enc.slots().token) += dlogits.transpose() * gathered;
  vec(*grads, enc.slots().mlm_bias) += dlogits.colwise().sum();
  const Mat<T> dgathered = dlogits * emb;
  Mat<T> d_out = Mat<T>::Zero(ex.attention_len, cfg.hidden_dim);
  for (Eigen::Index r = 0; r < m; ++r) d_out.row(ex.mask_positions[static_cast<std::size_t>(r)]) += dgathered.row(r);
  enc.backward(ex.input_ids, cache, std::move(d_out), *grads);
  return res;
}

template <typename T>
ExampleResult run_classify_example(const Encoder<T>& enc, const Parameters<T>& params, const mlm::ClassifyExample& ex,
                                   T weight, std::optional<Rng> rng, Parameters<T>* grads, T* logits_out) {
  ExampleResult res;
  EncoderCache<T> cache;
  enc.forward(ex.input_ids, ex.attention_len, rng ? &*rng : nullptr, cache);
  const auto& slots = enc.slots();
  const RowVec<T> pooled = cache.output.row(0);
  const Mat<T> logits = pooled * mat(params, slots.cls_w) + vec(params, slots.cls_b);
  if (logits_out) std::copy(logits.data(), logits.data() + logits.size(), logits_out);

  const TokenId label = ex.label;
  Mat<T> dlogits;
  res.loss = cross_entropy_rows<T>(logits, std::span<const TokenId>(&label, 1), weight, grads ? &dlogits : nullptr,
                                   res.correct);
  if (!grads) return res;

  mat(*grads, slots.cls_w) += pooled.transpose() * dlogits;
  vec(*grads, slots.cls_b) += dlogits.row(0);
  Mat<T> d_out = Mat<T>::Zero(ex.attention_len, params.config.hidden_dim);
  d_out.row(0) = dlogits * mat(params, slots.cls_w).transpose();
  enc.backward(ex.input_ids, cache, std::move(d_out), *grads);
  return res;
}

void append_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_le64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::string float_bytes(const std::vector<float>& values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (float f : values) append_le32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and parameter containers

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (vocab_size < 5) problems.push_back("vocab_size must be >= 5");
  if (max_seq < 2) problems.push_back("max_seq must be >= 2");
  if (hidden_dim < 1) problems.push_back("hidden_dim must be >= 1");
  if (num_layers < 1) problems.push_back("num_layers must be >= 1");
  if (num_heads < 1) problems.push_back("num_heads must be >= 1");
  if (num_heads >= 1 && hidden_dim % num_heads != 0) problems.push_back("hidden_dim must be divisible by num_heads");
  if (ffn_dim < 1) problems.push_back("ffn_dim must be >= 1");
  if (num_labels < 1) problems.push_back("num_labels must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) problems.push_back("dropout_rate must lie in [0, 1)");
  if (problems.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& p : problems) msg += " " + p + ";";
  msg.pop_back();
  throw ValidationError(msg);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"max_seq", max_seq},     {"hidden_dim", hidden_dim},
          {"num_layers", num_layers}, {"num_heads", num_heads}, {"ffn_dim", ffn_dim},
          {"num_labels", num_labels}, {"dropout_rate", dropout_rate}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.num_labels = j.value("num_labels", c.num_labels);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  return c;
}

template <typename T>
Tensor<T>& Parameters<T>::at(std::string_view name) {
  for (auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw ValidationError("no parameter tensor named '" + std::string(name) + "'");
}

template <typename T>
const Tensor<T>& Parameters<T>::at(std::string_view name) const {
  return const_cast<Parameters<T>*>(this)->at(name);
}

template <typename T>
std::size_t Parameters<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

template <typename T>
Parameters<T> Parameters<T>::zeros_like() const {
  Parameters<T> out;
  out.config = config;
  out.tensors.reserve(tensors.size());
  for (const auto& t : tensors) out.tensors.push_back({t.name, t.shape, t.role, std::vector<T>(t.values.size(), T(0))});
  return out;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
  Parameters<U> out;
  out.config = config;
  for (const auto& t : tensors) {
    out.tensors.push_back({t.name, t.shape, t.role, std::vector<U>(t.values.begin(), t.values.end())});
  }
  return out;
}

template struct Parameters<float>;
template struct Parameters<double>;
template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<float> Parameters<double>::cast<float>() const;
template Parameters<float> Parameters<float>::cast<float>() const;
template Parameters<double> Parameters<double>::cast<double>() const;

std::vector<TensorSpec> parameter_layout(const ModelConfig& c) {
  using R = TensorRole;
  const std::int64_t v = c.vocab_size, s = c.max_seq, h = c.hidden_dim, f = c.ffn_dim, l = c.num_labels;
  std::vector<TensorSpec> specs = {
      {"embeddings.token", {v, h}, R::kEmbedding},
      {"embeddings.position", {s, h}, R::kEmbedding},
      {"embeddings.norm.scale", {h}, R::kNormScale},
      {"embeddings.norm.shift", {h}, R::kNormShift},
  };
  for (int i = 0; i < c.num_layers; ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    for (const char* proj : {"query", "key", "value", "output"}) {
      specs.push_back({p + "attention." + proj + ".weight", {h, h}, R::kWeight});
      specs.push_back({p + "attention." + proj + ".bias", {h}, R::kBias});
    }
    specs.push_back({p + "attention.norm.scale", {h}, R::kNormScale});
    specs.push_back({p + "attention.norm.shift", {h}, R::kNormShift});
    specs.push_back({p + "ffn.in.weight", {h, f}, R::kWeight});
    specs.push_back({p + "ffn.in.bias", {f}, R::kBias});
    specs.push_back({p + "ffn.out.weight", {f, h}, R::kWeight});
    specs.push_back({p + "ffn.out.bias", {h}, R::kBias});
    specs.push_back({p + "ffn.norm.scale", {h}, R::kNormScale});
    specs.push_back({p + "ffn.norm.shift", {h}, R::kNormShift});
  }
  specs.push_back({"mlm.bias", {v}, R::kBias});
  specs.push_back({"classifier.weight", {h, l}, R::kWeight});
  specs.push_back({"classifier.bias", {l}, R::kBias});
  return specs;
}

namespace {

void fill_tensor(Tensor<float>& t, Rng& rng) {
  switch (t.role) {
    case TensorRole::kEmbedding:
    case TensorRole::kWeight:
      for (auto& x : t.values) x = static_cast<float>(rng.truncated_normal(kInitStddev));
      break;
    case TensorRole::kNormScale:
      std::fill(t.values.begin(), t.values.end(), 1.0F);
      break;
    case TensorRole::kBias:
    case TensorRole::kNormShift:
      std::fill(t.values.begin(), t.values.end(), 0.0F);
      break;
  }
}

std::size_t element_count(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState state;
  state.config = config;
  Rng rng(seed);
  for (auto& spec : parameter_layout(config)) {
    Tensor<float> t{spec.name, spec.shape, spec.role, std::vector<float>(element_count(spec.shape))};
    fill_tensor(t, rng);
    state.tensors.push_back(std::move(t));
  }
  return state;
}

ModelState with_classifier(ModelState state, int num_labels, std::uint64_t seed) {
  ModelConfig cfg = state.config;
  cfg.num_labels = num_labels;
  cfg.validate();
  state.config = cfg;
  Rng rng(derive_seed(seed, 0x636c6173));
  const Slots slots(cfg.num_layers);
  auto specs = parameter_layout(cfg);
  for (std::size_t slot : {slots.cls_w, slots.cls_b}) {
    const auto& spec = specs[slot];
    Tensor<float> t{spec.name, spec.shape, spec.role, std::vector<float>(element_count(spec.shape))};
    fill_tensor(t, rng);
    state.tensors[slot] = std::move(t);
  }
  return state;
}

std::string content_hash(const ModelState& state) {
  Fnv1a h;
  h.update(state.config.to_json().dump());
  for (const auto& t : state.tensors) {
    h.update(t.name);
    h.update_u64(t.shape.size());
    for (auto d : t.shape) h.update_u64(static_cast<std::uint64_t>(d));
    h.update(float_bytes(t.values));
  }
  return h.hex();
}

template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(static_cast<double>(logits[i]) - m);
  for (auto& p : out) p /= sum;
  return out;
}

template std::vector<double> softmax<float>(std::span<const float>);
template std::vector<double> softmax<double>(std::span<const double>);

// ---------------------------------------------------------------------------
// Forward / backward entry points

template <typename T>
MlmOutput<T> forward_mlm(const Parameters<T>& params, std::span<const mlm::MlmExample> batch,
                         const ForwardOptions& options) {
  const std::size_t total = count_masked(batch, params.config);
  const Encoder<T> enc(params);
  const T weight = T(1) / T(total);
  MlmOutput<T> out;
  out.logits.rows = total;
  out.logits.cols = static_cast<std::size_t>(params.config.vocab_size);
  out.logits.values.resize(out.logits.rows * out.logits.cols);
  std::vector<std::size_t> offsets(batch.size());
  for (std::size_t i = 0, off = 0; i < batch.size(); ++i) {
    offsets[i] = off;
    off += batch[i].mask_positions.size();
    out.targets.insert(out.targets.end(), batch[i].target_ids.begin(), batch[i].target_ids.end());
  }
  std::vector<ExampleResult> results(batch.size());
  parallel_for(batch.size(), options.jobs, [&](std::size_t i) {
    results[i] = run_mlm_example<T>(enc, params, batch[i], weight, dropout_rng<T>(options, i), nullptr,
                                    out.logits.values.data() + offsets[i] * out.logits.cols);
  });
  for (const auto& r : results) {
    out.loss += r.loss;
    out.correct += r.correct;
  }
  return out;
}

template <typename T>
ClassifyOutput<T> forward_classify(const Parameters<T>& params, std::span<const mlm::ClassifyExample> batch,
                                   const ForwardOptions& options) {
  check_classify_batch(batch, params.config);
  const Encoder<T> enc(params);
  const T weight = T(1) / T(batch.size());
  ClassifyOutput<T> out;
  out.logits.rows = batch.size();
  out.logits.cols = static_cast<std::size_t>(params.config.num_labels);
  out.logits.values.resize(out.logits.rows * out.logits.cols);
  std::vector<ExampleResult> results(batch.size());
  parallel_for(batch.size(), options.jobs, [&](std::size_t i) {
    results[i] = run_classify_example<T>(enc, params, batch[i], weight, dropout_rng<T>(options, i), nullptr,
                                         out.logits.values.data() + i * out.logits.cols);
  });
  for (const auto& r : results) {
    out.loss += r.loss;
    out.correct += r.correct;
  }
  return out;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Parameters<T>& params, std::span<const mlm::MlmExample> batch,
                               const ForwardOptions& options) {
  const std::size_t total = count_masked(batch, params.config);
  const Encoder<T> enc(params);
  const T weight = T(1) / T(total);
  auto out = accumulate<T>(params, batch, options, [&](std::size_t i, Parameters<T>* g) {
    return run_mlm_example<T>(enc, params, batch[i], weight, dropout_rng<T>(options, i), g, nullptr);
  });
  out.predictions = static_cast<std::int64_t>(total);
  return out;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Parameters<T>& params, std::span<const mlm::ClassifyExample> batch,
                               const ForwardOptions& options) {
  check_classify_batch(batch, params.config);
  const Encoder<T> enc(params);
  const T weight = T(1) / T(batch.size());
  auto out = accumulate<T>(params, batch, options, [&](std::size_t i, Parameters<T>* g) {
    return run_classify_example<T>(enc, params, batch[i], weight, dropout_rng<T>(options, i), g, nullptr);
  });
  out.predictions = static_cast<std::int64_t>(batch.size());
  return out;
}

template MlmOutput<float> forward_mlm(const Parameters<float>&, std::span<const mlm::MlmExample>,
                                      const ForwardOptions&);
template MlmOutput<double> forward_mlm(const Parameters<double>&, std::span<const mlm::MlmExample>,
                                       const ForwardOptions&);
template ClassifyOutput<float> forward_classify(const Parameters<float>&, std::span<const mlm::ClassifyExample>,
                                                const ForwardOptions&);
template ClassifyOutput<double> forward_classify(const Parameters<double>&, std::span<const mlm::ClassifyExample>,
                                                 const ForwardOptions&);
template LossAndGrads<float> loss_and_grads(const Parameters<float>&, std::span<const mlm::MlmExample>,
                                            const ForwardOptions&);
template LossAndGrads<double> loss_and_grads(const Parameters<double>&, std::span<const mlm::MlmExample>,
                                             const ForwardOptions&);
template LossAndGrads<float> loss_and_grads(const Parameters<float>&, std::span<const mlm::ClassifyExample>,
                                            const ForwardOptions&);
template LossAndGrads<double> loss_and_grads(const Parameters<double>&, std::span<const mlm::ClassifyExample>,
                                             const ForwardOptions&);

Logits<float> predict_logits(const ModelState& state, std::span<const mlm::ClassifyExample> batch, unsigned jobs) {
  ForwardOptions opts;
  opts.jobs = jobs;
  return forward_classify<float>(state, batch, opts).logits;
}

std::vector<std::vector<std::vector<double>>> attention_weights(const ModelState& state,
                                                               std::span<const TokenId> input_ids,
                                                               std::int32_t attention_len) {
  check_ids(input_ids, attention_len, state.config, 0);
  const Encoder<float> enc(state);
  EncoderCache<float> cache;
  enc.forward(input_ids, attention_len, nullptr, cache);
  const auto s = static_cast<std::size_t>(state.config.max_seq);
  std::vector<std::vector<std::vector<double>>> out;
  for (const auto& layer : cache.layers) {
    auto& per_head = out.emplace_back();
    for (const auto& probs : layer.probs) {
      std::vector<double> full(s * s, 0.0);
      for (Eigen::Index q = 0; q < probs.rows(); ++q) {
        for (Eigen::Index k = 0; k < probs.cols(); ++k) {
          full[static_cast<std::size_t>(q) * s + static_cast<std::size_t>(k)] = probs(q, k);
        }
      }
      per_head.push_back(std::move(full));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const ModelState& state, const std::filesystem::path& path, const nlohmann::json& metadata) {
  nlohmann::json directory = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::string payload;
  for (const auto& t : state.tensors) {
    directory.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
    offset += 4 * t.values.size();
    payload += float_bytes(t.values);
  }
  const nlohmann::json header = {{"format", "daptkit-checkpoint"},
                                 {"format_version", kCheckpointVersion},
                                 {"config", state.config.to_json()},
                                 {"tensors", directory},
                                 {"payload_bytes", offset},
                                 {"content_hash", content_hash(state)},
                                 {"metadata", metadata}};
  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(kMagic, sizeof(kMagic));
  std::string len;
  for (int i = 0; i < 8; ++i) len.push_back(static_cast<char>((header_text.size() >> (8 * i)) & 0xff));
  out << len << header_text << payload;
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::pair<nlohmann::json, std::size_t> parse_header(const std::string& bytes, const std::filesystem::path& path) {
  using K = CheckpointError::Kind;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(K::kFormat, "'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const std::uint64_t header_len = read_le64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) {
    throw CheckpointError(K::kTruncated, "'" + path.string() + "': header extends past end of file");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(K::kFormat, "'" + path.string() + "': malformed header: " + e.what());
  }
  return {std::move(header), 16 + static_cast<std::size_t>(header_len)};
}

}  // namespace

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  return parse_header(read_all(path), path).first;
}

ModelState load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  using K = CheckpointError::Kind;
  const std::string bytes = read_all(path);
  const auto [header, payload_start] = parse_header(bytes, path);
  const std::string where = "'" + path.string() + "': ";

  const int version = header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::kVersion, where + "format version " + std::to_string(version) + " is not supported (expected " +
                                           std::to_string(kCheckpointVersion) + ")");
  }
  ModelState state;
  try {
    state.config = ModelConfig::from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::kFormat, where + "bad config: " + e.what());
  }
  state.config.validate();
  if (expected && !(*expected == state.config)) {
    throw CheckpointError(K::kConfigMismatch, where + "stored config " + state.config.to_json().dump() +
                                                  " does not match the expected " + expected->to_json().dump());
  }

  const auto specs = parameter_layout(state.config);
  const auto& directory = header.at("tensors");
  if (!directory.is_array() || directory.size() != specs.size()) {
    throw CheckpointError(K::kShape, where + "tensor directory does not match the config layout");
  }
  const std::size_t payload = bytes.size() - payload_start;
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& entry = directory[i];
    const auto name = entry.value("name", std::string());
    const auto shape = entry.value("shape", std::vector<std::int64_t>());
    if (name != specs[i].name || shape != specs[i].shape) {
      throw CheckpointError(K::kShape, where + "tensor '" + name + "' has shape " + nlohmann::json(shape).dump() +
                                           " but the config requires '" + specs[i].name + "' with shape " +
                                           nlohmann::json(specs[i].shape).dump());
    }
    const std::size_t count = element_count(shape);
    if (entry.value("count", std::uint64_t{0}) != count || entry.value("offset", std::uint64_t{0}) != expected_offset) {
      throw CheckpointError(K::kShape, where + "tensor '" + name + "' directory entry is inconsistent with its shape");
    }
    if (expected_offset + 4 * count > payload) {
      throw CheckpointError(K::kTruncated, where + "payload ends inside tensor '" + name + "'");
    }
    Tensor<float> t{name, shape, specs[i].role, std::vector<float>(count)};
    const char* p = bytes.data() + payload_start + expected_offset;
    for (std::size_t k = 0; k < count; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[4 * k + b])) << (8 * b);
      t.values[k] = std::bit_cast<float>(bits);
    }
    expected_offset += 4 * count;
    state.tensors.push_back(std::move(t));
  }
  if (payload != expected_offset) {
    throw CheckpointError(K::kFormat, where + std::to_string(payload - expected_offset) + " trailing payload bytes");
  }
  if (header.value("content_hash", std::string()) != content_hash(state)) {
    throw CheckpointError(K::kFormat, where + "content hash mismatch; the payload is corrupt");
  }
  return state;
}

}  // namespace daptkit::model
