#include "pttt/backbone.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "detail_math.hpp"

namespace pttt {

void ModelConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
  if (model_dim < 1) throw std::invalid_argument("model_dim must be >= 1");
  if (num_heads < 1) throw std::invalid_argument("num_heads must be >= 1");
  if (model_dim % num_heads != 0) {
    throw std::invalid_argument("model_dim " + std::to_string(model_dim) +
                                " not divisible by num_heads " +
                                std::to_string(num_heads));
  }
  if (ffn_dim < 1) throw std::invalid_argument("ffn_dim must be >= 1");
  if (max_positions < 3) {
    throw std::invalid_argument("max_positions must fit bos + residue + eos");
  }
  if (vocab_size != Alphabet::kVocabSize) {
    throw std::invalid_argument("vocab_size must be " +
                                std::to_string(Alphabet::kVocabSize));
  }
}

namespace {

template <typename S>
void fill_gaussian(Mat<S>& tensor, Eigen::Index rows, Eigen::Index cols,
                   double stddev, Rng& rng) {
  tensor.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      tensor(i, j) = static_cast<S>(stddev * rng.normal());
    }
  }
}

template <typename S>
void fill_glorot(Mat<S>& tensor, int out_dim, int in_dim, Rng& rng) {
  fill_gaussian(tensor, out_dim, in_dim, std::sqrt(2.0 / (in_dim + out_dim)),
                rng);
}

}  // namespace

template <typename S>
BackboneWeights<S> init_backbone(const ModelConfig& config) {
  config.validate();
  BackboneWeights<S> w;
  w.config = config;
  Rng rng(config.seed);
  const int d = config.model_dim;
  const int f = config.ffn_dim;
  const int v = config.vocab_size;

  fill_gaussian(w.token_embedding, v, d, 0.02, rng);
  fill_gaussian(w.position_embedding, config.max_positions, d, 0.02, rng);
  w.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : w.layers) {
    layer.attn_ln_gain = Mat<S>::Ones(1, d);
    layer.attn_ln_bias = Mat<S>::Zero(1, d);
    fill_glorot(layer.wq, d, d, rng);
    layer.bq = Mat<S>::Zero(1, d);
    fill_glorot(layer.wk, d, d, rng);
    layer.bk = Mat<S>::Zero(1, d);
    fill_glorot(layer.wv, d, d, rng);
    layer.bv = Mat<S>::Zero(1, d);
    fill_glorot(layer.wo, d, d, rng);
    layer.bo = Mat<S>::Zero(1, d);
    layer.ffn_ln_gain = Mat<S>::Ones(1, d);
    layer.ffn_ln_bias = Mat<S>::Zero(1, d);
    fill_glorot(layer.w1, f, d, rng);
    layer.b1 = Mat<S>::Zero(1, f);
    fill_glorot(layer.w2, d, f, rng);
    layer.b2 = Mat<S>::Zero(1, d);
  }
  w.final_ln_gain = Mat<S>::Ones(1, d);
  w.final_ln_bias = Mat<S>::Zero(1, d);
  fill_glorot(w.head_weight, v, d, rng);
  w.head_bias = Mat<S>::Zero(1, v);
  return w;
}

template <typename S>
LoraAdapter<S> init_lora(const ModelConfig& config, int rank, S alpha,
                         std::uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
  LoraAdapter<S> adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  Rng rng(seed);
  const int d = config.model_dim;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  adapter.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : adapter.layers) {
    for (auto& pair : layer) {
      fill_gaussian(pair.a, rank, d, stddev, rng);
      pair.b = Mat<S>::Zero(d, rank);
    }
  }
  return adapter;
}

template <typename S>
BackboneWeights<S> materialize_lora(const BackboneWeights<S>& weights,
                                    const LoraAdapter<S>& adapter) {
  if (adapter.layers.size() != weights.layers.size()) {
    throw std::invalid_argument("adapter layer count does not match model");
  }
  BackboneWeights<S> out = weights;
  const S scale = adapter.scale();
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    const auto& pairs = adapter.layers[i];
    out.layers[i].wq += scale * (pairs[0].b * pairs[0].a);
    out.layers[i].wk += scale * (pairs[1].b * pairs[1].a);
    out.layers[i].wv += scale * (pairs[2].b * pairs[2].a);
    out.layers[i].wo += scale * (pairs[3].b * pairs[3].a);
  }
  return out;
}

IdMatrix make_batch(const std::vector<std::vector<int>>& rows) {
  if (rows.empty()) throw std::invalid_argument("empty batch");
  std::size_t width = 0;
  for (const auto& row : rows) width = std::max(width, row.size());
  if (width == 0) throw std::invalid_argument("batch of empty sequences");
  IdMatrix ids(static_cast<Eigen::Index>(rows.size()),
               static_cast<Eigen::Index>(width));
  ids.setConstant(Alphabet::kPad);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      ids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          rows[r][c];
    }
  }
  return ids;
}

namespace {

// LayerNorm over the last axis; returns the post-affine output and records
// xhat and 1/std for backward.
template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias,
                  Mat<S>& xhat, Mat<S>& inv_std) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(n, d);
  inv_std.resize(n, 1);
  Mat<S> out(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const auto centered = x.row(i).array() - mean;
    const S var = centered.square().sum() / static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + static_cast<S>(detail::kLayerNormEps));
    inv_std(i, 0) = is;
    xhat.row(i) = (centered * is).matrix();
    out.row(i) = xhat.row(i).cwiseProduct(gain.row(0)) + bias.row(0);
  }
  return out;
}

// x * W^T + b, plus the scaled low-rank path when pair is non-null;
// lora_t receives the rank-space intermediate x * A^T for backward.
template <typename S>
Mat<S> project(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b,
               const typename LoraAdapter<S>::FactorPair* pair, S scale,
               Mat<S>* lora_t) {
  Mat<S> y = x * w.transpose();
  y.rowwise() += b.row(0);
  if (pair != nullptr) {
    Mat<S> t = x * pair->a.transpose();
    y.noalias() += scale * (t * pair->b.transpose());
    if (lora_t != nullptr) *lora_t = std::move(t);
  }
  return y;
}

int validate_row(const IdMatrix& ids, Eigen::Index row, int vocab_size,
                 int max_positions) {
  const Eigen::Index cols = ids.cols();
  int valid_len = 0;
  bool in_pad_tail = false;
  for (Eigen::Index c = 0; c < cols; ++c) {
    const int id = ids(row, c);
    if (id < 0 || id >= vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(id) +
                                  " outside vocabulary in batch row " +
                                  std::to_string(row));
    }
    if (id == Alphabet::kPad) {
      in_pad_tail = true;
    } else if (in_pad_tail) {
      throw std::invalid_argument("pad id in sequence interior in batch row " +
                                  std::to_string(row));
    } else {
      ++valid_len;
    }
  }
  if (valid_len == 0) {
    throw std::invalid_argument("batch row " + std::to_string(row) +
                                " is all padding");
  }
  if (valid_len > max_positions) {
    throw std::invalid_argument(
        "sequence length " + std::to_string(valid_len) +
        " exceeds max_positions " + std::to_string(max_positions));
  }
  return valid_len;
}

}  // namespace

template <typename S>
std::vector<Mat<S>> forward_logits(
    const BackboneWeights<S>& weights,
    std::type_identity_t<const LoraAdapter<S>*> adapter, const IdMatrix& ids,
    std::vector<SequenceCache<S>>* cache) {
  const ModelConfig& config = weights.config;
  if (adapter != nullptr &&
      adapter->layers.size() != weights.layers.size()) {
    throw std::invalid_argument("adapter layer count does not match model");
  }
  const int num_heads = config.num_heads;
  const int head_dim = config.head_dim();
  const S attn_scale = S(1) / std::sqrt(static_cast<S>(head_dim));
  const S lora_scale = adapter != nullptr ? adapter->scale() : S(0);

  std::vector<Mat<S>> out;
  out.reserve(static_cast<std::size_t>(ids.rows()));
  if (cache != nullptr) {
    cache->clear();
    cache->reserve(static_cast<std::size_t>(ids.rows()));
  }

  for (Eigen::Index row = 0; row < ids.rows(); ++row) {
    const int n =
        validate_row(ids, row, config.vocab_size, config.max_positions);

    SequenceCache<S> local;
    SequenceCache<S>& sc =
        cache != nullptr ? cache->emplace_back() : local;
    sc.valid_len = n;
    sc.ids.resize(static_cast<std::size_t>(n));
    for (int c = 0; c < n; ++c) sc.ids[static_cast<std::size_t>(c)] = ids(row, c);
    sc.layers.resize(weights.layers.size());

    Mat<S> h(n, config.model_dim);
    for (int p = 0; p < n; ++p) {
      h.row(p) = weights.token_embedding.row(sc.ids[static_cast<std::size_t>(p)]) +
                 weights.position_embedding.row(p);
    }

    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
      const auto& lw = weights.layers[l];
      LayerCache<S>& lc = sc.layers[l];
      const auto* pairs = adapter != nullptr ? &adapter->layers[l] : nullptr;

      lc.input = h;
      const Mat<S> a = layer_norm(h, lw.attn_ln_gain, lw.attn_ln_bias,
                                  lc.ln1_xhat, lc.ln1_inv_std);
      lc.q = project(a, lw.wq, lw.bq, pairs ? &(*pairs)[0] : nullptr,
                     lora_scale, &lc.lora_t[0]);
      lc.k = project(a, lw.wk, lw.bk, pairs ? &(*pairs)[1] : nullptr,
                     lora_scale, &lc.lora_t[1]);
      lc.v = project(a, lw.wv, lw.bv, pairs ? &(*pairs)[2] : nullptr,
                     lora_scale, &lc.lora_t[2]);

      lc.probs.assign(static_cast<std::size_t>(num_heads), Mat<S>());
      lc.context.resize(n, config.model_dim);
      for (int head = 0; head < num_heads; ++head) {
        const auto qh = lc.q.middleCols(head * head_dim, head_dim);
        const auto kh = lc.k.middleCols(head * head_dim, head_dim);
        const auto vh = lc.v.middleCols(head * head_dim, head_dim);
        Mat<S> scores = (qh * kh.transpose()) * attn_scale;
        Mat<S>& probs = lc.probs[static_cast<std::size_t>(head)];
        probs.resize(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const S row_max = scores.row(i).maxCoeff();
          probs.row(i) = (scores.row(i).array() - row_max).exp().matrix();
          probs.row(i) /= probs.row(i).sum();
        }
        lc.context.middleCols(head * head_dim, head_dim).noalias() =
            probs * vh;
      }

      const Mat<S> attn_out =
          project(lc.context, lw.wo, lw.bo, pairs ? &(*pairs)[3] : nullptr,
                  lora_scale, &lc.lora_t[3]);
      lc.mid = lc.input + attn_out;

      const Mat<S> a2 = layer_norm(lc.mid, lw.ffn_ln_gain, lw.ffn_ln_bias,
                                   lc.ln2_xhat, lc.ln2_inv_std);
      lc.ffn_pre = a2 * lw.w1.transpose();
      lc.ffn_pre.rowwise() += lw.b1.row(0);
      lc.ffn_act =
          lc.ffn_pre.unaryExpr([](S x) { return detail::gelu(x); });
      Mat<S> ffn_out = lc.ffn_act * lw.w2.transpose();
      ffn_out.rowwise() += lw.b2.row(0);
      h = lc.mid + ffn_out;
    }

    sc.final_input = h;
    sc.final_out = layer_norm(h, weights.final_ln_gain, weights.final_ln_bias,
                              sc.final_xhat, sc.final_inv_std);
    Mat<S> logits_valid = sc.final_out * weights.head_weight.transpose();
    logits_valid.rowwise() += weights.head_bias.row(0);

    Mat<S> logits = Mat<S>::Zero(ids.cols(), config.vocab_size);
    logits.topRows(n) = logits_valid;
    if (!logits.allFinite()) {
      throw std::runtime_error("non-finite logits in batch row " +
                               std::to_string(row));
    }
    out.push_back(std::move(logits));
  }
  return out;
}

template BackboneWeights<float> init_backbone<float>(const ModelConfig&);
template BackboneWeights<double> init_backbone<double>(const ModelConfig&);
template LoraAdapter<float> init_lora<float>(const ModelConfig&, int, float,
                                             std::uint64_t);
template LoraAdapter<double> init_lora<double>(const ModelConfig&, int, double,
                                               std::uint64_t);
template BackboneWeights<float> materialize_lora<float>(
    const BackboneWeights<float>&, const LoraAdapter<float>&);
template BackboneWeights<double> materialize_lora<double>(
    const BackboneWeights<double>&, const LoraAdapter<double>&);
template std::vector<Mat<float>> forward_logits<float>(
    const BackboneWeights<float>&, const LoraAdapter<float>*, const IdMatrix&,
    std::vector<SequenceCache<float>>*);
template std::vector<Mat<double>> forward_logits<double>(
    const BackboneWeights<double>&, const LoraAdapter<double>*,
    const IdMatrix&, std::vector<SequenceCache<double>>*);

}  // namespace pttt
