#include "pttt/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "detail_math.hpp"

namespace pttt {

void OptimConfig::validate() const {
  // lr = 0 is legal (useful for no-op probes); negative is not.
  if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and >= 0");
  }
  if (grad_accum_steps < 1) {
    throw std::invalid_argument("grad_accum_steps must be >= 1");
  }
  if (micro_batch_size < 1) {
    throw std::invalid_argument("micro_batch_size must be >= 1");
  }
}

Batch make_training_batch(
    const std::vector<std::pair<TokenSequence, std::vector<int>>>& views) {
  if (views.empty()) throw std::invalid_argument("empty training batch");
  std::vector<std::vector<int>> rows;
  rows.reserve(views.size());
  for (const auto& [seq, targets] : views) {
    if (targets.size() != seq.ids.size()) {
      throw std::invalid_argument("targets misaligned with sequence ids");
    }
    rows.push_back(seq.ids);
  }
  Batch batch;
  batch.ids = make_batch(rows);
  batch.targets.resize(batch.ids.rows(), batch.ids.cols());
  batch.targets.setConstant(-1);
  for (std::size_t r = 0; r < views.size(); ++r) {
    const auto& targets = views[r].second;
    for (std::size_t c = 0; c < targets.size(); ++c) {
      batch.targets(static_cast<Eigen::Index>(r),
                    static_cast<Eigen::Index>(c)) = targets[c];
    }
  }
  return batch;
}

namespace {

struct TrainFlags {
  bool embeddings = false;
  bool dense = false;  // projection and ffn weights with their biases
  bool norms = false;
  bool head = false;  // MLM head
  bool lora = false;
};

TrainFlags flags_for(const TrainableSelection& selection, bool has_adapter) {
  TrainFlags flags;
  switch (selection.mode) {
    case TrainableSelection::Mode::full:
      if (has_adapter) {
        throw std::invalid_argument(
            "attached adapter requires lora_only selection");
      }
      flags = {true, true, true, true, false};
      break;
    case TrainableSelection::Mode::full_except_embeddings:
      if (has_adapter) {
        throw std::invalid_argument(
            "attached adapter requires lora_only selection");
      }
      flags = {false, true, true, true, false};
      break;
    case TrainableSelection::Mode::lora_only:
      if (!has_adapter) {
        throw std::invalid_argument("lora_only selection without an adapter");
      }
      flags.lora = true;
      flags.norms = selection.lora_train_norms_and_head;
      flags.head = selection.lora_train_norms_and_head;
      break;
  }
  return flags;
}

// y = gain (x) xhat + bias, reconstructed from the cached normalized input.
template <typename S>
Mat<S> affine_from_xhat(const Mat<S>& xhat, const Mat<S>& gain,
                        const Mat<S>& bias) {
  Mat<S> out(xhat.rows(), xhat.cols());
  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
    out.row(i) = xhat.row(i).cwiseProduct(gain.row(0)) + bias.row(0);
  }
  return out;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& xhat,
                           const Mat<S>& inv_std, const Mat<S>& gain,
                           Mat<S>* dgain, Mat<S>* dbias) {
  if (dgain != nullptr) {
    dgain->row(0) += dy.cwiseProduct(xhat).colwise().sum();
  }
  if (dbias != nullptr) {
    dbias->row(0) += dy.colwise().sum();
  }
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto dxhat = dy.row(i).cwiseProduct(gain.row(0));
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = (inv_std(i, 0) *
                 (dxhat.array() - mean_dxhat -
                  xhat.row(i).array() * mean_dxhat_xhat))
                    .matrix();
  }
  return dx;
}

// Backward of project(): accumulates dense and low-rank gradients as
// requested, returns dx. t is the cached rank-space intermediate.
template <typename S>
Mat<S> project_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& w,
                        Mat<S>* dw, Mat<S>* db,
                        const typename LoraAdapter<S>::FactorPair* pair,
                        const Mat<S>* t, S scale,
                        typename LoraAdapter<S>::FactorPair* dpair) {
  if (dw != nullptr) dw->noalias() += dy.transpose() * x;
  if (db != nullptr) db->row(0) += dy.colwise().sum();
  Mat<S> dx = dy * w;
  if (pair != nullptr) {
    if (dpair != nullptr) {
      dpair->b.noalias() += scale * (dy.transpose() * (*t));
    }
    const Mat<S> dt = scale * (dy * pair->b);
    if (dpair != nullptr) dpair->a.noalias() += dt.transpose() * x;
    dx.noalias() += dt * pair->a;
  }
  return dx;
}

template <typename S>
void backward_sequence(const BackboneWeights<S>& weights,
                       const LoraAdapter<S>* adapter,
                       const SequenceCache<S>& sc, const Mat<S>& dlogits,
                       const TrainFlags& flags, GradientBuffer<S>& buffer) {
  const ModelConfig& config = weights.config;
  const int n = sc.valid_len;
  const int num_heads = config.num_heads;
  const int head_dim = config.head_dim();
  const S attn_scale = S(1) / std::sqrt(static_cast<S>(head_dim));
  const S lora_scale = adapter != nullptr ? adapter->scale() : S(0);

  if (flags.head) {
    buffer.backbone.head_weight.noalias() +=
        dlogits.transpose() * sc.final_out;
    buffer.backbone.head_bias.row(0) += dlogits.colwise().sum();
  }
  Mat<S> dfinal_out = dlogits * weights.head_weight;

  Mat<S> dh = layer_norm_backward(
      dfinal_out, sc.final_xhat, sc.final_inv_std, weights.final_ln_gain,
      flags.norms ? &buffer.backbone.final_ln_gain : nullptr,
      flags.norms ? &buffer.backbone.final_ln_bias : nullptr);

  for (int l = static_cast<int>(weights.layers.size()) - 1; l >= 0; --l) {
    const auto& lw = weights.layers[static_cast<std::size_t>(l)];
    const auto& lc = sc.layers[static_cast<std::size_t>(l)];
    auto& gb = buffer.backbone.layers[static_cast<std::size_t>(l)];
    const auto* pairs =
        adapter != nullptr ? &adapter->layers[static_cast<std::size_t>(l)]
                           : nullptr;
    auto* gpairs =
        flags.lora ? &buffer.adapter->layers[static_cast<std::size_t>(l)]
                   : nullptr;

    // FFN sub-block: dh is the gradient of mid + ffn_out.
    if (flags.dense) {
      gb.w2.noalias() += dh.transpose() * lc.ffn_act;
      gb.b2.row(0) += dh.colwise().sum();
    }
    Mat<S> dact = dh * lw.w2;
    Mat<S> dpre = dact.cwiseProduct(
        lc.ffn_pre.unaryExpr([](S x) { return detail::gelu_grad(x); }));
    const Mat<S> a2 = affine_from_xhat(lc.ln2_xhat, lw.ffn_ln_gain,
                                       lw.ffn_ln_bias);
    if (flags.dense) {
      gb.w1.noalias() += dpre.transpose() * a2;
      gb.b1.row(0) += dpre.colwise().sum();
    }
    const Mat<S> da2 = dpre * lw.w1;
    Mat<S> dmid = layer_norm_backward(da2, lc.ln2_xhat, lc.ln2_inv_std,
                                      lw.ffn_ln_gain,
                                      flags.norms ? &gb.ffn_ln_gain : nullptr,
                                      flags.norms ? &gb.ffn_ln_bias : nullptr);
    dmid += dh;

    // Attention sub-block: dmid is the gradient of input + attn_out.
    Mat<S> dcontext = project_backward(
        dmid, lc.context, lw.wo, flags.dense ? &gb.wo : nullptr,
        flags.dense ? &gb.bo : nullptr, pairs ? &(*pairs)[3] : nullptr,
        &lc.lora_t[3], lora_scale, gpairs ? &(*gpairs)[3] : nullptr);

    Mat<S> dq(n, config.model_dim);
    Mat<S> dk(n, config.model_dim);
    Mat<S> dv(n, config.model_dim);
    for (int head = 0; head < num_heads; ++head) {
      const auto dctx_h = dcontext.middleCols(head * head_dim, head_dim);
      const auto& probs = lc.probs[static_cast<std::size_t>(head)];
      const auto vh = lc.v.middleCols(head * head_dim, head_dim);
      const auto qh = lc.q.middleCols(head * head_dim, head_dim);
      const auto kh = lc.k.middleCols(head * head_dim, head_dim);

      const Mat<S> dprobs = dctx_h * vh.transpose();
      dv.middleCols(head * head_dim, head_dim).noalias() =
          probs.transpose() * dctx_h;

      Mat<S> dscores(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const S dot = dprobs.row(i).dot(probs.row(i));
        dscores.row(i) =
            probs.row(i).cwiseProduct(
                (dprobs.row(i).array() - dot).matrix());
      }
      dq.middleCols(head * head_dim, head_dim).noalias() =
          (dscores * kh) * attn_scale;
      dk.middleCols(head * head_dim, head_dim).noalias() =
          (dscores.transpose() * qh) * attn_scale;
    }

    const Mat<S> a = affine_from_xhat(lc.ln1_xhat, lw.attn_ln_gain,
                                      lw.attn_ln_bias);
    Mat<S> da = project_backward(
        dq, a, lw.wq, flags.dense ? &gb.wq : nullptr,
        flags.dense ? &gb.bq : nullptr, pairs ? &(*pairs)[0] : nullptr,
        &lc.lora_t[0], lora_scale, gpairs ? &(*gpairs)[0] : nullptr);
    da += project_backward(
        dk, a, lw.wk, flags.dense ? &gb.wk : nullptr,
        flags.dense ? &gb.bk : nullptr, pairs ? &(*pairs)[1] : nullptr,
        &lc.lora_t[1], lora_scale, gpairs ? &(*gpairs)[1] : nullptr);
    da += project_backward(
        dv, a, lw.wv, flags.dense ? &gb.wv : nullptr,
        flags.dense ? &gb.bv : nullptr, pairs ? &(*pairs)[2] : nullptr,
        &lc.lora_t[2], lora_scale, gpairs ? &(*gpairs)[2] : nullptr);

    Mat<S> dinput = layer_norm_backward(da, lc.ln1_xhat, lc.ln1_inv_std,
                                        lw.attn_ln_gain,
                                        flags.norms ? &gb.attn_ln_gain
                                                    : nullptr,
                                        flags.norms ? &gb.attn_ln_bias
                                                    : nullptr);
    dinput += dmid;
    dh = std::move(dinput);
  }

  if (flags.embeddings) {
    for (int p = 0; p < n; ++p) {
      buffer.backbone.token_embedding.row(
          sc.ids[static_cast<std::size_t>(p)]) += dh.row(p);
      buffer.backbone.position_embedding.row(p) += dh.row(p);
    }
  }
}

}  // namespace

template <typename S>
void GradientBuffer<S>::zero() {
  backbone.visit([](const std::string&, Mat<S>& tensor) { tensor.setZero(); });
  if (adapter.has_value()) {
    adapter->visit(
        [](const std::string&, Mat<S>& tensor) { tensor.setZero(); });
  }
  micro_steps_seen = 0;
}

template <typename S>
GradientBuffer<S> make_gradient_buffer(const BackboneWeights<S>& weights,
                                       const LoraAdapter<S>* adapter) {
  GradientBuffer<S> buffer;
  buffer.backbone = weights;
  if (adapter != nullptr) buffer.adapter = *adapter;
  buffer.zero();
  return buffer;
}

template <typename S>
double loss_and_grad(const BackboneWeights<S>& weights,
                     const LoraAdapter<S>* adapter, const Batch& batch,
                     LossKind loss_kind, const TrainableSelection& selection,
                     GradientBuffer<S>& buffer) {
  if (batch.ids.rows() != batch.targets.rows() ||
      batch.ids.cols() != batch.targets.cols()) {
    throw std::invalid_argument("batch ids/targets shape mismatch");
  }
  const TrainFlags flags = flags_for(selection, adapter != nullptr);
  if (flags.lora && !buffer.adapter.has_value()) {
    throw std::invalid_argument("gradient buffer lacks adapter gradients");
  }

  std::vector<SequenceCache<S>> caches;
  const auto logits = forward_logits(weights, adapter, batch.ids, &caches);
  const Eigen::Index rows = batch.ids.rows();

  struct Supervised {
    int pos;
    int target;
  };
  std::vector<std::vector<Supervised>> supervised(
      static_cast<std::size_t>(rows));
  std::size_t total_positions = 0;
  int active_sequences = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto& list = supervised[static_cast<std::size_t>(r)];
    for (int c = 0; c < caches[static_cast<std::size_t>(r)].valid_len; ++c) {
      const int t = batch.targets(r, c);
      if (loss_kind == LossKind::unnormalized_cross_entropy) {
        list.push_back({c, t >= 0 ? t : batch.ids(r, c)});
      } else if (t >= 0) {
        list.push_back({c, t});
      }
    }
    total_positions += list.size();
    if (!list.empty()) ++active_sequences;
  }
  if (total_positions == 0) {
    throw std::invalid_argument("no supervised positions in batch");
  }

  double loss = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& list = supervised[static_cast<std::size_t>(r)];
    if (list.empty()) continue;
    const auto& sc = caches[static_cast<std::size_t>(r)];

    double weight = 0.0;
    switch (loss_kind) {
      case LossKind::normalized_cross_entropy:
        weight = 1.0 / (static_cast<double>(list.size()) * active_sequences);
        break;
      case LossKind::normalized_global_cross_entropy:
      case LossKind::unnormalized_cross_entropy:
        weight = 1.0 / static_cast<double>(total_positions);
        break;
    }

    Mat<S> dlogits = Mat<S>::Zero(sc.valid_len, weights.config.vocab_size);
    for (const auto& sup : list) {
      const auto row = logits[static_cast<std::size_t>(r)].row(sup.pos);
      const S row_max = row.maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> ex = (row.array() - row_max).exp();
      const S denom = ex.sum();
      loss += weight * (std::log(static_cast<double>(denom)) -
                        static_cast<double>(row(sup.target) - row_max));
      dlogits.row(sup.pos) =
          (ex / denom * static_cast<S>(weight)).matrix();
      dlogits(sup.pos, sup.target) -= static_cast<S>(weight);
    }
    backward_sequence(weights, adapter, sc, dlogits, flags, buffer);
  }
  buffer.micro_steps_seen += 1;
  return loss;
}

template <typename S>
void sgd_step(BackboneWeights<S>& weights, LoraAdapter<S>* adapter,
              GradientBuffer<S>& buffer, const OptimConfig& config,
              const TrainableSelection& selection) {
  config.validate();
  if (buffer.micro_steps_seen != config.grad_accum_steps) {
    throw std::runtime_error(
        "sgd_step after " + std::to_string(buffer.micro_steps_seen) +
        " micro-batches, grad_accum_steps is " +
        std::to_string(config.grad_accum_steps));
  }
  const TrainFlags flags = flags_for(selection, adapter != nullptr);
  if (flags.lora && !buffer.adapter.has_value()) {
    throw std::invalid_argument("gradient buffer lacks adapter gradients");
  }
  const S scale =
      static_cast<S>(config.learning_rate / config.grad_accum_steps);

  if (flags.embeddings) {
    weights.token_embedding -= scale * buffer.backbone.token_embedding;
    weights.position_embedding -= scale * buffer.backbone.position_embedding;
  }
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    auto& lw = weights.layers[l];
    const auto& gb = buffer.backbone.layers[l];
    if (flags.dense) {
      lw.wq -= scale * gb.wq;
      lw.bq -= scale * gb.bq;
      lw.wk -= scale * gb.wk;
      lw.bk -= scale * gb.bk;
      lw.wv -= scale * gb.wv;
      lw.bv -= scale * gb.bv;
      lw.wo -= scale * gb.wo;
      lw.bo -= scale * gb.bo;
      lw.w1 -= scale * gb.w1;
      lw.b1 -= scale * gb.b1;
      lw.w2 -= scale * gb.w2;
      lw.b2 -= scale * gb.b2;
    }
    if (flags.norms) {
      lw.attn_ln_gain -= scale * gb.attn_ln_gain;
      lw.attn_ln_bias -= scale * gb.attn_ln_bias;
      lw.ffn_ln_gain -= scale * gb.ffn_ln_gain;
      lw.ffn_ln_bias -= scale * gb.ffn_ln_bias;
    }
  }
  if (flags.norms) {
    weights.final_ln_gain -= scale * buffer.backbone.final_ln_gain;
    weights.final_ln_bias -= scale * buffer.backbone.final_ln_bias;
  }
  if (flags.head) {
    weights.head_weight -= scale * buffer.backbone.head_weight;
    weights.head_bias -= scale * buffer.backbone.head_bias;
  }
  if (flags.lora) {
    for (std::size_t l = 0; l < adapter->layers.size(); ++l) {
      for (int p = 0; p < 4; ++p) {
        auto& pair = adapter->layers[l][static_cast<std::size_t>(p)];
        const auto& gpair =
            buffer.adapter->layers[l][static_cast<std::size_t>(p)];
        pair.a -= scale * gpair.a;
        pair.b -= scale * gpair.b;
      }
    }
  }
  buffer.zero();
}

template struct GradientBuffer<float>;
template struct GradientBuffer<double>;
template GradientBuffer<float> make_gradient_buffer<float>(
    const BackboneWeights<float>&, const LoraAdapter<float>*);
template GradientBuffer<double> make_gradient_buffer<double>(
    const BackboneWeights<double>&, const LoraAdapter<double>*);
template double loss_and_grad<float>(const BackboneWeights<float>&,
                                     const LoraAdapter<float>*, const Batch&,
                                     LossKind, const TrainableSelection&,
                                     GradientBuffer<float>&);
template double loss_and_grad<double>(const BackboneWeights<double>&,
                                      const LoraAdapter<double>*, const Batch&,
                                      LossKind, const TrainableSelection&,
                                      GradientBuffer<double>&);
template void sgd_step<float>(BackboneWeights<float>&, LoraAdapter<float>*,
                              GradientBuffer<float>&, const OptimConfig&,
                              const TrainableSelection&);
template void sgd_step<double>(BackboneWeights<double>&, LoraAdapter<double>*,
                               GradientBuffer<double>&, const OptimConfig&,
                               const TrainableSelection&);

}  // namespace pttt
