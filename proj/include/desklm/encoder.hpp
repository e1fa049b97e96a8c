#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "desklm/common.hpp"
#include "desklm/model_config.hpp"
#include "desklm/rng.hpp"
#include "desklm/threadpool.hpp"

namespace desklm::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int32_t kIgnoreLabel = -100;

// Token grid for one micro-batch; mask=1 marks real positions, mask=0 pad.
struct Batch {
    int n_seq = 0;
    int seq_len = 0;
    std::vector<int32_t> ids;
    std::vector<uint8_t> mask;

    int32_t id_at(int s, int t) const { return ids[static_cast<size_t>(s) * seq_len + t]; }
    bool real_at(int s, int t) const { return mask[static_cast<size_t>(s) * seq_len + t] != 0; }
    long rows() const { return static_cast<long>(n_seq) * seq_len; }
};

void validate_batch(const ModelConfig& cfg, const Batch& batch, int pad_id);

template <class T>
struct LayerNormParams {
    Mat<T> weight;  // [1,H]
    Mat<T> bias;    // [1,H]
};

template <class T>
struct AttentionParams {
    Mat<T> q_w, k_w, v_w, out_w;  // [H,H]
    Mat<T> q_b, k_b, v_b, out_b;  // [1,H]
    LayerNormParams<T> norm;
};

template <class T>
struct FfnParams {
    Mat<T> fc1_w;  // [H,F]
    Mat<T> fc1_b;  // [1,F]
    Mat<T> fc2_w;  // [F,H]
    Mat<T> fc2_b;  // [1,H]
    LayerNormParams<T> norm;
};

template <class T>
struct LayerParams {
    AttentionParams<T> attn;
    FfnParams<T> ffn;
};

template <class T>
struct EncoderParams {
    Mat<T> token_embed;  // [V,H]; also the tied MLM output projection
    Mat<T> pos_embed;    // [P,H]
    LayerNormParams<T> embed_norm;
    std::vector<LayerParams<T>> layers;
    Mat<T> mlm_dense_w;  // [H,H]
    Mat<T> mlm_dense_b;  // [1,H]
    LayerNormParams<T> mlm_norm;
    Mat<T> mlm_bias;  // [1,V]
};

// Visits every core tensor in manifest order; must stay aligned with
// parameter_manifest (pinned by a test).
template <class T, class F>
void for_each_tensor(EncoderParams<T>& p, F&& f) {
    f("embed.tokens", p.token_embed);
    f("embed.positions", p.pos_embed);
    f("embed.norm.weight", p.embed_norm.weight);
    f("embed.norm.bias", p.embed_norm.bias);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        std::string prefix = "layers." + std::to_string(i) + ".";
        auto& attn = p.layers[i].attn;
        f(prefix + "attn.q.weight", attn.q_w);
        f(prefix + "attn.q.bias", attn.q_b);
        f(prefix + "attn.k.weight", attn.k_w);
        f(prefix + "attn.k.bias", attn.k_b);
        f(prefix + "attn.v.weight", attn.v_w);
        f(prefix + "attn.v.bias", attn.v_b);
        f(prefix + "attn.out.weight", attn.out_w);
        f(prefix + "attn.out.bias", attn.out_b);
        f(prefix + "attn.norm.weight", attn.norm.weight);
        f(prefix + "attn.norm.bias", attn.norm.bias);
        auto& ffn = p.layers[i].ffn;
        f(prefix + "ffn.fc1.weight", ffn.fc1_w);
        f(prefix + "ffn.fc1.bias", ffn.fc1_b);
        f(prefix + "ffn.fc2.weight", ffn.fc2_w);
        f(prefix + "ffn.fc2.bias", ffn.fc2_b);
        f(prefix + "ffn.norm.weight", ffn.norm.weight);
        f(prefix + "ffn.norm.bias", ffn.norm.bias);
    }
    f("mlm.dense.weight", p.mlm_dense_w);
    f("mlm.dense.bias", p.mlm_dense_b);
    f("mlm.norm.weight", p.mlm_norm.weight);
    f("mlm.norm.bias", p.mlm_norm.bias);
    f("mlm.bias", p.mlm_bias);
}

template <class T>
EncoderParams<T> allocate_params(const ModelConfig& cfg, bool zero = true) {
    validate(cfg);
    EncoderParams<T> p;
    p.layers.resize(static_cast<size_t>(cfg.num_layers));
    auto manifest = parameter_manifest(cfg);
    size_t next = 0;
    for_each_tensor(p, [&](const std::string& name, Mat<T>& m) {
        const auto& spec = manifest.at(next++);
        if (spec.name != name) {
            throw std::logic_error("manifest order mismatch at " + name);
        }
        if (zero) {
            m = Mat<T>::Zero(spec.rows, spec.cols);
        } else {
            m.resize(spec.rows, spec.cols);
        }
    });
    return p;
}

// Fills weights with N(0, 0.02), biases with zero and norm scales with one,
// deterministically from the seed.
template <class T>
void init_params(EncoderParams<T>& p, uint64_t seed) {
    Rng rng(mix_seed({seed, 0x1217ull}));
    for_each_tensor(p, [&](const std::string& name, Mat<T>& m) {
        bool is_norm_weight = name.find("norm.weight") != std::string::npos;
        bool is_bias = !is_norm_weight && (name.find(".bias") != std::string::npos ||
                                           name == "mlm.bias");
        if (is_norm_weight) {
            m.setOnes();
        } else if (is_bias) {
            m.setZero();
        } else {
            for (long r = 0; r < m.rows(); ++r) {
                for (long c = 0; c < m.cols(); ++c) {
                    m(r, c) = static_cast<T>(0.02 * rng.gaussian());
                }
            }
        }
    });
    // pad row of the position table is never trained or read
    p.pos_embed.row(1).setZero();
}

template <class T>
struct LayerNormCache {
    Mat<T> x_hat;    // [N,H]
    Mat<T> inv_std;  // [N,1]
};

template <class T>
struct LayerCache {
    Mat<T> attn_in;                // [N,H] input to the block
    Mat<T> q, k, v;                // [N,H]
    std::vector<Mat<T>> probs;     // per sequence: [A*S, S] pre-dropout
    std::vector<Mat<T>> attn_keep; // per sequence dropout masks, empty if p=0
    Mat<T> ctx;                    // [N,H] concatenated head outputs
    Mat<T> resid_keep1;            // dropout mask after out proj, empty if p=0
    LayerNormCache<T> ln1;
    Mat<T> ffn_in;                 // [N,H] post-attention sublayer output
    Mat<T> fc1_pre;                // [N,F]
    Mat<T> fc1_act;                // [N,F]
    Mat<T> resid_keep2;            // [N,H]
    LayerNormCache<T> ln2;
};

template <class T>
struct ForwardCache {
    Mat<T> embed_sum;   // [N,H] token + position, pre-norm
    Mat<T> embed_keep;  // dropout mask, empty if p=0
    LayerNormCache<T> embed_ln;
    std::vector<LayerCache<T>> layers;
    Mat<T> hidden;  // [N,H] final states
};

namespace detail {

template <class T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
}

template <class T>
T gelu_grad_scalar(T x) {
    const T phi = std::exp(T(-0.5) * x * x) * T(1.0 / std::sqrt(2.0 * std::numbers::pi));
    return T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0))) + x * phi;
}

template <class T>
Mat<T> dropout_mask(long rows, long cols, double p, Rng& rng) {
    Mat<T> keep(rows, cols);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
            keep(r, c) = rng.next_double() < p ? T(0) : scale;
        }
    }
    return keep;
}

template <class T>
void layer_norm_forward(const Mat<T>& x, const LayerNormParams<T>& ln, double eps, Mat<T>& y,
                        LayerNormCache<T>* cache) {
    const long n = x.rows();
    const long h = x.cols();
    y.resize(n, h);
    Mat<T> x_hat(n, h);
    Mat<T> inv_std(n, 1);
    for (long r = 0; r < n; ++r) {
        T mean = x.row(r).mean();
        T var = (x.row(r).array() - mean).square().sum() / static_cast<T>(h);
        T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        x_hat.row(r) = ((x.row(r).array() - mean) * is).matrix();
        inv_std(r, 0) = is;
    }
    y = ((x_hat.array().rowwise() * ln.weight.row(0).array()).rowwise() +
         ln.bias.row(0).array())
            .matrix();
    if (cache) {
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
    }
}

// Returns dx; accumulates dweight/dbias.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache,
                           const LayerNormParams<T>& ln, Mat<T>& dweight, Mat<T>& dbias) {
    const long n = dy.rows();
    const long h = dy.cols();
    dweight.row(0).array() += (dy.array() * cache.x_hat.array()).colwise().sum();
    dbias.row(0).array() += dy.array().colwise().sum();
    Mat<T> dxhat = (dy.array().rowwise() * ln.weight.row(0).array()).matrix();
    Mat<T> dx(n, h);
    for (long r = 0; r < n; ++r) {
        T m1 = dxhat.row(r).mean();
        T m2 = (dxhat.row(r).array() * cache.x_hat.row(r).array()).mean();
        dx.row(r) = (((dxhat.row(r).array() - m1) - cache.x_hat.row(r).array() * m2) *
                     cache.inv_std(r, 0))
                        .matrix();
    }
    return dx;
}

template <class T>
void softmax_rows_inplace(Mat<T>& m) {
    for (long r = 0; r < m.rows(); ++r) {
        T mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp().matrix();
        m.row(r) /= m.row(r).sum();
    }
}

}  // namespace detail

// Per-call knobs: dropout is active only when train==true; seed makes every
// stochastic draw reproducible for a given (seed) regardless of threading.
struct ForwardOptions {
    bool train = false;
    uint64_t dropout_seed = 0;
};

template <class T>
class Model {
   public:
    Model(ModelConfig cfg, EncoderParams<T> params)
        : cfg_(std::move(cfg)), params_(std::move(params)) {}

    static Model random_init(const ModelConfig& cfg, uint64_t seed) {
        auto p = allocate_params<T>(cfg, /*zero=*/false);
        init_params(p, seed);
        return Model(cfg, std::move(p));
    }

    const ModelConfig& config() const { return cfg_; }
    EncoderParams<T>& params() { return params_; }
    const EncoderParams<T>& params() const { return params_; }

    // Runs the embedding stack and all blocks; fills cache when given (needed
    // for backward). Returns [n_seq*seq_len, H] hidden states.
    Mat<T> forward(const Batch& batch, const ForwardOptions& opt = {},
                   ForwardCache<T>* cache = nullptr,
                   std::vector<std::vector<Mat<T>>>* attn_probe = nullptr) const;

    // MLM head over a row subset of hidden states.
    struct MlmHeadCache {
        Mat<T> input;    // [M,H]
        Mat<T> dense_pre;
        Mat<T> dense_act;
        LayerNormCache<T> ln;
        Mat<T> normed;
    };
    Mat<T> mlm_logits_rows(const Mat<T>& hidden_rows, MlmHeadCache* cache = nullptr) const;

    // Full-grid logits [n_rows, V]; convenience for tests and scoring.
    Mat<T> mlm_logits(const Mat<T>& hidden) const { return mlm_logits_rows(hidden); }

    // Backward through the MLM head (tied output projection) and the encoder.
    // dlogits corresponds to the rows listed in row_index.
    void mlm_backward(const Batch& batch, const ForwardCache<T>& cache,
                      const MlmHeadCache& head_cache, const Mat<T>& dlogits,
                      const std::vector<long>& row_index, EncoderParams<T>& grads) const;

    // Backward from an arbitrary gradient on the final hidden states.
    void backward(const Batch& batch, const ForwardCache<T>& cache, Mat<T> dhidden,
                  EncoderParams<T>& grads) const;

   private:
    ModelConfig cfg_;
    EncoderParams<T> params_;
};

// ---- task heads -----------------------------------------------------------

template <class T>
struct TokenHeadParams {
    Mat<T> weight;  // [H,K]
    Mat<T> bias;    // [1,K]
};

template <class T>
struct SeqHeadParams {
    Mat<T> dense_w;  // [H,H]
    Mat<T> dense_b;  // [1,H]
    Mat<T> out_w;    // [H,K]
    Mat<T> out_b;    // [1,K]
};

template <class T>
TokenHeadParams<T> init_token_head(int hidden, int n_tags, uint64_t seed) {
    if (n_tags < 2) {
        throw ConfigError("token head needs at least 2 tags");
    }
    Rng rng(mix_seed({seed, 0x70Cull}));
    TokenHeadParams<T> h;
    h.weight.resize(hidden, n_tags);
    for (long r = 0; r < h.weight.rows(); ++r) {
        for (long c = 0; c < h.weight.cols(); ++c) {
            h.weight(r, c) = static_cast<T>(0.02 * rng.gaussian());
        }
    }
    h.bias = Mat<T>::Zero(1, n_tags);
    return h;
}

template <class T>
SeqHeadParams<T> init_seq_head(int hidden, int n_classes, uint64_t seed) {
    if (n_classes < 2) {
        throw ConfigError("sequence head needs at least 2 classes");
    }
    Rng rng(mix_seed({seed, 0x5EBull}));
    SeqHeadParams<T> h;
    auto fill = [&rng](Mat<T>& m, long rows, long cols) {
        m.resize(rows, cols);
        for (long r = 0; r < rows; ++r) {
            for (long c = 0; c < cols; ++c) {
                m(r, c) = static_cast<T>(0.02 * rng.gaussian());
            }
        }
    };
    fill(h.dense_w, hidden, hidden);
    h.dense_b = Mat<T>::Zero(1, hidden);
    fill(h.out_w, hidden, n_classes);
    h.out_b = Mat<T>::Zero(1, n_classes);
    return h;
}

// Per-position tag logits [N, K].
template <class T>
Mat<T> token_head_logits(const TokenHeadParams<T>& head, const Mat<T>& hidden) {
    return ((hidden * head.weight).rowwise() + head.bias.row(0)).eval();
}

// dlogits -> dhidden; accumulates head grads.
template <class T>
Mat<T> token_head_backward(const TokenHeadParams<T>& head, const Mat<T>& hidden,
                           const Mat<T>& dlogits, TokenHeadParams<T>& grads) {
    grads.weight += hidden.transpose() * dlogits;
    grads.bias.row(0).array() += dlogits.array().colwise().sum();
    return (dlogits * head.weight.transpose()).eval();
}

template <class T>
struct SeqHeadCache {
    Mat<T> input;      // [B,H] bos rows
    Mat<T> dense_pre;  // [B,H]
    Mat<T> dense_act;  // tanh output
};

// Class logits from the position-0 hidden state of each sequence.
template <class T>
Mat<T> seq_head_logits(const SeqHeadParams<T>& head, const Mat<T>& bos_hidden,
                       SeqHeadCache<T>* cache = nullptr) {
    Mat<T> pre = (bos_hidden * head.dense_w).rowwise() + head.dense_b.row(0);
    Mat<T> act = pre.array().tanh().matrix();
    Mat<T> logits = (act * head.out_w).rowwise() + head.out_b.row(0);
    if (cache) {
        cache->input = bos_hidden;
        cache->dense_pre = std::move(pre);
        cache->dense_act = std::move(act);
    }
    return logits;
}

template <class T>
Mat<T> seq_head_backward(const SeqHeadParams<T>& head, const SeqHeadCache<T>& cache,
                         const Mat<T>& dlogits, SeqHeadParams<T>& grads) {
    grads.out_w += cache.dense_act.transpose() * dlogits;
    grads.out_b.row(0).array() += dlogits.array().colwise().sum();
    Mat<T> dact = dlogits * head.out_w.transpose();
    Mat<T> dpre = (dact.array() * (T(1) - cache.dense_act.array().square())).matrix();
    grads.dense_w += cache.input.transpose() * dpre;
    grads.dense_b.row(0).array() += dpre.array().colwise().sum();
    return (dpre * head.dense_w.transpose()).eval();
}

// ---- losses ---------------------------------------------------------------

// Summed cross entropy over rows whose target is not kIgnoreLabel. dlogits
// (same shape as logits) receives softmax-minus-onehot for counted rows and
// zero elsewhere; the caller applies any 1/count scaling.
template <class T>
std::pair<double, long> softmax_nll_sum(const Mat<T>& logits, const std::vector<int32_t>& targets,
                                        Mat<T>* dlogits = nullptr) {
    if (static_cast<long>(targets.size()) != logits.rows()) {
        throw DataError("loss: target count " + std::to_string(targets.size()) +
                        " does not match logit rows " + std::to_string(logits.rows()));
    }
    if (dlogits) {
        *dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
    }
    double total = 0.0;
    long count = 0;
    for (long r = 0; r < logits.rows(); ++r) {
        int32_t y = targets[static_cast<size_t>(r)];
        if (y == kIgnoreLabel) {
            continue;
        }
        if (y < 0 || y >= logits.cols()) {
            throw DataError("loss: target id " + std::to_string(y) + " out of range");
        }
        T mx = logits.row(r).maxCoeff();
        auto shifted = (logits.row(r).array() - mx).eval();
        T lse = std::log(shifted.exp().sum()) + mx;
        total += static_cast<double>(lse - logits(r, y));
        ++count;
        if (dlogits) {
            dlogits->row(r) = (logits.row(r).array() - lse).exp().matrix();
            (*dlogits)(r, y) -= T(1);
        }
    }
    return {total, count};
}

// ---- implementation -------------------------------------------------------

template <class T>
Mat<T> Model<T>::forward(const Batch& batch, const ForwardOptions& opt, ForwardCache<T>* cache,
                         std::vector<std::vector<Mat<T>>>* attn_probe) const {
    const auto& cfg = cfg_;
    const auto& p = params_;
    const long N = batch.rows();
    const long H = cfg.hidden_size;
    const long S = batch.seq_len;
    const long B = batch.n_seq;
    const int A = cfg.num_heads;
    const long d = cfg.head_dim();
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

    validate_batch(cfg, batch, /*pad_id=*/1);

    Rng drop_rng(mix_seed({opt.dropout_seed, 0xD20Full}));
    const bool use_dropout = opt.train && cfg.dropout > 0.0;
    const bool use_attn_dropout = opt.train && cfg.attention_dropout > 0.0;

    // embeddings: token + learned position (positions start at pad_id + 1)
    Mat<T> x(N, H);
    for (long b = 0; b < B; ++b) {
        for (long t = 0; t < S; ++t) {
            long row = b * S + t;
            x.row(row) = p.token_embed.row(batch.ids[static_cast<size_t>(row)]) +
                         p.pos_embed.row(2 + t);
        }
    }
    if (cache) {
        cache->embed_sum = x;
    }
    Mat<T> h;
    detail::layer_norm_forward(x, p.embed_norm, cfg.layer_norm_eps, h,
                               cache ? &cache->embed_ln : nullptr);
    if (use_dropout) {
        Mat<T> keep = detail::dropout_mask<T>(N, H, cfg.dropout, drop_rng);
        h.array() *= keep.array();
        if (cache) {
            cache->embed_keep = std::move(keep);
        }
    }

    // additive key-padding bias per sequence
    Mat<T> key_bias(B, S);
    for (long b = 0; b < B; ++b) {
        for (long t = 0; t < S; ++t) {
            key_bias(b, t) = batch.mask[static_cast<size_t>(b * S + t)] ? T(0) : T(-1e9);
        }
    }

    if (cache) {
        cache->layers.resize(static_cast<size_t>(cfg.num_layers));
    }
    if (attn_probe) {
        attn_probe->resize(static_cast<size_t>(cfg.num_layers));
    }

    for (int li = 0; li < cfg.num_layers; ++li) {
        const auto& layer = p.layers[static_cast<size_t>(li)];
        LayerCache<T>* lc = cache ? &cache->layers[static_cast<size_t>(li)] : nullptr;
        if (lc) {
            lc->attn_in = h;
        }

        Mat<T> q = (h * layer.attn.q_w).rowwise() + layer.attn.q_b.row(0);
        Mat<T> k = (h * layer.attn.k_w).rowwise() + layer.attn.k_b.row(0);
        Mat<T> v = (h * layer.attn.v_w).rowwise() + layer.attn.v_b.row(0);

        // Attention dropout masks must come from one sequential stream for
        // determinism, so they are drawn before the parallel section.
        std::vector<Mat<T>> attn_keep;
        if (use_attn_dropout) {
            attn_keep.reserve(static_cast<size_t>(B));
            for (long b = 0; b < B; ++b) {
                attn_keep.push_back(
                    detail::dropout_mask<T>(A * S, S, cfg.attention_dropout, drop_rng));
            }
        }

        Mat<T> ctx(N, H);
        std::vector<Mat<T>> probs_store(static_cast<size_t>(B));
        global_pool().parallel_for(0, static_cast<size_t>(B), [&](size_t bs) {
            long b = static_cast<long>(bs);
            Mat<T> seq_probs(A * S, S);
            for (int a = 0; a < A; ++a) {
                auto qb = q.block(b * S, a * d, S, d);
                auto kb = k.block(b * S, a * d, S, d);
                auto vb = v.block(b * S, a * d, S, d);
                Mat<T> scores = (qb * kb.transpose()) * inv_sqrt_d;
                scores.rowwise() += key_bias.row(b);
                detail::softmax_rows_inplace(scores);
                if (lc || attn_probe) {
                    seq_probs.block(a * S, 0, S, S) = scores;
                }
                if (use_attn_dropout) {
                    scores.array() *= attn_keep[bs].block(a * S, 0, S, S).array();
                }
                ctx.block(b * S, a * d, S, d) = scores * vb;
            }
            if (lc || attn_probe) {
                probs_store[bs] = std::move(seq_probs);
            }
        });
        if (attn_probe) {
            (*attn_probe)[static_cast<size_t>(li)] = probs_store;
        }

        Mat<T> attn_out = (ctx * layer.attn.out_w).rowwise() + layer.attn.out_b.row(0);
        Mat<T> resid_keep1;
        if (use_dropout) {
            resid_keep1 = detail::dropout_mask<T>(N, H, cfg.dropout, drop_rng);
            attn_out.array() *= resid_keep1.array();
        }
        Mat<T> res1 = h + attn_out;
        Mat<T> y1;
        detail::layer_norm_forward(res1, layer.attn.norm, cfg.layer_norm_eps, y1,
                                   lc ? &lc->ln1 : nullptr);

        Mat<T> fc1_pre = (y1 * layer.ffn.fc1_w).rowwise() + layer.ffn.fc1_b.row(0);
        Mat<T> fc1_act =
            fc1_pre.unaryExpr([](T u) { return detail::gelu_scalar(u); });
        Mat<T> ffn_out = (fc1_act * layer.ffn.fc2_w).rowwise() + layer.ffn.fc2_b.row(0);
        Mat<T> resid_keep2;
        if (use_dropout) {
            resid_keep2 = detail::dropout_mask<T>(N, H, cfg.dropout, drop_rng);
            ffn_out.array() *= resid_keep2.array();
        }
        Mat<T> res2 = y1 + ffn_out;
        Mat<T> y2;
        detail::layer_norm_forward(res2, layer.ffn.norm, cfg.layer_norm_eps, y2,
                                   lc ? &lc->ln2 : nullptr);

        if (lc) {
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->probs = std::move(probs_store);
            lc->attn_keep = std::move(attn_keep);
            lc->ctx = std::move(ctx);
            lc->resid_keep1 = std::move(resid_keep1);
            lc->ffn_in = y1;
            lc->fc1_pre = std::move(fc1_pre);
            lc->fc1_act = std::move(fc1_act);
            lc->resid_keep2 = std::move(resid_keep2);
        }
        h = std::move(y2);
    }

    if (cache) {
        cache->hidden = h;
    }
    return h;
}

template <class T>
Mat<T> Model<T>::mlm_logits_rows(const Mat<T>& hidden_rows, MlmHeadCache* cache) const {
    const auto& p = params_;
    Mat<T> pre = (hidden_rows * p.mlm_dense_w).rowwise() + p.mlm_dense_b.row(0);
    Mat<T> act = pre.unaryExpr([](T u) { return detail::gelu_scalar(u); });
    Mat<T> normed;
    detail::layer_norm_forward(act, p.mlm_norm, cfg_.layer_norm_eps, normed,
                               cache ? &cache->ln : nullptr);
    Mat<T> logits = (normed * p.token_embed.transpose()).rowwise() + p.mlm_bias.row(0);
    if (cache) {
        cache->input = hidden_rows;
        cache->dense_pre = std::move(pre);
        cache->dense_act = std::move(act);
        cache->normed = std::move(normed);
    }
    return logits;
}

template <class T>
void Model<T>::mlm_backward(const Batch& batch, const ForwardCache<T>& cache,
                            const MlmHeadCache& head_cache, const Mat<T>& dlogits,
                            const std::vector<long>& row_index, EncoderParams<T>& grads) const {
    const auto& p = params_;
    // tied output projection: gradient flows into both the head input and the
    // token embedding
    Mat<T> dnormed = dlogits * p.token_embed;
    grads.token_embed += dlogits.transpose() * head_cache.normed;
    grads.mlm_bias.row(0).array() += dlogits.array().colwise().sum();
    Mat<T> dact = detail::layer_norm_backward(dnormed, head_cache.ln, p.mlm_norm,
                                              grads.mlm_norm.weight, grads.mlm_norm.bias);
    Mat<T> dpre = (dact.array() * head_cache.dense_pre.unaryExpr([](T u) {
                                       return detail::gelu_grad_scalar(u);
                                   }).array())
                      .matrix();
    grads.mlm_dense_w += head_cache.input.transpose() * dpre;
    grads.mlm_dense_b.row(0).array() += dpre.array().colwise().sum();
    Mat<T> dinput = dpre * p.mlm_dense_w.transpose();

    Mat<T> dhidden = Mat<T>::Zero(batch.rows(), cfg_.hidden_size);
    for (long i = 0; i < static_cast<long>(row_index.size()); ++i) {
        dhidden.row(row_index[static_cast<size_t>(i)]) = dinput.row(i);
    }
    backward(batch, cache, std::move(dhidden), grads);
}

template <class T>
void Model<T>::backward(const Batch& batch, const ForwardCache<T>& cache, Mat<T> dhidden,
                        EncoderParams<T>& grads) const {
    const auto& cfg = cfg_;
    const auto& p = params_;
    const long S = batch.seq_len;
    const long B = batch.n_seq;
    const int A = cfg.num_heads;
    const long d = cfg.head_dim();
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

    Mat<T> dh = std::move(dhidden);
    for (int li = cfg.num_layers - 1; li >= 0; --li) {
        const auto& layer = p.layers[static_cast<size_t>(li)];
        auto& glayer = grads.layers[static_cast<size_t>(li)];
        const auto& lc = cache.layers[static_cast<size_t>(li)];

        // ffn sublayer
        Mat<T> dres2 = detail::layer_norm_backward(dh, lc.ln2, layer.ffn.norm,
                                                   glayer.ffn.norm.weight, glayer.ffn.norm.bias);
        Mat<T> dffn_out = dres2;
        if (lc.resid_keep2.size() > 0) {
            dffn_out.array() *= lc.resid_keep2.array();
        }
        glayer.ffn.fc2_w += lc.fc1_act.transpose() * dffn_out;
        glayer.ffn.fc2_b.row(0).array() += dffn_out.array().colwise().sum();
        Mat<T> dact = dffn_out * layer.ffn.fc2_w.transpose();
        Mat<T> dpre = (dact.array() * lc.fc1_pre.unaryExpr([](T u) {
                                          return detail::gelu_grad_scalar(u);
                                      }).array())
                          .matrix();
        glayer.ffn.fc1_w += lc.ffn_in.transpose() * dpre;
        glayer.ffn.fc1_b.row(0).array() += dpre.array().colwise().sum();
        Mat<T> dy1 = dres2 + dpre * layer.ffn.fc1_w.transpose();

        // attention sublayer
        Mat<T> dres1 = detail::layer_norm_backward(dy1, lc.ln1, layer.attn.norm,
                                                   glayer.attn.norm.weight, glayer.attn.norm.bias);
        Mat<T> dattn_out = dres1;
        if (lc.resid_keep1.size() > 0) {
            dattn_out.array() *= lc.resid_keep1.array();
        }
        glayer.attn.out_w += lc.ctx.transpose() * dattn_out;
        glayer.attn.out_b.row(0).array() += dattn_out.array().colwise().sum();
        Mat<T> dctx = dattn_out * layer.attn.out_w.transpose();

        Mat<T> dq(dctx.rows(), dctx.cols());
        Mat<T> dk(dctx.rows(), dctx.cols());
        Mat<T> dv(dctx.rows(), dctx.cols());
        global_pool().parallel_for(0, static_cast<size_t>(B), [&](size_t bs) {
            long b = static_cast<long>(bs);
            for (int a = 0; a < A; ++a) {
                auto qb = lc.q.block(b * S, a * d, S, d);
                auto kb = lc.k.block(b * S, a * d, S, d);
                auto vb = lc.v.block(b * S, a * d, S, d);
                auto probs = lc.probs[bs].block(a * S, 0, S, S);
                auto dctx_b = dctx.block(b * S, a * d, S, d);

                Mat<T> probs_dropped = probs;
                if (!lc.attn_keep.empty()) {
                    probs_dropped.array() *= lc.attn_keep[bs].block(a * S, 0, S, S).array();
                }
                Mat<T> dprobs_dropped = dctx_b * vb.transpose();
                dv.block(b * S, a * d, S, d) = probs_dropped.transpose() * dctx_b;
                Mat<T> dprobs = dprobs_dropped;
                if (!lc.attn_keep.empty()) {
                    dprobs.array() *= lc.attn_keep[bs].block(a * S, 0, S, S).array();
                }
                // softmax backward
                Mat<T> dscores(S, S);
                for (long r = 0; r < S; ++r) {
                    T dot = (dprobs.row(r).array() * probs.row(r).array()).sum();
                    dscores.row(r) =
                        (probs.row(r).array() * (dprobs.row(r).array() - dot)).matrix();
                }
                dq.block(b * S, a * d, S, d) = (dscores * kb) * inv_sqrt_d;
                dk.block(b * S, a * d, S, d) = (dscores.transpose() * qb) * inv_sqrt_d;
            }
        });

        const Mat<T>& x = lc.attn_in;
        glayer.attn.q_w += x.transpose() * dq;
        glayer.attn.q_b.row(0).array() += dq.array().colwise().sum();
        glayer.attn.k_w += x.transpose() * dk;
        glayer.attn.k_b.row(0).array() += dk.array().colwise().sum();
        glayer.attn.v_w += x.transpose() * dv;
        glayer.attn.v_b.row(0).array() += dv.array().colwise().sum();

        Mat<T> dx = dres1;
        dx += dq * layer.attn.q_w.transpose();
        dx += dk * layer.attn.k_w.transpose();
        dx += dv * layer.attn.v_w.transpose();
        dh = std::move(dx);
    }

    // embedding stack
    if (cache.embed_keep.size() > 0) {
        dh.array() *= cache.embed_keep.array();
    }
    Mat<T> dsum = detail::layer_norm_backward(dh, cache.embed_ln, p.embed_norm,
                                              grads.embed_norm.weight, grads.embed_norm.bias);
    for (long b = 0; b < B; ++b) {
        for (long t = 0; t < S; ++t) {
            long row = b * S + t;
            grads.token_embed.row(batch.ids[static_cast<size_t>(row)]) += dsum.row(row);
            grads.pos_embed.row(2 + t) += dsum.row(row);
        }
    }
}

}  // namespace desklm::nn
