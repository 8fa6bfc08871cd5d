#include "pcrl/transformer.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "pcrl/common.hpp"

namespace pcrl {

namespace {

using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
using CRow = Eigen::Map<const Eigen::RowVectorXd>;
using MRow = Eigen::Map<Eigen::RowVectorXd>;

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void layer_norm(const Mat& x, const CRow& g, const CRow& b, Mat& xhat, Eigen::VectorXd& rstd, Mat& y) {
  const auto n = x.rows();
  const auto d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
}

// Returns dx; accumulates dg, db.
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Eigen::VectorXd& rstd, const CRow& g, MRow dg,
                        MRow db) {
  dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  Mat dxhat = dy.array().rowwise() * g.array();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

Mat gelu(const Mat& u) {
  return u.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); });
}

Mat gelu_grad(const Mat& u) {
  return u.unaryExpr([](double x) {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  });
}

// Softmax over the first `visible` entries of each row i (visible = offset+i+1).
void masked_softmax(Mat& s, std::size_t offset) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index visible = static_cast<Eigen::Index>(offset) + i + 1;
    auto row = s.row(i);
    const double mx = row.head(visible).maxCoeff();
    row.head(visible) = (row.head(visible).array() - mx).exp();
    row.head(visible) /= row.head(visible).sum();
    if (visible < s.cols()) row.tail(s.cols() - visible).setZero();
  }
}

}  // namespace

Mat log_softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

Transformer::Transformer(const ModelConfig& cfg, std::uint64_t seed, bool zero_output) : cfg_(cfg) {
  if (cfg.vocab_size <= 0 || cfg.d_model <= 0 || cfg.n_layers <= 0 || cfg.n_heads <= 0 || cfg.d_ff <= 0 ||
      cfg.max_len <= 0)
    throw ConfigError("model dimensions must be positive");
  if (cfg.d_model % cfg.n_heads) throw ConfigError("d_model must be divisible by n_heads");
  build_layout();

  Rng rng(derive_seed(seed, 11));
  const double std = 0.02;
  const double resid_std = std / std::sqrt(2.0 * cfg.n_layers);
  auto fill = [&](std::size_t off, std::size_t n, double s) {
    for (std::size_t i = 0; i < n; ++i) params_[off + i] = s * rng.normal();
  };
  auto ones = [&](std::size_t off, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) params_[off + i] = 1.0;
  };
  const std::size_t d = cfg.d_model, ff = cfg.d_ff, V = cfg.vocab_size;
  fill(tok_emb_, V * d, std);
  fill(pos_emb_, static_cast<std::size_t>(cfg.max_len) * d, std);
  for (const auto& L : layers_) {
    ones(L.ln1_g, d);
    fill(L.wq, d * d, std);
    fill(L.wk, d * d, std);
    fill(L.wv, d * d, std);
    fill(L.wo, d * d, resid_std);
    ones(L.ln2_g, d);
    fill(L.w1, d * ff, std);
    fill(L.w2, ff * d, resid_std);
  }
  ones(lnf_g_, d);
  if (!zero_output) fill(w_out_, d * V, std);
}

void Transformer::build_layout() {
  const std::size_t d = cfg_.d_model, ff = cfg_.d_ff, V = cfg_.vocab_size;
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    const std::size_t at = off;
    off += n;
    return at;
  };
  tok_emb_ = take(V * d);
  pos_emb_ = take(static_cast<std::size_t>(cfg_.max_len) * d);
  layers_.clear();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerOffsets L{};
    L.ln1_g = take(d);
    L.ln1_b = take(d);
    L.wq = take(d * d);
    L.bq = take(d);
    L.wk = take(d * d);
    L.bk = take(d);
    L.wv = take(d * d);
    L.bv = take(d);
    L.wo = take(d * d);
    L.bo = take(d);
    L.ln2_g = take(d);
    L.ln2_b = take(d);
    L.w1 = take(d * ff);
    L.b1 = take(ff);
    L.w2 = take(ff * d);
    L.b2 = take(d);
    layers_.push_back(L);
  }
  lnf_g_ = take(d);
  lnf_b_ = take(d);
  w_out_ = take(d * V);
  b_out_ = take(V);
  params_.assign(off, 0.0);
}

void Transformer::forward(std::span<const int> tokens, std::size_t first, Activations& act) const {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  if (T == 0 || first >= tokens.size()) throw ContractError("forward: empty sequence or first out of range");
  if (T > cfg_.max_len) throw ContractError("sequence of " + std::to_string(T) + " tokens exceeds max_len");
  const Eigen::Index d = cfg_.d_model, ff = cfg_.d_ff, V = cfg_.vocab_size, H = cfg_.n_heads, hs = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double* p = params_.data();

  act.tokens.assign(tokens.begin(), tokens.end());
  act.first = first;
  act.layers.resize(layers_.size());

  CMap tok(p + tok_emb_, V, d), pos(p + pos_emb_, cfg_.max_len, d);
  Mat h(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= V) throw ContractError("token id out of range");
    h.row(t) = tok.row(id) + pos.row(t);
  }

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerOffsets& L = layers_[l];
    auto& la = act.layers[l];
    layer_norm(h, CRow(p + L.ln1_g, d), CRow(p + L.ln1_b, d), la.ln1_xhat, la.ln1_rstd, la.a);
    la.q.noalias() = la.a * CMap(p + L.wq, d, d);
    la.q.rowwise() += CRow(p + L.bq, d);
    la.k.noalias() = la.a * CMap(p + L.wk, d, d);
    la.k.rowwise() += CRow(p + L.bk, d);
    la.v.noalias() = la.a * CMap(p + L.wv, d, d);
    la.v.rowwise() += CRow(p + L.bv, d);
    la.o.resize(T, d);
    la.probs.resize(static_cast<std::size_t>(H));
    for (Eigen::Index hd = 0; hd < H; ++hd) {
      Mat& P = la.probs[static_cast<std::size_t>(hd)];
      P.noalias() = la.q.middleCols(hd * hs, hs) * la.k.middleCols(hd * hs, hs).transpose();
      P *= scale;
      masked_softmax(P, 0);
      la.o.middleCols(hd * hs, hs).noalias() = P * la.v.middleCols(hd * hs, hs);
    }
    h.noalias() += la.o * CMap(p + L.wo, d, d);
    h.rowwise() += CRow(p + L.bo, d);

    layer_norm(h, CRow(p + L.ln2_g, d), CRow(p + L.ln2_b, d), la.ln2_xhat, la.ln2_rstd, la.b);
    la.u.noalias() = la.b * CMap(p + L.w1, d, ff);
    la.u.rowwise() += CRow(p + L.b1, ff);
    la.g = gelu(la.u);
    h.noalias() += la.g * CMap(p + L.w2, ff, d);
    h.rowwise() += CRow(p + L.b2, d);
  }

  const Eigen::Index n = T - static_cast<Eigen::Index>(first);
  Mat tail = h.bottomRows(n);
  layer_norm(tail, CRow(p + lnf_g_, d), CRow(p + lnf_b_, d), act.lnf_xhat, act.lnf_rstd, act.hf);
  Mat logits = act.hf * CMap(p + w_out_, d, V);
  logits.rowwise() += CRow(p + b_out_, V);
  act.logp = log_softmax_rows(logits);
}

void Transformer::backward(const Activations& act, const Mat& dlogits, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw ContractError("gradient buffer has wrong size");
  const auto T = static_cast<Eigen::Index>(act.tokens.size());
  const Eigen::Index d = cfg_.d_model, ff = cfg_.d_ff, V = cfg_.vocab_size, H = cfg_.n_heads, hs = d / H;
  const Eigen::Index n = T - static_cast<Eigen::Index>(act.first);
  if (dlogits.rows() != n || dlogits.cols() != V) throw ContractError("dlogits has wrong shape");
  const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double* p = params_.data();
  double* g = grad.data();

  MMap(g + w_out_, d, V).noalias() += act.hf.transpose() * dlogits;
  MRow(g + b_out_, V) += dlogits.colwise().sum();
  Mat dhf = dlogits * CMap(p + w_out_, d, V).transpose();

  Mat dh = Mat::Zero(T, d);
  dh.bottomRows(n) = layer_norm_backward(dhf, act.lnf_xhat, act.lnf_rstd, CRow(p + lnf_g_, d), MRow(g + lnf_g_, d),
                                         MRow(g + lnf_b_, d));

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const LayerOffsets& L = layers_[li];
    const auto& la = act.layers[li];

    // Feed-forward branch.
    MMap(g + L.w2, ff, d).noalias() += la.g.transpose() * dh;
    MRow(g + L.b2, d) += dh.colwise().sum();
    Mat du = (dh * CMap(p + L.w2, ff, d).transpose()).cwiseProduct(gelu_grad(la.u));
    MMap(g + L.w1, d, ff).noalias() += la.b.transpose() * du;
    MRow(g + L.b1, ff) += du.colwise().sum();
    Mat db = du * CMap(p + L.w1, d, ff).transpose();
    dh += layer_norm_backward(db, la.ln2_xhat, la.ln2_rstd, CRow(p + L.ln2_g, d), MRow(g + L.ln2_g, d),
                              MRow(g + L.ln2_b, d));

    // Attention branch.
    MMap(g + L.wo, d, d).noalias() += la.o.transpose() * dh;
    MRow(g + L.bo, d) += dh.colwise().sum();
    Mat dO = dh * CMap(p + L.wo, d, d).transpose();
    Mat dq(T, d), dk(T, d), dv(T, d);
    for (Eigen::Index hd = 0; hd < H; ++hd) {
      const Mat& P = la.probs[static_cast<std::size_t>(hd)];
      const auto dOh = dO.middleCols(hd * hs, hs);
      Mat dP = dOh * la.v.middleCols(hd * hs, hs).transpose();
      dv.middleCols(hd * hs, hs).noalias() = P.transpose() * dOh;
      const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
      Mat dS = P.array() * (dP.array().colwise() - rowdot.array());
      dS *= scale;
      dq.middleCols(hd * hs, hs).noalias() = dS * la.k.middleCols(hd * hs, hs);
      dk.middleCols(hd * hs, hs).noalias() = dS.transpose() * la.q.middleCols(hd * hs, hs);
    }
    MMap(g + L.wq, d, d).noalias() += la.a.transpose() * dq;
    MRow(g + L.bq, d) += dq.colwise().sum();
    MMap(g + L.wk, d, d).noalias() += la.a.transpose() * dk;
    MRow(g + L.bk, d) += dk.colwise().sum();
    MMap(g + L.wv, d, d).noalias() += la.a.transpose() * dv;
    MRow(g + L.bv, d) += dv.colwise().sum();
    Mat da = dq * CMap(p + L.wq, d, d).transpose();
    da.noalias() += dk * CMap(p + L.wk, d, d).transpose();
    da.noalias() += dv * CMap(p + L.wv, d, d).transpose();
    dh += layer_norm_backward(da, la.ln1_xhat, la.ln1_rstd, CRow(p + L.ln1_g, d), MRow(g + L.ln1_g, d),
                              MRow(g + L.ln1_b, d));
  }

  MMap dtok(g + tok_emb_, V, d), dpos(g + pos_emb_, cfg_.max_len, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    dtok.row(act.tokens[static_cast<std::size_t>(t)]) += dh.row(t);
    dpos.row(t) += dh.row(t);
  }
}

Mat Transformer::extend(Cache& cache, std::span<const int> tokens) const {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const auto T0 = static_cast<Eigen::Index>(cache.len);
  if (n == 0) throw ContractError("extend: no tokens");
  if (T0 + n > cfg_.max_len) throw ContractError("sequence exceeds max_len");
  const Eigen::Index d = cfg_.d_model, ff = cfg_.d_ff, V = cfg_.vocab_size, H = cfg_.n_heads, hs = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double* p = params_.data();
  if (cache.k.size() != layers_.size()) {
    cache.k.assign(layers_.size(), Mat(0, d));
    cache.v.assign(layers_.size(), Mat(0, d));
  }

  CMap tok(p + tok_emb_, V, d), pos(p + pos_emb_, cfg_.max_len, d);
  Mat h(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= V) throw ContractError("token id out of range");
    h.row(t) = tok.row(id) + pos.row(T0 + t);
  }

  Mat xhat, a, b;
  Eigen::VectorXd rstd;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerOffsets& L = layers_[l];
    layer_norm(h, CRow(p + L.ln1_g, d), CRow(p + L.ln1_b, d), xhat, rstd, a);
    Mat q = a * CMap(p + L.wq, d, d);
    q.rowwise() += CRow(p + L.bq, d);
    Mat& K = cache.k[l];
    Mat& Vv = cache.v[l];
    K.conservativeResize(T0 + n, d);
    Vv.conservativeResize(T0 + n, d);
    K.bottomRows(n).noalias() = a * CMap(p + L.wk, d, d);
    K.bottomRows(n).rowwise() += CRow(p + L.bk, d);
    Vv.bottomRows(n).noalias() = a * CMap(p + L.wv, d, d);
    Vv.bottomRows(n).rowwise() += CRow(p + L.bv, d);
    Mat o(n, d);
    for (Eigen::Index hd = 0; hd < H; ++hd) {
      Mat S = q.middleCols(hd * hs, hs) * K.middleCols(hd * hs, hs).transpose();
      S *= scale;
      masked_softmax(S, static_cast<std::size_t>(T0));
      o.middleCols(hd * hs, hs).noalias() = S * Vv.middleCols(hd * hs, hs);
    }
    h.noalias() += o * CMap(p + L.wo, d, d);
    h.rowwise() += CRow(p + L.bo, d);
    layer_norm(h, CRow(p + L.ln2_g, d), CRow(p + L.ln2_b, d), xhat, rstd, b);
    Mat u = b * CMap(p + L.w1, d, ff);
    u.rowwise() += CRow(p + L.b1, ff);
    h.noalias() += gelu(u) * CMap(p + L.w2, ff, d);
    h.rowwise() += CRow(p + L.b2, d);
  }
  cache.len += static_cast<std::size_t>(n);

  Mat hf;
  layer_norm(h, CRow(p + lnf_g_, d), CRow(p + lnf_b_, d), xhat, rstd, hf);
  Mat logits = hf * CMap(p + w_out_, d, V);
  logits.rowwise() += CRow(p + b_out_, V);
  return log_softmax_rows(logits);
}

}  // namespace pcrl
