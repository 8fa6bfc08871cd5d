#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace pcrl {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 128;
  int max_len = 256;

  bool operator==(const ModelConfig&) const = default;
};

/// Decoder-only pre-LayerNorm transformer over a flat double parameter
/// vector, with exact hand-derived gradients.
class Transformer {
 public:
  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
  };

  /// Saved forward state for one sequence.
  struct Activations {
    struct Layer {
      Mat ln1_xhat, a, q, k, v, o;
      Eigen::VectorXd ln1_rstd, ln2_rstd;
      std::vector<Mat> probs;  // per head, T x T
      Mat ln2_xhat, b, u, g;
    };
    std::vector<int> tokens;
    std::size_t first = 0;
    std::vector<Layer> layers;
    Mat lnf_xhat, hf;
    Eigen::VectorXd lnf_rstd;
    /// Log-softmax rows for positions [first, T).
    Mat logp;
  };

  /// Key/value cache for incremental inference.
  struct Cache {
    std::vector<Mat> k, v;
    std::size_t len = 0;
  };

  Transformer() = default;
  Transformer(const ModelConfig& cfg, std::uint64_t seed, bool zero_output = false);

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  /// Teacher-forced pass over `tokens`; log-probabilities are produced for
  /// positions [first, T).
  void forward(std::span<const int> tokens, std::size_t first, Activations& act) const;

  /// Accumulates d(loss)/d(theta) into grad given d(loss)/d(logits) for the
  /// rows produced by forward().
  void backward(const Activations& act, const Mat& dlogits, std::span<double> grad) const;

  /// Appends tokens to the cache; returns log-probability rows predicting the
  /// token after each appended one.
  Mat extend(Cache& cache, std::span<const int> tokens) const;

  bool operator==(const Transformer& o) const { return cfg_ == o.cfg_ && params_ == o.params_; }

 private:
  void build_layout();

  ModelConfig cfg_;
  // Aligned so vectorized reductions peel identically in every run.
  std::vector<double, Eigen::aligned_allocator<double>> params_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, w_out_ = 0, b_out_ = 0;
  std::vector<LayerOffsets> layers_;
};

/// Row-wise log-softmax.
Mat log_softmax_rows(const Mat& logits);

}  // namespace pcrl
