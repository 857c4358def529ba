#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lmas/autodiff.hpp"
#include "lmas/rng.hpp"

namespace lmas {

struct HeadConfig {
  std::size_t num_classes = 4;
  /// Alignment width d_u; 0 means "same as the LM state width".
  std::size_t attention_dim = 0;
  std::size_t hidden_width = 50;
  double dropout_keep = 0.6;
  /// Pool raw states instead of the tanh alignment features.
  bool pool_hidden = false;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  void validate() const;

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

struct AttentionParams {
  Parameter W_u;  // d_u x d_h
  Parameter b_u;  // d_u
  Parameter W_a;  // 1 x d_u
};

/// Alignment scores attached to the tokens they were computed over.
struct AttentionMap {
  std::vector<std::string> tokens;
  std::vector<double> alpha;
};

struct LinearBlock {
  Parameter W;      // out x in
  Parameter gamma;  // out
  Parameter beta;   // out
  Tensor running_mean;
  Tensor running_var;
  bool relu = false;
};

struct ClassifierHead {
  LinearBlock block1;
  LinearBlock block2;
  Parameter W_out;  // classes x hidden_width
};

/// Attention pooling plus the two-block head, sized for one LM state width.
struct AttentionClassifier {
  HeadConfig config;
  std::size_t state_dim = 0;
  AttentionParams attention;
  ClassifierHead head;

  static AttentionClassifier init(const HeadConfig& config, std::size_t state_dim, Rng& rng);

  std::size_t alignment_dim() const { return config.attention_dim ? config.attention_dim : state_dim; }
  std::size_t context_dim() const { return config.pool_hidden ? state_dim : alignment_dim(); }

  ParameterList parameters();
  /// Running statistics, which are persisted but not trained.
  std::vector<std::pair<std::string, Tensor*>> buffers();
};

struct PoolResult {
  Var context;  // rows x context width
  Var alpha;    // rows x T
};

/// u_t = tanh(W_u h_t + b_u), alpha = softmax_t(W_a u_t), c = sum_t alpha_t u_t
/// for a single sequence given as T x d_h rows.
PoolResult self_attention_pool(Tape& tape, AttentionParams& params, Var states, bool pool_hidden = false);
PoolResult self_attention_pool(Tape& tape, AttentionParams& params, std::span<const Var> states,
                               bool pool_hidden = false);

/// Batched pooling over time-major rows (row t * batch + b). Positions at or
/// beyond lengths[b] get alpha exactly 0.
PoolResult attention_pool_batch(Tape& tape, AttentionParams& params, Var states, std::size_t batch,
                                std::span<const std::size_t> lengths, bool pool_hidden = false);

enum class Mode { Train, Eval };

struct HeadForwardOptions {
  Mode mode = Mode::Eval;
  /// Dropout source in train mode; no dropout when null.
  Rng* dropout_rng = nullptr;
  bool update_running_stats = true;
};

/// Returns unnormalized class scores W s_o for each context row.
Var classifier_forward(Tape& tape, AttentionClassifier& model, Var contexts, const HeadForwardOptions& options);

Var classifier_probabilities(Var logits);

/// Mean NLL of labels under softmax(logits).
Var classification_loss(Var logits, std::span<const std::size_t> labels);

Var multi_task_loss(Var cls_loss, Var lm_loss, double lambda);
double multi_task_loss(double cls_loss, double lm_loss, double lambda);

inline constexpr double kDefaultLambda = 0.1;

}  // namespace lmas
