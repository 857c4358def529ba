#include "lmas/attention.hpp"

#include <cmath>

#include "lmas/error.hpp"

namespace lmas {

void HeadConfig::validate() const {
  if (num_classes < 2) fail(ErrorCategory::Config, "num_classes must be at least 2");
  if (hidden_width == 0) fail(ErrorCategory::Config, "hidden_width must be positive");
  if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) fail(ErrorCategory::Config, "head dropout_keep must lie in (0, 1]");
  if (!(bn_eps > 0.0)) fail(ErrorCategory::Config, "bn_eps must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) fail(ErrorCategory::Config, "bn_momentum must lie in [0, 1]");
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

LinearBlock make_block(const std::string& prefix, std::size_t in, std::size_t out, bool relu, Rng& rng) {
  LinearBlock b;
  b.W = Parameter(prefix + ".W", uniform_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  b.gamma = Parameter(prefix + ".gamma", Tensor({out}, 1.0));
  b.beta = Parameter(prefix + ".beta", Tensor({out}, 0.0));
  b.running_mean = Tensor({out}, 0.0);
  b.running_var = Tensor({out}, 1.0);
  b.relu = relu;
  return b;
}

}  // namespace

AttentionClassifier AttentionClassifier::init(const HeadConfig& config, std::size_t state_dim, Rng& rng) {
  config.validate();
  if (state_dim == 0) fail(ErrorCategory::Config, "attention state width must be positive");
  AttentionClassifier m;
  m.config = config;
  m.state_dim = state_dim;
  const std::size_t du = m.alignment_dim();
  m.attention.W_u = Parameter("cls.attention.W_u",
                              uniform_tensor({du, state_dim}, 1.0 / std::sqrt(static_cast<double>(state_dim)), rng));
  m.attention.b_u = Parameter("cls.attention.b_u", Tensor({du}, 0.0));
  m.attention.W_a = Parameter("cls.attention.W_a", uniform_tensor({1, du}, 1.0 / std::sqrt(static_cast<double>(du)), rng));
  m.head.block1 = make_block("cls.block1", m.context_dim(), config.hidden_width, true, rng);
  m.head.block2 = make_block("cls.block2", config.hidden_width, config.hidden_width, false, rng);
  m.head.W_out = Parameter("cls.W_out", uniform_tensor({config.num_classes, config.hidden_width},
                                                       1.0 / std::sqrt(static_cast<double>(config.hidden_width)), rng));
  return m;
}

ParameterList AttentionClassifier::parameters() {
  return {&attention.W_u, &attention.b_u, &attention.W_a, &head.block1.W, &head.block1.gamma, &head.block1.beta,
          &head.block2.W, &head.block2.gamma, &head.block2.beta, &head.W_out};
}

std::vector<std::pair<std::string, Tensor*>> AttentionClassifier::buffers() {
  return {{"cls.block1.running_mean", &head.block1.running_mean},
          {"cls.block1.running_var", &head.block1.running_var},
          {"cls.block2.running_mean", &head.block2.running_mean},
          {"cls.block2.running_var", &head.block2.running_var}};
}

// ---------------------------------------------------------------------------
// Pooling

PoolResult self_attention_pool(Tape& tape, AttentionParams& params, Var states, bool pool_hidden) {
  Var u = tanh(add_row(matmul_nt(states, tape.parameter(params.W_u)), tape.parameter(params.b_u)));
  Var scores = matmul_nt(u, tape.parameter(params.W_a));  // T x 1
  Var alpha = softmax_rows(transpose(scores));              // 1 x T
  Var context = matmul(alpha, pool_hidden ? states : u);
  return {context, alpha};
}

PoolResult self_attention_pool(Tape& tape, AttentionParams& params, std::span<const Var> states, bool pool_hidden) {
  if (states.empty()) fail(ErrorCategory::Contract, "self_attention_pool: no hidden states to pool");
  return self_attention_pool(tape, params, concat_rows(states), pool_hidden);
}

PoolResult attention_pool_batch(Tape& tape, AttentionParams& params, Var states, std::size_t batch,
                                std::span<const std::size_t> lengths, bool pool_hidden) {
  if (batch == 0 || states.rows() % batch != 0) {
    fail(ErrorCategory::Dimension, "attention_pool_batch: " + std::to_string(states.rows()) +
                                       " rows do not split into batch " + std::to_string(batch));
  }
  if (lengths.size() != batch) {
    fail(ErrorCategory::Contract, "attention_pool_batch: " + std::to_string(lengths.size()) + " lengths for batch " +
                                      std::to_string(batch));
  }
  const std::size_t steps = states.rows() / batch;
  Var u = tanh(add_row(matmul_nt(states, tape.parameter(params.W_u)), tape.parameter(params.b_u)));
  Var scores = matmul_nt(u, tape.parameter(params.W_a));               // (T*B) x 1
  Var by_row = transpose(reshape(scores, {steps, batch}));             // B x T
  Var alpha = masked_softmax_rows(by_row, lengths);
  Var pooled = pool_hidden ? states : u;

  std::vector<Var> contexts;
  std::vector<std::size_t> rows(steps);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t row_b[] = {b};
    for (std::size_t t = 0; t < steps; ++t) rows[t] = t * batch + b;
    contexts.push_back(matmul(gather_rows(alpha, row_b), gather_rows(pooled, rows)));
  }
  return {concat_rows(contexts), alpha};
}

// ---------------------------------------------------------------------------
// Head

namespace {

Var block_forward(Tape& tape, LinearBlock& block, const HeadConfig& cfg, Var x, const HeadForwardOptions& options) {
  Var z = matmul_nt(x, tape.parameter(block.W));
  Var gamma = tape.parameter(block.gamma);
  Var beta = tape.parameter(block.beta);
  Var y;
  if (options.mode == Mode::Train) {
    Tensor mu, var;
    y = batch_norm_train(z, gamma, beta, cfg.bn_eps, &mu, &var);
    if (options.update_running_stats) {
      const double m = cfg.bn_momentum;
      const double n = static_cast<double>(z.rows());
      for (std::size_t j = 0; j < mu.size(); ++j) {
        block.running_mean[j] = (1.0 - m) * block.running_mean[j] + m * mu[j];
        block.running_var[j] = (1.0 - m) * block.running_var[j] + m * var[j] * n / (n - 1.0);
      }
    }
  } else {
    const std::size_t width = block.running_mean.size();
    Tensor shift({1, width}), inv_std({1, width});
    for (std::size_t j = 0; j < width; ++j) {
      shift[j] = -block.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(block.running_var[j] + cfg.bn_eps);
    }
    Var normalized = mul_row(add_row(z, tape.constant(std::move(shift))), tape.constant(std::move(inv_std)));
    y = add_row(mul_row(normalized, gamma), beta);
  }
  if (block.relu) y = relu(y);
  if (options.mode == Mode::Train && options.dropout_rng && cfg.dropout_keep < 1.0) {
    Tensor mask(y.shape());
    for (double& v : mask.values()) v = options.dropout_rng->bernoulli(cfg.dropout_keep) ? 1.0 / cfg.dropout_keep : 0.0;
    y = mul(y, tape.constant(std::move(mask)));
  }
  return y;
}

}  // namespace

Var classifier_forward(Tape& tape, AttentionClassifier& model, Var contexts, const HeadForwardOptions& options) {
  if (contexts.cols() != model.context_dim()) {
    fail(ErrorCategory::Dimension, "classifier_forward: context width " + std::to_string(contexts.cols()) +
                                       ", head expects " + std::to_string(model.context_dim()));
  }
  if (options.mode == Mode::Train && contexts.rows() < 2) {
    fail(ErrorCategory::Contract, "classifier_forward: train mode needs a batch of at least 2 for batch-norm statistics");
  }
  Var s = block_forward(tape, model.head.block1, model.config, contexts, options);
  s = block_forward(tape, model.head.block2, model.config, s, options);
  return matmul_nt(s, tape.parameter(model.head.W_out));
}

Var classifier_probabilities(Var logits) { return softmax_rows(logits); }

Var classification_loss(Var logits, std::span<const std::size_t> labels) { return cross_entropy(logits, labels); }

Var multi_task_loss(Var cls_loss, Var lm_loss, double lambda) {
  if (!(lambda >= 0.0)) fail(ErrorCategory::Config, "multi-task lambda must be non-negative, got " + std::to_string(lambda));
  return add(cls_loss, scale(lm_loss, lambda));
}

double multi_task_loss(double cls_loss, double lm_loss, double lambda) {
  if (!(lambda >= 0.0)) fail(ErrorCategory::Config, "multi-task lambda must be non-negative, got " + std::to_string(lambda));
  return cls_loss + lambda * lm_loss;
}

}  // namespace lmas
