#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmas/autodiff.hpp"
#include "lmas/rng.hpp"
#include "lmas/tokens.hpp"

namespace lmas {

enum class Arch { AwdLstm, Lstmp };

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& text);

struct LMConfig {
  Arch arch = Arch::AwdLstm;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 400;
  std::size_t hidden_dim = 1150;
  std::size_t num_layers = 3;
  std::optional<std::size_t> projection_dim;  // lstmp only
  double dropconnect_keep = 0.5;
  double forget_bias = 1.0;
  // Extra AWD-LSTM dropout sites, all off by default.
  double embedding_keep = 1.0;
  double input_keep = 1.0;
  double output_keep = 1.0;

  static LMConfig awd_lstm(std::size_t vocab_size);
  static LMConfig lstmp(std::size_t vocab_size);

  /// Width of the states exposed by every layer (projection if present).
  std::size_t output_dim() const { return projection_dim.value_or(hidden_dim); }

  /// Throws Config on contradictory settings.
  void validate() const;

  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

/// Gate order used throughout: input, forget, output, candidate.
enum Gate : std::size_t { kInputGate = 0, kForgetGate = 1, kOutputGate = 2, kCandidate = 3 };

struct LSTMLayerParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t output_dim = 0;
  std::array<Parameter, 4> W;  // hidden x input
  std::array<Parameter, 4> U;  // hidden x output
  std::array<Parameter, 4> b;  // hidden
  std::optional<Parameter> projection;  // output x hidden (lstmp)

  void collect(ParameterList& out);
};

struct LMParams {
  LMConfig config;
  Parameter embedding;  // vocab x embed
  std::vector<LSTMLayerParams> layers;
  Parameter output_U;  // vocab x output_dim

  /// Random initialization: embeddings U(-0.1, 0.1), LSTM matrices
  /// U(-1/sqrt(hidden), 1/sqrt(hidden)), zero biases except the forget gate.
  static LMParams init(const LMConfig& config, Rng& rng);
  /// Every tensor zero, forget bias included.
  static LMParams zeros(const LMConfig& config);

  ParameterList parameters();
};

struct LayerState {
  Tensor h;  // batch x output_dim
  Tensor c;  // batch x hidden_dim
};

struct LMState {
  std::vector<LayerState> layers;

  static LMState zeros(const LMConfig& config, std::size_t batch);
};

/// Binary DropConnect masks over the hidden-to-hidden matrices, one set per
/// layer in gate order. A set is sampled once per sequence.
struct DropConnectMasks {
  double keep = 1.0;
  std::vector<std::array<Tensor, 4>> layers;
};

std::vector<Tensor> sample_dropconnect(Rng& rng, std::span<const Shape> shapes, double keep);
DropConnectMasks sample_dropconnect(Rng& rng, const LMParams& params, double keep);

/// Layer weights bound to a tape for one sequence. The U entries already have
/// the DropConnect mask (scaled by 1/keep) applied when masks were given.
struct LayerBinding {
  std::size_t index = 0;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t output_dim = 0;
  std::array<Var, 4> W;
  std::array<Var, 4> U;
  std::array<Var, 4> b;
  std::optional<Var> projection;
};

LayerBinding bind_layer(Tape& tape, LSTMLayerParams& layer, std::size_t index,
                        const std::array<Tensor, 4>* masks = nullptr, double keep = 1.0);

struct CellOutput {
  Var h;
  Var c;
};

CellOutput lstm_cell_step(const LayerBinding& layer, Var x, Var h, Var c);
CellOutput lstm_cell_step(Tape& tape, LSTMLayerParams& layer, std::size_t index,
                          const std::array<Tensor, 4>* masks, double keep, Var x, Var h, Var c);

struct LMForwardOptions {
  const DropConnectMasks* dropconnect = nullptr;
  /// Source for the optional embedding/input/output dropout; none when null.
  Rng* dropout_rng = nullptr;
  /// Called once per (layer, timestep) with the effective recurrent matrices.
  std::function<void(std::size_t layer, std::size_t t, const std::array<Var, 4>& U)> probe;
};

struct LMForward {
  /// states[layer][t] is a batch x output_dim variable.
  std::vector<std::vector<Var>> states;
  LMState final_state;

  const std::vector<Var>& top() const { return states.back(); }
};

/// Runs the stacked LSTM left to right over every column of `tokens`,
/// starting from `initial`.
LMForward run_lm_forward(Tape& tape, LMParams& params, const TokenGrid& tokens, const LMState& initial,
                         const LMForwardOptions& options = {});

/// Mean next-token NLL where states[t] (batch x d) predicts targets(:, t).
Var lm_loss(Tape& tape, LMParams& params, std::span<const Var> states, const TokenGrid& targets);
/// Same loss over an explicit set of state rows.
Var lm_loss_rows(Tape& tape, LMParams& params, Var state_rows, std::span<const std::size_t> targets);

double perplexity(double mean_nll);

}  // namespace lmas
