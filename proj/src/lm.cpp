#include "lmas/lm.hpp"

#include <cmath>

#include "lmas/error.hpp"

namespace lmas {

namespace {

const char* const kGateNames[4] = {"i", "f", "o", "c"};

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

std::string layer_prefix(std::size_t index) { return "lm.layer" + std::to_string(index) + "."; }

}  // namespace

std::string arch_name(Arch arch) { return arch == Arch::AwdLstm ? "awd-lstm" : "lstmp"; }

Arch parse_arch(const std::string& text) {
  if (text == "awd-lstm") return Arch::AwdLstm;
  if (text == "lstmp") return Arch::Lstmp;
  fail(ErrorCategory::Config, "unknown architecture '" + text + "' (expected awd-lstm or lstmp)");
}

LMConfig LMConfig::awd_lstm(std::size_t vocab_size) {
  LMConfig c;
  c.vocab_size = vocab_size;
  return c;
}

LMConfig LMConfig::lstmp(std::size_t vocab_size) {
  LMConfig c;
  c.arch = Arch::Lstmp;
  c.vocab_size = vocab_size;
  c.embed_dim = 512;
  c.hidden_dim = 2048;
  c.projection_dim = 512;
  c.num_layers = 1;
  return c;
}

void LMConfig::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorCategory::Config, msg); };
  if (vocab_size == 0) bad("vocab_size must be positive");
  if (embed_dim == 0 || hidden_dim == 0 || num_layers == 0) bad("embed_dim, hidden_dim and num_layers must be positive");
  if (arch == Arch::AwdLstm && projection_dim) bad("projection_dim is only valid for the lstmp architecture");
  if (arch == Arch::Lstmp && (!projection_dim || *projection_dim == 0)) bad("lstmp requires a positive projection_dim");
  for (double keep : {dropconnect_keep, embedding_keep, input_keep, output_keep}) {
    if (!(keep >= 0.0 && keep <= 1.0)) bad("keep probabilities must lie in [0, 1]");
  }
}

void LSTMLayerParams::collect(ParameterList& out) {
  for (auto& p : W) out.push_back(&p);
  for (auto& p : U) out.push_back(&p);
  for (auto& p : b) out.push_back(&p);
  if (projection) out.push_back(&*projection);
}

LMParams LMParams::init(const LMConfig& config, Rng& rng) {
  config.validate();
  LMParams p;
  p.config = config;
  p.embedding = Parameter("lm.embedding", uniform_tensor({config.vocab_size, config.embed_dim}, 0.1, rng));
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
  std::size_t input_dim = config.embed_dim;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LSTMLayerParams layer;
    layer.input_dim = input_dim;
    layer.hidden_dim = config.hidden_dim;
    layer.output_dim = config.output_dim();
    const std::string prefix = layer_prefix(l);
    for (std::size_t g = 0; g < 4; ++g) {
      layer.W[g] = Parameter(prefix + "W_" + kGateNames[g], uniform_tensor({config.hidden_dim, input_dim}, bound, rng));
    }
    for (std::size_t g = 0; g < 4; ++g) {
      layer.U[g] =
          Parameter(prefix + "U_" + kGateNames[g], uniform_tensor({config.hidden_dim, layer.output_dim}, bound, rng));
    }
    for (std::size_t g = 0; g < 4; ++g) {
      layer.b[g] = Parameter(prefix + "b_" + kGateNames[g],
                             Tensor({config.hidden_dim}, g == kForgetGate ? config.forget_bias : 0.0));
    }
    if (config.projection_dim) {
      layer.projection = Parameter(prefix + "P", uniform_tensor({layer.output_dim, config.hidden_dim}, bound, rng));
    }
    input_dim = layer.output_dim;
    p.layers.push_back(std::move(layer));
  }
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(config.output_dim()));
  p.output_U = Parameter("lm.output_U", uniform_tensor({config.vocab_size, config.output_dim()}, out_bound, rng));
  return p;
}

LMParams LMParams::zeros(const LMConfig& config) {
  Rng unused(0);
  LMParams p = init(config, unused);
  for (Parameter* param : p.parameters()) {
    param->value.fill(0.0);
    param->zero_grad();
  }
  return p;
}

ParameterList LMParams::parameters() {
  ParameterList out{&embedding};
  for (auto& layer : layers) layer.collect(out);
  out.push_back(&output_U);
  return out;
}

LMState LMState::zeros(const LMConfig& config, std::size_t batch) {
  LMState s;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    s.layers.push_back({Tensor({batch, config.output_dim()}, 0.0), Tensor({batch, config.hidden_dim}, 0.0)});
  }
  return s;
}

// ---------------------------------------------------------------------------
// DropConnect

std::vector<Tensor> sample_dropconnect(Rng& rng, std::span<const Shape> shapes, double keep) {
  if (!(keep >= 0.0 && keep <= 1.0)) {
    fail(ErrorCategory::Config, "DropConnect keep probability " + std::to_string(keep) + " outside [0, 1]");
  }
  std::vector<Tensor> masks;
  masks.reserve(shapes.size());
  for (const Shape& shape : shapes) {
    Tensor mask(shape, 1.0);
    if (keep < 1.0) {
      for (double& v : mask.values()) v = rng.bernoulli(keep) ? 1.0 : 0.0;
    }
    masks.push_back(std::move(mask));
  }
  return masks;
}

DropConnectMasks sample_dropconnect(Rng& rng, const LMParams& params, double keep) {
  DropConnectMasks out;
  out.keep = keep;
  for (const auto& layer : params.layers) {
    const Shape shapes[4] = {layer.U[0].value.shape(), layer.U[1].value.shape(), layer.U[2].value.shape(),
                             layer.U[3].value.shape()};
    auto masks = sample_dropconnect(rng, shapes, keep);
    out.layers.push_back({std::move(masks[0]), std::move(masks[1]), std::move(masks[2]), std::move(masks[3])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cell

LayerBinding bind_layer(Tape& tape, LSTMLayerParams& layer, std::size_t index, const std::array<Tensor, 4>* masks,
                        double keep) {
  LayerBinding b;
  b.index = index;
  b.input_dim = layer.input_dim;
  b.hidden_dim = layer.hidden_dim;
  b.output_dim = layer.output_dim;
  for (std::size_t g = 0; g < 4; ++g) {
    b.W[g] = tape.parameter(layer.W[g]);
    b.b[g] = tape.parameter(layer.b[g]);
    Var u = tape.parameter(layer.U[g]);
    if (masks) {
      const Tensor& mask = (*masks)[g];
      if (!mask.same_shape(layer.U[g].value)) {
        fail(ErrorCategory::Dimension, "layer " + std::to_string(index) + ": DropConnect mask " +
                                           shape_string(mask.shape()) + " does not match " + layer.U[g].name + " " +
                                           shape_string(layer.U[g].value.shape()));
      }
      Tensor scaled = mask;
      const double factor = keep > 0.0 ? 1.0 / keep : 0.0;
      for (double& v : scaled.values()) v *= factor;
      u = mul(u, tape.constant(std::move(scaled)));
    }
    b.U[g] = u;
  }
  if (layer.projection) b.projection = tape.parameter(*layer.projection);
  return b;
}

CellOutput lstm_cell_step(const LayerBinding& layer, Var x, Var h, Var c) {
  const std::size_t batch = x.rows();
  auto mismatch = [&](const std::string& what, const Shape& got, std::size_t want_cols) {
    fail(ErrorCategory::Dimension, "layer " + std::to_string(layer.index) + ": " + what + " has shape " +
                                       shape_string(got) + ", expected " + std::to_string(want_cols) + " columns");
  };
  if (x.cols() != layer.input_dim) mismatch("input", x.shape(), layer.input_dim);
  if (h.cols() != layer.output_dim || h.rows() != batch) mismatch("hidden state", h.shape(), layer.output_dim);
  if (c.cols() != layer.hidden_dim || c.rows() != batch) mismatch("cell state", c.shape(), layer.hidden_dim);

  std::array<Var, 4> pre;
  for (std::size_t g = 0; g < 4; ++g) {
    pre[g] = add_row(add(matmul_nt(x, layer.W[g]), matmul_nt(h, layer.U[g])), layer.b[g]);
  }
  Var i = sigmoid(pre[kInputGate]);
  Var f = sigmoid(pre[kForgetGate]);
  Var o = sigmoid(pre[kOutputGate]);
  Var candidate = tanh(pre[kCandidate]);
  Var c_next = add(mul(i, candidate), mul(f, c));
  Var h_next = mul(o, tanh(c_next));
  if (layer.projection) h_next = matmul_nt(h_next, *layer.projection);
  return {h_next, c_next};
}

CellOutput lstm_cell_step(Tape& tape, LSTMLayerParams& layer, std::size_t index, const std::array<Tensor, 4>* masks,
                          double keep, Var x, Var h, Var c) {
  return lstm_cell_step(bind_layer(tape, layer, index, masks, keep), x, h, c);
}

// ---------------------------------------------------------------------------
// Stack

namespace {

Tensor variational_mask(Rng& rng, std::size_t rows, std::size_t cols, double keep) {
  Tensor mask({rows, cols});
  for (double& v : mask.values()) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return mask;
}

}  // namespace

LMForward run_lm_forward(Tape& tape, LMParams& params, const TokenGrid& tokens, const LMState& initial,
                         const LMForwardOptions& options) {
  const LMConfig& cfg = params.config;
  const std::size_t batch = tokens.rows, steps = tokens.cols;
  if (batch == 0 || steps == 0) fail(ErrorCategory::Contract, "run_lm_forward: empty token grid");
  for (std::size_t k = 0; k < tokens.ids.size(); ++k) {
    if (tokens.ids[k] >= cfg.vocab_size) {
      fail(ErrorCategory::Vocabulary, "token id " + std::to_string(tokens.ids[k]) + " at position " +
                                          std::to_string(k) + " outside vocabulary of size " +
                                          std::to_string(cfg.vocab_size));
    }
  }
  if (initial.layers.size() != params.layers.size()) {
    fail(ErrorCategory::Dimension, "run_lm_forward: state has " + std::to_string(initial.layers.size()) +
                                       " layers, model has " + std::to_string(params.layers.size()));
  }
  const DropConnectMasks* dc = options.dropconnect;
  if (dc && dc->layers.size() != params.layers.size()) {
    fail(ErrorCategory::Dimension, "run_lm_forward: DropConnect masks cover " + std::to_string(dc->layers.size()) +
                                       " layers, model has " + std::to_string(params.layers.size()));
  }

  std::vector<LayerBinding> bindings;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    bindings.push_back(bind_layer(tape, params.layers[l], l, dc ? &dc->layers[l] : nullptr, dc ? dc->keep : 1.0));
  }
  Var embedding = tape.parameter(params.embedding);

  // Optional dropout sites, sampled once per sequence.
  std::optional<Tensor> word_keep, input_mask, output_mask;
  if (Rng* rng = options.dropout_rng) {
    if (cfg.embedding_keep < 1.0) {
      Tensor mask({cfg.vocab_size});
      for (double& v : mask.values()) v = rng->bernoulli(cfg.embedding_keep) ? 1.0 / cfg.embedding_keep : 0.0;
      word_keep = std::move(mask);
    }
    if (cfg.input_keep < 1.0) input_mask = variational_mask(*rng, batch, cfg.embed_dim, cfg.input_keep);
    if (cfg.output_keep < 1.0) output_mask = variational_mask(*rng, batch, cfg.output_dim(), cfg.output_keep);
  }

  std::vector<Var> h, c;
  for (const auto& s : initial.layers) {
    h.push_back(tape.constant(s.h));
    c.push_back(tape.constant(s.c));
  }

  LMForward out;
  out.states.assign(params.layers.size(), {});
  std::vector<std::size_t> column(batch);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t r = 0; r < batch; ++r) column[r] = tokens(r, t);
    Var x = gather_rows(embedding, column);
    if (word_keep) {
      Tensor scale_rows({batch, cfg.embed_dim});
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) scale_rows(r, j) = (*word_keep)[column[r]];
      x = mul(x, tape.constant(std::move(scale_rows)));
    }
    if (input_mask) x = mul(x, tape.constant(*input_mask));
    for (std::size_t l = 0; l < bindings.size(); ++l) {
      if (options.probe) options.probe(l, t, bindings[l].U);
      CellOutput next = lstm_cell_step(bindings[l], x, h[l], c[l]);
      h[l] = next.h;
      c[l] = next.c;
      Var exposed = next.h;
      if (output_mask && l + 1 == bindings.size()) exposed = mul(exposed, tape.constant(*output_mask));
      out.states[l].push_back(exposed);
      x = next.h;
    }
  }
  for (std::size_t l = 0; l < h.size(); ++l) out.final_state.layers.push_back({h[l].value(), c[l].value()});
  return out;
}

Var lm_loss_rows(Tape& tape, LMParams& params, Var state_rows, std::span<const std::size_t> targets) {
  if (state_rows.rows() != targets.size()) {
    fail(ErrorCategory::Contract, "lm_loss: " + std::to_string(state_rows.rows()) + " states for " +
                                      std::to_string(targets.size()) + " targets");
  }
  Var logits = matmul_nt(state_rows, tape.parameter(params.output_U));
  return cross_entropy(logits, targets);
}

Var lm_loss(Tape& tape, LMParams& params, std::span<const Var> states, const TokenGrid& targets) {
  if (states.size() != targets.cols) {
    fail(ErrorCategory::Contract, "lm_loss: " + std::to_string(states.size()) + " time steps of states for " +
                                      std::to_string(targets.cols) + " target columns");
  }
  if (states.empty()) fail(ErrorCategory::Contract, "lm_loss: no states");
  // Row t * batch + r holds lane r at step t.
  std::vector<std::size_t> flat;
  flat.reserve(targets.ids.size());
  for (std::size_t t = 0; t < targets.cols; ++t) {
    if (states[t].rows() != targets.rows) {
      fail(ErrorCategory::Contract, "lm_loss: state batch " + std::to_string(states[t].rows()) +
                                        " differs from target rows " + std::to_string(targets.rows));
    }
    for (std::size_t r = 0; r < targets.rows; ++r) flat.push_back(targets(r, t));
  }
  return lm_loss_rows(tape, params, concat_rows(states), flat);
}

double perplexity(double mean_nll) { return std::exp(mean_nll); }

}  // namespace lmas
