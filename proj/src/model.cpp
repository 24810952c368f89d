#include "pral/model.hpp"

#include <cmath>

#include "pral/ops.hpp"

namespace pral {

using nlohmann::json;

namespace {

enum InitKind { kNormal = 0, kZeros = 1, kOnes = 2 };

constexpr double kInitStd = 0.02;

}  // namespace

void ModelConfig::validate() const {
  if (n_layers == 0) throw ConfigError("n_layers must be >= 1");
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (d_ff == 0) throw ConfigError("d_ff must be >= 1");
  if (vocab_size == 0) throw ConfigError("vocab_size must be >= 1");
  if (max_positions == 0) throw ConfigError("max_positions must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
}

json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},       {"n_heads", n_heads},
          {"d_model", d_model},         {"d_ff", d_ff},
          {"vocab_size", vocab_size},   {"max_positions", max_positions},
          {"dropout_rate", dropout_rate}, {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "n_layers") c.n_layers = value.get<std::size_t>();
    else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
    else if (key == "d_model") c.d_model = value.get<std::size_t>();
    else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
    else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
    else if (key == "max_positions") c.max_positions = value.get<std::size_t>();
    else if (key == "dropout_rate") c.dropout_rate = value.get<double>();
    else if (key == "init_seed") c.init_seed = value.get<std::uint64_t>();
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 2 * d                 // ln1
                                + 4 * d * d + 4 * d   // q, k, v, o
                                + 2 * d               // ln2
                                + d * c.d_ff + c.d_ff // mlp in
                                + c.d_ff * d + d;     // mlp out
  return c.vocab_size * d + c.max_positions * d + c.n_layers * per_layer + 2 * d;
}

// ---------------------------------------------------------------------------

template <typename T>
TransformerLM<T>::TransformerLM(const ModelConfig& cfg, std::string name_prefix)
    : config_(cfg), prefix_(std::move(name_prefix)) {
  config_.validate();
  Rng rng(config_.init_seed);
  build(&rng);
}

template <typename T>
TransformerLM<T>::TransformerLM(const TransformerLM& other) : config_(other.config_), prefix_(other.prefix_) {
  build(nullptr);
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = other.params_[i]->value;
}

template <typename T>
TransformerLM<T>& TransformerLM<T>::operator=(const TransformerLM& other) {
  if (this != &other) {
    TransformerLM copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
Var<T> TransformerLM<T>::add_param(const std::string& name, Shape shape, Rng* init, int kind) {
  Tensor<T> value(std::move(shape));
  if (init) {
    if (kind == kNormal) {
      for (T& v : value.values()) v = static_cast<T>(kInitStd * standard_normal(*init));
    } else if (kind == kOnes) {
      value.fill(T(1));
    }
  }
  const std::string full = prefix_ + name;
  index_[full] = params_.size();
  params_.push_back(make_parameter(full, std::move(value)));
  return params_.back();
}

template <typename T>
void TransformerLM<T>::build(Rng* init) {
  const std::size_t d = config_.d_model;
  const std::size_t ff = config_.d_ff;
  params_.clear();
  index_.clear();
  blocks_.clear();
  tok_emb_ = add_param("tok_emb", {config_.vocab_size, d}, init, kNormal);
  pos_emb_ = add_param("pos_emb", {config_.max_positions, d}, init, kNormal);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b;
    b.ln1_gain = add_param(p + "ln1.gain", {d}, init, kOnes);
    b.ln1_bias = add_param(p + "ln1.bias", {d}, init, kZeros);
    b.w_q = add_param(p + "attn.w_q", {d, d}, init, kNormal);
    b.b_q = add_param(p + "attn.b_q", {d}, init, kZeros);
    b.w_k = add_param(p + "attn.w_k", {d, d}, init, kNormal);
    b.b_k = add_param(p + "attn.b_k", {d}, init, kZeros);
    b.w_v = add_param(p + "attn.w_v", {d, d}, init, kNormal);
    b.b_v = add_param(p + "attn.b_v", {d}, init, kZeros);
    b.w_o = add_param(p + "attn.w_o", {d, d}, init, kNormal);
    b.b_o = add_param(p + "attn.b_o", {d}, init, kZeros);
    b.ln2_gain = add_param(p + "ln2.gain", {d}, init, kOnes);
    b.ln2_bias = add_param(p + "ln2.bias", {d}, init, kZeros);
    b.w_in = add_param(p + "mlp.w_in", {d, ff}, init, kNormal);
    b.b_in = add_param(p + "mlp.b_in", {ff}, init, kZeros);
    b.w_out = add_param(p + "mlp.w_out", {ff, d}, init, kNormal);
    b.b_out = add_param(p + "mlp.b_out", {d}, init, kZeros);
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = add_param("ln_f.gain", {d}, init, kOnes);
  lnf_bias_ = add_param("ln_f.bias", {d}, init, kZeros);
}

template <typename T>
Var<T> TransformerLM<T>::forward(Tape<T>& tape, std::span<const TokenId> ids, std::size_t position_offset,
                                 const ForwardOptions& opts) const {
  if (ids.empty()) throw DimensionError("forward: empty token sequence");
  if (ids.size() + position_offset > config_.max_positions) {
    throw CapacityError("forward: " + std::to_string(ids.size()) + " tokens at offset " +
                        std::to_string(position_offset) + " exceed " + std::to_string(config_.max_positions) +
                        " positions");
  }
  const double rate = opts.training ? config_.dropout_rate : 0.0;
  if (rate > 0.0 && opts.rng == nullptr) throw ConfigError("forward: training dropout needs an rng");
  auto drop = [&](const Var<T>& x) { return rate > 0.0 ? dropout(tape, x, rate, *opts.rng) : x; };

  std::vector<TokenId> positions(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) positions[t] = static_cast<TokenId>(position_offset + t);

  Var<T> x = add(tape, embedding(tape, tok_emb_, ids), embedding(tape, pos_emb_, std::span<const TokenId>(positions)));
  x = drop(x);
  for (const Block& b : blocks_) {
    Var<T> h = layer_norm(tape, x, b.ln1_gain, b.ln1_bias);
    Var<T> q = add_bias(tape, matmul(tape, h, b.w_q), b.b_q);
    Var<T> k = add_bias(tape, matmul(tape, h, b.w_k), b.b_k);
    Var<T> v = add_bias(tape, matmul(tape, h, b.w_v), b.b_v);
    Var<T> a = causal_self_attention(tape, q, k, v, config_.n_heads);
    Var<T> o = drop(add_bias(tape, matmul(tape, a, b.w_o), b.b_o));
    x = add(tape, x, o);
    Var<T> h2 = layer_norm(tape, x, b.ln2_gain, b.ln2_bias);
    Var<T> f = gelu(tape, add_bias(tape, matmul(tape, h2, b.w_in), b.b_in));
    f = drop(add_bias(tape, matmul(tape, f, b.w_out), b.b_out));
    x = add(tape, x, f);
  }
  x = layer_norm(tape, x, lnf_gain_, lnf_bias_);
  return matmul_transposed(tape, x, tok_emb_);
}

template <typename T>
Tensor<T> TransformerLM<T>::logits(std::span<const TokenId> ids, std::size_t position_offset) const {
  Tape<T> tape(false);
  return forward(tape, ids, position_offset)->value;
}

template <typename T>
const Var<T>& TransformerLM<T>::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("no parameter named " + name);
  return params_[it->second];
}

template <typename T>
void TransformerLM<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
std::vector<NamedTensor> TransformerLM<T>::export_tensors() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({p->name, p->value.template cast<float>()});
  return out;
}

template <typename T>
void TransformerLM<T>::import_tensors(const Checkpoint& ckpt) {
  for (auto& p : params_) {
    const NamedTensor* t = ckpt.find(p->name);
    if (!t) throw FormatError("checkpoint lacks parameter " + p->name);
    if (t->tensor.shape() != p->value.shape()) {
      throw DimensionError("checkpoint parameter " + p->name + " has shape " + shape_string(t->tensor.shape()) +
                           ", model expects " + shape_string(p->value.shape()));
    }
    p->value = t->tensor.template cast<T>();
  }
}

// ---------------------------------------------------------------------------

namespace {

ModelConfig with_seed(ModelConfig cfg, std::string_view label) {
  cfg.init_seed = derive_seed(cfg.init_seed, label);
  return cfg;
}

}  // namespace

template <typename T>
RoleAlternatingModel<T>::RoleAlternatingModel(const ModelConfig& cfg)
    : shared_config(cfg),
      user_lm(with_seed(cfg, "user_lm"), "user_lm."),
      system_lm(with_seed(cfg, "system_lm"), "system_lm.") {}

template <typename T>
void RoleAlternatingModel<T>::zero_grad() {
  user_lm.zero_grad();
  system_lm.zero_grad();
}

json model_metadata(const ModelConfig& cfg, std::string_view kind) {
  return {{"format", "pral-model"}, {"version", 1}, {"kind", kind}, {"model_config", cfg.to_json()}};
}

ModelConfig config_from_metadata(const Checkpoint& ckpt, std::string_view expected_kind) {
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::parse_error&) {
    throw FormatError("checkpoint metadata is not JSON");
  }
  if (meta.value("format", "") != "pral-model") throw FormatError("checkpoint is not a pral model");
  if (meta.value("kind", "") != expected_kind) {
    throw FormatError("checkpoint holds a '" + meta.value("kind", "") + "' model, expected '" +
                      std::string(expected_kind) + "'");
  }
  return ModelConfig::from_json(meta.at("model_config"));
}

template <typename T>
Checkpoint RoleAlternatingModel<T>::to_checkpoint(const json& extra_metadata) const {
  json meta = model_metadata(shared_config, "role_alternating");
  if (extra_metadata.is_object()) {
    for (const auto& [k, v] : extra_metadata.items()) meta[k] = v;
  }
  Checkpoint ckpt{meta.dump(), user_lm.export_tensors()};
  for (auto& t : system_lm.export_tensors()) ckpt.tensors.push_back(std::move(t));
  return ckpt;
}

template <typename T>
RoleAlternatingModel<T> RoleAlternatingModel<T>::from_checkpoint(const Checkpoint& ckpt) {
  RoleAlternatingModel m(config_from_metadata(ckpt, "role_alternating"));
  m.user_lm.import_tensors(ckpt);
  m.system_lm.import_tensors(ckpt);
  return m;
}

template <typename T>
Checkpoint lm_checkpoint(const TransformerLM<T>& lm, std::string_view kind) {
  return Checkpoint{model_metadata(lm.config(), kind).dump(), lm.export_tensors()};
}

template <typename T>
TransformerLM<T> lm_from_checkpoint(const Checkpoint& ckpt, std::string_view kind) {
  const ModelConfig cfg = config_from_metadata(ckpt, kind);
  // All parameters share one prefix; recover it from the first tensor name.
  std::string prefix;
  if (!ckpt.tensors.empty()) {
    const std::string& first = ckpt.tensors.front().name;
    prefix = first.substr(0, first.size() - std::string("tok_emb").size());
  }
  TransformerLM<T> lm(cfg, prefix);
  lm.import_tensors(ckpt);
  return lm;
}

// ---------------------------------------------------------------------------

PredictionLayout PredictionLayout::of(const TokenizedDialog& td) {
  PredictionLayout layout;
  if (td.ids.size() < 2) return layout;
  const std::size_t rows = td.ids.size() - 1;
  layout.targets.reserve(rows);
  layout.utterance.reserve(rows);
  layout.role.reserve(rows);
  std::size_t span = 0;
  for (std::size_t t = 1; t < td.ids.size(); ++t) {
    while (span < td.spans.size() && t >= td.spans[span].end) ++span;
    if (span == td.spans.size()) throw IndexError("token " + std::to_string(t) + " lies outside every span");
    layout.targets.push_back(td.ids[t]);
    layout.utterance.push_back(td.spans[span].index);
    layout.role.push_back(td.spans[span].role);
  }
  return layout;
}

template <typename T>
std::vector<T> PredictionLayout::mask(Role r) const {
  std::vector<T> m(rows());
  for (std::size_t i = 0; i < rows(); ++i) m[i] = role[i] == r ? T(1) : T(0);
  return m;
}

std::vector<std::size_t> PredictionLayout::counts_per_utterance(std::size_t utterance_count) const {
  std::vector<std::size_t> counts(utterance_count + 1, 0);
  for (std::size_t u : utterance) ++counts.at(u);
  return counts;
}

template <typename T>
DialogLogits<T> dialog_logits(Tape<T>& tape, const RoleAlternatingModel<T>& m, const TokenizedDialog& td,
                              std::size_t offset_user, std::size_t offset_system, const ForwardOptions& opts) {
  return {m.user_lm.forward(tape, td.ids, offset_user, opts), m.system_lm.forward(tape, td.ids, offset_system, opts)};
}

// ---------------------------------------------------------------------------

PositionSampler::PositionSampler(std::size_t max_positions, std::uint64_t seed)
    : max_positions_(max_positions), rng_(seed) {}

std::size_t PositionSampler::sample(std::size_t length) {
  if (length > max_positions_) {
    throw CapacityError("sequence of " + std::to_string(length) + " tokens exceeds " +
                        std::to_string(max_positions_) + " positions");
  }
  return static_cast<std::size_t>(uniform_index(rng_, max_positions_ - length + 1));
}

template class TransformerLM<float>;
template class TransformerLM<double>;
template struct RoleAlternatingModel<float>;
template struct RoleAlternatingModel<double>;
template std::vector<float> PredictionLayout::mask<float>(Role) const;
template std::vector<double> PredictionLayout::mask<double>(Role) const;
template DialogLogits<float> dialog_logits(Tape<float>&, const RoleAlternatingModel<float>&, const TokenizedDialog&,
                                           std::size_t, std::size_t, const ForwardOptions&);
template DialogLogits<double> dialog_logits(Tape<double>&, const RoleAlternatingModel<double>&, const TokenizedDialog&,
                                            std::size_t, std::size_t, const ForwardOptions&);
template Checkpoint lm_checkpoint(const TransformerLM<float>&, std::string_view);
template Checkpoint lm_checkpoint(const TransformerLM<double>&, std::string_view);
template TransformerLM<float> lm_from_checkpoint(const Checkpoint&, std::string_view);
template TransformerLM<double> lm_from_checkpoint(const Checkpoint&, std::string_view);

}  // namespace pral
