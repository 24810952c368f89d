#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pral/autograd.hpp"
#include "pral/checkpoint.hpp"
#include "pral/corpus.hpp"
#include "pral/rng.hpp"
#include "pral/tokenizer.hpp"

namespace pral {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 2000;
  std::size_t max_positions = 256;
  double dropout_rate = 0.1;
  std::uint64_t init_seed = 0;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Closed-form trainable parameter count of one TransformerLM.
std::size_t parameter_count(const ModelConfig& cfg);

struct ForwardOptions {
  bool training = false;  // enables dropout
  Rng* rng = nullptr;     // dropout source, required when training with dropout
};

// Pre-layer-norm decoder-only transformer with learned positions and an
// output projection tied to the token embedding. Copies are deep.
template <typename T>
class TransformerLM {
 public:
  // `name_prefix` is prepended to every parameter path (e.g. "user_lm.").
  explicit TransformerLM(const ModelConfig& cfg, std::string name_prefix = "");
  TransformerLM(const TransformerLM& other);
  TransformerLM& operator=(const TransformerLM& other);
  TransformerLM(TransformerLM&&) noexcept = default;
  TransformerLM& operator=(TransformerLM&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const std::string& name_prefix() const { return prefix_; }

  // Logits [|ids| x vocab]. Row t uses position row position_offset + t.
  // Throws CapacityError if |ids| + position_offset > max_positions.
  Var<T> forward(Tape<T>& tape, std::span<const TokenId> ids, std::size_t position_offset,
                 const ForwardOptions& opts = {}) const;
  // Evaluation-mode forward without recording.
  Tensor<T> logits(std::span<const TokenId> ids, std::size_t position_offset) const;

  const std::vector<Var<T>>& parameters() const { return params_; }
  // Lookup by full path; throws IndexError if absent.
  const Var<T>& parameter(const std::string& name) const;
  void zero_grad();

  // Float32 export/import keyed by full parameter path.
  std::vector<NamedTensor> export_tensors() const;
  void import_tensors(const Checkpoint& ckpt);

 private:
  struct Block {
    Var<T> ln1_gain, ln1_bias;
    Var<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Var<T> ln2_gain, ln2_bias;
    Var<T> w_in, b_in, w_out, b_out;
  };

  void build(Rng* init);
  Var<T> add_param(const std::string& name, Shape shape, Rng* init, int kind);

  ModelConfig config_;
  std::string prefix_;
  std::vector<Var<T>> params_;
  std::map<std::string, std::size_t> index_;
  Var<T> tok_emb_, pos_emb_, lnf_gain_, lnf_bias_;
  std::vector<Block> blocks_;
};

// The user and system language models: p(d) = prod_t p_u(u_t | ...) p_s(s_t | ...).
template <typename T>
struct RoleAlternatingModel {
  ModelConfig shared_config;
  TransformerLM<T> user_lm;
  TransformerLM<T> system_lm;

  // Both models share `cfg`; their init seeds derive from cfg.init_seed.
  explicit RoleAlternatingModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return shared_config; }
  const TransformerLM<T>& lm(Role r) const { return r == Role::User ? user_lm : system_lm; }
  TransformerLM<T>& lm(Role r) { return r == Role::User ? user_lm : system_lm; }
  void zero_grad();

  Checkpoint to_checkpoint(const nlohmann::json& extra_metadata = {}) const;
  static RoleAlternatingModel from_checkpoint(const Checkpoint& ckpt);
};

// Manifest metadata stored in model checkpoints.
nlohmann::json model_metadata(const ModelConfig& cfg, std::string_view kind);
ModelConfig config_from_metadata(const Checkpoint& ckpt, std::string_view expected_kind);

template <typename T>
Checkpoint lm_checkpoint(const TransformerLM<T>& lm, std::string_view kind);
template <typename T>
TransformerLM<T> lm_from_checkpoint(const Checkpoint& ckpt, std::string_view kind);

// Next-token layout of a dialog: logits row r predicts ids[r + 1]. Every
// token after the first is a target, owned by the role of its span.
struct PredictionLayout {
  std::vector<TokenId> targets;       // size |ids| - 1
  std::vector<std::size_t> utterance; // 1-based span index of each target
  std::vector<Role> role;

  static PredictionLayout of(const TokenizedDialog& td);
  std::size_t rows() const { return targets.size(); }
  // 0/1 mask over rows for targets owned by `r`.
  template <typename T>
  std::vector<T> mask(Role r) const;
  // Predicted-token count L'_u per utterance (index 0 unused).
  std::vector<std::size_t> counts_per_utterance(std::size_t utterance_count) const;
};

template <typename T>
struct DialogLogits {
  Var<T> user;
  Var<T> system;
};

// Each model reads the whole dialog; losses then mask user logits to User
// targets and system logits to System targets.
template <typename T>
DialogLogits<T> dialog_logits(Tape<T>& tape, const RoleAlternatingModel<T>& m, const TokenizedDialog& td,
                              std::size_t offset_user, std::size_t offset_system, const ForwardOptions& opts = {});

// Draws start offsets uniformly from {0, ..., max_positions - L}.
class PositionSampler {
 public:
  PositionSampler(std::size_t max_positions, std::uint64_t seed);
  // Throws CapacityError if length > max_positions.
  std::size_t sample(std::size_t length);
  std::size_t max_positions() const { return max_positions_; }

 private:
  std::size_t max_positions_;
  Rng rng_;
};

}  // namespace pral
