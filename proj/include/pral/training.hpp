#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pral/model.hpp"
#include "pral/optim.hpp"

namespace pral {

enum class KlDirection {
  StudentTeacher,  // KL(p || p_teacher), the default
  TeacherStudent,  // KL(p_teacher || p)
};

struct TrainConfig {
  double gamma = 0.95;
  double alpha0 = 0.1;
  double lambda = 0.9999;
  double learning_rate = 1e-4;
  double warmup_fraction = 0.10;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool spr_enabled = true;
  bool teacher_enabled = true;
  bool discount_enabled = true;

  bool lm_enabled = true;  // false leaves only the distillation term
  KlDirection kl_direction = KlDirection::StudentTeacher;
  double weight_decay = 0.01;
  std::size_t grad_accum_steps = 1;
  std::size_t checkpoint_interval = 0;  // 0 disables periodic checkpoints
  LrSchedule lr_schedule = LrSchedule::Constant;

  void validate() const;
  double effective_gamma() const { return discount_enabled ? gamma : 1.0; }
  std::size_t warmup_steps() const;
  AdamWConfig optimizer_config() const;

  // Flat object whose keys are the field names above.
  nlohmann::json to_json() const;
  // Applies the keys present in `j` on top of `base`. String values are
  // parsed, so environment text can be passed straight through. Unknown keys
  // throw ConfigError.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j);
  // Overrides from environment variables PRAL_<UPPERCASE_KEY>.
  static TrainConfig from_environment(TrainConfig base);
};

// w[u - 1] = gamma^(U - u) for u = 1..U.
std::vector<double> discount_weights(std::size_t utterance_count, double gamma);

// alpha0 * lambda^iter.
double alpha_at(std::size_t iter, double alpha0, double lambda);

inline constexpr std::string_view kTeacherKind = "teacher";

// The desk-scale teacher shape: one more layer and twice the width of the
// student, same vocabulary and capacity, no dropout.
ModelConfig teacher_config(const ModelConfig& student);

// Frozen logits provider standing in for the large pretrained teacher.
template <typename T>
class TeacherHandle {
 public:
  explicit TeacherHandle(TransformerLM<T> lm) : lm_(std::move(lm)) {}

  // Evaluation-mode logits; the offset is clamped to the teacher capacity.
  Tensor<T> logits(std::span<const TokenId> ids, std::size_t position_offset) const;
  std::size_t clamp_offset(std::size_t offset, std::size_t length) const;
  std::size_t vocab_size() const { return lm_.config().vocab_size; }
  const TransformerLM<T>& model() const { return lm_; }

 private:
  TransformerLM<T> lm_;
};

struct Offsets {
  std::size_t user = 0;
  std::size_t system = 0;
  std::size_t of(Role r) const { return r == Role::User ? user : system; }
};

struct UtteranceLoss {
  std::size_t u = 0;
  double weight = 0;
  double summed_ce = 0;
  std::size_t token_count = 0;
};

struct LossBreakdown {
  double lm_loss = 0;      // discounted CE over the weighted predicted-token count
  double lm_loss_raw = 0;  // unnormalized discounted sum
  double weight_total = 0; // sum_u gamma^(U-u) L'_u
  std::optional<double> kl_loss;
  double alpha = 0;
  double total = 0;
  std::vector<UtteranceLoss> per_utterance;
};

// Discounted LM loss; each target is scored by the model of its span's role.
template <typename T>
LossBreakdown lm_loss(const RoleAlternatingModel<T>& m, const TokenizedDialog& td, Offsets offsets, double gamma);

// Mean-per-row KL between student and teacher over the rows where mask is
// nonzero. `student_logits` has one row per token in `ids`. Throws
// ConfigError if the vocabularies differ.
template <typename T>
double distill_loss(const Tensor<T>& student_logits, const TeacherHandle<T>& teacher, std::span<const TokenId> ids,
                    std::size_t offset, std::span<const T> mask, KlDirection direction = KlDirection::StudentTeacher);

// total = lm + alpha * kl, or exactly lm when kl is absent.
LossBreakdown total_loss(LossBreakdown lm_part, std::optional<double> kl, double alpha);

// How one dialog contributes to a batch objective.
struct ObjectiveSpec {
  double gamma = 1.0;
  bool lm_enabled = true;
  double lm_scale = 1.0;   // multiplies sum_u w_u * sum CE
  double kl_scale = 0.0;   // multiplies sum of per-row KL; 0 with no teacher
  KlDirection kl_direction = KlDirection::StudentTeacher;
};

template <typename T>
struct DialogObjective {
  Var<T> value;             // taped scalar
  double weighted_ce = 0;   // sum_u w_u sum CE (both roles)
  double weight_total = 0;  // sum_u w_u L'_u
  double kl_sum = 0;        // sum over own-role rows of KL
  std::size_t kl_rows = 0;
  std::vector<UtteranceLoss> per_utterance;
};

// Builds lm_scale * LM + kl_scale * KL on the tape. The KL term is only
// built when `teacher` is non-null.
template <typename T>
DialogObjective<T> dialog_objective(Tape<T>& tape, const RoleAlternatingModel<T>& m, const TokenizedDialog& td,
                                    Offsets offsets, const TeacherHandle<T>* teacher, const ObjectiveSpec& spec,
                                    const ForwardOptions& fwd = {});

// Deterministic epoch-wise batches of dialogs with similar token length.
class BatchSchedule {
 public:
  BatchSchedule(std::vector<std::size_t> lengths, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void refill();

  std::vector<std::size_t> lengths_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> pending_;
};

struct StepRecord {
  std::size_t step = 0;
  double lm = 0;
  double lm_raw = 0;
  std::optional<double> kl;
  double alpha = 0;
  double total = 0;
  double lr = 0;

  // {step, lm, lm_raw, [kl, alpha,] total, lr}
  nlohmann::json to_json() const;
};

template <typename T>
struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_step;
  // Called every checkpoint_interval steps and after the final step.
  std::function<void(std::size_t step, const RoleAlternatingModel<T>&)> on_checkpoint;
};

// Trains both role models. Throws ConfigError when teacher_enabled lacks a
// teacher, CapacityError for dialogs longer than max_positions, and
// NonFiniteError on a non-finite loss or gradient (the model keeps the last
// finite parameters).
template <typename T>
std::vector<StepRecord> train(std::span<const TokenizedDialog> corpus, RoleAlternatingModel<T>& m,
                              const TeacherHandle<T>* teacher, const TrainConfig& cfg,
                              const TrainCallbacks<T>& callbacks = {});

// Plain next-token training of one LM over every role, used to build the
// teacher. Honors learning_rate, warmup, steps, batch size, seed, SPR.
template <typename T>
std::vector<StepRecord> train_language_model(std::span<const TokenizedDialog> corpus, TransformerLM<T>& lm,
                                             const TrainConfig& cfg,
                                             const std::function<void(const StepRecord&)>& on_step = {});

// Stand-in teacher construction: a teacher_config LM trained on a broad
// synthetic corpus encoded with the student's vocabulary. Dialogs longer than
// the capacity are dropped.
struct TeacherRecipe {
  std::uint64_t corpus_seed = 10;
  std::size_t dialogs = 4000;
  TrainConfig train;  // learning_rate 1e-3 and 2000 steps unless overridden

  TeacherRecipe();
  nlohmann::json to_json() const;
};

template <typename T>
TransformerLM<T> make_teacher(const ModelConfig& student, const Vocab& v, const TeacherRecipe& recipe,
                              const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace pral
