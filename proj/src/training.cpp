#include "pral/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "pral/ops.hpp"
#include "pral/synthetic.hpp"

namespace pral {

using nlohmann::json;

namespace {

const char* kl_direction_name(KlDirection d) {
  return d == KlDirection::StudentTeacher ? "student_teacher" : "teacher_student";
}

const char* schedule_name(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "linear_decay"; }

double as_real(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (!s.empty() && end == s.c_str() + s.size()) return d;
  }
  throw ConfigError("config key '" + key + "' expects a number, got " + v.dump());
}

std::uint64_t as_count(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    char* end = nullptr;
    const unsigned long long n = std::strtoull(s.c_str(), &end, 10);
    if (!s.empty() && s[0] != '-' && end == s.c_str() + s.size()) return n;
  }
  throw ConfigError("config key '" + key + "' expects a non-negative integer, got " + v.dump());
}

bool as_flag(const json& v, const std::string& key) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
  }
  throw ConfigError("config key '" + key + "' expects true or false, got " + v.dump());
}

std::string as_text(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  throw ConfigError("config key '" + key + "' expects a string, got " + v.dump());
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "gamma",         "alpha0",          "lambda",           "learning_rate", "warmup_fraction",
      "total_steps",   "batch_size",      "seed",             "spr_enabled",   "teacher_enabled",
      "discount_enabled", "lm_enabled",   "kl_direction",     "weight_decay",  "grad_accum_steps",
      "checkpoint_interval", "lr_schedule"};
  return keys;
}

template <typename T>
bool grads_finite(const std::vector<Var<T>>& params) {
  for (const auto& p : params) {
    if (p->has_grad() && !p->grad.all_finite()) return false;
  }
  return true;
}

template <typename T>
std::string first_nonfinite(const std::vector<Var<T>>& params) {
  for (const auto& p : params) {
    if (p->has_grad() && !p->grad.all_finite()) return p->name;
  }
  return "gradient";
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1], got " + std::to_string(gamma));
  if (!(alpha0 >= 0.0) || !std::isfinite(alpha0)) throw ConfigError("alpha0 must be >= 0");
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in (0, 1], got " + std::to_string(lambda));
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
  if (total_steps == 0) throw ConfigError("total_steps must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (grad_accum_steps == 0) throw ConfigError("grad_accum_steps must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
}

std::size_t TrainConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

AdamWConfig TrainConfig::optimizer_config() const {
  AdamWConfig c;
  c.learning_rate = learning_rate;
  c.weight_decay = weight_decay;
  c.warmup_steps = warmup_steps();
  c.total_steps = total_steps;
  c.schedule = lr_schedule;
  return c;
}

json TrainConfig::to_json() const {
  return json{{"gamma", gamma},
              {"alpha0", alpha0},
              {"lambda", lambda},
              {"learning_rate", learning_rate},
              {"warmup_fraction", warmup_fraction},
              {"total_steps", total_steps},
              {"batch_size", batch_size},
              {"seed", seed},
              {"spr_enabled", spr_enabled},
              {"teacher_enabled", teacher_enabled},
              {"discount_enabled", discount_enabled},
              {"lm_enabled", lm_enabled},
              {"kl_direction", kl_direction_name(kl_direction)},
              {"weight_decay", weight_decay},
              {"grad_accum_steps", grad_accum_steps},
              {"checkpoint_interval", checkpoint_interval},
              {"lr_schedule", schedule_name(lr_schedule)}};
}

TrainConfig TrainConfig::from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "gamma") c.gamma = as_real(v, key);
    else if (key == "alpha0") c.alpha0 = as_real(v, key);
    else if (key == "lambda") c.lambda = as_real(v, key);
    else if (key == "learning_rate") c.learning_rate = as_real(v, key);
    else if (key == "warmup_fraction") c.warmup_fraction = as_real(v, key);
    else if (key == "total_steps") c.total_steps = as_count(v, key);
    else if (key == "batch_size") c.batch_size = as_count(v, key);
    else if (key == "seed") c.seed = as_count(v, key);
    else if (key == "spr_enabled") c.spr_enabled = as_flag(v, key);
    else if (key == "teacher_enabled") c.teacher_enabled = as_flag(v, key);
    else if (key == "discount_enabled") c.discount_enabled = as_flag(v, key);
    else if (key == "lm_enabled") c.lm_enabled = as_flag(v, key);
    else if (key == "weight_decay") c.weight_decay = as_real(v, key);
    else if (key == "grad_accum_steps") c.grad_accum_steps = as_count(v, key);
    else if (key == "checkpoint_interval") c.checkpoint_interval = as_count(v, key);
    else if (key == "kl_direction") {
      const auto s = as_text(v, key);
      if (s == "student_teacher") c.kl_direction = KlDirection::StudentTeacher;
      else if (s == "teacher_student") c.kl_direction = KlDirection::TeacherStudent;
      else throw ConfigError("kl_direction must be student_teacher or teacher_student, got '" + s + "'");
    } else if (key == "lr_schedule") {
      const auto s = as_text(v, key);
      if (s == "constant") c.lr_schedule = LrSchedule::Constant;
      else if (s == "linear_decay") c.lr_schedule = LrSchedule::LinearDecay;
      else throw ConfigError("lr_schedule must be constant or linear_decay, got '" + s + "'");
    } else {
      throw ConfigError("unknown train config key '" + key + "'");
    }
  }
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_environment(TrainConfig base) {
  json overrides = json::object();
  for (const auto& key : config_keys()) {
    std::string name = "PRAL_";
    for (char ch : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (const char* v = std::getenv(name.c_str())) overrides[key] = std::string(v);
  }
  return from_json(overrides, base);
}

std::vector<double> discount_weights(std::size_t utterance_count, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1], got " + std::to_string(gamma));
  if (utterance_count == 0) throw ConfigError("discount_weights needs at least one utterance");
  std::vector<double> w(utterance_count);
  for (std::size_t u = 1; u <= utterance_count; ++u) {
    w[u - 1] = std::pow(gamma, static_cast<double>(utterance_count - u));
  }
  return w;
}

double alpha_at(std::size_t iter, double alpha0, double lambda) {
  return alpha0 * std::pow(lambda, static_cast<double>(iter));
}

ModelConfig teacher_config(const ModelConfig& student) {
  ModelConfig c = student;
  c.n_layers = student.n_layers + 1;
  c.d_model = student.d_model * 2;
  c.d_ff = student.d_ff * 2;
  c.dropout_rate = 0.0;
  c.init_seed = derive_seed(student.init_seed, "teacher");
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
std::size_t TeacherHandle<T>::clamp_offset(std::size_t offset, std::size_t length) const {
  const std::size_t cap = lm_.config().max_positions;
  if (length > cap) {
    throw CapacityError("sequence of " + std::to_string(length) + " tokens exceeds the teacher's " +
                        std::to_string(cap) + " positions");
  }
  return std::min(offset, cap - length);
}

template <typename T>
Tensor<T> TeacherHandle<T>::logits(std::span<const TokenId> ids, std::size_t position_offset) const {
  return lm_.logits(ids, clamp_offset(position_offset, ids.size()));
}

// ---------------------------------------------------------------------------

template <typename T>
LossBreakdown lm_loss(const RoleAlternatingModel<T>& m, const TokenizedDialog& td, Offsets offsets, double gamma) {
  const PredictionLayout layout = PredictionLayout::of(td);
  const std::size_t U = td.utterance_count();
  const auto w = discount_weights(std::max<std::size_t>(U, 1), gamma);
  const auto counts = layout.counts_per_utterance(U);

  LossBreakdown out;
  out.per_utterance.resize(U);
  for (std::size_t u = 1; u <= U; ++u) out.per_utterance[u - 1] = {u, w[u - 1], 0.0, counts[u]};
  if (layout.rows() > 0) {
    const std::span<const TokenId> context(td.ids.data(), td.ids.size() - 1);
    for (Role role : {Role::User, Role::System}) {
      const Tensor<T> logits = m.lm(role).logits(context, offsets.of(role));
      const auto mask = layout.mask<T>(role);
      const auto ce = cross_entropy(logits, layout.targets, std::span<const T>(mask));
      for (std::size_t r = 0; r < layout.rows(); ++r) {
        if (mask[r] != T(0)) out.per_utterance[layout.utterance[r] - 1].summed_ce += static_cast<double>(ce[r]);
      }
    }
  }
  for (const auto& pu : out.per_utterance) {
    out.lm_loss_raw += pu.weight * pu.summed_ce;
    out.weight_total += pu.weight * static_cast<double>(pu.token_count);
  }
  out.lm_loss = out.weight_total > 0 ? out.lm_loss_raw / out.weight_total : 0.0;
  out.total = out.lm_loss;
  return out;
}

template <typename T>
double distill_loss(const Tensor<T>& student_logits, const TeacherHandle<T>& teacher, std::span<const TokenId> ids,
                    std::size_t offset, std::span<const T> mask, KlDirection direction) {
  if (student_logits.cols() != teacher.vocab_size()) {
    throw ConfigError("teacher vocabulary " + std::to_string(teacher.vocab_size()) + " differs from student " +
                      std::to_string(student_logits.cols()));
  }
  if (student_logits.rows() != ids.size() || mask.size() != ids.size()) {
    throw DimensionError("distill_loss: " + std::to_string(ids.size()) + " ids, logits " +
                         shape_string(student_logits.shape()) + ", mask " + std::to_string(mask.size()));
  }
  const Tensor<T> t = teacher.logits(ids, offset);
  const T kl = direction == KlDirection::StudentTeacher ? kl_divergence_rows(student_logits, t, mask)
                                                        : kl_divergence_rows(t, student_logits, mask);
  return static_cast<double>(kl);
}

LossBreakdown total_loss(LossBreakdown lm_part, std::optional<double> kl, double alpha) {
  lm_part.kl_loss = kl;
  lm_part.alpha = kl ? alpha : 0.0;
  lm_part.total = kl ? lm_part.lm_loss + alpha * *kl : lm_part.lm_loss;
  return lm_part;
}

template <typename T>
DialogObjective<T> dialog_objective(Tape<T>& tape, const RoleAlternatingModel<T>& m, const TokenizedDialog& td,
                                    Offsets offsets, const TeacherHandle<T>* teacher, const ObjectiveSpec& spec,
                                    const ForwardOptions& fwd) {
  if (teacher && teacher->vocab_size() != m.config().vocab_size) {
    throw ConfigError("teacher vocabulary " + std::to_string(teacher->vocab_size()) + " differs from student " +
                      std::to_string(m.config().vocab_size));
  }
  DialogObjective<T> obj;
  const PredictionLayout layout = PredictionLayout::of(td);
  const std::size_t U = td.utterance_count();
  const std::size_t n = td.ids.size();
  obj.value = make_constant(Tensor<T>::scalar(T(0)));
  if (layout.rows() == 0) return obj;

  const auto w = discount_weights(U, spec.gamma);
  const auto counts = layout.counts_per_utterance(U);
  obj.per_utterance.resize(U);
  for (std::size_t u = 1; u <= U; ++u) {
    obj.per_utterance[u - 1] = {u, w[u - 1], 0.0, counts[u]};
    obj.weight_total += w[u - 1] * static_cast<double>(counts[u]);
  }

  // Logits have one row per token; the last row predicts nothing.
  std::vector<TokenId> targets(n, 0);
  std::copy(layout.targets.begin(), layout.targets.end(), targets.begin());
  const DialogLogits<T> dl = dialog_logits(tape, m, td, offsets.user, offsets.system, fwd);

  Var<T> acc;
  auto accumulate = [&](Var<T> term) { acc = acc ? add(tape, acc, term) : term; };
  std::optional<Tensor<T>> teacher_cache;
  std::size_t cached_offset = 0;
  for (Role role : {Role::User, Role::System}) {
    const Var<T>& logits = role == Role::User ? dl.user : dl.system;
    std::vector<T> mask(n, T(0)), lm_weights(n, T(0)), kl_weights(n, T(0));
    std::size_t own_rows = 0;
    for (std::size_t r = 0; r < layout.rows(); ++r) {
      if (layout.role[r] != role) continue;
      mask[r] = T(1);
      lm_weights[r] = static_cast<T>(spec.lm_scale * w[layout.utterance[r] - 1]);
      kl_weights[r] = static_cast<T>(spec.kl_scale);
      ++own_rows;
    }
    if (own_rows == 0) continue;

    std::vector<T> ce;
    if (spec.lm_enabled && spec.lm_scale > 0) {
      accumulate(weighted_cross_entropy(tape, logits, targets, std::span<const T>(lm_weights), &ce));
    } else {
      ce = cross_entropy(logits->value, targets, std::span<const T>(mask));
    }
    for (std::size_t r = 0; r < layout.rows(); ++r) {
      if (mask[r] == T(0)) continue;
      auto& pu = obj.per_utterance[layout.utterance[r] - 1];
      pu.summed_ce += static_cast<double>(ce[r]);
      obj.weighted_ce += pu.weight * static_cast<double>(ce[r]);
    }

    if (teacher) {
      const std::size_t off = teacher->clamp_offset(offsets.of(role), n);
      if (!teacher_cache || cached_offset != off) {
        teacher_cache = teacher->logits(td.ids, off);
        cached_offset = off;
      }
      const Var<T> t = make_constant(*teacher_cache);
      const bool st = spec.kl_direction == KlDirection::StudentTeacher;
      std::vector<T> kl;
      if (spec.kl_scale > 0) {
        accumulate(st ? weighted_kl_rows(tape, logits, t, std::span<const T>(kl_weights), &kl)
                      : weighted_kl_rows(tape, t, logits, std::span<const T>(kl_weights), &kl));
        for (std::size_t r = 0; r < layout.rows(); ++r) obj.kl_sum += static_cast<double>(kl[r]);
      } else {
        const T mean = st ? kl_divergence_rows(logits->value, t->value, std::span<const T>(mask))
                          : kl_divergence_rows(t->value, logits->value, std::span<const T>(mask));
        obj.kl_sum += static_cast<double>(mean) * static_cast<double>(own_rows);
      }
      obj.kl_rows += own_rows;
    }
  }
  if (acc) obj.value = acc;
  return obj;
}

// ---------------------------------------------------------------------------

BatchSchedule::BatchSchedule(std::vector<std::size_t> lengths, std::size_t batch_size, std::uint64_t seed)
    : lengths_(std::move(lengths)), batch_size_(batch_size), rng_(seed) {
  if (lengths_.empty()) throw ConfigError("cannot batch an empty corpus");
  if (batch_size_ == 0) throw ConfigError("batch_size must be >= 1");
}

void BatchSchedule::refill() {
  std::vector<std::size_t> order(lengths_.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng_, i)]);
  // Sort within windows of several batches so padding-free batches still mix.
  const std::size_t window = batch_size_ * 8;
  for (std::size_t s = 0; s < order.size(); s += window) {
    const auto e = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + window));
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(s), e,
                     [&](std::size_t a, std::size_t b) { return lengths_[a] < lengths_[b]; });
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += batch_size_) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch_size_)));
  }
  for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[uniform_index(rng_, i)]);
  // Consumed from the back.
  std::reverse(batches.begin(), batches.end());
  pending_ = std::move(batches);
}

std::vector<std::size_t> BatchSchedule::next() {
  if (pending_.empty()) refill();
  auto b = std::move(pending_.back());
  pending_.pop_back();
  return b;
}

json StepRecord::to_json() const {
  json j{{"step", step}, {"lm", lm}, {"lm_raw", lm_raw}};
  if (kl) {
    j["kl"] = *kl;
    j["alpha"] = alpha;
  }
  j["total"] = total;
  j["lr"] = lr;
  return j;
}

template <typename T>
std::vector<StepRecord> train(std::span<const TokenizedDialog> corpus, RoleAlternatingModel<T>& m,
                              const TeacherHandle<T>* teacher, const TrainConfig& cfg,
                              const TrainCallbacks<T>& callbacks) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  if (cfg.teacher_enabled && teacher == nullptr) {
    throw ConfigError("teacher_enabled is set but no teacher checkpoint was given");
  }
  const TeacherHandle<T>* active = cfg.teacher_enabled ? teacher : nullptr;
  if (active && active->vocab_size() != m.config().vocab_size) {
    throw ConfigError("teacher vocabulary " + std::to_string(active->vocab_size()) + " differs from student " +
                      std::to_string(m.config().vocab_size));
  }
  const std::size_t cap = m.config().max_positions;
  std::vector<std::size_t> lengths;
  std::vector<double> weight_totals;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].ids.size() > cap) {
      throw CapacityError("dialog " + std::to_string(i) + " has " + std::to_string(corpus[i].ids.size()) +
                          " tokens, model capacity is " + std::to_string(cap));
    }
    lengths.push_back(corpus[i].ids.size());
    const auto layout = PredictionLayout::of(corpus[i]);
    double wt = 0;
    if (layout.rows() > 0) {
      const auto w = discount_weights(corpus[i].utterance_count(), cfg.effective_gamma());
      for (std::size_t u : layout.utterance) wt += w[u - 1];
    }
    weight_totals.push_back(wt);
  }

  BatchSchedule schedule(lengths, cfg.batch_size, derive_seed(cfg.seed, "train.batches"));
  PositionSampler spr_user(cap, derive_seed(cfg.seed, "train.spr.user"));
  PositionSampler spr_system(cap, derive_seed(cfg.seed, "train.spr.system"));
  Rng dropout_rng(derive_seed(cfg.seed, "train.dropout"));
  ForwardOptions fwd{true, &dropout_rng};

  const AdamWConfig opt = cfg.optimizer_config();
  auto state_user = make_optimizer_state<T>(opt, m.user_lm.parameters());
  auto state_system = make_optimizer_state<T>(opt, m.system_lm.parameters());

  std::vector<StepRecord> log;
  log.reserve(cfg.total_steps);
  const double accum = static_cast<double>(cfg.grad_accum_steps);
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    const double alpha = alpha_at(step - 1, cfg.alpha0, cfg.lambda);
    m.zero_grad();
    StepRecord rec;
    rec.step = step;
    rec.alpha = active ? alpha : 0.0;
    double kl_mean_acc = 0;

    for (std::size_t micro = 0; micro < cfg.grad_accum_steps; ++micro) {
      const auto batch = schedule.next();
      double w_batch = 0;
      std::size_t rows_batch = 0;
      for (std::size_t i : batch) {
        w_batch += weight_totals[i];
        rows_batch += corpus[i].ids.empty() ? 0 : corpus[i].ids.size() - 1;
      }
      ObjectiveSpec spec;
      spec.gamma = cfg.effective_gamma();
      spec.lm_enabled = cfg.lm_enabled;
      spec.lm_scale = w_batch > 0 ? 1.0 / (w_batch * accum) : 0.0;
      spec.kl_scale = active && rows_batch > 0 ? alpha / (static_cast<double>(rows_batch) * accum) : 0.0;
      spec.kl_direction = cfg.kl_direction;

      double wce = 0, kl_sum = 0;
      std::size_t kl_rows = 0;
      for (std::size_t i : batch) {
        const auto& td = corpus[i];
        Offsets off;
        if (cfg.spr_enabled) {
          off.user = spr_user.sample(td.ids.size());
          off.system = spr_system.sample(td.ids.size());
        }
        Tape<T> tape;
        auto obj = dialog_objective(tape, m, td, off, active, spec, fwd);
        tape.backward(obj.value);
        wce += obj.weighted_ce;
        kl_sum += obj.kl_sum;
        kl_rows += obj.kl_rows;
      }
      rec.lm += (w_batch > 0 ? wce / w_batch : 0.0) / accum;
      rec.lm_raw += wce / static_cast<double>(batch.size()) / accum;
      if (active) kl_mean_acc += (kl_rows > 0 ? kl_sum / static_cast<double>(kl_rows) : 0.0) / accum;
    }
    if (active) rec.kl = kl_mean_acc;
    rec.total = (cfg.lm_enabled ? rec.lm : 0.0) + (active ? alpha * kl_mean_acc : 0.0);
    if (!std::isfinite(rec.total)) throw NonFiniteError("loss");
    if (!grads_finite(m.user_lm.parameters())) throw NonFiniteError(first_nonfinite(m.user_lm.parameters()));
    if (!grads_finite(m.system_lm.parameters())) throw NonFiniteError(first_nonfinite(m.system_lm.parameters()));

    rec.lr = optimizer_step<T>(m.user_lm.parameters(), state_user);
    optimizer_step<T>(m.system_lm.parameters(), state_system);
    log.push_back(rec);
    if (callbacks.on_step) callbacks.on_step(rec);
    const bool periodic = cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0;
    if (callbacks.on_checkpoint && (periodic || step == cfg.total_steps)) callbacks.on_checkpoint(step, m);
  }
  m.zero_grad();
  return log;
}

template <typename T>
std::vector<StepRecord> train_language_model(std::span<const TokenizedDialog> corpus, TransformerLM<T>& lm,
                                             const TrainConfig& cfg,
                                             const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  const std::size_t cap = lm.config().max_positions;
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].ids.size() > cap) {
      throw CapacityError("dialog " + std::to_string(i) + " has " + std::to_string(corpus[i].ids.size()) +
                          " tokens, model capacity is " + std::to_string(cap));
    }
    lengths.push_back(corpus[i].ids.size());
  }
  BatchSchedule schedule(lengths, cfg.batch_size, derive_seed(cfg.seed, "lm.batches"));
  PositionSampler spr(cap, derive_seed(cfg.seed, "lm.spr"));
  Rng dropout_rng(derive_seed(cfg.seed, "lm.dropout"));
  ForwardOptions fwd{true, &dropout_rng};
  auto state = make_optimizer_state<T>(cfg.optimizer_config(), lm.parameters());

  std::vector<StepRecord> log;
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    lm.zero_grad();
    StepRecord rec;
    rec.step = step;
    for (std::size_t micro = 0; micro < cfg.grad_accum_steps; ++micro) {
      const auto batch = schedule.next();
      std::size_t rows = 0;
      for (std::size_t i : batch) rows += corpus[i].ids.empty() ? 0 : corpus[i].ids.size() - 1;
      if (rows == 0) continue;
      const T s = static_cast<T>(1.0 / (static_cast<double>(rows) * static_cast<double>(cfg.grad_accum_steps)));
      double ce_sum = 0;
      for (std::size_t i : batch) {
        const auto& ids = corpus[i].ids;
        if (ids.size() < 2) continue;
        const std::size_t off = cfg.spr_enabled ? spr.sample(ids.size()) : 0;
        Tape<T> tape;
        const Var<T> logits = lm.forward(tape, ids, off, fwd);
        std::vector<TokenId> targets(ids.size(), 0);
        std::copy(ids.begin() + 1, ids.end(), targets.begin());
        std::vector<T> weights(ids.size(), s);
        weights.back() = T(0);
        const Var<T> loss = weighted_cross_entropy(tape, logits, targets, std::span<const T>(weights));
        tape.backward(loss);
        ce_sum += static_cast<double>(loss->value.item()) / static_cast<double>(s);
      }
      rec.lm += ce_sum / static_cast<double>(rows) / static_cast<double>(cfg.grad_accum_steps);
    }
    rec.lm_raw = rec.lm;
    rec.total = rec.lm;
    if (!std::isfinite(rec.total)) throw NonFiniteError("loss");
    if (!grads_finite(lm.parameters())) throw NonFiniteError(first_nonfinite(lm.parameters()));
    rec.lr = optimizer_step<T>(lm.parameters(), state);
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  lm.zero_grad();
  return log;
}

TeacherRecipe::TeacherRecipe() {
  train.learning_rate = 1e-3;
  train.total_steps = 2000;
}

nlohmann::json TeacherRecipe::to_json() const {
  return {{"corpus_seed", corpus_seed}, {"dialogs", dialogs}, {"train", train.to_json()}};
}

template <typename T>
TransformerLM<T> make_teacher(const ModelConfig& student, const Vocab& v, const TeacherRecipe& recipe,
                              const std::function<void(const StepRecord&)>& on_step) {
  const ModelConfig tc = teacher_config(student);
  if (tc.vocab_size != v.size()) {
    throw ConfigError("student vocab_size " + std::to_string(tc.vocab_size) + " differs from vocabulary size " +
                      std::to_string(v.size()));
  }
  SyntheticGrammar broad;
  broad.breadth = SyntheticGrammar::Breadth::Broad;
  std::vector<TokenizedDialog> corpus;
  for (const Dialog& d : generate_synthetic(recipe.corpus_seed, recipe.dialogs, broad)) {
    TokenizedDialog td = encode_dialog(v, d);
    if (td.ids.size() <= tc.max_positions) corpus.push_back(std::move(td));
  }
  if (corpus.empty()) throw ConfigError("no teacher dialog fits in " + std::to_string(tc.max_positions) + " positions");
  TransformerLM<T> lm(tc, "teacher.");
  train_language_model<T>(corpus, lm, recipe.train, on_step);
  return lm;
}

#define PRAL_INSTANTIATE_TRAINING(T)                                                                              \
  template class TeacherHandle<T>;                                                                                \
  template LossBreakdown lm_loss(const RoleAlternatingModel<T>&, const TokenizedDialog&, Offsets, double);       \
  template double distill_loss(const Tensor<T>&, const TeacherHandle<T>&, std::span<const TokenId>, std::size_t, \
                               std::span<const T>, KlDirection);                                                 \
  template DialogObjective<T> dialog_objective(Tape<T>&, const RoleAlternatingModel<T>&, const TokenizedDialog&, \
                                               Offsets, const TeacherHandle<T>*, const ObjectiveSpec&,           \
                                               const ForwardOptions&);                                           \
  template std::vector<StepRecord> train(std::span<const TokenizedDialog>, RoleAlternatingModel<T>&,             \
                                         const TeacherHandle<T>*, const TrainConfig&, const TrainCallbacks<T>&); \
  template std::vector<StepRecord> train_language_model(std::span<const TokenizedDialog>, TransformerLM<T>&,     \
                                                        const TrainConfig&,                                      \
                                                        const std::function<void(const StepRecord&)>&);   \
  template TransformerLM<T> make_teacher(const ModelConfig&, const Vocab&, const TeacherRecipe&,                  \
                                         const std::function<void(const StepRecord&)>&);

PRAL_INSTANTIATE_TRAINING(float)
PRAL_INSTANTIATE_TRAINING(double)

}  // namespace pral
