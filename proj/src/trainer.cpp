#include "muxplm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "muxplm/errors.hpp"
#include "muxplm/vocab.hpp"

namespace muxplm {

using json = nlohmann::json;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::prime: return "prime";
    case Stage::pretrain: return "pretrain";
    case Stage::finetune: return "finetune";
  }
  return "?";
}

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::retrieval: return "retrieval";
    case Objective::mlm: return "mlm";
    case Objective::rtd: return "rtd";
    case Objective::mixed: return "mixed";
    case Objective::seq_cls: return "seq_cls";
    case Objective::token_cls: return "token_cls";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  if (s == "prime") return Stage::prime;
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

Objective parse_objective(std::string_view s) {
  for (auto o : {Objective::retrieval, Objective::mlm, Objective::rtd, Objective::mixed, Objective::seq_cls, Objective::token_cls}) {
    if (s == to_string(o)) return o;
  }
  throw ConfigError("unknown objective '" + std::string(s) + "' (expected retrieval, mlm, rtd, mixed, seq_cls or token_cls)");
}

Objective default_objective(Stage s) {
  switch (s) {
    case Stage::prime: return Objective::retrieval;
    case Stage::pretrain: return Objective::mlm;
    case Stage::finetune: return Objective::seq_cls;
  }
  return Objective::retrieval;
}

void StagePlan::validate() const {
  if (!(lr > 0.0)) throw ConfigError("stage plan: lr must be positive");
  if (warmup > steps) throw ConfigError("stage plan: warmup (" + std::to_string(warmup) + ") exceeds steps (" + std::to_string(steps) + ")");
  if (groups == 0 || seq_len == 0) throw ConfigError("stage plan: batch and sequence length must be positive");
  if (!(retrieval_rate >= 0.0 && retrieval_rate <= 1.0)) throw ConfigError("stage plan: retrieval rate must be in [0,1]");
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("stage plan: mask rate must be in [0,1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("stage plan: Adam betas must be in [0,1)");
  if (!(adam_eps > 0.0)) throw ConfigError("stage plan: Adam eps must be positive");
  if (max_grad_norm < 0.0) throw ConfigError("stage plan: max_grad_norm must be >= 0");
  if (log_every == 0) throw ConfigError("stage plan: log_every must be positive");
  const bool stage_ok = stage == Stage::finetune ? (objective == Objective::seq_cls || objective == Objective::token_cls)
                                                 : (objective != Objective::seq_cls && objective != Objective::token_cls);
  if (!stage_ok) {
    throw ConfigError("stage plan: objective " + std::string(to_string(objective)) + " does not belong to stage " +
                      std::string(to_string(stage)));
  }
}

StagePlan default_plan(Stage stage) {
  StagePlan p;
  p.stage = stage;
  p.objective = default_objective(stage);
  switch (stage) {
    case Stage::prime:
      p.steps = 10000;
      p.lr = 1e-4;
      p.warmup = 1000;
      p.adam_eps = 1e-6;
      break;
    case Stage::pretrain:
      p.steps = 10000;
      p.lr = 1e-4;
      p.warmup = 1000;
      p.adam_eps = 1e-6;
      p.plateau_window = 0;
      break;
    case Stage::finetune:
      p.steps = 2000;
      p.lr = 5e-5;
      p.warmup = 200;
      p.adam_eps = 1e-8;
      p.plateau_window = 0;
      break;
  }
  return p;
}

double lr_at(std::size_t step, const StagePlan& plan) {
  if (plan.steps == 0 || step >= plan.steps) return 0.0;
  if (step < plan.warmup) return plan.lr * static_cast<double>(step) / static_cast<double>(plan.warmup);
  return plan.lr * static_cast<double>(plan.steps - step) / static_cast<double>(plan.steps - plan.warmup);
}

void adam_step(MuxModel<float>& model, OptimizerState& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);
  model.visit([&](const std::string& name, Tensor<float>& t) {
    if (!t.requires_grad() || !t.has_grad()) return;
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(t.numel(), 0.0f);
      slot.v.assign(t.numel(), 0.0f);
    }
    if (slot.m.size() != t.numel() || slot.v.size() != t.numel()) {
      throw DimensionError("adam_step: moment buffers for " + name + " hold " + std::to_string(slot.m.size()) +
                           " entries, parameter has " + std::to_string(t.numel()));
    }
    auto w = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      slot.m[i] = b1 * slot.m[i] + (1.0f - b1) * g[i];
      slot.v[i] = b2 * slot.v[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = slot.m[i] / bc1, vhat = slot.v[i] / bc2;
      w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  });
}

Seeds Seeds::from_base(std::uint64_t base) {
  return {derive_seed(base, 0x1417), derive_seed(base, 0xda7a), derive_seed(base, 0xc0de)};
}

bool TrainState::completed(Stage s) const {
  return std::any_of(history.begin(), history.end(), [s](const StageRecord& r) { return r.stage == s && r.steps > 0; });
}

TrainState new_train_state(const ModelSpec& spec, const Seeds& seeds) {
  TrainState st;
  st.model = init_model<float>(spec, seeds.init);
  st.seeds = seeds;
  st.corruption_rng = Rng(seeds.corruption).state();
  st.dropout_rng = Rng(derive_seed(seeds.init, 3)).state();
  return st;
}

std::string to_json_line(const MetricRecord& r) {
  json j;
  j["stage"] = r.stage;
  j["objective"] = r.objective;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["accuracy"] = r.accuracy;
  j["lr"] = r.lr;
  return j.dump();
}

namespace {

std::vector<std::int32_t> non_pad_targets(std::span<const std::int32_t> tokens) {
  std::vector<std::int32_t> t(tokens.begin(), tokens.end());
  for (auto& v : t) {
    if (v == vocab::kPad) v = diff::kIgnoreIndex;
  }
  return t;
}

struct StepLoss {
  Tensor<float> loss;
  AccuracyCount accuracy;
};

// Builds the loss of one batch; recorded on the active tape, if any.
StepLoss batch_loss(const MuxModel<float>& model, const MuxBatch& batch, Objective objective, double mask_rate, double retrieval_rate,
                    Rng& corruption_rng, const ModelForwardOptions& fopts) {
  if (batch.n != model.n()) {
    throw DimensionError("batch holds groups of " + std::to_string(batch.n) + " instances, model expects N=" + std::to_string(model.n()));
  }
  const auto& emb = model.encoder.token_embedding;
  const auto& heads = model.heads;
  StepLoss out;
  switch (objective) {
    case Objective::retrieval: {
      auto demuxed = model_forward(model, batch.tokens, batch.groups, batch.seq_len, fopts).demuxed;
      auto logits = lm_logits(demuxed, emb, heads);
      const auto targets = non_pad_targets(batch.tokens);
      out.loss = diff::cross_entropy(logits, targets);
      out.accuracy = count_correct(logits, targets);
      break;
    }
    case Objective::mlm:
    case Objective::mixed: {
      auto outcome = mask_tokens(batch.tokens, mask_rate, corruption_rng);
      if (outcome.touched_count() == 0) throw ValueError("mlm batch: no position was selected for masking");
      auto demuxed = model_forward(model, outcome.corrupted, batch.groups, batch.seq_len, fopts).demuxed;
      auto logits = lm_logits(demuxed, emb, heads);
      auto mlm = diff::cross_entropy(logits, outcome.mlm_labels);
      out.accuracy = count_correct(logits, outcome.mlm_labels);
      if (objective == Objective::mixed && retrieval_rate > 0.0) {
        auto ret = diff::cross_entropy(logits, non_pad_targets(outcome.corrupted));
        out.loss = mixed_pretrain_loss(mlm, ret, retrieval_rate);
      } else {
        out.loss = mlm;
      }
      break;
    }
    case Objective::rtd: {
      auto outcome = random_replace(batch.tokens, mask_rate, corruption_rng);
      auto demuxed = model_forward(model, outcome.corrupted, batch.groups, batch.seq_len, fopts).demuxed;
      auto logits = diff::linear(demuxed, heads.rtd_w, &heads.rtd_b);
      out.loss = diff::bce_with_logits(logits, outcome.rtd_labels);
      const auto z = logits.data();
      for (std::size_t i = 0; i < outcome.rtd_labels.size(); ++i) {
        if (outcome.rtd_labels[i] < 0) continue;
        ++out.accuracy.total;
        out.accuracy.correct += (z[i] > 0.0f) == (outcome.rtd_labels[i] == 1);
      }
      break;
    }
    case Objective::seq_cls: {
      ModelForwardOptions cls = fopts;
      cls.cls_only = true;
      auto demuxed = model_forward(model, batch.tokens, batch.groups, batch.seq_len, cls).demuxed;
      auto logits = sequence_logits(demuxed, heads);
      out.loss = diff::cross_entropy(logits, batch.seq_labels);
      out.accuracy = count_correct(logits, batch.seq_labels);
      break;
    }
    case Objective::token_cls: {
      auto demuxed = model_forward(model, batch.tokens, batch.groups, batch.seq_len, fopts).demuxed;
      auto logits = token_logits(demuxed, heads);
      out.loss = diff::cross_entropy(logits, batch.tag_labels);
      out.accuracy = count_correct(logits, batch.tag_labels);
      break;
    }
  }
  return out;
}

void check_stage_order(const TrainState& state, const StagePlan& plan) {
  if (plan.allow_out_of_order) return;
  if (plan.stage == Stage::pretrain && !state.completed(Stage::prime)) {
    throw StageOrderError("pretraining requires a primed checkpoint (run prime first or allow out-of-order stages)");
  }
  if (plan.stage == Stage::finetune && !state.completed(Stage::pretrain)) {
    throw StageOrderError("fine-tuning requires a pretrained checkpoint (run pretrain first or allow out-of-order stages)");
  }
}

void check_task(const MuxModel<float>& model, const Dataset& data, Objective objective) {
  if (objective == Objective::seq_cls) {
    for (const auto& ex : data.examples) {
      if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= model.spec.num_classes) {
        throw ValueError("sequence classification needs labels in [0," + std::to_string(model.spec.num_classes) + ")");
      }
    }
  }
  if (objective == Objective::token_cls) {
    for (const auto& ex : data.examples) {
      if (ex.tags.size() != ex.tokens.size()) throw ValueError("token classification needs one tag per token");
      for (auto t : ex.tags) {
        if (t != diff::kIgnoreIndex && (t < 0 || static_cast<std::size_t>(t) >= model.spec.num_tags)) {
          throw ValueError("token tag " + std::to_string(t) + " outside [0," + std::to_string(model.spec.num_tags) + ")");
        }
      }
    }
  }
}

void clip_gradients(MuxModel<float>& model, double max_norm) {
  double sq = 0.0;
  model.visit([&](const std::string&, Tensor<float>& t) {
    if (!t.has_grad()) return;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  });
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const float factor = static_cast<float>(max_norm / norm);
  model.visit([&](const std::string&, Tensor<float>& t) {
    if (!t.has_grad()) return;
    for (auto& g : t.mutable_grad()) g *= factor;
  });
}

}  // namespace

StageResult run_stage(TrainState& state, const StagePlan& plan, const Dataset& data, const MetricSink& sink) {
  plan.validate();
  check_stage_order(state, plan);
  StageResult result;
  if (plan.steps == 0) return result;
  auto& model = state.model;
  check_task(model, data, plan.objective);

  state.optimizer = OptimizerState{};
  state.optimizer.beta1 = plan.beta1;
  state.optimizer.beta2 = plan.beta2;
  state.optimizer.eps = plan.adam_eps;

  Rng corruption, dropout;
  corruption.restore(state.corruption_rng);
  dropout.restore(state.dropout_rng);
  const std::uint64_t data_seed = derive_seed(state.seeds.data, state.history.size());
  BatchSampler sampler(data, model.n(), plan.groups, plan.seq_len, data_seed);
  std::unique_ptr<PrefetchingSampler> prefetch;
  if (plan.prefetch) prefetch = std::make_unique<PrefetchingSampler>(sampler);

  ModelForwardOptions fopts;
  fopts.train = true;
  fopts.rng = &dropout;

  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  AccuracyCount window;
  double best_accuracy = -1.0;
  std::size_t best_step = 0;

  for (std::size_t step = 1; step <= plan.steps; ++step) {
    MuxBatch batch = prefetch ? prefetch->next() : sampler.next();
    model.visit([](const std::string&, Tensor<float>& t) { t.zero_grad(); });
    diff::Tape<float> tape;
    StepLoss sl;
    {
      diff::TapeScope<float> scope(tape);
      sl = batch_loss(model, batch, plan.objective, plan.mask_rate, plan.retrieval_rate, corruption, fopts);
      diff::backward(sl.loss, tape);
    }
    if (plan.max_grad_norm > 0.0) clip_gradients(model, plan.max_grad_norm);
    const double lr = lr_at(step, plan);
    adam_step(model, state.optimizer, lr);

    loss_sum += sl.loss.item();
    ++loss_count;
    window += sl.accuracy;
    result.steps_run = step;

    if (step % plan.log_every == 0 || step == plan.steps) {
      MetricRecord rec;
      rec.stage = std::string(to_string(plan.stage));
      rec.objective = std::string(to_string(plan.objective));
      rec.step = step;
      rec.loss = loss_sum / static_cast<double>(loss_count);
      rec.accuracy = window.rate();
      rec.lr = lr;
      result.log.push_back(rec);
      if (sink) sink(rec);
      loss_sum = 0.0;
      loss_count = 0;
      window = {};

      if (plan.stage == Stage::prime && plan.plateau_window > 0) {
        if (rec.accuracy > best_accuracy + plan.plateau_delta) {
          best_accuracy = rec.accuracy;
          best_step = step;
        } else if (step - best_step >= plan.plateau_window) {
          result.stopped_on_plateau = true;
          break;
        }
      }
    }
  }
  model.visit([](const std::string&, Tensor<float>& t) { t.zero_grad(); });
  state.corruption_rng = corruption.state();
  state.dropout_rng = dropout.state();
  state.history.push_back({plan.stage, plan.objective, result.steps_run});
  return result;
}

BatchOutcome score_batch(const MuxModel<float>& model, const MuxBatch& batch, Objective objective, double mask_rate,
                         double retrieval_rate, Rng& corruption_rng) {
  auto sl = batch_loss(model, batch, objective, mask_rate, retrieval_rate, corruption_rng, ModelForwardOptions{});
  return {static_cast<double>(sl.loss.item()), sl.accuracy};
}

EvalResult evaluate(const MuxModel<float>& model, const Dataset& data, Objective objective, std::size_t groups,
                    std::size_t seq_len, std::uint64_t seed, double mask_rate) {
  const std::size_t N = model.n();
  if (data.size() < N) throw ValueError("evaluate: dataset smaller than one group of N=" + std::to_string(N));
  check_task(model, data, objective);
  groups = std::max<std::size_t>(1, std::min(groups, data.size() / N));
  BatchSampler sampler(data, N, groups, seq_len, seed);
  Rng corruption(derive_seed(seed, 1));
  EvalResult r;
  AccuracyCount acc;
  double loss = 0.0;
  const std::size_t batches = sampler.batches_per_epoch();
  for (std::size_t b = 0; b < batches; ++b) {
    auto out = score_batch(model, sampler.next(), objective, mask_rate, 0.0, corruption);
    loss += out.loss;
    acc += out.accuracy;
  }
  r.batches = batches;
  r.loss = loss / static_cast<double>(batches);
  r.accuracy = acc.rate();
  r.scored = acc.total;
  return r;
}

std::vector<double> average_logits(std::span<const double> slot_logits, std::size_t classes) {
  if (classes == 0 || slot_logits.empty() || slot_logits.size() % classes != 0) {
    throw DimensionError("average_logits: " + std::to_string(slot_logits.size()) + " values do not form rows of " +
                         std::to_string(classes));
  }
  const std::size_t k = slot_logits.size() / classes;
  std::vector<double> avg(classes, 0.0);
  for (std::size_t s = 0; s < k; ++s)
    for (std::size_t c = 0; c < classes; ++c) avg[c] += slot_logits[s * classes + c];
  for (auto& v : avg) v /= static_cast<double>(k);
  return avg;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw ValueError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace {

// Fills one group's N slots; returns the slots that carry the target.
std::vector<std::size_t> fill_group(std::span<const std::int32_t> target, const std::vector<std::vector<std::int32_t>>& others,
                                    std::size_t n, std::size_t seq_len, const EnsembleOptions& options, Rng& rng,
                                    std::vector<std::int32_t>& tokens) {
  if (options.m == 0 || options.m > n) {
    throw ValueError("ensemble: m=" + std::to_string(options.m) + " must be in [1, N=" + std::to_string(n) + "]");
  }
  if (others.size() != options.m - 1) {
    throw ValueError("ensemble: expected " + std::to_string(options.m - 1) + " other instances, got " + std::to_string(others.size()));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (options.permute) shuffle_indices(order, rng);
  // order[slot] < N - m + 1 marks a target slot, otherwise it holds others[order[slot] - (N - m + 1)].
  const std::size_t copies = n - options.m + 1;
  std::vector<std::size_t> target_slots;
  const std::size_t base = tokens.size();
  tokens.resize(base + n * seq_len, vocab::kPad);
  for (std::size_t slot = 0; slot < n; ++slot) {
    std::span<const std::int32_t> src = target;
    if (order[slot] < copies) {
      target_slots.push_back(slot);
    } else {
      src = others[order[slot] - copies];
    }
    const std::size_t len = std::min(seq_len, src.size());
    std::copy_n(src.begin(), len, tokens.begin() + static_cast<std::ptrdiff_t>(base + slot * seq_len));
  }
  return target_slots;
}

}  // namespace

std::size_t ensemble_predict(const MuxModel<float>& model, std::span<const std::int32_t> target,
                             const std::vector<std::vector<std::int32_t>>& others, std::size_t seq_len,
                             const EnsembleOptions& options, Rng& rng, std::vector<double>* averaged) {
  const std::size_t N = model.n(), C = model.spec.num_classes;
  std::vector<std::int32_t> tokens;
  const auto slots = fill_group(target, others, N, seq_len, options, rng, tokens);
  ModelForwardOptions fopts;
  fopts.cls_only = true;
  auto logits = sequence_logits(model_forward(model, tokens, 1, seq_len, fopts).demuxed, model.heads);
  std::vector<double> picked;
  for (auto s : slots)
    for (std::size_t c = 0; c < C; ++c) picked.push_back(logits.data()[s * C + c]);
  auto avg = average_logits(picked, C);
  if (averaged) *averaged = avg;
  return argmax(avg);
}

EvalResult ensemble_evaluate(const MuxModel<float>& model, const Dataset& data, std::size_t seq_len,
                             const EnsembleOptions& options, std::uint64_t seed, std::size_t groups_per_batch) {
  check_task(model, data, Objective::seq_cls);
  if (options.m > 1 && data.size() < 2) throw ValueError("ensemble_evaluate: m > 1 needs at least two examples");
  const std::size_t N = model.n(), C = model.spec.num_classes;
  groups_per_batch = std::max<std::size_t>(1, groups_per_batch);
  Rng rng(seed);
  EvalResult r;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += groups_per_batch) {
    const std::size_t count = std::min(groups_per_batch, data.size() - start);
    std::vector<std::int32_t> tokens;
    std::vector<std::vector<std::size_t>> slots;
    for (std::size_t g = 0; g < count; ++g) {
      std::vector<std::vector<std::int32_t>> others;
      while (others.size() + 1 < options.m) {
        const auto pick = static_cast<std::size_t>(rng.below(data.size()));
        if (pick != start + g) others.push_back(data.examples[pick].tokens);
      }
      slots.push_back(fill_group(data.examples[start + g].tokens, others, N, seq_len, options, rng, tokens));
    }
    ModelForwardOptions fopts;
    fopts.cls_only = true;
    auto logits = sequence_logits(model_forward(model, tokens, count, seq_len, fopts).demuxed, model.heads);
    for (std::size_t g = 0; g < count; ++g) {
      std::vector<double> picked;
      for (auto s : slots[g])
        for (std::size_t c = 0; c < C; ++c) picked.push_back(logits.data()[(g * N + s) * C + c]);
      correct += argmax(average_logits(picked, C)) == static_cast<std::size_t>(data.examples[start + g].label);
    }
    ++r.batches;
  }
  r.scored = data.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

// Checkpoints

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    uint(u);
  }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}
  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[pos + i]) << (8 * i);
    pos += sizeof(U);
    return v;
  }
  float f32() {
    const auto u = uint<std::uint32_t>();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

struct TableEntry {
  std::string name;
  diff::Shape shape;
  std::vector<float> values;
};

json spec_to_json(const ModelSpec& s) {
  const auto& c = s.config;
  return json{{"size", s.size_name},
              {"num_layers", c.num_layers},
              {"hidden_size", c.hidden_size},
              {"ffn_size", c.ffn_size},
              {"num_heads", c.num_heads},
              {"head_size", c.head_size},
              {"max_seq_len", c.max_seq_len},
              {"vocab_size", c.vocab_size},
              {"mux_width", c.mux_width},
              {"dropout", c.dropout},
              {"attention_dropout", c.attention_dropout},
              {"layer_norm_eps", c.layer_norm_eps},
              {"mux", std::string(to_string(s.mux))},
              {"demux", std::string(to_string(s.demux))},
              {"trainable_mux_keys", s.trainable_mux_keys},
              {"num_classes", s.num_classes},
              {"num_tags", s.num_tags}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  auto& c = s.config;
  s.size_name = j.at("size").get<std::string>();
  c.num_layers = j.at("num_layers");
  c.hidden_size = j.at("hidden_size");
  c.ffn_size = j.at("ffn_size");
  c.num_heads = j.at("num_heads");
  c.head_size = j.at("head_size");
  c.max_seq_len = j.at("max_seq_len");
  c.vocab_size = j.at("vocab_size");
  c.mux_width = j.at("mux_width");
  c.dropout = j.at("dropout");
  c.attention_dropout = j.at("attention_dropout");
  c.layer_norm_eps = j.at("layer_norm_eps");
  s.mux = parse_mux_kind(j.at("mux").get<std::string>());
  s.demux = parse_demux_kind(j.at("demux").get<std::string>());
  s.trainable_mux_keys = j.at("trainable_mux_keys");
  s.num_classes = j.at("num_classes");
  s.num_tags = j.at("num_tags");
  return s;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state) {
  json cfg;
  cfg["model"] = spec_to_json(state.model.spec);
  cfg["seeds"] = {{"init", state.seeds.init}, {"data", state.seeds.data}, {"corruption", state.seeds.corruption}};
  json hist = json::array();
  for (const auto& h : state.history) {
    hist.push_back({{"stage", std::string(to_string(h.stage))}, {"objective", std::string(to_string(h.objective))}, {"steps", h.steps}});
  }
  cfg["history"] = hist;
  cfg["rng"] = {{"corruption", state.corruption_rng}, {"dropout", state.dropout_rng}};
  cfg["optimizer"] = {{"step", state.optimizer.step},
                      {"beta1", state.optimizer.beta1},
                      {"beta2", state.optimizer.beta2},
                      {"eps", state.optimizer.eps}};

  std::vector<TableEntry> table;
  auto& model = const_cast<MuxModel<float>&>(state.model);
  model.visit([&](const std::string& name, Tensor<float>& t) {
    table.push_back({"model." + name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  });
  for (const auto& [name, slot] : state.optimizer.slots) {
    table.push_back({"adam.m." + name, {slot.m.size()}, slot.m});
    table.push_back({"adam.v." + name, {slot.v.size()}, slot.v});
  }

  Writer w;
  w.bytes("MUXC", 4);
  w.uint(kCheckpointVersion);
  const std::string cfg_text = cfg.dump();
  w.uint(static_cast<std::uint64_t>(cfg_text.size()));
  w.bytes(cfg_text.data(), cfg_text.size());
  w.uint(static_cast<std::uint64_t>(table.size()));
  std::uint64_t offset = 0;
  for (const auto& e : table) {
    w.str(e.name);
    w.uint(static_cast<std::uint8_t>(1));  // dtype f32
    w.uint(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.uint(static_cast<std::uint64_t>(d));
    w.uint(offset);
    w.uint(static_cast<std::uint64_t>(e.values.size()));
    offset += 4 * e.values.size();
  }
  w.uint(offset);
  for (const auto& e : table)
    for (float f : e.values) w.f32(f);
  w.uint(fnv1a64(w.out));
  return std::move(w.out);
}

TrainState deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "MUXC", 4) != 0) throw FormatError("not a checkpoint: bad magic header");
  if (bytes.size() < 16) throw FormatError("checkpoint truncated");
  Reader tail(bytes.subspan(bytes.size() - 8));
  const auto stored = tail.uint<std::uint64_t>();
  if (stored != fnv1a64(bytes.first(bytes.size() - 8))) throw FormatError("checkpoint checksum mismatch");

  Reader r(bytes.first(bytes.size() - 8));
  r.pos = 4;
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.uint<std::uint64_t>();
  r.need(cfg_len);
  json cfg;
  try {
    cfg = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos), bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + cfg_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  }
  r.pos += cfg_len;

  TrainState st;
  try {
    const auto spec = spec_from_json(cfg.at("model"));
    st.seeds = {cfg.at("seeds").at("init"), cfg.at("seeds").at("data"), cfg.at("seeds").at("corruption")};
    st.model = init_model<float>(spec, st.seeds.init);
    for (const auto& h : cfg.at("history")) {
      st.history.push_back({parse_stage(h.at("stage").get<std::string>()), parse_objective(h.at("objective").get<std::string>()),
                            h.at("steps").get<std::size_t>()});
    }
    st.corruption_rng = cfg.at("rng").at("corruption");
    st.dropout_rng = cfg.at("rng").at("dropout");
    const auto& o = cfg.at("optimizer");
    st.optimizer.step = o.at("step");
    st.optimizer.beta1 = o.at("beta1");
    st.optimizer.beta2 = o.at("beta2");
    st.optimizer.eps = o.at("eps");
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  }

  const auto count = r.uint<std::uint64_t>();
  struct Header {
    std::string name;
    diff::Shape shape;
    std::uint64_t offset, n;
  };
  std::vector<Header> headers;
  for (std::uint64_t i = 0; i < count; ++i) {
    Header h;
    h.name = r.str();
    if (r.uint<std::uint8_t>() != 1) throw FormatError("tensor " + h.name + ": unsupported dtype");
    const auto rank = r.uint<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) h.shape.push_back(r.uint<std::uint64_t>());
    h.offset = r.uint<std::uint64_t>();
    h.n = r.uint<std::uint64_t>();
    if (diff::numel(h.shape) != h.n) throw FormatError("tensor " + h.name + ": shape does not match element count");
    headers.push_back(std::move(h));
  }
  const auto payload_len = r.uint<std::uint64_t>();
  r.need(payload_len);
  const std::size_t payload = r.pos;
  if (payload + payload_len != r.buf.size()) throw FormatError("checkpoint payload length mismatch");

  auto read_values = [&](const Header& h) {
    if (h.offset + 4 * h.n > payload_len) throw FormatError("tensor " + h.name + " overruns the payload");
    Reader p(bytes.subspan(payload + h.offset, 4 * h.n));
    std::vector<float> v(h.n);
    for (auto& f : v) f = p.f32();
    return v;
  };

  std::map<std::string, const Header*> by_name;
  for (const auto& h : headers) by_name[h.name] = &h;
  st.model.visit([&](const std::string& name, Tensor<float>& t) {
    auto it = by_name.find("model." + name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor model." + name);
    if (it->second->shape != t.shape()) {
      throw FormatError("tensor model." + name + " has shape " + diff::shape_str(it->second->shape) + ", expected " +
                        diff::shape_str(t.shape()));
    }
    const auto v = read_values(*it->second);
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  });
  for (const auto& h : headers) {
    if (h.name.rfind("adam.m.", 0) == 0) st.optimizer.slots[h.name.substr(7)].m = read_values(h);
    if (h.name.rfind("adam.v.", 0) == 0) st.optimizer.slots[h.name.substr(7)].v = read_values(h);
  }
  return st;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace muxplm
