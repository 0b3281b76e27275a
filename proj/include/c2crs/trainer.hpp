#pragma once

// Stage orchestration, optimisation and evaluation.

#include <cmath>
#include <filesystem>
#include <functional>
#include <ostream>

#include "c2crs/checkpoint.hpp"
#include "c2crs/objectives.hpp"
#include "c2crs/optim.hpp"

namespace c2crs {

/// Parameter prefixes a stage updates. Fine-tuning the generator leaves the
/// graph encoder alone because item scores are computed from its output.
inline std::vector<std::string> trainable_prefixes(Stage stage, bool freeze_encoders) {
  switch (stage) {
    case Stage::kCoarse:
    case Stage::kFine: return {"encoder.", "contrastive."};
    case Stage::kRec: return freeze_encoders ? std::vector<std::string>{"rec."} : std::vector<std::string>{"encoder.rgcn.", "rec."};
    case Stage::kConv:
      return freeze_encoders ? std::vector<std::string>{"decoder."}
                             : std::vector<std::string>{"encoder.conv.", "encoder.review.", "decoder."};
    case Stage::kMultiTask: return {""};
  }
  return {};
}

inline ObjectiveSet stage_objectives(Stage stage, const ModelConfig& cfg) {
  ObjectiveSet o;
  switch (stage) {
    case Stage::kCoarse: o.coarse = true; break;
    case Stage::kFine:
      o.fine = true;
      o.coarse = cfg.coarse_weight > 0;
      o.coarse_weight = cfg.coarse_weight;
      break;
    case Stage::kRec: o.rec = true; break;
    case Stage::kConv: o.gen = true; break;
    case Stage::kMultiTask: o.coarse = o.fine = o.rec = o.gen = true; break;
  }
  return o;
}

/// Instances a stage trains on: contrastive stages need context entities,
/// recommendation needs a target item, generation a target response.
inline std::vector<TrainingInstance> stage_instances(Stage stage, const std::vector<TrainingInstance>& all) {
  std::vector<TrainingInstance> out;
  for (const auto& inst : all) {
    bool keep = true;
    switch (stage) {
      case Stage::kCoarse:
      case Stage::kFine: keep = !inst.context_entities.empty(); break;
      case Stage::kRec: keep = inst.target_item.has_value(); break;
      case Stage::kConv: keep = inst.target_response.has_value(); break;
      case Stage::kMultiTask: break;
    }
    if (keep) out.push_back(inst);
  }
  return out;
}

inline std::vector<TrainingInstance> corpus_instances(const Corpus& corpus, const ModelConfig& cfg) {
  return build_all_instances(corpus, static_cast<std::size_t>(cfg.max_context_len),
                             static_cast<std::size_t>(cfg.max_review_sentences));
}

struct StepRecord {
  long step = 0;
  std::string stage;
  double loss = 0.0;
  std::vector<std::pair<std::string, double>> terms;
  double grad_norm = 0.0;
};

inline nlohmann::ordered_json to_json(const StepRecord& r) {
  nlohmann::ordered_json j = {{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}};
  for (const auto& [name, value] : r.terms) j[name] = value;
  j["grad_norm"] = r.grad_norm;
  return j;
}

struct StageReport {
  Stage stage = Stage::kCoarse;
  std::vector<StepRecord> records;
  long fine_skipped = 0;     // batches with fewer than two aligned triples
  long coarse_skipped = 0;   // batches with fewer than two users
  long empty_batches = 0;    // batches that produced no loss at all
  bool stopped_early = false;
};

/// Returns false to stop the stage after the current step.
using StepCallback = std::function<bool(const StepRecord&)>;

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig config, const Corpus& corpus, C2crsModel<T>& model, long start_step = 0)
      : config_(std::move(config)), corpus_(corpus), model_(model), step_(start_step) {
    config_.validate();
    instances_ = corpus_instances(corpus_, model_.config());
  }

  const TrainConfig& config() const { return config_; }
  const std::vector<TrainingInstance>& instances() const { return instances_; }
  long global_step() const { return step_; }

  /// Optimises one stage with fresh Adam state. Every step is logged to
  /// `metrics` (one JSON object per line) when given.
  StageReport run_stage(const StageSpec& spec, std::ostream* metrics = nullptr, const StepCallback& on_step = {}) {
    StageReport report;
    report.stage = spec.stage;
    const std::string name = stage_name(spec.stage);
    const auto data = stage_instances(spec.stage, instances_);
    if (data.empty()) throw Error("stage " + name + ": no training instances");
    const ObjectiveSet obj = stage_objectives(spec.stage, model_.config());
    const bool contrastive = obj.coarse || obj.fine;
    const auto batch_size = static_cast<std::size_t>(config_.batch_size);

    std::vector<Parameter<T>*> trainable = model_.params().with_prefixes(trainable_prefixes(spec.stage, config_.freeze_encoders));
    Adam<T> adam(trainable, config_.learning_rate);

    const long batches_per_epoch = static_cast<long>((data.size() + batch_size - 1) / batch_size);
    const long target = spec.steps + static_cast<long>(spec.epochs) * batches_per_epoch;
    long done = 0;
    for (int epoch = 0; done < target; ++epoch) {
      const std::uint64_t seed = config_.seed * 1000003ULL + static_cast<std::uint64_t>(spec.stage) * 7919ULL +
                                 static_cast<std::uint64_t>(epoch);
      auto batches = make_batches(data, batch_size, seed, true, contrastive ? BatchMode::kContrastive : BatchMode::kPlain);
      long updates = 0;
      for (const auto& batch : batches) {
        if (done >= target) break;
        ad::Tape<T> tape;
        BatchLoss<T> loss = batch_objective(tape, model_, corpus_, batch, obj);
        if (loss.fine_skipped) ++report.fine_skipped;
        if (loss.coarse_skipped) ++report.coarse_skipped;
        if (loss.terms.empty()) {
          ++report.empty_batches;
          continue;
        }
        ++done;
        ++updates;
        ++step_;
        StepRecord rec{step_, name, static_cast<double>(loss.terms.total.scalar()), {}, 0.0};
        for (const auto& term : loss.terms.terms) {
          const double v = static_cast<double>(term.value.scalar());
          if (!std::isfinite(v))
            throw Error("non-finite loss term '" + term.name + "' at step " + std::to_string(step_) + " of stage " + name);
          rec.terms.emplace_back(term.name, v);
        }
        if (!std::isfinite(rec.loss)) throw Error("non-finite total loss at step " + std::to_string(step_) + " of stage " + name);

        tape.backward(loss.terms.total);
        std::vector<Matrix<T>*> grads;
        grads.reserve(trainable.size());
        for (auto* p : trainable) grads.push_back(tape.gradient(*p));
        rec.grad_norm = clip_global_norm<T>(grads, config_.grad_clip);
        adam.step(grads);

        if (metrics) *metrics << to_json(rec).dump() << "\n";
        report.records.push_back(rec);
        if (on_step && !on_step(report.records.back())) {
          report.stopped_early = true;
          return report;
        }
      }
      if (updates == 0) throw Error("stage " + name + ": no batch produced a loss");
    }
    return report;
  }

  std::vector<StageReport> run_schedule(std::ostream* metrics = nullptr, const StepCallback& on_step = {}) {
    std::vector<StageReport> out;
    for (const auto& spec : config_.schedule) out.push_back(run_stage(spec, metrics, on_step));
    return out;
  }

 private:
  TrainConfig config_;
  const Corpus& corpus_;
  C2crsModel<T>& model_;
  long step_ = 0;
  std::vector<TrainingInstance> instances_;
};

// ---------------------------------------------------------------------------
// Model persistence

template <typename T>
C2crsModel<T> make_model(const TrainConfig& config, const Corpus& corpus) {
  return C2crsModel<T>(config.model, shape_of(corpus), config.seed);
}

template <typename T>
void save_model(const std::filesystem::path& dir, const C2crsModel<T>& model, const TrainConfig& config,
                const Corpus& corpus, const std::string& stage, long step) {
  CheckpointManifest info{config, stage, step, shape_of(corpus), corpus.vocab.fingerprint()};
  info.config.model = model.config();
  save_checkpoint(dir, model.params(), info);
}

/// Rebuilds the model described by a checkpoint for `corpus` and loads its
/// values. The corpus must be the one the checkpoint was trained on.
template <typename T>
C2crsModel<T> load_model(const std::filesystem::path& dir, const Corpus& corpus, CheckpointManifest* manifest = nullptr) {
  CheckpointManifest info = read_manifest(dir);
  if (!(info.shape == shape_of(corpus)))
    throw Error("checkpoint " + dir.string() + " was trained on a corpus of a different shape");
  if (info.vocab_fingerprint != corpus.vocab.fingerprint())
    throw Error("checkpoint " + dir.string() + " was trained with a different vocabulary");
  C2crsModel<T> model(info.config.model, info.shape, info.config.seed);
  load_checkpoint(dir, model.params());
  if (manifest) *manifest = info;
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

struct RecEvalOptions {
  std::vector<int> ks = {1, 10, 50};
  /// Drop items already recommended earlier in the conversation from the ranking.
  bool exclude_earlier = false;
};

template <typename T>
RecEvalReport evaluate_recommendation(const C2crsModel<T>& model, const Corpus& corpus,
                                      const std::vector<TrainingInstance>& instances, const RecEvalOptions& opt = {}) {
  Predictor<T> predictor(model, corpus);
  std::vector<std::vector<EntityId>> rankings;
  std::vector<EntityId> targets;
  for (const auto& inst : instances) {
    if (!inst.target_item) continue;
    auto ranked = predictor.recommend(inst.context_entities).ranked_items;
    if (opt.exclude_earlier) {
      std::erase_if(ranked, [&](EntityId e) {
        return std::find(inst.earlier_recommendations.begin(), inst.earlier_recommendations.end(), e) !=
               inst.earlier_recommendations.end();
      });
    }
    rankings.push_back(std::move(ranked));
    targets.push_back(*inst.target_item);
  }
  return recall_at_k(rankings, targets, opt.ks);
}

inline nlohmann::ordered_json to_json(const RecEvalReport& r) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : r.recall_at) j["recall@" + std::to_string(k)] = v;
  j["n"] = r.n_instances;
  return j;
}

struct GenerationRecord {
  std::string context_id;
  std::vector<TokenId> tokens;
  std::string response;
};

struct GenEvalReport {
  std::map<int, double> distinct;
  std::size_t n_responses = 0;
  std::vector<GenerationRecord> generations;
};

template <typename T>
GenEvalReport evaluate_generation(const C2crsModel<T>& model, const Corpus& corpus,
                                  const std::vector<TrainingInstance>& instances, const DecodeOptions& decode_opt = {},
                                  bool per_sentence = false) {
  Predictor<T> predictor(model, corpus);
  GenEvalReport report;
  std::vector<std::vector<TokenId>> responses;
  for (const auto& inst : instances) {
    if (!inst.target_response) continue;
    auto out = predictor.generate(inst.context_token_ids, inst.context_entities, inst.review_refs, decode_opt);
    responses.push_back(out.tokens);
    report.generations.push_back(
        {inst.conversation_id + ":" + std::to_string(inst.turn), out.tokens, corpus.vocab.decode(out.tokens)});
  }
  report.n_responses = responses.size();
  for (int n : {2, 3, 4}) report.distinct[n] = distinct_n(responses, n, per_sentence);
  return report;
}

inline nlohmann::ordered_json to_json(const GenEvalReport& r) {
  nlohmann::ordered_json j;
  for (const auto& [n, v] : r.distinct) j["distinct-" + std::to_string(n)] = v;
  j["n_responses"] = r.n_responses;
  return j;
}

struct AlignmentStats {
  double loss = 0.0;                  // coarse loss over all users in one batch
  double mean_positive_cosine = 0.0;  // over every enabled view pair
  std::size_t n_users = 0;
};

/// Coarse alignment of the projected views over every instance with
/// context entities, evaluated as a single batch.
template <typename T>
AlignmentStats coarse_alignment(const C2crsModel<T>& model, const Corpus& corpus,
                                const std::vector<TrainingInstance>& instances) {
  const auto data = stage_instances(Stage::kCoarse, instances);
  AlignmentStats stats;
  if (data.size() < 2) return stats;
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  Batch batch = make_batch(data, rows);
  ad::Tape<T> t(false);
  ObjectiveSet obj;
  obj.coarse = true;
  BatchLoss<T> loss = batch_objective(t, model, corpus, batch, obj);
  stats.loss = loss.terms.empty() ? 0.0 : static_cast<double>(loss.terms.total.scalar());
  stats.n_users = data.size();

  // Recompute the projected views for the cosine statistic.
  const ModelConfig& cfg = model.config();
  ad::Var<T> nodes = model.graph().nodes(t, corpus.kg);
  SentenceCache<T> cache(model, corpus);
  std::vector<Vector<T>> c, g, r;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto ctx = encode_context(t, model, cache, nodes, batch.context_row(i), {}, batch.entities[i], batch.reviews[i]);
    c.push_back(model.project(t, View::kConversation, ctx.conv).value().col(0));
    g.push_back(model.project(t, View::kGraph, ctx.graph.vector).value().col(0));
    r.push_back(model.project(t, View::kReview, ctx.review.vector).value().col(0));
  }
  auto mean_cos = [](const std::vector<Vector<T>>& a, const std::vector<Vector<T>>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      acc += static_cast<double>(a[i].dot(b[i]) / (a[i].norm() * b[i].norm()));
    return acc / static_cast<double>(a.size());
  };
  double acc = 0.0;
  int pairs = 0;
  if (cfg.use_conversation_view && cfg.use_kg_view) acc += mean_cos(c, g), ++pairs;
  if (cfg.use_conversation_view && cfg.use_review_view) acc += mean_cos(c, r), ++pairs;
  if (cfg.use_kg_view && cfg.use_review_view) acc += mean_cos(g, r), ++pairs;
  stats.mean_positive_cosine = pairs ? acc / pairs : 0.0;
  return stats;
}

}  // namespace c2crs
