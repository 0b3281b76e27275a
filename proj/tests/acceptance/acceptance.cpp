// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <thread>

#include "../support.hpp"
#include "c2crs/serve.hpp"
#include "c2crs/trainer.hpp"

using namespace c2crs;
using namespace c2crs::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const char* title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  if (!o.pass) ++failures;
  std::printf("%s %2d %s:%s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.str().c_str(), seconds_since(t0));
  std::fflush(stdout);
}

Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix<double> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

Batch whole_batch(const std::vector<TrainingInstance>& data) {
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return make_batch(data, rows);
}

// ---------------------------------------------------------------------------

void gradient_suite(Outcome& o) {
  const double tol = 1e-4;
  const int coords = 50;
  auto record = [&](const char* name, const GradCheck& r) {
    o.detail << " " << name << " " << r.max_rel_err << "/" << r.checked;
    o.require(r.checked >= coords && r.max_rel_err <= tol, std::string(name) + " worst " + r.worst);
  };

  Rng rng(1);
  ParamStore<double> raw;
  auto* x = raw.add("x", random_matrix(4, 3, rng));
  auto* y = raw.add("y", random_matrix(4, 3, rng));
  record("info_nce", check_gradients(raw, [&](ad::Tape<double>& t) { return info_nce(t.param(*x), t.param(*y), 0.5); }, coords, 2));

  Corpus c = tiny_corpus();
  ModelConfig cfg = tiny_model_config();
  C2crsModel<double> model(cfg, shape_of(c), 7);
  const auto instances = build_all_instances(c, 64, static_cast<std::size_t>(cfg.max_review_sentences));
  const Batch entity_batch = whole_batch(stage_instances(Stage::kCoarse, instances));
  const Batch all_batch = whole_batch(instances);
  auto through_model = [&](const char* name, const Batch& batch, ObjectiveSet obj, std::uint64_t seed) {
    auto loss = [&](ad::Tape<double>& t) {
      auto l = batch_objective(t, model, c, batch, obj);
      if (l.terms.empty()) throw Error(std::string(name) + ": batch produced no loss");
      return l.terms.total;
    };
    record(name, check_gradients(model.params(), loss, coords, seed));
  };
  ObjectiveSet coarse, fine, rec, gen;
  coarse.coarse = true;
  fine.fine = true;
  rec.rec = true;
  gen.gen = true;
  through_model("coarse_loss", entity_batch, coarse, 3);
  through_model("fine_loss", entity_batch, fine, 4);
  through_model("rec_loss", all_batch, rec, 5);
  through_model("gen_loss", all_batch, gen, 6);
}

void closed_forms(Outcome& o) {
  auto near = [&](const char* name, double got, double want) {
    o.detail << " " << name << "=" << got;
    o.require(std::abs(got - want) <= 1e-6, name);
  };
  Matrix<double> one(3, 1);
  one << 0.2, -1, 4;
  near("singleton", info_nce<double>(one, Matrix<double>(one * -1.0), 0.07), 0.0);
  Matrix<double> same = Matrix<double>::Ones(3, 4);
  near("uniform", info_nce<double>(same, same, 0.07), std::log(4.0));
  Matrix<double> sep(2, 2);
  sep << 1, -1, 0, 0;
  near("separable", info_nce<double>(sep, sep, 1.0), std::log(1.0 + std::exp(-2.0)));

  ad::Tape<double> t(false);
  near("rec_uniform", rec_loss(t.constant(Matrix<double>::Zero(4, 2)), std::vector<int>{1, 3}).scalar(), std::log(4.0));
  near("gen_uniform", gen_loss(t.constant(Matrix<double>::Zero(8, 5)), {5, 6, 7, 5, 3}, std::vector<double>(5, 1.0)).scalar(),
       std::log(8.0));
}

void infonce_initialisation(Outcome& o) {
  // Cosines of independent random directions shrink like 1/sqrt(d); the
  // per-term value approaches log b once d * tau^2 is large, so the check
  // runs in a wide space.
  const Eigen::Index b = 32;
  const double tau = 0.07, target = std::log(32.0);
  auto mean_terms = [&](Eigen::Index d) {
    std::vector<double> sums(3, 0.0);
    for (int seed = 1; seed <= 10; ++seed) {
      Rng rng(static_cast<std::uint64_t>(seed));
      ad::Tape<double> t(false);
      auto view = [&] {
        Matrix<double> m = random_matrix(d, b, rng);
        return t.constant(Matrix<double>(m.colwise().normalized()));
      };
      auto c = view(), g = view(), r = view();
      auto terms = coarse_loss(c, g, r, tau, ViewSelection{});
      for (std::size_t k = 0; k < 3; ++k) sums[k] += terms.terms[k].value.scalar() / 10.0;
    }
    return sums;
  };
  const auto wide = mean_terms(1024);
  for (std::size_t k = 0; k < 3; ++k) {
    o.detail << " term" << k << "=" << wide[k];
    o.require(std::abs(wide[k] - target) <= 0.2, "term " + std::to_string(k));
  }
  o.detail << " (d=1024, log 32=" << target << "; at d=128 term0=" << mean_terms(128)[0] << ")";
}

TrainConfig paper_width_config(int d) {
  TrainConfig cfg;
  cfg.model.d_conv = d;
  cfg.model.ffn_width = d;
  cfg.model.d_rec = std::max(8, d * 128 / 300);
  cfg.model.d_cl = cfg.model.d_rec;
  return cfg;
}

void contrastive_alignment(Outcome& o) {
  Corpus c = generate_synthetic_corpus(8, 24, 16, 1);
  TrainConfig cfg = paper_width_config(300);
  cfg.batch_size = 8;
  cfg.seed = 1;
  auto model = make_model<float>(cfg, c);
  Trainer<float> trainer(cfg, c, model);
  const auto before = coarse_alignment(model, c, trainer.instances());
  const auto t0 = Clock::now();
  trainer.run_stage({Stage::kCoarse, 300, 0});
  const double secs = seconds_since(t0);
  const auto after = coarse_alignment(model, c, trainer.instances());
  const double reduction = 1.0 - after.loss / before.loss;
  const double gain = after.mean_positive_cosine - before.mean_positive_cosine;
  o.detail << " L_coarse " << before.loss << " -> " << after.loss << " (" << 100 * reduction << "% lower), cosine "
           << before.mean_positive_cosine << " -> " << after.mean_positive_cosine << ", train " << secs << "s";
  o.require(reduction >= 0.5, "loss reduction >= 50%");
  o.require(gain >= 0.3, "cosine gain >= 0.3");
  o.require(secs < 180, "runtime < 3 min");
}

void overfit_memorisation(Outcome& o) {
  Corpus c = generate_synthetic_corpus(8, 24, 16, 1);
  TrainConfig cfg = paper_width_config(300);
  cfg.batch_size = 8;
  cfg.seed = 1;
  auto model = make_model<float>(cfg, c);
  Trainer<float> trainer(cfg, c, model);
  const auto t0 = Clock::now();
  trainer.run_stage({Stage::kCoarse, 100, 0});
  trainer.run_stage({Stage::kFine, 100, 0});
  long steps = 0, reached = -1;
  double r1 = evaluate_recommendation(model, c, trainer.instances()).recall_at[1];
  if (r1 == 1.0) reached = 0;
  if (reached < 0) {
    trainer.run_stage({Stage::kRec, 500, 0}, nullptr, [&](const StepRecord&) {
      ++steps;
      r1 = evaluate_recommendation(model, c, trainer.instances()).recall_at[1];
      if (r1 == 1.0) reached = steps;
      return reached < 0;
    });
  }
  const double secs = seconds_since(t0);
  o.detail << " R@1=" << r1 << " after " << (reached < 0 ? steps : reached) << " rec steps, " << secs << "s";
  o.require(reached >= 0, "R@1 = 1.0 within 500 steps");
  o.require(secs < 300, "runtime < 5 min");
}

void ablation_direction(Outcome& o) {
  int wins = 0;
  for (int seed = 1; seed <= 3; ++seed) {
    Corpus c = generate_synthetic_corpus(40, 120, 80, static_cast<std::uint64_t>(seed));
    TrainConfig cfg = paper_width_config(64);
    cfg.batch_size = 16;
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.schedule = {{Stage::kCoarse, 100, 0}, {Stage::kFine, 100, 0}, {Stage::kRec, 30, 0}};
    double r10[2];
    int k = 0;
    for (const char* variant : {"full", "w/o Coarse-Fine"}) {
      TrainConfig v = ablate(cfg, variant);
      auto model = make_model<float>(v, c);
      Trainer<float> trainer(v, c, model);
      trainer.run_schedule();
      r10[k++] = evaluate_recommendation(model, c, trainer.instances()).recall_at[10];
    }
    o.detail << " seed" << seed << " " << r10[0] << " vs " << r10[1];
    if (r10[0] >= r10[1]) ++wins;
  }
  o.detail << " (full >= w/o Coarse-Fine in " << wins << "/3)";
  o.require(wins >= 2, "full >= ablated in at least 2 of 3 seeds");
}

void metric_oracles(Outcome& o) {
  std::vector<std::vector<EntityId>> rankings;
  std::vector<EntityId> targets;
  for (int rank : {1, 2, 11, 51, 4}) {
    std::vector<EntityId> r(60);
    std::iota(r.begin(), r.end(), 0);
    rankings.push_back(r);
    targets.push_back(r[static_cast<std::size_t>(rank - 1)]);
  }
  auto ex = recall_at_k(rankings, targets);
  o.require(ex.recall_at[1] == 0.2 && ex.recall_at[10] == 0.6 && ex.recall_at[50] == 0.8, "recall worked example");
  o.require(distinct_n({{1, 2, 1, 2}}, 2) == 2.0 / 3.0, "distinct worked example");

  Rng rng(99);
  int recall_ok = 0, distinct_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n_items = 2 + rng.index(80), n = 1 + rng.index(15);
    std::vector<std::vector<EntityId>> rk;
    std::vector<EntityId> tg;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<EntityId> r(n_items);
      std::iota(r.begin(), r.end(), 0);
      rng.shuffle(r.begin(), r.end());
      rk.push_back(r);
      tg.push_back(static_cast<EntityId>(rng.index(n_items)));
    }
    const std::vector<int> ks = {1, 10, 50};
    auto got = recall_at_k(rk, tg, ks);
    auto want = reference_recall(rk, tg, ks);
    if (got.recall_at == want) ++recall_ok;

    std::vector<std::vector<TokenId>> responses(1 + rng.index(6));
    for (auto& r : responses) {
      r.resize(rng.index(10));
      for (auto& tkn : r) tkn = static_cast<TokenId>(rng.index(5));
    }
    bool same = true;
    for (int m : {2, 3, 4}) same = same && distinct_n(responses, m) == reference_distinct(responses, m);
    if (same) ++distinct_ok;
  }
  o.detail << " recall " << recall_ok << "/100, distinct " << distinct_ok << "/100, worked examples checked";
  o.require(recall_ok == 100, "recall oracle");
  o.require(distinct_ok == 100, "distinct oracle");
}

void instance_weighting(Outcome& o) {
  // Vocabulary with one frequent (10000) and one rare (50) token.
  Vocabulary vocab = Vocabulary::from_counts({{"frequent", 10000}, {"rare", 50}, {"other", 3}});
  const TokenId frequent = vocab.id("frequent"), rare = vocab.id("rare");
  const std::vector<TokenId> targets = {frequent, rare};
  const auto weights = token_weights(targets, vocab, 100, 0.1);

  Rng rng(8);
  ParamStore<double> ps;
  auto* logits = ps.add("logits", random_matrix(static_cast<Eigen::Index>(vocab.size()), 2, rng));
  auto grad = [&](const std::vector<double>& w) {
    ad::Tape<double> t;
    t.backward(gen_loss(t.param(*logits), targets, w));
    return Matrix<double>(*t.gradient(*logits));
  };
  const Matrix<double> weighted = grad(weights), plain = grad({1.0, 1.0});
  const double ratio = weighted.col(0).norm() / plain.col(0).norm();
  const double rare_ratio = weighted.col(1).norm() / plain.col(1).norm();
  o.detail << " f=10000 ratio " << ratio << ", f=50 ratio " << rare_ratio;
  o.require(std::abs(ratio - 0.1) <= 1e-4, "frequent ratio 0.1");
  o.require(weighted.col(1) == plain.col(1), "rare token unaffected");
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.model = tiny_model_config();
  cfg.model.d_conv = cfg.model.d_rec = cfg.model.d_cl = 16;
  cfg.model.ffn_width = 16;
  cfg.batch_size = 4;
  cfg.seed = 5;
  cfg.schedule = {{Stage::kCoarse, 10, 0}, {Stage::kFine, 10, 0}, {Stage::kRec, 10, 0}, {Stage::kConv, 10, 0}};
  return cfg;
}

void determinism_and_persistence(Outcome& o) {
  Corpus c = generate_synthetic_corpus(6, 16, 8, 3);
  const TrainConfig cfg = toy_config();
  auto train = [&] {
    auto model = make_model<float>(cfg, c);
    std::vector<double> curve;
    Trainer<float>(cfg, c, model).run_schedule(nullptr, [&](const StepRecord& r) {
      curve.push_back(r.loss);
      return true;
    });
    return std::make_pair(std::move(model), curve);
  };
  auto [m1, curve1] = train();
  auto [m2, curve2] = train();
  o.require(curve1 == curve2, "identical loss curves");
  o.require(parameter_blob(m1.params()) == parameter_blob(m2.params()), "identical parameters");

  const auto dir = std::filesystem::temp_directory_path() / "c2crs_acceptance_ckpt";
  std::filesystem::remove_all(dir);
  save_model(dir, m1, cfg, c, "conv", static_cast<long>(curve1.size()));
  auto loaded = load_model<float>(dir, c);
  Predictor<float> p0(m1, c), p1(loaded, c);
  DecodeOptions opt;
  opt.max_len = 8;
  int identical = 0, total = 0;
  for (const auto& inst : build_all_instances(c, 256, 8)) {
    ++total;
    auto a = p0.recommend(inst.context_entities), b = p1.recommend(inst.context_entities);
    auto ga = p0.generate(inst.context_token_ids, inst.context_entities, inst.review_refs, opt);
    auto gb = p1.generate(inst.context_token_ids, inst.context_entities, inst.review_refs, opt);
    if (a.scores == b.scores && a.ranked_items == b.ranked_items && ga.step_probabilities == gb.step_probabilities &&
        ga.tokens == gb.tokens)
      ++identical;
  }
  o.detail << " " << curve1.size() << " steps reproduced exactly, forward outputs identical on " << identical << "/" << total
           << " contexts after reload";
  o.require(identical == total, "bit-identical forward outputs");
  std::filesystem::remove_all(dir);
}

void serve_contract(Outcome& o) {
  Corpus c = generate_synthetic_corpus(6, 16, 8, 3);
  const TrainConfig cfg = toy_config();
  const auto dir = std::filesystem::temp_directory_path() / "c2crs_acceptance_serve";
  std::filesystem::remove_all(dir);
  {
    auto model = make_model<float>(cfg, c);
    Trainer<float>(cfg, c, model).run_schedule();
    save_model(dir, model, cfg, c, "conv", 40);
  }
  auto model = load_model<float>(dir, c);
  ServeOptions opt;
  opt.checkpoint_id = dir.string();
  ConversationService service(model, c, opt);
  httplib::Server server;
  install_routes(server, service);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);

  const int k = 5;
  const std::vector<std::string> script = {"hi i want a movie like movie2", "something with attr1", "thanks"};
  std::vector<std::vector<nlohmann::json>> transcripts(2);
  for (int s = 0; s < 2; ++s) {
    for (const auto& u : script) {
      nlohmann::json body = {{"session_id", "acceptance-" + std::to_string(s)}, {"utterance", u}, {"k", k}};
      auto res = client.Post("/api/converse", body.dump(), "application/json");
      if (!res || res->status != 200) {
        o.require(false, "converse request");
        continue;
      }
      auto j = nlohmann::json::parse(res->body);
      o.require(!j.at("response").get<std::string>().empty(), "non-empty response");
      o.require(j.at("recommendations").size() == static_cast<std::size_t>(k), "exactly k items");
      for (const auto& rec : j.at("recommendations")) o.require(rec.contains("score"), "scored items");
      j.erase("session_id");
      transcripts[static_cast<std::size_t>(s)].push_back(j);
    }
  }
  o.require(transcripts[0] == transcripts[1], "identical sessions agree");
  auto health = client.Get("/api/health");
  o.require(health && health->status == 200, "health");
  server.stop();
  th.join();
  std::filesystem::remove_all(dir);
  if (!transcripts[0].empty())
    o.detail << " " << script.size() << " turns x 2 sessions, k=" << k << ", first response \""
             << transcripts[0][0]["response"].get<std::string>() << "\"; built without the chat UI";
}

}  // namespace

int main() {
  report(1, "gradient suite", gradient_suite);
  report(2, "closed-form loss values", closed_forms);
  report(3, "InfoNCE initialisation", infonce_initialisation);
  report(4, "contrastive alignment", contrastive_alignment);
  report(5, "overfit memorisation", overfit_memorisation);
  report(6, "ablation direction", ablation_direction);
  report(7, "metric oracles", metric_oracles);
  report(8, "instance weighting", instance_weighting);
  report(9, "determinism and persistence", determinism_and_persistence);
  report(10, "serve contract", serve_contract);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
