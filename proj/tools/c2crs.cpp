// Command-line entry point: synthetic data, training stages, evaluation,
// ablation configs and the conversation server.

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "c2crs/corpus_io.hpp"
#include "c2crs/serve.hpp"
#include "c2crs/synthetic.hpp"
#include "c2crs/trainer.hpp"

namespace fs = std::filesystem;
using namespace c2crs;

namespace {

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw Error("failed to write " + path.string());
}

Corpus load_data(const std::string& dir) {
  if (dir.empty()) throw Error("no data directory given (--data or data.dir in the config)");
  return load_corpus_dir(dir);
}

std::string data_dir_of(const std::string& flag, const CheckpointManifest& info) {
  return flag.empty() ? info.config.data_dir : flag;
}

int cmd_gen_synth(const std::string& out, std::uint64_t seed, int items, int entities, int conversations) {
  Corpus c = generate_synthetic_corpus(items, entities, conversations, seed);
  write_corpus(c, out);
  std::cout << "wrote " << c.conversations.size() << " conversations, " << c.reviews.size() << " review docs, "
            << c.alignment.size() << " alignment triples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& stage, const std::string& data, const std::string& config_path,
              const std::string& init, const std::string& out, int steps, int epochs) {
  TrainConfig config;
  CheckpointManifest init_info;
  if (!init.empty()) init_info = read_manifest(init);
  if (!config_path.empty()) {
    config = load_config(config_path);
  } else if (!init.empty()) {
    config = init_info.config;
  }
  if (!data.empty()) config.data_dir = data;
  if (config.data_dir.empty() && !init.empty()) config.data_dir = init_info.config.data_dir;
  config.data_dir = fs::absolute(config.data_dir).lexically_normal().string();
  Corpus corpus = load_data(config.data_dir);

  StageSpec spec{parse_stage(stage), steps, epochs};
  if (steps == 0 && epochs == 0) {
    spec.epochs = 1;
    for (const auto& s : config.schedule)
      if (s.stage == spec.stage) spec = s;
  }

  C2crsModel<float> model = make_model<float>(config, corpus);
  long start = 0;
  if (!init.empty()) {
    if (!(init_info.shape == shape_of(corpus)) || init_info.vocab_fingerprint != corpus.vocab.fingerprint())
      throw Error("--init checkpoint was trained on a different corpus");
    start = load_checkpoint(init, model.params()).step;
  }
  fs::create_directories(out);
  std::ofstream metrics(fs::path(out) / "metrics.jsonl");
  Trainer<float> trainer(config, corpus, model, start);
  auto report = trainer.run_stage(spec, &metrics);
  save_model(out, model, config, corpus, stage_name(spec.stage), trainer.global_step());
  std::cout << stage_name(spec.stage) << ": " << report.records.size() << " steps, final loss "
            << (report.records.empty() ? 0.0 : report.records.back().loss) << ", checkpoint " << out << "\n";
  if (report.fine_skipped) std::cout << "skipped fine-grained terms on " << report.fine_skipped << " batches\n";
  return 0;
}

int cmd_pipeline(const std::string& config_path, const std::string& data, const std::string& variant,
                 const std::string& out) {
  TrainConfig config = config_path.empty() ? TrainConfig{} : load_config(config_path);
  if (!variant.empty()) config = ablate(config, variant);
  if (!data.empty()) config.data_dir = data;
  config.data_dir = fs::absolute(config.data_dir).lexically_normal().string();
  Corpus corpus = load_data(config.data_dir);
  C2crsModel<float> model = make_model<float>(config, corpus);
  fs::create_directories(out);
  std::ofstream metrics(fs::path(out) / "metrics.jsonl");
  Trainer<float> trainer(config, corpus, model);
  std::string last = "init";
  for (const auto& spec : config.schedule) {
    auto report = trainer.run_stage(spec, &metrics);
    last = stage_name(spec.stage);
    std::cout << last << ": " << report.records.size() << " steps, final loss " << report.records.back().loss << "\n";
  }
  save_model(out, model, config, corpus, last, trainer.global_step());
  auto rec = evaluate_recommendation(model, corpus, trainer.instances());
  std::cout << "train-set " << to_json(rec).dump() << "\n";
  return 0;
}

int cmd_eval_rec(const std::string& data, const std::string& ckpt, const std::string& report, bool exclude_earlier) {
  const auto info = read_manifest(ckpt);
  Corpus corpus = load_data(data_dir_of(data, info));
  auto model = load_model<float>(ckpt, corpus);
  RecEvalOptions opt;
  opt.exclude_earlier = exclude_earlier;
  auto r = evaluate_recommendation(model, corpus, corpus_instances(corpus, model.config()), opt);
  auto j = to_json(r);
  if (!report.empty()) write_json(report, j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_eval_conv(const std::string& data, const std::string& ckpt, const std::string& report, int beam,
                  bool per_sentence) {
  const auto info = read_manifest(ckpt);
  Corpus corpus = load_data(data_dir_of(data, info));
  auto model = load_model<float>(ckpt, corpus);
  DecodeOptions opt;
  opt.max_len = model.config().max_response_len;
  if (beam > 1) {
    opt.mode = DecodeMode::kBeam;
    opt.beam_width = beam;
  }
  auto r = evaluate_generation(model, corpus, corpus_instances(corpus, model.config()), opt, per_sentence);
  auto j = to_json(r);
  fs::path transcript = report.empty() ? fs::path("generations.jsonl") : fs::path(report).parent_path() / "generations.jsonl";
  if (!report.empty()) write_json(report, j);
  std::ofstream gen(transcript);
  for (const auto& g : r.generations)
    gen << nlohmann::ordered_json{{"context_id", g.context_id}, {"response", g.response}}.dump() << "\n";
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_ablate(const std::string& variant, const std::string& config_path, const std::string& out, bool list) {
  if (list) {
    for (const auto& v : ablation_variants()) std::cout << v << "\n";
    return 0;
  }
  TrainConfig config = config_path.empty() ? TrainConfig{} : load_config(config_path);
  const std::string yaml = to_yaml(ablate(config, variant));
  if (out.empty()) {
    std::cout << yaml;
  } else {
    std::ofstream f(out);
    f << yaml;
    if (!f) throw Error("failed to write " + out);
  }
  return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const std::string& ckpt, const std::string& data, const std::string& host, int port) {
  const auto info = read_manifest(ckpt);
  Corpus corpus = load_data(data_dir_of(data, info));
  auto model = load_model<float>(ckpt, corpus);
  ServeOptions opt;
  opt.checkpoint_id = fs::path(ckpt).filename().string() + "@" + std::to_string(info.step);
  opt.decode.max_len = model.config().max_response_len;
  ConversationService service(model, corpus, opt);
  httplib::Server server;
  install_routes(server, service);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cout << "serving " << opt.checkpoint_id << " on http://" << host << ":" << port << std::endl;
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational recommender with coarse-to-fine contrastive pre-training"};
  app.require_subcommand(1);

  std::string out, data, config, init, ckpt, report, stage, variant, host = "127.0.0.1";
  std::uint64_t seed = 1;
  int items = 8, entities = 24, conversations = 16, steps = 0, epochs = 0, beam = 1, port = 8080;
  bool exclude_earlier = false, per_sentence = false, list = false;

  auto* gen = app.add_subcommand("gen-synth", "write a deterministic synthetic corpus");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "random seed");
  gen->add_option("--items", items, "number of items");
  gen->add_option("--entities", entities, "number of entities (items included)");
  gen->add_option("--conversations", conversations, "number of conversations");

  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage, "coarse | fine | rec | conv | multi-task")->required();
  train->add_option("--data", data, "corpus directory");
  train->add_option("--config", config, "YAML config");
  train->add_option("--init", init, "checkpoint to start from");
  train->add_option("--out", out, "output checkpoint directory")->required();
  train->add_option("--steps", steps, "optimizer steps (overrides the config schedule)");
  train->add_option("--epochs", epochs, "epochs (overrides the config schedule)");

  auto* pipeline = app.add_subcommand("pipeline", "run the whole schedule of a config");
  pipeline->add_option("--config", config, "YAML config");
  pipeline->add_option("--data", data, "corpus directory");
  pipeline->add_option("--variant", variant, "ablation variant to apply first");
  pipeline->add_option("--out", out, "output checkpoint directory")->required();

  auto* eval_rec = app.add_subcommand("eval-rec", "recall@k of a checkpoint");
  eval_rec->add_option("--data", data, "corpus directory (default: the checkpoint's)");
  eval_rec->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval_rec->add_option("--report", report, "JSON report path");
  eval_rec->add_flag("--exclude-earlier", exclude_earlier, "drop items recommended earlier in the conversation");

  auto* eval_conv = app.add_subcommand("eval-conv", "distinct-n of generated responses");
  eval_conv->add_option("--data", data, "corpus directory (default: the checkpoint's)");
  eval_conv->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval_conv->add_option("--report", report, "JSON report path; generations.jsonl is written next to it");
  eval_conv->add_option("--beam", beam, "beam width (1 = greedy)");
  eval_conv->add_flag("--per-sentence", per_sentence, "average distinct-n per response");

  auto* abl = app.add_subcommand("ablate", "write the config of an ablation variant");
  abl->add_option("--variant", variant, "variant name, e.g. \"w/o Coarse-Fine\"");
  abl->add_option("--config", config, "base YAML config");
  abl->add_option("--out", out, "output YAML path (default: stdout)");
  abl->add_flag("--list", list, "list the variants");

  auto* serve = app.add_subcommand("serve", "HTTP conversation service");
  serve->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  serve->add_option("--data", data, "corpus directory (default: the checkpoint's)");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_synth(out, seed, items, entities, conversations);
    if (*train) return cmd_train(stage, data, config, init, out, steps, epochs);
    if (*pipeline) return cmd_pipeline(config, data, variant, out);
    if (*eval_rec) return cmd_eval_rec(data, ckpt, report, exclude_earlier);
    if (*eval_conv) return cmd_eval_conv(data, ckpt, report, beam, per_sentence);
    if (*abl) {
      if (!list && variant.empty()) throw Error("--variant is required");
      return cmd_ablate(variant, config, out, list);
    }
    if (*serve) return cmd_serve(ckpt, data, host, port);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
