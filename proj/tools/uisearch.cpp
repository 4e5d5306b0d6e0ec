// uisearch: ingest, train, evaluate, benchmark and serve a screen index.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "uisearch/service.hpp"
#include "uisearch/synthgen.hpp"

namespace fs = std::filesystem;
using namespace uisearch;

namespace {

service::AppConfig load_config(const std::string& path) {
  auto cfg = path.empty() ? service::AppConfig{} : service::AppConfig::load(path);
  spdlog::set_level(spdlog::level::from_str(cfg.log_level));
  return cfg;
}

index::HybridIndex load_index(const service::AppConfig& cfg) {
  if (!fs::exists(cfg.index_path)) throw std::runtime_error("no index at " + cfg.index_path.string());
  return index::HybridIndex::load(cfg.index_path);
}

void emit(const nlohmann::json& j, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out);
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("cannot write " + out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structural search over UI screen manifests"};
  app.require_subcommand(1);
  std::string config;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config, "JSON configuration file")->check(CLI::ExistingFile);
  };

  std::string dir, out, suite, templates_dir, spread_out = "spread";
  bool resume = false, approximate = false;
  int port = 0;
  std::size_t repeats = 5, per_template = 100;
  int epochs = 0;

  auto* ingest = app.add_subcommand("ingest", "Encode a directory of manifests into the index");
  with_config(ingest);
  ingest->add_option("dir", dir, "Manifest directory")->required();

  auto* train = app.add_subcommand("train", "Train the encoder on a directory of manifests");
  with_config(train);
  train->add_option("dir", dir, "Manifest directory")->required();
  train->add_flag("--resume", resume, "Continue from the checkpoint's optimizer state");
  train->add_option("--log", out, "Epoch log (JSON lines)");
  train->add_option("--epochs", epochs, "Override the configured epoch count");

  auto* spread = app.add_subcommand("eval-spread", "Pairwise cosine spread of the structural embeddings");
  with_config(spread);
  spread->add_option("-o,--out", spread_out, "Directory for spread.json, spread.csv, spread.svg");

  auto* bench = app.add_subcommand("bench", "Latency percentiles per query kind");
  with_config(bench);
  bench->add_option("suite", suite, "Query suite (JSON lines)")->required();
  bench->add_option("--repeats", repeats, "Warm runs per query")->default_val(5);
  bench->add_flag("--approximate", approximate, "Use the IVF index for structural search");
  bench->add_option("-o,--out", out, "Report path (default stdout)");

  auto* serve = app.add_subcommand("serve", "Serve the /v1 HTTP API");
  with_config(serve);
  serve->add_option("--port", port, "Override the configured port")->check(CLI::Range(1, 65535));

  auto* save = app.add_subcommand("save-index", "Seal, rebuild the IVF and write the index");
  with_config(save);
  save->add_option("-o,--out", out, "Destination (default: the configured index path)");

  auto* load = app.add_subcommand("load-index", "Verify an index file and print its summary");
  with_config(load);
  load->add_option("path", dir, "Index file (default: the configured index path)");

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic manifest corpus");
  with_config(synth_cmd);
  synth_cmd->add_option("-o,--out", out, "Output directory for manifests");
  synth_cmd->add_option("-n,--per-template", per_template, "Screens per template")->default_val(100);
  synth_cmd->add_option("--templates", templates_dir, "Template fixture directory (default: built-in)");
  synth_cmd->add_option("--write-templates", dir, "Write the built-in templates to this directory");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = load_config(config);

    if (*ingest) {
      const auto rep = service::cmd_ingest(dir, cfg);
      std::cout << service::to_json(rep).dump(2) << "\n";
      return rep.skipped.empty() ? 0 : 2;
    }
    if (*train) {
      auto c = cfg;
      if (epochs > 0) c.train.epochs = epochs;
      const auto res = service::cmd_train(dir, c, {resume, out});
      const auto counts = nn::count_parameters(res.model);
      std::cout << nlohmann::json{{"checkpoint", c.model_path.string()},
                                  {"epochs", res.optimizer.epoch},
                                  {"parameters",
                                   {{"gat1", counts.gat1},
                                    {"gat2", counts.gat2},
                                    {"gcn", counts.gcn},
                                    {"projection", counts.projection},
                                    {"core", counts.core()}}},
                                  {"final_loss", res.log.empty() ? 0.0 : res.log.back().total}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*spread) {
      const auto idx = load_index(cfg);
      const auto r = service::cmd_eval_spread(idx, spread_out);
      auto j = learn::to_json(r);
      j["collapsed"] = r.collapsed();
      std::cout << j.dump(2) << "\n";
      if (r.collapsed()) spdlog::warn("collapse: std {:.4f} below {}", r.std, learn::kCollapseStd);
      return 0;
    }
    if (*bench) {
      const auto idx = load_index(cfg);
      std::optional<nn::EncoderModel> model;
      if (fs::exists(cfg.model_path)) model = nn::load_checkpoint(cfg.model_path);
      service::BenchOptions opts{repeats, cfg.planner};
      opts.planner.approximate = opts.planner.approximate || approximate;
      const auto rep = service::cmd_bench(idx, service::load_suite(suite), opts, model ? &*model : nullptr,
                                          cfg.make_embedder());
      emit(service::to_json(rep), out);
      return 0;
    }
    if (*serve) {
      auto c = cfg;
      if (port) c.port = port;
      return service::cmd_serve(c);
    }
    if (*save) {
      auto idx = load_index(cfg);
      idx.seal();
      if (!idx.empty()) idx.build_ivf();
      const fs::path dest = out.empty() ? cfg.index_path : fs::path(out);
      idx.save(dest);
      std::cout << nlohmann::json{{"path", dest.string()}, {"size", idx.size()}, {"nlist", idx.ivf() ? idx.ivf()->nlist() : 0}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*load) {
      const fs::path src = dir.empty() ? cfg.index_path : fs::path(dir);
      const auto idx = index::HybridIndex::load(src);
      const auto mem = idx.memory();
      std::cout << nlohmann::json{{"path", src.string()},
                                  {"size", idx.size()},
                                  {"structural_metric", index::metric_name(idx.options().structural_metric)},
                                  {"intent_labels", idx.options().intent_labels},
                                  {"ivf", {{"present", idx.has_ivf()}, {"fresh", idx.ivf_fresh()}}},
                                  {"memory", {{"dense_bytes", mem.dense_bytes}, {"quantized_bytes", mem.quantized_bytes}}}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*synth_cmd) {
      if (!dir.empty()) {
        synth::write_templates(dir, synth::default_templates());
        spdlog::info("wrote {} templates to {}", synth::default_templates().size(), dir);
      }
      if (out.empty()) return 0;
      const auto specs = templates_dir.empty() ? synth::default_templates() : synth::load_templates(templates_dir);
      fs::create_directories(out);
      const auto corpus = synth::generate_corpus(specs, per_template);
      for (const auto& m : corpus) {
        std::ofstream f(fs::path(out) / (m.screen_id + ".json"));
        f << graph::dump_manifest(m) << "\n";
        if (!f) throw std::runtime_error("cannot write " + m.screen_id);
      }
      spdlog::info("wrote {} manifests to {}", corpus.size(), out);
      return 0;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
