#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "amdim/eval.hpp"
#include "amdim/trainer.hpp"

namespace fs = std::filesystem;
using namespace amdim;

namespace {

struct GlobalFlags {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

void apply_overrides(RunConfig& cfg, const GlobalFlags& g) {
  if (g.seed_set) cfg.seed = g.seed;
  if (!g.out.empty()) cfg.out_dir = g.out;
}

template <typename T>
int do_train(RunConfig cfg, const std::string& resume) {
  auto out = run_training<T>(cfg, resume, &std::cout);
  std::cout << "\n" << summarize_metrics(out.metrics);
  std::cout << "checkpoint: " << out.checkpoint_path << "\n";
  std::cout << "metrics: " << out.metrics_path << "\n";
  return 0;
}

// rebuild the training state recorded in a checkpoint's config echo
template <typename T>
Trainer<T> restore(const Checkpoint& ckpt, const GlobalFlags& g, RunConfig* cfg_out) {
  RunConfig cfg = parse_run_config(ckpt.config_json);
  apply_overrides(cfg, g);
  Trainer<T> trainer(cfg);
  trainer.load(ckpt);
  if (cfg_out) *cfg_out = cfg;
  return trainer;
}

template <typename T>
int do_probe(const Checkpoint& ckpt, const GlobalFlags& g, const std::string& kind) {
  RunConfig cfg;
  Trainer<T> trainer = restore<T>(ckpt, g, &cfg);
  FeatureTable<T> table = extract_features(trainer.enc, trainer.ds);
  ProbeConfig pc;
  pc.kind = kind;
  pc.seed = cfg.seed;
  auto res = train_probe(table, trainer.ds.labels, trainer.ds.num_classes, pc);
  std::cout << "probe kind: " << pc.kind << "\n"
            << "optimizer: adam lr " << pc.lr << ", " << pc.epochs << " epochs, weight decay "
            << pc.weight_decay << "\n"
            << "train accuracy: " << res.train_accuracy << "\n"
            << "held-out accuracy: " << res.accuracy << "\n";
  // line-delimited results with the pinned knobs as metadata
  fs::create_directories(cfg.out_dir);
  const std::string results = (fs::path(cfg.out_dir) / "probe-results.jsonl").string();
  std::ofstream out(results, std::ios::app);
  nlohmann::json meta = {{"kind", pc.kind},   {"hidden", pc.hidden},
                         {"epochs", pc.epochs}, {"lr", pc.lr},
                         {"weight_decay", pc.weight_decay}, {"seed", pc.seed}};
  out << nlohmann::json{{"metric", "train_accuracy"}, {"value", res.train_accuracy},
                        {"probe", meta}}
             .dump()
      << "\n";
  out << nlohmann::json{{"metric", "holdout_accuracy"}, {"value", res.accuracy},
                        {"probe", meta}}
             .dump()
      << "\n";
  std::cout << "results: " << results << "\n";
  return 0;
}

template <typename T>
int do_retrieve(const Checkpoint& ckpt, const GlobalFlags& g, std::int64_t query,
                std::int64_t k) {
  RunConfig cfg;
  Trainer<T> trainer = restore<T>(ckpt, g, &cfg);
  FeatureTable<T> table = extract_features(trainer.enc, trainer.ds);
  RetrievalResult res = knn_retrieve(trainer.enc, trainer.ds, table, query, k);
  fs::create_directories(cfg.out_dir);
  std::cout << "query " << res.query_id << "\n";
  for (size_t i = 0; i < res.ids.size(); ++i) {
    const std::string stem =
        (fs::path(cfg.out_dir) / ("heatmap-q" + std::to_string(query) + "-n" +
                                  std::to_string(res.ids[i])))
            .string();
    write_pgm(stem + ".pgm", res.heatmaps[i], 7, 7);
    write_grid_text(stem + ".tsv", res.heatmaps[i], 7, 7);
    std::cout << "  rank " << i + 1 << ": id " << res.ids[i] << " cosine " << res.sims[i]
              << " heatmap " << stem << ".pgm\n";
  }
  return 0;
}

int do_mi_check(double rho, std::int64_t dim, std::int64_t batch, std::int64_t steps,
                std::uint64_t seed) {
  MIValidation res = synthetic_mi_validation(dim, rho, batch, steps, seed);
  std::cout << "analytic MI: " << res.analytic << " nats\n"
            << "NCE bound estimate: " << res.estimate << " nats\n"
            << "ln K: " << res.ln_k << " nats\n"
            << "bound respected on every step: " << (res.bound_ok ? "yes" : "no") << "\n";
  return 0;
}

int do_rf_audit(const RunConfig& cfg) {
  Encoder<float> enc(cfg.encoder);
  const auto table = encoder_stage_table(cfg.encoder.input_size, cfg.encoder.ndf);
  std::cout << "stage\tkernel\tstride\tcin\tcout\tout\n";
  for (size_t i = 0; i < table.size(); ++i)
    std::cout << i << "\t" << table[i].w << "\t" << table[i].s << "\t" << table[i].cin << "\t"
              << table[i].cout << "\t" << table[i].out << "\n";
  for (std::int64_t d : {7, 5, 1}) {
    std::cout << "\nreceptive fields, d=" << d << " (top left bottom right)\n";
    for (std::int64_t i = 0; i < d; ++i) {
      for (std::int64_t j = 0; j < d; ++j) {
        const auto rf = enc.receptive_field(d, i, j);
        std::cout << (j ? "  " : "") << "[" << rf.top << "," << rf.left << "," << rf.bottom
                  << "," << rf.right << "]";
      }
      std::cout << "\n";
    }
  }
  std::cout << "\noverlap matrix (IoU), d=7 positions within one row\n";
  for (std::int64_t j = 0; j < 7; ++j) {
    for (std::int64_t j2 = 0; j2 < 7; ++j2)
      std::cout << (j2 ? "\t" : "") << enc.rf_overlap(7, {0, j}, {0, j2});
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AMDIM contrastive representation learning"};
  app.require_subcommand(1);
  app.fallthrough();  // --seed/--out may appear after the subcommand
  GlobalFlags g;
  app.add_option("--seed", g.seed, "override the run seed")->each([&](const std::string&) {
    g.seed_set = true;
  });
  app.add_option("--out", g.out, "override the output directory");

  std::string config_path, checkpoint_path, resume_path, kind = "linear", metrics_path;
  std::int64_t query = 0, k = 7, dim = 1, batch = 128, steps = 2000;
  double rho = 0.9;

  auto* train = app.add_subcommand("train", "train an encoder from a config file");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* probe = app.add_subcommand("probe", "linear/MLP probe on frozen features");
  probe->add_option("--checkpoint", checkpoint_path)->required();
  probe->add_option("--kind", kind)->check(CLI::IsMember({"linear", "mlp"}));

  auto* retrieve = app.add_subcommand("retrieve", "cosine-KNN retrieval with heatmaps");
  retrieve->add_option("--checkpoint", checkpoint_path)->required();
  retrieve->add_option("--query", query)->required();
  retrieve->add_option("--k", k);

  auto* mi = app.add_subcommand("mi-check", "synthetic Gaussian MI validation");
  mi->add_option("--rho", rho);
  mi->add_option("--dim", dim);
  mi->add_option("--batch", batch);
  mi->add_option("--steps", steps);

  auto* rf = app.add_subcommand("rf-audit", "receptive-field table and overlap matrix");
  rf->add_option("--config", config_path, "run config (JSON)")->required();

  auto* summarize = app.add_subcommand("summarize", "summarize a metrics stream");
  summarize->add_option("--metrics", metrics_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message and usage pointer
    return 1;
  }

  try {
    if (*train) {
      RunConfig cfg = load_run_config(config_path);
      apply_overrides(cfg, g);
      return cfg.precision == "f64" ? do_train<double>(cfg, resume_path)
                                    : do_train<float>(cfg, resume_path);
    }
    if (*probe || *retrieve) {
      Checkpoint ckpt = load_checkpoint(checkpoint_path);
      const bool f64 = parse_run_config(ckpt.config_json).precision == "f64";
      if (*probe) return f64 ? do_probe<double>(ckpt, g, kind) : do_probe<float>(ckpt, g, kind);
      return f64 ? do_retrieve<double>(ckpt, g, query, k)
                 : do_retrieve<float>(ckpt, g, query, k);
    }
    if (*mi) return do_mi_check(rho, dim, batch, steps, g.seed_set ? g.seed : 1);
    if (*rf) {
      RunConfig cfg = load_run_config(config_path);
      apply_overrides(cfg, g);
      return do_rf_audit(cfg);
    }
    if (*summarize) {
      std::cout << summarize_metrics(read_metrics(metrics_path));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
