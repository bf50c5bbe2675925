#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "alan/gradsuite.hpp"
#include "alan/trainer.hpp"

namespace fs = std::filesystem;
using namespace alan;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

TrainConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  try {
    return j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::vector<double> read_scores(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<double> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      out = nlohmann::json::parse(text).get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("scores " + path + ": " + e.what());
    }
  } else {
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw ValidationError("scores " + path + ": not a number '" + tok + "'");
      out.push_back(v);
    }
  }
  if (out.empty()) throw ValidationError("scores " + path + ": empty");
  for (double v : out) {
    if (!std::isfinite(v)) throw ValidationError("scores " + path + ": non-finite value");
  }
  return out;
}

template <typename T>
int run_train(const CorpusManifest& data, const CorpusManifest* val, const TrainConfig& cfg, const std::string& out,
              const std::string& curve_path, bool quiet) {
  auto result = train<T>(data, cfg, val, quiet ? nullptr : &std::cerr);
  result.model.save(out);
  const std::string curve = format_curve(result.curve);
  write_text(curve_path.empty() ? out + ".curve.txt" : curve_path, curve);
  nlohmann::json summary{{"best_epoch", result.best_epoch},
                         {"best_validation_sum_r", result.best_sum_r},
                         {"epochs_run", result.curve.size()},
                         {"diverged", result.diverged},
                         {"config", cfg}};
  if (result.diverged) summary["diagnostics"] = result.diagnostics;
  write_text(out + ".train.json", summary.dump(2) + "\n");
  std::cout << "best epoch " << result.best_epoch << ", validation SumR " << result.best_sum_r << "\n";
  if (result.diverged) {
    std::cerr << "training diverged: " << result.diagnostics << "\n";
    return kFailed;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ALAN anomaly-led text/audio to video retrieval"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic corpus pack");
  SyntheticConfig syn;
  std::string gen_out, gen_modality = "text", gen_split = "train";
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--pairs", syn.n_pairs, "number of pairs")->check(CLI::PositiveNumber);
  gen->add_option("--clips", syn.T, "clips per sequence")->check(CLI::PositiveNumber);
  gen->add_option("--dim", syn.d_in, "feature width per stream")->check(CLI::PositiveNumber);
  gen->add_option("--vocab", syn.vocab_size, "vocabulary size");
  gen->add_option("--anomaly-ratio", syn.anomaly_ratio, "fraction of abnormal items")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--noise", syn.noise, "background noise std-dev");
  gen->add_option("--seed", syn.seed, "generator seed");
  gen->add_option("--modality", gen_modality, "text|audio")->check(CLI::IsMember({"text", "audio"}));
  gen->add_option("--split", gen_split, "train|test")->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--id-prefix", syn.id_prefix, "item id prefix");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a pack");
  std::string tr_data, tr_val, tr_config, tr_out, tr_curve;
  std::optional<std::uint64_t> tr_seed;
  std::optional<std::size_t> tr_epochs;
  bool tr_quiet = false;
  tr->add_option("--data", tr_data, "training pack directory")->required();
  tr->add_option("--val", tr_val, "validation pack (default: the training pack)");
  tr->add_option("--config", tr_config, "training config JSON");
  tr->add_option("--seed", tr_seed, "overrides the config seed");
  tr->add_option("--epochs", tr_epochs, "overrides the config epoch count");
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--curve", tr_curve, "training curve path (default: <out>.curve.txt)");
  tr->add_flag("--quiet", tr_quiet, "no per-epoch log");

  // eval
  auto* ev = app.add_subcommand("eval", "retrieval metrics for a checkpoint on a pack");
  std::string ev_data, ev_ckpt, ev_config, ev_json;
  std::uint64_t ev_seed = 0;
  ev->add_option("--data", ev_data, "pack directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--config", ev_config, "training config JSON (sampling settings)");
  ev->add_option("--seed", ev_seed, "sampling seed");
  ev->add_option("--json", ev_json, "write the report as JSON");

  // sample
  auto* sa = app.add_subcommand("sample", "anomaly-led or fixed-frame sampling over a score file");
  std::string sa_scores, sa_method = "anomaly";
  std::size_t sa_n = kDefaultSampleLength;
  double sa_tau = kDefaultTemperature;
  std::uint64_t sa_seed = 0;
  sa->add_option("--scores", sa_scores, "JSON array or whitespace-separated scores")->required();
  sa->add_option("--n", sa_n, "sample length")->check(CLI::PositiveNumber);
  sa->add_option("--tau", sa_tau, "temperature");
  sa->add_option("--seed", sa_seed, "seed");
  sa->add_option("--method", sa_method, "anomaly|uniform|random")
      ->check(CLI::IsMember({"anomaly", "uniform", "random"}));

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every backward path");
  std::size_t gc_seeds = 10;
  std::uint64_t gc_first = 1;
  gradsuite::Options gc_opts;
  std::vector<std::string> gc_paths;
  gc->add_option("--seeds", gc_seeds, "seeds per path")->check(CLI::PositiveNumber);
  gc->add_option("--first-seed", gc_first, "first seed");
  gc->add_option("--tolerance", gc_opts.tolerance, "max relative error");
  gc->add_option("--path", gc_paths, "restrict to named paths");
  gc->add_option("--model-entries", gc_opts.model_max_entries, "entries per tensor in whole-model paths (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      syn.modality = parse_modality(gen_modality);
      syn.split = parse_split(gen_split);
      if (gen->count("--vocab") == 0) syn.vocab_size = std::max(syn.vocab_size, synthetic_min_vocab(syn.n_pairs));
      const auto corpus = generate_synthetic(syn);
      write_pack(corpus, gen_out);
      std::cout << "wrote " << corpus.items.size() << " pairs to " << gen_out << "\n";
      return kOk;
    }
    if (tr->parsed()) {
      TrainConfig cfg = load_config(tr_config);
      if (tr_seed) cfg.seed = *tr_seed;
      if (tr_epochs) cfg.epochs = *tr_epochs;
      const auto data = read_pack(tr_data);
      std::optional<CorpusManifest> val;
      if (!tr_val.empty()) val = read_pack(tr_val);
      const CorpusManifest* vp = val ? &*val : nullptr;
      return cfg.precision == Precision::f64 ? run_train<double>(data, vp, cfg, tr_out, tr_curve, tr_quiet)
                                             : run_train<float>(data, vp, cfg, tr_out, tr_curve, tr_quiet);
    }
    if (ev->parsed()) {
      const TrainConfig cfg = load_config(ev_config);
      const auto data = read_pack(ev_data);
      validate(data);
      const auto model = AlanModel<float>::load(ev_ckpt);
      if (model.config().modality != data.modality) throw ValidationError("checkpoint and pack modalities differ");
      const auto report = evaluate(model, data, cfg.sampling(), ev_seed);
      const char* name = data.modality == QueryModality::text ? "text" : "audio";
      std::cout << format_table(report, data.modality == QueryModality::text ? "Text" : "Audio");
      if (!ev_json.empty()) write_text(ev_json, to_json(report, name).dump(2) + "\n");
      return kOk;
    }
    if (sa->parsed()) {
      const auto scores = read_scores(sa_scores);
      Rng rng(sa_seed);
      SampledClipSet s;
      nlohmann::json out;
      if (sa_method == "anomaly") {
        const auto dist = selection_probabilities(scores, sa_tau);
        s = roulette_select(dist, sa_n, rng);
        out["probabilities"] = dist.p;
      } else {
        s = fixed_sample(scores.size(), sa_n, sa_method == "uniform" ? FixedMode::uniform : FixedMode::random, rng);
      }
      out["method"] = sa_method;
      out["indices"] = s.indices;
      out["counts"] = selection_counts(s, scores.size());
      std::cout << out.dump() << "\n";
      return kOk;
    }
    if (gc->parsed()) {
      bool all = true;
      std::size_t ran = 0;
      for (const auto& path : gradsuite::registered_paths()) {
        if (!gc_paths.empty() && std::find(gc_paths.begin(), gc_paths.end(), path.name) == gc_paths.end()) continue;
        ++ran;
        double worst = 0;
        std::size_t failed = 0;
        for (std::size_t i = 0; i < gc_seeds; ++i) {
          const auto rep = path.run(gc_first + i, gc_opts);
          worst = std::max(worst, rep.worst());
          if (!rep.passed()) {
            ++failed;
            std::cerr << path.name << " seed " << gc_first + i << ":\n" << rep;
          }
        }
        all = all && failed == 0;
        std::cout << (failed == 0 ? "PASS " : "FAIL ") << path.name << "  worst rel err " << std::scientific
                  << std::setprecision(2) << worst << std::defaultfloat << "  (" << gc_seeds - failed << "/"
                  << gc_seeds << " seeds)\n";
      }
      if (ran == 0) {
        std::cerr << "no gradient path matches\n";
        return kUsage;
      }
      return all ? kOk : kFailed;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
