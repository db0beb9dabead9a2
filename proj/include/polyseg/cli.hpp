#pragma once

// Command-line workflow: gen -> train -> predict -> eval -> cluster.
// Each subcommand is also callable directly with an options struct.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "polyseg/error.hpp"
#include "polyseg/label_hierarchy.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/micronet.hpp"
#include "polyseg/phantom.hpp"
#include "polyseg/phenotype.hpp"
#include "polyseg/poly_train.hpp"
#include "polyseg/volume.hpp"

namespace polyseg::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2 };

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// gen

struct GenOptions {
  fs::path config;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

/// Config: {"n_clean_specific", "n_consol_generic", "n_consol_specific", "phantom": {...}, "seed"}.
inline std::vector<ManifestEntry> cmd_gen(const GenOptions& o) {
  const auto j = read_json(o.config);
  DatasetCounts n;
  PhantomConfig base;
  std::uint64_t seed = 0;
  try {
    n.clean_specific = j.value("n_clean_specific", std::size_t{0});
    n.consolidated_generic = j.value("n_consol_generic", std::size_t{0});
    n.consolidated_specific = j.value("n_consol_specific", std::size_t{0});
    if (j.contains("phantom")) base = PhantomConfig::from_json(j["phantom"]);
    seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad gen config: ") + e.what());
  }
  if (o.seed) seed = *o.seed;
  return gen_dataset(n, base, seed, o.out);
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  fs::path config;
  fs::path manifest;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::optional<Variant> variant;
};

inline std::vector<TrainingSample> load_training_set(const std::vector<ManifestEntry>& entries,
                                                     const LabelHierarchy& h) {
  std::vector<TrainingSample> out;
  for (const auto& e : entries) {
    if (e.eval_only) continue;
    out.push_back({e.id, read_volume(e.ct), LabelVolume(read_volume(e.label), e.level, h)});
  }
  return out;
}

inline void write_train_log(const std::vector<TrainLogRow>& log, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,stage,loss_specific,loss_generic\n";
  for (const auto& r : log) {
    out << r.step << ',' << r.stage << ',' << detail::fmt_double(r.loss_specific) << ','
        << detail::fmt_double(r.loss_generic) << '\n';
  }
}

/// Writes coarse/fine checkpoints, train_log.csv and the resolved cascade_config.json.
inline CascadeModel cmd_train(const TrainOptions& o) {
  detail::require_arg(o.variant.has_value(), "train requires --variant {poly,nonpoly}");
  const auto& h = LabelHierarchy::lung();
  CascadeConfig cfg = CascadeConfig::from_json(read_json(o.config));
  cfg.variant = *o.variant;
  if (o.seed) cfg.seed = *o.seed;

  const auto samples = load_training_set(load_manifest(o.manifest), h);
  CascadeModel model = train_cascade(cfg, samples, h);

  ensure_dir(o.out);
  save_checkpoint(model.coarse, o.out / "coarse");
  save_checkpoint(model.fine, o.out / "fine");
  write_train_log(model.log, o.out / "train_log.csv");
  write_json(cfg.to_json(), o.out / "cascade_config.json");
  return model;
}

// ---------------------------------------------------------------------------
// predict

struct PredictOptions {
  fs::path model;  // directory written by train
  fs::path manifest;
  fs::path out;
  std::optional<Variant> variant;
  bool all_cases = false;  // default: eval-only cases
};

/// Writes <id>_pred volumes and predictions.json ([{id, prediction}]).
inline void cmd_predict(const PredictOptions& o) {
  detail::require_arg(o.variant.has_value(), "predict requires --variant {poly,nonpoly}");
  const auto& h = LabelHierarchy::lung();
  const CascadeConfig cfg = CascadeConfig::from_json(read_json(o.model / "cascade_config.json"));
  detail::require_arg(cfg.variant == *o.variant, "model in " + o.model.string() + " was trained as " +
                                                     std::string(to_string(cfg.variant)));
  const ParamStore coarse = load_checkpoint(o.model / "coarse");
  const ParamStore fine = load_checkpoint(o.model / "fine");

  ensure_dir(o.out);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& e : load_manifest(o.manifest)) {
    if (!o.all_cases && !e.eval_only) continue;
    const LabelVolume pred = predict_cascade(cfg, coarse, fine, read_volume(e.ct), h);
    const std::string name = e.id + "_pred";
    write_volume(pred.vol(), o.out / name);
    index.push_back({{"id", e.id}, {"prediction", name}});
  }
  write_json(index, o.out / "predictions.json");
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  fs::path manifest;
  std::vector<std::pair<std::string, fs::path>> models;  // name -> prediction dir
  fs::path out;
};

inline EvalReport evaluate_predictions(const std::vector<ManifestEntry>& entries, const fs::path& pred_dir,
                                       const LabelHierarchy& h) {
  const auto index = read_json(pred_dir / "predictions.json");
  std::map<std::string, const ManifestEntry*> by_id;
  for (const auto& e : entries) by_id[e.id] = &e;

  std::vector<LabelVolume> preds, truths;
  std::vector<Volume> cts;
  std::vector<std::string> ids;
  for (const auto& r : index) {
    const auto id = r.at("id").get<std::string>();
    auto it = by_id.find(id);
    detail::require(it != by_id.end(), "prediction for unknown case " + id);
    detail::require(it->second->level == LabelLevel::specific, "case " + id + " has no specific ground truth");
    preds.emplace_back(read_volume(pred_dir / r.at("prediction").get<std::string>()), LabelLevel::specific, h);
    truths.emplace_back(read_volume(it->second->label), LabelLevel::specific, h);
    cts.push_back(read_volume(it->second->ct));
    ids.push_back(id);
  }
  detail::require(!ids.empty(), "no predictions in " + pred_dir.string());
  std::vector<EvalCase> cases;
  for (std::size_t i = 0; i < ids.size(); ++i) cases.push_back({ids[i], &preds[i], &truths[i], &cts[i]});
  return evaluate_dataset(cases, h);
}

/// Writes eval_<model>.csv per model and summary.csv with all models.
inline std::vector<std::pair<std::string, EvalReport>> cmd_eval(const EvalOptions& o) {
  detail::require_arg(!o.models.empty(), "eval needs at least one --pred NAME=DIR");
  const auto& h = LabelHierarchy::lung();
  const auto entries = load_manifest(o.manifest);
  std::vector<std::pair<std::string, EvalReport>> reports;
  ensure_dir(o.out);
  for (const auto& [name, dir] : o.models) {
    auto rep = evaluate_predictions(entries, dir, h);
    write_eval_csv(rep.records, o.out / ("eval_" + name + ".csv"));
    reports.emplace_back(name, std::move(rep));
  }
  write_summary_csv(reports, o.out / "summary.csv");
  return reports;
}

// ---------------------------------------------------------------------------
// cluster

struct ClusterOptions {
  fs::path manifest;
  fs::path out;
  std::size_t k = 4;
  bool all_cases = false;  // default: eval-only cases with lobes
};

struct ClusterResult {
  FeatureMatrix features;
  Dendrogram dendrogram;
  std::vector<int> assignment;
};

inline ClusterResult cmd_cluster(const ClusterOptions& o) {
  ClusterResult r;
  for (const auto& e : load_manifest(o.manifest)) {
    if (!e.lobes || (!o.all_cases && !e.eval_only)) continue;
    r.features.add_row(e.id, aeration_features(read_volume(e.ct), read_volume(*e.lobes), lobe::kCount));
  }
  detail::require(r.features.rows() > 0, "no cases with lobe volumes in manifest");
  r.features.validate();
  r.dendrogram = agglomerate(r.features);
  r.assignment = cut_dendrogram(r.dendrogram, std::min(o.k, r.features.rows()));

  ensure_dir(o.out);
  write_feature_csv(r.features, o.out / "features.csv");
  write_assignment_csv(r.features, r.assignment, o.out / "assignment.csv");
  export_phenotype_report(r.features, r.assignment, r.dendrogram, o.out);
  return r;
}

// ---------------------------------------------------------------------------
// Argument parsing

inline int run(int argc, char** argv, std::ostream& err = std::cerr) {
  CLI::App app{"Polymorphic lung segmentation toolkit"};
  app.require_subcommand(1);

  std::string variant_str;
  std::optional<std::uint64_t> seed;
  auto add_seed = [&](CLI::App* sc) { sc->add_option("--seed", seed, "Global seed"); };
  auto add_variant = [&](CLI::App* sc) {
    sc->add_option("--variant", variant_str, "Model variant")->check(CLI::IsMember({"poly", "nonpoly"}));
  };

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a phantom dataset");
  gen_cmd->add_option("--config", gen.config, "Dataset config JSON")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  add_seed(gen_cmd);

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train a two-stage cascade");
  train_cmd->add_option("--config", train.config, "Cascade config JSON")->required();
  train_cmd->add_option("--manifest", train.manifest, "Dataset manifest")->required();
  train_cmd->add_option("--out", train.out, "Model output directory")->required();
  add_seed(train_cmd);
  add_variant(train_cmd);

  PredictOptions pred;
  auto* pred_cmd = app.add_subcommand("predict", "Predict left/right labels with a trained cascade");
  pred_cmd->add_option("--model", pred.model, "Model directory from train")->required();
  pred_cmd->add_option("--manifest", pred.manifest, "Dataset manifest")->required();
  pred_cmd->add_option("--out", pred.out, "Prediction output directory")->required();
  pred_cmd->add_flag("--all", pred.all_cases, "Predict every case, not only eval-only ones");
  add_seed(pred_cmd);
  add_variant(pred_cmd);

  EvalOptions ev;
  std::vector<std::string> pred_specs;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate predictions against ground truth");
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--pred", pred_specs, "NAME=DIR prediction directory (repeatable)")->required();
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  add_seed(eval_cmd);

  ClusterOptions cl;
  auto* cluster_cmd = app.add_subcommand("cluster", "Cluster cases by per-lobe aeration");
  cluster_cmd->add_option("--manifest", cl.manifest, "Dataset manifest")->required();
  cluster_cmd->add_option("--out", cl.out, "Output directory")->required();
  cluster_cmd->add_option("--k", cl.k, "Number of clusters")->check(CLI::PositiveNumber);
  cluster_cmd->add_flag("--all", cl.all_cases, "Use every case with lobes, not only eval-only ones");
  add_seed(cluster_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out_stream, err_stream;
    const int rc = app.exit(e, out_stream, err_stream);
    err << out_stream.str() << err_stream.str();
    return rc == 0 ? kOk : kUsage;
  }

  std::optional<Variant> variant;
  if (!variant_str.empty()) variant = parse_variant(variant_str);

  try {
    if (*gen_cmd) {
      gen.seed = seed;
      cmd_gen(gen);
    } else if (*train_cmd) {
      train.seed = seed;
      train.variant = variant;
      cmd_train(train);
    } else if (*pred_cmd) {
      pred.variant = variant;
      cmd_predict(pred);
    } else if (*eval_cmd) {
      for (const auto& s : pred_specs) {
        const auto eq = s.find('=');
        detail::require_arg(eq != std::string::npos && eq > 0, "--pred expects NAME=DIR, got '" + s + "'");
        ev.models.emplace_back(s.substr(0, eq), fs::path(s.substr(eq + 1)));
      }
      cmd_eval(ev);
    } else if (*cluster_cmd) {
      cmd_cluster(cl);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}

}  // namespace polyseg::cli
