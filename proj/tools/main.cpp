#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "metafo/bundle.hpp"
#include "metafo/dataset.hpp"
#include "metafo/errors.hpp"
#include "metafo/inverse.hpp"
#include "metafo/lattice.hpp"
#include "metafo/materials.hpp"
#include "metafo/model.hpp"
#include "metafo/parallel.hpp"
#include "metafo/tasks.hpp"
#include "metafo/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace metafo;

namespace {

constexpr const char* kDatasetFile = "dataset.jsonl";
constexpr const char* kSplitFile = "split.json";

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

/// JSON object from a config file: JSON text, or key=value lines where dotted
/// keys nest ("model.d_inp=32"). Lines starting with '#' are comments.
json read_config(const fs::path& path) {
  const std::string text = read_text(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw FormatError(std::string("bad JSON config: ") + e.what());
    }
  }
  json out = json::object();
  std::istringstream lines(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("expected key=value", number);
    auto trim = [](std::string s) {
      const auto l = s.find_first_not_of(" \t\r");
      const auto r = s.find_last_not_of(" \t\r");
      return l == std::string::npos ? std::string{} : s.substr(l, r - l + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    json::json_pointer ptr("/" + std::regex_replace(key, std::regex("\\."), "/"));
    out[ptr] = parse_scalar(value);
  }
  return out;
}

void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + s + "'");
    const std::string key = s.substr(0, eq);
    json::json_pointer ptr("/" + std::regex_replace(key, std::regex("\\."), "/"));
    cfg[ptr] = parse_scalar(s.substr(eq + 1));
  }
}

void write_provenance(const fs::path& dir, json record) {
  record["threads"] = worker_count();
  record["tool"] = "metafo";
  write_text(dir / "provenance.json", record.dump(2));
}

struct Loaded {
  dataset::Dataset ds;
  dataset::SplitSpec split;
  std::string dataset_hash;
};

Loaded load_data(const fs::path& dir, const std::string& split_override = {}) {
  Loaded l;
  l.ds = dataset::load(dir / kDatasetFile);
  const fs::path split_path = split_override.empty() ? dir / kSplitFile : fs::path(split_override);
  l.split = dataset::split_from_json(read_text(split_path));
  l.dataset_hash = file_digest(dir / kDatasetFile);
  return l;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

materials::Curve curve_from_json(const json& j) {
  materials::Curve c{j.at("strains").get<std::vector<double>>(),
                     j.at("stresses").get<std::vector<double>>()};
  c.validate();
  return c;
}

materials::Curve scaled(materials::Curve c, double factor) {
  for (auto& v : c.stresses) v *= factor;
  return c;
}

// ---------------------------------------------------------------------------

struct DatagenArgs {
  std::string basis = "all";
  int materials = 10;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t points = 21;
  double eps_max = 0.5;
};

int run_datagen(const DatagenArgs& a) {
  const lattice::Mask subset = lattice::parse_basis_set(a.basis);
  if (a.materials < 1) throw ContractError("--materials must be >= 1");
  std::vector<materials::Material> mats;
  for (int i = 0; i < a.materials; ++i) mats.push_back(materials::sample_material(a.seed, i));
  materials::StrainGrid grid{a.points, a.eps_max};
  const auto cells = lattice::enumerate_masks(subset);
  const auto ds = dataset::normalize(dataset::build_dataset(cells, mats, grid));
  const fs::path out(a.out);
  fs::create_directories(out);
  dataset::save(ds, out / kDatasetFile);
  const auto split = dataset::split(ds, a.seed);
  write_text(out / kSplitFile, dataset::to_json(split));
  json cfg = {{"basis", a.basis},         {"basis_mask", subset},
              {"materials", a.materials}, {"seed", a.seed},
              {"points", a.points},       {"eps_max", a.eps_max},
              {"surrogate", ds.surrogate().version}};
  write_text(out / "config.json", cfg.dump(2));
  write_provenance(out, {{"command", "datagen"},
                         {"dataset_hash", file_digest(out / kDatasetFile)},
                         {"seeds", {{"datagen", a.seed}, {"split", a.seed}}},
                         {"cells", cells.size()},
                         {"records", ds.records().size()},
                         {"stress_scale", ds.stress_scale()}});
  std::printf("wrote %zu records (%zu cells x %d materials) to %s\n", ds.records().size(),
              cells.size(), a.materials, out.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::string resume;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  json raw = a.config.empty() ? json::object() : read_config(a.config);
  apply_overrides(raw, a.sets);
  training::TrainConfig cfg = training::train_config_from_json(raw.dump());
  auto data = load_data(a.data);
  const fs::path out(a.out);
  fs::create_directories(out);
  training::TrainState state;
  if (!a.resume.empty()) {
    training::TrainConfig stored;
    state = training::load_state(a.resume, &stored);
    if (!(stored.model == cfg.model) || stored.seed != cfg.seed) {
      throw ContractError("resume state was produced by a different model config or seed");
    }
  } else {
    state = training::init_state(cfg);
  }
  write_text(out / "config.json", training::to_json(cfg));
  const std::size_t every = std::max<std::size_t>(1, cfg.steps / 20);
  auto result = training::train(cfg, data.ds, data.split, state, out,
                                [&](std::size_t step, double loss) {
                                  if (!a.quiet && (step % every == 0 || step == cfg.steps)) {
                                    std::printf("step %zu/%zu loss %.6e\n", step, cfg.steps, loss);
                                    std::fflush(stdout);
                                  }
                                });
  write_provenance(out, {{"command", "train"},
                         {"dataset_hash", data.dataset_hash},
                         {"checkpoint_hash", file_digest(result.checkpoint)},
                         {"seeds", {{"train", cfg.seed}, {"split", data.split.seed}}},
                         {"resumed_from", a.resume},
                         {"initial_loss", result.initial_loss},
                         {"final_loss", result.final_loss}});
  std::printf("checkpoint %s (final loss %.6e)\n", result.checkpoint.string().c_str(),
              result.final_loss);
  return 0;
}

struct EvalArgs {
  int task = 1;
  std::string ckpt;
  std::string data;
  std::string report;
  std::string split;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::string mode = "interp";
  std::string mask_target = "material";
  std::size_t noise_seeds = 20;
  std::string noise_levels = "0,0.03,0.05,0.1";
  std::string k_list = "3,4,5";
  std::string contamination = "0.1,0.2,0.3";
  std::string train_config;
  std::size_t samples = 10;
  double tau = 0.5;
};

int run_eval(const EvalArgs& a) {
  auto data = load_data(a.data, a.split);
  const fs::path out(a.report);
  fs::create_directories(out);
  tasks::TaskReport report;
  json echo = {{"task", a.task}, {"ckpt", a.ckpt}, {"data", a.data}, {"seed", a.seed}};
  if (a.task == 4) {
    const auto ck = inverse::load_inverse_checkpoint(a.ckpt);
    tasks::Task4Options opt;
    opt.samples = a.samples;
    opt.tau = a.tau;
    opt.seed = a.seed;
    report = tasks::run_task4(ck.params, data.ds, data.split.test_cells, opt);
  } else {
    const auto ck = model::load_checkpoint(a.ckpt);
    if (a.task == 1) {
      tasks::Task1Options opt;
      opt.k = a.k;
      opt.seed = a.seed;
      report = tasks::run_task1(ck, data.ds, data.split, opt);
    } else if (a.task == 2) {
      tasks::Task2Options opt;
      opt.mode = tasks::parse_mask_mode(a.mode);
      opt.target = a.mask_target == "response" ? tasks::MaskTarget::kResponse
                                               : tasks::MaskTarget::kMaterial;
      opt.k = a.k;
      opt.seed = a.seed;
      report = tasks::run_task2(ck, data.ds, data.split, opt);
    } else {
      tasks::Task3Options opt;
      opt.noise_levels = parse_list(a.noise_levels);
      opt.k_list.clear();
      for (double k : parse_list(a.k_list)) opt.k_list.push_back(static_cast<std::size_t>(k));
      opt.noise_seeds = a.noise_seeds;
      opt.seed = a.seed;
      opt.contamination_ratios = parse_list(a.contamination);
      if (!a.train_config.empty()) {
        opt.train = training::train_config_from_json(read_config(a.train_config).dump());
      }
      opt.work_dir = out / "contamination";
      report = tasks::run_task3(ck, data.ds, data.split, opt);
    }
  }
  tasks::write_report(report, out);
  echo["resolved"] = json::parse(report.config);
  write_text(out / "config.json", echo.dump(2));
  write_provenance(out, {{"command", "eval"},
                         {"dataset_hash", data.dataset_hash},
                         {"checkpoint_hash", file_digest(a.ckpt)},
                         {"seeds", {{"eval", a.seed}, {"split", data.split.seed}}}});
  for (const auto& [key, value] : report.summary) std::printf("%s = %.6g\n", key.c_str(), value);
  return 0;
}

struct InferArgs {
  std::string ckpt;
  std::string prompt;
  std::string query;
  std::string out;
};

int run_infer(const InferArgs& a) {
  const auto ck = model::load_checkpoint(a.ckpt);
  const double inv = 1.0 / ck.stress_scale;
  json prompt_json;
  try {
    prompt_json = json::parse(read_text(a.prompt));
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad prompt JSON: ") + e.what());
  }
  json query_json;
  if (!a.query.empty()) {
    try {
      query_json = json::parse(read_text(a.query));
    } catch (const json::exception& e) {
      throw FormatError(std::string("bad query JSON: ") + e.what());
    }
    if (query_json.contains("query")) query_json = query_json["query"];
  } else if (prompt_json.contains("query")) {
    query_json = prompt_json["query"];
  } else {
    throw ContractError("no query: pass --query or include \"query\" in the prompt file");
  }
  dataset::PromptInstance prompt;
  try {
    prompt.cell_mask = prompt_json.value("cell_mask", 0u);
    for (const auto& p : prompt_json.at("pairs")) {
      prompt.pairs.push_back({scaled(curve_from_json(p.at("material")), inv),
                              scaled(curve_from_json(p.at("response")), inv)});
    }
    const json queries = query_json.is_array() ? query_json : json::array({query_json});
    for (const auto& q : queries) prompt.query_materials.push_back(scaled(curve_from_json(q), inv));
  } catch (const json::exception& e) {
    throw FormatError(std::string("prompt does not match the schema: ") + e.what());
  }
  const Tensor y = model::forward(ck.params, prompt);
  json outputs = json::array();
  for (std::size_t q = 0; q < prompt.n(); ++q) {
    std::vector<double> stresses;
    for (double v : y.row(q)) stresses.push_back(v * ck.stress_scale);
    outputs.push_back({{"strains", prompt.query_materials[q].strains}, {"stresses", stresses}});
  }
  json result = prompt.n() == 1 ? outputs.front() : json{{"predictions", outputs}};
  if (prompt_json.contains("cell_mask")) result["cell_mask"] = prompt.cell_mask;
  result["stress_scale"] = ck.stress_scale;
  result["checkpoint_hash"] = file_digest(a.ckpt);
  write_text(a.out, result.dump(2));
  return 0;
}

struct InverseTrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::size_t folds = 0;
  std::size_t fold = 0;
  std::uint64_t fold_seed = 0;
};

int run_inverse_train(const InverseTrainArgs& a) {
  json raw = a.config.empty() ? json::object() : read_config(a.config);
  apply_overrides(raw, a.sets);
  const auto cfg = inverse::inverse_config_from_json(raw.dump());
  auto data = load_data(a.data);
  dataset::SplitSpec split = data.split;
  if (a.folds > 0) split = inverse::fold_split(data.ds, a.folds, a.fold, a.fold_seed);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text(out / "config.json", inverse::to_json(cfg));
  write_text(out / kSplitFile, dataset::to_json(split));
  auto result = inverse::inverse_train(cfg, data.ds, split, out);
  write_provenance(out, {{"command", "inverse-train"},
                         {"dataset_hash", data.dataset_hash},
                         {"checkpoint_hash", file_digest(result.checkpoint)},
                         {"seeds", {{"train", cfg.seed}, {"fold", a.fold_seed}}},
                         {"folds", a.folds},
                         {"fold", a.fold}});
  std::printf("edge_f1 = %.6g\nexact_match_rate = %.6g\n", result.eval.edge_f1,
              result.eval.exact_match_rate);
  return 0;
}

struct InverseEvalArgs {
  std::string ckpt;
  std::string data;
  std::string report;
  std::string split;
  std::string targets;
  std::size_t samples = 10;
  double tau = 0.5;
  std::uint64_t seed = 0;
};

int run_inverse_eval(const InverseEvalArgs& a) {
  const auto ck = inverse::load_inverse_checkpoint(a.ckpt);
  const fs::path out(a.report);
  fs::create_directories(out);
  json prov = {{"command", "inverse-eval"},
               {"checkpoint_hash", file_digest(a.ckpt)},
               {"seeds", {{"eval", a.seed}}}};
  if (!a.targets.empty()) {
    const double inv = 1.0 / ck.stress_scale;
    std::vector<dataset::CurvePair> targets;
    try {
      const json j = json::parse(read_text(a.targets));
      for (const auto& p : j.at("pairs")) {
        targets.push_back({scaled(curve_from_json(p.at("material")), inv),
                           scaled(curve_from_json(p.at("response")), inv)});
      }
    } catch (const json::exception& e) {
      throw FormatError(std::string("targets do not match the schema: ") + e.what());
    }
    const auto a_mat = inverse::inverse_forward(ck.params, targets, inverse::canonical_coordinates());
    write_text(out / "graph.json", inverse::graph_json(inverse::threshold(a_mat, a.tau), a.tau));
  }
  if (!a.data.empty()) {
    auto data = load_data(a.data, a.split);
    tasks::Task4Options opt;
    opt.samples = a.samples;
    opt.tau = a.tau;
    opt.seed = a.seed;
    const auto report = tasks::run_task4(ck.params, data.ds, data.split.test_cells, opt);
    tasks::write_report(report, out);
    prov["dataset_hash"] = data.dataset_hash;
    for (const auto& [key, value] : report.summary) std::printf("%s = %.6g\n", key.c_str(), value);
  }
  write_text(out / "config.json", json{{"ckpt", a.ckpt},
                                       {"data", a.data},
                                       {"split", a.split},
                                       {"targets", a.targets},
                                       {"samples", a.samples},
                                       {"tau", a.tau},
                                       {"seed", a.seed}}
                                      .dump(2));
  write_provenance(out, prov);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metafo: in-context neural operator for lattice metamaterials"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "Generate a (cell, material, response) dataset");
  datagen->add_option("--basis", dg.basis, "Basis subset: all, 0x<hex>, or comma list")->required();
  datagen->add_option("--materials", dg.materials, "Number of materials")->required();
  datagen->add_option("--seed", dg.seed, "Seed for materials and split")->required();
  datagen->add_option("--out", dg.out, "Output directory")->required();
  datagen->add_option("--points", dg.points, "Strain grid points")->capture_default_str();
  datagen->add_option("--eps-max", dg.eps_max, "Maximum strain")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the forward model");
  train->add_option("--data", tr.data, "Dataset directory")->required();
  train->add_option("--config", tr.config, "Config file (JSON or key=value)");
  train->add_option("--out", tr.out, "Output directory")->required();
  train->add_option("--set", tr.sets, "Override a config key (key=value)");
  train->add_option("--resume", tr.resume, "Training state file to resume from");
  train->add_flag("--quiet", tr.quiet, "Suppress progress lines");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Run a task protocol and write a report");
  eval->add_option("--task", ev.task, "Task 1-4")->required()->check(CLI::Range(1, 4));
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval->add_option("--data", ev.data, "Dataset directory")->required();
  eval->add_option("--report", ev.report, "Report directory")->required();
  eval->add_option("--split", ev.split, "Split file overriding the dataset's");
  eval->add_option("--k", ev.k, "Prompt pairs")->capture_default_str();
  eval->add_option("--seed", ev.seed, "Evaluation seed")->capture_default_str();
  eval->add_option("--mode", ev.mode, "Task 2 mask: interp or extrap")
      ->check(CLI::IsMember({"interp", "extrap"}))
      ->capture_default_str();
  eval->add_option("--mask-target", ev.mask_target, "Task 2 masked curve")
      ->check(CLI::IsMember({"material", "response"}))
      ->capture_default_str();
  eval->add_option("--noise-seeds", ev.noise_seeds, "Task 3 seeds per cell")->capture_default_str();
  eval->add_option("--noise-levels", ev.noise_levels, "Task 3 noise levels")->capture_default_str();
  eval->add_option("--k-list", ev.k_list, "Task 3 prompt counts")->capture_default_str();
  eval->add_option("--contamination", ev.contamination,
                   "Task 3 contamination ratios (empty to skip)")
      ->capture_default_str();
  eval->add_option("--train-config", ev.train_config, "Task 3 fine-tuning config");
  eval->add_option("--samples", ev.samples, "Task 4 evaluations per cell")->capture_default_str();
  eval->add_option("--tau", ev.tau, "Task 4 threshold")->capture_default_str();

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Predict a response from a prompt");
  infer->add_option("--ckpt", inf.ckpt, "Checkpoint file")->required();
  infer->add_option("--prompt", inf.prompt, "Prompt JSON")->required();
  infer->add_option("--query", inf.query, "Query material JSON");
  infer->add_option("--out", inf.out, "Output JSON")->required();

  InverseTrainArgs it;
  auto* inv_train = app.add_subcommand("inverse-train", "Train the inverse-design model");
  inv_train->add_option("--data", it.data, "Dataset directory")->required();
  inv_train->add_option("--config", it.config, "Config file (JSON or key=value)");
  inv_train->add_option("--out", it.out, "Output directory")->required();
  inv_train->add_option("--set", it.sets, "Override a config key (key=value)");
  inv_train->add_option("--folds", it.folds, "Cell folds (0 uses the dataset split)");
  inv_train->add_option("--fold", it.fold, "Held-out fold index");
  inv_train->add_option("--fold-seed", it.fold_seed, "Fold assignment seed");

  InverseEvalArgs ie;
  auto* inv_eval = app.add_subcommand("inverse-eval", "Evaluate the inverse model or design a graph");
  inv_eval->add_option("--ckpt", ie.ckpt, "Inverse checkpoint")->required();
  inv_eval->add_option("--data", ie.data, "Dataset directory");
  inv_eval->add_option("--report", ie.report, "Report directory")->required();
  inv_eval->add_option("--split", ie.split, "Split file overriding the dataset's");
  inv_eval->add_option("--targets", ie.targets, "Target pairs JSON to design for");
  inv_eval->add_option("--samples", ie.samples, "Evaluations per cell")->capture_default_str();
  inv_eval->add_option("--tau", ie.tau, "Threshold")->capture_default_str();
  inv_eval->add_option("--seed", ie.seed, "Evaluation seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }
  if (inv_eval->parsed() && ie.data.empty() && ie.targets.empty()) {
    std::cerr << "inverse-eval needs --data or --targets\n" << inv_eval->help();
    return 2;
  }

  try {
    if (datagen->parsed()) return run_datagen(dg);
    if (train->parsed()) return run_train(tr);
    if (eval->parsed()) return run_eval(ev);
    if (infer->parsed()) return run_infer(inf);
    if (inv_train->parsed()) return run_inverse_train(it);
    if (inv_eval->parsed()) return run_inverse_eval(ie);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
