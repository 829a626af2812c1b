#include "metafo/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include "json.hpp"

#include "metafo/errors.hpp"
#include "metafo/parallel.hpp"

namespace metafo::tasks {

using nlohmann::json;

double relative_error(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("relative error: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()) + " values");
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    den += truth[i] * truth[i];
  }
  if (!(den > 0.0)) throw DomainError("relative error of a zero-norm truth");
  return 100.0 * std::sqrt(num) / std::sqrt(den);
}

double mean_absolute_percentage(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DimensionError("MAPE: length mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == 0.0) continue;
    s += 100.0 * std::abs(pred[i] - truth[i]) / std::abs(truth[i]);
    ++n;
  }
  if (n == 0) throw DomainError("MAPE of an all-zero truth");
  return s / static_cast<double>(n);
}

std::vector<double> baseline_copy(const dataset::PromptInstance& prompt, std::size_t query) {
  return prompt.query_materials.at(query).stresses;
}

std::vector<double> baseline_mean(const dataset::PromptInstance& prompt) {
  std::vector<double> out(prompt.pairs.front().response.size(), 0.0);
  for (const auto& p : prompt.pairs) {
    for (std::size_t t = 0; t < out.size(); ++t) out[t] += p.response.stresses[t];
  }
  for (auto& v : out) v /= static_cast<double>(prompt.k());
  return out;
}

bool CaseRecord::operator<(const CaseRecord& o) const {
  return std::tie(group, cell_mask, material_id, k, noise, seed) <
         std::tie(o.group, o.cell_mask, o.material_id, o.k, o.noise, o.seed);
}

Aggregate aggregate(std::vector<double> values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  a.mean = s / static_cast<double>(values.size());
  const std::size_t n = values.size();
  a.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  // Nearest-rank percentile.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  a.p95 = values[std::max<std::size_t>(rank, 1) - 1];
  return a;
}

std::map<std::string, std::map<std::string, std::map<std::string, Aggregate>>>
TaskReport::aggregates() const {
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> raw;
  for (const auto& c : cases) {
    const std::string order = std::to_string(lattice::combination_order(c.cell_mask));
    for (const auto& [metric, value] : c.metrics) {
      raw[c.group][metric]["all"].push_back(value);
      raw[c.group][metric][order].push_back(value);
    }
  }
  std::map<std::string, std::map<std::string, std::map<std::string, Aggregate>>> out;
  for (auto& [group, metrics] : raw) {
    for (auto& [metric, orders] : metrics) {
      for (auto& [order, values] : orders) out[group][metric][order] = aggregate(std::move(values));
    }
  }
  return out;
}

std::string to_json(const TaskReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"group", c.group},
                     {"cell_mask", c.cell_mask},
                     {"combination_order", lattice::combination_order(c.cell_mask)},
                     {"material_id", c.material_id},
                     {"k", c.k},
                     {"noise", c.noise},
                     {"seed", c.seed},
                     {"metrics", c.metrics}});
  }
  json aggs = json::object();
  for (const auto& [group, metrics] : r.aggregates()) {
    for (const auto& [metric, orders] : metrics) {
      for (const auto& [order, a] : orders) {
        aggs[group][metric][order] = {
            {"count", a.count}, {"mean", a.mean}, {"median", a.median}, {"p95", a.p95}};
      }
    }
  }
  json j = {{"task", r.task},
            {"config", json::parse(r.config)},
            {"summary", r.summary},
            {"aggregates", aggs},
            {"cases", cases}};
  return j.dump(2);
}

std::string to_csv(const TaskReport& r) {
  std::vector<std::string> metrics;
  for (const auto& c : r.cases) {
    for (const auto& [m, v] : c.metrics) {
      if (std::find(metrics.begin(), metrics.end(), m) == metrics.end()) metrics.push_back(m);
    }
  }
  std::sort(metrics.begin(), metrics.end());
  std::string out = "group,cell_mask,combination_order,material_id,k,noise,seed";
  for (const auto& m : metrics) out += "," + m;
  out += '\n';
  char buf[64];
  for (const auto& c : r.cases) {
    out += c.group + "," + std::to_string(c.cell_mask) + "," +
           std::to_string(lattice::combination_order(c.cell_mask)) + "," +
           std::to_string(c.material_id) + "," + std::to_string(c.k) + ",";
    std::snprintf(buf, sizeof(buf), "%.17g", c.noise);
    out += buf;
    out += "," + std::to_string(c.seed);
    for (const auto& m : metrics) {
      auto it = c.metrics.find(m);
      out += ',';
      if (it != c.metrics.end()) {
        std::snprintf(buf, sizeof(buf), "%.17g", it->second);
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

void write_report(const TaskReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json", std::ios::binary) << to_json(report) << '\n';
  std::ofstream(dir / "cases.csv", std::ios::binary) << to_csv(report);
}

void check_compatible(const model::Checkpoint& ck, const dataset::Dataset& ds) {
  if (!ds.normalized()) throw ContractError("evaluation requires a normalized dataset");
  if (std::abs(ds.stress_scale() - ck.stress_scale) > 1e-12 * std::abs(ck.stress_scale)) {
    throw ContractError("dataset stress scale " + std::to_string(ds.stress_scale()) +
                        " differs from the checkpoint's " + std::to_string(ck.stress_scale));
  }
  if (ds.grid().points != ck.params.config.grid_points) {
    throw ContractError("dataset grid does not match the checkpoint");
  }
}

namespace {

std::string key_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

/// A prompt queued for evaluation with its case record.
struct Job {
  CaseRecord record;
  dataset::PromptInstance prompt;
};

std::vector<Tensor> predict_all(const model::ModelParams& params, const std::vector<Job>& jobs) {
  std::vector<Tensor> out(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) { out[i] = model::forward(params, jobs[i].prompt); });
  return out;
}

std::vector<double> row(const Tensor& y, std::size_t r) {
  const auto v = y.row(r);
  return {v.begin(), v.end()};
}

std::vector<double> pick(std::span<const double> v, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

double mean_metric(const std::vector<CaseRecord>& cases, const std::string& group,
                   const std::string& metric) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& c : cases) {
    if (c.group != group) continue;
    auto it = c.metrics.find(metric);
    if (it == c.metrics.end()) continue;
    s += it->second;
    ++n;
  }
  return n > 0 ? s / static_cast<double>(n) : std::nan("");
}

std::size_t usable_k(std::size_t k, std::size_t pool) {
  if (pool < 2) throw ContractError("evaluation needs at least two train materials");
  return std::min(k, pool - 1);
}

std::vector<Job> unseen_material_jobs(const dataset::Dataset& ds, const dataset::SplitSpec& split,
                                      const std::string& group, std::size_t k, Rng& rng) {
  std::vector<Job> jobs;
  const std::size_t kk = usable_k(k, split.train_materials.size());
  for (lattice::Mask cell : split.train_cells) {
    for (int q : split.test_materials) {
      const int qs[] = {q};
      Job j;
      j.prompt = dataset::make_prompt(ds, split, cell, kk, qs, dataset::PromptMode::kTest, rng);
      j.record.group = group;
      j.record.cell_mask = cell;
      j.record.material_id = q;
      j.record.k = kk;
      jobs.push_back(std::move(j));
    }
  }
  return jobs;
}

void score_full(std::vector<Job>& jobs, const std::vector<Tensor>& preds, bool baselines) {
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto pred = row(preds[i], 0);
    const auto& truth = jobs[i].prompt.query_targets.front().stresses;
    auto& m = jobs[i].record.metrics;
    m["error"] = relative_error(pred, truth);
    m["mape"] = mean_absolute_percentage(pred, truth);
    if (baselines) {
      m["copy_error"] = relative_error(baseline_copy(jobs[i].prompt), truth);
      m["mean_error"] = relative_error(baseline_mean(jobs[i].prompt), truth);
    }
  }
}

void finish(TaskReport& report, std::vector<Job>& jobs) {
  for (auto& j : jobs) report.cases.push_back(std::move(j.record));
  std::sort(report.cases.begin(), report.cases.end());
}

}  // namespace

TaskReport run_task1(const model::Checkpoint& ck, const dataset::Dataset& ds,
                     const dataset::SplitSpec& split, const Task1Options& opt) {
  check_compatible(ck, ds);
  Rng rng(derive_seed(opt.seed, 0x7a51));
  std::vector<Job> jobs = unseen_material_jobs(ds, split, "unseen_material", opt.k, rng);

  const std::size_t kk = usable_k(opt.k, split.train_materials.size());
  for (lattice::Mask cell : split.test_cells) {
    for (int q : split.train_materials) {
      const int qs[] = {q};
      Job j;
      j.prompt = dataset::make_prompt(ds, split, cell, kk, qs, dataset::PromptMode::kTest, rng);
      j.record = CaseRecord{"unseen_cell", cell, q, kk, 0.0, 0, {}};
      jobs.push_back(std::move(j));
    }
  }
  for (std::size_t k : opt.k_sweep) {
    auto sweep = unseen_material_jobs(ds, split, "k_sweep", k, rng);
    for (auto& j : sweep) jobs.push_back(std::move(j));
  }
  score_full(jobs, predict_all(ck.params, jobs), true);

  TaskReport report;
  report.task = 1;
  report.config = json{{"k", opt.k},
                       {"k_sweep", opt.k_sweep},
                       {"seed", opt.seed},
                       {"context", "train materials; queries disjoint from context"}}
                      .dump();
  finish(report, jobs);
  for (const char* g : {"unseen_material", "unseen_cell"}) {
    for (const char* m : {"error", "mape", "copy_error", "mean_error"}) {
      report.summary[std::string(g) + "." + m] = mean_metric(report.cases, g, m);
    }
  }
  for (std::size_t k : opt.k_sweep) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : report.cases) {
      if (c.group == "k_sweep" && c.k == usable_k(k, split.train_materials.size())) {
        s += c.metrics.at("error");
        ++n;
      }
    }
    report.summary["k_sweep.k" + std::to_string(k) + ".error"] = s / static_cast<double>(n);
  }
  return report;
}

std::string to_string(MaskMode mode) { return mode == MaskMode::kInterp ? "interp" : "extrap"; }

MaskMode parse_mask_mode(const std::string& text) {
  if (text == "interp") return MaskMode::kInterp;
  if (text == "extrap") return MaskMode::kExtrap;
  throw ContractError("unknown mask mode '" + text + "' (expected interp or extrap)");
}

std::vector<std::size_t> mask_indices(const materials::StrainGrid& grid, MaskMode mode) {
  constexpr double kTol = 1e-12;
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < grid.points; ++t) {
    const double e = grid.strain(t);
    const bool in = mode == MaskMode::kInterp ? (e > 0.1 + kTol && e <= 0.3 + kTol)
                                              : (e > 0.3 + kTol);
    if (in) out.push_back(t);
  }
  return out;
}

void apply_mask(std::vector<double>& s, std::span<const std::size_t> masked, MaskMode mode) {
  if (masked.empty()) return;
  const std::size_t lo = masked.front();
  const std::size_t hi = masked.back();
  if (lo == 0) throw ContractError("mask window must leave the first grid point observed");
  if (mode == MaskMode::kInterp) {
    if (hi + 1 >= s.size()) throw ContractError("interp mask needs an observed right neighbour");
    const double a = s[lo - 1];
    const double b = s[hi + 1];
    const double span = static_cast<double>(hi + 2 - lo);
    for (std::size_t t : masked) s[t] = a + (b - a) * static_cast<double>(t - lo + 1) / span;
  } else {
    for (std::size_t t : masked) s[t] = s[lo - 1];
  }
}

TaskReport run_task2(const model::Checkpoint& ck, const dataset::Dataset& ds,
                     const dataset::SplitSpec& split, const Task2Options& opt) {
  check_compatible(ck, ds);
  const auto masked = mask_indices(ds.grid(), opt.mode);
  std::vector<std::size_t> clean;
  for (std::size_t t = 0; t < ds.grid().points; ++t) {
    if (std::find(masked.begin(), masked.end(), t) == masked.end()) clean.push_back(t);
  }
  Rng rng(derive_seed(opt.seed, 0x7a52));
  const std::string group = to_string(opt.mode);
  std::vector<Job> jobs = unseen_material_jobs(ds, split, group, opt.k, rng);
  for (auto& j : jobs) {
    if (opt.target == MaskTarget::kMaterial) {
      apply_mask(j.prompt.query_materials.front().stresses, masked, opt.mode);
    } else {
      for (auto& p : j.prompt.pairs) apply_mask(p.response.stresses, masked, opt.mode);
    }
  }
  const auto preds = predict_all(ck.params, jobs);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto pred = row(preds[i], 0);
    const auto& truth = jobs[i].prompt.query_targets.front().stresses;
    auto& m = jobs[i].record.metrics;
    m["error"] = relative_error(pred, truth);
    m["masked_error"] = relative_error(pick(pred, masked), pick(truth, masked));
    m["clean_error"] = relative_error(pick(pred, clean), pick(truth, clean));
  }
  TaskReport report;
  report.task = 2;
  report.config = json{{"mode", group},
                       {"mask_target", opt.target == MaskTarget::kMaterial ? "material" : "response"},
                       {"masked_indices", masked},
                       {"k", opt.k},
                       {"seed", opt.seed}}
                      .dump();
  finish(report, jobs);
  for (const char* m : {"error", "masked_error", "clean_error"}) {
    report.summary[group + "." + m] = mean_metric(report.cases, group, m);
  }
  return report;
}

dataset::Dataset contaminate(const dataset::Dataset& ds, const dataset::SplitSpec& split,
                             double ratio, double level, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractError("contamination ratio outside [0, 1]");
  std::vector<std::size_t> eligible;
  const auto records = ds.records();
  auto in = [](const auto& v, auto x) { return std::find(v.begin(), v.end(), x) != v.end(); };
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (in(split.train_cells, records[i].cell_mask) &&
        in(split.train_materials, records[i].material_id)) {
      eligible.push_back(i);
    }
  }
  Rng rng(derive_seed(seed, 0xc0de));
  shuffle(eligible, rng);
  eligible.resize(static_cast<std::size_t>(std::floor(ratio * static_cast<double>(eligible.size()))));
  std::sort(eligible.begin(), eligible.end());
  std::vector<dataset::DatasetRecord> out(records.begin(), records.end());
  for (std::size_t i : eligible) {
    for (auto& v : out[i].material_stresses) v *= 1.0 + level * standard_normal(rng);
    for (auto& v : out[i].unit_stresses) v *= 1.0 + level * standard_normal(rng);
  }
  return dataset::Dataset(std::move(out), {ds.materials().begin(), ds.materials().end()},
                          ds.grid(), ds.surrogate(), ds.stress_scale(), ds.normalized());
}

TaskReport run_task3(const model::Checkpoint& ck, const dataset::Dataset& ds,
                     const dataset::SplitSpec& split, const Task3Options& opt) {
  check_compatible(ck, ds);
  if (opt.noise_seeds == 0) throw ContractError("task 3 needs at least one noise seed");
  Rng rng(derive_seed(opt.seed, 0x7a53));
  std::vector<Job> jobs;
  for (std::size_t k : opt.k_list) {
    // Clean prompts are shared by every noise level and seed at this k.
    auto base = unseen_material_jobs(ds, split, "noise", k, rng);
    for (double level : opt.noise_levels) {
      for (std::size_t s = 0; s < opt.noise_seeds; ++s) {
        for (std::size_t b = 0; b < base.size(); ++b) {
          Job j = base[b];
          j.record.noise = level;
          j.record.seed = s;
          Rng noise_rng(derive_seed(opt.seed ^ (s * 0x9e3779b97f4a7c15ULL),
                                    b * 1000003ULL + j.record.k));
          j.prompt = training::inject_prompt_noise(j.prompt, level, noise_rng);
          jobs.push_back(std::move(j));
        }
      }
    }
  }
  score_full(jobs, predict_all(ck.params, jobs), false);

  TaskReport report;
  report.task = 3;
  finish(report, jobs);
  std::map<std::pair<std::size_t, double>, std::pair<double, std::size_t>> cells;
  for (const auto& c : report.cases) {
    if (c.group != "noise") continue;
    auto& [s, n] = cells[{c.k, c.noise}];
    s += c.metrics.at("error");
    ++n;
  }
  for (const auto& [key, sn] : cells) {
    const double mean = sn.first / static_cast<double>(sn.second);
    const std::string name = "noise" + key_number(key.second) + ".k" + std::to_string(key.first);
    report.summary[name + ".error"] = mean;
    auto clean = cells.find({key.first, 0.0});
    if (clean != cells.end()) {
      report.summary[name + ".delta"] =
          mean - clean->second.first / static_cast<double>(clean->second.second);
    }
  }

  json contamination = json::array();
  if (!opt.contamination_ratios.empty()) {
    if (opt.work_dir.empty()) throw ContractError("contamination runs need a work directory");
    training::TrainConfig tc = opt.train;
    tc.model = ck.params.config;
    tc.steps = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(opt.finetune_fraction *
                                                 static_cast<double>(opt.train.steps))));
    tc.checkpoint_every = 0;
    const std::size_t k_eval = opt.k_list.empty() ? 5 : opt.k_list.back();
    std::vector<double> ratios = {0.0};
    ratios.insert(ratios.end(), opt.contamination_ratios.begin(), opt.contamination_ratios.end());
    double control = 0.0;
    for (double ratio : ratios) {
      const auto data = contaminate(ds, split, ratio, opt.contamination_level, opt.seed);
      auto state = training::init_state(tc, ck.params);
      const auto dir = opt.work_dir / ("contamination_" + key_number(ratio));
      training::train(tc, data, split, state, dir);
      Rng eval_rng(derive_seed(opt.seed, 0x7a54));
      auto eval = unseen_material_jobs(ds, split, "contamination", k_eval, eval_rng);
      score_full(eval, predict_all(state.params, eval), false);
      for (auto& j : eval) j.record.noise = ratio;
      double s = 0.0;
      for (const auto& j : eval) s += j.record.metrics.at("error");
      const double mean = s / static_cast<double>(eval.size());
      if (ratio == 0.0) control = mean;
      const std::string name = "contamination" + key_number(ratio);
      report.summary[name + ".error"] = mean;
      report.summary[name + ".delta"] = mean - control;
      contamination.push_back({{"ratio", ratio}, {"steps", tc.steps}, {"error", mean}});
      for (auto& j : eval) report.cases.push_back(std::move(j.record));
    }
    std::sort(report.cases.begin(), report.cases.end());
  }
  report.config = json{{"noise_levels", opt.noise_levels},
                       {"k_list", opt.k_list},
                       {"noise_seeds", opt.noise_seeds},
                       {"seed", opt.seed},
                       {"contamination_ratios", opt.contamination_ratios},
                       {"contamination_level", opt.contamination_level},
                       {"finetune_fraction", opt.finetune_fraction},
                       {"contamination_runs", contamination}}
                      .dump();
  return report;
}

TaskReport run_task4(const inverse::InverseParams& params, const dataset::Dataset& ds,
                     std::span<const lattice::Mask> cells, const Task4Options& opt) {
  const auto eval = inverse::inverse_evaluate(params, ds, cells, opt.samples, opt.pairs_min,
                                              opt.pairs_max, opt.tau, opt.seed);
  TaskReport report;
  report.task = 4;
  std::size_t index = 0;
  for (const auto& c : eval.cases) {
    CaseRecord r;
    r.group = "inverse";
    r.cell_mask = c.cell_mask;
    r.material_id = c.material_ids.empty() ? -1 : c.material_ids.front();
    r.k = c.material_ids.size();
    r.seed = index++;
    const double tp = static_cast<double>(c.true_positives);
    const double fp = static_cast<double>(c.false_positives);
    const double fn = static_cast<double>(c.false_negatives);
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    r.metrics["precision"] = precision;
    r.metrics["recall"] = recall;
    r.metrics["f1"] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    r.metrics["exact"] = c.exact ? 1.0 : 0.0;
    report.cases.push_back(std::move(r));
  }
  std::sort(report.cases.begin(), report.cases.end());
  report.summary["edge_precision"] = eval.edge_precision;
  report.summary["edge_recall"] = eval.edge_recall;
  report.summary["edge_f1"] = eval.edge_f1;
  report.summary["exact_match_rate"] = eval.exact_match_rate;
  report.summary["n_cells"] = static_cast<double>(eval.n_cells);
  report.summary["n_evaluations"] = static_cast<double>(eval.n_evaluations);
  report.config = json{{"samples", opt.samples},
                       {"pairs_min", opt.pairs_min},
                       {"pairs_max", opt.pairs_max},
                       {"tau", opt.tau},
                       {"seed", opt.seed},
                       {"candidate_pairs", lattice::candidate_pairs().size()}}
                      .dump();
  return report;
}

}  // namespace metafo::tasks
