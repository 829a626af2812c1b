#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "metafo/errors.hpp"
#include "metafo/gradcheck.hpp"
#include "metafo/inverse.hpp"
#include "metafo/tasks.hpp"

#include "json.hpp"

using namespace metafo;
using namespace metafo::inverse;
using nlohmann::json;

namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.d_inp = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.hidden = 16;
  cfg.noise_bank = 4;
  cfg.grid_points = 5;
  return cfg;
}

const dataset::Dataset& tiny_dataset() {
  static const dataset::Dataset ds = [] {
    const auto masks = lattice::enumerate_masks(lattice::parse_basis_set("0,2,6,9"));
    std::vector<materials::Material> mats;
    for (int i = 0; i < 8; ++i) mats.push_back(materials::sample_material(4, i));
    return dataset::normalize(
        dataset::build_dataset(masks, mats, materials::StrainGrid{5, 0.5}));
  }();
  return ds;
}

std::vector<dataset::CurvePair> targets(lattice::Mask cell, std::initializer_list<int> ids) {
  std::vector<dataset::CurvePair> out;
  for (int id : ids) {
    out.push_back({tiny_dataset().material_curve(id), tiny_dataset().response_curve(cell, id)});
  }
  return out;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("metafo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

LikelihoodMatrix constant_matrix(double v) {
  const std::size_t n = lattice::node_count();
  Tensor a({n, n}, v);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 0.0;
  return {a};
}

}  // namespace

TEST_SUITE("inverse") {
  TEST_CASE("likelihood matrix is a symmetric probability matrix") {
    const auto params = init_inverse_params(tiny_config(), 1);
    CHECK(params.weights.scalar_count() == expected_inverse_parameter_count(tiny_config()));
    const auto a = inverse_forward(params, targets(5, {0, 1}), canonical_coordinates()).a;
    const std::size_t n = lattice::node_count();
    CHECK(a.shape() == Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(a(i, i) == 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        REQUIRE(a(i, j) >= 0.0);
        REQUIRE(a(i, j) <= 1.0);
        REQUIRE(a(i, j) == a(j, i));
      }
    }
  }

  TEST_CASE("target order does not matter") {
    const auto params = init_inverse_params(tiny_config(), 2);
    const auto coords = canonical_coordinates();
    const auto a = inverse_forward(params, targets(69, {0, 1, 2}), coords).a;
    const auto b = inverse_forward(params, targets(69, {2, 0, 1}), coords).a;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst < 1e-6);
  }

  TEST_CASE("grid mismatch is rejected") {
    const auto params = init_inverse_params(tiny_config(), 2);
    auto t = targets(69, {0, 1});
    t[1].response.strains[1] += 0.01;
    CHECK_THROWS(inverse_forward(params, t, canonical_coordinates()));
  }

  TEST_CASE("threshold is strict") {
    const std::size_t n = lattice::node_count();
    const auto full = threshold(constant_matrix(0.9));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) REQUIRE(full(i, j) == (i == j ? 0.0 : 1.0));
    CHECK(threshold(constant_matrix(0.1)) == Tensor({n, n}, 0.0));
    CHECK(threshold(constant_matrix(0.5), 0.5) == Tensor({n, n}, 0.0));
    CHECK_THROWS_AS(threshold(constant_matrix(0.5), 1.0), ContractError);
    CHECK_THROWS_AS(threshold(constant_matrix(0.5), 0.0), ContractError);
  }

  TEST_CASE("edge loss values") {
    const auto pairs = lattice::candidate_pairs();
    const auto truth = lattice::adjacency(lattice::combine(0x41));
    CHECK(std::abs(edge_bce_loss(constant_matrix(0.5), truth, pairs) - std::log(2.0)) < 1e-12);
    LikelihoodMatrix perfect{truth};
    CHECK(edge_bce_loss(perfect, truth, pairs) < 1e-12);
    const std::size_t n = truth.rows();
    Tensor flipped_truth({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) flipped_truth(i, j) = truth(j, i);
    CHECK(edge_bce_loss(constant_matrix(0.3), truth, pairs) ==
          edge_bce_loss(constant_matrix(0.3), flipped_truth, pairs));
  }

  TEST_CASE("scoring") {
    const auto pairs = lattice::candidate_pairs();
    const auto truth = lattice::adjacency(lattice::combine(0x41));
    const auto perfect = score_prediction(truth, truth, pairs);
    CHECK(perfect.exact);
    CHECK(perfect.false_positives == 0);
    CHECK(perfect.false_negatives == 0);
    const auto r = summarize({perfect, perfect}, 0.5);
    CHECK(r.edge_f1 == 1.0);
    CHECK(r.exact_match_rate == 1.0);

    const auto half = score_prediction(threshold(constant_matrix(0.5)), truth, pairs);
    CHECK(half.true_positives == 0);
    CHECK(summarize({half}, 0.5).edge_recall == 0.0);
    CHECK_FALSE(half.exact);
  }

  TEST_CASE("fold split partitions the cells") {
    const auto& ds = tiny_dataset();
    std::multiset<lattice::Mask> held;
    for (std::size_t f = 0; f < 5; ++f) {
      const auto s = fold_split(ds, 5, f, 3);
      CHECK(s.test_cells.size() == 3);
      CHECK(s.train_cells.size() == 12);
      CHECK(s.train_materials.size() == ds.materials().size());
      held.insert(s.test_cells.begin(), s.test_cells.end());
    }
    CHECK(held.size() == 15);
    CHECK(std::set<lattice::Mask>(held.begin(), held.end()).size() == 15);
    CHECK_THROWS(fold_split(ds, 5, 5, 3));
  }

  TEST_CASE("inverse gradient check") {
    auto params = init_inverse_params(tiny_config(), 9);
    const auto t = targets(513, {1, 3});
    const auto coords = canonical_coordinates();
    const auto pairs = lattice::candidate_pairs();
    const auto truth = lattice::adjacency(lattice::combine(513));
    Tensor labels({pairs.size(), 1}, 0.0);
    for (std::size_t i = 0; i < pairs.size(); ++i) labels[i] = truth(pairs[i].a, pairs[i].b);
    GradCheckOptions opt;
    opt.max_coordinates = 300;
    const auto report = finite_diff_check(
        [&](Tape& tape, const ParamSet&) {
          return tape.bce_with_logits(edge_logits_graph(tape, params, t, coords, pairs), labels);
        },
        params.weights, opt);
    CAPTURE(report.max_relative_error);
    CHECK(report.passed());
  }

  TEST_CASE("training is seeded and writes the report") {
    InverseTrainConfig cfg;
    cfg.model = tiny_config();
    cfg.steps = 15;
    cfg.batch_size = 2;
    cfg.eval_samples = 2;
    cfg.log_every = 5;
    CHECK(inverse_config_from_json(to_json(cfg)) == cfg);
    const auto& ds = tiny_dataset();
    const auto s = fold_split(ds, 5, 0, 0);
    const auto a = inverse_train(cfg, ds, s, temp_dir("inv_a"));
    const auto b = inverse_train(cfg, ds, s, temp_dir("inv_b"));
    CHECK(a.losses == b.losses);
    for (double l : a.losses) CHECK(std::isfinite(l));
    const auto report = json::parse(to_json(a.eval));
    CHECK(report.contains("edge_f1"));
    CHECK(report.contains("exact_match_rate"));
    CHECK(report["n_cells"] == 3);

    const auto ck = load_inverse_checkpoint(temp_dir("inv_a") / ".." / "metafo_test_inv_b" /
                                            "inverse.ckpt");
    const auto tg = targets(s.test_cells[0], {0});
    CHECK(inverse_forward(ck.params, tg, canonical_coordinates()).a ==
          inverse_forward(b.params, tg, canonical_coordinates()).a);
  }

  TEST_CASE("graph json") {
    const auto adj = lattice::adjacency(lattice::combine(64));
    const auto g = json::parse(graph_json(adj, 0.5));
    CHECK(g["edges"].size() == 12);
    CHECK(g["nodes"].size() == lattice::node_count());
  }
}

TEST_SUITE("tasks") {
  using namespace metafo::tasks;

  TEST_CASE("relative error") {
    const std::vector<double> truth{3, 4};
    CHECK(relative_error(truth, truth) == 0.0);
    CHECK(relative_error(std::vector<double>{6, 8}, truth) == doctest::Approx(100.0));
    CHECK(relative_error(std::vector<double>{3, 9}, truth) == doctest::Approx(100.0));
    CHECK_THROWS_AS(relative_error(truth, std::vector<double>{0, 0}), DomainError);
    CHECK(mean_absolute_percentage(std::vector<double>{0, 2, 6}, std::vector<double>{0, 4, 4}) ==
          doctest::Approx(50.0));
  }

  TEST_CASE("baselines") {
    const int p[] = {0, 1};
    const int q[] = {2};
    const auto pr = dataset::assemble_prompt(tiny_dataset(), 5, p, q);
    CHECK(baseline_copy(pr) == pr.query_materials[0].stresses);
    const auto mean = baseline_mean(pr);
    for (std::size_t t = 0; t < mean.size(); ++t) {
      CHECK(mean[t] == doctest::Approx(0.5 * (pr.pairs[0].response.stresses[t] +
                                              pr.pairs[1].response.stresses[t])));
    }
  }

  TEST_CASE("aggregates") {
    const auto a = aggregate({5, 1, 3, 2, 4});
    CHECK(a.count == 5);
    CHECK(a.mean == 3.0);
    CHECK(a.median == 3.0);
    CHECK(a.p95 == 5.0);
    CHECK(aggregate({1, 2, 3, 4}).median == 2.5);
  }

  TEST_CASE("mask windows on the default grid") {
    const materials::StrainGrid g;
    const auto interp = mask_indices(g, MaskMode::kInterp);
    CHECK(interp == std::vector<std::size_t>{5, 6, 7, 8, 9, 10, 11, 12});
    const auto extrap = mask_indices(g, MaskMode::kExtrap);
    CHECK(extrap.front() == 13);
    CHECK(extrap.back() == 20);
    CHECK(extrap.size() == 8);

    std::vector<double> s(21);
    for (std::size_t t = 0; t < 21; ++t) s[t] = double(t * t);
    auto lin = s;
    apply_mask(lin, interp, MaskMode::kInterp);
    for (std::size_t t : interp) CHECK(lin[t] == doctest::Approx(16.0 + (t - 4) * (169.0 - 16.0) / 9.0));
    CHECK(lin[4] == 16.0);
    CHECK(lin[13] == 169.0);
    auto ext = s;
    apply_mask(ext, extrap, MaskMode::kExtrap);
    for (std::size_t t : extrap) CHECK(ext[t] == 144.0);
    CHECK(parse_mask_mode("extrap") == MaskMode::kExtrap);
    CHECK_THROWS(parse_mask_mode("both"));
  }

  TEST_CASE("contamination touches only train records") {
    const auto& ds = tiny_dataset();
    const auto s = dataset::split(ds, 0);
    const auto c = contaminate(ds, s, 0.3, 0.05, 1);
    std::size_t changed = 0, train_records = 0;
    for (std::size_t i = 0; i < ds.records().size(); ++i) {
      const auto& a = ds.records()[i];
      const bool train =
          std::count(s.train_cells.begin(), s.train_cells.end(), a.cell_mask) &&
          std::count(s.train_materials.begin(), s.train_materials.end(), a.material_id);
      train_records += train;
      if (!(a == c.records()[i])) {
        CHECK(train);
        ++changed;
      }
    }
    CHECK(changed == static_cast<std::size_t>(0.3 * train_records));
    CHECK(contaminate(ds, s, 0.0, 0.05, 1) == ds);
  }

  TEST_CASE("task 1 report contract") {
    const auto& ds = tiny_dataset();
    const auto s = dataset::split(ds, 0);
    model::Checkpoint ck{model::init_params(tiny_config(), 0), ds.stress_scale()};
    const auto r = run_task1(ck, ds, s);
    std::set<std::string> groups;
    std::set<std::size_t> ks;
    for (const auto& c : r.cases) {
      groups.insert(c.group);
      if (c.group == "k_sweep") ks.insert(c.k);
    }
    CHECK(groups.count("unseen_material"));
    CHECK(groups.count("unseen_cell"));
    CHECK(ks == std::set<std::size_t>{1, 2, 3, 4, 5});
    CHECK(r.summary.count("unseen_material.error"));
    CHECK(r.summary.count("unseen_material.copy_error"));
    CHECK(std::is_sorted(r.cases.begin(), r.cases.end()));
    const auto dir = temp_dir("task1");
    write_report(r, dir);
    CHECK(fs::exists(dir / "report.json"));
    CHECK(fs::exists(dir / "cases.csv"));
    CHECK(json::parse(to_json(r))["task"] == 1);

    model::Checkpoint wrong{ck.params, ds.stress_scale() * 2};
    CHECK_THROWS(check_compatible(wrong, ds));
  }

  TEST_CASE("task 2 reports both windows") {
    const auto& ds = tiny_dataset();
    const auto s = dataset::split(ds, 0);
    model::Checkpoint ck{model::init_params(tiny_config(), 0), ds.stress_scale()};
    const auto r = run_task2(ck, ds, s, {MaskMode::kExtrap});
    CHECK(r.summary.count("extrap.masked_error"));
    CHECK(r.summary.count("extrap.clean_error"));
  }

  TEST_CASE("task 4 with a perfect and a tied predictor") {
    const auto& ds = tiny_dataset();
    const auto params = init_inverse_params(tiny_config(), 0);
    const lattice::Mask cells[] = {1, 5};
    const auto r = run_task4(params, ds, cells, {.samples = 2});
    CHECK(r.summary.count("edge_f1"));
    CHECK(r.summary.count("exact_match_rate"));
  }
}
