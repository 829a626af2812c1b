#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "metafo/bundle.hpp"
#include "metafo/dataset.hpp"
#include "metafo/errors.hpp"

using namespace metafo;
using namespace metafo::dataset;

namespace fs = std::filesystem;

namespace {

std::vector<materials::Material> make_materials(int n, std::uint64_t seed = 5) {
  std::vector<materials::Material> out;
  for (int i = 0; i < n; ++i) out.push_back(materials::sample_material(seed, i));
  return out;
}

Dataset small_dataset(int n_materials = 10) {
  const auto masks = lattice::enumerate_masks(lattice::parse_basis_set("0,2,6,9"));
  const auto mats = make_materials(n_materials);
  return build_dataset(masks, mats, materials::StrainGrid{});
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("metafo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("record counts") {
    const auto four = lattice::enumerate_masks(lattice::parse_basis_set("0,2,6,9"));
    CHECK(build_dataset(four, make_materials(2), materials::StrainGrid{}).records().size() == 30);
    const auto ds = small_dataset();
    CHECK(ds.records().size() == 150);
    CHECK(ds.cell_masks().size() == 15);
    const auto masks = ds.cell_masks();
    CHECK(std::is_sorted(masks.begin(), masks.end()));
  }

  TEST_CASE("records match the surrogate") {
    const auto ds = small_dataset(3);
    for (const auto& r : ds.records()) {
      const auto mat = ds.materials()[static_cast<std::size_t>(r.material_id)];
      const auto truth = surrogate::simulate(mat, lattice::combine(r.cell_mask), ds.grid());
      REQUIRE(r.unit_stresses == truth.stresses);
      REQUIRE(r.material_stresses == materials::material_curve(mat, ds.grid()).stresses);
    }
  }

  TEST_CASE("duplicate material ids are rejected") {
    auto mats = make_materials(2);
    mats[1].id = mats[0].id;
    const Mask cells[] = {1};
    CHECK_THROWS_AS(build_dataset(cells, mats, materials::StrainGrid{}), ContractError);
  }

  TEST_CASE("normalization roundtrip") {
    const auto ds = small_dataset(4);
    const auto n = normalize(ds);
    CHECK(n.normalized());
    double peak = 0.0;
    for (const auto& r : n.records())
      for (double s : r.material_stresses) peak = std::max(peak, s);
    CHECK(peak == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(normalize(n), ContractError);
    const auto back = denormalize(n);
    for (std::size_t i = 0; i < ds.records().size(); ++i) {
      const auto& a = ds.records()[i];
      const auto& b = back.records()[i];
      for (std::size_t t = 0; t < a.unit_stresses.size(); ++t) {
        REQUIRE(std::abs(a.unit_stresses[t] - b.unit_stresses[t]) <=
                1e-12 * std::max(1.0, std::abs(a.unit_stresses[t])));
      }
    }
  }

  TEST_CASE("split sizes and determinism") {
    const auto ds = small_dataset();
    const auto s = split(ds, 3);
    CHECK(s.train_materials.size() == 8);
    CHECK(s.test_materials.size() == 2);
    CHECK(s.train_cells.size() == 12);
    CHECK(s.test_cells.size() == 3);
    CHECK(s == split(ds, 3));
    CHECK_FALSE(s == split(ds, 4));
    std::set<Mask> cells(s.train_cells.begin(), s.train_cells.end());
    for (Mask m : s.test_cells) CHECK(cells.count(m) == 0);
    CHECK(split_from_json(to_json(s)) == s);

    const auto all = lattice::enumerate_masks();
    const auto big = build_dataset(all, make_materials(5), materials::StrainGrid{});
    const auto bs = split(big, 0);
    CHECK(bs.train_cells.size() == 819);
    CHECK(bs.test_cells.size() == 204);
  }

  TEST_CASE("too small to split") {
    const Mask cells[] = {1, 2};
    const auto ds = build_dataset(cells, make_materials(1), materials::StrainGrid{});
    CHECK_THROWS(split(ds, 0));
  }

  TEST_CASE("prompt construction") {
    const auto ds = normalize(small_dataset());
    const auto s = split(ds, 1);
    Rng rng(9);
    const int q[] = {s.train_materials[0]};
    const auto p = make_prompt(ds, s, s.train_cells[0], 3, q, PromptMode::kTrain, rng);
    CHECK(p.k() == 3);
    CHECK(p.n() == 1);
    CHECK(p.cell_mask == s.train_cells[0]);
    CHECK_NOTHROW(p.validate());
    std::set<int> ids(p.prompt_material_ids.begin(), p.prompt_material_ids.end());
    CHECK(ids.size() == 3);
    CHECK(ids.count(q[0]) == 0);
    for (int id : ids) {
      CHECK(std::find(s.train_materials.begin(), s.train_materials.end(), id) !=
            s.train_materials.end());
    }
    CHECK(p.query_targets[0] == ds.response_curve(p.cell_mask, q[0]));
    CHECK_THROWS(make_prompt(ds, s, s.train_cells[0], 8, q, PromptMode::kTrain, rng));

    const int unseen[] = {s.test_materials[0]};
    CHECK_THROWS(make_prompt(ds, s, s.train_cells[0], 2, unseen, PromptMode::kTrain, rng));
    const auto t = make_prompt(ds, s, s.test_cells[0], 2, unseen, PromptMode::kTest, rng);
    CHECK(t.query_material_ids[0] == unseen[0]);
  }

  TEST_CASE("prompt validation") {
    const auto ds = small_dataset(3);
    const int prompt_ids[] = {0, 1};
    const int query_ids[] = {2};
    auto p = assemble_prompt(ds, 1, prompt_ids, query_ids);
    CHECK_NOTHROW(p.validate());
    auto bad = p;
    bad.pairs[1].response.strains.pop_back();
    bad.pairs[1].response.stresses.pop_back();
    CHECK_THROWS(bad.validate());
    bad = p;
    bad.pairs.clear();
    CHECK_THROWS(bad.validate());
    bad = p;
    bad.query_materials[0].strains[3] += 0.001;
    CHECK_THROWS(bad.validate());
  }

  TEST_CASE("save and load roundtrip, byte-identical rebuild") {
    const auto dir = temp_dir("dataset");
    const auto ds = normalize(small_dataset(3));
    save(ds, dir / "a.jsonl");
    save(normalize(small_dataset(3)), dir / "b.jsonl");
    CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
    CHECK(file_digest(dir / "a.jsonl") == file_digest(dir / "b.jsonl"));
    const auto back = load(dir / "a.jsonl");
    CHECK(back == ds);
    CHECK(back.stress_scale() == ds.stress_scale());
  }

  TEST_CASE("malformed files name the bad line") {
    const auto dir = temp_dir("dataset_bad");
    save(small_dataset(2), dir / "ok.jsonl");
    const auto text = slurp(dir / "ok.jsonl");

    // Truncate in the middle of the fourth line.
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) pos = text.find('\n', pos) + 1;
    {
      std::ofstream out(dir / "trunc.jsonl", std::ios::binary);
      out << text.substr(0, pos + 10);
    }
    try {
      load(dir / "trunc.jsonl");
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(e.line() == 4);
    }

    auto versioned = text;
    versioned.replace(versioned.find(kFormatVersion), std::string(kFormatVersion).size(),
                      "metafo-ds-0");
    {
      std::ofstream out(dir / "version.jsonl", std::ios::binary);
      out << versioned;
    }
    try {
      load(dir / "version.jsonl");
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(e.line() == 1);
    }
  }
}

TEST_SUITE("bundle") {
  TEST_CASE("roundtrip is exact") {
    const auto dir = temp_dir("bundle");
    Bundle b{"test", R"({"a":1})", {}};
    b.tensors.emplace_back("x", Tensor::matrix(2, 2, {0.1, -1e-300, 1e300, 3.0}));
    b.tensors.emplace_back("y", Tensor::vector({1.0 / 3.0}));
    write_bundle(dir / "b.bin", b);
    const auto r = read_bundle(dir / "b.bin");
    CHECK(r.kind == "test");
    CHECK(r.tensor("x") == b.tensors[0].second);
    CHECK(r.tensor("y") == b.tensors[1].second);
  }

  TEST_CASE("tampering is detected") {
    const auto dir = temp_dir("bundle_bad");
    Bundle b{"test", "{}", {{"x", Tensor::vector({1.0, 2.0})}}};
    write_bundle(dir / "b.bin", b);
    auto bytes = slurp(dir / "b.bin");

    auto magic = bytes;
    magic[0] = 'X';
    std::ofstream(dir / "magic.bin", std::ios::binary) << magic;
    CHECK_THROWS_AS(read_bundle(dir / "magic.bin"), FormatError);

    auto version = bytes;
    version[8] = 2;
    std::ofstream(dir / "version.bin", std::ios::binary) << version;
    CHECK_THROWS_AS(read_bundle(dir / "version.bin"), FormatError);

    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(read_bundle(dir / "short.bin"), FormatError);

    std::ofstream(dir / "long.bin", std::ios::binary) << bytes + "x";
    CHECK_THROWS_AS(read_bundle(dir / "long.bin"), FormatError);
  }

  TEST_CASE("digests") {
    const auto dir = temp_dir("digest");
    std::ofstream(dir / "a.txt") << "hello";
    // FNV-1a 64 of "hello".
    CHECK(file_digest(dir / "a.txt") == "a430d84680aabd0b");
    const auto d1 = directory_digest(dir);
    std::ofstream(dir / "b.txt") << "x";
    CHECK(directory_digest(dir) != d1);
  }
}
