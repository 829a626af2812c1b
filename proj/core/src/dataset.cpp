#include "metafo/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"

#include "metafo/errors.hpp"
#include "serialization.hpp"

namespace metafo::dataset {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::vector<DatasetRecord> records, std::vector<materials::Material> mats,
                 materials::StrainGrid grid, surrogate::SurrogateSpec spec, double stress_scale,
                 bool normalized)
    : records_(std::move(records)),
      materials_(std::move(mats)),
      grid_(grid),
      spec_(std::move(spec)),
      stress_scale_(stress_scale),
      normalized_(normalized) {
  index();
}

void Dataset::index() {
  index_.clear();
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto key = std::make_pair(records_[i].cell_mask, records_[i].material_id);
    if (!index_.emplace(key, i).second) {
      throw ContractError("duplicate record for cell " + std::to_string(key.first) +
                          ", material " + std::to_string(key.second));
    }
  }
}

std::vector<Mask> Dataset::cell_masks() const {
  std::set<Mask> masks;
  for (const auto& r : records_) masks.insert(r.cell_mask);
  return {masks.begin(), masks.end()};
}

std::vector<int> Dataset::material_ids() const {
  std::vector<int> ids;
  ids.reserve(materials_.size());
  for (const auto& m : materials_) ids.push_back(m.id);
  return ids;
}

const DatasetRecord& Dataset::record(Mask cell, int material_id) const {
  auto it = index_.find({cell, material_id});
  if (it == index_.end()) {
    throw ContractError("no record for cell " + std::to_string(cell) + ", material " +
                        std::to_string(material_id));
  }
  return records_[it->second];
}

bool Dataset::contains(Mask cell, int material_id) const {
  return index_.contains({cell, material_id});
}

Curve Dataset::material_curve(int material_id) const {
  for (const auto& r : records_) {
    if (r.material_id == material_id) return Curve{r.strains, r.material_stresses};
  }
  throw ContractError("no record for material " + std::to_string(material_id));
}

Curve Dataset::response_curve(Mask cell, int material_id) const {
  const auto& r = record(cell, material_id);
  return Curve{r.strains, r.unit_stresses};
}

bool Dataset::operator==(const Dataset& other) const {
  return records_ == other.records_ && materials_ == other.materials_ && grid_ == other.grid_ &&
         spec_ == other.spec_ && stress_scale_ == other.stress_scale_ &&
         normalized_ == other.normalized_;
}

// ---------------------------------------------------------------------------
// Construction and normalization

Dataset build_dataset(std::span<const Mask> cells, std::span<const materials::Material> mats,
                      const materials::StrainGrid& grid, const surrogate::SurrogateSpec& spec) {
  if (cells.empty() || mats.empty()) throw ContractError("dataset needs cells and materials");
  grid.validate();
  spec.validate();
  std::set<int> ids;
  for (const auto& m : mats) {
    materials::validate(m);
    if (!ids.insert(m.id).second) {
      throw ContractError("duplicate material id " + std::to_string(m.id));
    }
  }
  std::vector<Mask> sorted_cells(cells.begin(), cells.end());
  std::sort(sorted_cells.begin(), sorted_cells.end());
  if (std::adjacent_find(sorted_cells.begin(), sorted_cells.end()) != sorted_cells.end()) {
    throw ContractError("duplicate cell mask");
  }
  std::vector<materials::Material> sorted_mats(mats.begin(), mats.end());
  std::sort(sorted_mats.begin(), sorted_mats.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });

  std::vector<Curve> material_curves;
  for (const auto& m : sorted_mats) material_curves.push_back(materials::material_curve(m, grid));

  std::vector<DatasetRecord> records;
  records.reserve(sorted_cells.size() * sorted_mats.size());
  for (Mask cell : sorted_cells) {
    const auto geo = surrogate::geometry(lattice::combine(cell), spec);
    for (std::size_t i = 0; i < sorted_mats.size(); ++i) {
      auto response = surrogate::simulate(sorted_mats[i], geo, grid, spec);
      records.push_back(DatasetRecord{cell, sorted_mats[i].id, material_curves[i].strains,
                                      material_curves[i].stresses,
                                      std::move(response.stresses)});
    }
  }
  return Dataset(std::move(records), std::move(sorted_mats), grid, spec, 1.0, false);
}

namespace {

Dataset rescale(const Dataset& ds, double factor, double new_scale, bool normalized) {
  std::vector<DatasetRecord> records(ds.records().begin(), ds.records().end());
  for (auto& r : records) {
    for (auto& v : r.material_stresses) v *= factor;
    for (auto& v : r.unit_stresses) v *= factor;
  }
  return Dataset(std::move(records), {ds.materials().begin(), ds.materials().end()}, ds.grid(),
                 ds.surrogate(), new_scale, normalized);
}

}  // namespace

Dataset normalize(const Dataset& ds) {
  if (ds.normalized() || ds.stress_scale() != 1.0) {
    throw ContractError("dataset is already normalized");
  }
  double scale = 0.0;
  for (const auto& r : ds.records()) {
    for (double v : r.material_stresses) scale = std::max(scale, v);
  }
  if (!(scale > 0.0)) throw ContractError("cannot normalize: no positive material stress");
  std::vector<DatasetRecord> records(ds.records().begin(), ds.records().end());
  for (auto& r : records) {
    for (auto& v : r.material_stresses) v /= scale;
    for (auto& v : r.unit_stresses) v /= scale;
  }
  return Dataset(std::move(records), {ds.materials().begin(), ds.materials().end()}, ds.grid(),
                 ds.surrogate(), scale, true);
}

Dataset denormalize(const Dataset& ds) {
  if (!ds.normalized()) throw ContractError("dataset is not normalized");
  return rescale(ds, ds.stress_scale(), 1.0, false);
}

// ---------------------------------------------------------------------------
// Split and prompts

SplitSpec split(const Dataset& ds, std::uint64_t seed) {
  auto cells = ds.cell_masks();
  auto mats = ds.material_ids();
  if (cells.size() < 5 || mats.size() < 5) {
    throw ContractError("split needs at least 5 cells and 5 materials");
  }
  Rng rng(derive_seed(seed, 0x5911));
  shuffle(cells, rng);
  shuffle(mats, rng);
  const std::size_t test_cells = cells.size() / 5;
  const std::size_t test_mats = mats.size() / 5;
  SplitSpec s;
  s.seed = seed;
  s.train_cells.assign(cells.begin(), cells.end() - static_cast<std::ptrdiff_t>(test_cells));
  s.test_cells.assign(cells.end() - static_cast<std::ptrdiff_t>(test_cells), cells.end());
  s.train_materials.assign(mats.begin(), mats.end() - static_cast<std::ptrdiff_t>(test_mats));
  s.test_materials.assign(mats.end() - static_cast<std::ptrdiff_t>(test_mats), mats.end());
  std::sort(s.train_cells.begin(), s.train_cells.end());
  std::sort(s.test_cells.begin(), s.test_cells.end());
  std::sort(s.train_materials.begin(), s.train_materials.end());
  std::sort(s.test_materials.begin(), s.test_materials.end());
  return s;
}

std::string to_json(const SplitSpec& s) {
  json j = {{"seed", s.seed},
            {"train_cells", s.train_cells},
            {"test_cells", s.test_cells},
            {"train_materials", s.train_materials},
            {"test_materials", s.test_materials}};
  return j.dump(2);
}

SplitSpec split_from_json(const std::string& text) {
  SplitSpec s;
  try {
    const json j = json::parse(text);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_cells = j.at("train_cells").get<std::vector<Mask>>();
    s.test_cells = j.at("test_cells").get<std::vector<Mask>>();
    s.train_materials = j.at("train_materials").get<std::vector<int>>();
    s.test_materials = j.at("test_materials").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed split: ") + e.what());
  }
  return s;
}

void PromptInstance::validate() const {
  if (pairs.empty()) throw ContractError("prompt needs at least one known pair");
  if (query_materials.empty()) throw ContractError("prompt needs at least one query");
  if (!query_targets.empty() && query_targets.size() != query_materials.size()) {
    throw ContractError("prompt query targets do not match queries");
  }
  const auto& grid = pairs.front().material.strains;
  auto check = [&](const Curve& c) {
    c.validate();
    if (c.strains != grid) throw DimensionError("prompt curves do not share one strain grid");
  };
  for (const auto& p : pairs) {
    check(p.material);
    check(p.response);
  }
  for (const auto& q : query_materials) check(q);
  for (const auto& q : query_targets) check(q);
}

PromptInstance assemble_prompt(const Dataset& ds, Mask cell, std::span<const int> prompt_ids,
                               std::span<const int> query_ids) {
  PromptInstance p;
  p.cell_mask = cell;
  for (int id : prompt_ids) {
    const auto& r = ds.record(cell, id);
    p.pairs.push_back({Curve{r.strains, r.material_stresses}, Curve{r.strains, r.unit_stresses}});
    p.prompt_material_ids.push_back(id);
  }
  for (int id : query_ids) {
    const auto& r = ds.record(cell, id);
    p.query_materials.push_back(Curve{r.strains, r.material_stresses});
    p.query_targets.push_back(Curve{r.strains, r.unit_stresses});
    p.query_material_ids.push_back(id);
  }
  p.validate();
  return p;
}

PromptInstance make_prompt(const Dataset& ds, const SplitSpec& split, Mask cell, std::size_t k,
                           std::span<const int> query_ids, PromptMode mode, Rng& rng) {
  if (k == 0) throw ContractError("prompt needs k >= 1");
  if (query_ids.empty()) throw ContractError("prompt needs at least one query");
  auto contains = [](const auto& v, auto x) { return std::find(v.begin(), v.end(), x) != v.end(); };
  if (mode == PromptMode::kTrain) {
    if (!contains(split.train_cells, cell)) {
      throw ContractError("train-mode prompt uses a cell outside the train partition");
    }
    for (int q : query_ids) {
      if (!contains(split.train_materials, q)) {
        throw ContractError("train-mode prompt queries a material outside the train partition");
      }
    }
  }
  std::vector<int> pool;
  for (int id : split.train_materials) {
    if (!contains(query_ids, id)) pool.push_back(id);
  }
  if (pool.size() < k) {
    throw ContractError("not enough train materials for k=" + std::to_string(k) +
                        " context pairs disjoint from the queries");
  }
  // Partial Fisher-Yates: the first k entries are a uniform sample in order.
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, i, pool.size() - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return assemble_prompt(ds, cell, pool, query_ids);
}

// ---------------------------------------------------------------------------
// JSON-Lines I/O

void save(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  json meta;
  meta["version"] = kFormatVersion;
  meta["grid"] = metafo::to_json(ds.grid());
  meta["materials"] = json::array();
  for (const auto& m : ds.materials()) meta["materials"].push_back(metafo::to_json(m));
  meta["surrogate"] = metafo::to_json(ds.surrogate());
  meta["stress_scale"] = ds.stress_scale();
  meta["normalized"] = ds.normalized();
  meta["record_count"] = ds.records().size();
  meta["lattice"] = lattice_metadata();
  meta["cells"] = json::array();
  for (Mask m : ds.cell_masks()) meta["cells"].push_back(metafo::to_json(lattice::combine(m)));
  out << meta.dump() << '\n';
  for (const auto& r : ds.records()) {
    json j;
    j["cell_mask"] = r.cell_mask;
    j["material_id"] = r.material_id;
    j["strains"] = r.strains;
    j["material_stresses"] = r.material_stresses;
    j["unit_stresses"] = r.unit_stresses;
    out << j.dump() << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing metadata record", 1);
  json meta;
  try {
    meta = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metadata: ") + e.what(), 1);
  }
  if (!meta.contains("version") || meta["version"] != kFormatVersion) {
    throw FormatError(std::string("unsupported dataset version, expected ") + kFormatVersion, 1);
  }
  materials::StrainGrid grid;
  surrogate::SurrogateSpec spec;
  std::vector<materials::Material> mats;
  double scale = 1.0;
  bool normalized = false;
  std::size_t expected = 0;
  try {
    grid = grid_from_json(meta.at("grid"));
    spec = surrogate_from_json(meta.at("surrogate"));
    for (const auto& m : meta.at("materials")) mats.push_back(material_from_json(m));
    scale = meta.at("stress_scale").get<double>();
    normalized = meta.at("normalized").get<bool>();
    expected = meta.at("record_count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metadata: ") + e.what(), 1);
  }

  std::vector<DatasetRecord> records;
  records.reserve(expected);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) throw FormatError("empty record", line_no);
    try {
      const json j = json::parse(line);
      DatasetRecord r;
      r.cell_mask = j.at("cell_mask").get<Mask>();
      r.material_id = j.at("material_id").get<int>();
      r.strains = j.at("strains").get<std::vector<double>>();
      r.material_stresses = j.at("material_stresses").get<std::vector<double>>();
      r.unit_stresses = j.at("unit_stresses").get<std::vector<double>>();
      if (r.strains.size() != grid.points || r.material_stresses.size() != grid.points ||
          r.unit_stresses.size() != grid.points) {
        throw FormatError("record arrays do not match the grid size", line_no);
      }
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed record: ") + e.what(), line_no);
    }
  }
  if (records.size() != expected) {
    throw FormatError("expected " + std::to_string(expected) + " records, found " +
                          std::to_string(records.size()),
                      records.size() + 2);
  }
  try {
    return Dataset(std::move(records), std::move(mats), grid, std::move(spec), scale, normalized);
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
}

}  // namespace metafo::dataset
