#include "orbitall/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "orbitall/errors.hpp"
#include "orbitall/units.hpp"

namespace orbitall {

using nlohmann::json;

std::string engine_version() { return "orbitall-scc-eht/" ORBITALL_VERSION; }

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(fmt::format("cannot write {}", path.string()));
  out << text;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in(text);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

double to_double(const std::string& s, int line, std::string_view what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(fmt::format("line {}: {} '{}' is not a number", line, what, s));
  }
}

int to_int(const std::string& s, int line, std::string_view what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(fmt::format("line {}: {} '{}' is not an integer", line, what, s));
  }
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// key=value pairs; values may be double-quoted.
std::vector<std::pair<std::string, std::string>> comment_pairs(const std::string& s, int line) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i >= s.size()) break;
    const std::size_t eq = s.find('=', i);
    if (eq == std::string::npos) throw ParseError(fmt::format("line {}: expected key=value, got '{}'", line, s.substr(i)));
    std::string key = s.substr(i, eq - i);
    if (key.empty() || key.find_first_of(" \t\"") != std::string::npos)
      throw ParseError(fmt::format("line {}: malformed key '{}'", line, key));
    i = eq + 1;
    std::string value;
    if (i < s.size() && s[i] == '"') {
      const std::size_t close = s.find('"', i + 1);
      if (close == std::string::npos) throw ParseError(fmt::format("line {}: unterminated quote for '{}'", line, key));
      value = s.substr(i + 1, close - i - 1);
      i = close + 1;
    } else {
      const std::size_t end = s.find_first_of(" \t", i);
      value = s.substr(i, end == std::string::npos ? std::string::npos : end - i);
      i = end == std::string::npos ? s.size() : end;
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

// Message without the "Kind: " prefix, for re-raising with more context.
std::string detail(const Error& e) { return std::string(e.what()).substr(e.kind().size() + 2); }

}  // namespace

// ---------------------------------------------------------------------------

XyzRecord parse_xyz(const std::string& text) {
  const auto lines = split_lines(text);
  if (lines.empty() || trim(lines[0]).empty()) throw ParseError("line 1: missing atom count");
  const int n = to_int(trim(lines[0]), 1, "atom count");
  if (n < 1) throw ParseError(fmt::format("line 1: atom count {} < 1", n));
  if (static_cast<int>(lines.size()) < 2) throw ParseError("line 2: missing comment line");
  XyzRecord rec;
  auto& sys = rec.system;
  for (const auto& [key, value] : comment_pairs(lines[1], 2)) {
    if (key == "charge") {
      sys.charge = to_int(value, 2, "charge");
    } else if (key == "multiplicity") {
      sys.multiplicity = to_int(value, 2, "multiplicity");
    } else if (key == "field") {
      const auto w = words(value);
      if (w.size() != 3) throw ParseError(fmt::format("line 2: field needs three components, got '{}'", value));
      sys.field = Eigen::Vector3d(to_double(w[0], 2, "field"), to_double(w[1], 2, "field"), to_double(w[2], 2, "field"));
    } else if (key == "dielectric") {
      sys.dielectric = to_double(value, 2, "dielectric");
    } else if (key == "energy_ev" || key.rfind("fmo_", 0) == 0) {
      rec.labels[key] = to_double(value, 2, key);
    } else {
      rec.extra[key] = value;
    }
  }
  for (int a = 0; a < n; ++a) {
    const int ln = a + 3;
    if (ln > static_cast<int>(lines.size())) throw ParseError(fmt::format("line {}: expected {} atoms, found {}", ln, n, a));
    const auto w = words(lines[ln - 1]);
    if (w.size() != 4) throw ParseError(fmt::format("line {}: expected 'El x y z'", ln));
    const int z = atomic_number(w[0]);
    if (z == 0) throw ParseError(fmt::format("line {}: unknown element '{}'", ln, w[0]));
    sys.atomic_numbers.push_back(z);
    sys.coordinates.push_back(Eigen::Vector3d(to_double(w[1], ln, "x"), to_double(w[2], ln, "y"), to_double(w[3], ln, "z")) *
                              units::kAngstromToBohr);
  }
  for (std::size_t k = n + 2; k < lines.size(); ++k)
    if (!trim(lines[k]).empty()) throw ParseError(fmt::format("line {}: unexpected content after {} atoms", k + 1, n));
  sys.validate();
  return rec;
}

XyzRecord read_xyz(const std::filesystem::path& path) {
  try {
    return parse_xyz(read_text(path));
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), detail(e)));
  }
}

std::string serialize_xyz(const XyzRecord& rec) {
  const auto& sys = rec.system;
  std::string out = fmt::format("{}\ncharge={} multiplicity={}", sys.size(), sys.charge, sys.multiplicity);
  if (sys.field) out += fmt::format(" field=\"{} {} {}\"", fmt_double((*sys.field)[0]), fmt_double((*sys.field)[1]), fmt_double((*sys.field)[2]));
  if (sys.dielectric) out += fmt::format(" dielectric={}", fmt_double(*sys.dielectric));
  for (const auto& [k, v] : rec.labels) out += fmt::format(" {}={}", k, fmt_double(v));
  for (const auto& [k, v] : rec.extra)
    out += v.find_first_of(" \t") == std::string::npos ? fmt::format(" {}={}", k, v) : fmt::format(" {}=\"{}\"", k, v);
  out += '\n';
  for (std::size_t a = 0; a < sys.size(); ++a) {
    const Eigen::Vector3d r = sys.coordinates[a] * units::kBohrToAngstrom;
    out += fmt::format("{} {} {} {}\n", element_symbol(sys.atomic_numbers[a]), fmt_double(r.x()), fmt_double(r.y()), fmt_double(r.z()));
  }
  return out;
}

// ---------------------------------------------------------------------------

Manifest read_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
  Manifest m;
  try {
    for (const auto& r : j.at("records")) {
      ManifestRecord rec;
      rec.id = r.at("id").get<std::string>();
      rec.geometry = r.at("geometry").get<std::string>();
      rec.charge = r.value("charge", 0);
      rec.multiplicity = r.value("multiplicity", 1);
      if (r.contains("field") && !r["field"].is_null()) {
        const auto f = r["field"].get<std::vector<double>>();
        if (f.size() != 3) throw ParseError(fmt::format("record {}: field needs three components", rec.id));
        rec.field = Eigen::Vector3d(f[0], f[1], f[2]);
      }
      if (r.contains("labels")) rec.labels = r["labels"].get<std::map<std::string, double>>();
      rec.species = r.contains("species") ? parse_species(r["species"].get<std::string>())
                                          : species_of(rec.charge, rec.multiplicity);
      rec.split = r.value("split", "");
      rec.parent = r.value("parent", "");
      m.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  json records = json::array();
  for (const auto& r : manifest.records) {
    json o{{"id", r.id},
           {"geometry", r.geometry},
           {"charge", r.charge},
           {"multiplicity", r.multiplicity},
           {"labels", r.labels},
           {"species", std::string(to_string(r.species))},
           {"split", r.split}};
    if (r.field) o["field"] = {(*r.field)[0], (*r.field)[1], (*r.field)[2]};
    if (!r.parent.empty()) o["parent"] = r.parent;
    records.push_back(std::move(o));
  }
  write_text(path, json{{"records", records}}.dump(2) + "\n");
}

Manifest split_dataset(const Manifest& manifest, const SplitFractions& f, std::uint64_t seed, bool balance) {
  const std::array<double, 3> frac{f.train, f.val, f.test};
  const std::array<const char*, 3> names{"train", "val", "test"};
  if (std::any_of(frac.begin(), frac.end(), [](double x) { return x < 0.0; }) || f.train + f.val + f.test > 1.0 + 1e-12)
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  Manifest out = manifest;
  for (auto& r : out.records) r.split.clear();
  std::mt19937_64 rng(seed);
  const bool parents = std::any_of(out.records.begin(), out.records.end(), [](const auto& r) { return !r.parent.empty(); });

  auto require_nonempty = [&](const std::array<std::size_t, 3>& sizes) {
    for (int k = 0; k < 3; ++k)
      if (frac[k] > 0.0 && sizes[k] == 0)
        throw InsufficientData(fmt::format("{} records leave the {} split empty", out.records.size(), names[k]));
  };

  if (balance && !parents) {
    // Round-robin over species so per-split species counts differ by at most one.
    std::map<Species, std::vector<std::size_t>> by_species;
    for (std::size_t i = 0; i < out.records.size(); ++i) by_species[out.records[i].species].push_back(i);
    std::size_t m = out.records.size();
    for (auto& [s, idx] : by_species) {
      std::shuffle(idx.begin(), idx.end(), rng);
      m = std::min(m, idx.size());
    }
    const std::size_t n_species = by_species.size(), total = n_species * m;
    std::array<std::size_t, 3> sizes{};
    for (int k = 0; k < 3; ++k) sizes[k] = static_cast<std::size_t>(std::floor(frac[k] * total + 1e-9));
    if (frac[0] + frac[1] + frac[2] > 1.0 - 1e-12) sizes[0] = total - sizes[1] - sizes[2];
    require_nonempty(sizes);
    std::vector<std::vector<std::size_t>*> groups;
    for (auto& [s, idx] : by_species) groups.push_back(&idx);
    std::vector<std::size_t> next(n_species, 0);
    std::size_t slot = 0;
    for (int k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < sizes[k]; ++j, ++slot) {
        const std::size_t g = slot % n_species;
        out.records[(*groups[g])[next[g]++]].split = names[k];
      }
    return out;
  }

  // Units of records that must stay together.
  std::vector<std::vector<std::size_t>> units;
  std::map<std::string, std::size_t> unit_of;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    const auto& p = out.records[i].parent;
    if (p.empty()) {
      units.push_back({i});
    } else if (auto it = unit_of.find(p); it != unit_of.end()) {
      units[it->second].push_back(i);
    } else {
      unit_of[p] = units.size();
      units.push_back({i});
    }
  }
  std::shuffle(units.begin(), units.end(), rng);
  const double n = static_cast<double>(out.records.size());
  std::array<std::size_t, 3> target{};
  for (int k = 0; k < 3; ++k) target[k] = static_cast<std::size_t>(std::llround(frac[k] * n));
  std::array<std::size_t, 3> sizes{};
  int k = 0;
  for (const auto& u : units) {
    while (k < 3 && sizes[k] >= target[k]) ++k;
    if (k == 3) break;
    for (std::size_t i : u) out.records[i].split = names[k];
    sizes[k] += u.size();
  }
  if (balance) {
    // Drop records until every species has the same count within each split.
    for (int s = 0; s < 3; ++s) {
      std::map<Species, std::vector<std::size_t>> by_species;
      for (std::size_t i = 0; i < out.records.size(); ++i)
        if (out.records[i].split == names[s]) by_species[out.records[i].species].push_back(i);
      std::size_t m = by_species.empty() ? 0 : out.records.size();
      for (const auto& [sp, idx] : by_species) m = std::min(m, idx.size());
      sizes[s] = 0;
      for (auto& [sp, idx] : by_species) {
        for (std::size_t j = m; j < idx.size(); ++j) out.records[idx[j]].split.clear();
        sizes[s] += m;
      }
    }
  }
  require_nonempty(sizes);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kQmmMagic[] = "QMMSET1\n";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_double(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
double get_double(const std::string& in, std::size_t pos) { return std::bit_cast<double>(get_u64(in, pos)); }

json system_json(const MolecularSystem& s) {
  json coords = json::array();
  for (const auto& r : s.coordinates) coords.push_back({r.x(), r.y(), r.z()});
  json j{{"atomic_numbers", s.atomic_numbers},
         {"coordinates_bohr", coords},
         {"charge", s.charge},
         {"multiplicity", s.multiplicity},
         {"field", nullptr},
         {"dielectric", nullptr}};
  if (s.field) j["field"] = {(*s.field)[0], (*s.field)[1], (*s.field)[2]};
  if (s.dielectric) j["dielectric"] = *s.dielectric;
  return j;
}

MolecularSystem system_from_json(const json& j) {
  MolecularSystem s;
  s.atomic_numbers = j.at("atomic_numbers").get<std::vector<int>>();
  for (const auto& r : j.at("coordinates_bohr")) s.coordinates.emplace_back(r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>());
  s.charge = j.at("charge").get<int>();
  s.multiplicity = j.at("multiplicity").get<int>();
  if (!j.at("field").is_null()) {
    const auto& f = j["field"];
    s.field = Eigen::Vector3d(f.at(0).get<double>(), f.at(1).get<double>(), f.at(2).get<double>());
  }
  if (!j.at("dielectric").is_null()) s.dielectric = j["dielectric"].get<double>();
  return s;
}

}  // namespace

void write_qmm(const std::filesystem::path& path, const MolecularSystem& system, const QMMSet& qmm) {
  json layout = json::array();
  for (const auto& ao : qmm.layout.aos) layout.push_back({ao.atom, ao.shell, ao.n, ao.l, ao.m});
  json names = json::array();
  for (auto n : QMMSet::kNames) names.push_back(std::string(n));
  json header{{"n_ao", qmm.n_ao()},
              {"layout", layout},
              {"system", system_json(system)},
              {"engine_version", engine_version()},
              {"basis_checksum", qmm.layout.basis_checksum},
              {"matrices", names}};
  const std::string h = header.dump();
  std::string out(kQmmMagic);
  put_u64(out, h.size());
  out += h;
  const int n = qmm.n_ao();
  out.reserve(out.size() + QMMSet::kCount * 8 * static_cast<std::size_t>(n) * n);
  for (int k = 0; k < QMMSet::kCount; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) put_double(out, qmm[k](i, j));
  write_text(path, out);
}

QmmContainer read_qmm(const std::filesystem::path& path, const BasisTable& table) {
  const std::string data = read_text(path);
  const std::size_t magic = sizeof(kQmmMagic) - 1;
  if (data.size() < magic + 8 || data.compare(0, magic, kQmmMagic) != 0)
    throw ParseError(fmt::format("{}: not a QMM container", path.string()));
  const std::uint64_t hlen = get_u64(data, magic);
  if (data.size() < magic + 8 + hlen) throw ParseError(fmt::format("{}: truncated header", path.string()));
  QmmContainer c;
  json header;
  int n = 0;
  try {
    header = json::parse(data.substr(magic + 8, hlen));
    n = header.at("n_ao").get<int>();
    c.system = system_from_json(header.at("system"));
    c.engine_version = header.at("engine_version").get<std::string>();
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: bad header: {}", path.string(), e.what()));
  }
  const std::string checksum = header.value("basis_checksum", "");
  if (checksum != table.checksum())
    throw ChecksumMismatch(fmt::format("{}: basis checksum {} does not match {}", path.string(), checksum, table.checksum()));
  const std::size_t body = magic + 8 + hlen;
  if (data.size() != body + QMMSet::kCount * 8 * static_cast<std::size_t>(n) * n)
    throw ParseError(fmt::format("{}: matrix block has the wrong size", path.string()));
  c.qmm.layout = build_basis(c.system, table);
  const auto& stored = header.at("layout");
  if (c.qmm.n_ao() != n || stored.size() != static_cast<std::size_t>(n))
    throw LayoutMismatch(fmt::format("{}: stored layout has {} AOs, rebuilt {}", path.string(), n, c.qmm.n_ao()));
  for (int i = 0; i < n; ++i) {
    const auto& ao = c.qmm.layout.aos[i];
    const std::vector<int> want{ao.atom, ao.shell, ao.n, ao.l, ao.m};
    if (stored[i].get<std::vector<int>>() != want)
      throw LayoutMismatch(fmt::format("{}: AO {} differs from the rebuilt layout", path.string(), i));
  }
  std::size_t pos = body;
  for (int k = 0; k < QMMSet::kCount; ++k) {
    c.qmm[k].resize(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j, pos += 8) c.qmm[k](i, j) = get_double(data, pos);
  }
  return c;
}

// ---------------------------------------------------------------------------

namespace {

// Values of the flat TOML subset: scalars keep their text, arrays their items.
struct ConfigValue {
  std::vector<std::string> items;
  bool array = false;
  bool quoted = false;
  int line = 0;
};

ConfigValue parse_value(const std::string& raw, int line) {
  ConfigValue v;
  v.line = line;
  if (raw.empty()) throw ParseError(fmt::format("line {}: missing value", line));
  auto unquote = [&](std::string s) {
    s = trim(s);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
      v.quoted = true;
      return s.substr(1, s.size() - 2);
    }
    return s;
  };
  if (raw.front() == '[') {
    if (raw.back() != ']') throw ParseError(fmt::format("line {}: unterminated array", line));
    v.array = true;
    const std::string body = raw.substr(1, raw.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!trim(item).empty()) v.items.push_back(unquote(item));
  } else {
    v.items.push_back(unquote(raw));
  }
  return v;
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

double as_double(const ConfigValue& v) { return to_double(v.items.at(0), v.line, "value"); }
int as_int(const ConfigValue& v) { return to_int(v.items.at(0), v.line, "value"); }
bool as_bool(const ConfigValue& v) {
  if (v.items.at(0) == "true") return true;
  if (v.items.at(0) == "false") return false;
  throw ParseError(fmt::format("line {}: expected true or false", v.line));
}
template <class T, class F>
std::vector<T> as_list(const ConfigValue& v, F&& f) {
  std::vector<T> out;
  for (const auto& s : v.items) out.push_back(f(s, v.line, "array item"));
  return out;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  std::map<std::string, std::map<std::string, ConfigValue>> sections;
  std::string section;
  int ln = 0;
  for (const auto& raw : split_lines(text)) {
    ++ln;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(fmt::format("line {}: malformed section header", ln));
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train") throw ParseError(fmt::format("line {}: unknown section [{}]", ln, section));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(fmt::format("line {}: expected key = value", ln));
    if (section.empty()) throw ParseError(fmt::format("line {}: key outside a section", ln));
    const std::string key = trim(line.substr(0, eq));
    if (sections[section].count(key)) throw ParseError(fmt::format("line {}: duplicate key '{}'", ln, key));
    sections[section][key] = parse_value(trim(line.substr(eq + 1)), ln);
  }

  RunConfig rc;
  auto& model = sections["model"];
  // Width first: the scaled defaults depend on it.
  if (auto it = model.find("hidden_dim"); it != model.end()) rc.model = ModelConfig::scaled(as_int(it->second));
  if (rc.model.hidden_dim == 256) rc.model = ModelConfig{};
  for (const auto& [key, v] : model) {
    auto& m = rc.model;
    if (key == "hidden_dim") continue;
    if (key == "irreps") {
      const auto c = as_list<int>(v, to_int);
      if (c.size() != 2 * (IrrepsSpec::kMaxL + 1))
        throw ParseError(fmt::format("line {}: irreps needs {} counts", v.line, 2 * (IrrepsSpec::kMaxL + 1)));
      for (int l = 0; l <= IrrepsSpec::kMaxL; ++l) m.irreps.counts[l] = {c[2 * l], c[2 * l + 1]};
    } else if (key == "n_message_layers") m.n_message_layers = as_int(v);
    else if (key == "n_decode_layers") m.n_decode_layers = as_int(v);
    else if (key == "decode_schedule") m.decode_schedule = as_list<int>(v, to_int);
    else if (key == "n_conv_channels") m.n_conv_channels = as_int(v);
    else if (key == "n_attention_heads") m.n_attention_heads = as_int(v);
    else if (key == "mlp_depth") m.mlp_depth = as_int(v);
    else if (key == "mlp_hidden") m.mlp_hidden = as_int(v);
    else if (key == "attention_hidden") m.attention_hidden = as_int(v);
    else if (key == "activation") m.activation = v.items.at(0);
    else if (key == "n_radial_basis") m.n_radial_basis = as_int(v);
    else if (key == "rbf_cutoff") m.rbf_cutoff = as_double(v);
    else if (key == "evnorm_epsilon") m.evnorm_epsilon = as_double(v);
    else if (key == "evnorm_momentum") m.evnorm_momentum = as_double(v);
    else if (key == "attention_renorm") m.attention_renorm = parse_attention_renorm(v.items.at(0));
    else if (key == "physical_terms") m.physical_terms = parse_physical_terms(v.items.at(0));
    else if (key == "readout") m.readout = parse_readout(v.items.at(0));
    else if (key == "coulomb_damping") m.coulomb_damping = as_double(v);
    else if (key == "aux_exponents") m.aux_exponents = as_list<double>(v, to_double);
    else if (key == "elements") m.elements = as_list<int>(v, to_int);
    else if (key == "odd_cg_pathways") m.odd_cg_pathways = as_bool(v);
    else throw ParseError(fmt::format("line {}: unknown model key '{}'", v.line, key));
  }
  for (const auto& [key, v] : sections["train"]) {
    auto& t = rc.train;
    if (key == "max_lr") t.max_lr = as_double(v);
    else if (key == "warmup_epochs") t.warmup_epochs = as_int(v);
    else if (key == "cosine_epochs") t.cosine_epochs = as_int(v);
    else if (key == "epochs") t.epochs = as_int(v);
    else if (key == "batch_size") t.batch_size = as_int(v);
    else if (key == "smooth_l1_delta") t.smooth_l1_delta = as_double(v);
    else if (key == "seed") t.seed = static_cast<std::uint64_t>(to_double(v.items.at(0), v.line, "seed"));
    else if (key == "deterministic") t.deterministic = as_bool(v);
    else if (key == "target") t.target = parse_target(v.items.at(0));
    else if (key == "mode") t.mode = parse_label_mode(v.items.at(0));
    else if (key == "patience") t.patience = as_int(v);
    else if (key == "adam_beta1") t.adam_beta1 = as_double(v);
    else if (key == "adam_beta2") t.adam_beta2 = as_double(v);
    else if (key == "adam_eps") t.adam_eps = as_double(v);
    else throw ParseError(fmt::format("line {}: unknown train key '{}'", v.line, key));
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig read_config(const std::filesystem::path& path) {
  try {
    return parse_config(read_text(path));
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), detail(e)));
  }
}

std::string serialize_config(const RunConfig& rc) {
  const auto& m = rc.model;
  const auto& t = rc.train;
  auto list = [](const auto& v) { return fmt::format("[{}]", fmt::join(v, ", ")); };
  auto dlist = [](const std::vector<double>& v) {
    std::vector<std::string> s;
    for (double d : v) s.push_back(fmt_double(d));
    return fmt::format("[{}]", fmt::join(s, ", "));
  };
  std::vector<int> counts;
  for (const auto& c : m.irreps.counts) counts.insert(counts.end(), c.begin(), c.end());
  std::string out = "[model]\n";
  out += fmt::format("hidden_dim = {}\nirreps = {}\n", m.hidden_dim, list(counts));
  out += fmt::format("n_message_layers = {}\nn_decode_layers = {}\ndecode_schedule = {}\n", m.n_message_layers,
                     m.n_decode_layers, list(m.decode_schedule));
  out += fmt::format("n_conv_channels = {}\nn_attention_heads = {}\nmlp_depth = {}\nmlp_hidden = {}\nattention_hidden = {}\n",
                     m.n_conv_channels, m.n_attention_heads, m.mlp_depth, m.mlp_hidden, m.attention_hidden);
  out += fmt::format("activation = \"{}\"\nn_radial_basis = {}\nrbf_cutoff = {}\n", m.activation, m.n_radial_basis,
                     fmt_double(m.rbf_cutoff));
  out += fmt::format("evnorm_epsilon = {}\nevnorm_momentum = {}\n", fmt_double(m.evnorm_epsilon), fmt_double(m.evnorm_momentum));
  out += fmt::format("attention_renorm = \"{}\"\nphysical_terms = \"{}\"\nreadout = \"{}\"\ncoulomb_damping = {}\n",
                     to_string(m.attention_renorm), to_string(m.physical_terms), to_string(m.readout),
                     fmt_double(m.coulomb_damping));
  out += fmt::format("aux_exponents = {}\nelements = {}\nodd_cg_pathways = {}\n", dlist(m.aux_exponents),
                     list(m.elements), m.odd_cg_pathways);
  out += "\n[train]\n";
  out += fmt::format("max_lr = {}\nwarmup_epochs = {}\ncosine_epochs = {}\nepochs = {}\nbatch_size = {}\n", fmt_double(t.max_lr),
                     t.warmup_epochs, t.cosine_epochs, t.epochs, t.batch_size);
  out += fmt::format("smooth_l1_delta = {}\nseed = {}\ndeterministic = {}\ntarget = \"{}\"\nmode = \"{}\"\npatience = {}\n",
                     fmt_double(t.smooth_l1_delta), t.seed, t.deterministic, to_string(t.target), to_string(t.mode),
                     t.patience);
  out += fmt::format("adam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n", fmt_double(t.adam_beta1), fmt_double(t.adam_beta2),
                     fmt_double(t.adam_eps));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kCheckpointFormat = "orbitall-checkpoint/1";

json model_config_json(const ModelConfig& m) {
  std::vector<int> counts;
  for (const auto& c : m.irreps.counts) counts.insert(counts.end(), c.begin(), c.end());
  return json{{"hidden_dim", m.hidden_dim},
              {"irreps", counts},
              {"n_message_layers", m.n_message_layers},
              {"n_decode_layers", m.n_decode_layers},
              {"decode_schedule", m.decode_schedule},
              {"n_conv_channels", m.n_conv_channels},
              {"n_attention_heads", m.n_attention_heads},
              {"mlp_depth", m.mlp_depth},
              {"mlp_hidden", m.mlp_hidden},
              {"attention_hidden", m.attention_hidden},
              {"activation", m.activation},
              {"n_radial_basis", m.n_radial_basis},
              {"rbf_cutoff", m.rbf_cutoff},
              {"evnorm_epsilon", m.evnorm_epsilon},
              {"evnorm_momentum", m.evnorm_momentum},
              {"attention_renorm", std::string(to_string(m.attention_renorm))},
              {"physical_terms", std::string(to_string(m.physical_terms))},
              {"readout", std::string(to_string(m.readout))},
              {"coulomb_damping", m.coulomb_damping},
              {"aux_exponents", m.aux_exponents},
              {"elements", m.elements},
              {"odd_cg_pathways", m.odd_cg_pathways}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.hidden_dim = j.at("hidden_dim").get<int>();
  const auto counts = j.at("irreps").get<std::vector<int>>();
  if (counts.size() != 2 * (IrrepsSpec::kMaxL + 1)) throw ParseError("checkpoint irreps have the wrong length");
  for (int l = 0; l <= IrrepsSpec::kMaxL; ++l) m.irreps.counts[l] = {counts[2 * l], counts[2 * l + 1]};
  m.n_message_layers = j.at("n_message_layers").get<int>();
  m.n_decode_layers = j.at("n_decode_layers").get<int>();
  m.decode_schedule = j.at("decode_schedule").get<std::vector<int>>();
  m.n_conv_channels = j.at("n_conv_channels").get<int>();
  m.n_attention_heads = j.at("n_attention_heads").get<int>();
  m.mlp_depth = j.at("mlp_depth").get<int>();
  m.mlp_hidden = j.at("mlp_hidden").get<int>();
  m.attention_hidden = j.at("attention_hidden").get<int>();
  m.activation = j.at("activation").get<std::string>();
  m.n_radial_basis = j.at("n_radial_basis").get<int>();
  m.rbf_cutoff = j.at("rbf_cutoff").get<double>();
  m.evnorm_epsilon = j.at("evnorm_epsilon").get<double>();
  m.evnorm_momentum = j.at("evnorm_momentum").get<double>();
  m.attention_renorm = parse_attention_renorm(j.at("attention_renorm").get<std::string>());
  m.physical_terms = parse_physical_terms(j.at("physical_terms").get<std::string>());
  m.readout = parse_readout(j.at("readout").get<std::string>());
  m.coulomb_damping = j.at("coulomb_damping").get<double>();
  m.aux_exponents = j.at("aux_exponents").get<std::vector<double>>();
  m.elements = j.at("elements").get<std::vector<int>>();
  m.odd_cg_pathways = j.at("odd_cg_pathways").get<bool>();
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  std::string blob;
  json tensors = json::array();
  auto add = [&](const std::string& name, const Eigen::MatrixXd& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", blob.size()}});
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_double(blob, m(i, j));
  };
  for (const auto& p : model.parameters()) add(p.name, p.value);
  const auto& sites = model.evnorm_sites();
  for (std::size_t s = 0; s < sites.size(); ++s) {
    add(fmt::format("evnorm{}.mean", s), sites[s].stats.mean);
    add(fmt::format("evnorm{}.scale", s), sites[s].stats.scale);
  }
  std::vector<int> known;
  for (int q = Model::kMinCharge; q <= Model::kMaxCharge; ++q)
    if (model.known_charges()[q - Model::kMinCharge]) known.push_back(q);
  const json manifest{{"format", std::string(kCheckpointFormat)},
                      {"engine_version", info.engine_version},
                      {"basis_checksum", info.basis_checksum},
                      {"training_step", info.training_step},
                      {"mode", std::string(to_string(info.mode))},
                      {"target", std::string(to_string(info.target))},
                      {"config", model_config_json(model.config())},
                      {"known_charges", known},
                      {"tensors", tensors}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "tensors.bin", blob);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: {}", (dir / "manifest.json").string(), e.what()));
  }
  const std::string blob = read_text(dir / "tensors.bin");
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw ParseError(fmt::format("{}: unsupported checkpoint format", dir.string()));
    LoadedCheckpoint out{Model(model_config_from_json(j.at("config"))), {}};
    out.info.engine_version = j.at("engine_version").get<std::string>();
    out.info.basis_checksum = j.at("basis_checksum").get<std::string>();
    out.info.training_step = j.at("training_step").get<int>();
    out.info.mode = parse_label_mode(j.at("mode").get<std::string>());
    out.info.target = parse_target(j.at("target").get<std::string>());
    out.model.set_known_charges(j.at("known_charges").get<std::vector<int>>());
    std::set<std::string> seen;
    auto& sites = out.model.evnorm_sites();
    for (const auto& t : j.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("shape").at(0).get<Eigen::Index>(), cols = t.at("shape").at(1).get<Eigen::Index>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (offset + 8 * static_cast<std::size_t>(rows * cols) > blob.size())
        throw ParseError(fmt::format("tensor {} runs past the end of tensors.bin", name));
      Eigen::MatrixXd m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_double(blob, offset + 8 * static_cast<std::size_t>(r * cols + c));
      auto check = [&](Eigen::Index r, Eigen::Index c) {
        if (r != rows || c != cols)
          throw LayoutMismatch(fmt::format("tensor {} has shape {}x{}, model expects {}x{}", name, rows, cols, r, c));
      };
      int site = -1;
      char which[8] = {};
      if (std::sscanf(name.c_str(), "evnorm%d.%7s", &site, which) == 2) {
        if (site < 0 || site >= static_cast<int>(sites.size())) throw ParseError(fmt::format("unknown tensor {}", name));
        Eigen::VectorXd& dest = std::string(which) == "mean" ? sites[site].stats.mean : sites[site].stats.scale;
        check(dest.size(), 1);
        dest = m.col(0);
      } else {
        Eigen::MatrixXd& dest = out.model.parameter(name).value;
        check(dest.rows(), dest.cols());
        dest = std::move(m);
      }
      seen.insert(name);
    }
    if (seen.size() != out.model.parameters().size() + 2 * sites.size())
      throw ParseError(fmt::format("{}: checkpoint lacks some tensors", dir.string()));
    return out;
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("{}: {}", dir.string(), e.what()));
  }
}

}  // namespace orbitall
