#include "cliqueflow/records_io.hpp"

#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "cliqueflow/error.hpp"

namespace cliqueflow {
namespace {

using nlohmann::json;

constexpr double kDegToRad = std::numbers::pi / 180.0;

const json& require(const json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ParseError(line, field, "missing field");
  return *it;
}

double as_real(const json& v, std::size_t line, const std::string& field) {
  if (!v.is_number()) throw ParseError(line, field, "expected a number");
  return v.get<double>();
}

Vec3 as_vec3(const json& v, std::size_t line, const std::string& field) {
  if (!v.is_array() || v.size() != 3) throw ParseError(line, field, "expected an array of 3 numbers");
  return {as_real(v[0], line, field), as_real(v[1], line, field), as_real(v[2], line, field)};
}

}  // namespace

std::string to_json_line(const MaterialRecord& r) {
  const auto& g = r.material.geometry;
  json j;
  j["lengths"] = {g.lengths[0], g.lengths[1], g.lengths[2]};
  j["angles_deg"] = {g.angles[0] / kDegToRad, g.angles[1] / kDegToRad, g.angles[2] / kDegToRad};
  j["species"] = r.material.species;
  json coords = json::array();
  for (const auto& p : g.positions) coords.push_back({p[0], p[1], p[2]});
  j["frac_coords"] = std::move(coords);
  j["property"] = r.property;
  return j.dump();
}

MaterialRecord from_json_line(const std::string& line, std::size_t n, const MaterialLimits& limits) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(n, "<record>", e.what());
  }
  if (!j.is_object()) throw ParseError(n, "<record>", "expected a JSON object");

  MaterialRecord r;
  auto& g = r.material.geometry;
  g.lengths = as_vec3(require(j, "lengths", n), n, "lengths");
  const Vec3 deg = as_vec3(require(j, "angles_deg", n), n, "angles_deg");
  for (int i = 0; i < 3; ++i) g.angles[i] = deg[i] * kDegToRad;

  const json& species = require(j, "species", n);
  if (!species.is_array()) throw ParseError(n, "species", "expected an array of integers");
  for (const auto& s : species) {
    if (!s.is_number_integer() || s.get<long long>() < 0)
      throw ParseError(n, "species", "expected non-negative integers");
    r.material.species.push_back(s.get<std::uint32_t>());
  }
  const json& coords = require(j, "frac_coords", n);
  if (!coords.is_array()) throw ParseError(n, "frac_coords", "expected an N x 3 array");
  for (const auto& row : coords) g.positions.push_back(as_vec3(row, n, "frac_coords"));
  r.property = as_real(require(j, "property", n), n, "property");

  try {
    validate(r, limits);
  } catch (const InvariantError& e) {
    throw InvariantError("line " + std::to_string(n) + ": " + e.what());
  }
  return r;
}

std::vector<MaterialRecord> read_records(std::istream& in, const MaterialLimits& limits) {
  std::vector<MaterialRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(from_json_line(line, n, limits));
  }
  return out;
}

std::vector<MaterialRecord> read_records(const std::filesystem::path& path, const MaterialLimits& limits) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path.string() + "'");
  return read_records(in, limits);
}

void write_records(std::ostream& out, const std::vector<MaterialRecord>& records) {
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

void write_records(const std::filesystem::path& path, const std::vector<MaterialRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset '" + path.string() + "'");
  write_records(out, records);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace cliqueflow
