#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cliqueflow/crystal.hpp"

namespace cliqueflow {

// JSON Lines dataset format. One record per line:
//   {"lengths":[a,b,c],"angles_deg":[al,be,ga],"species":[...],"frac_coords":[[x,y,z],...],"property":y}
// Angles are stored in degrees on disk and converted to radians on read.
std::vector<MaterialRecord> read_records(const std::filesystem::path& path,
                                         const MaterialLimits& limits = {});
std::vector<MaterialRecord> read_records(std::istream& in, const MaterialLimits& limits = {});

void write_records(const std::filesystem::path& path, const std::vector<MaterialRecord>& records);
void write_records(std::ostream& out, const std::vector<MaterialRecord>& records);

std::string to_json_line(const MaterialRecord& record);
MaterialRecord from_json_line(const std::string& line, std::size_t line_number,
                              const MaterialLimits& limits = {});

}  // namespace cliqueflow
