#include "protofuse/pathway_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "protofuse/errors.hpp"

namespace protofuse {

GeneIndex::GeneIndex(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw ArgumentError("gene index is empty");
  position_.reserve(names_.size());
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!position_.emplace(names_[i], i).second)
      throw DataError("duplicate gene '" + names_[i] + "' in gene index");
  }
}

std::optional<std::size_t> GeneIndex::find(const std::string& gene) const {
  auto it = position_.find(gene);
  if (it == position_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::uint8_t> PathwayDefinition::mask(std::size_t n) const {
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t m : members) out.at(m) = 1;
  return out;
}

std::size_t PathwayCollection::union_size() const {
  std::set<std::size_t> genes;
  for (const auto& p : pathways) genes.insert(p.members.begin(), p.members.end());
  return genes.size();
}

std::size_t PathwayCollection::total_size() const {
  std::size_t total = 0;
  for (const auto& p : pathways) total += p.size();
  return total;
}

std::vector<std::size_t> PathwayCollection::sizes() const {
  std::vector<std::size_t> out;
  out.reserve(pathways.size());
  for (const auto& p : pathways) out.push_back(p.size());
  return out;
}

PathwayCollection parse_gmt(std::istream& in, const GeneIndex& index,
                            MissingGenePolicy policy) {
  PathwayCollection pc;
  pc.gene_count = index.size();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 3 || fields[0].empty()) {
      throw ParseError("GMT line needs NAME, DESCRIPTION and at least one gene",
                       line_no);
    }

    PathwayDefinition def;
    def.name = fields[0];
    std::set<std::size_t> members;
    for (std::size_t f = 2; f < fields.size(); ++f) {
      const std::string& gene = fields[f];
      if (gene.empty()) continue;
      auto pos = index.find(gene);
      if (!pos) {
        if (policy == MissingGenePolicy::kStrict) {
          throw DataError("gene '" + gene + "' of pathway '" + def.name +
                          "' is not in the expression gene index (line " +
                          std::to_string(line_no) + ")");
        }
        continue;
      }
      if (!members.insert(*pos).second) {
        spdlog::warn("GMT line {}: duplicate gene '{}' in pathway '{}' ignored",
                     line_no, gene, def.name);
      }
    }
    if (members.empty()) {
      throw DataError("pathway '" + def.name + "' has no genes in the index (line " +
                      std::to_string(line_no) + ")");
    }
    def.members.assign(members.begin(), members.end());
    pc.pathways.push_back(std::move(def));
  }
  if (pc.pathways.empty()) throw DataError("GMT input contains no pathways");
  return pc;
}

PathwayCollection load_gmt(const std::filesystem::path& path, const GeneIndex& index,
                           MissingGenePolicy policy) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open GMT file " + path.string());
  return parse_gmt(in, index, policy);
}

PathwaySummary tokenize(std::span<const double> expression, const PathwayCollection& pc) {
  if (expression.size() != pc.gene_count) {
    throw ArgumentError("expression vector has " + std::to_string(expression.size()) +
                        " genes, pathways were built over " +
                        std::to_string(pc.gene_count));
  }
  PathwaySummary out;
  out.tokens.reserve(pc.count());
  for (const auto& p : pc.pathways) {
    std::vector<double> token;
    token.reserve(p.size());
    for (std::size_t m : p.members) {
      const double v = expression[m];
      if (!std::isfinite(v)) throw ArgumentError("non-finite expression value");
      token.push_back(v);
    }
    out.tokens.push_back(std::move(token));
  }
  return out;
}

}  // namespace protofuse
