#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace protofuse {

/// Ordered gene universe of an expression matrix.
class GeneIndex {
 public:
  GeneIndex() = default;
  explicit GeneIndex(std::vector<std::string> names);

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::optional<std::size_t> find(const std::string& gene) const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> position_;
};

struct PathwayDefinition {
  std::string name;
  /// gene-index positions of the members, ascending, no duplicates
  std::vector<std::size_t> members;

  std::size_t size() const noexcept { return members.size(); }
  /// binary membership vector over a universe of n genes
  std::vector<std::uint8_t> mask(std::size_t n) const;
};

struct PathwayCollection {
  std::vector<PathwayDefinition> pathways;
  std::size_t gene_count = 0;

  std::size_t count() const noexcept { return pathways.size(); }
  std::size_t union_size() const;
  std::size_t total_size() const;
  std::vector<std::size_t> sizes() const;
};

enum class MissingGenePolicy { kStrict, kDropMissing };

/// Reads a GMT file: NAME<TAB>DESCRIPTION<TAB>GENE1<TAB>GENE2...
PathwayCollection load_gmt(const std::filesystem::path& path, const GeneIndex& index,
                           MissingGenePolicy policy);
PathwayCollection parse_gmt(std::istream& in, const GeneIndex& index,
                            MissingGenePolicy policy);

/// Per-pathway expression tokens, each in ascending gene-index order.
struct PathwaySummary {
  std::vector<std::vector<double>> tokens;

  std::size_t count() const noexcept { return tokens.size(); }
};

PathwaySummary tokenize(std::span<const double> expression, const PathwayCollection& pc);

}  // namespace protofuse
