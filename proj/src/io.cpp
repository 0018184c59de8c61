#include "protofuse/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "protofuse/errors.hpp"

namespace protofuse {

std::string format_double(double v) { return fmt::format("{}", v); }

double parse_double(const std::string& field, std::size_t line) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || field.empty())
    throw ParseError("not a number: '" + field + "'", line);
  return v;
}

namespace {

std::size_t parse_index(const std::string& field, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty())
    throw ParseError("not an index: '" + field + "'", line);
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

void expect_header(const CsvTable& t, const std::vector<std::string>& want,
                   const fs::path& path) {
  if (t.header != want) {
    std::string joined;
    for (const auto& w : want) joined += (joined.empty() ? "" : ",") + w;
    throw ParseError(path.string() + ": expected header " + joined, 1);
  }
}

void check_width(const CsvTable& t, const fs::path& path) {
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.rows[r].size() != t.header.size()) {
      throw ParseError(path.string() + ": expected " + std::to_string(t.header.size()) +
                           " fields, got " + std::to_string(t.rows[r].size()),
                       t.lines[r]);
    }
  }
}

// header of the form <first>,dim_0,...,dim_{D-1}
std::size_t dim_header(const CsvTable& t, const std::string& first, const fs::path& path) {
  if (t.header.empty() || t.header[0] != first)
    throw ParseError(path.string() + ": first column must be " + first, 1);
  for (std::size_t j = 1; j < t.header.size(); ++j) {
    if (t.header[j] != "dim_" + std::to_string(j - 1))
      throw ParseError(path.string() + ": bad column name " + t.header[j], 1);
  }
  return t.header.size() - 1;
}

Matrix dense_rows(const CsvTable& t, std::size_t dim) {
  Matrix m(t.rows.size(), dim);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (parse_index(t.rows[r][0], t.lines[r]) != r)
      throw ParseError("row ids must be 0, 1, 2, ...", t.lines[r]);
    for (std::size_t j = 0; j < dim; ++j) m(r, j) = parse_double(t.rows[r][j + 1], t.lines[r]);
  }
  return m;
}

std::string dense_csv(const std::string& first, const Matrix& m) {
  std::string s = first;
  for (std::size_t j = 0; j < m.cols(); ++j) s += fmt::format(",dim_{}", j);
  s += '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    s += std::to_string(r);
    for (double v : m.row(r)) {
      s += ',';
      s += format_double(v);
    }
    s += '\n';
  }
  return s;
}

}  // namespace

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  CsvTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty()) {
      t.header = split(line, ',');
      continue;
    }
    t.rows.push_back(split(line, ','));
    t.lines.push_back(lineno);
  }
  if (t.header.empty()) throw ParseError(path.string() + ": empty file", 0);
  return t;
}

void write_text_file(const fs::path& path, const std::string& contents) {
  auto out = open_out(path);
  out << contents;
  if (!out) throw DataError("write failed: " + path.string());
}

void write_bank_csv(const fs::path& path, const PrototypeBank& bank) {
  write_text_file(path, dense_csv("proto_id", bank.centroids));
}

PrototypeBank read_bank_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t dim = dim_header(t, "proto_id", path);
  check_width(t, path);
  if (t.rows.empty() || dim == 0) throw DataError(path.string() + ": empty prototype bank");
  return PrototypeBank{dense_rows(t, dim), 0};
}

void write_embeddings_csv(const fs::path& path, const Matrix& embeddings) {
  write_text_file(path, dense_csv("patch_id", embeddings));
}

PatchEmbeddingSet read_embeddings_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t dim = dim_header(t, "patch_id", path);
  check_width(t, path);
  if (t.rows.empty() || dim == 0) throw DataError(path.string() + ": no patch embeddings");
  PatchEmbeddingSet s{path.stem().string(), dense_rows(t, dim)};
  if (!all_finite(s.embeddings)) throw DataError(path.string() + ": non-finite embedding");
  return s;
}

std::string patient_of_slide(const std::string& slide_id) {
  return slide_id.substr(0, slide_id.find('_'));
}

std::vector<PatientSlides> read_embeddings_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no slide files in " + dir.string());
  std::map<std::string, PatientSlides> grouped;
  for (const auto& f : files) {
    PatchEmbeddingSet s = read_embeddings_csv(f);
    const std::string pid = patient_of_slide(s.slide_id);
    auto& entry = grouped[pid];
    entry.patient_id = pid;
    entry.slides.push_back(std::move(s));
  }
  std::vector<PatientSlides> out;
  for (auto& [_, p] : grouped) out.push_back(std::move(p));
  return out;
}

void write_expression_csv(const fs::path& path, const std::vector<std::string>& patients,
                          const std::vector<std::string>& genes, const Matrix& values) {
  if (values.rows() != patients.size() || values.cols() != genes.size())
    throw ArgumentError("write_expression_csv: shape mismatch");
  std::string s = "patient_id";
  for (const auto& g : genes) s += "," + g;
  s += '\n';
  for (std::size_t r = 0; r < patients.size(); ++r) {
    s += patients[r];
    for (double v : values.row(r)) {
      s += ',';
      s += format_double(v);
    }
    s += '\n';
  }
  write_text_file(path, s);
}

ExpressionTable read_expression_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  if (t.header.empty() || t.header[0] != "patient_id")
    throw ParseError(path.string() + ": first column must be patient_id", 1);
  check_width(t, path);
  ExpressionTable e;
  e.genes.assign(t.header.begin() + 1, t.header.end());
  e.values = Matrix(t.rows.size(), e.genes.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    e.patients.push_back(t.rows[r][0]);
    for (std::size_t j = 0; j < e.genes.size(); ++j)
      e.values(r, j) = parse_double(t.rows[r][j + 1], t.lines[r]);
  }
  return e;
}

EventConvention parse_event_convention(const std::string& s) {
  if (s == "event" || s == "death") return EventConvention::kEventObserved;
  if (s == "censor" || s == "censored") return EventConvention::kCensored;
  throw ArgumentError("unknown event convention '" + s + "' (event|censor)");
}

const char* to_string(EventConvention c) {
  return c == EventConvention::kEventObserved ? "event" : "censor";
}

void write_survival_csv(const fs::path& path, const std::vector<SurvivalRecord>& records) {
  std::string s = "patient_id,time_days,event\n";
  for (const auto& r : records)
    s += fmt::format("{},{},{}\n", r.patient_id, format_double(r.time), r.event ? 1 : 0);
  write_text_file(path, s);
}

std::vector<SurvivalRecord> read_survival_csv(const fs::path& path,
                                              EventConvention convention) {
  const CsvTable t = read_csv(path);
  expect_header(t, {"patient_id", "time_days", "event"}, path);
  check_width(t, path);
  std::vector<SurvivalRecord> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    SurvivalRecord rec;
    rec.patient_id = t.rows[r][0];
    rec.time = parse_double(t.rows[r][1], t.lines[r]);
    if (!(rec.time >= 0.0) || !std::isfinite(rec.time))
      throw ParseError("survival time must be finite and non-negative", t.lines[r]);
    const std::string& flag = t.rows[r][2];
    if (flag != "0" && flag != "1") throw ParseError("event must be 0 or 1", t.lines[r]);
    const bool one = flag == "1";
    rec.event = convention == EventConvention::kEventObserved ? one : !one;
    out.push_back(std::move(rec));
  }
  return out;
}

void write_gmt(const fs::path& path,
               const std::vector<std::pair<std::string, std::vector<std::string>>>& pathways) {
  std::string s;
  for (const auto& [name, genes] : pathways) {
    s += name + "\tsynthetic";
    for (const auto& g : genes) s += "\t" + g;
    s += '\n';
  }
  write_text_file(path, s);
}

void write_summary_csv(const fs::path& path, const std::string& slide_id,
                       const SlideSummary& summary) {
  std::string s = "slide_id,proto_id,field,dim,value\n";
  const std::size_t c_h = summary.count();
  if (summary.backend == AggregationBackend::kGmm) {
    for (std::size_t c = 0; c < c_h; ++c) {
      s += fmt::format("{},{},pi,0,{}\n", slide_id, c, format_double(summary.pi[c]));
      for (std::size_t j = 0; j < summary.mu.cols(); ++j)
        s += fmt::format("{},{},mu,{},{}\n", slide_id, c, j, format_double(summary.mu(c, j)));
      for (std::size_t j = 0; j < summary.sigma.cols(); ++j) {
        s += fmt::format("{},{},sigma,{},{}\n", slide_id, c, j,
                         format_double(summary.sigma(c, j)));
      }
    }
  } else {
    for (std::size_t c = 0; c < c_h; ++c)
      for (std::size_t j = 0; j < summary.dim(); ++j)
        s += fmt::format("{},{},agg,{},{}\n", slide_id, c, j,
                         format_double(summary.rows(c, j)));
  }
  write_text_file(path, s);
}

SlideSummary read_summary_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  expect_header(t, {"slide_id", "proto_id", "field", "dim", "value"}, path);
  check_width(t, path);
  if (t.rows.empty()) throw DataError(path.string() + ": empty summary");
  struct Cell {
    std::size_t proto, dim;
    double value;
  };
  std::map<std::string, std::vector<Cell>> fields;
  std::size_t n_proto = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    Cell cell{parse_index(t.rows[r][1], t.lines[r]), parse_index(t.rows[r][3], t.lines[r]),
              parse_double(t.rows[r][4], t.lines[r])};
    n_proto = std::max(n_proto, cell.proto + 1);
    fields[t.rows[r][2]].push_back(cell);
  }
  auto to_matrix = [&](const std::vector<Cell>& cells) {
    std::size_t cols = 0;
    for (const auto& c : cells) cols = std::max(cols, c.dim + 1);
    if (cells.size() != n_proto * cols)
      throw DataError(path.string() + ": summary is not a full grid");
    Matrix m(n_proto, cols);
    for (const auto& c : cells) m(c.proto, c.dim) = c.value;
    return m;
  };

  SlideSummary s;
  if (fields.count("agg")) {
    if (fields.size() != 1) throw DataError(path.string() + ": mixed summary fields");
    s.backend = AggregationBackend::kOt;
    s.rows = to_matrix(fields["agg"]);
    return s;
  }
  if (!fields.count("pi") || !fields.count("mu") || !fields.count("sigma") || fields.size() != 3)
    throw DataError(path.string() + ": GMM summary needs pi, mu and sigma");
  s.backend = AggregationBackend::kGmm;
  const Matrix pi = to_matrix(fields["pi"]);
  s.mu = to_matrix(fields["mu"]);
  s.sigma = to_matrix(fields["sigma"]);
  if (pi.cols() != 1 || s.mu.cols() != s.sigma.cols())
    throw DataError(path.string() + ": inconsistent GMM summary");
  s.pi.assign(pi.data().begin(), pi.data().end());
  s.rows = hstack(hstack(pi, s.mu), s.sigma);
  return s;
}

void write_posteriors_csv(const fs::path& path, const std::vector<PatchOrigin>& origins,
                          const Matrix& posteriors) {
  if (origins.size() != posteriors.rows())
    throw ArgumentError("write_posteriors_csv: origin count mismatch");
  std::string s = "slide_id,patch_id,proto_id,q\n";
  for (std::size_t i = 0; i < origins.size(); ++i)
    for (std::size_t c = 0; c < posteriors.cols(); ++c)
      s += fmt::format("{},{},{},{}\n", origins[i].slide_id, origins[i].patch_id, c,
                       format_double(posteriors(i, c)));
  write_text_file(path, s);
}

Matrix read_posteriors_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  expect_header(t, {"slide_id", "patch_id", "proto_id", "q"}, path);
  check_width(t, path);
  // rows are grouped by patch in file order, components ascending
  std::size_t cols = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    cols = std::max(cols, parse_index(t.rows[r][2], t.lines[r]) + 1);
  if (cols == 0 || t.rows.size() % cols != 0)
    throw DataError(path.string() + ": posterior table is not a full grid");
  Matrix q(t.rows.size() / cols, cols);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (parse_index(t.rows[r][2], t.lines[r]) != r % cols)
      throw ParseError("posterior rows out of order", t.lines[r]);
    q(r / cols, r % cols) = parse_double(t.rows[r][3], t.lines[r]);
  }
  return q;
}

void write_assignments_csv(const fs::path& path, const std::vector<PatchOrigin>& origins,
                           const std::vector<std::size_t>& assignment) {
  if (origins.size() != assignment.size())
    throw ArgumentError("write_assignments_csv: origin count mismatch");
  std::string s = "slide_id,patch_id,proto_id\n";
  for (std::size_t i = 0; i < origins.size(); ++i)
    s += fmt::format("{},{},{}\n", origins[i].slide_id, origins[i].patch_id, assignment[i]);
  write_text_file(path, s);
}

std::vector<std::size_t> read_assignments_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  expect_header(t, {"slide_id", "patch_id", "proto_id"}, path);
  check_width(t, path);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    out.push_back(parse_index(t.rows[r][2], t.lines[r]));
  return out;
}

void write_matrix_csv(const fs::path& path, const Matrix& m) {
  std::string s = "row_id,col_id,value\n";
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      s += fmt::format("{},{},{}\n", r, c, format_double(m(r, c)));
  write_text_file(path, s);
}

Matrix read_matrix_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  expect_header(t, {"row_id", "col_id", "value"}, path);
  check_width(t, path);
  std::size_t rows = 0, cols = 0;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    rows = std::max(rows, parse_index(t.rows[r][0], t.lines[r]) + 1);
    cols = std::max(cols, parse_index(t.rows[r][1], t.lines[r]) + 1);
  }
  if (rows * cols != t.rows.size()) throw DataError(path.string() + ": not a full grid");
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    m(parse_index(t.rows[r][0], t.lines[r]), parse_index(t.rows[r][1], t.lines[r])) =
        parse_double(t.rows[r][2], t.lines[r]);
  }
  return m;
}

void write_checkpoint(const fs::path& dir, const FusionWeights& w) {
  using nlohmann::ordered_json;
  const FusionShape& sh = w.shape;
  ordered_json manifest;
  manifest["format"] = "protofuse-checkpoint-1";
  manifest["seed"] = w.seed;
  manifest["shape"] = {
      {"histo_tokens", sh.histo_tokens},
      {"histo_dim", sh.histo_dim},
      {"pathway_sizes", sh.pathway_sizes},
      {"model_dim", sh.model_dim},
      {"pre_hidden", sh.pre_hidden},
      {"post_hidden", sh.post_hidden},
      {"out_dim", sh.out_dim},
      {"encoding", to_string(sh.encoding)},
      {"learnable_dim", sh.learnable_dim},
      {"post", sh.post == PostMode::kShared ? "shared" : "per-prototype"},
  };
  ordered_json list = ordered_json::array();
  std::string csv = "tensor,row,col,value\n";
  for (const auto& t : named_tensors(w)) {
    list.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
    for (std::size_t r = 0; r < t.value.rows(); ++r)
      for (std::size_t c = 0; c < t.value.cols(); ++c)
        csv += fmt::format("{},{},{},{}\n", t.name, r, c, format_double(t.value(r, c)));
  }
  manifest["tensors"] = std::move(list);
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text_file(dir / "tensors.csv", csv);
}

FusionWeights read_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()), 0);
  }
  FusionShape sh;
  std::vector<NamedTensor> tensors;
  std::map<std::string, std::size_t> slot;
  std::uint64_t seed = 0;
  try {
    const auto& s = manifest.at("shape");
    sh.histo_tokens = s.at("histo_tokens");
    sh.histo_dim = s.at("histo_dim");
    sh.pathway_sizes = s.at("pathway_sizes").get<std::vector<std::size_t>>();
    sh.model_dim = s.at("model_dim");
    sh.pre_hidden = s.at("pre_hidden");
    sh.post_hidden = s.at("post_hidden");
    sh.out_dim = s.at("out_dim");
    sh.encoding = parse_encoding_mode(s.at("encoding"));
    sh.learnable_dim = s.at("learnable_dim");
    sh.post = parse_post_mode(s.at("post"));
    seed = manifest.at("seed");
    for (const auto& t : manifest.at("tensors")) {
      slot[t.at("name")] = tensors.size();
      tensors.push_back({t.at("name"), Matrix(t.at("rows"), t.at("cols"))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()), 0);
  }

  const fs::path csv_path = dir / "tensors.csv";
  const CsvTable t = read_csv(csv_path);
  expect_header(t, {"tensor", "row", "col", "value"}, csv_path);
  check_width(t, csv_path);
  std::vector<std::size_t> filled(tensors.size(), 0);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    auto it = slot.find(t.rows[r][0]);
    if (it == slot.end()) throw ParseError("tensor not in manifest: " + t.rows[r][0], t.lines[r]);
    Matrix& m = tensors[it->second].value;
    const std::size_t i = parse_index(t.rows[r][1], t.lines[r]);
    const std::size_t j = parse_index(t.rows[r][2], t.lines[r]);
    if (i >= m.rows() || j >= m.cols()) throw ParseError("tensor index out of range", t.lines[r]);
    m(i, j) = parse_double(t.rows[r][3], t.lines[r]);
    ++filled[it->second];
  }
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    if (filled[k] != tensors[k].value.size())
      throw DataError("tensors.csv: incomplete tensor " + tensors[k].name);
  }
  return weights_from_tensors(sh, seed, tensors);
}

}  // namespace protofuse
