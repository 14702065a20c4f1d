#pragma once

// Report documents (JSON) and flat tables (CSV) for every analysis, plus a
// small structural validator for the schema file in schemas/.
//
// Schema language: a node is either a type name ("string", "integer",
// "number", "boolean", "number?" for nullable numbers, "number[]",
// "number[][]", "integer[]", "string[]"), an object mapping each required
// field to its node (no other fields allowed), or {"$array": node}.

#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bltlab/analysis.hpp"
#include "bltlab/zones.hpp"

namespace bltlab {

using nlohmann::json;

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// Shortest round-trippable rendering of a double.
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// CSV table with a header row.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  template <typename... Cells>
  void add(const Cells&... cells) {
    rows.push_back({cell(cells)...});
  }

  std::string to_csv() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }

 private:
  static std::string cell(double v) { return fmt_double(v); }
  static std::string cell(const std::optional<double>& v) { return v ? fmt_double(*v) : ""; }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(bool b) { return b ? "1" : "0"; }
  template <typename I>
    requires std::is_integral_v<I>
  static std::string cell(I v) { return std::to_string(v); }
};

inline json to_json(const MeanSem& m) { return {{"count", m.count}, {"mean", m.mean}, {"sem", m.sem}}; }

inline json to_json(const ChangeReport& r) {
  json groups = json::array();
  for (const auto& g : r.groups) {
    json tr = json::array();
    for (std::size_t t = 0; t < g.transitions.size(); ++t)
      tr.push_back({{"from", t}, {"to", t + 1}, {"mean", g.transitions[t].mean}, {"sem", g.transitions[t].sem}});
    groups.push_back({{"t_stable", g.t_stable}, {"count", g.count}, {"transitions", tr}});
  }
  return {{"kind", "change"}, {"timesteps", r.timesteps}, {"n_images", r.n_images}, {"groups", groups}};
}

inline Table to_table(const ChangeReport& r) {
  Table t{{"t_stable", "from", "to", "count", "mean", "sem"}, {}};
  for (const auto& g : r.groups)
    for (std::size_t k = 0; k < g.transitions.size(); ++k)
      t.add(g.t_stable, k, k + 1, g.count, g.transitions[k].mean, g.transitions[k].sem);
  return t;
}

inline json to_json(const GroupStats& g) {
  return {{"count", g.norm.count}, {"empty", g.empty},     {"norm_mean", g.norm.mean},
          {"norm_sem", g.norm.sem}, {"cos_mean", g.cosine.mean}, {"cos_sem", g.cosine.sem}};
}

inline json to_json(const SignatureReport& r) {
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"t", s.t}, {"stable", to_json(s.stable)}, {"unstable", to_json(s.unstable)}});
  return {{"kind", "signatures"}, {"timesteps", r.timesteps}, {"n_images", r.n_images}, {"steps", steps}};
}

inline Table to_table(const SignatureReport& r) {
  Table t{{"t", "group", "count", "empty", "norm_mean", "norm_sem", "cos_mean", "cos_sem"}, {}};
  for (const auto& s : r.steps)
    for (const auto& [name, g] : {std::pair<const char*, const GroupStats*>{"stable", &s.stable},
                                  std::pair<const char*, const GroupStats*>{"unstable", &s.unstable}})
      t.add(s.t, name, g->norm.count, g->empty, g->norm.mean, g->norm.sem, g->cosine.mean, g->cosine.sem);
  return t;
}

inline json to_json(const CorrectClassReport& r) {
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"t", s.t},
                     {"n_members", s.n_members},
                     {"n_zones_used", s.n_zones_used},
                     {"n_zones_skipped", s.n_zones_skipped},
                     {"self_mean", optional_number(s.self_mean)},
                     {"other_mean", optional_number(s.other_mean)}});
  return {{"kind", "correct_class"}, {"timesteps", r.timesteps}, {"n_images", r.n_images}, {"steps", steps}};
}

inline Table to_table(const CorrectClassReport& r) {
  Table t{{"t", "n_members", "n_zones_used", "n_zones_skipped", "self_mean", "other_mean"}, {}};
  for (const auto& s : r.steps) t.add(s.t, s.n_members, s.n_zones_used, s.n_zones_skipped, s.self_mean, s.other_mean);
  return t;
}

/// Soft convergence flag: set when the final mean relative change is not
/// at least one order of magnitude below the first transition's.
inline bool stability_divergence_flag(const StabilityRunReport& r) {
  if (r.steps.empty()) return false;
  return !(r.steps.back().mean_relative_change <= r.steps.front().mean_relative_change - 1.0);
}

inline json to_json(const StabilityRunReport& r) {
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"t", s.t},
                     {"mean_relative_change", s.mean_relative_change},
                     {"floor_count", s.floor_count},
                     {"zero_norm_count", s.zero_norm_count}});
  return {{"kind", "stability"},  {"timesteps", r.timesteps}, {"n_images", r.n_images},
          {"accuracy", r.accuracy}, {"steps", steps},         {"divergence_flag", stability_divergence_flag(r)}};
}

inline Table to_table(const StabilityRunReport& r) {
  Table t{{"t", "accuracy", "mean_relative_change", "floor_count", "zero_norm_count"}, {}};
  for (std::size_t k = 0; k < r.accuracy.size(); ++k) {
    if (k == 0)
      t.add(k, r.accuracy[k], std::optional<double>{}, std::size_t{0}, std::size_t{0});
    else
      t.add(k, r.accuracy[k], r.steps[k - 1].mean_relative_change, r.steps[k - 1].floor_count,
            r.steps[k - 1].zero_norm_count);
  }
  return t;
}

inline json to_json(const FfNormReport& r) {
  return {{"kind", "ff_norm"},
          {"n", r.n},
          {"pearson", optional_number(r.pearson.value)},
          {"pearson_reason", r.pearson.reason},
          {"spearman", optional_number(r.spearman.value)},
          {"spearman_reason", r.spearman.reason}};
}

inline Table to_table(const FfNormReport& r) {
  Table t{{"ff_norm", "t_stable"}, {}};
  for (std::size_t i = 0; i < r.n; ++i) t.add(r.norms[i], r.t_stable[i]);
  return t;
}

struct ClusterReport {
  Matrix similarity;
  Dendrogram dendrogram;
  std::size_t k = 2;
  std::vector<std::size_t> flat_cut;
  std::optional<double> superclass_ari;  // agreement of the flat cut with the hierarchy
};

inline json to_json(const ClusterReport& r) {
  json sim = json::array();
  for (std::size_t i = 0; i < r.similarity.rows; ++i) {
    const auto row = r.similarity.row(i);
    sim.push_back(std::vector<double>(row.begin(), row.end()));
  }
  json merges = json::array();
  for (const auto& m : r.dendrogram.merges)
    merges.push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"node", m.node}, {"size", m.size}});
  return {{"kind", "clusters"},
          {"n_classes", r.similarity.rows},
          {"labels", r.dendrogram.leaf_labels},
          {"similarity", sim},
          {"merges", merges},
          {"flat_cut_k", r.k},
          {"flat_cut", r.flat_cut},
          {"superclass_ari", optional_number(r.superclass_ari)}};
}

inline Table to_table(const ClusterReport& r) {
  Table t{{"merge", "a", "b", "height", "node", "size"}, {}};
  for (std::size_t i = 0; i < r.dendrogram.merges.size(); ++i) {
    const auto& m = r.dendrogram.merges[i];
    t.add(i, m.a, m.b, m.height, m.node, m.size);
  }
  return t;
}

inline json to_json(const DimSweepReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"dim", row.dim},
                    {"mean", row.mean},
                    {"ci_low", row.mean - row.ci_half_width},
                    {"ci_high", row.mean + row.ci_half_width}});
  return {{"kind", "dim_sweep"}, {"source", r.source}, {"n_vectors", r.n_vectors},
          {"n_reps", r.n_reps},  {"seed", r.seed},     {"rows", rows}};
}

inline Table to_table(const DimSweepReport& r) {
  Table t{{"dimension", "mean", "ci_low", "ci_high"}, {}};
  for (const auto& row : r.rows) t.add(row.dim, row.mean, row.mean - row.ci_half_width, row.mean + row.ci_half_width);
  return t;
}

inline Table to_table(const ZoneGrid& g) {
  Table t{{"x", "y", "label"}, {}};
  for (std::size_t row = 0; row < g.resolution; ++row)
    for (std::size_t col = 0; col < g.resolution; ++col) t.add(g.coord(col), g.coord(row), g.label(row, col));
  return t;
}

// ---------------------------------------------------------------- schema

namespace detail {

inline void validate_node(const json& value, const json& schema, const std::string& path) {
  auto fail = [&](const std::string& why) { throw Error("schema", "report field '" + path + "': " + why); };
  if (schema.is_string()) {
    const std::string type = schema.get<std::string>();
    auto is_num = [](const json& v) { return v.is_number(); };
    if (type == "string") {
      if (!value.is_string()) fail("expected string");
    } else if (type == "integer") {
      if (!value.is_number_integer()) fail("expected integer");
    } else if (type == "number") {
      if (!is_num(value)) fail("expected number");
    } else if (type == "number?") {
      if (!is_num(value) && !value.is_null()) fail("expected number or null");
    } else if (type == "boolean") {
      if (!value.is_boolean()) fail("expected boolean");
    } else if (type == "number[]" || type == "integer[]" || type == "string[]") {
      if (!value.is_array()) fail("expected array");
      for (const auto& v : value) {
        if (type == "number[]" && !is_num(v)) fail("expected numeric elements");
        if (type == "integer[]" && !v.is_number_integer()) fail("expected integer elements");
        if (type == "string[]" && !v.is_string()) fail("expected string elements");
      }
    } else if (type == "number[][]") {
      if (!value.is_array()) fail("expected array of arrays");
      for (const auto& row : value) {
        if (!row.is_array()) fail("expected array of arrays");
        for (const auto& v : row)
          if (!is_num(v)) fail("expected numeric elements");
      }
    } else {
      throw Error("schema", "schema uses unknown type '" + type + "' at '" + path + "'");
    }
    return;
  }
  if (schema.is_object() && schema.contains("$array")) {
    if (!value.is_array()) fail("expected array");
    for (std::size_t i = 0; i < value.size(); ++i)
      validate_node(value[i], schema["$array"], path + "[" + std::to_string(i) + "]");
    return;
  }
  if (schema.is_object()) {
    if (!value.is_object()) fail("expected object");
    for (const auto& [key, sub] : schema.items()) {
      if (!value.contains(key)) fail("missing field '" + key + "'");
      validate_node(value[key], sub, path.empty() ? key : path + "." + key);
    }
    for (const auto& [key, sub] : value.items())
      if (!schema.contains(key)) fail("unexpected field '" + key + "'");
    return;
  }
  throw Error("schema", "malformed schema node at '" + path + "'");
}

}  // namespace detail

/// Validates a report document against the schema entry named by its
/// "kind" field.
inline void validate_report(const json& report, const json& schema_file) {
  if (!report.is_object() || !report.contains("kind") || !report["kind"].is_string())
    throw Error("schema", "report has no 'kind' field");
  const std::string kind = report["kind"].get<std::string>();
  if (!schema_file.contains("reports") || !schema_file["reports"].contains(kind))
    throw Error("schema", "schema has no entry for report kind '" + kind + "'");
  detail::validate_node(report, schema_file["reports"][kind], "");
}

}  // namespace bltlab
