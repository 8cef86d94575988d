// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cirr/error.hpp"
#include "cirr/io.hpp"
#include "cirr/synth.hpp"
#include "cirr/types.hpp"

namespace cirr {

/// Flat `key = value` text with `[section]` headers. `#` starts a comment.
/// Keys before any header belong to section "".
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> sections;

  const std::map<std::string, std::string>* section(const std::string& name) const {
    auto it = sections.find(name);
    return it == sections.end() ? nullptr : &it->second;
  }
};

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

inline ConfigFile parse_config(std::string_view text) {
  ConfigFile cfg;
  std::string current;
  std::size_t line_no = 0;
  for (auto raw : lines_of(text)) {
    ++line_no;
    auto line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error("bad-config", "line " + std::to_string(line_no) + ": unterminated section");
      current = std::string(trim(line.substr(1, line.size() - 2)));
      cfg.sections[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error("bad-config", "line " + std::to_string(line_no) + ": expected key = value");
    const auto key = std::string(trim(line.substr(0, eq)));
    if (key.empty()) throw Error("bad-config", "line " + std::to_string(line_no) + ": empty key");
    cfg.sections[current][key] = std::string(trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ConfigFile load_config(const std::string& path) { return parse_config(read_file(path)); }

// ---------------------------------------------------------------------------
// generator settings

struct SynthField {
  const char* name;
  std::function<std::string(const SynthConfig&)> get;
  std::function<bool(SynthConfig&, std::string_view)> set;
};

inline std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

inline std::optional<std::vector<double>> parse_list(std::string_view s) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  for (auto tok : split_view(s, ',')) {
    const auto v = parse_double(trim(tok));
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  return out;
}

inline const std::vector<SynthField>& synth_fields() {
  static const std::vector<SynthField> fields = [] {
    std::vector<SynthField> f;
    const auto count = [&](const char* n, std::size_t SynthConfig::*m) {
      f.push_back({n, [m](const SynthConfig& c) { return std::to_string(c.*m); },
                   [m](SynthConfig& c, std::string_view s) {
                     auto v = parse_int<std::size_t>(s);
                     if (v) c.*m = *v;
                     return v.has_value();
                   }});
    };
    const auto real = [&](const char* n, double SynthConfig::*m) {
      f.push_back({n, [m](const SynthConfig& c) { return format_double(c.*m); },
                   [m](SynthConfig& c, std::string_view s) {
                     auto v = parse_double(s);
                     if (v) c.*m = *v;
                     return v.has_value();
                   }});
    };
    const auto list = [&](const char* n, std::vector<double> SynthConfig::*m) {
      f.push_back({n, [m](const SynthConfig& c) { return format_list(c.*m); },
                   [m](SynthConfig& c, std::string_view s) {
                     auto v = parse_list(s);
                     if (v) c.*m = *v;
                     return v.has_value();
                   }});
    };
    count("num_users", &SynthConfig::num_users);
    count("num_items", &SynthConfig::num_items);
    count("num_envs", &SynthConfig::num_envs);
    count("interactions_per_user", &SynthConfig::interactions_per_user);
    count("stable_dim", &SynthConfig::stable_dim);
    count("spurious_dim", &SynthConfig::spurious_dim);
    list("spurious_strength", &SynthConfig::spurious_strength);
    real("shift_intensity", &SynthConfig::shift_intensity);
    f.push_back({"seed", [](const SynthConfig& c) { return std::to_string(c.seed); },
                 [](SynthConfig& c, std::string_view s) {
                   auto v = parse_int<std::uint64_t>(s);
                   if (v) c.seed = *v;
                   return v.has_value();
                 }});
    list("env_weights", &SynthConfig::env_weights);
    real("stable_scale", &SynthConfig::stable_scale);
    real("spurious_scale", &SynthConfig::spurious_scale);
    count("attributes_per_block", &SynthConfig::attributes_per_block);
    count("kg_links_per_item", &SynthConfig::kg_links_per_item);
    return f;
  }();
  return fields;
}

inline void set_synth(SynthConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : synth_fields())
    if (key == f.name) {
      if (!f.set(cfg, value)) throw Error("bad-value", std::string(key) + "=" + std::string(value));
      return;
    }
  throw Error("unknown-key", std::string(key));
}

inline std::string format_synth(const SynthConfig& cfg) {
  std::string out;
  for (const auto& f : synth_fields()) out += std::string(f.name) + "=" + f.get(cfg) + "\n";
  return out;
}

/// Applies `[hyper]` and `[synth]` sections; any other section must be listed
/// in `extra_sections` (the caller reads those itself).
inline void apply_config(const ConfigFile& cfg, HyperParams* hp, SynthConfig* synth,
                         const std::vector<std::string>& extra_sections = {}) {
  for (const auto& [name, kv] : cfg.sections) {
    if (name == "hyper" && hp) {
      for (const auto& [k, v] : kv) set_hyper(*hp, k, v);
    } else if (name == "synth" && synth) {
      for (const auto& [k, v] : kv) set_synth(*synth, k, v);
    } else if (std::find(extra_sections.begin(), extra_sections.end(), name) == extra_sections.end()) {
      throw Error("unknown-key", "section [" + name + "]");
    }
  }
}

/// Reads `key` of `section` or returns `fallback`; rejects keys outside `allowed`.
inline std::map<std::string, std::string> checked_section(const ConfigFile& cfg,
                                                          const std::string& section,
                                                          const std::vector<std::string>& allowed) {
  const auto* kv = cfg.section(section);
  if (!kv) return {};
  for (const auto& [k, v] : *kv)
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw Error("unknown-key", section + "." + k);
  return *kv;
}

}  // namespace cirr
