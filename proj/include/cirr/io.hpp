// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cirr/adam.hpp"
#include "cirr/error.hpp"
#include "cirr/trainer.hpp"
#include "cirr/types.hpp"

namespace cirr {

// ---------------------------------------------------------------------------
// text helpers

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

inline std::string format_hex(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size()) return std::nullopt;
  return v;
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file-not-found", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot-write", path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error("cannot-write", path);
}

inline std::vector<std::string_view> lines_of(std::string_view text) {
  auto lines = split_view(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (auto& l : lines)
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
  return lines;
}

// ---------------------------------------------------------------------------
// interactions TSV

/// Parses `user<TAB>item<TAB>rating<TAB>timestamp<TAB>env`.
inline Interaction parse_interaction_line(std::string_view line, std::size_t line_no) {
  const auto f = split_view(line, '\t');
  const auto fail = [&](const std::string& why) {
    throw Error("malformed-line", "line " + std::to_string(line_no) + ": " + why);
  };
  if (f.size() != 5) fail("expected 5 tab-separated fields, got " + std::to_string(f.size()));
  const auto u = parse_int<UserId>(f[0]);
  const auto i = parse_int<ItemId>(f[1]);
  const auto r = parse_double(f[2]);
  const auto t = parse_int<std::int64_t>(f[3]);
  const auto e = parse_int<EnvId>(f[4]);
  if (!u || !i || !r || !t || !e) fail("non-numeric field");
  return {*u, *i, *r, *t, *e};
}

inline std::string format_interactions(const InteractionDataset& data) {
  std::string out = "# num_users=" + std::to_string(data.num_users()) +
                    " num_items=" + std::to_string(data.num_items()) +
                    " num_envs=" + std::to_string(data.num_envs()) + "\n";
  out += "user_id\titem_id\trating\ttimestamp\tenv_id\n";
  for (const auto& x : data.interactions())
    out += std::to_string(x.user_id) + '\t' + std::to_string(x.item_id) + '\t' +
           format_double(x.rating) + '\t' + std::to_string(x.timestamp) + '\t' +
           std::to_string(x.env_id) + '\n';
  return out;
}

inline void save_interactions(const std::string& path, const InteractionDataset& data) {
  write_file(path, format_interactions(data));
}

/// Ids are kept as written; counts are max id + 1 unless a leading
/// "# num_users=.. num_items=.. num_envs=.." comment says more.
inline InteractionDataset parse_interactions(std::string_view text) {
  std::vector<Interaction> xs;
  std::size_t nu = 0, ni = 0, ne = 0;
  bool first_data = true;
  std::size_t line_no = 0;
  for (auto line : lines_of(text)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.front() == '#') {
      for (auto tok : split_view(line.substr(1), ' ')) {
        const auto eq = tok.find('=');
        if (eq == std::string_view::npos) continue;
        const auto key = tok.substr(0, eq);
        const auto v = parse_int<std::size_t>(tok.substr(eq + 1));
        if (!v) continue;
        if (key == "num_users") nu = *v;
        if (key == "num_items") ni = *v;
        if (key == "num_envs") ne = *v;
      }
      continue;
    }
    if (first_data) {
      first_data = false;
      const auto head = split_view(line, '\t').front();
      if (!parse_double(head)) continue;  // column header
    }
    xs.push_back(parse_interaction_line(line, line_no));
  }
  if (xs.empty()) throw Error("empty-dataset");
  for (const auto& x : xs) {
    nu = std::max<std::size_t>(nu, x.user_id + 1);
    ni = std::max<std::size_t>(ni, x.item_id + 1);
    ne = std::max<std::size_t>(ne, x.env_id + 1);
  }
  InteractionDataset data(std::move(xs), nu, ni, ne);
  data.validate();
  return data;
}

inline InteractionDataset load_interactions(const std::string& path) {
  return parse_interactions(read_file(path));
}

// ---------------------------------------------------------------------------
// evidence pool: one record per line, TAB-separated key=value fields

inline std::string format_evidence(const EvidenceItem& ev) {
  std::string out = "id=" + std::to_string(ev.id) + "\tsource=" + source_name(ev.source());
  if (const auto* h = std::get_if<HistoryPayload>(&ev.payload)) {
    out += "\tuser=" + std::to_string(h->user_id) + "\titem=" + std::to_string(h->item_id) +
           "\trating=" + format_double(h->rating) + "\ttimestamp=" + std::to_string(h->timestamp);
  } else if (const auto* a = std::get_if<AttributePayload>(&ev.payload)) {
    out += "\tname=" + a->name + "\tvalue=" + a->value + "\titem=" + std::to_string(a->item_id);
  } else {
    const auto& k = std::get<KgPayload>(ev.payload);
    out += "\thead=" + std::to_string(k.head) + "\trelation=" + k.relation +
           "\ttail=" + std::to_string(k.tail);
  }
  if (ev.stability_var != 0.0) out += "\tstability_var=" + format_double(ev.stability_var);
  if (!ev.embedding.empty()) {
    out += "\tembedding=";
    for (std::size_t i = 0; i < ev.embedding.size(); ++i)
      out += (i ? "," : "") + format_double(ev.embedding[i]);
  }
  return out;
}

inline std::string format_pool(const EvidencePool& pool) {
  std::string out;
  for (const auto& ev : pool.items()) out += format_evidence(ev) + '\n';
  return out;
}

inline void save_evidence_pool(const std::string& path, const EvidencePool& pool) {
  write_file(path, format_pool(pool));
}

inline EvidencePool parse_evidence_pool(std::string_view text) {
  std::map<EvidenceId, EvidenceItem> by_id;
  std::size_t line_no = 0;
  for (auto line : lines_of(text)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto fail = [&](const std::string& code, const std::string& why) {
      throw Error(code, "line " + std::to_string(line_no) + ": " + why);
    };
    std::map<std::string_view, std::string_view> kv;
    for (auto tok : split_view(line, '\t')) {
      const auto eq = tok.find('=');
      if (eq == std::string_view::npos) fail("malformed-record", "field without '='");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    const auto need = [&](std::string_view key) {
      auto it = kv.find(key);
      if (it == kv.end()) fail("malformed-record", "missing " + std::string(key));
      return it->second;
    };
    const auto need_int = [&](std::string_view key) {
      const auto v = parse_int<std::uint32_t>(need(key));
      if (!v) fail("malformed-record", "bad " + std::string(key));
      return *v;
    };
    EvidenceItem ev;
    ev.id = need_int("id");
    const auto src = need("source");
    if (src == "history") {
      const auto r = parse_double(need("rating"));
      const auto t = parse_int<std::int64_t>(need("timestamp"));
      if (!r || !t) fail("malformed-record", "bad history payload");
      ev.payload = HistoryPayload{need_int("user"), need_int("item"), *r, *t};
    } else if (src == "attribute") {
      ev.payload = AttributePayload{std::string(need("name")), std::string(need("value")), need_int("item")};
    } else if (src == "kg_triplet") {
      ev.payload = KgPayload{need_int("head"), std::string(need("relation")), need_int("tail")};
    } else {
      fail("unknown-source", std::string(src));
    }
    if (auto it = kv.find("stability_var"); it != kv.end()) {
      const auto v = parse_double(it->second);
      if (!v || *v < 0) fail("malformed-record", "bad stability_var");
      ev.stability_var = *v;
    }
    if (auto it = kv.find("embedding"); it != kv.end()) {
      for (auto x : split_view(it->second, ',')) {
        const auto v = parse_double(x);
        if (!v) fail("malformed-record", "bad embedding");
        ev.embedding.push_back(*v);
      }
    }
    if (!by_id.emplace(ev.id, ev).second) fail("duplicate-evidence-id", std::to_string(ev.id));
  }
  std::vector<EvidenceItem> items;
  for (auto& [id, ev] : by_id) items.push_back(std::move(ev));
  return EvidencePool(std::move(items));
}

inline EvidencePool load_evidence_pool(const std::string& path) {
  return parse_evidence_pool(read_file(path));
}

// ---------------------------------------------------------------------------
// hyperparameters as key=value

struct HyperField {
  const char* name;
  std::function<std::string(const HyperParams&)> get;
  std::function<bool(HyperParams&, std::string_view)> set;
};

inline const std::vector<HyperField>& hyper_fields() {
  static const std::vector<HyperField> fields = [] {
    std::vector<HyperField> f;
    const auto real = [&](const char* n, double HyperParams::*m) {
      f.push_back({n, [m](const HyperParams& h) { return format_double(h.*m); },
                   [m](HyperParams& h, std::string_view s) {
                     auto v = parse_double(s);
                     if (v) h.*m = *v;
                     return v.has_value();
                   }});
    };
    const auto count = [&](const char* n, std::size_t HyperParams::*m) {
      f.push_back({n, [m](const HyperParams& h) { return std::to_string(h.*m); },
                   [m](HyperParams& h, std::string_view s) {
                     auto v = parse_int<std::size_t>(s);
                     if (v) h.*m = *v;
                     return v.has_value();
                   }});
    };
    real("lambda1", &HyperParams::lambda1);
    real("lambda2", &HyperParams::lambda2);
    real("alpha", &HyperParams::alpha);
    real("beta", &HyperParams::beta);
    real("gamma", &HyperParams::gamma);
    count("K", &HyperParams::K);
    count("d", &HyperParams::d);
    count("L", &HyperParams::L);
    count("n_neg", &HyperParams::n_neg);
    real("lr", &HyperParams::lr);
    count("batch_size", &HyperParams::batch_size);
    count("T1", &HyperParams::T1);
    count("T2", &HyperParams::T2);
    real("tau_cite", &HyperParams::tau_cite);
    real("temp_cite", &HyperParams::temp_cite);
    f.push_back({"seed", [](const HyperParams& h) { return std::to_string(h.seed); },
                 [](HyperParams& h, std::string_view s) {
                   auto v = parse_int<std::uint64_t>(s);
                   if (v) h.seed = *v;
                   return v.has_value();
                 }});
    f.push_back({"stage2_irm", [](const HyperParams& h) { return std::string(h.stage2_irm ? "true" : "false"); },
                 [](HyperParams& h, std::string_view s) {
                   if (s != "true" && s != "false") return false;
                   h.stage2_irm = s == "true";
                   return true;
                 }});
    count("eval_negatives", &HyperParams::eval_negatives);
    count("stability_users", &HyperParams::stability_users);
    return f;
  }();
  return fields;
}

/// Sets one hyperparameter by name; throws on unknown key or bad value.
inline void set_hyper(HyperParams& hp, std::string_view key, std::string_view value) {
  for (const auto& f : hyper_fields())
    if (key == f.name) {
      if (!f.set(hp, value)) throw Error("bad-value", std::string(key) + "=" + std::string(value));
      return;
    }
  throw Error("unknown-key", std::string(key));
}

inline std::string format_hyper(const HyperParams& hp) {
  std::string out;
  for (const auto& f : hyper_fields()) out += std::string(f.name) + "=" + f.get(hp) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint

inline constexpr std::string_view kCheckpointVersion = "cirr-checkpoint 1";

struct Checkpoint {
  HyperParams hyper;
  TrainState state;
};

namespace detail {

inline void write_params(std::string& out, const std::string& prefix, const ModelParams& p) {
  out += prefix + "dims " + std::to_string(p.num_items()) + " " + std::to_string(p.dim()) + " " +
         std::to_string(p.max_context()) + "\n";
  out += prefix + "irm_dummy_w " + format_hex(p.irm_dummy_w) + "\n";
  p.visit([&](const char* name, std::span<const double> s) {
    out += prefix + name + " " + std::to_string(s.size());
    for (double x : s) out += " " + format_hex(x);
    out += "\n";
  });
}

class LineReader {
 public:
  explicit LineReader(std::string_view text) : lines_(lines_of(text)) {}

  std::vector<std::string_view> next_tokens() {
    if (pos_ >= lines_.size()) throw Error("truncated-checkpoint");
    auto toks = split_view(lines_[pos_++], ' ');
    return toks;
  }
  std::string_view next_line() {
    if (pos_ >= lines_.size()) throw Error("truncated-checkpoint");
    return lines_[pos_++];
  }

 private:
  std::vector<std::string_view> lines_;
  std::size_t pos_ = 0;
};

inline double hex_value(std::string_view s) {
  const auto v = parse_double(s);
  if (!v) throw Error("corrupt-checkpoint", std::string(s));
  return *v;
}

inline ModelParams read_params(LineReader& in, std::string_view prefix) {
  auto dims = in.next_tokens();
  if (dims.size() != 4 || dims[0] != std::string(prefix) + "dims") throw Error("corrupt-checkpoint", "dims");
  const auto n = parse_int<std::size_t>(dims[1]);
  const auto d = parse_int<std::size_t>(dims[2]);
  const auto l = parse_int<std::size_t>(dims[3]);
  if (!n || !d || !l) throw Error("corrupt-checkpoint", "dims");
  ModelParams p = ModelParams::zeros(*n, *d, *l);
  auto w = in.next_tokens();
  if (w.size() != 2 || w[0] != std::string(prefix) + "irm_dummy_w") throw Error("corrupt-checkpoint", "irm_dummy_w");
  p.irm_dummy_w = hex_value(w[1]);
  p.visit([&](const char* name, std::span<double> s) {
    auto toks = in.next_tokens();
    if (toks.size() < 2 || toks[0] != std::string(prefix) + name) throw Error("corrupt-checkpoint", name);
    const auto count = parse_int<std::size_t>(toks[1]);
    if (!count || *count != s.size() || toks.size() != s.size() + 2)
      throw Error("truncated-checkpoint", name);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = hex_value(toks[i + 2]);
  });
  return p;
}

}  // namespace detail

inline std::string format_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointVersion);
  out += "\n[hyper]\n" + format_hyper(ck.hyper);
  out += "[progress]\nstage1_epochs=" + std::to_string(ck.state.stage1_epochs) +
         "\nstage2_epochs=" + std::to_string(ck.state.stage2_epochs) + "\n";
  std::ostringstream rng;
  rng << ck.state.rng.engine();
  out += "[rng]\n" + rng.str() + "\n";
  out += "[params]\n";
  detail::write_params(out, "", ck.state.params);
  const auto& a = ck.state.adam;
  out += "[adam]\nstep " + std::to_string(a.step) + " " + format_hex(a.beta1) + " " +
         format_hex(a.beta2) + " " + format_hex(a.eps) + "\n";
  detail::write_params(out, "m.", a.m);
  detail::write_params(out, "v.", a.v);
  out += "[end]\n";
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view text) {
  detail::LineReader in(text);
  if (in.next_line() != kCheckpointVersion) throw Error("incompatible-checkpoint");
  Checkpoint ck;
  if (in.next_line() != "[hyper]") throw Error("corrupt-checkpoint", "[hyper]");
  for (std::size_t i = 0; i < hyper_fields().size(); ++i) {
    const auto line = in.next_line();
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw Error("corrupt-checkpoint", std::string(line));
    set_hyper(ck.hyper, line.substr(0, eq), line.substr(eq + 1));
  }
  if (in.next_line() != "[progress]") throw Error("corrupt-checkpoint", "[progress]");
  for (auto* target : {&ck.state.stage1_epochs, &ck.state.stage2_epochs}) {
    const auto line = in.next_line();
    const auto v = parse_int<std::size_t>(line.substr(line.find('=') + 1));
    if (!v) throw Error("corrupt-checkpoint", std::string(line));
    *target = *v;
  }
  if (in.next_line() != "[rng]") throw Error("corrupt-checkpoint", "[rng]");
  {
    std::istringstream rs{std::string(in.next_line())};
    rs >> ck.state.rng.engine();
    if (!rs) throw Error("corrupt-checkpoint", "rng");
  }
  if (in.next_line() != "[params]") throw Error("corrupt-checkpoint", "[params]");
  ck.state.params = detail::read_params(in, "");
  if (in.next_line() != "[adam]") throw Error("corrupt-checkpoint", "[adam]");
  auto step = in.next_tokens();
  if (step.size() != 5 || step[0] != "step") throw Error("corrupt-checkpoint", "adam step");
  const auto s = parse_int<std::uint64_t>(step[1]);
  if (!s) throw Error("corrupt-checkpoint", "adam step");
  ck.state.adam.step = *s;
  ck.state.adam.beta1 = detail::hex_value(step[2]);
  ck.state.adam.beta2 = detail::hex_value(step[3]);
  ck.state.adam.eps = detail::hex_value(step[4]);
  ck.state.adam.m = detail::read_params(in, "m.");
  ck.state.adam.v = detail::read_params(in, "v.");
  if (in.next_line() != "[end]") throw Error("truncated-checkpoint", "missing [end]");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file(path, format_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace cirr
