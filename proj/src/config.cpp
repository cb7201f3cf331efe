#include "pcqa/config.hpp"

#include <charconv>
#include <cmath>
#include <algorithm>
#include <functional>
#include <map>
#include <sstream>

#include "pcqa/error.hpp"
#include "pcqa/pc_io.hpp"

namespace pcqa {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw UsageError("config: '" + key + "' expects a number, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw UsageError("config: '" + key + "' expects true/false, got '" + text + "'");
}

std::array<int, 5> parse_five(const std::string& key, const std::string& text) {
  std::vector<std::string> cells;
  std::istringstream in(text);
  for (std::string cell; std::getline(in, cell, ',');) cells.push_back(trim(cell));
  if (cells.size() != 5)
    throw UsageError("config: '" + key + "' expects five comma-separated integers, got '" + text + "'");
  std::array<int, 5> out{};
  for (std::size_t i = 0; i < 5; ++i) out[i] = parse_number<int>(key, cells[i]);
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string fmt_five(const std::array<int, 5>& a) {
  std::string s;
  for (int i = 0; i < 5; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Field number(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_number<T>(k, v);
          },
          [access](const RunConfig& c) {
            RunConfig copy = c;
            if constexpr (std::is_floating_point_v<T>)
              return fmt_double(access(copy));
            else
              return std::to_string(access(copy));
          }};
}

// Ordered so that to_ini() groups keys by section in a stable order.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"sampling.patches", number<std::size_t>([](RunConfig& c) -> auto& { return c.sampling.patch_count; })},
      {"sampling.points", number<std::size_t>([](RunConfig& c) -> auto& { return c.sampling.points_per_patch; })},
      {"sampling.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.sampling.seed; })},
      {"model.repeats",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.repeats = parse_five(k, v); },
        [](const RunConfig& c) { return fmt_five(c.model.repeats); }}},
      {"model.widths",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.widths = parse_five(k, v); },
        [](const RunConfig& c) { return fmt_five(c.model.widths); }}},
      {"model.head_dim", number<int>([](RunConfig& c) -> auto& { return c.model.head_dim; })},
      {"model.kernel", number<int>([](RunConfig& c) -> auto& { return c.model.kernel; })},
      {"model.scale", number<double>([](RunConfig& c) -> auto& { return c.model.scale; })},
      {"model.expansion", number<int>([](RunConfig& c) -> auto& { return c.model.expansion; })},
      {"model.stem_concat",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.stem_concat = parse_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.model.stem_concat ? "true" : "false"); }}},
      {"model.head_bias", number<double>([](RunConfig& c) -> auto& { return c.model.head_bias; })},
      {"model.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.model_seed; })},
      {"train.lr", number<double>([](RunConfig& c) -> auto& { return c.train.lr; })},
      {"train.momentum", number<double>([](RunConfig& c) -> auto& { return c.train.momentum; })},
      {"train.weight_decay", number<double>([](RunConfig& c) -> auto& { return c.train.weight_decay; })},
      {"train.batch", number<int>([](RunConfig& c) -> auto& { return c.train.batch; })},
      {"train.epochs", number<int>([](RunConfig& c) -> auto& { return c.train.epochs; })},
      {"train.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.train.seed; })},
      {"train.patches_per_cloud", number<int>([](RunConfig& c) -> auto& { return c.train.patches_per_cloud; })},
      {"train.ablation",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.train.ablation = parse_ablation(v); },
        [](const RunConfig& c) { return std::string(to_string(c.train.ablation)); }}},
      {"train.val_fraction", number<double>([](RunConfig& c) -> auto& { return c.train.val_fraction; })},
      {"eval.logistic",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.eval.logistic = parse_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.eval.logistic ? "true" : "false"); }}},
      {"eval.train_fraction", number<double>([](RunConfig& c) -> auto& { return c.eval.train_fraction; })},
      {"eval.repeats", number<int>([](RunConfig& c) -> auto& { return c.eval.repeats; })},
      {"eval.split_seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.eval.split_seed; })},
      {"run.threads", number<int>([](RunConfig& c) -> auto& { return c.threads; })},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return &f;
  return nullptr;
}

}  // namespace

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const Field* f = find_field(dotted_key);
  if (!f) throw UsageError("config: unknown key '" + dotted_key + "'");
  f->set(*this, dotted_key, trim(value));
}

void RunConfig::finalize() {
  sampling.validate();
  model.grid = static_cast<int>(sampling.grid());
  model.validate();
  train.validate();
  if (!(eval.train_fraction > 0.0 && eval.train_fraction < 1.0))
    throw UsageError("config: eval.train_fraction must lie in (0,1)");
  if (eval.repeats < 1) throw UsageError("config: eval.repeats must be >= 1");
  if (threads < 0) throw UsageError("config: run.threads must be >= 0");
}

std::string RunConfig::to_ini(bool include_run) const {
  std::ostringstream out;
  std::string section;
  for (const auto& [name, f] : fields()) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec == "run" && !include_run) continue;
    if (sec != section) {
      if (!section.empty()) out << '\n';
      out << '[' << sec << "]\n";
      section = sec;
    }
    out << name.substr(dot + 1) << " = " << f.get(*this) << '\n';
  }
  return out.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c;
  c.merge(text, origin);
  return c;
}

void RunConfig::merge(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string section;
  int lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    std::string line = trim(raw.substr(0, raw.find_first_of("#;")));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      static const char* known[] = {"sampling", "model", "train", "eval", "run"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known))
        throw UsageError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + "expected key = value");
    if (section.empty()) throw UsageError(where + "key outside of a section");
    try {
      set(section + "." + trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UsageError("config file '" + path.string() + "' not found");
  merge(read_file(path), path.string());
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  RunConfig c;
  c.merge_file(path);
  return c;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& [name, f] : fields()) k.push_back(name);
  return k;
}

}  // namespace pcqa
