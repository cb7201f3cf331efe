#include "pcqa/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "pcqa/error.hpp"
#include "pcqa/scoring.hpp"

namespace pcqa::eval {

namespace fs = std::filesystem;

namespace {

void shuffle_ids(std::vector<std::string>& ids, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);
}

DatasetManifest select(const DatasetManifest& m, const std::set<std::string>& refs) {
  DatasetManifest out;
  for (const auto& e : m.entries)
    if (refs.count(e.ref_id)) out.entries.push_back(e);
  return out;
}

std::string fmt(double v, int prec) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

std::vector<Split> make_splits(const DatasetManifest& manifest, double train_fraction,
                               std::size_t repeats, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw UsageError("make_splits: train fraction must lie in (0,1)");
  if (repeats < 1) throw UsageError("make_splits: repeats must be >= 1");
  auto refs = manifest.reference_ids();
  const std::size_t n = refs.size();
  if (n < 2) throw UsageError("make_splits: need at least two distinct references");
  std::size_t n_train = static_cast<std::size_t>(std::ceil(train_fraction * n - 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  const std::size_t n_test = n - n_train;
  shuffle_ids(refs, seed);

  std::vector<Split> splits;
  for (std::size_t r = 0; r < repeats; ++r) {
    std::set<std::string> test_set;
    for (std::size_t i = 0; i < n_test; ++i) test_set.insert(refs[(r * n_test + i) % n]);
    Split s;
    for (const auto& id : refs) (test_set.count(id) ? s.test_refs : s.train_refs).push_back(id);
    std::sort(s.train_refs.begin(), s.train_refs.end());
    std::sort(s.test_refs.begin(), s.test_refs.end());
    s.train = select(manifest, {s.train_refs.begin(), s.train_refs.end()});
    s.test = select(manifest, test_set);
    splits.push_back(std::move(s));
  }
  return splits;
}

std::pair<DatasetManifest, DatasetManifest> hold_out(const DatasetManifest& manifest,
                                                     double fraction, std::uint64_t seed) {
  auto refs = manifest.reference_ids();
  if (refs.size() < 2 || !(fraction > 0.0)) return {manifest, DatasetManifest{}};
  shuffle_ids(refs, seed);
  std::size_t n_val = static_cast<std::size_t>(std::lround(fraction * refs.size()));
  n_val = std::clamp<std::size_t>(n_val, 1, refs.size() - 1);
  std::set<std::string> val(refs.begin(), refs.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::set<std::string> rest(refs.begin() + static_cast<std::ptrdiff_t>(n_val), refs.end());
  return {select(manifest, rest), select(manifest, val)};
}

void write_split(const Split& split, const fs::path& dir, const std::string& comment) {
  fs::create_directories(dir);
  write_manifest(split.train, dir / "train.csv", comment);
  write_manifest(split.test, dir / "test.csv", comment);
}

Metrics compute_metrics(const std::vector<double>& predicted, const std::vector<double>& mos,
                        bool logistic) {
  Metrics m;
  std::vector<double> mapped = predicted;
  try {
    m.srocc = srocc(predicted, mos);
  } catch (const Error& e) {
    m.error = e.what();
  }
  if (logistic && predicted.size() >= 4) {
    const auto f = fit_logistic(predicted, mos);
    for (auto& v : mapped) v = f(v);
  }
  try {
    m.plcc = plcc(mapped, mos);
  } catch (const Error& e) {
    if (m.error.empty()) m.error = e.what();
  }
  try {
    m.rmse = rmse(mapped, mos);
  } catch (const Error& e) {
    if (m.error.empty()) m.error = e.what();
  }
  return m;
}

RepeatResult evaluate(nn::Model<float>& model, const DatasetManifest& test,
                      const EvalOptions& options, std::string label) {
  if (test.entries.empty()) throw UsageError("evaluate: empty test split");
  RepeatResult r;
  r.label = std::move(label);
  std::vector<double> pred, mos;
  for (const auto& e : test.entries) {
    const PointCloud cloud = load_ply(e.path);
    const CloudScore s = predict_cloud(model, cloud, options.sampling, options.ablation);
    r.clouds.push_back({e.path.stem().string(), e.ref_id, e.mos, s.quality});
    pred.push_back(s.quality);
    mos.push_back(e.mos);
  }
  r.metrics = compute_metrics(pred, mos, options.logistic);
  return r;
}

EvalReport summarize(std::vector<RepeatResult> repeats, bool logistic, std::string config_echo) {
  EvalReport rep;
  rep.logistic = logistic;
  rep.config_echo = std::move(config_echo);
  rep.repeats = std::move(repeats);
  if (rep.repeats.empty()) return rep;
  double s = 0, p = 0, e = 0;
  for (const auto& r : rep.repeats) {
    s += r.metrics.srocc;
    p += r.metrics.plcc;
    e += r.metrics.rmse;
    if (!r.metrics.error.empty() && rep.average.error.empty())
      rep.average.error = "repeat " + r.label + ": " + r.metrics.error;
  }
  const double n = static_cast<double>(rep.repeats.size());
  rep.average.srocc = s / n;
  rep.average.plcc = p / n;
  rep.average.rmse = e / n;
  return rep;
}

void write_report_csv(const EvalReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  std::istringstream echo(report.config_echo);
  for (std::string line; std::getline(echo, line);) out << "# " << line << '\n';
  out << "# plcc_mapping=" << (report.logistic ? "logistic4" : "raw") << '\n';
  out << "kind,repeat,name,ref_id,mos,predicted,srocc,plcc,rmse\n";
  for (const auto& r : report.repeats)
    for (const auto& c : r.clouds)
      out << "cloud," << r.label << ',' << c.name << ',' << c.ref_id << ',' << fmt(c.mos, 6) << ','
          << fmt(c.predicted, 6) << ",,,\n";
  for (const auto& r : report.repeats)
    out << "repeat," << r.label << ",,,,," << fmt(r.metrics.srocc, 6) << ','
        << fmt(r.metrics.plcc, 6) << ',' << fmt(r.metrics.rmse, 6) << '\n';
  out << "average,,,,,," << fmt(report.average.srocc, 6) << ',' << fmt(report.average.plcc, 6)
      << ',' << fmt(report.average.rmse, 6) << '\n';
}

std::string format_table(const std::string& first_column,
                         const std::vector<std::pair<std::string, Metrics>>& rows) {
  std::size_t w = first_column.size();
  for (const auto& [name, m] : rows) w = std::max(w, name.size());
  std::ostringstream out;
  auto pad = [&](const std::string& s) { return s + std::string(w - s.size(), ' '); };
  auto cell = [](double v) {
    std::string s = fmt(v, 3);
    return std::string(s.size() < 6 ? 6 - s.size() : 0, ' ') + s;
  };
  out << pad(first_column) << " |  SROCC |   PLCC |   RMSE\n";
  out << std::string(w, '-') << "-+--------+--------+-------\n";
  for (const auto& [name, m] : rows)
    out << pad(name) << " | " << cell(m.srocc) << " | " << cell(m.plcc) << " | " << cell(m.rmse) << '\n';
  return out.str();
}

std::string format_dataset_table(const std::vector<std::string>& methods,
                                 const std::vector<std::string>& datasets,
                                 const std::vector<std::vector<Metrics>>& cells) {
  if (cells.size() != methods.size())
    throw UsageError("format_dataset_table: one row of cells per method required");
  std::size_t w = std::string("Metrics").size();
  for (const auto& m : methods) w = std::max(w, m.size());
  std::vector<std::size_t> cw;
  for (const auto& d : datasets) cw.push_back(std::max<std::size_t>(d.size(), 13));
  auto pad = [](const std::string& s, std::size_t n) { return s + std::string(n - std::min(n, s.size()), ' '); };

  std::ostringstream out;
  out << pad("", w);
  for (std::size_t d = 0; d < datasets.size(); ++d) out << " | " << pad(datasets[d], cw[d]);
  out << '\n' << pad("Metrics", w);
  for (std::size_t d = 0; d < datasets.size(); ++d) out << " | " << pad("SROCC  PLCC", cw[d]);
  out << '\n' << std::string(w, '-');
  for (std::size_t d = 0; d < datasets.size(); ++d) out << "-+-" << std::string(cw[d], '-');
  out << '\n';
  for (std::size_t m = 0; m < methods.size(); ++m) {
    if (cells[m].size() != datasets.size())
      throw UsageError("format_dataset_table: row '" + methods[m] + "' has the wrong cell count");
    out << pad(methods[m], w);
    for (std::size_t d = 0; d < datasets.size(); ++d)
      out << " | " << pad(pad(fmt(cells[m][d].srocc, 3), 6) + " " + fmt(cells[m][d].plcc, 3), cw[d]);
    out << '\n';
  }
  return out.str();
}

}  // namespace pcqa::eval
