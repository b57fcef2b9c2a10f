#include "dscm/cli.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "dscm/checkpoint.hpp"
#include "dscm/config.hpp"
#include "dscm/evalsuite.hpp"
#include "dscm/synthdata.hpp"
#include "dscm/train.hpp"

namespace dscm::cli {
namespace {

constexpr const char* kGrammar =
    "expected ';'-separated assignments of the form <node>=<const>, <node>=+<delta> or "
    "<node>=f_<NODE>(eps)+<c>, e.g. \"t=3.0\", \"t=+2.0\", \"t=f_T(eps)+1.0\"";

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

double parse_number(const std::string& text, const std::string& item) {
  std::string s = text;
  if (!s.empty() && s[0] == '+') s.erase(0, 1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw UsageError("malformed intervention '" + item + "': '" + text + "' is not a number; " + kGrammar);
  }
  return v;
}

bool is_identifier(const std::string& s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

bool iequals(const std::string& a, const std::string& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

}  // namespace

std::vector<InterventionItem> parse_intervention(std::string_view expr) {
  std::vector<InterventionItem> out;
  std::set<std::string> seen;
  std::size_t start = 0;
  const std::string text(expr);
  if (trim(text).empty()) return out;
  while (start <= text.size()) {
    const std::size_t semi = std::min(text.find(';', start), text.size());
    const std::string item = trim(text.substr(start, semi - start));
    start = semi + 1;
    if (item.empty()) throw UsageError("malformed intervention: empty assignment; " + std::string(kGrammar));
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("malformed intervention '" + item + "': missing '='; " + kGrammar);
    InterventionItem it;
    it.node = trim(item.substr(0, eq));
    const std::string rhs = trim(item.substr(eq + 1));
    if (!is_identifier(it.node)) throw UsageError("malformed intervention '" + item + "': bad node name; " + kGrammar);
    if (rhs.empty()) throw UsageError("malformed intervention '" + item + "': missing value; " + kGrammar);
    if (rhs[0] == '+') {
      it.kind = InterventionItem::Kind::Additive;
      it.value = parse_number(trim(rhs.substr(1)), item);
    } else if (rhs.rfind("f_", 0) == 0) {
      it.kind = InterventionItem::Kind::NoiseShift;
      std::size_t p = 2;
      while (p < rhs.size() && (std::isalnum(static_cast<unsigned char>(rhs[p])) || rhs[p] == '_')) ++p;
      const std::string fname = rhs.substr(2, p - 2);
      if (!iequals(fname, it.node)) {
        throw UsageError("malformed intervention '" + item + "': f_" + fname + " does not name node '" + it.node +
                         "'; " + kGrammar);
      }
      std::string rest = trim(rhs.substr(p));
      if (rest.rfind("(eps)", 0) == 0) rest = trim(rest.substr(5));
      if (rest.empty()) {
        it.value = 0.0;
      } else if (rest[0] == '+' || rest[0] == '-') {
        const double mag = parse_number(trim(rest.substr(1)), item);
        it.value = rest[0] == '-' ? -mag : mag;
      } else {
        throw UsageError("malformed intervention '" + item + "': expected '+<c>' or '-<c>' after f_" + fname + "; " +
                         kGrammar);
      }
    } else {
      it.kind = InterventionItem::Kind::Constant;
      it.value = parse_number(rhs, item);
    }
    if (!seen.insert(it.node).second) throw UsageError("intervention assigns node '" + it.node + "' twice");
    out.push_back(it);
    if (semi == text.size()) break;
  }
  return out;
}

Intervention to_counterfactual_intervention(const std::vector<InterventionItem>& items, const Observation& obs) {
  Intervention iv;
  for (const auto& it : items) {
    switch (it.kind) {
      case InterventionItem::Kind::Constant: iv.set(it.node, it.value); break;
      case InterventionItem::Kind::Additive: {
        auto found = obs.find(it.node);
        if (found == obs.end()) throw UsageError("intervention names unknown node '" + it.node + "'");
        const Tensor& v = found->second;
        std::vector<double> shifted(v.data().begin(), v.data().end());
        for (double& x : shifted) x += it.value;
        iv.set(it.node, Tensor(v.shape(), std::move(shifted)));
        break;
      }
      case InterventionItem::Kind::NoiseShift: iv.noise_shift(it.node, it.value); break;
    }
  }
  return iv;
}

Intervention to_sampling_intervention(const std::vector<InterventionItem>& items) {
  Intervention iv;
  for (const auto& it : items) {
    if (it.kind == InterventionItem::Kind::Constant) {
      iv.set(it.node, it.value);
    } else {
      iv.noise_shift(it.node, it.value);
    }
  }
  return iv;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool quiet = false;
  std::string out;
};

class Log {
 public:
  Log(std::ostream& os, bool quiet) : os_(os), quiet_(quiet) {}
  template <typename... A>
  void operator()(A&&... args) const {
    if (quiet_) return;
    (os_ << ... << args);
    os_ << '\n';
    os_.flush();
  }

 private:
  std::ostream& os_;
  bool quiet_;
};

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::filesystem::path require_out(const Globals& g, const std::string& what) {
  if (g.out.empty()) throw UsageError(what + " needs --out");
  return g.out;
}

void require_dir(const std::string& dir, const std::string& flag) {
  if (dir.empty()) throw UsageError("missing " + flag);
  if (!std::filesystem::is_directory(dir)) throw UsageError(flag + " " + dir + ": no such directory");
}

const std::set<std::string> kDataColumns{"t", "i", "x"};

bool needs_images(const config::GraphConfig& cfg) {
  return std::any_of(cfg.nodes.begin(), cfg.nodes.end(), [](const config::NodeConfig& n) { return n.name == "x"; });
}

// Every node must be backed by a dataset column of the right width.
void check_against_data(const config::GraphConfig& cfg, const std::string& label) {
  for (const auto& n : cfg.nodes) {
    if (!kDataColumns.count(n.name)) {
      throw UsageError(label + ": node '" + n.name + "' has no column in the synthetic dataset (t, i, x)");
    }
    const std::size_t want = n.name == "x" ? synth::kPixels : 1;
    const std::size_t dim = n.mechanism.kind == "gumbel" ? 1 : n.mechanism.dim;
    if (dim != want) {
      throw UsageError(label + ": node '" + n.name + "' has dim " + std::to_string(dim) + " but the dataset has " +
                       std::to_string(want));
    }
  }
}

Observation load_observation(const std::string& dir, synth::Split split, bool images) {
  try {
    return synth::to_observation(synth::read_split(dir, split, images), images);
  } catch (const std::exception& e) {
    throw UsageError("cannot load " + synth::split_name(split) + " split from " + dir + ": " + e.what());
  }
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::size_t n = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  std::string out_dir;
  bool no_images = false;
};

int cmd_generate(const GenerateArgs& a, const Globals& g, std::ostream& out) {
  Log log(out, g.quiet);
  if (a.n == 0) throw UsageError("--n must be at least 1");
  const std::string dir = !a.out_dir.empty() ? a.out_dir : g.out;
  if (dir.empty()) throw UsageError("generate needs --out-dir");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir);
  const std::size_t n_val = a.n_val > 0 ? a.n_val : std::max<std::size_t>(1, a.n / 6);
  const std::size_t n_test = a.n_test > 0 ? a.n_test : std::max<std::size_t>(1, a.n / 6);
  for (auto [split, n] : {std::pair{synth::Split::Train, a.n}, std::pair{synth::Split::Validation, n_val},
                          std::pair{synth::Split::Test, n_test}}) {
    const auto records = synth::generate_dataset(n, g.seed, split, !a.no_images);
    synth::write_split(dir, split, records);
    double mt = 0, mi = 0;
    for (const auto& r : records) {
      mt += r.t;
      mi += r.i;
    }
    log(synth::split_name(split), ": ", n, " records, mean t = ", num(mt / static_cast<double>(n), 3),
        ", mean i = ", num(mi / static_cast<double>(n), 2));
  }
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data_dir;
  std::string resume;
  long epochs = -1;
  long amortised_epochs = -1;
  long amortised_records = -1;
};

int cmd_train(const TrainArgs& a, const Globals& g, std::ostream& out) {
  Log log(out, g.quiet);
  if (a.config.empty()) throw UsageError("train needs --config");
  config::GraphConfig cfg = config::load_config(a.config);
  check_against_data(cfg, a.config);
  const auto out_dir = require_out(g, "train");
  require_dir(a.data_dir, "--data-dir");
  if (a.epochs >= 0) cfg.training.epochs = static_cast<std::size_t>(a.epochs);
  if (a.amortised_epochs >= 0) cfg.training.amortised_epochs = static_cast<std::size_t>(a.amortised_epochs);
  if (a.amortised_records >= 0) cfg.training.amortised_records = static_cast<std::size_t>(a.amortised_records);
  if (g.seed_given) cfg.training.seed = g.seed;

  const bool images = needs_images(cfg);
  const Observation train = load_observation(a.data_dir, synth::Split::Train, images);
  const Observation val = load_observation(a.data_dir, synth::Split::Validation, images);

  Scm scm;
  TrainState state;
  std::map<std::string, double> best_val;
  ParameterSnapshot best_values;
  if (!a.resume.empty()) {
    auto last = load_checkpoint(resolve_checkpoint(a.resume, "last"), cfg.hash());
    auto best = load_checkpoint(resolve_checkpoint(a.resume, "best"), cfg.hash());
    scm = last.scm;
    state.step = last.info.step;
    state.epoch = last.info.epoch;
    state.history = last.info.history;
    best_val = best.info.best_validation;
    best_values = snapshot(best.scm);
    log("resuming from epoch ", state.epoch, ", step ", state.step);
  } else {
    Rng rng(cfg.training.seed);
    scm = config::build_scm(cfg, &train, rng);
  }

  Trainer trainer(scm, cfg.training);
  if (!best_val.empty()) trainer.seed_best(best_val, best_values);

  auto save_both = [&]() {
    CheckpointInfo info;
    info.step = state.step;
    info.epoch = state.epoch;
    info.history = state.history;
    info.best_validation = trainer.best_validation();
    info.role = "last";
    save_checkpoint(out_dir / "last", cfg, scm, info);
    const ParameterSnapshot current = snapshot(scm);
    restore(scm, trainer.best());
    info.role = "best";
    save_checkpoint(out_dir / "best", cfg, scm, info);
    restore(scm, current);
  };

  trainer.fit(train, val, state, [&](const EpochRecord& r) {
    std::string line = "epoch " + std::to_string(r.epoch) + " step " + std::to_string(r.step);
    for (const auto& [node, v] : r.validation) line += "  val " + node + " " + num(v, 4);
    line += "  (" + num(r.seconds, 1) + "s)";
    log(line);
    save_both();
  });
  if (state.history.empty() || state.epoch >= cfg.training.epochs) save_both();
  log("saved ", (out_dir / "best").string(), " and ", (out_dir / "last").string());
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string data_dir;
  std::size_t particles = 4;
  std::size_t recon_samples = 32;
  std::size_t limit = 0;
};

int cmd_eval(const EvalArgs& a, const Globals& g, std::ostream& out) {
  Log log(out, g.quiet);
  if (a.checkpoints.empty()) throw UsageError("eval needs --checkpoints");
  require_dir(a.data_dir, "--data-dir");
  const auto out_path = require_out(g, "eval");
  std::vector<LoadedCheckpoint> models;
  bool images = false;
  for (const auto& c : a.checkpoints) {
    models.push_back(load_checkpoint(c));
    try {
      check_against_data(models.back().config, c);
    } catch (const UsageError& e) {
      throw UsageError("checkpoint with config hash " + models.back().config.hash() + " is incompatible with " +
                       a.data_dir + ": " + e.what());
    }
    images = images || needs_images(models.back().config);
  }
  Observation test = load_observation(a.data_dir, synth::Split::Test, images);
  if (a.limit > 0 && a.limit < test.at("t").rows()) test = select_rows(test, 0, a.limit);
  std::vector<eval::AssociationRow> rows;
  for (const auto& m : models) {
    rows.push_back(eval::association_report(m.config.name, m.scm, test, a.particles, a.recon_samples, g.seed));
    const auto& r = rows.back();
    log(r.model, ": joint >= ", num(r.joint_bound, 2), ", image >= ", num(r.image_bound, 2), ", log p(t) ",
        num(r.log_p_t, 4), ", log p(i", m.scm.node("i").parents.empty() ? "" : "|t", ") ", num(r.log_p_i, 4),
        ", recon MAE ", num(r.reconstruction_mae, 3), ", additivity gap ", num(r.additivity_gap, 3), " (tol ",
        num(r.additivity_tolerance, 3), ")");
  }
  eval::write_association_csv(out_path, rows);
  return 0;
}

// ---------------------------------------------------------------- intervene

struct IntervArgs {
  std::string checkpoint;
  std::string expr;
  bool expr_given = false;
  std::size_t n = 10000;
};

int cmd_intervene(const IntervArgs& a, const Globals& g, std::ostream& out) {
  Log log(out, g.quiet);
  if (a.checkpoint.empty()) throw UsageError("intervene needs --checkpoint");
  if (!a.expr_given) throw UsageError("intervene needs --do");
  if (a.n == 0) throw UsageError("--n must be at least 1");
  const auto items = parse_intervention(a.expr);
  const auto out_dir = require_out(g, "intervene");
  const auto model = load_checkpoint(a.checkpoint);
  for (const auto& it : items) {
    if (!model.scm.has(it.node)) throw UsageError("intervention names unknown node '" + it.node + "'");
  }
  const Scm intervened = model.scm.intervene(to_sampling_intervention(items));
  std::filesystem::create_directories(out_dir);

  NoGradGuard no_grad;
  const Observation s = intervened.ancestral_sample(a.n, Rng(g.seed), true);
  std::vector<std::string> scalars;
  for (const auto& name : intervened.order_names()) {
    if (s.count(name) && s.at(name).cols() == 1) scalars.push_back(name);
  }
  {
    std::ofstream f(out_dir / "samples.csv", std::ios::binary);
    for (std::size_t k = 0; k < scalars.size(); ++k) f << (k ? "," : "") << scalars[k];
    f << '\n';
    char buf[40];
    for (std::size_t r = 0; r < a.n; ++r) {
      for (std::size_t k = 0; k < scalars.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", s.at(scalars[k])(r, 0));
        f << (k ? "," : "") << buf;
      }
      f << '\n';
    }
    if (!f) throw std::runtime_error("failed writing samples.csv");
  }
  log("wrote ", a.n, " interventional samples to ", (out_dir / "samples.csv").string());

  // Oracle comparison when the model covers the generator's scalar nodes.
  if (!s.count("t") || !s.count("i") || items.size() > 1) return 0;
  eval::ScalarIntervention oracle_iv{"t", eval::ScalarIntervention::Kind::NoiseShift, 0.0};
  if (items.size() == 1) {
    oracle_iv.node = items[0].node;
    if (oracle_iv.node != "t" && oracle_iv.node != "i") return 0;
    oracle_iv.kind = items[0].kind == InterventionItem::Kind::Constant ? eval::ScalarIntervention::Kind::Constant
                                                                        : eval::ScalarIntervention::Kind::NoiseShift;
    oracle_iv.value = items[0].value;
  }
  const auto model_samples = eval::sample_pair(intervened, "t", "i", a.n, g.seed);
  const auto oracle = eval::oracle_samples(oracle_iv, a.n, g.seed ^ 0x0AC1EULL);
  const double sks = eval::sliced_ks(model_samples, oracle);
  const double ks_t = eval::marginal_ks(model_samples, oracle, 0);
  const double ks_i = eval::marginal_ks(model_samples, oracle, 1);

  double xl = 1e300, xh = -1e300, yl = 1e300, yh = -1e300;
  for (const auto* set : {&model_samples, &oracle}) {
    for (const auto& p : *set) {
      xl = std::min(xl, p[0]);
      xh = std::max(xh, p[0]);
      yl = std::min(yl, p[1]);
      yh = std::max(yh, p[1]);
    }
  }
  if (!(xh > xl)) xh = xl + 1.0;
  if (!(yh > yl)) yh = yl + 1.0;
  eval::write_samples_csv(out_dir / "oracle_samples.csv", "t", "i", oracle);
  eval::write_histograms_csv(out_dir / "histograms.csv", "t", "i", eval::histogram_2d(model_samples, xl, xh, yl, yh),
                             "model", eval::histogram_2d(oracle, xl, xh, yl, yh), "oracle");
  nlohmann::ordered_json summary{{"intervention", a.expr},  {"n", a.n},         {"seed", g.seed},
                                 {"sliced_ks", sks},        {"ks_t", ks_t},     {"ks_i", ks_i},
                                 {"config_hash", model.config.hash()}};
  std::ofstream(out_dir / "summary.json") << summary.dump(2) << "\n";
  log("sliced KS vs oracle ", num(sks, 4), " (t marginal ", num(ks_t, 4), ", i marginal ", num(ks_i, 4), ")");
  return 0;
}

// ---------------------------------------------------------------- counterfactual

struct CfArgs {
  std::string checkpoint;
  std::string data_dir;
  std::string expr;
  std::size_t index = 0;
  std::size_t count = 1;
  std::size_t samples = 32;
  std::string split = "test";
};

synth::SyntheticRecord reference_for(const synth::SyntheticRecord& r, const std::vector<InterventionItem>& items) {
  synth::SyntheticRecord ref = r;
  auto target_value = [&](const InterventionItem& it, double current) {
    return it.kind == InterventionItem::Kind::Constant ? it.value : current + it.value;
  };
  // Apply t before i so a joint do(t, i) keeps the intervened intensity.
  for (const char* node : {"t", "i"}) {
    for (const auto& it : items) {
      if (it.node != node) continue;
      if (it.node == "t") {
        ref = synth::reference_counterfactual(ref, {synth::ReferenceIntervention::Target::Thickness,
                                                    target_value(it, r.t)});
      } else {
        ref = synth::reference_counterfactual(ref, {synth::ReferenceIntervention::Target::Intensity,
                                                    target_value(it, r.i)});
      }
    }
  }
  return ref;
}

int cmd_counterfactual(const CfArgs& a, const Globals& g, std::ostream& out) {
  Log log(out, g.quiet);
  if (a.checkpoint.empty()) throw UsageError("counterfactual needs --checkpoint");
  require_dir(a.data_dir, "--data-dir");
  if (a.samples == 0) throw UsageError("--samples must be at least 1");
  if (a.count == 0) throw UsageError("--count must be at least 1");
  const auto out_dir = require_out(g, "counterfactual");
  const auto items = parse_intervention(a.expr);
  const auto model = load_checkpoint(a.checkpoint);
  check_against_data(model.config, a.checkpoint);
  for (const auto& it : items) {
    if (!model.scm.has(it.node)) throw UsageError("intervention names unknown node '" + it.node + "'");
    if (it.node == "x") throw UsageError("image interventions are not supported by the counterfactual command");
  }
  synth::Split split = synth::Split::Test;
  if (a.split == "train") split = synth::Split::Train;
  else if (a.split == "val") split = synth::Split::Validation;
  else if (a.split != "test") throw UsageError("--split must be train, val or test");

  const auto all = synth::read_split(a.data_dir, split, true);
  if (a.index >= all.size() || a.index + a.count > all.size()) {
    throw UsageError("records " + std::to_string(a.index) + ".." + std::to_string(a.index + a.count - 1) +
                     " do not exist (split has " + std::to_string(all.size()) + ")");
  }
  const std::vector<synth::SyntheticRecord> records(all.begin() + static_cast<std::ptrdiff_t>(a.index),
                                                    all.begin() + static_cast<std::ptrdiff_t>(a.index + a.count));
  std::vector<synth::SyntheticRecord> refs;
  for (const auto& r : records) {
    try {
      refs.push_back(reference_for(r, items));
    } catch (const std::out_of_range& e) {
      throw UsageError("intervention moves record " + std::to_string(r.index) + " out of range: " + e.what());
    }
  }

  NoGradGuard no_grad;
  Rng rng(g.seed);
  std::vector<std::vector<double>> cf_images, diff_images, ref_images;
  std::vector<std::array<double, 2>> cf_cov;
  const std::size_t chunk = 100;
  for (std::size_t b = 0; b < records.size(); b += chunk) {
    const std::vector<synth::SyntheticRecord> part(records.begin() + static_cast<std::ptrdiff_t>(b),
                                                   records.begin() + static_cast<std::ptrdiff_t>(std::min(records.size(), b + chunk)));
    const Observation obs = synth::to_observation(part, true);
    const auto result = model.scm.counterfactual(obs, to_counterfactual_intervention(items, obs), rng, a.samples);
    for (std::size_t k = 0; k < part.size(); ++k) {
      const auto x = result.mean.at("x").data().subspan(k * synth::kPixels, synth::kPixels);
      std::vector<double> img(x.begin(), x.end()), diff(synth::kPixels);
      for (std::size_t p = 0; p < synth::kPixels; ++p) diff[p] = img[p] - part[k].image[p];
      cf_images.push_back(std::move(img));
      diff_images.push_back(std::move(diff));
      cf_cov.push_back({result.mean.at("t")(k, 0), result.mean.at("i")(k, 0)});
    }
  }
  std::filesystem::create_directories(out_dir);
  double total = 0.0;
  {
    std::ofstream f(out_dir / "counterfactual.csv", std::ios::binary);
    f << "index,t,i,t_cf,i_cf,t_ref,i_ref,mae\n";
    char buf[256];
    for (std::size_t k = 0; k < records.size(); ++k) {
      const double m = eval::mae(cf_images[k], refs[k].image);
      total += m;
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.10g\n", records[k].index,
                    records[k].t, records[k].i, cf_cov[k][0], cf_cov[k][1], refs[k].t, refs[k].i, m);
      f << buf;
      ref_images.push_back(refs[k].image);
    }
    if (!f) throw std::runtime_error("failed writing counterfactual.csv");
  }
  synth::write_images(out_dir / "counterfactual_images.f32", cf_images);
  synth::write_images(out_dir / "difference_images.f32", diff_images);
  synth::write_images(out_dir / "reference_images.f32", ref_images);
  const double mean_mae = total / static_cast<double>(records.size());
  if (records.size() == 1) {
    log("record ", records[0].index, ": t ", num(records[0].t, 3), " -> ", num(cf_cov[0][0], 3), ", i ",
        num(records[0].i, 2), " -> ", num(cf_cov[0][1], 2), "; MAE vs reference ", num(mean_mae, 4));
  } else {
    log(records.size(), " records: mean MAE vs reference ", num(mean_mae, 4));
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deep structural causal models on synthetic stroke images", "dscm"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");
  app.add_option("--out", g.out, "Output path (checkpoint dir, report file or output dir)");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Write train/val/test splits of the synthetic dataset");
  c_gen->add_option("--n", gen.n, "Training records")->required();
  c_gen->add_option("--n-val", gen.n_val, "Validation records (default n/6)");
  c_gen->add_option("--n-test", gen.n_test, "Test records (default n/6)");
  c_gen->add_option("--out-dir", gen.out_dir, "Dataset directory");
  c_gen->add_flag("--no-images", gen.no_images, "Write covariates only");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model from a graph config");
  c_train->add_option("--config", tr.config, "Graph config (JSON)")->required();
  c_train->add_option("--data-dir", tr.data_dir, "Dataset directory")->required();
  c_train->add_option("--epochs", tr.epochs, "Epoch budget (overrides the config)");
  c_train->add_option("--amortised-epochs", tr.amortised_epochs, "Epoch budget of amortised nodes");
  c_train->add_option("--amortised-records", tr.amortised_records, "Training records for amortised nodes");
  c_train->add_option("--resume", tr.resume, "Continue from a training output directory");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Association report on the test split");
  c_eval->add_option("--checkpoints", ev.checkpoints, "Checkpoints, one report row each")->required();
  c_eval->add_option("--data-dir", ev.data_dir, "Dataset directory")->required();
  c_eval->add_option("--particles", ev.particles, "ELBO particles");
  c_eval->add_option("--recon-samples", ev.recon_samples, "Posterior samples for reconstruction");
  c_eval->add_option("--limit", ev.limit, "Evaluate only the first N test records");

  IntervArgs iv;
  auto* c_iv = app.add_subcommand("intervene", "Sample the interventional distribution");
  c_iv->add_option("--checkpoint", iv.checkpoint, "Checkpoint")->required();
  c_iv->add_option("--do", iv.expr, "Intervention, e.g. \"t=f_T(eps)+1.0\" or \"i=128\"")->required();
  c_iv->add_option("--n", iv.n, "Number of samples");

  CfArgs cf;
  auto* c_cf = app.add_subcommand("counterfactual", "Counterfactual images for stored records");
  c_cf->add_option("--checkpoint", cf.checkpoint, "Checkpoint")->required();
  c_cf->add_option("--data-dir", cf.data_dir, "Dataset directory")->required();
  c_cf->add_option("--do", cf.expr, "Intervention, e.g. \"t=+2.0\"; empty for the null intervention")->required();
  c_cf->add_option("--index", cf.index, "First record");
  c_cf->add_option("--count", cf.count, "Number of records");
  c_cf->add_option("--samples", cf.samples, "Abduction samples (default 32)");
  c_cf->add_option("--split", cf.split, "Split: train, val or test");

  std::vector<std::string> args;
  for (int k = argc - 1; k > 0; --k) args.emplace_back(argv[k]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dscm: " << e.what() << "\n";
    return 2;
  }
  g.seed_given = app.count("--seed") > 0;
  iv.expr_given = c_iv->count("--do") > 0;

  try {
    if (*c_gen) return cmd_generate(gen, g, out);
    if (*c_train) return cmd_train(tr, g, out);
    if (*c_eval) return cmd_eval(ev, g, out);
    if (*c_iv) return cmd_intervene(iv, g, out);
    if (*c_cf) return cmd_counterfactual(cf, g, out);
  } catch (const UsageError& e) {
    err << "dscm: " << e.what() << "\n";
    return 2;
  } catch (const config::ConfigError& e) {
    err << "dscm: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "dscm: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dscm::cli
