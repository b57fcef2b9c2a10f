#include "dscm/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "dscm/ops.hpp"

namespace dscm::config {
namespace {

using nlohmann::json;

// Forward iterator over the text that reports how far the parser has read.
class CountingIterator {
 public:
  using iterator_category = std::forward_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  CountingIterator() = default;
  CountingIterator(const char* p, const char* base, std::size_t* consumed) : p_(p), base_(base), consumed_(consumed) {}
  reference operator*() const { return *p_; }
  CountingIterator& operator++() {
    ++p_;
    if (consumed_) *consumed_ = static_cast<std::size_t>(p_ - base_);
    return *this;
  }
  CountingIterator operator++(int) {
    auto old = *this;
    ++*this;
    return old;
  }
  bool operator==(const CountingIterator& o) const { return p_ == o.p_; }
  bool operator!=(const CountingIterator& o) const { return p_ != o.p_; }

 private:
  const char* p_ = nullptr;
  const char* base_ = nullptr;
  std::size_t* consumed_ = nullptr;
};

// Records the source line of every value by its field path.
class LineRecorder : public nlohmann::json_sax<json> {
 public:
  LineRecorder(std::string_view text, const std::size_t* consumed) : text_(text), consumed_(consumed) {}

  std::map<std::string, std::size_t> lines;

  bool null() override { return value(); }
  bool boolean(bool) override { return value(); }
  bool number_integer(number_integer_t) override { return value(); }
  bool number_unsigned(number_unsigned_t) override { return value(); }
  bool number_float(number_float_t, const string_t&) override { return value(); }
  bool string(string_t&) override { return value(); }
  bool binary(binary_t&) override { return value(); }
  bool start_object(std::size_t) override {
    stack_.push_back({false, 0, enter()});
    return true;
  }
  bool key(string_t& k) override {
    key_ = k;
    lines[stack_.back().path + "." + k] = line();
    return true;
  }
  bool end_object() override {
    stack_.pop_back();
    return true;
  }
  bool start_array(std::size_t) override {
    stack_.push_back({true, 0, enter()});
    return true;
  }
  bool end_array() override {
    stack_.pop_back();
    return true;
  }
  bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception&) override { return false; }

 private:
  struct Frame {
    bool array;
    std::size_t index;
    std::string path;
  };

  std::size_t line() const {
    const std::size_t end = std::min(*consumed_ > 0 ? *consumed_ - 1 : 0, text_.size());
    return 1 + static_cast<std::size_t>(std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(end), '\n'));
  }
  std::string enter() {
    if (stack_.empty()) return "";
    Frame& f = stack_.back();
    std::string p = f.array ? f.path + "[" + std::to_string(f.index++) + "]" : f.path + "." + key_;
    lines.emplace(p, line());
    return p;
  }
  bool value() {
    enter();
    return true;
  }

  std::string_view text_;
  const std::size_t* consumed_;
  std::vector<Frame> stack_;
  std::string key_;
};

std::string display(const std::string& path) { return path.empty() ? "<root>" : path.substr(path[0] == '.' ? 1 : 0); }

struct Context {
  std::string origin;
  std::map<std::string, std::size_t> lines;

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    auto it = lines.find(path);
    const std::size_t line = it == lines.end() ? 0 : it->second;
    throw ConfigError(display(path), line, origin + ":" + std::to_string(line) + ": " + display(path) + ": " + msg);
  }
};

// Typed access to one JSON object; remembers which keys were read so the
// rest can be rejected.
class Obj {
 public:
  Obj(const json& j, std::string path, const Context& ctx) : j_(j), path_(std::move(path)), ctx_(ctx) {
    if (!j_.is_object()) ctx_.fail(path_, "expected an object");
  }

  bool has(const std::string& k) const { return j_.contains(k); }
  std::string field(const std::string& k) const { return path_ + "." + k; }

  const json& get(const std::string& k) {
    used_.insert(k);
    if (!j_.contains(k)) ctx_.fail(path_, "missing required key '" + k + "'");
    return j_.at(k);
  }

  std::string str(const std::string& k) {
    const json& v = get(k);
    if (!v.is_string()) ctx_.fail(field(k), "expected a string");
    return v.get<std::string>();
  }
  std::string str(const std::string& k, const std::string& dflt) { return has(k) ? str(k) : dflt; }

  double num(const std::string& k) {
    const json& v = get(k);
    if (!v.is_number()) ctx_.fail(field(k), "expected a number");
    return v.get<double>();
  }
  double num(const std::string& k, double dflt) { return has(k) ? num(k) : dflt; }

  std::size_t count(const std::string& k, std::size_t dflt, std::size_t min = 0) {
    if (!has(k)) return dflt;
    const json& v = get(k);
    if (!v.is_number_integer() || v.get<std::int64_t>() < static_cast<std::int64_t>(min)) {
      ctx_.fail(field(k), "expected an integer >= " + std::to_string(min));
    }
    return v.get<std::size_t>();
  }

  bool flag(const std::string& k, bool dflt) {
    if (!has(k)) return dflt;
    const json& v = get(k);
    if (!v.is_boolean()) ctx_.fail(field(k), "expected true or false");
    return v.get<bool>();
  }

  std::vector<std::size_t> sizes(const std::string& k, std::vector<std::size_t> dflt) {
    if (!has(k)) return dflt;
    const json& v = get(k);
    if (!v.is_array()) ctx_.fail(field(k), "expected an array of positive integers");
    std::vector<std::size_t> out;
    for (std::size_t n = 0; n < v.size(); ++n) {
      if (!v[n].is_number_integer() || v[n].get<std::int64_t>() < 1) {
        ctx_.fail(field(k) + "[" + std::to_string(n) + "]", "expected a positive integer");
      }
      out.push_back(v[n].get<std::size_t>());
    }
    return out;
  }

  std::vector<double> reals(const std::string& k) {
    if (!has(k)) return {};
    const json& v = get(k);
    if (!v.is_array()) ctx_.fail(field(k), "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t n = 0; n < v.size(); ++n) {
      if (!v[n].is_number()) ctx_.fail(field(k) + "[" + std::to_string(n) + "]", "expected a number");
      out.push_back(v[n].get<double>());
    }
    return out;
  }

  std::vector<std::string> names(const std::string& k) {
    if (!has(k)) return {};
    const json& v = get(k);
    if (!v.is_array()) ctx_.fail(field(k), "expected an array of node names");
    std::vector<std::string> out;
    for (std::size_t n = 0; n < v.size(); ++n) {
      if (!v[n].is_string()) ctx_.fail(field(k) + "[" + std::to_string(n) + "]", "expected a string");
      out.push_back(v[n].get<std::string>());
    }
    return out;
  }

  Obj child(const std::string& k) { return Obj(get(k), field(k), ctx_); }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) ctx_.fail(field(it.key()), "unknown key '" + it.key() + "'");
    }
  }

  const std::string& path() const { return path_; }
  const Context& ctx() const { return ctx_; }

 private:
  const json& j_;
  std::string path_;
  const Context& ctx_;
  std::set<std::string> used_;
};

void one_of(const Obj& o, const std::string& k, const std::string& v, std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (v == a) return;
  }
  std::string list;
  for (const char* a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
  o.ctx().fail(o.field(k), "unknown value '" + v + "' (expected one of: " + list + ")");
}

NoiseSpec parse_noise(Obj o) {
  NoiseSpec n;
  n.kind = o.str("kind");
  one_of(o, "kind", n.kind, {"normal", "gamma", "uniform", "gumbel"});
  if (n.kind == "gamma") {
    n.a = o.num("shape");
    n.b = o.num("rate");
  } else if (n.kind == "uniform") {
    n.a = o.num("low");
    n.b = o.num("high");
  } else if (n.kind == "gumbel") {
    n.a = o.num("loc", 0.0);
    n.b = o.num("scale", 1.0);
  }
  o.reject_unknown();
  try {
    validate(to_distribution(n));
  } catch (const std::invalid_argument& e) {
    o.ctx().fail(o.path(), e.what());
  }
  return n;
}

TransformSpec parse_transform(Obj o) {
  TransformSpec t;
  t.kind = o.str("kind");
  one_of(o, "kind", t.kind,
         {"spline", "affine", "conditional_affine", "exp", "sigmoid", "affine_normalisation"});
  if (t.kind == "spline") {
    t.bins = o.count("bins", 8, 1);
    t.bound = o.num("bound", 3.0);
    if (!(t.bound > 0.0)) o.ctx().fail(o.field("bound"), "must be positive");
  } else if (t.kind == "affine") {
    t.learnable = o.flag("learnable", true);
    t.scale = o.reals("scale");
    t.shift = o.reals("shift");
    if (t.scale.size() != t.shift.size()) o.ctx().fail(o.path(), "scale and shift must have the same length");
  } else if (t.kind == "conditional_affine") {
    t.hidden = o.sizes("hidden", {});
    const std::string act = o.str("activation", "leaky_relu");
    one_of(o, "activation", act, {"linear", "leaky_relu"});
    t.activation = act == "linear" ? Activation::Linear : Activation::LeakyRelu;
  } else if (t.kind == "affine_normalisation") {
    const std::string b = o.str("bounds");
    one_of(o, "bounds", b, {"singly", "doubly"});
    t.bounds = b == "singly" ? Bounds::Singly : Bounds::Doubly;
    if (o.has("loc")) t.loc = o.num("loc");
    if (o.has("scale")) t.norm_scale = o.num("scale");
    if (t.loc.has_value() != t.norm_scale.has_value()) {
      o.ctx().fail(o.path(), "give both loc and scale, or neither to fit them to the data");
    }
    if (t.norm_scale && !(*t.norm_scale > 0.0)) o.ctx().fail(o.field("scale"), "must be positive");
  }
  o.reject_unknown();
  return t;
}

MechanismSpec parse_mechanism(Obj o) {
  MechanismSpec m;
  m.kind = o.str("kind");
  one_of(o, "kind", m.kind, {"invertible", "amortised", "amortised_implicit", "gumbel"});
  if (m.kind == "invertible") {
    m.dim = o.count("dim", 1, 1);
    if (o.has("noise")) m.noise = parse_noise(o.child("noise"));
    const json& arr = o.get("transforms");
    if (!arr.is_array() || arr.empty()) o.ctx().fail(o.field("transforms"), "expected a non-empty array");
    for (std::size_t k = 0; k < arr.size(); ++k) {
      m.transforms.push_back(parse_transform(Obj(arr[k], o.field("transforms") + "[" + std::to_string(k) + "]",
                                                 o.ctx())));
    }
  } else if (m.kind == "amortised" || m.kind == "amortised_implicit") {
    m.amortised.dim = o.count("dim", 784, 1);
    m.dim = m.amortised.dim;
    m.amortised.latent = o.count("latent", 16, 1);
    m.amortised.encoder_hidden = o.sizes("encoder_hidden", m.amortised.encoder_hidden);
    m.amortised.decoder_hidden = o.sizes("decoder_hidden", m.amortised.decoder_hidden);
    m.amortised.log_variance = o.num("log_variance", -5.0);
  } else {
    m.categories = o.count("categories", 2, 2);
    m.hidden = o.sizes("hidden", {});
  }
  o.reject_unknown();
  return m;
}

TrainingConfig parse_training(Obj o) {
  TrainingConfig t;
  if (o.has("lr")) {
    Obj lr = o.child("lr");
    t.lr_flow = lr.num("flow", t.lr_flow);
    t.lr_amortised = lr.num("amortised", t.lr_amortised);
    t.lr_discrete = lr.num("discrete", t.lr_discrete);
    for (const char* k : {"flow", "amortised", "discrete"}) {
      if (lr.has(k) && !(lr.num(k) > 0.0)) o.ctx().fail(lr.field(k), "learning rate must be positive");
    }
    lr.reject_unknown();
  }
  t.batch_size = o.count("batch_size", t.batch_size, 1);
  t.epochs = o.count("epochs", t.epochs);
  t.amortised_epochs = o.count("amortised_epochs", t.amortised_epochs);
  t.amortised_records = o.count("amortised_records", t.amortised_records);
  t.particles = o.count("particles", t.particles, 1);
  t.mc_samples = o.count("mc_samples", t.mc_samples, 1);
  t.seed = o.count("seed", 0);
  o.reject_unknown();
  return t;
}

std::size_t mechanism_dim(const MechanismSpec& m) { return m.kind == "gumbel" ? 1 : m.dim; }

}  // namespace

Distribution to_distribution(const NoiseSpec& n) {
  if (n.kind == "normal") return StandardNormal{};
  if (n.kind == "gamma") return GammaDist{n.a, n.b};
  if (n.kind == "uniform") return UniformDist{n.a, n.b};
  if (n.kind == "gumbel") return GumbelDist{n.a, n.b};
  throw std::invalid_argument("unknown noise kind '" + n.kind + "'");
}

ConfigError::ConfigError(std::string field, std::size_t line, const std::string& message)
    : std::runtime_error(message), field_(std::move(field)), line_(line) {}

double TrainingConfig::lr_for(ParamGroup g) const {
  switch (g) {
    case ParamGroup::Flow: return lr_flow;
    case ParamGroup::Amortised: return lr_amortised;
    case ParamGroup::Discrete: return lr_discrete;
  }
  return lr_flow;
}

std::size_t TrainingConfig::epochs_for(ParamGroup g) const {
  return g == ParamGroup::Amortised && amortised_epochs > 0 ? amortised_epochs : epochs;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string GraphConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(source.at("nodes").dump())));
  return buf;
}

const NodeConfig& GraphConfig::node(const std::string& name) const {
  for (const auto& n : nodes) {
    if (n.name == name) return n;
  }
  throw std::out_of_range("config has no node '" + name + "'");
}

GraphConfig parse_config(std::string_view text, const std::string& origin) {
  Context ctx{origin, {}};
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    const auto head = text.substr(0, upto);
    const std::size_t line = 1 + static_cast<std::size_t>(std::count(head.begin(), head.end(), '\n'));
    const std::size_t nl = head.rfind('\n');
    const std::size_t col = upto - (nl == std::string_view::npos ? 0 : nl + 1) + 1;
    std::string what = e.what();
    const auto pos = what.find("syntax error");
    throw ConfigError("", line,
                      origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON: " +
                          (pos == std::string::npos ? what : what.substr(pos)));
  }
  {
    std::size_t consumed = 0;
    LineRecorder rec(text, &consumed);
    CountingIterator first(text.data(), text.data(), &consumed);
    CountingIterator last(text.data() + text.size(), text.data(), nullptr);
    json::sax_parse(first, last, &rec);
    ctx.lines = std::move(rec.lines);
  }

  GraphConfig cfg;
  cfg.source = doc;
  Obj root(doc, "", ctx);
  cfg.name = root.str("name", "model");
  const json& nodes = root.get("nodes");
  if (!nodes.is_array() || nodes.empty()) ctx.fail(".nodes", "expected a non-empty array of nodes");
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    Obj n(nodes[k], ".nodes[" + std::to_string(k) + "]", ctx);
    NodeConfig nc;
    nc.name = n.str("name");
    if (nc.name.empty()) ctx.fail(n.field("name"), "node name must not be empty");
    nc.parents = n.names("parents");
    nc.raw_context = n.flag("raw_context", false);
    nc.mechanism = parse_mechanism(n.child("mechanism"));
    n.reject_unknown();
    cfg.nodes.push_back(std::move(nc));
  }
  if (root.has("training")) cfg.training = parse_training(root.child("training"));
  if (root.has("data")) {
    Obj d = root.child("data");
    cfg.data.dir = d.str("dir", "");
    d.reject_unknown();
  }
  root.reject_unknown();

  // Graph-level checks, reported against the offending node.
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < cfg.nodes.size(); ++k) {
    if (!index.emplace(cfg.nodes[k].name, k).second) {
      ctx.fail(".nodes[" + std::to_string(k) + "].name", "duplicate node name '" + cfg.nodes[k].name + "'");
    }
  }
  for (std::size_t k = 0; k < cfg.nodes.size(); ++k) {
    const auto& nc = cfg.nodes[k];
    const std::string path = ".nodes[" + std::to_string(k) + "]";
    for (std::size_t p = 0; p < nc.parents.size(); ++p) {
      if (!index.count(nc.parents[p])) {
        ctx.fail(path + ".parents[" + std::to_string(p) + "]", "unknown parent '" + nc.parents[p] + "'");
      }
    }
    const auto& m = nc.mechanism;
    if (m.kind == "amortised_implicit") {
      ctx.fail(path + ".mechanism.kind", "amortised_implicit mechanisms are not implemented");
    }
    if (m.kind == "invertible") {
      const auto conditional =
          std::count_if(m.transforms.begin(), m.transforms.end(),
                        [](const TransformSpec& t) { return t.kind == "conditional_affine"; });
      if (nc.parents.empty() && conditional > 0) {
        ctx.fail(path + ".mechanism.transforms", "conditional_affine needs the node to have parents");
      }
      if (!nc.parents.empty() && conditional == 0) {
        ctx.fail(path + ".mechanism.transforms", "a node with parents needs a conditional_affine transform");
      }
      for (std::size_t t = 0; t < m.transforms.size(); ++t) {
        const auto& ts = m.transforms[t];
        if (!ts.scale.empty() && ts.scale.size() != m.dim) {
          ctx.fail(path + ".mechanism.transforms[" + std::to_string(t) + "]", "scale length must equal dim");
        }
      }
    }
  }
  try {
    Rng rng(0);
    build_scm(cfg, nullptr, rng);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    ctx.fail(".nodes", e.what());
  }
  return cfg;
}

GraphConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("", 0, path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

namespace {

std::vector<double> column_values(const Observation* train, const std::string& node) {
  if (!train || !train->count(node)) return {};
  const Tensor& v = train->at(node);
  return {v.data().begin(), v.data().end()};
}

}  // namespace

Scm build_scm(const GraphConfig& config, const Observation* train, Rng& rng) {
  std::map<std::string, std::size_t> dims;
  for (const auto& n : config.nodes) dims[n.name] = mechanism_dim(n.mechanism);

  std::vector<NodeSpec> specs;
  for (std::size_t k = 0; k < config.nodes.size(); ++k) {
    const NodeConfig& nc = config.nodes[k];
    std::size_t ctx_dim = 0;
    for (const auto& p : nc.parents) ctx_dim += dims.at(p);
    Rng node_rng = rng.split(k);
    const MechanismSpec& m = nc.mechanism;
    MechanismPtr mech;

    if (m.kind == "invertible") {
      std::vector<TransformPtr> parts;
      for (const auto& ts : m.transforms) {
        if (ts.kind == "spline") {
          if (m.dim != 1) throw std::invalid_argument("spline transforms support dim 1 only");
          parts.push_back(std::make_shared<LinearSplineTransform>(ts.bins, ts.bound));
        } else if (ts.kind == "affine") {
          if (ts.scale.empty()) {
            parts.push_back(AffineTransform::identity(m.dim, ts.learnable));
          } else {
            parts.push_back(std::make_shared<AffineTransform>(ts.scale, ts.shift, ts.learnable));
          }
        } else if (ts.kind == "conditional_affine") {
          auto net = std::make_shared<ContextNetwork>(ctx_dim, ts.hidden, 2 * m.dim, ts.activation, node_rng,
                                                      FinalInit::Zero);
          parts.push_back(std::make_shared<ConditionalAffineTransform>(net, m.dim));
        } else if (ts.kind == "exp") {
          parts.push_back(std::make_shared<ExpTransform>());
        } else if (ts.kind == "sigmoid") {
          parts.push_back(std::make_shared<SigmoidTransform>());
        } else if (ts.kind == "affine_normalisation") {
          if (m.dim != 1) throw std::invalid_argument("affine_normalisation supports dim 1 only");
          if (ts.loc) {
            parts.push_back(std::make_shared<AffineNormalisation>(ts.bounds, *ts.loc, *ts.norm_scale));
          } else if (auto col = column_values(train, nc.name); !col.empty()) {
            parts.push_back(affine_normalisation_fit(Tensor(Shape{col.size(), 1}, col), ts.bounds));
          } else {
            parts.push_back(std::make_shared<AffineNormalisation>(ts.bounds, 0.0, 1.0));
          }
        }
      }
      auto flow = std::make_shared<ComposedTransform>(std::move(parts));
      mech = std::make_shared<InvertibleMechanism>(flow, to_distribution(m.noise), m.dim);
    } else if (m.kind == "amortised") {
      auto am = std::make_shared<AmortisedMechanism>(m.amortised, ctx_dim, node_rng);
      if (train && train->count(nc.name)) {
        const Tensor logits = ImagePreprocessing::to_logit(train->at(nc.name));
        const std::size_t rows = logits.rows(), cols = logits.cols();
        std::vector<double> bias(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) bias[c] += logits(r, c);
        }
        for (double& b : bias) b /= static_cast<double>(rows);
        am->set_output_bias(bias);
      }
      mech = am;
    } else if (m.kind == "gumbel") {
      if (nc.parents.empty()) {
        mech = std::make_shared<GumbelMechanism>(m.categories);
      } else {
        auto net = std::make_shared<ContextNetwork>(ctx_dim, m.hidden, m.categories, Activation::LeakyRelu,
                                                    node_rng, FinalInit::Zero);
        mech = std::make_shared<GumbelMechanism>(net);
      }
    } else {
      throw std::invalid_argument("mechanism kind '" + m.kind + "' cannot be built");
    }
    specs.push_back({nc.name, nc.parents, mech, nc.raw_context});
  }
  return Scm(std::move(specs));
}

}  // namespace dscm::config
