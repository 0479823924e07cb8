#include "advscale/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <set>
#include <sstream>

#include <json.hpp>

#include "advscale/error.hpp"
#include "advscale/io.hpp"
#include "advscale/stats.hpp"

namespace advscale {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string version() { return ADVSCALE_VERSION; }

namespace {

struct KindName {
  ExperimentKind kind;
  const char* name;
};

constexpr KindName kKinds[] = {
    {ExperimentKind::Train, "train"},
    {ExperimentKind::AttackCurve, "attack-curve"},
    {ExperimentKind::Fit, "fit"},
    {ExperimentKind::EpsilonHat, "epsilon-hat"},
    {ExperimentKind::DeltaDist, "delta-dist"},
    {ExperimentKind::Oracle, "oracle"},
    {ExperimentKind::Transfer, "transfer"},
    {ExperimentKind::EntropyCompare, "entropy-compare"},
    {ExperimentKind::ShuffledLabels, "shuffled-labels"},
};

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Json layer_json(const Layer& layer) {
  return std::visit(
      [](const auto& l) -> Json {
        using T = std::decay_t<decltype(l)>;
        Json j;
        if constexpr (std::is_same_v<T, Normalize>) {
          j["type"] = "normalize";
          j["scale"] = l.scale;
        } else if constexpr (std::is_same_v<T, Dense>) {
          j["type"] = "dense";
          j["in"] = l.in;
          j["out"] = l.out;
        } else if constexpr (std::is_same_v<T, Relu>) {
          j["type"] = "relu";
        } else if constexpr (std::is_same_v<T, Conv2d>) {
          j["type"] = "conv2d";
          j["in_channels"] = l.in_channels;
          j["out_channels"] = l.out_channels;
          j["kernel"] = l.kernel;
          j["stride"] = l.stride;
          j["padding"] = l.padding;
        } else if constexpr (std::is_same_v<T, MaxPool2d>) {
          j["type"] = "maxpool2d";
          j["window"] = l.window;
        } else if constexpr (std::is_same_v<T, Flatten>) {
          j["type"] = "flatten";
        } else {
          j["type"] = "dropout";
          j["rate"] = l.rate;
        }
        return j;
      },
      layer);
}

Layer layer_from_json(const Json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "normalize") return Normalize{j.at("scale").get<double>()};
  if (type == "dense") return Dense{j.at("in").get<std::size_t>(), j.at("out").get<std::size_t>()};
  if (type == "relu") return Relu{};
  if (type == "conv2d") {
    return Conv2d{j.at("in_channels").get<std::size_t>(), j.at("out_channels").get<std::size_t>(),
                  j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>(),
                  j.at("padding").get<std::size_t>()};
  }
  if (type == "maxpool2d") return MaxPool2d{j.at("window").get<std::size_t>()};
  if (type == "flatten") return Flatten{};
  if (type == "dropout") return Dropout{j.at("rate").get<double>()};
  throw InvalidArgument("unknown layer type '" + type + "' in model file");
}

Json tensor_json(const Tensor& t) {
  Json j;
  j["shape"] = t.shape();
  j["values"] = t.values();
  return j;
}

Tensor tensor_from_json(const Json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

// Exclusive lock file inside the output directory, removed on destruction.
class OutputLock {
 public:
  explicit OutputLock(fs::path path) : path_(std::move(path)) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) {
        throw Error("output directory is in use by another run (remove " + path_.string() +
                    " if that run is gone)");
      }
      throw Error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

class Artifacts {
 public:
  explicit Artifacts(fs::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& name, const std::string& contents) {
    write_text_file(dir_ / name, contents);
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
  }
  const std::vector<std::string>& files() const noexcept { return files_; }
  const fs::path& dir() const noexcept { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

template <typename Fn>
std::string render(Fn&& fn) {
  std::ostringstream out;
  fn(out);
  return out.str();
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

std::string training_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch,mean_loss,train_accuracy\n";
  for (const auto& m : metrics) {
    out += std::to_string(m.epoch) + "," + format_double(m.mean_loss) + "," +
           format_double(m.train_accuracy) + "\n";
  }
  return out;
}

Json fit_to_json(const PowerLawFit& fit) { return Json::parse(fit_json(fit)); }

}  // namespace

std::string to_string(ExperimentKind kind) {
  for (const auto& k : kKinds) {
    if (k.kind == kind) return k.name;
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(const std::string& name) {
  for (const auto& k : kKinds) {
    if (name == k.name) return k.kind;
  }
  std::string names;
  for (const auto& k : kKinds) names += std::string(names.empty() ? "" : " | ") + k.name;
  throw ConfigError("kind", "unknown experiment kind '" + name + "' (" + names + ")");
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) {
  return splitmix64(master ^ fnv1a64(stage));
}

std::string model_to_json(const Network& net) {
  Json j;
  j["format"] = "advscale-model";
  j["format_version"] = 1;
  const auto& arch = net.architecture();
  j["input_shape"] = arch.input_shape;
  j["n_classes"] = arch.n_classes;
  j["layers"] = Json::array();
  for (const auto& layer : arch.layers) j["layers"].push_back(layer_json(layer));
  j["params"] = Json::array();
  for (const auto& p : net.params()) {
    Json pj = Json::object();
    if (!p.empty()) {
      pj["weight"] = tensor_json(p.weight);
      pj["bias"] = tensor_json(p.bias);
    }
    j["params"].push_back(pj);
  }
  return j.dump() + "\n";
}

Network model_from_json(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw InvalidArgument(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "advscale-model") throw InvalidArgument("not an advscale model file");
    Architecture arch;
    arch.input_shape = j.at("input_shape").get<Shape>();
    arch.n_classes = j.at("n_classes").get<std::size_t>();
    for (const auto& lj : j.at("layers")) arch.layers.push_back(layer_from_json(lj));
    std::vector<LayerParams> params;
    for (const auto& pj : j.at("params")) {
      LayerParams p;
      if (pj.contains("weight")) {
        p.weight = tensor_from_json(pj.at("weight"));
        p.bias = tensor_from_json(pj.at("bias"));
      }
      params.push_back(std::move(p));
    }
    return Network(std::move(arch), std::move(params));
  } catch (const Json::exception& e) {
    throw InvalidArgument(std::string("malformed model file: ") + e.what());
  }
}

void save_model(const Network& net, const fs::path& path) { write_text_file(path, model_to_json(net)); }

Network load_model(const fs::path& path) { return model_from_json(read_text_file(path)); }

fs::path default_data_dir() {
  if (const char* env = std::getenv("ADVSCALE_DATA_DIR"); env && *env) return env;
  return fs::path("data") / "mnist";
}

DataSplits load_data(const DataSourceConfig& cfg, std::uint64_t seed) {
  DataSplits out;
  auto require = [](const fs::path& p, const char* key) {
    if (!fs::exists(p)) throw ConfigError(key, "file not found: " + p.string());
  };
  switch (cfg.kind) {
    case DataSourceConfig::Kind::Mnist: {
      const fs::path dir = cfg.dir.empty() ? default_data_dir() : cfg.dir;
      const fs::path files[] = {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                                dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"};
      for (const auto& f : files) require(f, "data.dir");
      out.train = load_idx(files[0], files[1], Split::Train);
      out.test = load_idx(files[2], files[3], Split::Test);
      break;
    }
    case DataSourceConfig::Kind::Idx:
      require(cfg.train_images, "data.train_images");
      require(cfg.train_labels, "data.train_labels");
      require(cfg.test_images, "data.test_images");
      require(cfg.test_labels, "data.test_labels");
      out.train = load_idx(cfg.train_images, cfg.train_labels, Split::Train);
      out.test = load_idx(cfg.test_images, cfg.test_labels, Split::Test);
      break;
    case DataSourceConfig::Kind::Synth: {
      SynthConfig sc = cfg.synth;
      const std::size_t train_pc = sc.per_class;
      sc.per_class = train_pc + cfg.synth_test_per_class;
      sc.seed = derive_seed(seed, "data.synth");
      const Dataset all = synth_blobs(sc);
      std::vector<std::size_t> train_idx, test_idx;
      std::vector<std::size_t> seen(sc.n_classes, 0);
      for (std::size_t i = 0; i < all.size(); ++i) {
        (seen[all.labels[i]]++ < train_pc ? train_idx : test_idx).push_back(i);
      }
      out.train = all.select(train_idx);
      out.train.split = Split::Train;
      out.test = all.select(test_idx);
      out.test.split = Split::Test;
      break;
    }
  }
  if (cfg.train_limit) out.train = out.train.head(*cfg.train_limit);
  if (cfg.test_limit) out.test = out.test.head(*cfg.test_limit);
  return out;
}

Architecture make_architecture(const ModelConfig& cfg, const Dataset& data) {
  const std::size_t inputs = shape_size(data.input_shape);
  if (cfg.arch == "mlp") return Architecture::mlp(inputs, cfg.hidden, data.n_classes, cfg.dropout);
  if (cfg.arch == "linear") return Architecture::linear(inputs, data.n_classes);
  if (cfg.arch == "convnet") {
    Shape chw = data.input_shape;
    if (chw.size() == 2) chw.insert(chw.begin(), 1);
    if (chw.size() != 3) throw ConfigError("model.arch", "convnet needs image-shaped inputs");
    return Architecture::convnet(chw, data.n_classes, cfg.channels, cfg.conv_hidden);
  }
  throw ConfigError("model.arch", "unknown architecture '" + cfg.arch + "' (mlp | linear | convnet)");
}

namespace {

const std::set<std::string> kKnownKeys = {
    "kind", "seed", "output.dir",
    "data.source", "data.dir", "data.train_images", "data.train_labels", "data.test_images",
    "data.test_labels", "data.train_limit", "data.test_limit", "data.synth.classes",
    "data.synth.dims", "data.synth.per_class", "data.synth.test_per_class",
    "data.synth.separation", "data.synth.std",
    "model.path", "model.arch", "model.hidden", "model.dropout", "model.channels",
    "model.conv_hidden",
    "train.learning_rate", "train.momentum", "train.epochs", "train.batch_size",
    "train.entropy_lambda", "train.stop_at_train_accuracy", "train.adv_mix.fraction",
    "train.adv_mix.family", "train.adv_mix.epsilon",
    "eval.split", "eval.limit",
    "attack.families", "attack.pgd_steps", "attack.pgd_step_ratio", "attack.random_start",
    "attack.clip", "attack.l2_scale",
    "eps.grid", "eps.lo", "eps.hi", "eps.points", "eps.include_zero",
    "fit.window",
    "oracle.classes", "oracle.base", "oracle.samples", "oracle.j_max", "oracle.streams",
    "oracle.threads",
    "density.bins", "delta.j_max",
    "epsilon_hat.eps_max", "epsilon_hat.tol", "epsilon_hat.grid_points", "epsilon_hat.clip",
    "epsilon_hat.correct_only",
    "entropy.lambdas", "entropy.threshold",
    "transfer.epsilons",
    "shuffled.examples", "shuffled.max_epochs",
};

FitWindow parse_window(const Config& c, const std::string& key) {
  const auto v = *c.get_doubles(key);
  if (v.size() != 2 || !(v[0] > 0.0) || !(v[1] > v[0])) {
    throw ConfigError(key, "expected `lo, hi` with 0 < lo < hi");
  }
  return {v[0], v[1]};
}

template <typename Fn>
auto guarded(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

ExperimentConfig make_experiment_config(ExperimentKind kind, const Config& source,
                                        const RunOverrides& overrides) {
  const Config& c = source;
  for (const auto& [key, value] : c.entries()) {
    if (kKnownKeys.count(key)) continue;
    if (key.rfind("delta.window.", 0) == 0) continue;
    throw ConfigError(key, "unknown key");
  }

  ExperimentConfig cfg;
  cfg.kind = kind;
  cfg.source = source;
  if (const auto k = c.get_string("kind"); k && parse_experiment_kind(*k) != kind) {
    throw ConfigError("kind", "config declares '" + *k + "' but '" + to_string(kind) + "' was requested");
  }
  cfg.seed = overrides.seed ? *overrides.seed : c.get_uint("seed").value_or(0);
  cfg.source.set("seed", std::to_string(cfg.seed));
  if (overrides.out_dir) {
    cfg.out_dir = *overrides.out_dir;
  } else if (const auto o = c.get_string("output.dir")) {
    cfg.out_dir = *o;
  } else {
    cfg.out_dir = fs::path("runs") / to_string(kind);
  }

  auto& d = cfg.data;
  const std::string src = c.get_string("data.source").value_or("mnist");
  if (src == "mnist") {
    d.kind = DataSourceConfig::Kind::Mnist;
    d.dir = c.get_string("data.dir").value_or("");
  } else if (src == "idx") {
    d.kind = DataSourceConfig::Kind::Idx;
    const char* keys[] = {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"};
    fs::path* dst[] = {&d.train_images, &d.train_labels, &d.test_images, &d.test_labels};
    for (int i = 0; i < 4; ++i) {
      const auto v = c.get_string(keys[i]);
      if (!v) throw ConfigError(keys[i], "required when data.source = idx");
      *dst[i] = *v;
    }
  } else if (src == "synth") {
    d.kind = DataSourceConfig::Kind::Synth;
    d.synth.n_classes = c.get_uint("data.synth.classes").value_or(3);
    d.synth.dims = c.get_uint("data.synth.dims").value_or(10);
    d.synth.per_class = c.get_uint("data.synth.per_class").value_or(50);
    d.synth_test_per_class = c.get_uint("data.synth.test_per_class").value_or(50);
    d.synth.separation = c.get_double("data.synth.separation").value_or(100.0);
    d.synth.cluster_std = c.get_double("data.synth.std").value_or(1.0);
    if (d.synth.n_classes < 2 || d.synth.dims == 0 || d.synth.per_class == 0 ||
        d.synth_test_per_class == 0 || !(d.synth.separation > 0) || !(d.synth.cluster_std > 0)) {
      throw ConfigError("data.synth", "classes >= 2 and all other fields positive");
    }
  } else {
    throw ConfigError("data.source", "expected mnist | idx | synth, got '" + src + "'");
  }
  if (const auto v = c.get_uint("data.train_limit")) d.train_limit = *v;
  if (const auto v = c.get_uint("data.test_limit")) d.test_limit = *v;

  auto& m = cfg.model;
  if (const auto p = c.get_string("model.path")) m.path = *p;
  m.arch = c.get_string("model.arch").value_or("mlp");
  if (m.arch != "mlp" && m.arch != "linear" && m.arch != "convnet") {
    throw ConfigError("model.arch", "expected mlp | linear | convnet");
  }
  if (const auto h = c.get_doubles("model.hidden")) {
    m.hidden.clear();
    for (double v : *h) {
      if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError("model.hidden", "widths must be positive integers");
      m.hidden.push_back(static_cast<std::size_t>(v));
    }
  }
  m.dropout = c.get_double("model.dropout").value_or(0.0);
  if (!(m.dropout >= 0.0 && m.dropout < 1.0)) throw ConfigError("model.dropout", "must be in [0,1)");
  m.channels = c.get_uint("model.channels").value_or(8);
  m.conv_hidden = c.get_uint("model.conv_hidden").value_or(64);

  auto& t = cfg.train;
  t.learning_rate = c.get_double("train.learning_rate").value_or(t.learning_rate);
  t.momentum = c.get_double("train.momentum").value_or(t.momentum);
  t.epochs = c.get_uint("train.epochs").value_or(t.epochs);
  t.batch_size = c.get_uint("train.batch_size").value_or(t.batch_size);
  if (const auto v = c.get_double("train.stop_at_train_accuracy")) t.stop_at_train_accuracy = *v;
  cfg.loss.entropy_lambda = c.get_double("train.entropy_lambda").value_or(0.0);
  if (!(cfg.loss.entropy_lambda >= 0.0)) throw ConfigError("train.entropy_lambda", "must be >= 0");
  if (c.has("train.adv_mix.fraction") || c.has("train.adv_mix.family") || c.has("train.adv_mix.epsilon")) {
    AdvMix mix;
    mix.fraction = c.get_double("train.adv_mix.fraction").value_or(0.5);
    mix.attack.family = guarded("train.adv_mix.family", [&] {
      return parse_attack_family(c.get_string("train.adv_mix.family").value_or("fgsm_linf"));
    });
    const auto eps = c.get_double("train.adv_mix.epsilon");
    if (!eps) throw ConfigError("train.adv_mix.epsilon", "required when adversarial mixing is enabled");
    mix.attack.epsilon = *eps;
    t.adv_mix = mix;
  }
  guarded("train", [&] { t.validate(); return 0; });

  const std::string split = c.get_string("eval.split").value_or("test");
  if (split != "test" && split != "train") throw ConfigError("eval.split", "expected test | train");
  cfg.eval_on_train = split == "train" || kind == ExperimentKind::ShuffledLabels;
  if (const auto v = c.get_uint("eval.limit")) cfg.eval_limit = *v;

  if (const auto fams = c.get_strings("attack.families")) {
    cfg.attacks.clear();
    for (const auto& f : *fams) cfg.attacks.push_back(guarded("attack.families", [&] { return parse_attack_family(f); }));
  } else if (kind == ExperimentKind::EntropyCompare) {
    cfg.attacks = {AttackFamily::StepLL};
  }
  cfg.attack.pgd_steps = c.get_uint("attack.pgd_steps").value_or(20);
  cfg.pgd_step_ratio = c.get_double("attack.pgd_step_ratio").value_or(0.25);
  if (!(cfg.pgd_step_ratio > 0.0)) throw ConfigError("attack.pgd_step_ratio", "must be positive");
  cfg.attack.pgd_random_start = c.get_bool("attack.random_start").value_or(false);
  cfg.attack.clip_to_valid = c.get_bool("attack.clip").value_or(true);
  const std::string l2 = c.get_string("attack.l2_scale").value_or("sqrt_dim");
  if (l2 != "sqrt_dim" && l2 != "none") throw ConfigError("attack.l2_scale", "expected sqrt_dim | none");
  cfg.l2_scale_by_dim = l2 == "sqrt_dim";
  if (cfg.attack.pgd_steps == 0) throw ConfigError("attack.pgd_steps", "must be positive");

  if (const auto g = c.get_doubles("eps.grid")) {
    cfg.eps_grid = *g;
  } else {
    const double lo = c.get_double("eps.lo").value_or(0.01);
    const double hi = c.get_double("eps.hi").value_or(64.0);
    const auto points = c.get_uint("eps.points").value_or(32);
    cfg.eps_grid = guarded("eps", [&] { return log_grid(lo, hi, points); });
  }
  if (c.get_bool("eps.include_zero").value_or(false) && (cfg.eps_grid.empty() || cfg.eps_grid.front() != 0.0)) {
    cfg.eps_grid.insert(cfg.eps_grid.begin(), 0.0);
  }
  if (cfg.eps_grid.empty()) throw ConfigError("eps.grid", "empty grid");
  for (std::size_t i = 0; i < cfg.eps_grid.size(); ++i) {
    if (!(cfg.eps_grid[i] >= 0.0) || (i && !(cfg.eps_grid[i] > cfg.eps_grid[i - 1]))) {
      throw ConfigError("eps.grid", "must be nonnegative and strictly increasing");
    }
  }
  if (c.has("fit.window")) cfg.fit_window = parse_window(c, "fit.window");

  auto& o = cfg.oracle;
  o.n_classes = c.get_uint("oracle.classes").value_or(10);
  o.base = guarded("oracle.base", [&] { return parse_base_distribution(c.get_string("oracle.base").value_or("uniform")); });
  o.n_samples = c.get_uint("oracle.samples").value_or(5'000'000);
  o.j_max = c.get_uint("oracle.j_max").value_or(4);
  o.streams = c.get_uint("oracle.streams").value_or(8);
  o.threads = c.get_uint("oracle.threads").value_or(1);
  o.seed = derive_seed(cfg.seed, "oracle");
  if (kind == ExperimentKind::Oracle) {
    guarded("oracle", [&] { o.validate(); return 0; });
    if (o.n_samples < 100) throw ConfigError("oracle.samples", "need at least 100 samples");
  }
  cfg.density_bins = c.get_uint("density.bins").value_or(40);
  if (cfg.density_bins == 0) throw ConfigError("density.bins", "must be positive");
  cfg.j_max = c.get_uint("delta.j_max").value_or(4);
  if (cfg.j_max < 2) throw ConfigError("delta.j_max", "must be at least 2");
  for (const auto& [key, value] : c.entries()) {
    if (key.rfind("delta.window.", 0) != 0) continue;
    const std::string jstr = key.substr(std::string("delta.window.").size());
    std::size_t j = 0;
    try {
      j = std::stoul(jstr);
    } catch (const std::exception&) {
      throw ConfigError(key, "expected delta.window.<j>");
    }
    if (j < 2) throw ConfigError(key, "j must be at least 2");
    cfg.delta_windows[j] = parse_window(c, key);
  }

  auto& e = cfg.epsilon_hat;
  e.eps_max = c.get_double("epsilon_hat.eps_max").value_or(e.eps_max);
  e.tol = c.get_double("epsilon_hat.tol").value_or(e.tol);
  e.grid_points = c.get_uint("epsilon_hat.grid_points").value_or(e.grid_points);
  e.clip_to_valid = c.get_bool("epsilon_hat.clip").value_or(false);
  cfg.mean_gamma_correct_only = c.get_bool("epsilon_hat.correct_only").value_or(true);
  if (!(e.tol > 0.0) || !(e.eps_max > e.tol) || e.grid_points < 2) {
    throw ConfigError("epsilon_hat", "need 0 < tol < eps_max and grid_points >= 2");
  }

  if (const auto l = c.get_doubles("entropy.lambdas")) cfg.lambdas = *l;
  cfg.small_delta_threshold = c.get_double("entropy.threshold").value_or(1.0);
  if (kind == ExperimentKind::EntropyCompare) {
    if (cfg.lambdas.size() < 2 || std::find(cfg.lambdas.begin(), cfg.lambdas.end(), 0.0) == cfg.lambdas.end()) {
      throw ConfigError("entropy.lambdas", "need at least two values including 0");
    }
    for (double l : cfg.lambdas) {
      if (!(l >= 0.0)) throw ConfigError("entropy.lambdas", "values must be >= 0");
    }
  }
  if (const auto te = c.get_doubles("transfer.epsilons")) cfg.transfer_epsilons = *te;
  for (double v : cfg.transfer_epsilons) {
    if (!(v >= 0.0)) throw ConfigError("transfer.epsilons", "values must be >= 0");
  }
  cfg.shuffled_examples = c.get_uint("shuffled.examples").value_or(1000);
  cfg.shuffled_max_epochs = c.get_uint("shuffled.max_epochs").value_or(500);

  const bool trains_twins = kind == ExperimentKind::Transfer || kind == ExperimentKind::EntropyCompare ||
                            kind == ExperimentKind::ShuffledLabels || kind == ExperimentKind::Train;
  if (trains_twins && m.path) throw ConfigError("model.path", "this experiment trains its own models");
  if (m.path && !fs::exists(*m.path)) throw ConfigError("model.path", "file not found: " + m.path->string());
  return cfg;
}

AttackSpec attack_for(const ExperimentConfig& cfg, AttackFamily family, double epsilon) {
  AttackSpec spec = cfg.attack;
  spec.family = family;
  spec.epsilon = epsilon;
  spec.pgd_step_size = std::max(cfg.pgd_step_ratio * epsilon, 1e-12);
  spec.seed = derive_seed(cfg.seed, "attack." + to_string(family));
  return spec;
}

std::vector<double> grid_for(const ExperimentConfig& cfg, AttackFamily family, std::size_t input_size) {
  std::vector<double> grid = cfg.eps_grid;
  if (family == AttackFamily::FgsmL2 && cfg.l2_scale_by_dim) {
    const double s = std::sqrt(static_cast<double>(input_size));
    for (double& e : grid) e *= s;
  }
  return grid;
}

FitWindow window_for(const ExperimentConfig& cfg, AttackFamily family, std::size_t input_size) {
  FitWindow w = cfg.fit_window;
  if (family == AttackFamily::FgsmL2 && cfg.l2_scale_by_dim) {
    const double s = std::sqrt(static_cast<double>(input_size));
    w.lo *= s;
    w.hi *= s;
  }
  return w;
}

std::vector<EntropyEntry> compare_entropy_reg(const Dataset& train_data, const Dataset& test_data,
                                              const Architecture& arch, std::uint64_t init_seed,
                                              const TrainConfig& train_cfg,
                                              std::span<const double> lambdas,
                                              const AttackSpec& attack,
                                              std::span<const double> eps_grid,
                                              double small_delta_threshold) {
  if (lambdas.size() < 2 || std::find(lambdas.begin(), lambdas.end(), 0.0) == lambdas.end()) {
    throw InvalidArgument("entropy comparison needs at least two lambdas including 0");
  }
  std::vector<EntropyEntry> out;
  for (double lambda : lambdas) {
    EntropyEntry e;
    e.lambda = lambda;
    TrainResult r = train(init_network(arch, init_seed), train_data, train_cfg, LossSpec{lambda});
    e.metrics = std::move(r.metrics);
    e.curve = adv_error_curve(r.net, test_data, attack, eps_grid);
    e.clean_accuracy = e.curve.clean_accuracy;
    const auto d12 = deltas_for(logit_diffs(r.net, test_data, 2), 2);
    e.median_delta_12 = median(d12);
    e.small_delta_mass =
        static_cast<double>(std::count_if(d12.begin(), d12.end(),
                                          [&](double d) { return d < small_delta_threshold; })) /
        static_cast<double>(d12.size());
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& cfg, Artifacts& out) : cfg_(cfg), out_(out) {}

  void run() {
    switch (cfg_.kind) {
      case ExperimentKind::Train: return run_train();
      case ExperimentKind::AttackCurve: return run_curves(false);
      case ExperimentKind::Fit: return run_curves(true);
      case ExperimentKind::EpsilonHat: return run_epsilon_hat();
      case ExperimentKind::DeltaDist: return run_delta_dist();
      case ExperimentKind::Oracle: return run_oracle();
      case ExperimentKind::Transfer: return run_transfer();
      case ExperimentKind::EntropyCompare: return run_entropy();
      case ExperimentKind::ShuffledLabels: return run_shuffled();
    }
  }

 private:
  const DataSplits& data() {
    if (!data_) data_ = load_data(cfg_.data, cfg_.seed);
    return *data_;
  }

  Dataset eval_set() {
    Dataset d = cfg_.eval_on_train ? data().train : data().test;
    return cfg_.eval_limit ? d.head(*cfg_.eval_limit) : d;
  }

  TrainConfig train_config(const std::string& stage) const {
    TrainConfig t = cfg_.train;
    t.seed = derive_seed(cfg_.seed, stage + ".train");
    if (t.adv_mix) t.adv_mix->attack.seed = derive_seed(cfg_.seed, stage + ".adv_mix");
    return t;
  }

  Network fresh_model(const std::string& stage, const Dataset& train_data, const TrainConfig& tc,
                      const std::string& suffix) {
    const Architecture arch = make_architecture(cfg_.model, train_data);
    TrainResult r = train(init_network(arch, derive_seed(cfg_.seed, stage + ".init")), train_data, tc, cfg_.loss);
    out_.write("training" + suffix + ".csv", training_csv(r.metrics));
    out_.write("model" + suffix + ".json", model_to_json(r.net));
    return std::move(r.net);
  }

  Network model(const std::string& stage = "model", const std::string& suffix = "") {
    if (cfg_.model.path) {
      Network net = load_model(*cfg_.model.path);
      if (net.input_size() != shape_size(data().test.input_shape)) {
        throw ShapeError("model input size does not match the dataset");
      }
      return net;
    }
    return fresh_model(stage, data().train, train_config(stage), suffix);
  }

  void run_train() {
    const Network net = model();
    Json s;
    s["train_accuracy"] = accuracy(net, data().train);
    s["test_accuracy"] = accuracy(net, data().test);
    s["parameters"] = net.parameter_count();
    out_.write("summary.json", dump(s));
  }

  void write_curves(const Network& net, const Dataset& eval, bool fit, Json& summary) {
    for (AttackFamily family : cfg_.attacks) {
      const auto grid = grid_for(cfg_, family, net.input_size());
      const AdvErrorCurve curve = adv_error_curve(net, eval, attack_for(cfg_, family, 1.0), grid);
      const std::string name = to_string(family);
      out_.write("curve_" + name + ".csv", render([&](std::ostream& o) { write_curve_csv(o, curve); }));
      summary["clean_accuracy"] = curve.clean_accuracy;
      summary["degenerate"][name] = curve.n_degenerate;
      if (fit) {
        const PowerLawFit f = fit_powerlaw(curve.epsilons, curve.adv_error, window_for(cfg_, family, net.input_size()));
        out_.write("fit_" + name + ".json", fit_json(f));
        summary["fits"][name] = fit_to_json(f);
      }
    }
  }

  void run_curves(bool fit) {
    const Network net = model();
    Json s;
    s["n_examples"] = eval_set().size();
    write_curves(net, eval_set(), fit, s);
    out_.write("summary.json", dump(s));
  }

  void run_epsilon_hat() {
    const Network net = model();
    const Dataset eval = eval_set();
    const MeanGamma mg = mean_gamma(net, eval, {cfg_.mean_gamma_correct_only});
    const auto table = epsilon_hat_table(net, eval, mg, cfg_.epsilon_hat);
    out_.write("epsilon_hat.csv", render([&](std::ostream& o) { write_epsilon_hat_csv(o, table); }));
    Json j;
    j["mean_gamma"] = mg.mean_gamma;
    j["gap"] = mg.gap();
    j["n_examples"] = mg.n_examples;
    j["n_degenerate"] = mg.n_degenerate;
    j["n_misclassified_skipped"] = mg.n_misclassified_skipped;
    out_.write("mean_gamma.json", dump(j));
  }

  FitWindow window_for_j(const TailDensity& td, std::size_t j) const {
    const auto it = cfg_.delta_windows.find(j);
    return it != cfg_.delta_windows.end() ? it->second : default_small_window(td);
  }

  Json tail_json(const TailDensity& td, std::size_t j) const {
    Json t;
    const FitWindow w = window_for_j(td, j);
    t["window"] = {w.lo, w.hi};
    t["n_zero"] = td.n_zero;
    try {
      const TailExponent te = tail_exponent(td, w);
      t["slope"] = te.slope;
      t["r_squared"] = te.r_squared;
      t["n_bins"] = te.n_bins;
    } catch (const InvalidArgument& e) {
      t["slope"] = nullptr;
      t["error"] = e.what();
    }
    return t;
  }

  void run_delta_dist() {
    const Network net = model();
    const Dataset eval = eval_set();
    if (cfg_.j_max > net.n_classes()) throw ConfigError("delta.j_max", "exceeds the number of classes");
    const auto records = logit_diffs(net, eval, cfg_.j_max);
    out_.write("deltas.csv", render([&](std::ostream& o) { write_deltas_csv(o, records); }));
    std::vector<DensitySeries> series;
    Json tails;
    for (std::size_t j = 2; j <= cfg_.j_max; ++j) {
      const auto samples = deltas_for(records, j);
      DensitySeries ds{j, tail_density(samples, {cfg_.density_bins, {}, {}})};
      Json t = tail_json(ds.density, j);
      t["median"] = median(samples);
      tails[std::to_string(j)] = t;
      series.push_back(std::move(ds));
    }
    out_.write("density.csv", render([&](std::ostream& o) { write_density_csv(o, series); }));
    out_.write("tail.json", dump(tails));
  }

  void run_oracle() {
    const OracleConfig& oc = cfg_.oracle;
    const auto samples = oracle_sample(oc);
    std::vector<DensitySeries> series;
    Json report;
    report["n_classes"] = oc.n_classes;
    report["base"] = to_string(oc.base);
    report["n_samples"] = oc.n_samples;
    for (std::size_t j = 2; j <= oc.j_max; ++j) {
      const auto& s = samples[j - 2];
      DensitySeries ds{j, tail_density(s, {cfg_.density_bins, {}, {}})};
      Json t = tail_json(ds.density, j);
      const double lo = ds.density.edges.front();
      const auto in_decade = std::count_if(s.begin(), s.end(), [&](double v) { return v >= lo && v < 10 * lo; });
      t["smallest_decade"] = {lo, 10 * lo};
      t["smallest_decade_density"] = static_cast<double>(in_decade) / (static_cast<double>(s.size()) * 9.0 * lo);
      t["analytic_C"] = oracle_density_at_zero(oc, j);
      t["monte_carlo_C"] = leading_coefficient(s, j, quantile(s, 0.01)).C;
      report["j"][std::to_string(j)] = t;
      series.push_back(std::move(ds));
    }
    out_.write("density.csv", render([&](std::ostream& o) { write_density_csv(o, series); }));
    out_.write("oracle.json", dump(report));
  }

  void run_transfer() {
    const Network source = model("model.a", "_a");
    const Network target = model("model.b", "_b");
    const Dataset eval = eval_set();
    const AttackFamily family = cfg_.attacks.front();
    std::string csv = "epsilon,white_box_acc,black_box_acc\n";
    for (double eps : cfg_.transfer_epsilons) {
      const AttackSpec spec = attack_for(cfg_, family, eps);
      csv += format_double(eps) + "," + format_double(transfer_eval(target, target, eval, spec)) + "," +
             format_double(transfer_eval(source, target, eval, spec)) + "\n";
    }
    out_.write("transfer.csv", csv);
  }

  void run_entropy() {
    const AttackFamily family = cfg_.attacks.front();
    const Dataset eval = eval_set();
    const auto entries = compare_entropy_reg(
        data().train, eval, make_architecture(cfg_.model, data().train), derive_seed(cfg_.seed, "model.init"),
        train_config("model"), cfg_.lambdas, attack_for(cfg_, family, 1.0),
        grid_for(cfg_, family, shape_size(eval.input_shape)), cfg_.small_delta_threshold);
    Json report;
    report["attack"] = to_string(family);
    report["small_delta_threshold"] = cfg_.small_delta_threshold;
    report["runs"] = Json::array();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const std::string suffix = "_lambda_" + std::to_string(i);
      out_.write("curve" + suffix + ".csv", render([&](std::ostream& o) { write_curve_csv(o, e.curve); }));
      out_.write("training" + suffix + ".csv", training_csv(e.metrics));
      Json r;
      r["lambda"] = e.lambda;
      r["clean_accuracy"] = e.clean_accuracy;
      r["median_delta_12"] = e.median_delta_12;
      r["small_delta_mass"] = e.small_delta_mass;
      r["curve"] = "curve" + suffix + ".csv";
      report["runs"].push_back(r);
    }
    out_.write("entropy_report.json", dump(report));
  }

  void run_shuffled() {
    const Dataset subset = data().train.head(cfg_.shuffled_examples);
    const Dataset shuffled = shuffle_labels(subset, derive_seed(cfg_.seed, "shuffle"));
    TrainConfig tc = train_config("model");
    if (!cfg_.source.has("train.epochs")) tc.epochs = cfg_.shuffled_max_epochs;
    if (!tc.stop_at_train_accuracy) tc.stop_at_train_accuracy = 1.0;
    const Network net = fresh_model("model", shuffled, tc, "");
    Json s;
    s["train_accuracy"] = accuracy(net, shuffled);
    s["n_examples"] = shuffled.size();
    write_curves(net, shuffled, true, s);
    out_.write("summary.json", dump(s));
  }

  const ExperimentConfig& cfg_;
  Artifacts& out_;
  std::optional<DataSplits> data_;
};

std::string manifest_json(const ExperimentConfig& cfg, const Artifacts& out, const std::string& status,
                          const std::string& error) {
  Json j;
  j["tool"] = "advscale";
  j["version"] = version();
  j["kind"] = to_string(cfg.kind);
  j["seed"] = cfg.seed;
  j["config_sha256"] = sha256_hex(cfg.source.canonical());
  j["status"] = status;
  j["partial"] = status != "ok";
  if (!error.empty()) j["error"] = error;
  std::vector<std::string> files = out.files();
  std::sort(files.begin(), files.end());
  j["files"] = Json::array();
  for (const auto& f : files) {
    const fs::path p = out.dir() / f;
    j["files"].push_back({{"path", f}, {"sha256", sha256_file(p)}, {"bytes", fs::file_size(p)}});
  }
  return dump(j);
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  OutputLock lock(cfg.out_dir / ".advscale.lock");
  Artifacts out(cfg.out_dir);
  try {
    out.write("config.json", cfg.source.to_json());
    Pipeline(cfg, out).run();
  } catch (const std::exception& e) {
    write_text_file(cfg.out_dir / "manifest.json", manifest_json(cfg, out, "failed", e.what()));
    throw;
  }
  write_text_file(cfg.out_dir / "manifest.json", manifest_json(cfg, out, "ok", ""));
  return {cfg.out_dir, out.files()};
}

}  // namespace advscale
