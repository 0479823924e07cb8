#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advscale/attacks.hpp"
#include "advscale/config.hpp"
#include "advscale/data.hpp"
#include "advscale/logit_stats.hpp"
#include "advscale/network.hpp"
#include "advscale/response.hpp"
#include "advscale/train.hpp"

namespace advscale {

std::string version();

enum class ExperimentKind {
  Train,
  AttackCurve,
  Fit,
  EpsilonHat,
  DeltaDist,
  Oracle,
  Transfer,
  EntropyCompare,
  ShuffledLabels,
};

std::string to_string(ExperimentKind kind);
// Throws ConfigError on an unknown name.
ExperimentKind parse_experiment_kind(const std::string& name);

// Child seed for a named pipeline stage. Stages never share streams, and
// adding a stage leaves the others untouched.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);

std::string model_to_json(const Network& net);
Network model_from_json(std::string_view text);
void save_model(const Network& net, const std::filesystem::path& path);
Network load_model(const std::filesystem::path& path);

// $ADVSCALE_DATA_DIR, else ./data/mnist.
std::filesystem::path default_data_dir();

struct DataSourceConfig {
  enum class Kind { Mnist, Idx, Synth };
  Kind kind = Kind::Mnist;
  std::filesystem::path dir;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  SynthConfig synth;
  std::size_t synth_test_per_class = 10;
  std::optional<std::size_t> train_limit;
  std::optional<std::size_t> test_limit;
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

DataSplits load_data(const DataSourceConfig& cfg, std::uint64_t seed);

struct ModelConfig {
  std::optional<std::filesystem::path> path;  // load instead of training
  std::string arch = "mlp";                   // mlp | linear | convnet
  std::vector<std::size_t> hidden{256, 256};
  double dropout = 0.0;
  std::size_t channels = 8;
  std::size_t conv_hidden = 64;
};

Architecture make_architecture(const ModelConfig& cfg, const Dataset& data);

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Train;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  Config source;

  DataSourceConfig data;
  ModelConfig model;
  TrainConfig train;
  LossSpec loss;

  bool eval_on_train = false;
  std::optional<std::size_t> eval_limit;

  std::vector<AttackFamily> attacks{AttackFamily::FgsmLinf};
  AttackSpec attack;            // template; epsilon comes from the grid
  double pgd_step_ratio = 0.25;  // step size / epsilon
  bool l2_scale_by_dim = true;   // fgsm_l2 grid and window multiplied by sqrt(input size)
  std::vector<double> eps_grid;
  FitWindow fit_window{0.1, 8.0};

  OracleConfig oracle;
  std::size_t density_bins = 40;
  std::size_t j_max = 4;
  std::map<std::size_t, FitWindow> delta_windows;  // per j; default_small_window otherwise

  EpsilonHatOptions epsilon_hat;
  bool mean_gamma_correct_only = true;

  std::vector<double> lambdas{0.0, 4.5};
  double small_delta_threshold = 1.0;
  std::vector<double> transfer_epsilons{1.0, 2.0, 4.0, 8.0, 16.0};
  std::size_t shuffled_examples = 1000;
  std::size_t shuffled_max_epochs = 500;
};

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
};

// Validates every field; throws ConfigError naming the first bad key.
ExperimentConfig make_experiment_config(ExperimentKind kind, const Config& source,
                                        const RunOverrides& overrides = {});

// Attack template for one family at epsilon, with the pgd step ratio applied.
AttackSpec attack_for(const ExperimentConfig& cfg, AttackFamily family, double epsilon);
// The epsilon grid and fit window in the family's own units.
std::vector<double> grid_for(const ExperimentConfig& cfg, AttackFamily family, std::size_t input_size);
FitWindow window_for(const ExperimentConfig& cfg, AttackFamily family, std::size_t input_size);

struct EntropyEntry {
  double lambda = 0.0;
  double clean_accuracy = 0.0;
  AdvErrorCurve curve;
  double median_delta_12 = 0.0;
  double small_delta_mass = 0.0;  // fraction of test Delta_12 below the threshold
  std::vector<EpochMetrics> metrics;
};

// One model per lambda with identical seeds and architecture. Throws
// InvalidArgument unless lambdas has >= 2 values including 0; a diverging
// run aborts the comparison with TrainingDiverged.
std::vector<EntropyEntry> compare_entropy_reg(const Dataset& train_data, const Dataset& test_data,
                                              const Architecture& arch, std::uint64_t init_seed,
                                              const TrainConfig& train_cfg,
                                              std::span<const double> lambdas,
                                              const AttackSpec& attack,
                                              std::span<const double> eps_grid,
                                              double small_delta_threshold);

struct RunReport {
  std::filesystem::path out_dir;
  std::vector<std::string> files;  // relative to out_dir, manifest excluded
};

// Runs the pipeline and writes artifacts plus manifest.json. On failure the
// manifest is still written with status "failed" and the exception rethrown.
// Throws Error if another run holds the output directory.
RunReport run_experiment(const ExperimentConfig& cfg);

}  // namespace advscale
