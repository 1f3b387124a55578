#pragma once

#include <string>

#include "amdim/augment.hpp"
#include "amdim/encoder.hpp"
#include "amdim/mixture.hpp"
#include "amdim/nce.hpp"

namespace amdim {

struct OptimizerConfig {
  double lr = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_frac = 0.02;  // linear warmup over this fraction of steps

  void validate() const {
    AMDIM_CONFIG_CHECK(lr > 0.0, "optimizer: lr must be > 0");
    AMDIM_CONFIG_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                       "optimizer: betas must be in [0,1)");
    AMDIM_CONFIG_CHECK(eps > 0.0, "optimizer: eps must be > 0");
    AMDIM_CONFIG_CHECK(warmup_frac >= 0.0 && warmup_frac <= 1.0,
                       "optimizer: warmup fraction must be in [0,1]");
  }
};

struct DatasetConfig {
  std::string path;
  std::string format = "synthetic";
  std::int64_t limit = 0;  // 0 = everything

  void validate() const {
    AMDIM_CONFIG_CHECK(!path.empty(), "dataset: path must be set");
    AMDIM_CONFIG_CHECK(format == "cifar10-binary" || format == "image-directory" ||
                           format == "synthetic",
                       "dataset: unknown format '" << format << "'");
    AMDIM_CONFIG_CHECK(limit >= 0, "dataset: limit must be >= 0");
  }
};

struct RunConfig {
  DatasetConfig dataset;
  EncoderConfig encoder;
  AugmentPolicy augment;
  NCEConfig nce;
  bool mixture_enabled = false;
  MixtureConfig mixture;
  OptimizerConfig optimizer;
  std::int64_t batch_size = 128;  // n_a
  std::int64_t epochs = 20;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";
  std::int64_t checkpoint_every = 0;  // steps; 0 = end of every epoch
  std::string precision = "f32";      // "f32" or "f64" (determinism contract)

  void validate() const {
    dataset.validate();
    encoder.validate();
    augment.validate();
    nce.validate();
    if (mixture_enabled) mixture.validate();
    optimizer.validate();
    AMDIM_CONFIG_CHECK(batch_size >= 2, "run: batch size n_a must be >= 2 (NCE needs negatives)");
    AMDIM_CONFIG_CHECK(epochs >= 1, "run: epochs must be >= 1");
    AMDIM_CONFIG_CHECK(!out_dir.empty(), "run: output directory must be set");
    AMDIM_CONFIG_CHECK(checkpoint_every >= 0, "run: checkpoint cadence must be >= 0");
    AMDIM_CONFIG_CHECK(precision == "f32" || precision == "f64",
                       "run: precision must be 'f32' or 'f64'");
    AMDIM_CONFIG_CHECK(augment.output_size == encoder.input_size,
                       "run: augment output size " << augment.output_size
                                                   << " must match encoder input size "
                                                   << encoder.input_size);
  }
};

// JSON round trip; parse applies defaults for missing keys and rejects
// unknown ones
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_json(const RunConfig& cfg);

}  // namespace amdim
