#include "amdim/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace amdim {

namespace {

using nlohmann::json;

// Every getter checks off the keys it consumed so unknown keys (typos) can be
// reported instead of silently ignored.
struct Section {
  const json& j;
  std::string where;
  mutable std::set<std::string> seen;

  Section(const json& j_, std::string where_) : j(j_), where(std::move(where_)) {
    AMDIM_CONFIG_CHECK(j.is_object(), "config: " << where << " must be a JSON object");
  }

  bool has(const std::string& key) const {
    seen.insert(key);
    return j.contains(key);
  }

  template <typename T>
  void read(const std::string& key, T& out) const {
    if (!has(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + where + "." + key + ": " + e.what());
    }
  }

  const json* sub(const std::string& key) const {
    return has(key) ? &j.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j.items()) {
      (void)value;
      AMDIM_CONFIG_CHECK(seen.count(key), "config: unknown key '" << where << "." << key << "'");
    }
  }
};

void parse_dataset(const json& j, DatasetConfig& out) {
  Section s(j, "dataset");
  s.read("path", out.path);
  s.read("format", out.format);
  s.read("limit", out.limit);
  s.finish();
}

void parse_encoder(const json& j, EncoderConfig& out) {
  Section s(j, "encoder");
  s.read("ndf", out.ndf);
  s.read("nrkhs", out.nrkhs);
  s.read("ndepth", out.ndepth);
  s.read("input_size", out.input_size);
  s.read("batch_norm", out.use_batch_norm);
  s.read("seed", out.seed);
  s.finish();
}

void parse_augment(const json& j, AugmentPolicy& out) {
  Section s(j, "augment");
  s.read("crop_lo", out.crop_lo);
  s.read("crop_hi", out.crop_hi);
  s.read("output_size", out.output_size);
  s.read("brightness", out.brightness);
  s.read("contrast", out.contrast);
  s.read("saturation", out.saturation);
  s.read("grayscale_prob", out.grayscale_prob);
  s.read("flip_prob", out.flip_prob);
  s.read("seed", out.seed);
  s.finish();
}

void parse_nce(const json& j, NCEConfig& out) {
  Section s(j, "nce");
  s.read("lambda", out.lambda);
  s.read("clip", out.clip);
  s.read("symmetrize", out.symmetrize);
  if (const json* pairs = s.sub("pairs")) {
    AMDIM_CONFIG_CHECK(pairs->is_array(), "config: nce.pairs must be an array");
    out.pairs.clear();
    for (size_t i = 0; i < pairs->size(); ++i) {
      Section p((*pairs)[i], "nce.pairs[" + std::to_string(i) + "]");
      ScalePair sp;
      p.read("n", sp.n);
      p.read("m", sp.m);
      p.read("weight", sp.weight);
      p.finish();
      out.pairs.push_back(sp);
    }
  }
  s.read("sample_antecedents", out.sample_antecedents);
  s.read("sample_count", out.sample_count);
  s.read("sample_seed", out.sample_seed);
  s.finish();
}

void parse_mixture(const json& j, RunConfig& out) {
  Section s(j, "mixture");
  s.read("enabled", out.mixture_enabled);
  s.read("k", out.mixture.k);
  s.read("tau", out.mixture.tau);
  s.read("seed", out.mixture.seed);
  s.finish();
}

void parse_optimizer(const json& j, OptimizerConfig& out) {
  Section s(j, "optimizer");
  s.read("lr", out.lr);
  s.read("beta1", out.beta1);
  s.read("beta2", out.beta2);
  s.read("eps", out.eps);
  s.read("warmup_frac", out.warmup_frac);
  s.finish();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  Section s(j, "run");
  if (const json* d = s.sub("dataset")) parse_dataset(*d, cfg.dataset);
  if (const json* e = s.sub("encoder")) parse_encoder(*e, cfg.encoder);
  if (const json* a = s.sub("augment")) parse_augment(*a, cfg.augment);
  if (const json* n = s.sub("nce")) parse_nce(*n, cfg.nce);
  if (const json* m = s.sub("mixture")) parse_mixture(*m, cfg);
  if (const json* o = s.sub("optimizer")) parse_optimizer(*o, cfg.optimizer);
  s.read("batch_size", cfg.batch_size);
  s.read("epochs", cfg.epochs);
  s.read("seed", cfg.seed);
  s.read("out_dir", cfg.out_dir);
  s.read("checkpoint_every", cfg.checkpoint_every);
  s.read("precision", cfg.precision);
  s.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string run_config_json(const RunConfig& cfg) {
  json pairs = json::array();
  for (const auto& p : cfg.nce.pairs)
    pairs.push_back({{"n", p.n}, {"m", p.m}, {"weight", p.weight}});
  json j = {
      {"dataset",
       {{"path", cfg.dataset.path}, {"format", cfg.dataset.format}, {"limit", cfg.dataset.limit}}},
      {"encoder",
       {{"ndf", cfg.encoder.ndf},
        {"nrkhs", cfg.encoder.nrkhs},
        {"ndepth", cfg.encoder.ndepth},
        {"input_size", cfg.encoder.input_size},
        {"batch_norm", cfg.encoder.use_batch_norm},
        {"seed", cfg.encoder.seed}}},
      {"augment",
       {{"crop_lo", cfg.augment.crop_lo},
        {"crop_hi", cfg.augment.crop_hi},
        {"output_size", cfg.augment.output_size},
        {"brightness", cfg.augment.brightness},
        {"contrast", cfg.augment.contrast},
        {"saturation", cfg.augment.saturation},
        {"grayscale_prob", cfg.augment.grayscale_prob},
        {"flip_prob", cfg.augment.flip_prob},
        {"seed", cfg.augment.seed}}},
      {"nce",
       {{"lambda", cfg.nce.lambda},
        {"clip", cfg.nce.clip},
        {"symmetrize", cfg.nce.symmetrize},
        {"pairs", pairs},
        {"sample_antecedents", cfg.nce.sample_antecedents},
        {"sample_count", cfg.nce.sample_count},
        {"sample_seed", cfg.nce.sample_seed}}},
      {"mixture",
       {{"enabled", cfg.mixture_enabled},
        {"k", cfg.mixture.k},
        {"tau", cfg.mixture.tau},
        {"seed", cfg.mixture.seed}}},
      {"optimizer",
       {{"lr", cfg.optimizer.lr},
        {"beta1", cfg.optimizer.beta1},
        {"beta2", cfg.optimizer.beta2},
        {"eps", cfg.optimizer.eps},
        {"warmup_frac", cfg.optimizer.warmup_frac}}},
      {"batch_size", cfg.batch_size},
      {"epochs", cfg.epochs},
      {"seed", cfg.seed},
      {"out_dir", cfg.out_dir},
      {"checkpoint_every", cfg.checkpoint_every},
      {"precision", cfg.precision},
  };
  return j.dump(2);
}

}  // namespace amdim
