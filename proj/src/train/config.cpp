#include "sdclip/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace sdclip {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  vit.validate();
  text.validate();
  if (vit.proj_dim != text.proj_dim) {
    throw ConfigError("text.proj_dim (" + std::to_string(text.proj_dim) +
                      ") must equal vit.proj_dim (" + std::to_string(vit.proj_dim) + ")");
  }
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (contrastive negatives)");
  if (corpus.train_size < batch_size) {
    throw ConfigError("corpus.train_size must hold at least one batch");
  }
  if (!(corpus.misalignment >= 0.0 && corpus.misalignment <= 1.0)) {
    throw ConfigError("corpus.misalignment must lie in [0, 1]");
  }
  for (double v : {lambda, ramp_start, ramp_end}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("lambda values must lie in [0, 1]");
  }
  if (!(tau_min > 0.0 && tau_min <= tau_init && tau_init <= tau_max)) {
    throw ConfigError("need 0 < tau_min <= tau_init <= tau_max");
  }
  if (!(ema.momentum >= 0.0 && ema.momentum <= 1.0)) {
    throw ConfigError("ema.momentum must lie in [0, 1]");
  }
  if (!(ema.center_momentum >= 0.0 && ema.center_momentum <= 1.0)) {
    throw ConfigError("ema.center_momentum must lie in [0, 1]");
  }
  if (!teacher_enabled && variant != DistillVariant::kHardOnly) {
    throw ConfigError("teacher_enabled=false is only meaningful for variant hard_only");
  }
  if (teacher_enabled && variant_needs_text_teacher(variant) && !ema.text_ema) {
    throw ConfigError("variant " + std::string(variant_tag(variant)) +
                      " needs the text momentum encoder; set ema.text_ema=true");
  }
  if (!(optim.lr > 0.0) || optim.weight_decay < 0.0) {
    throw ConfigError("optim.lr must be positive and optim.weight_decay non-negative");
  }
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["version"] = kConfigVersion;
  j["seed"] = c.seed;
  j["variant"] = std::string(variant_tag(c.variant));
  j["teacher_enabled"] = c.teacher_enabled;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["checkpoint_every"] = c.checkpoint_every;
  j["vit"] = {{"image_size", c.vit.image_size}, {"patch_size", c.vit.patch_size},
              {"channels", c.vit.channels},     {"depth", c.vit.depth},
              {"width", c.vit.width},           {"heads", c.vit.heads},
              {"proj_dim", c.vit.proj_dim},     {"keep_rate", c.vit.keep_rate},
              {"sparsify_layers", c.vit.sparsify_layers}};
  j["text"] = {{"vocab_size", c.text.vocab_size}, {"max_len", c.text.max_len},
               {"depth", c.text.depth},           {"width", c.text.width},
               {"heads", c.text.heads},           {"proj_dim", c.text.proj_dim}};
  j["loss"] = {{"lambda", c.lambda},     {"ramp_start", c.ramp_start}, {"ramp_end", c.ramp_end},
               {"tau_init", c.tau_init}, {"tau_min", c.tau_min},       {"tau_max", c.tau_max}};
  j["ema"] = {{"momentum", c.ema.momentum},
              {"centering", c.ema.centering},
              {"center_momentum", c.ema.center_momentum},
              {"text_ema", c.ema.text_ema}};
  j["optim"] = {{"lr", c.optim.lr},
                {"weight_decay", c.optim.weight_decay},
                {"warmup_steps", c.optim.warmup_steps},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps}};
  j["corpus"] = {{"train_size", c.corpus.train_size},
                 {"eval_size", c.corpus.eval_size},
                 {"misalignment", c.corpus.misalignment}};
  return j;
}

namespace {

// Reads fields from one JSON object and rejects whatever was not read.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "must be an object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0)) {
          throw ConfigError(where(key) + "must be a non-negative integer");
        }
      } else if constexpr (std::is_same_v<V, double>) {
        if (!it->is_number()) throw ConfigError(where(key) + "must be a number");
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!it->is_boolean()) throw ConfigError(where(key) + "must be a boolean");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!it->is_string()) throw ConfigError(where(key) + "must be a string");
      }
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + path_ + key + "'");
    }
  }

  std::string where(const std::string& key) const { return "config field '" + path_ + key + "': "; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  StrictObject root(j, "");
  int version = -1;
  root.read("version", version);
  if (version != kConfigVersion) {
    throw ConfigError("config field 'version': expected " + std::to_string(kConfigVersion) +
                      ", got " + (root.has("version") ? std::to_string(version) : "nothing"));
  }
  root.read("seed", c.seed);
  std::string variant(variant_tag(c.variant));
  root.read("variant", variant);
  c.variant = parse_variant(variant);
  root.read("teacher_enabled", c.teacher_enabled);
  root.read("epochs", c.epochs);
  root.read("batch_size", c.batch_size);
  root.read("checkpoint_every", c.checkpoint_every);

  if (const json* v = root.child("vit")) {
    StrictObject o(*v, "vit.");
    o.read("image_size", c.vit.image_size);
    o.read("patch_size", c.vit.patch_size);
    o.read("channels", c.vit.channels);
    o.read("depth", c.vit.depth);
    o.read("width", c.vit.width);
    o.read("heads", c.vit.heads);
    o.read("proj_dim", c.vit.proj_dim);
    o.read("keep_rate", c.vit.keep_rate);
    if (o.has("sparsify_layers")) {
      o.read("sparsify_layers", c.vit.sparsify_layers);
    } else {
      o.read("sparsify_layers", c.vit.sparsify_layers);
      c.vit.sparsify_layers = default_sparsify_layers(c.vit.depth);
    }
    o.finish();
  }
  bool text_proj_given = false;
  if (const json* t = root.child("text")) {
    StrictObject o(*t, "text.");
    o.read("vocab_size", c.text.vocab_size);
    o.read("max_len", c.text.max_len);
    o.read("depth", c.text.depth);
    o.read("width", c.text.width);
    o.read("heads", c.text.heads);
    text_proj_given = o.has("proj_dim");
    o.read("proj_dim", c.text.proj_dim);
    o.finish();
  }
  if (!text_proj_given) c.text.proj_dim = c.vit.proj_dim;
  if (const json* l = root.child("loss")) {
    StrictObject o(*l, "loss.");
    o.read("lambda", c.lambda);
    o.read("ramp_start", c.ramp_start);
    o.read("ramp_end", c.ramp_end);
    o.read("tau_init", c.tau_init);
    o.read("tau_min", c.tau_min);
    o.read("tau_max", c.tau_max);
    o.finish();
  }
  if (const json* e = root.child("ema")) {
    StrictObject o(*e, "ema.");
    o.read("momentum", c.ema.momentum);
    o.read("centering", c.ema.centering);
    o.read("center_momentum", c.ema.center_momentum);
    o.read("text_ema", c.ema.text_ema);
    o.finish();
  }
  if (const json* p = root.child("optim")) {
    StrictObject o(*p, "optim.");
    o.read("lr", c.optim.lr);
    o.read("weight_decay", c.optim.weight_decay);
    o.read("warmup_steps", c.optim.warmup_steps);
    o.read("beta1", c.optim.beta1);
    o.read("beta2", c.optim.beta2);
    o.read("eps", c.optim.eps);
    o.finish();
  }
  if (const json* p = root.child("corpus")) {
    StrictObject o(*p, "corpus.");
    o.read("train_size", c.corpus.train_size);
    o.read("eval_size", c.corpus.eval_size);
    o.read("misalignment", c.corpus.misalignment);
    o.finish();
  }
  // Informational block written next to run outputs; not part of the config.
  root.child("run");
  root.finish();
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

}  // namespace sdclip
