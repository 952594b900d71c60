#include "hmtpf/run_config.hpp"

#include <functional>
#include <set>

#include "hmtpf/errors.hpp"
#include "hmtpf/util.hpp"

namespace hmtpf {

namespace {

struct KeySpec {
  const char* key;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};


template <typename Field>
KeySpec uint_key(const char* key, const char* help, Field field) {
  return {key, help, [field](RunConfig c) { return std::to_string(*field(c)); },
          [field, key](RunConfig& c, const std::string& v) {
            *field(c) = static_cast<std::remove_reference_t<decltype(*field(c))>>(parse_uint(v, key));
          }};
}

template <typename Field>
KeySpec real_key(const char* key, const char* help, Field field) {
  return {key, help, [field](RunConfig c) { return format_double(*field(c)); },
          [field, key](RunConfig& c, const std::string& v) { *field(c) = parse_double(v, key); }};
}

std::string render_list(const std::vector<double>& v) {
  std::vector<std::string> parts;
  for (double x : v) parts.push_back(format_double(x));
  return join(parts, ",");
}

std::vector<double> parse_list(const std::string& v, const char* key) {
  std::vector<double> out;
  for (const auto& part : split(v, ',')) out.push_back(parse_double(part, key));
  return out;
}

const std::vector<KeySpec>& keys() {
  static const std::vector<KeySpec> table = {
      uint_key("model.d", "spatial dimension", [](RunConfig& c) { return &c.model.d; }),
      uint_key("model.n_phi", "field channels", [](RunConfig& c) { return &c.model.n_phi; }),
      uint_key("model.n_c", "per-input embedding width", [](RunConfig& c) { return &c.model.n_c; }),
      uint_key("model.n_g", "latent width", [](RunConfig& c) { return &c.model.n_g; }),
      uint_key("model.heads", "attention heads (must divide n_g)", [](RunConfig& c) { return &c.model.heads; }),
      uint_key("model.attn_layers", "encoder self-attention layers", [](RunConfig& c) { return &c.model.attn_layers; }),
      uint_key("model.k", "KNN neighbours", [](RunConfig& c) { return &c.model.k; }),
      uint_key("model.mamba_layers", "selective-SSM layers", [](RunConfig& c) { return &c.model.mamba_layers; }),
      uint_key("model.n_s", "SSM state width", [](RunConfig& c) { return &c.model.n_s; }),
      uint_key("model.init_seed", "parameter initialization seed", [](RunConfig& c) { return &c.model.init_seed; }),
      real_key("train.lr", "AdamW learning rate", [](RunConfig& c) { return &c.train.optim.lr; }),
      real_key("train.beta1", "AdamW first-moment decay", [](RunConfig& c) { return &c.train.optim.beta1; }),
      real_key("train.beta2", "AdamW second-moment decay", [](RunConfig& c) { return &c.train.optim.beta2; }),
      real_key("train.weight_decay", "AdamW decoupled weight decay", [](RunConfig& c) { return &c.train.optim.weight_decay; }),
      real_key("train.adam_eps", "AdamW denominator epsilon", [](RunConfig& c) { return &c.train.optim.eps; }),
      uint_key("train.epochs", "passes over the training samples", [](RunConfig& c) { return &c.train.epochs; }),
      uint_key("train.batch_size", "samples per optimizer step", [](RunConfig& c) { return &c.train.batch_size; }),
      uint_key("train.seed", "sample order and query sampling seed", [](RunConfig& c) { return &c.train.seed; }),
      real_key("train.sampling_rate", "fraction of query points in the loss, (0, 1]", [](RunConfig& c) { return &c.train.sampling_rate; }),
      uint_key("train.max_steps", "stop after this many steps (0 = epochs only)", [](RunConfig& c) { return &c.train.max_steps; }),
      real_key("finetune.lambda_phi", "weight of the self-supervision term", [](RunConfig& c) { return &c.finetune.lambda_phi; }),
      real_key("finetune.lambda_r", "weight of the residual term", [](RunConfig& c) { return &c.finetune.lambda_r; }),
      uint_key("finetune.steps", "fine-tune optimizer steps", [](RunConfig& c) { return &c.finetune.steps; }),
      real_key("finetune.lr", "fine-tune learning rate", [](RunConfig& c) { return &c.finetune.optim.lr; }),
      real_key("finetune.beta1", "fine-tune first-moment decay", [](RunConfig& c) { return &c.finetune.optim.beta1; }),
      real_key("finetune.beta2", "fine-tune second-moment decay", [](RunConfig& c) { return &c.finetune.optim.beta2; }),
      real_key("finetune.weight_decay", "fine-tune weight decay", [](RunConfig& c) { return &c.finetune.optim.weight_decay; }),
      real_key("finetune.adam_eps", "fine-tune denominator epsilon", [](RunConfig& c) { return &c.finetune.optim.eps; }),
      {"finetune.xi", "self-supervised proportion per channel, one value or one per channel",
       [](const RunConfig& c) { return render_list(c.finetune.xi); },
       [](RunConfig& c, const std::string& v) { c.finetune.xi = parse_list(v, "finetune.xi"); }},
      uint_key("finetune.seed", "mask sampling and fine-tune init seed", [](RunConfig& c) { return &c.finetune.seed; }),
      {"fd.dx", "finite-difference step per axis, or 'auto' for 0.01 x bounding-box diagonal",
       [](const RunConfig& c) { return c.fd.dx.empty() ? std::string("auto") : render_list(c.fd.dx); },
       [](RunConfig& c, const std::string& v) {
         c.fd.dx = v == "auto" ? std::vector<double>{} : parse_list(v, "fd.dx");
       }},
  };
  return table;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  cfg.finetune.fd = cfg.fd;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const KeySpec* spec = nullptr;
    for (const auto& k : keys())
      if (key == k.key) spec = &k;
    if (!spec) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key + "' given twice");
    }
    spec->set(cfg, value);
  }
  cfg.finetune.fd = cfg.fd;
  cfg.train.validate();
  cfg.finetune.validate();
  return cfg;
}

std::string render_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += std::string(k.key) + " = " + k.get(cfg) + "\n";
  return out;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

std::string run_config_help() {
  const RunConfig defaults;
  std::string out = "Config keys (file lines 'key = value', '#' starts a comment):\n";
  for (const auto& k : keys()) {
    std::string entry = "  " + std::string(k.key) + " = " + k.get(defaults);
    if (entry.size() < 40) entry.resize(40, ' ');
    out += entry + "  " + k.help + "\n";
  }
  return out;
}

}  // namespace hmtpf
