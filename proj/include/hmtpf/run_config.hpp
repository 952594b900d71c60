#pragma once

// Run configuration file: UTF-8 `section.key = value` lines, `#` comments.
// Every model, training, fine-tuning and stencil setting has a key; unknown or
// repeated keys are errors.

#include <string>
#include <vector>

#include "hmtpf/finetune.hpp"
#include "hmtpf/model_config.hpp"
#include "hmtpf/physics.hpp"
#include "hmtpf/train.hpp"

namespace hmtpf {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FinetuneConfig finetune;
  FdConfig fd;

  bool operator==(const RunConfig& o) const {
    return model == o.model && train == o.train && finetune == o.finetune && fd.dx == o.fd.dx;
  }
};

/// Unspecified keys keep their defaults.
RunConfig parse_run_config(const std::string& text);
std::string render_run_config(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

/// One line per key with its default and meaning.
std::string run_config_help();

}  // namespace hmtpf
