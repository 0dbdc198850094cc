#pragma once

#include <map>
#include <string>

#include "ykd/train.hpp"

namespace ykd {

// Flat key=value config file ('#' comments, blank lines ignored).
std::map<std::string, std::string> read_config_file(const std::string& path);

// Applies documented keys (mode, epochs, batch_size, lr, momentum,
// lr_decay_epochs, lr_decay_factor, seed, lambda1..3, tau_reg, tau_obj,
// deterministic, threads, hflip, kd_teacher_grad, arch.*) onto cfg.
// Unknown keys are rejected.
void apply_config(const std::map<std::string, std::string>& kv, TrainConfig& cfg);

void write_config_file(const std::string& path, const TrainConfig& cfg);

}  // namespace ykd
