#pragma once

#include <limits>
#include <functional>
#include <optional>
#include <string>

#include "ykd/losses.hpp"
#include "ykd/model.hpp"
#include "ykd/scenario.hpp"

namespace ykd {

enum class TrainMode { kFinetune, kKdFrozen, kYkd };

TrainMode parse_train_mode(const std::string& s);
std::string train_mode_name(TrainMode m);

struct TrainConfig {
  TrainMode mode = TrainMode::kYkd;
  int epochs = 10;
  int batch_size = 8;
  double lr = 0.02;
  double momentum = 0.9;
  int lr_decay_epochs = 0;  // 0 disables the step decay
  double lr_decay_factor = 0.1;
  uint64_t seed = 1;
  KDWeights kd;
  double tau_reg = 0.5;
  double tau_obj = 0.7;
  bool deterministic = true;  // pins the worker count below
  int threads = 1;
  bool hflip = false;
  // Lets KD gradients flow through the frozen teacher head into the
  // shared FE instead of detaching teacher outputs.
  bool kd_teacher_grad = false;
  ArchConfig arch;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double loss_sup = 0;
  double loss_kd_box = 0;
  double loss_kd_rpn = 0;
  double loss_kd_mask = 0;
  double map_all = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  double first_epoch_loss = 0;
  double last_epoch_loss = 0;
  // Collections bound during the step: independent of the step index.
  int live_param_collections = 0;
  std::string teacher_sha_before;
  std::string teacher_sha_after;
  std::string backbone_sha_before;
  std::string backbone_sha_after;
  // Max |difference| between the feature tensors consumed by teacher and
  // student heads on a probe image after training (0 in ykd mode).
  double teacher_student_feature_gap = std::numeric_limits<double>::quiet_NaN();
};

// Optional per-epoch evaluation hook (fills the map_all CSV column).
using EvalHook = std::function<double(const ModelState&)>;

// Step-0 training: the whole network learns the base classes, then the
// backbone freezes for all later steps.
ModelState train_base(const Dataset& dataset, const TrainConfig& cfg,
                      const std::vector<int>& base_classes = {},
                      TrainReport* report = nullptr, const EvalHook& eval = nullptr);

// One incremental step in the configured mode (ykd / kd_frozen /
// finetune). dataset_t must be pre-filtered to new_classes.
ModelState increment_step(const ModelState& state, const Dataset& dataset_t,
                          const std::vector<int>& new_classes, const TrainConfig& cfg,
                          TrainReport* report = nullptr, const EvalHook& eval = nullptr);

// Non-continual upper bound: one FE, one head over every class present.
ModelState joint_train(const Dataset& dataset, const TrainConfig& cfg,
                       const std::vector<int>& classes = {},
                       TrainReport* report = nullptr, const EvalHook& eval = nullptr);

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows);

}  // namespace ykd
