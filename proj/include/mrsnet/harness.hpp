#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrsnet/data_model.hpp"
#include "mrsnet/metrics.hpp"
#include "mrsnet/network.hpp"

namespace mrsnet {

struct TrainConfig {
  NetworkConfig model;  // architecture, ablation flags, threshold
  double lr = 6e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  int epochs = 10;
  std::int64_t max_steps = 0;  // 0: epochs x batches per epoch
  std::uint64_t seed = 0;
  std::int64_t image_size = 256;
  std::vector<std::string> train_languages{"en"};
  bool dice = false;
  int eval_every = 1;  // epochs between validation passes; the last epoch is always evaluated
  SplitRatios split_ratios{0.7, 0.1, 0.2};
  std::string output_dir = "runs/mrsnet";
  bool log_to_stderr = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

// base_lr * (1 + cos(pi * step / total)) / 2; 0 for step >= total.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total);

/// Decoupled weight decay Adam. Parameters without a gradient in a step are
/// left untouched, including their decay.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, double beta1, double beta2, double eps,
        double weight_decay);
  void step(double lr);

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
    std::int64_t t = 0;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_;
};

struct Batch {
  Tensor images;  // (B, 3, S, S)
  Tensor masks;   // (B, 1, S, S)
  std::vector<std::string> texts;
};

// Samples must already share one spatial size.
Batch make_batch(const std::vector<ReferringSample>& samples);

// One optimizer step; returns the loss. A non-finite loss throws NumericError
// naming the first non-finite parameter or intermediate.
double train_step(MrsNet& model, AdamW& optimizer, const Batch& batch, double lr, bool dice, std::int64_t step);

// MRSNET_NUM_THREADS if set (>= 1), otherwise the hardware concurrency.
int thread_cap();

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log_path;
  std::vector<double> losses;  // one per optimizer step
  std::int64_t steps = 0;
  double best_val_miou = -1.0;
  std::string selection_split;  // split used for checkpoint selection
};

// Uses the dataset's splits, or a stratified split from config ratios/seed when it has none.
TrainResult train(const TrainConfig& config, const DatasetIndex& dataset);

// Forward every listed sample at config image size, score against the stored mask at full resolution.
std::vector<EvalRecord> evaluate_records(MrsNet& model, const DatasetIndex& dataset,
                                         const std::vector<std::string>& ids, std::int64_t image_size,
                                         double threshold);
MetricReport evaluate(MrsNet& model, const DatasetIndex& dataset, const std::string& split,
                      std::int64_t image_size, double threshold);

struct LoadedModel {
  std::unique_ptr<MrsNet> model;
  nlohmann::json header;
  TrainConfig config;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);
MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const DatasetIndex& dataset,
                                 const std::string& split);
// Dataset recorded in the checkpoint header, with the splits used for training.
DatasetIndex dataset_from_checkpoint(const nlohmann::json& header);

// (PSR on, CSR off), (PSR off, CSR on), (both on); each trained then scored on test.
std::vector<AblationRow> ablate(const TrainConfig& base, const DatasetIndex& dataset);

}  // namespace mrsnet
