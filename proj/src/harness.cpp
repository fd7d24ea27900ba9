#include "mrsnet/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numbers>
#include <random>
#include <thread>
#include <unordered_map>

#include "mrsnet/checkpoint.hpp"
#include "mrsnet/errors.hpp"

namespace mrsnet {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (image_size <= 0 || image_size % (32 * model.pyramid_factors.back()))
    throw ConfigError("image_size must be a positive multiple of " + std::to_string(32 * model.pyramid_factors.back()));
  if (train_languages.empty()) throw ConfigError("train_languages must not be empty");
  for (const auto& l : train_languages) parse_language(l);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"model", c.model},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"max_steps", c.max_steps},
           {"seed", c.seed},
           {"image_size", c.image_size},
           {"train_languages", c.train_languages},
           {"dice", c.dice},
           {"eval_every", c.eval_every},
           {"split_ratios", c.split_ratios},
           {"output_dir", c.output_dir},
           {"log_to_stderr", c.log_to_stderr}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::vector<std::string> known{
      "model", "lr",         "weight_decay", "beta1",    "beta2",           "adam_eps",
      "batch_size", "epochs", "max_steps",   "seed",     "image_size",      "train_languages",
      "dice",  "eval_every", "split_ratios", "output_dir", "log_to_stderr"};
  for (const auto& [k, _] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown train config key \"" + k + "\"");
  c.model = j.value("model", d.model);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.seed = j.value("seed", d.seed);
  c.image_size = j.value("image_size", d.image_size);
  c.train_languages = j.value("train_languages", d.train_languages);
  c.dice = j.value("dice", d.dice);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.split_ratios = j.value("split_ratios", d.split_ratios);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.log_to_stderr = j.value("log_to_stderr", d.log_to_stderr);
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config " + path.string());
  try {
    return json::parse(in).get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("bad config " + path.string() + ": " + e.what());
  }
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total) {
  if (total <= 0) throw ConfigError("schedule horizon must be positive");
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return base_lr * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, double beta1, double beta2, double eps,
             double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (auto& [name, p] : params) {
    const auto n = static_cast<std::size_t>(p.numel());
    slots_.push_back({p, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0});
  }
}

void AdamW::step(double lr) {
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    ++s.t;
    const auto g = s.param.grad().data();
    auto p = s.param.data_mut();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr * weight_decay_ * p[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
    }
  }
}

int thread_cap() {
  if (const char* env = std::getenv("MRSNET_NUM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("MRSNET_NUM_THREADS must be a positive integer");
    return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Batch make_batch(const std::vector<ReferringSample>& samples) {
  if (samples.empty()) throw ValidationError("empty batch");
  const auto b = static_cast<std::int64_t>(samples.size());
  const auto h = samples[0].mask.height, w = samples[0].mask.width;
  Batch batch{Tensor({b, 3, h, w}), Tensor({b, 1, h, w}), {}};
  auto img = batch.images.data_mut();
  auto msk = batch.masks.data_mut();
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& s = samples[i];
    if (s.mask.height != h || s.mask.width != w) throw ShapeError("batch samples differ in size");
    const auto src = s.image.data();
    std::copy(src.begin(), src.end(), img.begin() + i * 3 * h * w);
    for (std::int64_t k = 0; k < h * w; ++k) msk[i * h * w + k] = s.mask.data[k];
    batch.texts.push_back(s.expression.text);
  }
  return batch;
}

namespace {

std::optional<std::string> non_finite_parameter(const MrsNet& model) {
  for (const auto& [name, p] : model.named_parameters())
    for (double v : p.data())
      if (!std::isfinite(v)) return "parameter " + name;
  return std::nullopt;
}

}  // namespace

double train_step(MrsNet& model, AdamW& optimizer, const Batch& batch, double lr, bool dice, std::int64_t step) {
  model.set_training(true);
  model.zero_grad();
  ForwardTrace trace;
  const auto fail = [&](const std::string& fallback) {
    std::string culprit = fallback;
    if (auto p = non_finite_parameter(model)) culprit = *p;
    else if (auto t = trace.first_non_finite()) culprit = *t;
    throw NumericError("non-finite loss at step " + std::to_string(step) + "; first non-finite tensor: " + culprit);
  };
  double value = 0.0;
  Tensor loss;
  try {
    const auto out = model.forward(batch.images, batch.texts, &trace);
    loss = segmentation_loss(out, batch.masks, dice);
    value = loss.item();
  } catch (const NumericError& e) {
    fail(e.what());
  }
  if (!std::isfinite(value)) fail("loss");
  loss.backward();
  optimizer.step(lr);
  return value;
}

std::vector<EvalRecord> evaluate_records(MrsNet& model, const DatasetIndex& dataset,
                                         const std::vector<std::string>& ids, std::int64_t image_size,
                                         double threshold) {
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<EvalRecord> records(ids.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    NoGradGuard no_grad;
    for (std::size_t i = next++; i < ids.size(); i = next++) {
      try {
        const auto sample = dataset.load(ids[i]);
        const auto input = resize_sample(sample, image_size, image_size);
        const auto image = ops::reshape(input.image, {1, 3, image_size, image_size});
        auto logits = model.forward(image, std::vector<std::string>{sample.expression.text}).logits;
        logits = ops::upsample_bilinear(logits, sample.mask.height, sample.mask.width);
        const auto pred = BinaryMask::from_tensor(ops::sigmoid(logits), threshold);
        records[i] = sample_iou(pred, sample.mask, sample.image_id, sample.annotation_type);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = ids.size();
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(thread_cap()), ids.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  model.set_training(was_training);
  if (failure) std::rethrow_exception(failure);
  return records;
}

MetricReport evaluate(MrsNet& model, const DatasetIndex& dataset, const std::string& split, std::int64_t image_size,
                      double threshold) {
  const auto& ids = dataset.split(split);
  if (ids.empty()) throw ValidationError("split \"" + split + "\" is empty");
  return aggregate(evaluate_records(model, dataset, ids, image_size, threshold));
}

namespace {

class JsonLog {
 public:
  JsonLog(const fs::path& path, bool echo) : out_(path, std::ios::trunc), echo_(echo) {
    if (!out_) throw LoadError("cannot write log " + path.string());
  }
  void write(const nlohmann::ordered_json& j) {
    const auto line = j.dump();
    out_ << line << '\n';
    out_.flush();
    if (echo_) std::cerr << line << '\n';
  }

 private:
  std::ofstream out_;
  bool echo_;
};

DatasetIndex with_splits(const DatasetIndex& dataset, const TrainConfig& config) {
  return dataset.splits().empty() ? stratified_split(dataset, config.split_ratios, config.seed) : dataset;
}

bool split_nonempty(const DatasetIndex& d, const std::string& name) {
  return d.has_split(name) && !d.split(name).empty();
}

}  // namespace

TrainResult train(const TrainConfig& config_in, const DatasetIndex& dataset) {
  config_in.validate();
  TrainConfig config = config_in;
  config.model.seed = config.seed;
  const DatasetIndex data = with_splits(dataset, config);

  std::vector<std::string> train_ids;
  for (const auto& id : data.split("train")) {
    const auto lang = to_string(data.record(id).expression.language);
    if (std::find(config.train_languages.begin(), config.train_languages.end(), lang) != config.train_languages.end())
      train_ids.push_back(id);
  }
  if (train_ids.empty()) throw ValidationError("train split has no samples in the training languages");

  TrainResult result;
  result.selection_split = split_nonempty(data, "val") ? "val" : "train";
  const fs::path out_dir = config.output_dir;
  fs::create_directories(out_dir);
  result.log_path = out_dir / "train.jsonl";
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  JsonLog log(result.log_path, config.log_to_stderr);

  MrsNet model(config.model);
  AdamW optimizer(model.named_parameters(), config.beta1, config.beta2, config.adam_eps, config.weight_decay);

  const auto n = static_cast<std::int64_t>(train_ids.size());
  const std::int64_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::int64_t total = per_epoch * config.epochs;
  if (config.max_steps > 0) total = std::min(total, config.max_steps);

  json header;
  header["model"] = config.model;
  header["train"] = config;
  header["dataset"] = {{"root", data.root().string()}, {"manifest", data.manifest().string()}};
  header["splits"] = splits_to_json(data);

  // Small training sets stay resident; large ones are read per batch.
  const bool resident = n <= 512;
  std::unordered_map<std::string, ReferringSample> cache;
  auto fetch = [&](const std::string& id) {
    if (auto it = cache.find(id); it != cache.end()) return it->second;
    auto s = resize_sample(data.load(id), config.image_size, config.image_size);
    if (resident) cache.emplace(id, s);
    return s;
  };

  std::mt19937_64 shuffle_rng(config.seed);
  std::vector<std::string> order = train_ids;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs && step < total; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
    for (std::int64_t b = 0; b < per_epoch && step < total; ++b) {
      std::vector<ReferringSample> samples;
      for (std::int64_t k = b * config.batch_size; k < std::min(n, (b + 1) * config.batch_size); ++k)
        samples.push_back(fetch(order[k]));
      const double lr = cosine_lr(config.lr, step, total);
      const double loss = train_step(model, optimizer, make_batch(samples), lr, config.dice, step);
      result.losses.push_back(loss);
      nlohmann::ordered_json entry;
      entry["event"] = "step";
      entry["epoch"] = epoch;
      entry["step"] = step;
      entry["lr"] = lr;
      entry["loss"] = loss;
      log.write(entry);
      ++step;
    }
    const bool last = epoch == config.epochs - 1 || step >= total;
    if ((epoch + 1) % config.eval_every != 0 && !last) continue;
    const auto report = evaluate(model, data, result.selection_split, config.image_size, config.model.threshold);
    nlohmann::ordered_json entry;
    entry["event"] = "eval";
    entry["epoch"] = epoch;
    entry["step"] = step;
    entry["split"] = result.selection_split;
    entry["metrics"] = report.to_json();
    log.write(entry);
    if (report.miou > result.best_val_miou) {
      result.best_val_miou = report.miou;
      header["epoch"] = epoch;
      header["step"] = step;
      header["selection"] = {{"split", result.selection_split}, {"miou", report.miou}};
      save_checkpoint(result.best_checkpoint, model, header);
    }
  }
  header["epoch"] = config.epochs - 1;
  header["step"] = step;
  header.erase("selection");
  save_checkpoint(result.last_checkpoint, model, header);
  result.steps = step;
  return result;
}

LoadedModel load_model(const fs::path& checkpoint) {
  auto ck = read_checkpoint(checkpoint);
  LoadedModel loaded;
  try {
    loaded.config = ck.header.at("train").get<TrainConfig>();
    loaded.config.model = ck.header.at("model").get<NetworkConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint header lacks a usable config: " + std::string(e.what()));
  }
  loaded.model = std::make_unique<MrsNet>(loaded.config.model);
  load_state(*loaded.model, ck.tensors);
  loaded.model->set_training(false);
  loaded.header = std::move(ck.header);
  return loaded;
}

DatasetIndex dataset_from_checkpoint(const json& header) {
  if (!header.contains("dataset")) throw ConfigError("checkpoint header records no dataset");
  auto d = load_dataset(header["dataset"].at("root").get<std::string>(),
                        header["dataset"].at("manifest").get<std::string>());
  if (header.contains("splits")) apply_splits_json(d, header["splits"]);
  return d;
}

MetricReport evaluate_checkpoint(const fs::path& checkpoint, const DatasetIndex& dataset, const std::string& split) {
  auto loaded = load_model(checkpoint);
  DatasetIndex data = dataset;
  if (data.splits().empty() && loaded.header.contains("splits")) apply_splits_json(data, loaded.header["splits"]);
  return evaluate(*loaded.model, data, split, loaded.config.image_size, loaded.config.model.threshold);
}

std::vector<AblationRow> ablate(const TrainConfig& base, const DatasetIndex& dataset) {
  base.validate();
  const DatasetIndex data = with_splits(dataset, base);
  const std::string score_split = split_nonempty(data, "test") ? "test" : split_nonempty(data, "val") ? "val" : "train";
  const std::array<std::pair<bool, bool>, 3> grid{{{true, false}, {false, true}, {true, true}}};
  std::vector<AblationRow> rows;
  for (const auto& [psr, csr] : grid) {
    TrainConfig c = base;
    c.model.use_psr = psr;
    c.model.use_csr = csr;
    c.output_dir = (fs::path(base.output_dir) / ("psr" + std::to_string(psr) + "_csr" + std::to_string(csr))).string();
    const auto trained = train(c, data);
    AblationRow row;
    row.use_psr = psr;
    row.use_csr = csr;
    row.checkpoint = trained.best_checkpoint.string();
    row.report = evaluate_checkpoint(trained.best_checkpoint, data, score_split);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mrsnet
