// Command-line front end: split, train, eval, ablate, synth.
//
// Results go to stdout; on failure a single JSON line {"error", "message"}
// goes to stderr and the exit status is nonzero.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrsnet/data_model.hpp"
#include "mrsnet/errors.hpp"
#include "mrsnet/harness.hpp"
#include "mrsnet/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mrsnet;

namespace {

constexpr int kExitError = 2;
constexpr int kExitUsage = 64;
constexpr int kExitInternal = 1;

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

SplitRatios parse_ratios(const std::string& text) {
  SplitRatios r{};
  std::stringstream ss(text);
  std::string part;
  std::size_t k = 0;
  while (std::getline(ss, part, ',')) {
    if (k == 3) throw ConfigError("--ratios needs exactly three values");
    try {
      std::size_t used = 0;
      r[k] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("--ratios value \"" + part + "\" is not a number");
    }
    ++k;
  }
  if (k != 3) throw ConfigError("--ratios needs exactly three values");
  return r;
}

// Manifest plus splits.json beside it when present (or the explicit file).
DatasetIndex open_dataset(const std::string& manifest, const std::string& splits_file) {
  auto data = load_dataset({}, manifest);
  const fs::path splits = splits_file.empty() ? fs::path(manifest).parent_path() / "splits.json" : fs::path(splits_file);
  if (!splits_file.empty() || fs::exists(splits)) {
    std::ifstream in(splits);
    if (!in) throw LoadError("cannot open splits file " + splits.string());
    apply_splits_json(data, json::parse(in));
  }
  return data;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring segmentation toolkit"};
  app.require_subcommand(1);
  std::string format = "table";
  app.add_option("--format", format, "Output format")->check(CLI::IsMember({"table", "json"}));

  auto* split_cmd = app.add_subcommand("split", "Region-stratified train/val/test split");
  std::string manifest, ratios_text = "0.7,0.1,0.2", split_out;
  std::uint64_t seed = 0;
  split_cmd->add_option("--manifest", manifest, "Manifest JSON")->required();
  split_cmd->add_option("--ratios", ratios_text, "train,val,test fractions");
  split_cmd->add_option("--seed", seed, "Shuffle seed");
  split_cmd->add_option("--out", split_out, "Output file (default: splits.json beside the manifest)");

  auto* train_cmd = app.add_subcommand("train", "Train and keep the best-validation checkpoint");
  std::string config_path, data_path, splits_path, output_dir;
  train_cmd->add_option("--config", config_path, "Train config JSON")->required();
  train_cmd->add_option("--data", data_path, "Manifest JSON")->required();
  train_cmd->add_option("--splits", splits_path, "Splits JSON");
  train_cmd->add_option("--output", output_dir, "Override output_dir");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on one or more splits");
  std::string ckpt_path, eval_data, eval_splits_path, json_out;
  std::vector<std::string> eval_splits;
  double threshold = -1.0;
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_cmd->add_option("--split", eval_splits, "val and/or test")->required()->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--data", eval_data, "Manifest JSON (default: the one recorded in the checkpoint)");
  eval_cmd->add_option("--splits", eval_splits_path, "Splits JSON");
  eval_cmd->add_option("--threshold", threshold, "Probability threshold override");
  eval_cmd->add_option("--json", json_out, "Also write the JSON report here");

  auto* ablate_cmd = app.add_subcommand("ablate", "PSR/CSR ablation grid");
  std::string ablate_config, ablate_data, ablate_splits;
  ablate_cmd->add_option("--config", ablate_config, "Train config JSON")->required();
  ablate_cmd->add_option("--data", ablate_data, "Manifest JSON")->required();
  ablate_cmd->add_option("--splits", ablate_splits, "Splits JSON");

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic shapes dataset");
  std::string synth_out;
  SyntheticOptions synth;
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--samples", synth.samples, "Sample count");
  synth_cmd->add_option("--non-object", synth.non_object, "Trailing samples without a target");
  synth_cmd->add_option("--size", synth.size, "Image side in pixels");
  synth_cmd->add_option("--seed", synth.seed, "Seed");
  synth_cmd->add_option("--regions", synth.regions, "Region keys, assigned round-robin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kExitUsage);
  }

  try {
    thread_cap();  // validates MRSNET_NUM_THREADS early

    if (*split_cmd) {
      const auto data = stratified_split(load_dataset({}, manifest), parse_ratios(ratios_text), seed);
      const fs::path out = split_out.empty() ? fs::path(manifest).parent_path() / "splits.json" : fs::path(split_out);
      json doc{{"seed", seed}, {"ratios", parse_ratios(ratios_text)}, {"splits", splits_to_json(data)}};
      write_text(out.string(), doc.dump(1) + "\n");
      nlohmann::ordered_json summary;
      for (const char* name : kSplitNames) summary[name] = data.split(name).size();
      summary["out"] = out.string();
      std::cout << summary.dump() << std::endl;
    } else if (*train_cmd) {
      auto config = load_train_config(config_path);
      if (!output_dir.empty()) config.output_dir = output_dir;
      const auto result = train(config, open_dataset(data_path, splits_path));
      nlohmann::ordered_json j;
      j["checkpoint"] = result.best_checkpoint.string();
      j["last_checkpoint"] = result.last_checkpoint.string();
      j["log"] = result.log_path.string();
      j["steps"] = result.steps;
      j["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back();
      j["selection_split"] = result.selection_split;
      j["best_miou"] = round2(result.best_val_miou);
      std::cout << j.dump() << std::endl;
    } else if (*eval_cmd) {
      auto loaded = load_model(ckpt_path);
      DatasetIndex data;
      if (eval_data.empty()) {
        data = dataset_from_checkpoint(loaded.header);
      } else {
        data = open_dataset(eval_data, eval_splits_path);
        if (data.splits().empty() && loaded.header.contains("splits")) apply_splits_json(data, loaded.header["splits"]);
      }
      const double t = threshold > 0.0 ? threshold : loaded.config.model.threshold;
      std::map<std::string, MetricReport> reports;
      nlohmann::ordered_json j;
      for (const auto& s : eval_splits) {
        reports[s] = evaluate(*loaded.model, data, s, loaded.config.image_size, t);
        j[s] = reports[s].to_json();
      }
      if (!json_out.empty()) write_text(json_out, j.dump(1) + "\n");
      if (format == "json")
        std::cout << j.dump() << std::endl;
      else
        std::cout << format_comparison_table({{"MRSNet", reports}}, {"val", "test"});
    } else if (*ablate_cmd) {
      const auto rows = ablate(load_train_config(ablate_config), open_dataset(ablate_data, ablate_splits));
      if (format == "json")
        std::cout << ablation_to_json(rows).dump() << std::endl;
      else
        std::cout << format_ablation_table(rows);
    } else if (*synth_cmd) {
      const auto path = write_synthetic_dataset(synth_out, synth);
      std::cout << json{{"manifest", path.string()}, {"samples", synth.samples}}.dump() << std::endl;
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), kExitError);
  } catch (const nlohmann::json::exception& e) {
    return fail("json", e.what(), kExitError);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kExitInternal);
  }
  return 0;
}
