#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "carfollow/workflows.hpp"

namespace carfollow::cli {

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"car-following driver models: datasets, training, evaluation"};
  app.require_subcommand(1);

  const std::pair<const char*, const char*> commands[] = {
      {"ingest", "cut car-following episodes from raw tracks into a dataset"},
      {"synth", "generate the synthetic benchmark dataset"},
      {"train", "fit the selected model once per seed"},
      {"evaluate", "offline/online metrics over seeds and test conditions"},
      {"diagnose", "export belief traces and per-state observation samples"},
      {"report", "aggregate metrics into summary tables and SVG plots"},
  };

  std::string config_file;
  std::map<std::string, std::string> flag_values;
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_file, "flat key=value config file");
    // flag names mirror config keys one-to-one
    for (const std::string& key : config_keys())
      sub->add_option("--" + key, flag_values[key]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    RunConfig cfg;
    if (!config_file.empty()) cfg = load_config(config_file);
    for (const std::string& key : config_keys())
      if (sub->count("--" + key) > 0) apply_override(cfg, key, flag_values[key]);

    const std::string& cmd = sub->get_name();
    if (cmd == "ingest") run_ingest(cfg);
    else if (cmd == "synth") run_synth(cfg);
    else if (cmd == "train") run_train(cfg);
    else if (cmd == "evaluate") run_evaluate(cfg);
    else if (cmd == "diagnose") run_diagnose(cfg);
    else run_report(cfg);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace carfollow::cli
