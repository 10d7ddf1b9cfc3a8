#include "chart/error.hpp"
#include "chart/harness.hpp"

namespace chart {

namespace {

void from_conversion(const nlohmann::json& j, ConversionOptions& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "points_per_radian") c.points_per_radian = v.get<double>();
    else if (key == "line_thickness_frac") c.line_thickness_frac = v.get<double>();
    else throw ConfigError("unknown conversion key: " + key);
  }
}

void check_schedule(const TrainSchedule& s, const char* name) {
  if (s.steps == 0) throw ConfigError(std::string(name) + ": steps must be positive");
  if (s.batch == 0) throw ConfigError(std::string(name) + ": batch must be positive");
  if (!(s.target >= 0.0 && s.target <= 1.0)) throw ConfigError(std::string(name) + ": target must lie in [0, 1]");
}

}  // namespace

SynthConfig default_qa_synth() {
  SynthConfig c;
  c.images = 25;
  c.questions_per_image = 2;
  return c;
}

void to_json(nlohmann::json& j, const TrainSchedule& c) {
  j = {{"steps", c.steps}, {"batch", c.batch}, {"log_every", c.log_every}, {"eval_every", c.eval_every},
       {"target", c.target}};
}

void from_json(const nlohmann::json& j, TrainSchedule& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "steps") c.steps = v.get<std::size_t>();
    else if (key == "batch") c.batch = v.get<std::size_t>();
    else if (key == "log_every") c.log_every = v.get<std::size_t>();
    else if (key == "eval_every") c.eval_every = v.get<std::size_t>();
    else if (key == "target") c.target = v.get<double>();
    else throw ConfigError("unknown schedule key: " + key);
  }
}

void RunConfig::validate() const {
  if (threads == 0) throw ConfigError("threads must be positive");
  synth.validate();
  qa_synth.validate();
  if (!(conversion.points_per_radian > 0.0)) throw ConfigError("conversion.points_per_radian must be positive");
  if (!(conversion.line_thickness_frac > 0.0 && conversion.line_thickness_frac < 0.5)) {
    throw ConfigError("conversion.line_thickness_frac must lie in (0, 0.5)");
  }
  segmenter.validate();
  qa.validate(segmenter.stage_channels(3));
  check_schedule(seg_train, "seg_train");
  check_schedule(qa_train, "qa_train");
  for (const OptimizerConfig* o : {&seg_optimizer, &qa_optimizer}) {
    if (o->kind != "sgd_momentum" && o->kind != "adam") throw ConfigError("optimizer kind must be sgd_momentum or adam");
    if (!(o->learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},
       {"run_dir", c.run_dir.string()},
       {"data_dir", c.data_dir.string()},
       {"qa_data_dir", c.qa_data_dir.string()},
       {"threads", c.threads},
       {"synth", c.synth},
       {"qa_synth", c.qa_synth},
       {"conversion",
        {{"points_per_radian", c.conversion.points_per_radian},
         {"line_thickness_frac", c.conversion.line_thickness_frac}}},
       {"segmenter", c.segmenter},
       {"seg_optimizer", c.seg_optimizer},
       {"seg_train", c.seg_train},
       {"qa", c.qa},
       {"qa_optimizer", c.qa_optimizer},
       {"qa_train", c.qa_train}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "run_dir") c.run_dir = v.get<std::string>();
    else if (key == "data_dir") c.data_dir = v.get<std::string>();
    else if (key == "qa_data_dir") c.qa_data_dir = v.get<std::string>();
    else if (key == "threads") c.threads = v.get<std::size_t>();
    else if (key == "synth") from_json(v, c.synth);
    else if (key == "qa_synth") from_json(v, c.qa_synth);
    else if (key == "conversion") from_conversion(v, c.conversion);
    else if (key == "segmenter") from_json(v, c.segmenter);
    else if (key == "seg_optimizer") from_json(v, c.seg_optimizer);
    else if (key == "seg_train") from_json(v, c.seg_train);
    else if (key == "qa") from_json(v, c.qa);
    else if (key == "qa_optimizer") from_json(v, c.qa_optimizer);
    else if (key == "qa_train") from_json(v, c.qa_train);
    else throw ConfigError("unknown config key: " + key);
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  try {
    from_json(read_json_file(path), c);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

}  // namespace chart
