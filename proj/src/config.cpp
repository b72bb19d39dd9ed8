#include "mpcseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include <nlohmann/json.hpp>

namespace mpcseg {

namespace {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ValidationError(name_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      const json& v = j_.at(key);
      if (v.is_number_integer() && !v.is_number_unsigned()) {
        throw ValidationError(name_ + "." + key + ": must be a non-negative integer");
      }
    }
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError(name_ + "." + key + ": wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ValidationError(name_ + "." + it.key() + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
}

bool parse_switch(const json& v, const std::string& field) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "on") return true;
    if (s == "off") return false;
  }
  throw ValidationError(field + ": expected on/off or a boolean");
}

SceneSpec scene_from_json(const json& j) {
  Section s(j, "scene");
  SceneSpec spec;
  s.get("label_rate", spec.label_rate);
  s.get("noise_sigma", spec.noise_sigma);
  s.get("extent", spec.extent);
  s.get("seed", spec.seed);
  if (!s.has("classes")) throw ValidationError("scene.classes: missing");
  const json& classes = s.at("classes");
  if (!classes.is_array()) throw ValidationError("scene.classes: expected an array");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    Section c(classes[i], "scene.classes[" + std::to_string(i) + "]");
    ClassSpec cs;
    c.get("name", cs.name);
    c.get("point_count", cs.point_count);
    c.get("object_scale", cs.object_scale);
    c.get("signature", cs.signature);
    c.finish();
    spec.classes.push_back(std::move(cs));
  }
  s.finish();
  spec.validate();
  return spec;
}

json scene_to_json(const SceneSpec& spec) {
  json classes = json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"name", c.name},
                       {"point_count", c.point_count},
                       {"object_scale", c.object_scale},
                       {"signature", c.signature}});
  }
  return {{"classes", classes},
          {"label_rate", spec.label_rate},
          {"noise_sigma", spec.noise_sigma},
          {"extent", spec.extent},
          {"seed", spec.seed}};
}

}  // namespace

SceneSpec parse_scene_spec(const std::string& json_text) {
  json j = parse_json(json_text);
  // A run config is accepted too; its scene section is used.
  if (j.is_object() && j.contains("scene") && !j.contains("classes")) return scene_from_json(j["scene"]);
  return scene_from_json(j);
}

RunConfig parse_run_config(const std::string& json_text) {
  const json j = parse_json(json_text);
  Section root(j, "config");
  RunConfig rc;
  auto& ex = rc.experiment;

  if (root.has("scene")) rc.scene = scene_from_json(root.at("scene"));

  bool k_given = false;
  if (root.has("sampling")) {
    Section s(root.at("sampling"), "sampling");
    double cell = 0.0;
    if (s.has("cell_size")) {
      s.get("cell_size", cell);
      ex.sampling.cell_size = cell;
    }
    s.get("train_ratio", ex.sampling.train_ratio);
    k_given = s.has("k");
    s.get("k", ex.sampling.k);
    s.get("seed", ex.sampling.seed);
    std::string strategy = "gbs";
    s.get("strategy", strategy);
    ex.sampling.strategy = parse_sampling_strategy(strategy);
    s.finish();
  }

  bool rf_given = false;
  if (root.has("network")) {
    Section s(root.at("network"), "network");
    s.get("base_channels", ex.network.base_channels);
    s.get("knn_neighbors", ex.network.knn_neighbors);
    rf_given = s.has("receptive_field");
    s.get("receptive_field", ex.network.receptive_field);
    s.get("head_hidden", ex.network.head_hidden);
    s.get("seed", ex.network.seed);
    s.finish();
  }
  if (rf_given && k_given && ex.network.receptive_field != ex.sampling.k) {
    throw ValidationError("network.receptive_field: must equal sampling.k");
  }
  if (rf_given) ex.sampling.k = ex.network.receptive_field;
  else ex.network.receptive_field = ex.sampling.k;

  if (root.has("loss")) {
    Section s(root.at("loss"), "loss");
    s.get("lambda", ex.train.loss.lambda);
    s.get("tail_threshold", ex.train.loss.tail_threshold);
    s.get("weight_truncation", ex.train.loss.weight_truncation);
    if (s.has("class_weighting")) {
      ex.train.loss.class_weighting = parse_switch(s.at("class_weighting"), "loss.class_weighting");
    }
    s.finish();
  }

  if (root.has("train")) {
    Section s(root.at("train"), "train");
    s.get("epochs", ex.train.epochs);
    s.get("batch_size", ex.train.batch_size);
    s.get("learning_rate", ex.train.learning_rate);
    s.get("lr_decay", ex.train.lr_decay);
    s.get("weight_decay", ex.train.weight_decay);
    s.get("seed", ex.train.seed);
    s.get("grad_clip", ex.train.grad_clip);
    if (s.has("optimizer")) {
      std::string name;
      s.get("optimizer", name);
      ex.train.optimizer = parse_optimizer(name);
    }
    // Equivalent to loss.lambda; either spelling is accepted.
    s.get("lambda", ex.train.loss.lambda);
    for (auto [key, flag] : {std::pair{"msff", &ex.train.toggles.msff},
                             std::pair{"msl", &ex.train.toggles.msl},
                             std::pair{"ltl", &ex.train.toggles.ltl}}) {
      if (s.has(key)) *flag = parse_switch(s.at(key), std::string("train.") + key);
    }
    s.finish();
  }
  root.finish();

  if (rc.scene) ex.network.bands = rc.scene->bands();
  if (rc.scene) ex.network.classes = rc.scene->classes.size();
  if (!(ex.sampling.train_ratio > 0.0 && ex.sampling.train_ratio < 1.0)) {
    throw ValidationError("sampling.train_ratio: must lie in (0, 1)");
  }
  if (ex.sampling.cell_size && !(*ex.sampling.cell_size > 0.0)) {
    throw ValidationError("sampling.cell_size: must be > 0");
  }
  if (ex.sampling.k == 0) throw ValidationError("sampling.k: must be > 0");
  ex.network.validate();
  ex.train.validate();
  return rc;
}

std::string scene_spec_json(const SceneSpec& spec) { return scene_to_json(spec).dump(2); }

std::string run_config_json(const RunConfig& config) {
  const auto& ex = config.experiment;
  json j;
  if (config.scene) j["scene"] = scene_to_json(*config.scene);
  j["sampling"] = {{"train_ratio", ex.sampling.train_ratio},
                   {"k", ex.sampling.k},
                   {"seed", ex.sampling.seed},
                   {"strategy", ex.sampling.strategy == SamplingStrategy::kRandom ? "rs" : "gbs"}};
  if (ex.sampling.cell_size) j["sampling"]["cell_size"] = *ex.sampling.cell_size;
  j["network"] = {{"base_channels", ex.network.base_channels},
                  {"knn_neighbors", ex.network.knn_neighbors},
                  {"receptive_field", ex.network.receptive_field},
                  {"head_hidden", ex.network.head_hidden},
                  {"seed", ex.network.seed}};
  j["loss"] = {{"lambda", ex.train.loss.lambda},
               {"tail_threshold", ex.train.loss.tail_threshold},
               {"weight_truncation", ex.train.loss.weight_truncation},
               {"class_weighting", ex.train.loss.class_weighting ? "on" : "off"}};
  j["train"] = {{"epochs", ex.train.epochs},
                {"batch_size", ex.train.batch_size},
                {"learning_rate", ex.train.learning_rate},
                {"lr_decay", ex.train.lr_decay},
                {"weight_decay", ex.train.weight_decay},
                {"seed", ex.train.seed},
                {"optimizer", ex.train.optimizer == Optimizer::kAdam ? "adam" : "sgd"},
                {"grad_clip", ex.train.grad_clip},
                {"msff", ex.train.toggles.msff},
                {"msl", ex.train.toggles.msl},
                {"ltl", ex.train.toggles.ltl}};
  return j.dump(2);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_text_file(path));
}

SceneSpec load_scene_spec(const std::filesystem::path& path) {
  return parse_scene_spec(read_text_file(path));
}

}  // namespace mpcseg
