#pragma once

// JSON configuration surface. Three optional top-level sections — model,
// bench, train — with strict unknown-key rejection (errors name the full
// key path). An empty document yields the standard network; "preset" picks
// a base spec that explicit keys then override. emit_config writes every
// field explicitly, so parse(emit(parse(doc))) == parse(doc).

#include "xformer/model.hpp"
#include "xformer/train.hpp"

#include <json.hpp>

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace xf {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct BenchConfig {
  std::vector<int> resolutions = {256, 512, 768, 1024, 1280};
  bool wall_clock = false;
};

struct ConfigDoc {
  ModelSpec model = ModelSpec::default_spec();
  BenchConfig bench;
  TrainConfig train;
};

namespace detail {

using config_json = nlohmann::ordered_json;

inline void expect_object(const config_json& j, const std::string& path) {
  if (!j.is_object())
    throw ConfigError("config: '" + path + "' must be an object");
}

inline void expect_keys(const config_json& j, const std::string& path,
                        std::initializer_list<const char*> allowed) {
  expect_object(j, path);
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok)
      throw ConfigError("config: unknown key '" +
                        (path.empty() ? key : path + "." + key) + "'");
  }
}

inline int get_int(const config_json& j, const std::string& path) {
  if (!j.is_number_integer())
    throw ConfigError("config: '" + path + "' must be an integer");
  return j.get<int>();
}

inline double get_number(const config_json& j, const std::string& path) {
  if (!j.is_number())
    throw ConfigError("config: '" + path + "' must be a number");
  return j.get<double>();
}

inline bool get_bool(const config_json& j, const std::string& path) {
  if (!j.is_boolean())
    throw ConfigError("config: '" + path + "' must be a boolean");
  return j.get<bool>();
}

inline std::uint64_t get_u64(const config_json& j, const std::string& path) {
  if (!j.is_number_unsigned() && !j.is_number_integer())
    throw ConfigError("config: '" + path + "' must be a non-negative integer");
  if (j.is_number_integer() && !j.is_number_unsigned() &&
      j.get<std::int64_t>() < 0)
    throw ConfigError("config: '" + path + "' must be a non-negative integer");
  return j.get<std::uint64_t>();
}

inline AttentionKind parse_attention(const config_json& j,
                                     const std::string& path) {
  if (!j.is_string())
    throw ConfigError("config: '" + path + "' must be \"xfa\" or \"mhsa\"");
  const std::string s = j.get<std::string>();
  if (s == "xfa") return AttentionKind::xfa;
  if (s == "mhsa") return AttentionKind::mhsa;
  throw ConfigError("config: '" + path + "' must be \"xfa\" or \"mhsa\"");
}

inline Mv3Config parse_mv3(const config_json& j, const std::string& path) {
  expect_keys(j, path,
              {"in", "out", "stride", "expansion", "se_reduction", "kernel"});
  if (!j.contains("in") || !j.contains("out"))
    throw ConfigError("config: '" + path + "' needs \"in\" and \"out\"");
  Mv3Config m;
  m.c_in = get_int(j.at("in"), path + ".in");
  m.c_out = get_int(j.at("out"), path + ".out");
  if (j.contains("stride")) m.stride = get_int(j.at("stride"), path + ".stride");
  if (j.contains("expansion"))
    m.expansion = get_int(j.at("expansion"), path + ".expansion");
  if (j.contains("se_reduction"))
    m.se_reduction = get_int(j.at("se_reduction"), path + ".se_reduction");
  if (j.contains("kernel")) m.kernel = get_int(j.at("kernel"), path + ".kernel");
  return m;
}

inline StageSpec parse_stage(const config_json& j, const std::string& path,
                             int index) {
  expect_keys(j, path, {"mv3", "xf_repeat", "d_emb", "d_qkv", "mlp_ratio"});
  StageSpec st;
  st.index = index;
  if (j.contains("mv3")) {
    const auto& arr = j.at("mv3");
    if (!arr.is_array())
      throw ConfigError("config: '" + path + ".mv3' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      st.mv3.push_back(
          parse_mv3(arr[i], path + ".mv3[" + std::to_string(i) + "]"));
  }
  if (j.contains("xf_repeat"))
    st.xf_repeat = get_int(j.at("xf_repeat"), path + ".xf_repeat");
  if (j.contains("d_emb")) st.d_emb = get_int(j.at("d_emb"), path + ".d_emb");
  if (j.contains("d_qkv")) st.d_qkv = get_int(j.at("d_qkv"), path + ".d_qkv");
  if (j.contains("mlp_ratio"))
    st.mlp_ratio = get_int(j.at("mlp_ratio"), path + ".mlp_ratio");
  return st;
}

inline ModelSpec parse_model(const config_json& j) {
  expect_keys(j, "model",
              {"preset", "resolution", "classes", "stem_channels",
               "head_width", "patch", "attention", "num_heads", "stages"});
  ModelSpec spec = ModelSpec::default_spec();
  if (j.contains("preset")) {
    const auto& p = j.at("preset");
    if (!p.is_string())
      throw ConfigError("config: 'model.preset' must be a string");
    const std::string name = p.get<std::string>();
    if (name == "default")
      spec = ModelSpec::default_spec();
    else if (name == "reduced")
      spec = ModelSpec::reduced_spec();
    else
      throw ConfigError("config: 'model.preset' must be \"default\" or "
                        "\"reduced\", got \"" + name + "\"");
  }
  if (j.contains("resolution"))
    spec.resolution = get_int(j.at("resolution"), "model.resolution");
  if (j.contains("classes"))
    spec.num_classes = get_int(j.at("classes"), "model.classes");
  if (j.contains("stem_channels"))
    spec.stem_channels = get_int(j.at("stem_channels"), "model.stem_channels");
  if (j.contains("head_width"))
    spec.head_width = get_int(j.at("head_width"), "model.head_width");
  if (j.contains("patch")) spec.patch = get_int(j.at("patch"), "model.patch");
  if (j.contains("attention"))
    spec.attention = parse_attention(j.at("attention"), "model.attention");
  if (j.contains("num_heads"))
    spec.num_heads = get_int(j.at("num_heads"), "model.num_heads");
  if (j.contains("stages")) {
    const auto& arr = j.at("stages");
    if (!arr.is_array())
      throw ConfigError("config: 'model.stages' must be an array");
    spec.stages.clear();
    for (std::size_t i = 0; i < arr.size(); ++i)
      spec.stages.push_back(
          parse_stage(arr[i], "model.stages[" + std::to_string(i) + "]",
                      static_cast<int>(i) + 1));
  }
  try {
    spec.validate();
  } catch (const std::exception& e) {
    throw ConfigError("config: model: " + std::string(e.what()));
  }
  return spec;
}

inline BenchConfig parse_bench(const config_json& j) {
  expect_keys(j, "bench", {"resolutions", "wall_clock"});
  BenchConfig b;
  if (j.contains("resolutions")) {
    const auto& arr = j.at("resolutions");
    if (!arr.is_array() || arr.empty())
      throw ConfigError("config: 'bench.resolutions' must be a non-empty array");
    b.resolutions.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string path = "bench.resolutions[" + std::to_string(i) + "]";
      const int r = get_int(arr[i], path);
      if (r < 2) throw ConfigError("config: '" + path + "' must be >= 2");
      if (!b.resolutions.empty() && r <= b.resolutions.back())
        throw ConfigError("config: 'bench.resolutions' must strictly ascend");
      b.resolutions.push_back(r);
    }
  }
  if (j.contains("wall_clock"))
    b.wall_clock = get_bool(j.at("wall_clock"), "bench.wall_clock");
  return b;
}

inline TrainConfig parse_train(const config_json& j) {
  expect_keys(j, "train", {"steps", "lr", "seed", "dataset_size"});
  TrainConfig t;
  if (j.contains("steps")) {
    t.steps = get_int(j.at("steps"), "train.steps");
    if (t.steps < 0) throw ConfigError("config: 'train.steps' must be >= 0");
  }
  if (j.contains("lr")) t.lr = get_number(j.at("lr"), "train.lr");
  if (j.contains("seed")) t.seed = get_u64(j.at("seed"), "train.seed");
  if (j.contains("dataset_size")) {
    t.dataset_size = get_int(j.at("dataset_size"), "train.dataset_size");
    if (t.dataset_size < 2 || t.dataset_size % 2 != 0)
      throw ConfigError("config: 'train.dataset_size' must be even and >= 2");
  }
  return t;
}

}  // namespace detail

inline ConfigDoc parse_config(const std::string& text) {
  detail::config_json j;
  try {
    j = detail::config_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: not valid JSON: " + std::string(e.what()));
  }
  detail::expect_keys(j, "", {"model", "bench", "train"});
  ConfigDoc doc;
  if (j.contains("model")) doc.model = detail::parse_model(j.at("model"));
  if (j.contains("bench")) doc.bench = detail::parse_bench(j.at("bench"));
  if (j.contains("train")) doc.train = detail::parse_train(j.at("train"));
  return doc;
}

// Canonical form: every field explicit, fixed key order, 2-space indent.
inline std::string emit_config(const ConfigDoc& doc) {
  using detail::config_json;
  config_json m;
  m["resolution"] = doc.model.resolution;
  m["classes"] = doc.model.num_classes;
  m["stem_channels"] = doc.model.stem_channels;
  m["head_width"] = doc.model.head_width;
  m["patch"] = doc.model.patch;
  m["attention"] = attention_kind_name(doc.model.attention);
  m["num_heads"] = doc.model.num_heads;
  config_json stages = config_json::array();
  for (const auto& st : doc.model.stages) {
    config_json s;
    config_json mv3 = config_json::array();
    for (const auto& blk : st.mv3) {
      config_json b;
      b["in"] = blk.c_in;
      b["out"] = blk.c_out;
      b["stride"] = blk.stride;
      b["expansion"] = blk.expansion;
      b["se_reduction"] = blk.se_reduction;
      b["kernel"] = blk.kernel;
      mv3.push_back(b);
    }
    s["mv3"] = mv3;
    s["xf_repeat"] = st.xf_repeat;
    s["d_emb"] = st.d_emb;
    s["d_qkv"] = st.d_qkv;
    s["mlp_ratio"] = st.mlp_ratio;
    stages.push_back(s);
  }
  m["stages"] = stages;
  config_json b;
  b["resolutions"] = doc.bench.resolutions;
  b["wall_clock"] = doc.bench.wall_clock;
  config_json t;
  t["steps"] = doc.train.steps;
  t["lr"] = doc.train.lr;
  t["seed"] = doc.train.seed;
  t["dataset_size"] = doc.train.dataset_size;
  config_json j;
  j["model"] = m;
  j["bench"] = b;
  j["train"] = t;
  return j.dump(2) + "\n";
}

}  // namespace xf
