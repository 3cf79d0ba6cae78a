#include "brokercc/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "brokercc/error.hpp"

namespace brokercc {

using nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0.0) throw Error(ErrorCode::kBadConfig, "config: lr must be positive");
  if (batch_size < 1) throw Error(ErrorCode::kBadConfig, "config: batch_size must be >= 1");
  if (max_epochs < 1) throw Error(ErrorCode::kBadConfig, "config: max_epochs must be >= 1");
  if (sigma <= 0.0) throw Error(ErrorCode::kBadConfig, "config: sigma must be positive");
  try {
    bmg.validate();
    extractor.validate();
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorCode::kBadConfig, std::string("config: ") + e.what());
  }
  if (crop != bmg.input_size())
    throw Error(ErrorCode::kBadConfig, "config: crop (" + std::to_string(crop) +
                                           ") must equal the BMG input size (" +
                                           std::to_string(bmg.input_size()) + ")");
  if (crop != extractor.input_size)
    throw Error(ErrorCode::kBadConfig, "config: crop must equal the extractor input size");
  if (ablations.no_broker && ablations.freeze_bmg)
    throw Error(ErrorCode::kBadConfig, "config: no_broker and freeze_bmg are mutually exclusive");
}

json TrainConfig::to_json() const {
  json j;
  j["stage"] = stage == Stage::kDistill ? "distill" : "finetune";
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["max_epochs"] = max_epochs;
  j["max_steps"] = max_steps;
  j["crop"] = crop;
  j["sigma"] = sigma;
  j["seed"] = seed;
  j["no_distill"] = ablations.no_distill;
  j["freeze_bmg"] = ablations.freeze_bmg;
  j["no_cma"] = ablations.no_cma;
  j["no_broker"] = ablations.no_broker;
  j["data_dir"] = data_dir;
  j["ckpt_path"] = ckpt_path;
  j["out_dir"] = out_dir;
  j["fusion_reg_weight"] = fusion_reg_weight;
  j["bmg"] = {{"d", bmg.bottleneck_channels},
              {"patch_grid", bmg.cma_patch_grid},
              {"patch_size", bmg.cma_patch_size},
              {"heads", bmg.cma_heads},
              {"layers", bmg.cma_layers},
              {"stages", bmg.encoder_stages},
              {"base_channels", bmg.base_channels}};
  j["extractor"] = {{"backbone", extractor.backbone == Backbone::kVgg19 ? "vgg19" : "tiny"},
                    {"embed_dim", extractor.embed_dim},
                    {"layers", extractor.encoder_layers},
                    {"heads", extractor.heads},
                    {"patch_count", extractor.patch_count},
                    {"input_size", extractor.input_size}};
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("stage")) {
      const std::string s = j["stage"].get<std::string>();
      if (s == "distill") c.stage = Stage::kDistill;
      else if (s == "finetune") c.stage = Stage::kFinetune;
      else throw Error(ErrorCode::kBadConfig, "config: unknown stage '" + s + "'");
    }
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.crop = j.value("crop", c.crop);
    c.sigma = j.value("sigma", c.sigma);
    c.seed = j.value("seed", c.seed);
    c.ablations.no_distill = j.value("no_distill", false);
    c.ablations.freeze_bmg = j.value("freeze_bmg", false);
    c.ablations.no_cma = j.value("no_cma", false);
    c.ablations.no_broker = j.value("no_broker", false);
    c.data_dir = j.value("data_dir", std::string());
    c.ckpt_path = j.value("ckpt_path", std::string());
    c.out_dir = j.value("out_dir", std::string());
    c.fusion_reg_weight = j.value("fusion_reg_weight", 0.0);
    if (j.contains("bmg")) {
      const auto& b = j["bmg"];
      c.bmg.bottleneck_channels = b.value("d", c.bmg.bottleneck_channels);
      c.bmg.cma_patch_grid = b.value("patch_grid", c.bmg.cma_patch_grid);
      c.bmg.cma_patch_size = b.value("patch_size", c.bmg.cma_patch_size);
      c.bmg.cma_heads = b.value("heads", c.bmg.cma_heads);
      c.bmg.cma_layers = b.value("layers", c.bmg.cma_layers);
      c.bmg.encoder_stages = b.value("stages", c.bmg.encoder_stages);
      c.bmg.base_channels = b.value("base_channels", c.bmg.base_channels);
    }
    if (j.contains("extractor")) {
      const auto& e = j["extractor"];
      if (e.contains("backbone")) {
        const std::string b = e["backbone"].get<std::string>();
        if (b == "vgg19") c.extractor.backbone = Backbone::kVgg19;
        else if (b == "tiny") c.extractor.backbone = Backbone::kTiny;
        else throw Error(ErrorCode::kBadConfig, "config: unknown backbone '" + b + "'");
      }
      c.extractor.embed_dim = e.value("embed_dim", c.extractor.embed_dim);
      c.extractor.encoder_layers = e.value("layers", c.extractor.encoder_layers);
      c.extractor.heads = e.value("heads", c.extractor.heads);
      c.extractor.patch_count = e.value("patch_count", c.extractor.patch_count);
      c.extractor.input_size = e.value("input_size", c.extractor.input_size);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadConfig, std::string("config: ") + e.what());
  }
  return c;
}

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

json parse_toml_value(const std::string& raw, int line_no) {
  const std::string v = trim(raw);
  if (v.empty()) throw Error(ErrorCode::kBadConfig, "toml: empty value on line " + std::to_string(line_no));
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"')
      throw Error(ErrorCode::kBadConfig, "toml: unterminated string on line " + std::to_string(line_no));
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  try {
    if (v.find_first_of(".eE") != std::string::npos) return std::stod(v);
    size_t pos = 0;
    long long n = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kBadConfig, "toml: cannot parse value '" + v + "' on line " + std::to_string(line_no));
  }
}

}  // namespace

json parse_toml_subset(const std::string& text) {
  json root = json::object();
  json* section = &root;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos && line.find('"') == std::string::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw Error(ErrorCode::kBadConfig, "toml: malformed section on line " + std::to_string(line_no));
      const std::string name = trim(t.substr(1, t.size() - 2));
      section = &root[name];
      if (!section->is_object()) *section = json::object();
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::kBadConfig, "toml: expected key = value on line " + std::to_string(line_no));
    const std::string key = trim(t.substr(0, eq));
    (*section)[key] = parse_toml_value(t.substr(eq + 1), line_no);
  }
  return root;
}

json TrainConfig::read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  // JSON configs start with '{'; anything else is treated as TOML.
  const size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kBadConfig, "config: bad JSON in " + path + ": " + e.what());
    }
  }
  return parse_toml_subset(text);
}

TrainConfig TrainConfig::load(const std::string& path) { return from_json(read_file(path)); }

}  // namespace brokercc
