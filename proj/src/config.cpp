#include "nnbf/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <json.hpp>

#include "nnbf/serialize.hpp"

namespace nnbf::cli {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct RawConfig {
  // section.key -> (value, line)
  std::map<std::string, std::pair<std::string, int>> entries;
  std::string source;

  bool has(const std::string& key) const { return entries.count(key) != 0; }
};

RawConfig tokenize(const std::string& text, const std::string& source) {
  RawConfig raw;
  raw.source = source;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ParseError(source + ":" + std::to_string(lineno) +
                         ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(source + ":" + std::to_string(lineno) +
                       ": expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ParseError(source + ":" + std::to_string(lineno) + ": empty key or value");
    std::string full = section.empty() ? key : section + "." + key;
    if (raw.entries.count(full))
      throw ParseError(source + ":" + std::to_string(lineno) + ": duplicate key '" +
                       full + "' (first at line " +
                       std::to_string(raw.entries[full].second) + ")");
    raw.entries[full] = {value, lineno};
  }
  return raw;
}

class Reader {
 public:
  Reader(RawConfig raw, ExperimentConfig* cfg) : raw_(std::move(raw)), cfg_(cfg) {}

  template <typename T, typename Parse>
  T get(const std::string& key, T def, const std::string& def_str, Parse parse) {
    auto it = raw_.entries.find(key);
    if (it == raw_.entries.end()) {
      cfg_->applied_defaults.push_back(key + " = " + def_str + " (default)");
      return def;
    }
    used_.insert(used_.end(), key);
    try {
      return parse(it->second.first);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(raw_.source + ":" + std::to_string(it->second.second) +
                       ": field '" + key + "': " + e.what());
    }
  }

  std::int64_t geti(const std::string& key, std::int64_t def) {
    return get<std::int64_t>(key, def, std::to_string(def), [&](const std::string& v) {
      size_t pos = 0;
      std::int64_t out = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
      return out;
    });
  }

  double getd(const std::string& key, double def) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", def);
    return get<double>(key, def, buf, [&](const std::string& v) {
      size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("not a number: '" + v + "'");
      return out;
    });
  }

  std::string gets(const std::string& key, const std::string& def) {
    return get<std::string>(key, def, def, [](const std::string& v) { return v; });
  }

  bool get_onoff(const std::string& key, bool def) {
    return get<bool>(key, def, def ? "on" : "off", [](const std::string& v) {
      if (v == "on" || v == "true" || v == "1") return true;
      if (v == "off" || v == "false" || v == "0") return false;
      throw std::invalid_argument("expected on/off, got '" + v + "'");
    });
  }

  void reject_unknown() const {
    for (const auto& [key, val] : raw_.entries) {
      if (std::find(used_.begin(), used_.end(), key) == used_.end())
        throw ParseError(raw_.source + ":" + std::to_string(val.second) +
                         ": unknown key '" + key + "'");
    }
  }

 private:
  RawConfig raw_;
  ExperimentConfig* cfg_;
  std::vector<std::string> used_;
};

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& source) {
  RawConfig raw = tokenize(text, source);
  ExperimentConfig cfg;
  Reader r(std::move(raw), &cfg);

  cfg.seed = static_cast<std::uint64_t>(r.geti("seed", 1));
  cfg.out_dir = r.gets("out_dir", "runs/default");

  cfg.scenario.M = r.geti("scenario.M", 8);
  cfg.scenario.N = r.geti("scenario.N", 2);
  cfg.scenario.L = r.geti("scenario.L", 14);
  cfg.scenario.K = r.geti("scenario.K", 48);
  cfg.scenario.paths = static_cast<int>(r.geti("scenario.paths", 12));
  cfg.scenario.carrier_hz = r.getd("scenario.carrier_hz", 2.6e9);
  cfg.scenario.subcarrier_spacing_hz = r.getd("scenario.subcarrier_spacing_hz", 30e3);
  bool mobility = r.get_onoff("scenario.mobility", false);
  double speed = r.getd("scenario.max_speed", 30.0);
  cfg.scenario.max_speed_mps = mobility ? speed : 0.0;

  cfg.model.M = cfg.scenario.M;
  cfg.model.N = cfg.scenario.N;
  cfg.model.L = cfg.scenario.L;
  cfg.model.K = cfg.scenario.K;
  cfg.model.depth = r.geti("model.depth", 64);
  cfg.model.modules = r.geti("model.modules", 2);
  cfg.model.ffn_expand = r.geti("model.ffn_expand", 2);
  cfg.model.kernel = r.geti("model.kernel", 3);

  cfg.training.batch = r.geti("training.batch", 4);
  cfg.steps_per_stage = r.geti("training.steps_per_stage", 500);
  cfg.training.lr = r.getd("training.lr", 1e-3);
  cfg.training.beta1 = r.getd("training.beta1", 0.9);
  cfg.training.beta2 = r.getd("training.beta2", 0.999);
  cfg.training.eps = r.getd("training.eps", 1e-8);
  cfg.training.lookahead_k = r.geti("training.lookahead_k", 13);
  cfg.training.lookahead_alpha = r.getd("training.lookahead_alpha", 0.5);
  cfg.training.pilot_len = r.geti("training.pilot_len", 8);
  std::string csi = r.gets("training.loss_csi", "genie");
  if (csi == "genie") {
    cfg.training.genie_loss = true;
  } else if (csi == "estimate") {
    cfg.training.genie_loss = false;
  } else {
    throw ParseError(source + ": field 'training.loss_csi': expected genie|estimate, got '" +
                     csi + "'");
  }
  cfg.training.seed = cfg.seed;

  std::string snrs = r.gets("evaluation.snr_db", "-10,-5,0,5,10,15,20");
  cfg.eval.snr_db.clear();
  for (const auto& tok : split_list(snrs)) {
    try {
      cfg.eval.snr_db.push_back(std::stod(tok));
    } catch (...) {
      throw ParseError(source + ": field 'evaluation.snr_db': bad value '" + tok + "'");
    }
  }
  cfg.eval.trials = r.geti("evaluation.trials", 1000);
  cfg.eval.modulation = static_cast<int>(r.geti("evaluation.modulation", 4));
  std::string rate = r.gets("evaluation.coding_rate", "1/2");
  if (rate == "1/2") {
    cfg.eval.coded = true;
    cfg.eval.rate = linkeval::CodeRate::Half;
  } else if (rate == "3/4") {
    cfg.eval.coded = true;
    cfg.eval.rate = linkeval::CodeRate::ThreeQuarter;
  } else if (rate == "none") {
    cfg.eval.coded = false;
  } else {
    throw ParseError(source +
                     ": field 'evaluation.coding_rate': expected 1/2, 3/4 or none, got '" +
                     rate + "'");
  }
  std::string bfs = r.gets("evaluation.beamformers", "zf,mmse");
  cfg.eval.beamformers.clear();
  for (const auto& tok : split_list(bfs)) {
    if (tok == "zf")
      cfg.eval.beamformers.push_back(linkeval::BeamformerKind::Zf);
    else if (tok == "mmse")
      cfg.eval.beamformers.push_back(linkeval::BeamformerKind::Mmse);
    else if (tok == "nnbf")
      cfg.eval.beamformers.push_back(linkeval::BeamformerKind::Nnbf);
    else if (tok == "mf")
      cfg.eval.beamformers.push_back(linkeval::BeamformerKind::MatchedFilter);
    else
      throw ParseError(source + ": field 'evaluation.beamformers': unknown beamformer '" +
                       tok + "'");
  }
  cfg.eval.pilot_len = r.geti("evaluation.pilot_len", 8);
  cfg.eval.sum_rate_channels = r.geti("evaluation.sum_rate_channels", 500);

  r.reject_unknown();
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  return parse_config_text(io::read_text_file(path), path);
}

void ExperimentConfig::validate() const {
  scenario.validate();
  model.validate();
  training.validate();
  if (model.M != scenario.M || model.N != scenario.N || model.L != scenario.L ||
      model.K != scenario.K)
    throw ConfigError("model grid does not match the scenario");
  if (!linkeval::valid_qam_order(eval.modulation))
    throw ConfigError("evaluation.modulation must be one of 4, 16, 64, 256");
  if (eval.trials < 1) throw ConfigError("evaluation.trials must be positive");
  if (eval.snr_db.empty()) throw ConfigError("evaluation.snr_db must not be empty");
  if (eval.beamformers.empty())
    throw ConfigError("evaluation.beamformers must not be empty");
  if (eval.pilot_len < scenario.N)
    throw ConfigError("evaluation.pilot_len must be at least the UE count");
  if (training.pilot_len < scenario.N)
    throw ConfigError("training.pilot_len must be at least the UE count");
  if (steps_per_stage < 1) throw ConfigError("training.steps_per_stage must be positive");
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "seed = " << seed << "\n";
  os << "out_dir = " << out_dir << "\n\n";
  os << "[scenario]\n";
  os << "M = " << scenario.M << "\nN = " << scenario.N << "\nL = " << scenario.L
     << "\nK = " << scenario.K << "\n";
  os << "paths = " << scenario.paths << "\n";
  os << "carrier_hz = " << num(scenario.carrier_hz) << "\n";
  os << "subcarrier_spacing_hz = " << num(scenario.subcarrier_spacing_hz) << "\n";
  os << "mobility = " << (scenario.max_speed_mps > 0.0 ? "on" : "off") << "\n";
  os << "max_speed = " << num(scenario.max_speed_mps > 0.0 ? scenario.max_speed_mps : 30.0)
     << "\n\n";
  os << "[model]\n";
  os << "depth = " << model.depth << "\nmodules = " << model.modules
     << "\nffn_expand = " << model.ffn_expand << "\nkernel = " << model.kernel << "\n\n";
  os << "[training]\n";
  os << "batch = " << training.batch << "\n";
  os << "steps_per_stage = " << steps_per_stage << "\n";
  os << "lr = " << num(training.lr) << "\n";
  os << "beta1 = " << num(training.beta1) << "\nbeta2 = " << num(training.beta2)
     << "\neps = " << num(training.eps) << "\n";
  os << "lookahead_k = " << training.lookahead_k << "\n";
  os << "lookahead_alpha = " << num(training.lookahead_alpha) << "\n";
  os << "loss_csi = " << (training.genie_loss ? "genie" : "estimate") << "\n";
  os << "pilot_len = " << training.pilot_len << "\n\n";
  os << "[evaluation]\n";
  os << "snr_db = ";
  for (size_t i = 0; i < eval.snr_db.size(); ++i)
    os << (i ? "," : "") << num(eval.snr_db[i]);
  os << "\n";
  os << "trials = " << eval.trials << "\n";
  os << "modulation = " << eval.modulation << "\n";
  os << "coding_rate = "
     << (!eval.coded ? "none"
                     : (eval.rate == linkeval::CodeRate::Half ? "1/2" : "3/4"))
     << "\n";
  os << "beamformers = ";
  for (size_t i = 0; i < eval.beamformers.size(); ++i)
    os << (i ? "," : "") << linkeval::beamformer_name(eval.beamformers[i]);
  os << "\n";
  os << "pilot_len = " << eval.pilot_len << "\n";
  os << "sum_rate_channels = " << eval.sum_rate_channels << "\n";
  return os.str();
}

std::string manifest_json(const std::string& command, const ExperimentConfig& cfg,
                          const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["artifact_version"] = kArtifactVersion;
  j["command"] = command;
  j["seed"] = cfg.seed;
  std::string text = cfg.to_text();
  j["config_hash"] = io::fnv1a_hex(text);
  j["config"] = text;
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_manifest(const std::string& manifest_path,
                                      std::string* command_out) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest " + manifest_path + ": " + e.what());
  }
  if (!j.contains("config") || !j.contains("config_hash"))
    throw ParseError("manifest " + manifest_path + " lacks an embedded config");
  std::string text = j["config"].get<std::string>();
  if (io::fnv1a_hex(text) != j["config_hash"].get<std::string>())
    throw ParseError("manifest " + manifest_path + " config hash mismatch");
  if (command_out && j.contains("command"))
    *command_out = j["command"].get<std::string>();
  return parse_config_text(text, manifest_path + "#config");
}

}  // namespace nnbf::cli
