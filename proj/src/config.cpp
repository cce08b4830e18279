#include "curlip/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <variant>

namespace curlip {

using nlohmann::json;

json RunConfig::to_json() const {
  return json{{"encoder",
               {{"n_layers", encoder.n_layers},
                {"hidden", encoder.hidden},
                {"n_heads", encoder.n_heads},
                {"ffn_mult", encoder.ffn_mult},
                {"max_len", encoder.max_len},
                {"vocab_size", encoder.vocab_size},
                {"dropout", encoder.dropout}}},
              {"clmsa",
               {{"channel_pyramid", clmsa.channel_pyramid},
                {"pool_p", clmsa.pool_p},
                {"pool_q", clmsa.pool_q},
                {"proj_dim", clmsa.proj_dim},
                {"gmlp_expansion", clmsa.gmlp_expansion}}},
              {"bmmc",
               {{"block_size", bmmc.block_size},
                {"alpha_min", bmmc.alpha_min},
                {"block_dropout", bmmc.block_dropout},
                {"n_classes", bmmc.n_classes},
                {"joint_dim", bmmc.joint_dim},
                {"ip_dim", bmmc.ip_dim}}},
              {"train",
               {{"batch_size", train.batch_size},
                {"lr", train.lr},
                {"weight_decay", train.weight_decay},
                {"epochs", train.epochs},
                {"pretrain_steps", train.pretrain_steps},
                {"lambda", train.lambda_tacl},
                {"tau", train.tau},
                {"mask_rate", train.mask_rate},
                {"val_fraction", train.val_fraction}}},
              {"eval", {{"threshold", eval.threshold}}}};
}

namespace {

template <typename V>
void read_field(const json& section, const char* key, V& out,
                std::map<std::string, bool>& seen) {
  if (!section.contains(key)) throw ConfigError(std::string("missing config key: ") + key);
  section.at(key).get_to(out);
  seen[key] = true;
}

void reject_unknown(const json& section, const std::map<std::string, bool>& seen,
                    const std::string& section_name) {
  for (auto it = section.begin(); it != section.end(); ++it)
    if (!seen.count(it.key()))
      throw ConfigError("unknown config key: " + section_name + "." + it.key());
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  std::map<std::string, bool> top_seen;
  auto section = [&](const char* name) -> const json& {
    if (!j.contains(name)) throw ConfigError(std::string("missing config section: ") + name);
    top_seen[name] = true;
    return j.at(name);
  };

  {
    const json& s = section("encoder");
    std::map<std::string, bool> seen;
    read_field(s, "n_layers", c.encoder.n_layers, seen);
    read_field(s, "hidden", c.encoder.hidden, seen);
    read_field(s, "n_heads", c.encoder.n_heads, seen);
    read_field(s, "ffn_mult", c.encoder.ffn_mult, seen);
    read_field(s, "max_len", c.encoder.max_len, seen);
    read_field(s, "vocab_size", c.encoder.vocab_size, seen);
    read_field(s, "dropout", c.encoder.dropout, seen);
    reject_unknown(s, seen, "encoder");
  }
  {
    const json& s = section("clmsa");
    std::map<std::string, bool> seen;
    read_field(s, "channel_pyramid", c.clmsa.channel_pyramid, seen);
    read_field(s, "pool_p", c.clmsa.pool_p, seen);
    read_field(s, "pool_q", c.clmsa.pool_q, seen);
    read_field(s, "proj_dim", c.clmsa.proj_dim, seen);
    read_field(s, "gmlp_expansion", c.clmsa.gmlp_expansion, seen);
    reject_unknown(s, seen, "clmsa");
  }
  {
    const json& s = section("bmmc");
    std::map<std::string, bool> seen;
    read_field(s, "block_size", c.bmmc.block_size, seen);
    read_field(s, "alpha_min", c.bmmc.alpha_min, seen);
    read_field(s, "block_dropout", c.bmmc.block_dropout, seen);
    read_field(s, "n_classes", c.bmmc.n_classes, seen);
    read_field(s, "joint_dim", c.bmmc.joint_dim, seen);
    read_field(s, "ip_dim", c.bmmc.ip_dim, seen);
    reject_unknown(s, seen, "bmmc");
  }
  {
    const json& s = section("train");
    std::map<std::string, bool> seen;
    read_field(s, "batch_size", c.train.batch_size, seen);
    read_field(s, "lr", c.train.lr, seen);
    read_field(s, "weight_decay", c.train.weight_decay, seen);
    read_field(s, "epochs", c.train.epochs, seen);
    read_field(s, "pretrain_steps", c.train.pretrain_steps, seen);
    read_field(s, "lambda", c.train.lambda_tacl, seen);
    read_field(s, "tau", c.train.tau, seen);
    read_field(s, "mask_rate", c.train.mask_rate, seen);
    read_field(s, "val_fraction", c.train.val_fraction, seen);
    reject_unknown(s, seen, "train");
  }
  {
    const json& s = section("eval");
    std::map<std::string, bool> seen;
    read_field(s, "threshold", c.eval.threshold, seen);
    reject_unknown(s, seen, "eval");
  }
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!top_seen.count(it.key())) throw ConfigError("unknown config section: " + it.key());
  c.validate();
  return c;
}

namespace {

using FieldValue = std::variant<int64_t, double, bool, std::string, std::vector<int>>;

FieldValue parse_value(const std::string& raw, const std::string& where) {
  std::string s = raw;
  // trim
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  if (b == std::string::npos) throw ConfigError("empty value for " + where);
  s = s.substr(b, e - b + 1);

  if (s == "true") return true;
  if (s == "false") return false;
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  if (s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated array for " + where);
    std::vector<int> items;
    std::string body = s.substr(1, s.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        items.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw ConfigError("bad array element for " + where + ": '" + item + "'");
      }
    }
    return items;
  }
  try {
    if (s.find_first_of(".eE") != std::string::npos) return std::stod(s);
    return (int64_t)std::stoll(s);
  } catch (const std::exception&) {
    throw ConfigError("cannot parse value for " + where + ": '" + s + "'");
  }
}

int as_int(const FieldValue& v, const std::string& where) {
  if (auto p = std::get_if<int64_t>(&v)) return (int)*p;
  throw ConfigError(where + " expects an integer");
}
double as_double(const FieldValue& v, const std::string& where) {
  if (auto p = std::get_if<double>(&v)) return *p;
  if (auto p = std::get_if<int64_t>(&v)) return (double)*p;
  throw ConfigError(where + " expects a number");
}
std::vector<int> as_int_list(const FieldValue& v, const std::string& where) {
  if (auto p = std::get_if<std::vector<int>>(&v)) return *p;
  throw ConfigError(where + " expects an integer array");
}

}  // namespace

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);

  using Setter = std::function<void(RunConfig&, const FieldValue&, const std::string&)>;
  static const std::map<std::string, Setter> setters = {
      {"encoder.n_layers", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.n_layers = as_int(v, w); }},
      {"encoder.hidden", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.hidden = as_int(v, w); }},
      {"encoder.n_heads", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.n_heads = as_int(v, w); }},
      {"encoder.ffn_mult", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.ffn_mult = as_int(v, w); }},
      {"encoder.max_len", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.max_len = as_int(v, w); }},
      {"encoder.vocab_size", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.vocab_size = as_int(v, w); }},
      {"encoder.dropout", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.encoder.dropout = as_double(v, w); }},
      {"clmsa.channel_pyramid", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.clmsa.channel_pyramid = as_int_list(v, w); }},
      {"clmsa.pool_p", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.clmsa.pool_p = as_int(v, w); }},
      {"clmsa.pool_q", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.clmsa.pool_q = as_int(v, w); }},
      {"clmsa.proj_dim", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.clmsa.proj_dim = as_int(v, w); }},
      {"clmsa.gmlp_expansion", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.clmsa.gmlp_expansion = as_int(v, w); }},
      {"bmmc.block_size", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.bmmc.block_size = as_int(v, w); }},
      {"bmmc.alpha_min", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.bmmc.alpha_min = as_double(v, w); }},
      {"bmmc.block_dropout", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.bmmc.block_dropout = as_double(v, w); }},
      {"bmmc.n_classes", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.bmmc.n_classes = as_int(v, w); }},
      {"bmmc.joint_dim", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.bmmc.joint_dim = as_int(v, w); }},
      {"bmmc.ip_dim", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.bmmc.ip_dim = as_int(v, w); }},
      {"train.batch_size", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.batch_size = as_int(v, w); }},
      {"train.lr", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.lr = as_double(v, w); }},
      {"train.weight_decay", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.weight_decay = as_double(v, w); }},
      {"train.epochs", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.epochs = as_int(v, w); }},
      {"train.pretrain_steps", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.pretrain_steps = as_int(v, w); }},
      {"train.lambda", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.lambda_tacl = as_double(v, w); }},
      {"train.tau", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.tau = as_double(v, w); }},
      {"train.mask_rate", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.mask_rate = as_double(v, w); }},
      {"train.val_fraction", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.train.val_fraction = as_double(v, w); }},
      {"eval.threshold", [](RunConfig& c, const FieldValue& v, const std::string& w) { c.eval.threshold = as_double(v, w); }},
  };

  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t");
    line = line.substr(b, e - b + 1);

    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(path + ":" + std::to_string(lineno) + ": bad section header");
      section = line.substr(1, line.size() - 2);
      if (section != "encoder" && section != "clmsa" && section != "bmmc" &&
          section != "train" && section != "eval")
        throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown section [" + section +
                          "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = line.substr(0, eq);
    const auto kb = key.find_first_not_of(" \t");
    const auto ke = key.find_last_not_of(" \t");
    key = key.substr(kb, ke - kb + 1);
    if (section.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": key outside any section");
    const std::string full = section + "." + key;
    auto it = setters.find(full);
    if (it == setters.end())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key " + full);
    it->second(*this, parse_value(line.substr(eq + 1), full), full);
  }
  validate();
}

}  // namespace curlip
