#include "curvelang/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "curvelang/corpus.hpp"
#include "curvelang/error.hpp"

namespace curvelang {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(ErrorCode::InvalidConfig, key + ": cannot parse '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw Error(ErrorCode::InvalidConfig, key + ": expected true or false, got '" + text + "'");
}

template <class T>
std::string format_number(T value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<T>(k, v);
          },
          [member](const RunConfig& c) { return format_number(c.*member); }};
}

template <class T, class Get>
Field number_at(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) {
            get(c) = parse_number<T>(k, v);
          },
          [get](const RunConfig& c) { return format_number(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field bool_at(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); },
          [get](const RunConfig& c) {
            return std::string(get(const_cast<RunConfig&>(c)) ? "true" : "false");
          }};
}

Field string_field(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return c.*member; }};
}

// Insertion order is the order keys are written back out.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("objective",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) {
                           c.model.objective = model::parse_objective(v);
                         },
                         [](const RunConfig& c) { return model::to_string(c.model.objective); }});
    t.emplace_back("identity_basis", bool_at([](RunConfig& c) -> bool& { return c.model.identity_basis; }));
    t.emplace_back("embed_dim", number_at<int>([](RunConfig& c) -> int& { return c.model.embed_dim; }));
    t.emplace_back("unit_norm", bool_at([](RunConfig& c) -> bool& { return c.model.unit_norm; }));
    t.emplace_back("separate_output",
                   bool_at([](RunConfig& c) -> bool& { return c.model.separate_output; }));
    t.emplace_back("anchor_weight",
                   number_at<double>([](RunConfig& c) -> double& { return c.model.anchor_weight; }));
    t.emplace_back("max_length", number_at<int>([](RunConfig& c) -> int& { return c.model.max_length; }));
    t.emplace_back("n_ratio", number_at<double>([](RunConfig& c) -> double& { return c.model.curve.n_ratio; }));
    // degree = r<ratio> or a plain integer for a fixed degree.
    t.emplace_back("degree",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                           if (!v.empty() && v[0] == 'r') {
                             c.model.curve.degree = DegreeRatio{parse_number<double>(k, v.substr(1))};
                           } else {
                             c.model.curve.degree = DegreeFixed{parse_number<int>(k, v)};
                           }
                         },
                         [](const RunConfig& c) {
                           if (const auto* r = std::get_if<DegreeRatio>(&c.model.curve.degree)) {
                             return "r" + format_number(r->value);
                           }
                           return format_number(std::get<DegreeFixed>(c.model.curve.degree).value);
                         }});
    t.emplace_back("min_degree", number_at<int>([](RunConfig& c) -> int& { return c.model.curve.min_degree; }));
    t.emplace_back("margin", number_at<double>([](RunConfig& c) -> double& { return c.model.curve.margin; }));
    t.emplace_back("k_curves", number_at<int>([](RunConfig& c) -> int& { return c.model.curve.k_curves; }));
    t.emplace_back("k_head", bool_at([](RunConfig& c) -> bool& { return c.model.k_head; }));
    t.emplace_back("scorer_hidden", number_at<int>([](RunConfig& c) -> int& { return c.model.scorer_hidden; }));
    t.emplace_back("layers", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.layers; }));
    t.emplace_back("heads", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.heads; }));
    t.emplace_back("d_model", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.d_model; }));
    t.emplace_back("d_ff", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.d_ff; }));
    t.emplace_back("dropout", number_at<double>([](RunConfig& c) -> double& { return c.model.backbone.dropout; }));
    t.emplace_back("time_dim", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.time_dim; }));
    t.emplace_back("diffusion_steps",
                   number_at<int>([](RunConfig& c) -> int& { return c.model.diffusion_steps; }));
    t.emplace_back("schedule",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) {
                           c.model.schedule = model::parse_schedule_kind(v);
                         },
                         [](const RunConfig& c) { return model::to_string(c.model.schedule); }});
    t.emplace_back("lr", number_at<double>([](RunConfig& c) -> double& { return c.adam.lr; }));
    t.emplace_back("beta1", number_at<double>([](RunConfig& c) -> double& { return c.adam.beta1; }));
    t.emplace_back("beta2", number_at<double>([](RunConfig& c) -> double& { return c.adam.beta2; }));
    t.emplace_back("adam_eps", number_at<double>([](RunConfig& c) -> double& { return c.adam.eps; }));
    t.emplace_back("seed", number_field(&RunConfig::seed));
    t.emplace_back("steps", number_field(&RunConfig::steps));
    t.emplace_back("batch_size", number_field(&RunConfig::batch_size));
    t.emplace_back("log_interval", number_field(&RunConfig::log_interval));
    t.emplace_back("corpus", string_field(&RunConfig::corpus));
    t.emplace_back("tokenizer", string_field(&RunConfig::tokenizer));
    t.emplace_back("max_len", number_field(&RunConfig::max_len));
    t.emplace_back("toy_lines", number_field(&RunConfig::toy_lines));
    t.emplace_back("toy_length", number_field(&RunConfig::toy_length));
    t.emplace_back("out", string_field(&RunConfig::out));
    t.emplace_back("sample_length", number_field(&RunConfig::sample_length));
    t.emplace_back("sample_steps", number_field(&RunConfig::sample_steps));
    t.emplace_back("n_samples", number_field(&RunConfig::n_samples));
    t.emplace_back("n_noise", number_at<int>([](RunConfig& c) -> int& { return c.probe.n_noise; }));
    t.emplace_back("dropout_p", number_at<double>([](RunConfig& c) -> double& { return c.probe.dropout_p; }));
    t.emplace_back("noise_scale",
                   number_at<double>([](RunConfig& c) -> double& { return c.probe.noise_scale; }));
    t.emplace_back("probe_step", number_at<int>([](RunConfig& c) -> int& { return c.probe.step; }));
    t.emplace_back("eval_size", number_field(&RunConfig::eval_size));
    return t;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields()) {
    if (name == key) return f;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  field(key).set(*this, key, trim(value));
}

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : fields()) out.push_back(name);
    return out;
  }();
  return names;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  model.validate();
  if (steps < 0) throw Error(ErrorCode::InvalidConfig, "steps must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be positive");
  if (log_interval < 1) throw Error(ErrorCode::InvalidConfig, "log_interval must be positive");
  if (!(adam.lr >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lr must be >= 0");
  data::parse_tokenizer(tokenizer);
  if (corpus.starts_with("toy:")) data::parse_toy_kind(corpus.substr(4));
  if (sample_steps < 1 || n_samples < 1 || sample_length < 2) {
    throw Error(ErrorCode::InvalidConfig, "sampling needs steps >= 1, samples >= 1, length >= 2");
  }
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, "line " + std::to_string(number) + ": expected key = value");
    }
    out[trim(std::string_view(body).substr(0, eq))] = trim(std::string_view(body).substr(eq + 1));
  }
  return out;
}

RunConfig run_config_from_text(const std::string& text) {
  RunConfig c;
  for (const auto& [k, v] : parse_key_values(text)) c.set(k, v);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot read config " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return run_config_from_text(buf.str());
}

}  // namespace curvelang
