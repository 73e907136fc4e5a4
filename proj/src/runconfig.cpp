#include "pyramidat/runconfig.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace pyramidat {

namespace {

struct KeyDef {
    const char* key;
    const char* def;
};

// The schema: every recognized key with its default. Order here is the order
// of the resolved config file.
const std::vector<KeyDef>& schema() {
    static const std::vector<KeyDef> defs = {
        {"schema_version", "1"},
        {"seed", "0"},
        {"out_dir", "out"},
        {"data.name", "synthetic"},
        {"data.root", ""},
        {"data.synthetic_train", "512"},
        {"data.synthetic_eval", "128"},
        {"data.synthetic_seed", "7"},
        {"data.train_limit", "0"},
        {"data.eval_limit", "0"},
        {"model.image_size", "32"},
        {"model.patch_size", "4"},
        {"model.embed_dim", "64"},
        {"model.depth", "6"},
        {"model.n_heads", "4"},
        {"model.mlp_dim", "128"},
        {"model.n_classes", "2"},
        {"model.in_channels", "3"},
        {"model.dropout_p", "0.1"},
        {"model.stochdepth_p", "0.1"},
        {"trainer.regime", "baseline"},
        {"trainer.lambda", "1.0"},
        {"trainer.weight_decay", "0.05"},
        {"trainer.base_lr", "0.001"},
        {"trainer.warmup_steps", "200"},
        {"trainer.total_steps", "2000"},
        {"trainer.batch_size", "128"},
        {"trainer.drop_mode", "matched"},
        {"trainer.checkpoint_every", "0"},
        {"trainer.threads", "1"},
        {"attack.scales", "[8,4,1]"},
        {"attack.multipliers", "[20,10,1]"},
        {"attack.eps", "[6/255,6/255,6/255]"},
        {"attack.step_size", "1/255"},
        {"attack.n_steps", "5"},
        {"attack.target_mode", "random_target"},
        {"attack.random_mode", "adversarial"},
        {"attack.samples", "8"},
        {"pixel.eps", "4/255"},
        {"pixel.step_size", "1/255"},
        {"pixel.n_steps", "5"},
        {"eval.suites", "[clean,corruption,whitebox]"},
        {"eval.batch_size", "256"},
        {"eval.max_images", "0"},
        {"eval.reference_checkpoint", ""},
        {"eval.corruption_tables", ""},
        {"analyze.samples", "256"},
        {"analyze.l2_norm", "2.0"},
        {"analyze.cutoffs", "[1,2,4,8,16,23]"},
        {"analyze.bands", "[low_pass,high_pass]"},
        {"analyze.sources", "[random_pixel,adv_pixel,random_pyramid,adv_pyramid]"},
    };
    return defs;
}

bool known_key(const std::string& key) {
    for (const auto& d : schema())
        if (key == d.key) return true;
    return false;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Accepts plain numbers and integer fractions like "6/255".
double parse_number(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    const auto slash = v.find('/');
    try {
        if (slash != std::string::npos) {
            const double num = std::stod(v.substr(0, slash));
            const double den = std::stod(v.substr(slash + 1));
            if (den == 0.0) throw std::invalid_argument("zero denominator");
            return num / den;
        }
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("invalid numeric value for key '" + key + "': " + raw);
    }
}

std::vector<std::string> split_list(const std::string& key, const std::string& raw) {
    std::string v = trim(raw);
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
        throw ConfigError("expected a [..] list for key '" + key + "': " + raw);
    v = v.substr(1, v.size() - 2);
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace

RunConfig::RunConfig() {
    for (const auto& d : schema()) values_[d.key] = d.def;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!known_key(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = trim(value);
}

RunConfig RunConfig::from_overrides(const std::vector<std::string>& overrides) {
    RunConfig c;
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be key=value: " + kv);
        c.set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path,
                               const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path.string());
    RunConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("malformed config line " + std::to_string(lineno) + ": " + t);
        c.set(trim(t.substr(0, eq)), t.substr(eq + 1));
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be key=value: " + kv);
        c.set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    if (c.get_int("schema_version") != 1)
        throw ConfigError("unsupported schema_version (expected 1)");
    return c;
}

long long RunConfig::get_int(const std::string& key) const {
    const double d = get_double(key);
    const long long i = static_cast<long long>(d);
    if (static_cast<double>(i) != d)
        throw ConfigError("expected an integer for key '" + key + "'");
    return i;
}

double RunConfig::get_double(const std::string& key) const {
    return parse_number(key, get_string(key));
}

std::string RunConfig::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

std::vector<long long> RunConfig::get_int_list(const std::string& key) const {
    std::vector<long long> out;
    for (const auto& item : split_list(key, get_string(key))) {
        const double d = parse_number(key, item);
        out.push_back(static_cast<long long>(d));
        if (static_cast<double>(out.back()) != d)
            throw ConfigError("expected integers in list for key '" + key + "'");
    }
    return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(key, get_string(key)))
        out.push_back(parse_number(key, item));
    return out;
}

std::vector<std::string> RunConfig::get_string_list(const std::string& key) const {
    return split_list(key, get_string(key));
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.image_size = static_cast<int>(get_int("model.image_size"));
    m.patch_size = static_cast<int>(get_int("model.patch_size"));
    m.embed_dim = static_cast<int>(get_int("model.embed_dim"));
    m.depth = static_cast<int>(get_int("model.depth"));
    m.n_heads = static_cast<int>(get_int("model.n_heads"));
    m.mlp_dim = static_cast<int>(get_int("model.mlp_dim"));
    m.n_classes = static_cast<int>(get_int("model.n_classes"));
    m.in_channels = static_cast<int>(get_int("model.in_channels"));
    m.dropout_p = static_cast<float>(get_double("model.dropout_p"));
    m.stochdepth_p = static_cast<float>(get_double("model.stochdepth_p"));
    m.validate();
    return m;
}

PyramidSpec RunConfig::attack_spec() const {
    PyramidSpec s;
    for (long long v : get_int_list("attack.scales")) s.scales.push_back(static_cast<int>(v));
    s.multipliers = get_double_list("attack.multipliers");
    s.eps = get_double_list("attack.eps");
    s.step_size = get_double("attack.step_size");
    s.n_steps = static_cast<int>(get_int("attack.n_steps"));
    const std::string tm = get_string("attack.target_mode");
    if (tm == "random_target")
        s.target_mode = TargetMode::random_target;
    else if (tm == "untargeted")
        s.target_mode = TargetMode::untargeted;
    else
        throw ConfigError("invalid attack.target_mode: " + tm);
    const std::string rm = get_string("attack.random_mode");
    if (rm == "adversarial")
        s.random_mode = RandomMode::adversarial;
    else if (rm == "random_sign")
        s.random_mode = RandomMode::random_sign;
    else
        throw ConfigError("invalid attack.random_mode: " + rm);
    s.validate();
    return s;
}

PixelSpec RunConfig::pixel_spec() const {
    PixelSpec p;
    p.eps = get_double("pixel.eps");
    p.step_size = get_double("pixel.step_size");
    p.n_steps = static_cast<int>(get_int("pixel.n_steps"));
    return p;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.regime = regime_from_string(get_string("trainer.regime"));
    t.lambda = get_double("trainer.lambda");
    t.weight_decay = get_double("trainer.weight_decay");
    t.base_lr = get_double("trainer.base_lr");
    t.warmup_steps = get_int("trainer.warmup_steps");
    t.total_steps = get_int("trainer.total_steps");
    t.batch_size = static_cast<int>(get_int("trainer.batch_size"));
    t.drop_mode = drop_mode_from_string(get_string("trainer.drop_mode"));
    t.checkpoint_every = get_int("trainer.checkpoint_every");
    t.threads = static_cast<int>(get_int("trainer.threads"));
    t.attack = attack_spec();
    t.pixel_attack = pixel_spec();
    t.seed = seed();
    t.validate();
    return t;
}

SyntheticOptions RunConfig::synthetic_options() const {
    SyntheticOptions opt;
    opt.n_train = static_cast<int>(get_int("data.synthetic_train"));
    opt.n_eval = static_cast<int>(get_int("data.synthetic_eval"));
    opt.seed = static_cast<std::uint64_t>(get_int("data.synthetic_seed"));
    return opt;
}

CorruptionTables RunConfig::corruption_tables() const {
    const std::string path = get_string("eval.corruption_tables");
    if (path.empty()) return CorruptionTables::v1();
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corruption tables: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("corrupt corruption tables file: " + path);
    return CorruptionTables::from_json(j);
}

namespace {
void limit_split(std::vector<std::uint8_t>& images, std::vector<int>& labels, long long limit,
                 std::size_t pixel_bytes) {
    if (limit > 0 && limit < static_cast<long long>(labels.size())) {
        labels.resize(static_cast<std::size_t>(limit));
        images.resize(static_cast<std::size_t>(limit) * pixel_bytes);
    }
}
}  // namespace

DatasetHandle RunConfig::load_data() const {
    DatasetHandle h =
        load_dataset(get_string("data.name"), get_string("data.root"), synthetic_options());
    limit_split(h.train_images, h.train_labels, get_int("data.train_limit"),
                h.shape.pixels());
    limit_split(h.eval_images, h.eval_labels, get_int("data.eval_limit"), h.shape.pixels());
    return h;
}

std::string RunConfig::resolved_text() const {
    std::string out =
        "# pyramidat resolved configuration (defaults expanded; schema v1)\n";
    for (const auto& d : schema()) {
        out += d.key;
        out += " = ";
        out += values_.at(d.key);
        out += "\n";
    }
    return out;
}

void RunConfig::write_resolved(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write resolved config: " + path.string());
    out << resolved_text();
}

Regime regime_from_string(const std::string& s) {
    if (s == "baseline") return Regime::baseline;
    if (s == "pixel_at") return Regime::pixel_at;
    if (s == "pyramid_at") return Regime::pyramid_at;
    if (s == "random_pixel") return Regime::random_pixel;
    if (s == "random_pyramid") return Regime::random_pyramid;
    throw ConfigError("invalid trainer.regime: " + s);
}

const char* regime_to_string(Regime r) {
    switch (r) {
        case Regime::baseline: return "baseline";
        case Regime::pixel_at: return "pixel_at";
        case Regime::pyramid_at: return "pyramid_at";
        case Regime::random_pixel: return "random_pixel";
        case Regime::random_pyramid: return "random_pyramid";
    }
    return "?";
}

DropMode drop_mode_from_string(const std::string& s) {
    if (s == "matched") return DropMode::matched;
    if (s == "unmatched") return DropMode::unmatched;
    if (s == "disabled_adv") return DropMode::disabled_adv;
    if (s == "disabled_all") return DropMode::disabled_all;
    throw ConfigError("invalid trainer.drop_mode: " + s);
}

const char* drop_mode_to_string(DropMode m) {
    switch (m) {
        case DropMode::matched: return "matched";
        case DropMode::unmatched: return "unmatched";
        case DropMode::disabled_adv: return "disabled_adv";
        case DropMode::disabled_all: return "disabled_all";
    }
    return "?";
}

}  // namespace pyramidat
