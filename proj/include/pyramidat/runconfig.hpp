#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pyramidat/dataio.hpp"
#include "pyramidat/evaluator.hpp"
#include "pyramidat/trainer.hpp"
#include "pyramidat/vit.hpp"

namespace pyramidat {

/// Parsed and validated run configuration. Loaded from a plain-text file of
/// `section.key = value` lines (see configs/base.cfg for the schema), with
/// `--set key=value` overrides applied on top. Unknown keys are rejected;
/// every run writes the fully resolved config next to its outputs.
class RunConfig {
  public:
    /// Parses a config file. Throws ConfigError naming any unknown key or
    /// malformed line; DataError when the file cannot be read.
    static RunConfig from_file(const std::filesystem::path& path,
                               const std::vector<std::string>& overrides = {});

    /// Defaults plus overrides only (no file).
    static RunConfig from_overrides(const std::vector<std::string>& overrides);

    // Typed accessors over the resolved key/value store.
    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    std::vector<long long> get_int_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<std::string> get_string_list(const std::string& key) const;

    void set(const std::string& key, const std::string& value);

    ModelConfig model_config() const;
    TrainConfig train_config() const;
    PyramidSpec attack_spec() const;
    PixelSpec pixel_spec() const;
    SyntheticOptions synthetic_options() const;
    CorruptionTables corruption_tables() const;

    /// Loads the dataset named by data.name, honoring data.root and the
    /// PYRAMIDAT_DATA_ROOT fallback, then applies split limits.
    DatasetHandle load_data() const;

    /// The fully resolved config (all keys, defaults expanded) in file form.
    std::string resolved_text() const;
    void write_resolved(const std::filesystem::path& path) const;

    std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }
    std::string out_dir() const { return get_string("out_dir"); }

  private:
    RunConfig();
    std::map<std::string, std::string> values_;
};

Regime regime_from_string(const std::string& s);
const char* regime_to_string(Regime r);
DropMode drop_mode_from_string(const std::string& s);
const char* drop_mode_to_string(DropMode m);

}  // namespace pyramidat
