#pragma once

// Run configuration in a small TOML subset: [section] tables, `key = value`
// with strings, integers, floats, booleans and one-line arrays, `#` comments.
// Unknown sections and keys are rejected with their line number.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "bnnser/csv.hpp"
#include "bnnser/dataset.hpp"
#include "bnnser/errors.hpp"
#include "bnnser/model.hpp"

namespace bnnser {

namespace toml {

struct Value {
    std::variant<std::string, std::int64_t, double, bool, std::vector<Value>> v;
    std::size_t line = 0;
};

using Table = std::map<std::string, Value>;
using Document = std::map<std::string, Table>;  // "" holds keys before the first header

namespace detail {

class Parser {
public:
    Parser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

    Value value() {
        skip_ws();
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '"') return {string(), line_};
        if (c == '[') return {array(), line_};
        if (s_.compare(pos_, 4, "true") == 0) {
            pos_ += 4;
            return {true, line_};
        }
        if (s_.compare(pos_, 5, "false") == 0) {
            pos_ += 5;
            return {false, line_};
        }
        return number();
    }

    void expect_end() {
        skip_ws();
        if (pos_ != s_.size()) fail("unexpected text after value");
    }

private:
    [[noreturn]] void fail(const std::string& what) const { throw FormatError("config: " + what, line_); }

    void skip_ws() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }

    std::string string() {
        ++pos_;
        std::string out;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            char c = s_[pos_++];
            if (c == '\\') {
                if (pos_ >= s_.size()) fail("unterminated escape");
                const char e = s_[pos_++];
                c = e == 'n' ? '\n' : e == 't' ? '\t' : e;
                if (e != 'n' && e != 't' && e != '"' && e != '\\') fail(std::string("unsupported escape \\") + e);
            }
            out += c;
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return out;
    }

    std::vector<Value> array() {
        ++pos_;
        std::vector<Value> out;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return out;
        }
        while (true) {
            out.push_back(value());
            skip_ws();
            if (pos_ >= s_.size()) fail("unterminated array");
            if (s_[pos_] == ']') {
                ++pos_;
                return out;
            }
            if (s_[pos_] != ',') fail("expected ',' or ']' in array");
            ++pos_;
        }
    }

    Value number() {
        std::size_t end = pos_;
        while (end < s_.size() && s_[end] != ',' && s_[end] != ']' && s_[end] != ' ' && s_[end] != '\t') ++end;
        std::string tok(s_.substr(pos_, end - pos_));
        std::erase(tok, '_');
        if (tok.empty()) fail("missing value");
        const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
        const char* b = tok.data() + (tok[0] == '+' ? 1 : 0);
        const char* e = tok.data() + tok.size();
        pos_ = end;
        if (is_float) {
            double d = 0;
            auto [p, ec] = std::from_chars(b, e, d);
            if (ec != std::errc() || p != e) fail("malformed number '" + tok + "'");
            return {d, line_};
        }
        std::int64_t i = 0;
        auto [p, ec] = std::from_chars(b, e, i);
        if (ec != std::errc() || p != e) fail("malformed value '" + tok + "'");
        return {i, line_};
    }

    std::string_view s_;
    std::size_t line_;
    std::size_t pos_ = 0;
};

inline std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
        if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

}  // namespace detail

inline Document parse(std::istream& in) {
    Document doc;
    std::string section, raw;
    std::size_t lineno = 0;
    doc[section];
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line(csv::trim(detail::strip_comment(raw)));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) throw FormatError("config: malformed section header", lineno);
            section = std::string(csv::trim(std::string_view(line).substr(1, line.size() - 2)));
            if (doc.count(section) && section != "") throw FormatError("config: duplicate section [" + section + "]", lineno);
            doc[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config: expected key = value", lineno);
        const std::string key(csv::trim(std::string_view(line).substr(0, eq)));
        if (key.empty()) throw FormatError("config: empty key", lineno);
        detail::Parser p(std::string_view(line).substr(eq + 1), lineno);
        Value v = p.value();
        p.expect_end();
        if (!doc[section].emplace(key, std::move(v)).second)
            throw FormatError("config: duplicate key '" + key + "'", lineno);
    }
    return doc;
}

inline Document parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file " + path.string());
    return parse(in);
}

inline std::string render(double v) {
    auto s = csv::format_double(v);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

}  // namespace toml

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

struct PathsConfig {
    std::string corpus_dir = "corpus";
    std::string checkpoint_dir = "checkpoints";
    std::string report_dir = "reports";
};

struct RunConfig {
    CorpusSpec corpus;
    ModelConfig model;
    PathsConfig paths;
    std::vector<std::string> compare_systems{"mu", "lu"};
};

namespace config_detail {

struct Reader {
    const toml::Table& table;
    std::string section;

    [[noreturn]] void fail(const toml::Value& v, const std::string& key, const std::string& want) const {
        throw FormatError("config: [" + section + "] " + key + " must be " + want, v.line);
    }

    const toml::Value* find(const std::string& key) const {
        auto it = table.find(key);
        return it == table.end() ? nullptr : &it->second;
    }

    void get(const std::string& key, double& out) const {
        if (auto* v = find(key)) {
            if (auto* d = std::get_if<double>(&v->v))
                out = *d;
            else if (auto* i = std::get_if<std::int64_t>(&v->v))
                out = static_cast<double>(*i);
            else
                fail(*v, key, "a number");
        }
    }
    void get(const std::string& key, std::size_t& out) const {
        if (auto* v = find(key)) {
            auto* i = std::get_if<std::int64_t>(&v->v);
            if (!i || *i < 0) fail(*v, key, "a non-negative integer");
            out = static_cast<std::size_t>(*i);
        }
    }
    void get(const std::string& key, std::uint64_t& out, int) const {
        if (auto* v = find(key)) {
            auto* i = std::get_if<std::int64_t>(&v->v);
            if (!i || *i < 0) fail(*v, key, "a non-negative integer");
            out = static_cast<std::uint64_t>(*i);
        }
    }
    void get(const std::string& key, std::string& out) const {
        if (auto* v = find(key)) {
            auto* s = std::get_if<std::string>(&v->v);
            if (!s) fail(*v, key, "a string");
            out = *s;
        }
    }
    void get(const std::string& key, std::vector<std::size_t>& out, std::size_t n) const {
        if (auto* v = find(key)) {
            auto* a = std::get_if<std::vector<toml::Value>>(&v->v);
            if (!a || a->size() != n) fail(*v, key, "an array of " + std::to_string(n) + " integers");
            out.clear();
            for (const auto& e : *a) {
                auto* i = std::get_if<std::int64_t>(&e.v);
                if (!i || *i < 0) fail(*v, key, "an array of non-negative integers");
                out.push_back(static_cast<std::size_t>(*i));
            }
        }
    }
    void get(const std::string& key, std::vector<std::string>& out) const {
        if (auto* v = find(key)) {
            auto* a = std::get_if<std::vector<toml::Value>>(&v->v);
            if (!a) fail(*v, key, "an array of strings");
            out.clear();
            for (const auto& e : *a) {
                auto* s = std::get_if<std::string>(&e.v);
                if (!s) fail(*v, key, "an array of strings");
                out.push_back(*s);
            }
        }
    }
    void get(const std::string& key, nn::Range& out) const {
        if (auto* v = find(key)) {
            auto* a = std::get_if<std::vector<toml::Value>>(&v->v);
            if (!a || a->size() != 2) fail(*v, key, "a two-element [lo, hi] array");
            double lohi[2];
            for (int k = 0; k < 2; ++k) {
                const auto& e = (*a)[static_cast<std::size_t>(k)];
                if (auto* d = std::get_if<double>(&e.v))
                    lohi[k] = *d;
                else if (auto* i = std::get_if<std::int64_t>(&e.v))
                    lohi[k] = static_cast<double>(*i);
                else
                    fail(*v, key, "a two-element [lo, hi] array");
            }
            out = {lohi[0], lohi[1]};
        }
    }
};

inline const std::map<std::string, std::vector<std::string>>& known_keys() {
    static const std::map<std::string, std::vector<std::string>> keys{
        {"corpus", {"n_train", "n_dev", "duration_s", "annotators", "seed", "target_mean_of_m", "target_mean_of_s"}},
        {"model",
         {"system", "conv_kernels", "conv_channels", "conv_pools", "lstm_layers", "lstm_hidden", "head_widths",
          "window_frames", "prior_mean", "prior_std", "mu_init", "rho_init"}},
        {"train",
         {"alpha", "dropout", "learning_rate", "batch_size", "seq_len", "epochs", "n_train", "n_infer", "sigma_obs",
          "median_window", "seed"}},
        {"paths", {"corpus_dir", "checkpoint_dir", "report_dir"}},
        {"compare", {"systems"}},
    };
    return keys;
}

}  // namespace config_detail

inline RunConfig run_config_from(const toml::Document& doc) {
    using config_detail::Reader;
    const auto& known = config_detail::known_keys();
    for (const auto& [section, table] : doc) {
        if (section.empty()) {
            if (!table.empty())
                throw FormatError("config: key '" + table.begin()->first + "' outside any section",
                                  table.begin()->second.line);
            continue;
        }
        auto it = known.find(section);
        if (it == known.end()) {
            const std::size_t line = table.empty() ? 0 : table.begin()->second.line;
            throw FormatError("config: unknown section [" + section + "]", line);
        }
        for (const auto& [key, value] : table)
            if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
                throw FormatError("config: unknown key '" + key + "' in [" + section + "]", value.line);
    }
    static const toml::Table empty;
    auto table = [&](const char* s) -> const toml::Table& {
        auto it = doc.find(s);
        return it == doc.end() ? empty : it->second;
    };

    RunConfig rc;
    {
        Reader r{table("corpus"), "corpus"};
        auto& c = rc.corpus;
        r.get("n_train", c.n_train);
        r.get("n_dev", c.n_dev);
        r.get("duration_s", c.duration_s);
        r.get("annotators", c.annotators);
        r.get("seed", c.seed, 0);
        r.get("target_mean_of_m", c.target_mean_of_m);
        r.get("target_mean_of_s", c.target_mean_of_s);
    }
    {
        Reader r{table("model"), "model"};
        auto& m = rc.model;
        std::string sys = system_name(m.system);
        r.get("system", sys);
        m.system = parse_system(sys);
        std::vector<std::size_t> k, ch, p;
        for (const auto& c : m.conv) k.push_back(c.kernel), ch.push_back(c.channels), p.push_back(c.pool);
        r.get("conv_kernels", k, 3);
        r.get("conv_channels", ch, 3);
        r.get("conv_pools", p, 3);
        for (std::size_t i = 0; i < 3; ++i) m.conv[i] = {k[i], ch[i], p[i]};
        r.get("lstm_layers", m.lstm_layers);
        r.get("lstm_hidden", m.lstm_hidden);
        r.get("head_widths", m.head_widths, 2);
        r.get("window_frames", m.window_frames);
        r.get("prior_mean", m.prior_mean);
        r.get("prior_std", m.prior_std);
        r.get("mu_init", m.mu_init);
        r.get("rho_init", m.rho_init);
    }
    {
        Reader r{table("train"), "train"};
        auto& m = rc.model;
        r.get("alpha", m.alpha);
        r.get("dropout", m.dropout);
        r.get("learning_rate", m.learning_rate);
        r.get("batch_size", m.batch_size);
        r.get("seq_len", m.seq_len);
        r.get("epochs", m.epochs);
        r.get("n_train", m.n_train);
        r.get("n_infer", m.n_infer);
        r.get("sigma_obs", m.sigma_obs);
        r.get("median_window", m.median_window);
        r.get("seed", m.seed, 0);
    }
    {
        Reader r{table("paths"), "paths"};
        r.get("corpus_dir", rc.paths.corpus_dir);
        r.get("checkpoint_dir", rc.paths.checkpoint_dir);
        r.get("report_dir", rc.paths.report_dir);
    }
    {
        Reader r{table("compare"), "compare"};
        r.get("systems", rc.compare_systems);
        for (const auto& s : rc.compare_systems) (void)parse_system(s);
    }
    rc.corpus.validate();
    rc.model.validate();
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from(toml::parse_file(path)); }

inline RunConfig parse_run_config(const std::string& text) {
    std::istringstream in(text);
    return run_config_from(toml::parse(in));
}

namespace config_detail {

inline std::string quoted(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out += c;
    }
    return out + "\"";
}

template <class T>
std::string int_array(const std::vector<T>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "]";
}

}  // namespace config_detail

/// [model] and [train] tables. With `for_hash`, the per-command fields
/// (system, alpha) are left out so they do not count as a config change.
inline std::string render_model_config(const ModelConfig& m, bool for_hash = false) {
    using namespace config_detail;
    using toml::render;
    std::ostringstream o;
    std::vector<std::size_t> k, ch, p;
    for (const auto& c : m.conv) k.push_back(c.kernel), ch.push_back(c.channels), p.push_back(c.pool);
    o << "[model]\n";
    if (!for_hash) o << "system = " << quoted(system_name(m.system)) << '\n';
    o << "conv_kernels = " << int_array(k) << '\n'
      << "conv_channels = " << int_array(ch) << '\n'
      << "conv_pools = " << int_array(p) << '\n'
      << "lstm_layers = " << m.lstm_layers << '\n'
      << "lstm_hidden = " << m.lstm_hidden << '\n'
      << "head_widths = " << int_array(m.head_widths) << '\n'
      << "window_frames = " << m.window_frames << '\n'
      << "prior_mean = " << render(m.prior_mean) << '\n'
      << "prior_std = " << render(m.prior_std) << '\n'
      << "mu_init = [" << render(m.mu_init.lo) << ", " << render(m.mu_init.hi) << "]\n"
      << "rho_init = [" << render(m.rho_init.lo) << ", " << render(m.rho_init.hi) << "]\n\n"
      << "[train]\n";
    if (!for_hash) o << "alpha = " << render(m.alpha) << '\n';
    o << "dropout = " << render(m.dropout) << '\n'
      << "learning_rate = " << render(m.learning_rate) << '\n'
      << "batch_size = " << m.batch_size << '\n'
      << "seq_len = " << m.seq_len << '\n'
      << "epochs = " << m.epochs << '\n'
      << "n_train = " << m.n_train << '\n'
      << "n_infer = " << m.n_infer << '\n'
      << "sigma_obs = " << render(m.sigma_obs) << '\n'
      << "median_window = " << m.median_window << '\n'
      << "seed = " << m.seed << '\n';
    return o.str();
}

inline std::string render_run_config(const RunConfig& rc) {
    using namespace config_detail;
    using toml::render;
    std::ostringstream o;
    const auto& c = rc.corpus;
    o << "[corpus]\n"
      << "n_train = " << c.n_train << '\n'
      << "n_dev = " << c.n_dev << '\n'
      << "duration_s = " << render(c.duration_s) << '\n'
      << "annotators = " << c.annotators << '\n'
      << "seed = " << c.seed << '\n'
      << "target_mean_of_m = " << render(c.target_mean_of_m) << '\n'
      << "target_mean_of_s = " << render(c.target_mean_of_s) << "\n\n"
      << render_model_config(rc.model) << '\n'
      << "[paths]\n"
      << "corpus_dir = " << quoted(rc.paths.corpus_dir) << '\n'
      << "checkpoint_dir = " << quoted(rc.paths.checkpoint_dir) << '\n'
      << "report_dir = " << quoted(rc.paths.report_dir) << "\n\n"
      << "[compare]\n"
      << "systems = [";
    for (std::size_t i = 0; i < rc.compare_systems.size(); ++i) o << (i ? ", " : "") << quoted(rc.compare_systems[i]);
    o << "]\n";
    return o.str();
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t config_hash(const ModelConfig& m) { return fnv1a(render_model_config(m, true)); }

inline ModelConfig parse_model_config(const std::string& text) { return parse_run_config(text).model; }

inline constexpr const char* kEffectiveConfigName = "config.effective.toml";

inline void echo_config(const std::filesystem::path& dir, const RunConfig& rc) {
    std::ofstream out(dir / kEffectiveConfigName);
    if (!out) throw Error("cannot write " + (dir / kEffectiveConfigName).string());
    out << render_run_config(rc);
}

}  // namespace bnnser
