#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "errors.hpp"

namespace genemoe {

using KeyValues = std::map<std::string, std::string>;

namespace kv {

inline std::string format(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format(std::uint64_t v) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }

inline std::string format(const std::vector<std::size_t>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::string format(const std::vector<double>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + format(v[i]);
    return s;
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& text)
{
    const std::string t = trim(text);
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || p != t.data() + t.size())
        throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
    return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& text)
{
    const std::string t = trim(text);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || p != t.data() + t.size())
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + text + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text)
{
    const std::string t = trim(text);
    if (t == "true" || t == "1" || t == "yes")
        return true;
    if (t == "false" || t == "0" || t == "no")
        return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + text + "'");
}

template <typename T, typename ParseOne>
std::vector<T> parse_list(const std::string& text, ParseOne parse_one)
{
    std::vector<T> out;
    const std::string t = trim(text);
    if (t.empty())
        return out;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(parse_one(item));
    return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text)
{
    return parse_list<std::size_t>(text, [&](const std::string& s) { return parse_uint(key, s); });
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& text)
{
    return parse_list<double>(text, [&](const std::string& s) { return parse_double(key, s); });
}

/// Reads typed values out of a KeyValues block and rejects unknown keys.
class Reader {
public:
    Reader(const KeyValues& values, std::string section) : values_(values), section_(std::move(section)) {}

    template <typename T>
    void read(const std::string& key, T& target)
    {
        seen_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end())
            return;
        const std::string name = section_ + "." + key;
        if constexpr (std::is_same_v<T, double>)
            target = parse_double(name, it->second);
        else if constexpr (std::is_same_v<T, bool>)
            target = parse_bool(name, it->second);
        else if constexpr (std::is_same_v<T, std::vector<std::size_t>>)
            target = parse_sizes(name, it->second);
        else if constexpr (std::is_same_v<T, std::vector<double>>)
            target = parse_doubles(name, it->second);
        else if constexpr (std::is_same_v<T, std::string>)
            target = trim(it->second);
        else if constexpr (std::is_same_v<T, std::optional<std::size_t>>)
            target = static_cast<std::size_t>(parse_uint(name, it->second));
        else
            target = static_cast<T>(parse_uint(name, it->second));
    }

    void finish() const
    {
        for (const auto& [k, v] : values_)
            if (!seen_.count(k))
                throw ConfigError("unknown key '" + section_ + "." + k + "'");
    }

private:
    const KeyValues& values_;
    std::string section_;
    std::set<std::string> seen_;
};

/// Canonical "key = value" text, one pair per line in key order.
inline std::string to_text(const KeyValues& values)
{
    std::string s;
    for (const auto& [k, v] : values)
        s += k + " = " + v + "\n";
    return s;
}

inline KeyValues from_text(const std::string& text)
{
    KeyValues out;
    std::istringstream is(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#')
            continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ParseError("line " + std::to_string(line_no) + ": expected 'key = value'");
        out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return out;
}

} // namespace kv

/// INI-style file: [section] headers followed by key = value lines.
using ConfigSections = std::map<std::string, KeyValues>;

inline ConfigSections read_config_file(const std::string& path)
{
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        if (e.line() == 0)
            throw IoError("cannot read config file " + path + ": " + e.message());
        throw ConfigError("config " + path + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    ConfigSections out;
    for (const auto& [section, body] : tree) {
        if (body.empty())
            throw ConfigError("config " + path + ": key '" + section + "' outside any [section]");
        for (const auto& [key, value] : body)
            out[section][key] = value.get_value<std::string>();
    }
    return out;
}

enum class EncoderKind { dense, moe, moe_moae };

inline std::string to_string(EncoderKind k)
{
    switch (k) {
    case EncoderKind::dense:
        return "dense";
    case EncoderKind::moe:
        return "moe";
    case EncoderKind::moe_moae:
        return "moe_moae";
    }
    return "";
}

inline EncoderKind parse_encoder_kind(const std::string& s)
{
    if (s == "dense")
        return EncoderKind::dense;
    if (s == "moe")
        return EncoderKind::moe;
    if (s == "moe_moae")
        return EncoderKind::moe_moae;
    throw ConfigError("unknown encoder kind '" + s + "' (expected dense, moe or moe_moae)");
}

/// Architecture and pre-training loss weights.
struct GeneMoeConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims{1024, 512};
    std::size_t n_experts = 8;
    std::size_t top_k = 2;
    std::size_t moae_experts = 4;
    std::size_t moae_top_k = 2;
    std::size_t token_count = 16;
    std::size_t latent_dim = 128;
    double dropout_rate = 0.2;
    double lambda_kl = 10.0;
    double lambda_l1 = 20.0;
    double lambda_balance = 10.0;
    double lambda_gp = 10.0;
    double noise_sigma = 0.2;
    std::vector<std::size_t> critic_hidden{512};
    EncoderKind encoder = EncoderKind::moe_moae;
    // Reconstruct the clean input instead of the noise-augmented one.
    bool reconstruct_clean = false;
    std::uint64_t init_seed = 0;

    void validate() const
    {
        if (input_dim == 0)
            throw ConfigError("model.input_dim must be positive");
        if (hidden_dims.empty())
            throw ConfigError("model.hidden_dims must list at least one width");
        for (auto h : hidden_dims)
            if (h == 0)
                throw ConfigError("model.hidden_dims entries must be positive");
        if (latent_dim == 0)
            throw ConfigError("model.latent_dim must be positive");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw ConfigError("model.dropout_rate must lie in [0, 1)");
        for (double l : {lambda_kl, lambda_l1, lambda_balance, lambda_gp, noise_sigma})
            if (!(l >= 0.0))
                throw ConfigError("loss weights and noise_sigma must be non-negative");
        if (encoder != EncoderKind::dense) {
            if (n_experts < 2 || top_k < 1 || top_k > n_experts)
                throw ConfigError("model: need n_experts >= 2 and 1 <= top_k <= n_experts");
        }
        if (encoder == EncoderKind::moe_moae) {
            if (moae_experts < 2 || moae_top_k < 1 || moae_top_k > moae_experts)
                throw ConfigError("model: need moae_experts >= 2 and 1 <= moae_top_k <= moae_experts");
            if (token_count == 0 || hidden_dims.back() % token_count != 0)
                throw ConfigError("model: last hidden width " + std::to_string(hidden_dims.back()) +
                                  " is not divisible by token_count " + std::to_string(token_count));
        }
        for (auto h : critic_hidden)
            if (h == 0)
                throw ConfigError("model.critic_hidden entries must be positive");
    }

    KeyValues to_key_values() const
    {
        return {
            {"input_dim", kv::format(std::uint64_t{input_dim})},
            {"hidden_dims", kv::format(hidden_dims)},
            {"n_experts", kv::format(std::uint64_t{n_experts})},
            {"top_k", kv::format(std::uint64_t{top_k})},
            {"moae_experts", kv::format(std::uint64_t{moae_experts})},
            {"moae_top_k", kv::format(std::uint64_t{moae_top_k})},
            {"token_count", kv::format(std::uint64_t{token_count})},
            {"latent_dim", kv::format(std::uint64_t{latent_dim})},
            {"dropout_rate", kv::format(dropout_rate)},
            {"lambda_kl", kv::format(lambda_kl)},
            {"lambda_l1", kv::format(lambda_l1)},
            {"lambda_balance", kv::format(lambda_balance)},
            {"lambda_gp", kv::format(lambda_gp)},
            {"noise_sigma", kv::format(noise_sigma)},
            {"critic_hidden", kv::format(critic_hidden)},
            {"encoder", to_string(encoder)},
            {"reconstruct_clean", kv::format(reconstruct_clean)},
            {"init_seed", kv::format(init_seed)},
        };
    }

    void apply(const KeyValues& values)
    {
        kv::Reader r(values, "model");
        r.read("input_dim", input_dim);
        r.read("hidden_dims", hidden_dims);
        r.read("n_experts", n_experts);
        r.read("top_k", top_k);
        r.read("moae_experts", moae_experts);
        r.read("moae_top_k", moae_top_k);
        r.read("token_count", token_count);
        r.read("latent_dim", latent_dim);
        r.read("dropout_rate", dropout_rate);
        r.read("lambda_kl", lambda_kl);
        r.read("lambda_l1", lambda_l1);
        r.read("lambda_balance", lambda_balance);
        r.read("lambda_gp", lambda_gp);
        r.read("noise_sigma", noise_sigma);
        r.read("critic_hidden", critic_hidden);
        std::string enc = to_string(encoder);
        r.read("encoder", enc);
        encoder = parse_encoder_kind(enc);
        r.read("reconstruct_clean", reconstruct_clean);
        r.read("init_seed", init_seed);
        r.finish();
    }

    friend bool operator==(const GeneMoeConfig&, const GeneMoeConfig&) = default;
};

/// Adversarial pre-training schedule.
struct TrainConfig {
    double learning_rate = 2e-4;
    std::size_t epochs = 200;
    std::size_t batch_size = 256;
    std::size_t critic_steps = 5;
    std::optional<std::size_t> decay_start_epoch; // epochs / 2 when unset
    double beta1 = 0.5;
    double beta2 = 0.9;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0; // 0 = only at the end
    std::string checkpoint_path;

    std::size_t decay_start() const { return decay_start_epoch.value_or(epochs / 2); }

    void validate() const
    {
        if (epochs < 1)
            throw ConfigError("training.epochs must be at least 1");
        if (batch_size < 2)
            throw ConfigError("training.batch_size must be at least 2");
        if (decay_start() > epochs)
            throw ConfigError("training.decay_start_epoch must not exceed epochs");
        if (!(learning_rate > 0.0))
            throw ConfigError("training.learning_rate must be positive");
    }

    void apply(const KeyValues& values)
    {
        kv::Reader r(values, "training");
        r.read("learning_rate", learning_rate);
        r.read("epochs", epochs);
        r.read("batch_size", batch_size);
        r.read("critic_steps", critic_steps);
        r.read("decay_start_epoch", decay_start_epoch);
        r.read("beta1", beta1);
        r.read("beta2", beta2);
        r.read("seed", seed);
        r.read("checkpoint_every", checkpoint_every);
        r.read("checkpoint_path", checkpoint_path);
        r.finish();
    }
};

/// Fine-tuning of a survival or classification head on the backbone.
struct FinetuneConfig {
    double learning_rate = 1e-3;
    std::size_t epochs = 100;
    std::size_t batch_size = 64; // classification only; Cox uses the full risk set
    bool freeze_backbone = false;
    double gamma = 2.0;
    double balance_weight = 0.0;
    double weight_decay = 0.0;
    std::size_t repeats = 5;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (epochs < 1 || batch_size < 2 || repeats < 1)
            throw ConfigError("finetune: epochs >= 1, batch_size >= 2 and repeats >= 1 required");
        if (!(learning_rate > 0.0) || gamma < 0.0 || balance_weight < 0.0 || weight_decay < 0.0)
            throw ConfigError("finetune: learning_rate > 0 and non-negative gamma/weights required");
    }

    void apply(const KeyValues& values)
    {
        kv::Reader r(values, "finetune");
        r.read("learning_rate", learning_rate);
        r.read("epochs", epochs);
        r.read("batch_size", batch_size);
        r.read("freeze_backbone", freeze_backbone);
        r.read("gamma", gamma);
        r.read("balance_weight", balance_weight);
        r.read("weight_decay", weight_decay);
        r.read("repeats", repeats);
        r.read("seed", seed);
        r.finish();
    }
};

} // namespace genemoe
