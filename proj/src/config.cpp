#include "cmrssl/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cmrssl/errors.hpp"
#include "cmrssl/seed.hpp"

namespace cmrssl::config {

namespace pt = boost::property_tree;

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T v{};
    in >> v;
    if (in.fail() || !(in >> std::ws).eof()) throw BadConfig(fmt::format("{}: '{}' is not a number", key, text));
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw BadConfig(fmt::format("{}: '{}' is not a boolean", key, text));
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

struct Binding {
    std::string section, key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Binding number(std::string section, std::string key, Access access) {
    const std::string full = section + "." + key;
    return {std::move(section), std::move(key),
            [access](const RunConfig& c) { return fmt::format("{}", access(const_cast<RunConfig&>(c))); },
            [access, full](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(full, v); }};
}

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table = [] {
        std::vector<Binding> b;
        // phantom
        b.push_back(number<std::uint64_t>("phantom", "seed", [](RunConfig& c) -> auto& { return c.data_seed; }));
        b.push_back(number<double>("phantom", "lv_radius", [](RunConfig& c) -> auto& { return c.cohort.base.lv_radius; }));
        b.push_back(number<double>("phantom", "lv_length", [](RunConfig& c) -> auto& { return c.cohort.base.lv_length; }));
        b.push_back(number<double>("phantom", "myo_thickness", [](RunConfig& c) -> auto& { return c.cohort.base.myo_thickness; }));
        b.push_back(number<double>("phantom", "rv_offset", [](RunConfig& c) -> auto& { return c.cohort.base.rv_offset; }));
        b.push_back(number<double>("phantom", "atrial_size", [](RunConfig& c) -> auto& { return c.cohort.base.atrial_size; }));
        b.push_back(number<double>("phantom", "noise_sigma", [](RunConfig& c) -> auto& { return c.cohort.base.noise_sigma; }));
        b.push_back(number<int>("phantom", "grid_size", [](RunConfig& c) -> auto& { return c.cohort.base.grid_size; }));
        b.push_back(number<double>("phantom", "grid_spacing", [](RunConfig& c) -> auto& { return c.cohort.base.grid_spacing; }));
        b.push_back(number<double>("phantom", "es_scale", [](RunConfig& c) -> auto& { return c.cohort.base.es_scale; }));
        b.push_back(number<int>("phantom", "image_size", [](RunConfig& c) -> auto& { return c.cohort.views.image_size; }));
        b.push_back(number<double>("phantom", "pixel_spacing", [](RunConfig& c) -> auto& { return c.cohort.views.pixel_spacing; }));
        b.push_back(number<double>("phantom", "sa_slice_gap", [](RunConfig& c) -> auto& { return c.cohort.views.sa_slice_gap; }));
        b.push_back(number<double>("phantom", "azimuth_4ch_deg", [](RunConfig& c) -> auto& { return c.cohort.views.azimuth_4ch_deg; }));
        b.push_back(number<double>("phantom", "azimuth_2ch_deg", [](RunConfig& c) -> auto& { return c.cohort.views.azimuth_2ch_deg; }));
        b.push_back(number<double>("phantom", "centre_jitter_px", [](RunConfig& c) -> auto& { return c.cohort.views.centre_jitter_px; }));
        b.push_back(number<double>("phantom", "angle_jitter_deg", [](RunConfig& c) -> auto& { return c.cohort.angle_jitter_deg; }));
        b.push_back(number<double>("phantom", "translation_jitter_mm", [](RunConfig& c) -> auto& { return c.cohort.translation_jitter_mm; }));
        b.push_back(number<double>("phantom", "size_jitter", [](RunConfig& c) -> auto& { return c.cohort.size_jitter; }));
        b.push_back(number<double>("phantom", "contrast_jitter", [](RunConfig& c) -> auto& { return c.cohort.contrast_jitter; }));
        // viewgeom
        b.push_back(number<int>("viewgeom", "box_side", [](RunConfig& c) -> auto& { return c.boxes.side; }));
        b.push_back(number<int>("viewgeom", "box_spacing", [](RunConfig& c) -> auto& { return c.boxes.spacing; }));
        // segnet
        b.push_back(number<int>("segnet", "depth", [](RunConfig& c) -> auto& { return c.net.depth; }));
        b.push_back(number<int>("segnet", "base_channels", [](RunConfig& c) -> auto& { return c.net.base_channels; }));
        // trainer
        b.push_back(number<double>("trainer", "learning_rate", [](RunConfig& c) -> auto& { return c.train.learning_rate; }));
        b.push_back(number<int>("trainer", "batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
        b.push_back(number<int>("trainer", "pretrain_iterations", [](RunConfig& c) -> auto& { return c.pretrain_iterations; }));
        b.push_back(number<int>("trainer", "iterations", [](RunConfig& c) -> auto& { return c.train.iterations; }));
        b.push_back(number<int>("trainer", "beta", [](RunConfig& c) -> auto& { return c.train.beta; }));
        b.push_back(number<std::uint64_t>("trainer", "seed", [](RunConfig& c) -> auto& { return c.train.seed; }));
        b.push_back({"trainer", "augment", [](const RunConfig& c) { return std::string(c.train.augment.enabled ? "true" : "false"); },
                     [](RunConfig& c, const std::string& v) { c.train.augment.enabled = parse_bool("trainer.augment", v); }});
        b.push_back(number<double>("trainer", "rotation_deg", [](RunConfig& c) -> auto& { return c.train.augment.rotation_deg; }));
        b.push_back(number<double>("trainer", "scale_min", [](RunConfig& c) -> auto& { return c.train.augment.scale_min; }));
        b.push_back(number<double>("trainer", "scale_max", [](RunConfig& c) -> auto& { return c.train.augment.scale_max; }));
        // experiment
        b.push_back({"experiment", "view", [](const RunConfig& c) { return std::string(to_string(c.experiment.view)); },
                     [](RunConfig& c, const std::string& v) {
                         try {
                             c.experiment.view = parse_view(v);
                         } catch (const std::exception&) {
                             throw BadConfig("experiment.view: '" + v + "' is not sa, la2ch or la4ch");
                         }
                     }});
        b.push_back(number<int>("experiment", "pretrain_subjects", [](RunConfig& c) -> auto& { return c.experiment.pretrain_subjects; }));
        b.push_back(number<int>("experiment", "test_subjects", [](RunConfig& c) -> auto& { return c.experiment.test_subjects; }));
        b.push_back({"experiment", "budgets", [](const RunConfig& c) { return fmt::format("{}", fmt::join(c.experiment.budgets, ", ")); },
                     [](RunConfig& c, const std::string& v) {
                         c.experiment.budgets.clear();
                         for (const auto& item : split_list(v))
                             c.experiment.budgets.push_back(parse_number<int>("experiment.budgets", item));
                     }});
        b.push_back({"experiment", "modes",
                     [](const RunConfig& c) {
                         std::vector<std::string> names;
                         for (auto m : c.experiment.modes) names.emplace_back(trainer::to_string(m));
                         return fmt::format("{}", fmt::join(names, ", "));
                     },
                     [](RunConfig& c, const std::string& v) {
                         c.experiment.modes.clear();
                         for (const auto& item : split_list(v)) c.experiment.modes.push_back(trainer::parse_mode(item));
                     }});
        b.push_back(number<int>("experiment", "seeds", [](RunConfig& c) -> auto& { return c.experiment.seeds; }));
        b.push_back(number<int>("experiment", "workers", [](RunConfig& c) -> auto& { return c.experiment.workers; }));
        return b;
    }();
    return table;
}

const Binding& find_binding(const std::string& section, const std::string& key) {
    for (const auto& b : bindings())
        if (b.section == section && b.key == key) return b;
    throw BadConfig(fmt::format("unknown configuration key '{}.{}'", section, key));
}

void apply_override(RunConfig& cfg, const std::string& text) {
    const auto eq = text.find('=');
    const auto dot = text.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw BadConfig(fmt::format("override '{}' is not of the form section.key=value", text));
    find_binding(text.substr(0, dot), text.substr(dot + 1, eq - dot - 1)).set(cfg, text.substr(eq + 1));
}

RunConfig from_tree(const pt::ptree& tree, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) throw BadConfig(fmt::format("key '{}' outside of a section", section));
        for (const auto& [key, value] : body) find_binding(section, key).set(cfg, value.data());
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.validate();
    return cfg;
}

} // namespace

void RunConfig::validate() const {
    try {
        cohort.base.validate();
    } catch (const DegenerateSpec& e) {
        throw BadConfig(e.what());
    }
    if (cohort.views.image_size < 8 || !(cohort.views.pixel_spacing > 0) || !(cohort.views.sa_slice_gap > 0))
        throw BadConfig("invalid view sampling parameters");
    if (boxes.side < 1 || boxes.spacing < 1) throw BadConfig("box side and spacing must be positive");
    net.validate();
    train.validate();
    if (pretrain_iterations < 1) throw BadConfig("pretrain_iterations must be >= 1");
    const auto& e = experiment;
    if (e.pretrain_subjects < 1 || e.test_subjects < 1) throw BadConfig("subject counts must be positive");
    if (e.budgets.empty()) throw BadConfig("experiment.budgets is empty");
    for (int n : e.budgets)
        if (n < 1 || n > e.pretrain_subjects)
            throw BadConfig(fmt::format("budget {} outside [1, {}]", n, e.pretrain_subjects));
    if (e.modes.empty()) throw BadConfig("experiment.modes is empty");
    if (e.seeds < 1 || e.workers < 1) throw BadConfig("seeds and workers must be >= 1");
}

trainer::TrainConfig RunConfig::pretrain_config() const {
    trainer::TrainConfig c = train;
    c.iterations = pretrain_iterations;
    return c;
}

trainer::TrainConfig RunConfig::finetune_config(int seed_index) const {
    trainer::TrainConfig c = train;
    c.seed = mix_seed(train.seed, 0x1000 + std::uint64_t(seed_index));
    return c;
}

RunConfig from_string(const std::string& ini, const std::vector<std::string>& overrides) {
    pt::ptree tree;
    std::istringstream in(ini);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw BadConfig(e.what());
    }
    return from_tree(tree, overrides);
}

RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw BadConfig("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str(), overrides);
}

std::string to_ini(const RunConfig& cfg) {
    std::string out, section;
    for (const auto& b : bindings()) {
        if (b.section != section) {
            out += fmt::format("{}[{}]\n", section.empty() ? "" : "\n", b.section);
            section = b.section;
        }
        out += fmt::format("{} = {}\n", b.key, b.get(cfg));
    }
    return out;
}

} // namespace cmrssl::config
