#include "flare/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace flare {

using nlohmann::json;

std::string format_double(double v) {
    char buf[32];
    // Shortest representation that round-trips.
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

void write_csv(const std::filesystem::path& path, const Matrix& data,
               const std::vector<std::string>& header) {
    if (!header.empty() && header.size() != data.cols)
        throw ShapeError("write_csv: header width does not match data");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SchemaError("write_csv: cannot open " + path.string());
    if (!header.empty()) {
        for (std::size_t j = 0; j < header.size(); ++j) {
            if (j) out << ',';
            out << header[j];
        }
        out << '\n';
    }
    for (std::size_t i = 0; i < data.rows; ++i) {
        for (std::size_t j = 0; j < data.cols; ++j) {
            if (j) out << ',';
            out << format_double(data(i, j));
        }
        out << '\n';
    }
    if (!out) throw SchemaError("write_csv: write failed for " + path.string());
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw SchemaError("read_csv: bad numeric field '" + s + "' in " + path.string());
    return v;
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SchemaError("read_csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("read_csv: empty file " + path.string());
    CsvTable table;
    table.header = split_line(line);
    std::vector<double> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_line(line);
        if (fields.size() != table.header.size())
            throw SchemaError("read_csv: ragged row in " + path.string());
        for (const std::string& f : fields) values.push_back(parse_double(f, path));
        ++rows;
    }
    table.data = Matrix(rows, table.header.size());
    std::copy(values.begin(), values.end(), table.data.data.begin());
    return table;
}

// --- Checkpoints ----------------------------------------------------------

namespace {

json model_config_json(const ModelConfig& cfg) {
    return json{{"data_dim", cfg.data_dim},
                {"hidden", cfg.hidden},
                {"n_blocks", cfg.n_blocks},
                {"time_embed_dim", cfg.time_embed_dim},
                {"total_steps", cfg.total_steps}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.data_dim = j.at("data_dim").get<std::size_t>();
    cfg.hidden = j.at("hidden").get<std::size_t>();
    cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
    cfg.total_steps = j.at("total_steps").get<std::size_t>();
    return cfg;
}

void write_block(std::ofstream& out, const Vector& v) {
    const std::uint64_t n = v.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * 8));
}

Vector read_block(std::ifstream& in, const std::filesystem::path& path) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    Vector v(n, 0.0);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
    if (!in) throw SchemaError("load_checkpoint: truncated block in " + path.string());
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                     const Vector& ema_params, std::uint64_t seed, std::uint64_t schedule_hash) {
    if (ema_params.size() != model.param_count())
        throw ShapeError("save_checkpoint: EMA block size mismatch");
    json layout = json::array();
    for (const LayoutEntry& e : model.params.layout)
        layout.push_back(json{{"name", e.name}, {"offset", e.offset}, {"length", e.length}});
    const json header{{"architecture", model_config_json(model.config)},
                      {"layout", layout},
                      {"seed", seed},
                      {"schedule_hash", schedule_hash}};
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw SchemaError("save_checkpoint: cannot open " + path.string());
    out.write("FLRE", 4);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    write_block(out, model.params.values);
    write_block(out, ema_params);
    if (!out) throw SchemaError("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::uint64_t expected_schedule_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SchemaError("load_checkpoint: cannot open " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FLRE", 4) != 0)
        throw SchemaError("load_checkpoint: bad magic in " + path.string());
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCheckpointVersion)
        throw SchemaError("load_checkpoint: unsupported version in " + path.string());
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw SchemaError("load_checkpoint: truncated header in " + path.string());

    Checkpoint ckpt;
    try {
        const json header = json::parse(header_text);
        ckpt.config = model_config_from_json(header.at("architecture"));
        ckpt.seed = header.at("seed").get<std::uint64_t>();
        ckpt.schedule_hash = header.at("schedule_hash").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw SchemaError("load_checkpoint: malformed header: " + std::string(e.what()));
    }
    if (expected_schedule_hash != 0 && ckpt.schedule_hash != expected_schedule_hash)
        throw SchemaError("load_checkpoint: schedule hash mismatch in " + path.string());
    ckpt.params = read_block(in, path);
    ckpt.ema_params = read_block(in, path);
    return ckpt;
}

DenoiserModel model_from_checkpoint(const Checkpoint& ckpt, bool use_ema) {
    DenoiserModel model(ckpt.config);
    const Vector& src = use_ema ? ckpt.ema_params : ckpt.params;
    if (src.size() != model.param_count())
        throw SchemaError("model_from_checkpoint: parameter block size mismatch");
    model.params.values = src;
    return model;
}

// --- Run configuration ----------------------------------------------------

namespace {

void require_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw SchemaError("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw SchemaError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw SchemaError("config: bad value for '" + std::string(key) + "'");
    }
}

}  // namespace

std::size_t preset_dataset_size(const std::string& dataset) {
    if (dataset == "grid") return 6000;  // per mode
    if (dataset == "sine") return 5000;
    if (dataset == "chirp" || dataset == "damped") return 8000;
    throw InvalidArgument("preset_dataset_size: unknown dataset " + dataset);
}

TrainConfig preset_train_config(const std::string& dataset) {
    TrainConfig cfg;
    if (dataset == "grid") {
        cfg.lr = 5e-6;
        cfg.batch = 256;
        cfg.steps = 30000;
    } else if (dataset == "sine") {
        cfg.lr = 5e-4;
        cfg.batch = 512;
        cfg.steps = 20000;
    } else if (dataset == "chirp" || dataset == "damped") {
        cfg.lr = 5e-4;
        cfg.batch = 256;
        cfg.steps = 40000;
    } else {
        throw InvalidArgument("preset_train_config: unknown dataset " + dataset);
    }
    return cfg;
}

double preset_filter_percentile(const std::string& dataset) {
    return dataset == "chirp" ? 25.0 : 50.0;
}

std::size_t preset_subnet_m(const std::string& dataset, std::size_t param_count) {
    if (dataset == "sine" || dataset == "grid") return param_count / 2;
    return std::min<std::size_t>(4412, param_count);
}

RunConfig parse_run_config(const json& j) {
    require_keys(j, {"dataset", "n_samples", "model", "schedule", "train", "estimator", "subnet_m",
                     "lambda", "ggn_pairs", "sampler", "filter_percentile", "bootstrap_b",
                     "mc_draws", "thresholds", "seed", "output_dir", "emit_svg"},
                 "top level");
    RunConfig cfg;
    if (!j.contains("dataset")) throw SchemaError("config: missing mandatory key 'dataset'");
    read_field(j, "dataset", cfg.dataset);
    if (cfg.dataset != "grid" && cfg.dataset != "sine" && cfg.dataset != "chirp" &&
        cfg.dataset != "damped")
        throw SchemaError("config: unknown dataset '" + cfg.dataset + "'");
    if (!j.contains("seed")) throw SchemaError("config: missing mandatory key 'seed'");
    read_field(j, "seed", cfg.seed);
    cfg.seed_set = true;

    cfg.model = preset_model_config(cfg.dataset);
    if (j.contains("model")) {
        const json& m = j.at("model");
        require_keys(m, {"hidden", "n_blocks", "time_embed_dim"}, "model");
        read_field(m, "hidden", cfg.model.hidden);
        read_field(m, "n_blocks", cfg.model.n_blocks);
        read_field(m, "time_embed_dim", cfg.model.time_embed_dim);
    }
    cfg.total_steps = cfg.model.total_steps;
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        require_keys(s, {"kind", "T"}, "schedule");
        std::string kind = "cosine";
        read_field(s, "kind", kind);
        if (kind != "cosine") throw SchemaError("config: unsupported schedule kind '" + kind + "'");
        read_field(s, "T", cfg.total_steps);
        if (cfg.total_steps == 0) throw SchemaError("config: schedule T must be positive");
        cfg.model.total_steps = cfg.total_steps;
    }

    cfg.train = preset_train_config(cfg.dataset);
    if (j.contains("train")) {
        const json& t = j.at("train");
        require_keys(t,
                     {"lr", "batch", "steps", "weight_decay", "grad_clip", "ema_decay",
                      "log_snr_weight"},
                     "train");
        read_field(t, "lr", cfg.train.lr);
        read_field(t, "batch", cfg.train.batch);
        read_field(t, "steps", cfg.train.steps);
        read_field(t, "weight_decay", cfg.train.weight_decay);
        read_field(t, "grad_clip", cfg.train.grad_clip);
        read_field(t, "ema_decay", cfg.train.ema_decay);
        read_field(t, "log_snr_weight", cfg.train.log_snr_weight);
    }
    cfg.train.seed = cfg.seed;

    if (j.contains("estimator")) {
        std::string name;
        read_field(j, "estimator", name);
        if (name == "flare")
            cfg.estimator = EstimatorKind::Flare;
        else if (name == "llla")
            cfg.estimator = EstimatorKind::LastLayer;
        else if (name == "full")
            cfg.estimator = EstimatorKind::FullFisher;
        else if (name == "bayesdiff")
            cfg.estimator = EstimatorKind::PredictiveVariance;
        else
            throw SchemaError("config: unknown estimator '" + name + "'");
    }
    if (j.contains("sampler")) {
        std::string name;
        read_field(j, "sampler", name);
        if (name == "ddpm")
            cfg.sampler = SamplerKind::Ddpm;
        else if (name == "ddim")
            cfg.sampler = SamplerKind::Ddim;
        else if (name == "mean")
            cfg.sampler = SamplerKind::MeanPath;
        else
            throw SchemaError("config: unknown sampler '" + name + "'");
    }

    read_field(j, "n_samples", cfg.n_samples);
    read_field(j, "subnet_m", cfg.subnet_m);
    read_field(j, "lambda", cfg.lambda);
    read_field(j, "ggn_pairs", cfg.ggn_pairs);
    read_field(j, "filter_percentile", cfg.filter_percentile);
    read_field(j, "bootstrap_b", cfg.bootstrap_b);
    read_field(j, "mc_draws", cfg.mc_draws);
    read_field(j, "thresholds", cfg.thresholds);
    read_field(j, "output_dir", cfg.output_dir);
    read_field(j, "emit_svg", cfg.emit_svg);
    if (cfg.filter_percentile == 0.0) cfg.filter_percentile = preset_filter_percentile(cfg.dataset);
    if (cfg.filter_percentile < 0.0 || cfg.filter_percentile > 100.0)
        throw SchemaError("config: filter_percentile out of range");
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("config: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError("config: parse error in " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

// --- Reports --------------------------------------------------------------

json metrics_report_json(const MetricsReport& r) {
    json j{{"dataset", r.dataset},
           {"method", r.method},
           {"acc_unfiltered", r.acc_unfiltered},
           {"acc_filtered", r.acc_filtered},
           {"roc_auc_filtered", r.roc_auc_filtered},
           {"bootstrap_p_value", r.bootstrap_p_value},
           {"n_generated", r.n_generated},
           {"n_retained", r.n_retained},
           {"seed", r.seed}};
    if (r.gap_defined)
        j["gap_closure_pct"] = r.gap_closure_pct;
    else
        j["gap_closure_pct"] = nullptr;  // undefined baseline (acc_uf = 0.5)
    return j;
}

json cross_term_report_json(const CrossTermReport& r) {
    json tests = json::array();
    for (const ThresholdTest& t : r.tests)
        tests.push_back(json{{"tau_pct", t.tau}, {"t_stat", t.t_stat}, {"p_value", t.p_value}});
    return json{{"delta_u_pct", r.delta_u_pct},
                {"mean_pct", r.mean},
                {"stddev_pct", r.stddev},
                {"max_abs_pct", r.max_abs},
                {"std_error_pct", r.std_error},
                {"degrees_of_freedom", r.df},
                {"threshold_tests", tests}};
}

json sketch_report_json(const SketchStudyReport& r) {
    json trials = json::array();
    for (const Vector& errs : r.trial_errors) trials.push_back(errs);
    return json{{"m_grid", r.m_grid},       {"mean_rel_error", r.mean_rel_error},
                {"trial_errors", trials},   {"slope", r.slope},
                {"mu", r.mu},               {"kappa", r.kappa},
                {"gamma", r.gamma},         {"gamma_flagged", r.gamma_flagged}};
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SchemaError("write_json: cannot open " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw SchemaError("write_json: write failed for " + path.string());
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("read_json: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError("read_json: parse error in " + path.string() + ": " + e.what());
    }
    return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SchemaError("write_text: cannot open " + path.string());
    out << text;
}

}  // namespace flare
