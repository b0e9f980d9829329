// Command-line front end. Every subcommand is deterministic given
// (config, seed, inputs); artifacts are written atomically so a failed run
// leaves no partial files.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "vivid/vivid.hpp"

namespace {

using namespace vivid;

// Raised for anything that should exit 2; wraps validation failures from the
// config-loading phase of a subcommand.
struct CliConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class F>
auto as_config(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw CliConfigError(e.what());
    }
}

nlohmann::json parse_json_file(const std::string& path) {
    auto j = nlohmann::json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
    return j;
}

// ---------------------------------------------------------------------------
// convert: label CSV -> UMS JSONL
// ---------------------------------------------------------------------------

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (true) {
        auto comma = line.find(',', pos);
        std::string cell = line.substr(pos, comma == std::string::npos ? comma : comma - pos);
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        std::size_t lead = cell.find_first_not_of(' ');
        cells.push_back(lead == std::string::npos ? "" : cell.substr(lead));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return cells;
}

std::optional<double> parse_label_cell(const std::string& cell, const std::string& finding,
                                       std::size_t row) {
    if (cell.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size()) {
        throw FormatError("row " + std::to_string(row) + ", finding '" + finding +
                          "': unparseable label '" + cell + "'");
    }
    return v;
}

int run_convert(const std::string& schema_path, const std::string& csv_path,
                const std::string& out_path) {
    auto schema = as_config([&] { return SchemaConfig::from_json_file(schema_path); });

    const std::string text = read_file(csv_path);
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        if (nl > pos) lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    if (lines.empty()) throw FormatError(csv_path + ": no header row");

    auto header = split_csv(lines[0]);
    if (header.empty() || header[0] != "image_id") {
        throw FormatError(csv_path + ": header must start with image_id");
    }
    // Columns may come in any order; rows are assembled in schema order.
    std::vector<std::size_t> column_of(schema.findings.size());
    for (std::size_t f = 0; f < schema.findings.size(); ++f) {
        std::size_t found = 0;
        bool ok = false;
        for (std::size_t c = 1; c < header.size(); ++c) {
            if (header[c] == schema.findings[f]) {
                found = c;
                ok = true;
                break;
            }
        }
        if (!ok) throw FormatError(csv_path + ": missing column '" + schema.findings[f] + "'");
        column_of[f] = found;
    }
    if (header.size() != schema.findings.size() + 1) {
        throw FormatError(csv_path + ": column count does not match schema");
    }

    std::vector<UmsRecord> records;
    records.reserve(lines.size() - 1);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto cells = split_csv(lines[i]);
        if (cells.size() != header.size()) {
            throw FormatError("row " + std::to_string(i) + ": expected " +
                              std::to_string(header.size()) + " cells, got " +
                              std::to_string(cells.size()));
        }
        std::vector<std::optional<double>> raw(schema.findings.size());
        for (std::size_t f = 0; f < schema.findings.size(); ++f) {
            raw[f] = parse_label_cell(cells[column_of[f]], schema.findings[f], i);
        }
        auto r = build_record(raw, schema);
        r.image_id = cells[0];
        records.push_back(std::move(r));
    }

    atomic_write_file(out_path, ums_jsonl_text(records));
    std::printf("wrote %zu records to %s\n", records.size(), out_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int run_gen_data(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out_dir) {
    auto spec = as_config([&] { return SyntheticDatasetSpec::from_json(parse_json_file(config_path)); });
    if (seed) {
        spec.seed = *seed;
        as_config([&] { spec.validate(); return 0; });
    }
    auto ds = generate_dataset(spec);
    write_dataset(out_dir, ds, spec);
    std::printf("wrote %zu samples to %s\n", ds.samples.size(), out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, std::optional<std::uint64_t> seed,
              std::optional<int> steps, const std::string& resume) {
    auto cfg = as_config([&] { return RunConfig::from_json_file(config_path); });
    if (seed) cfg.seed = *seed;
    if (steps) cfg.steps = *steps;
    as_config([&] { cfg.validate(); return 0; });

    auto ds = read_dataset(data_dir);
    auto model = init_model(cfg);
    auto res = train_run(model, ds, out_dir, resume);
    std::printf("ran %d steps, smoothed token loss %.6f -> %.6f\n", res.steps_run,
                res.initial_tok, res.final_tok);
    std::printf("checkpoint %s\nbackbone %s\nmetrics %s\n", res.checkpoint_path.c_str(),
                res.backbone_path.c_str(), res.metrics_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// probe / eval
// ---------------------------------------------------------------------------

void print_report(const ProbeResult& res) {
    if (res.report.macro_auc) std::printf("macro-AUC %.6f\n", *res.report.macro_auc);
    if (res.report.macro_f1) std::printf("macro-F1 %.6f\n", *res.report.macro_f1);
    for (const auto& name : res.report.skipped_auc) {
        std::printf("skipped for AUC (single class): %s\n", name.c_str());
    }
}

int run_probe(const std::string& backbone_path, const std::string& data_dir,
              const std::string& out_path, const ProbeConfig& pc, const std::string& head_path) {
    as_config([&] { pc.validate(); return 0; });
    auto bb = load_backbone_file(backbone_path);
    auto ds = read_dataset(data_dir);
    auto res = linear_probe(bb, ds, pc);
    atomic_write_file(out_path, res.to_json().dump(2) + "\n");
    if (!head_path.empty()) save_probe_head(head_path, res, pc);
    print_report(res);
    std::printf("report %s\n", out_path.c_str());
    return 0;
}

int run_eval(const std::string& head_path, const std::string& backbone_path,
             const std::string& data_dir, const std::string& out_path) {
    auto bb = load_backbone_file(backbone_path);
    auto ds = read_dataset(data_dir);
    auto res = eval_probe_head(head_path, bb, ds);
    atomic_write_file(out_path, res.to_json().dump(2) + "\n");
    print_report(res);
    std::printf("report %s\n", out_path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck: end-to-end finite differences on a one-sample combined loss
// ---------------------------------------------------------------------------

int run_gradcheck(const std::string& config_path, std::uint64_t seed) {
    auto cfg = as_config([&] {
        return config_path.empty() ? RunConfig::tiny() : RunConfig::from_json_file(config_path);
    });
    cfg.seed = seed;
    auto model = init_model(cfg);

    Rng rng(seed + 100);
    Image img = make_image(cfg.vit.image_size, cfg.vit.image_size);
    for (auto& p : img.pixels) p = rng.uniform();

    // Two findings, one unanswerable, so the masked path is exercised too.
    UmsRecord r;
    r.image_id = "gradcheck-0";
    r.findings = {"A", "B"};
    r.states = {FindingState::Present, FindingState::Null};
    r.answerable = {true, false};
    std::vector<std::string> fields = {"A", "B"};
    auto seq = answerability_weights(r, fields, tokenize(serialize_canonical(r, &fields)));

    std::vector<BatchSample> batch = {{&img, &seq}};
    auto report = grad_check(
        [&](Tape& tape) { return total_loss(tape, model, batch).total; },
        model.trainable_named(), 1e-5, 1e-4);
    std::printf("%s\n", report.summary().c_str());
    std::printf("worst max rel err %.3e over %zu tensors\n", report.worst, report.entries.size());
    return report.passed ? 0 : 1;
}

// ---------------------------------------------------------------------------
// attn-dump / export-backbone
// ---------------------------------------------------------------------------

int run_attn_dump(const std::string& checkpoint_path, const std::string& data_dir,
                  const std::string& out_dir, int count) {
    auto ck = load_checkpoint(checkpoint_path);
    auto cfg = as_config([&] {
        if (!ck.meta.contains("config")) {
            throw ConfigError(checkpoint_path + ": checkpoint has no config in its header");
        }
        return RunConfig::from_json(ck.meta["config"]);
    });
    auto model = model_from_tensors(cfg, ck.tensors);
    auto ds = read_dataset(data_dir);
    if (count <= 0 || count > static_cast<int>(ds.samples.size())) {
        count = static_cast<int>(ds.samples.size());
    }
    std::vector<Sample> subset(ds.samples.begin(), ds.samples.begin() + count);
    const int files = export_attention(model, subset, out_dir);
    std::printf("wrote %d attention files to %s\n", files, out_dir.c_str());
    return 0;
}

int run_export_backbone(const std::string& checkpoint_path, const std::string& out_path) {
    auto ck = load_checkpoint(checkpoint_path);
    export_backbone(ck, out_path);
    std::printf("backbone %s\n", out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vision-encoder pretraining against a frozen decoder"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_path, schema_path, csv_path;
    std::string checkpoint_path, backbone_path, head_path, resume_path, save_head_path;
    std::uint64_t seed = 0;
    int steps = 0, count = 8;
    ProbeConfig pc;

    auto* convert = app.add_subcommand("convert", "label CSV to UMS JSONL");
    convert->add_option("--schema", schema_path, "schema JSON")->required();
    convert->add_option("--labels", csv_path, "label CSV (image_id,<finding...>)")->required();
    convert->add_option("--out", out_path, "output JSONL path")->required();

    auto* gen = app.add_subcommand("gen-data", "synthetic dataset to a directory");
    gen->add_option("--config", config_path, "dataset spec JSON")->required();
    auto* gen_seed = gen->add_option("--seed", seed, "override spec seed");
    gen->add_option("--out", out_path, "output directory")->required();

    auto* train = app.add_subcommand("train", "train and export a backbone");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_path, "output directory")->required();
    auto* train_seed = train->add_option("--seed", seed, "override config seed");
    auto* train_steps = train->add_option("--steps", steps, "override config steps");
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* probe = app.add_subcommand("probe", "train a linear probe on a backbone");
    probe->add_option("--backbone", backbone_path, "backbone file")->required();
    probe->add_option("--data", data_dir, "dataset directory")->required();
    probe->add_option("--out", out_path, "report JSON path")->required();
    probe->add_option("--seed", pc.seed, "probe seed");
    probe->add_option("--steps", pc.steps, "probe optimizer steps");
    probe->add_option("--lr", pc.lr, "probe learning rate");
    probe->add_option("--train-frac", pc.train_frac, "train split fraction");
    probe->add_flag("--shuffle-labels", pc.shuffle_labels, "permute labels (control run)");
    probe->add_option("--save-head", save_head_path, "also save the trained head");

    auto* eval = app.add_subcommand("eval", "evaluate a saved probe head");
    eval->add_option("--head", head_path, "probe head file")->required();
    eval->add_option("--backbone", backbone_path, "backbone file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--out", out_path, "report JSON path")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
    gradcheck->add_option("--config", config_path, "run config JSON (default: tiny preset)");
    gradcheck->add_option("--seed", seed, "model seed");

    auto* attn = app.add_subcommand("attn-dump", "per-group attention maps as CSV and PGM");
    attn->add_option("--checkpoint", checkpoint_path, "training checkpoint")->required();
    attn->add_option("--data", data_dir, "dataset directory")->required();
    attn->add_option("--out", out_path, "output directory")->required();
    attn->add_option("--count", count, "number of images (default 8)");

    auto* exp = app.add_subcommand("export-backbone", "strip a checkpoint to encoder tensors");
    exp->add_option("--checkpoint", checkpoint_path, "training checkpoint")->required();
    exp->add_option("--out", out_path, "backbone output path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*convert) return run_convert(schema_path, csv_path, out_path);
        if (*gen) {
            return run_gen_data(config_path,
                                gen_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                                out_path);
        }
        if (*train) {
            return run_train(config_path, data_dir, out_path,
                             train_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                             train_steps->count() ? std::optional<int>(steps) : std::nullopt,
                             resume_path);
        }
        if (*probe) return run_probe(backbone_path, data_dir, out_path, pc, save_head_path);
        if (*eval) return run_eval(head_path, backbone_path, data_dir, out_path);
        if (*gradcheck) return run_gradcheck(config_path, seed);
        if (*attn) return run_attn_dump(checkpoint_path, data_dir, out_path, count);
        if (*exp) return run_export_backbone(checkpoint_path, out_path);
    } catch (const CliConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
