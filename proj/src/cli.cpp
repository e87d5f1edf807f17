#include "sled/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "sled/checkpoint.hpp"
#include "sled/data.hpp"
#include "sled/errors.hpp"
#include "sled/gradcheck.hpp"
#include "sled/metrics.hpp"
#include "sled/model.hpp"
#include "sled/train.hpp"

namespace sled {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    GradCheckOptions gc;
    std::string manifest;
    std::string out = "out";
    std::string checkpoint;
    std::uint64_t seed = 0;
    std::vector<std::string> variants = {"scc", "hg1", "hg2", "hg3", "sled"};
    bool ablation_train = false;
    SyntheticSpec synth;
    int synth_count = 4;
    bool any_train_key = false;  // for the gradcheck irrelevant-flags warning
};

[[noreturn]] void bad_key(const std::string& key) {
    throw ParamError("unknown config key '" + key + "'");
}

double as_num(const json& v, const std::string& key) {
    if (!v.is_number()) throw ParamError("config key '" + key + "' must be a number");
    return v.get<double>();
}

int as_int(const json& v, const std::string& key) {
    if (!v.is_number_integer()) throw ParamError("config key '" + key + "' must be an integer");
    return v.get<int>();
}

std::uint64_t as_u64(const json& v, const std::string& key) {
    if (!v.is_number_unsigned() && !v.is_number_integer())
        throw ParamError("config key '" + key + "' must be an integer");
    const auto s = v.get<std::int64_t>();
    if (s < 0) throw ParamError("config key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(s);
}

bool as_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) throw ParamError("config key '" + key + "' must be true/false");
    return v.get<bool>();
}

std::string as_str(const json& v, const std::string& key) {
    if (!v.is_string()) throw ParamError("config key '" + key + "' must be a string");
    return v.get<std::string>();
}

void apply_kv(RunConfig& cfg, const std::string& key, const json& v) {
    if (key == "seed") {
        cfg.seed = as_u64(v, key);
    } else if (key == "manifest") {
        cfg.manifest = as_str(v, key);
    } else if (key == "out") {
        cfg.out = as_str(v, key);
    } else if (key == "checkpoint") {
        cfg.checkpoint = as_str(v, key);
    } else if (key == "model.max_disp") {
        cfg.model.max_disp = as_int(v, key);
    } else if (key == "model.feat_channels") {
        cfg.model.feat_channels = as_int(v, key);
    } else if (key == "model.reg_channels") {
        cfg.model.reg_channels = as_int(v, key);
    } else if (key == "model.regularizer") {
        cfg.model.regularizer = regularizer_from_token(as_str(v, key));
    } else if (key == "model.atrous_dilation") {
        cfg.model.atrous_dilation = as_int(v, key);
    } else if (key == "model.paper_scale") {
        cfg.model.paper_scale = as_bool(v, key);
    } else if (key == "model.encoder_block_layout") {
        if (!v.is_array() || v.size() != 4)
            throw ParamError("model.encoder_block_layout must be an array of 4 integers");
        for (std::size_t i = 0; i < 4; ++i)
            cfg.model.encoder_block_layout[i] = as_int(v[i], key);
    } else if (key == "train.mode") {
        const std::string m = as_str(v, key);
        if (m == "pretrain")
            cfg.train.mode = TrainMode::Pretrain;
        else if (m == "finetune")
            cfg.train.mode = TrainMode::Finetune;
        else
            throw ParamError("train.mode must be 'pretrain' or 'finetune'");
        cfg.any_train_key = true;
    } else if (key == "train.lr_initial") {
        cfg.train.lr_initial = as_num(v, key);
        cfg.any_train_key = true;
    } else if (key == "train.pretrain_epochs") {
        cfg.train.pretrain_epochs = as_int(v, key);
        cfg.any_train_key = true;
    } else if (key == "train.finetune_lr_schedule") {
        if (!v.is_array()) throw ParamError("train.finetune_lr_schedule must be [[lr,epochs],..]");
        cfg.train.finetune_lr_schedule.clear();
        for (const auto& stage : v) {
            if (!stage.is_array() || stage.size() != 2)
                throw ParamError("train.finetune_lr_schedule stages must be [lr, epochs]");
            cfg.train.finetune_lr_schedule.emplace_back(as_num(stage[0], key),
                                                        as_int(stage[1], key));
        }
        cfg.any_train_key = true;
    } else if (key == "train.loss_weights") {
        if (!v.is_array()) throw ParamError("train.loss_weights must be an array");
        cfg.train.loss_weights.clear();
        for (const auto& w : v) cfg.train.loss_weights.push_back(as_num(w, key));
        cfg.any_train_key = true;
    } else if (key == "train.batch_size") {
        cfg.train.batch_size = as_int(v, key);
        cfg.any_train_key = true;
    } else if (key == "gradcheck.step") {
        cfg.gc.step = as_num(v, key);
    } else if (key == "gradcheck.tolerance") {
        cfg.gc.tolerance = as_num(v, key);
    } else if (key == "gradcheck.samples_per_tensor") {
        cfg.gc.samples_per_tensor = as_int(v, key);
    } else if (key == "gradcheck.quick") {
        cfg.gc.quick = as_bool(v, key);
    } else if (key == "gradcheck.only") {
        cfg.gc.only = as_str(v, key);
    } else if (key == "gradcheck.corrupt") {
        cfg.gc.corrupt_op = as_str(v, key);
    } else if (key == "ablation.variants") {
        if (!v.is_array() || v.empty())
            throw ParamError("ablation.variants must be a non-empty array");
        cfg.variants.clear();
        for (const auto& t : v) cfg.variants.push_back(as_str(t, key));
    } else if (key == "ablation.train") {
        cfg.ablation_train = as_bool(v, key);
    } else if (key == "synth.count") {
        cfg.synth_count = as_int(v, key);
    } else if (key == "synth.width") {
        cfg.synth.width = as_int(v, key);
    } else if (key == "synth.height") {
        cfg.synth.height = as_int(v, key);
    } else if (key == "synth.field") {
        cfg.synth.field = as_str(v, key);
    } else if (key == "synth.d0") {
        cfg.synth.d0 = as_num(v, key);
    } else if (key == "synth.d1") {
        cfg.synth.d1 = as_num(v, key);
    } else if (key == "synth.boxes") {
        cfg.synth.boxes = as_int(v, key);
    } else {
        bad_key(key);
    }
}

void apply_tree(RunConfig& cfg, const std::string& prefix, const json& node) {
    if (node.is_object() &&
        (prefix.empty() || prefix == "model" || prefix == "train" || prefix == "gradcheck" ||
         prefix == "ablation" || prefix == "synth")) {
        for (const auto& [k, v] : node.items())
            apply_tree(cfg, prefix.empty() ? k : prefix + "." + k, v);
        return;
    }
    apply_kv(cfg, prefix, node);
}

RunConfig build_config(const std::string& config_path, const std::vector<std::string>& sets,
                       const std::string& out_flag) {
    RunConfig cfg;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw ParseError("cannot open config " + config_path);
        json doc;
        try {
            doc = json::parse(is);
        } catch (const json::exception& e) {
            throw ParseError("config " + config_path + ": " + e.what());
        }
        if (!doc.is_object()) throw ParamError("config root must be a JSON object");
        apply_tree(cfg, "", doc);
    }
    for (const std::string& kv : sets) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ParamError("--set expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const std::string text = kv.substr(eq + 1);
        json value;
        try {
            value = json::parse(text);
        } catch (const json::exception&) {
            value = text;  // bare words are strings
        }
        apply_kv(cfg, key, value);
    }
    if (!out_flag.empty()) cfg.out = out_flag;
    if (const char* env = std::getenv("SLED_SEED")) {
        try {
            std::size_t used = 0;
            cfg.seed = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument(env);
        } catch (const std::exception&) {
            throw ParamError(std::string("SLED_SEED must be an unsigned integer, got '") + env +
                             "'");
        }
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

std::string sample_name(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", index);
    return buf;
}

// dataset rows ready for training/prediction
struct LoadedSample {
    StereoSample raw;
    TrainSample ts;
};

std::vector<LoadedSample> load_dataset(const RunConfig& cfg) {
    if (cfg.manifest.empty()) throw ParamError("this command needs a dataset manifest");
    const Manifest m = load_manifest(cfg.manifest);
    std::vector<LoadedSample> out;
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        LoadedSample s;
        s.raw = load_sample(m.samples[i], i);
        s.ts.left = image_to_tensor(s.raw.left);
        s.ts.right = image_to_tensor(s.raw.right);
        s.ts.gt = s.raw.gt.values;
        s.ts.valid = s.raw.gt.valid;
        out.push_back(std::move(s));
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw ParseError("cannot write " + path.string());
    os << text;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// region reports ("All" + optional "Noc") as one JSON object
std::string reports_json(const std::vector<MetricReport>& reports, int indent) {
    const std::string pad(static_cast<std::size_t>(indent), ' ');
    const std::string in(static_cast<std::size_t>(indent) + 2, ' ');
    std::ostringstream os;
    os << "{\n";
    for (std::size_t i = 0; i < reports.size(); ++i)
        os << in << "\"" << reports[i].region << "\": " << reports[i].to_json(indent + 2)
           << (i + 1 < reports.size() ? ",\n" : "\n");
    os << pad << "}";
    return os.str();
}

int cmd_gradcheck(const RunConfig& cfg) {
    if (cfg.any_train_key)
        std::fprintf(stderr, "warning: train.* settings are irrelevant to gradcheck; ignored\n");
    GradCheckOptions opt = cfg.gc;
    if (cfg.seed != 0) opt.seed = cfg.seed;
    const std::vector<GradCheckResult> results = run_gradcheck(opt);
    for (const auto& r : results)
        std::printf("%-22s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                    r.passed ? "pass" : "FAIL");
    if (!all_passed(results)) {
        for (const auto& r : results)
            if (!r.passed)
                std::fprintf(stderr, "gradcheck failed for op '%s' (%.3e >= %.1e)\n",
                             r.name.c_str(), r.max_rel_err, opt.tolerance);
        return 3;
    }
    std::printf("all %zu gradient checks passed\n", results.size());
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    std::vector<LoadedSample> data = load_dataset(cfg);
    std::vector<TrainSample> ds;
    for (auto& s : data) ds.push_back(s.ts);
    StereoModel model(cfg.model, cfg.seed);
    if (!cfg.checkpoint.empty()) load_checkpoint(model, cfg.checkpoint);

    fs::create_directories(cfg.out);
    std::ostringstream csv;
    csv << "epoch,lr,loss,epe\n";
    const std::vector<EpochLog> log =
        train(model, ds, cfg.train, [&](const EpochLog& e) {
            csv << e.epoch << "," << fmt_double(e.lr) << "," << fmt_double(e.loss) << ","
                << fmt_double(e.epe) << "\n";
        });
    write_text(fs::path(cfg.out) / "loss.csv", csv.str());
    save_checkpoint(model, (fs::path(cfg.out) / "checkpoint.bin").string());
    if (!log.empty())
        std::printf("trained %d epochs: final loss %.6f, training EPE %.6f px\n",
                    static_cast<int>(log.size()), log.back().loss, log.back().epe);
    std::printf("wrote %s and %s\n", (fs::path(cfg.out) / "checkpoint.bin").c_str(),
                (fs::path(cfg.out) / "loss.csv").c_str());
    return 0;
}

// Shared by eval/ablation: counts per region, merged across samples.
struct RegionCounts {
    MetricCounts all;
    std::optional<MetricCounts> noc;

    void merge(const RegionCounts& o) {
        all.merge(o.all);
        if (o.noc) {
            if (!noc) noc = MetricCounts{};
            noc->merge(*o.noc);
        }
    }
    std::vector<MetricReport> reports() const {
        std::vector<MetricReport> r{all.report("All")};
        if (noc) r.push_back(noc->report("Noc"));
        return r;
    }
};

RegionCounts sample_counts(const std::vector<double>& pred, const DisparityMap& gt,
                           const Mask& fg, const Mask& noc, int max_disp) {
    const Mask valid = loss_mask(gt.values, gt.valid, max_disp);
    RegionCounts rc;
    rc.all = accumulate_counts(pred, gt.values, valid, fg);
    if (!noc.empty()) {
        Mask sel(valid.size());
        for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = valid[i] && noc[i];
        rc.noc = accumulate_counts(pred, gt.values, sel, fg);
    }
    return rc;
}

int cmd_eval(const RunConfig& cfg) {
    if (cfg.manifest.empty()) throw ParamError("eval needs a dataset manifest");
    const Manifest m = load_manifest(cfg.manifest);
    std::optional<StereoModel> model;

    RegionCounts total;
    std::vector<std::string> sample_blocks;
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const SampleSpec& spec = m.samples[i];
        StereoSample raw = load_sample(spec, i);
        std::vector<double> pred;
        if (!spec.pred.empty()) {
            const DisparityMap p = load_pred(spec, i);
            if (p.width != raw.gt.width || p.height != raw.gt.height)
                throw ManifestError("sample " + std::to_string(i) +
                                    ": pred dimensions do not match gt");
            pred = p.values;
        } else {
            if (!model) {
                model.emplace(cfg.model, cfg.seed);
                if (!cfg.checkpoint.empty())
                    load_checkpoint(*model, cfg.checkpoint);
                else
                    std::fprintf(stderr,
                                 "warning: eval without a checkpoint uses untrained weights\n");
                model->eval();
            }
            ModelOutputs out = model->forward(image_to_tensor(raw.left),
                                              image_to_tensor(raw.right));
            pred = out.refined.data();
        }
        RegionCounts rc = sample_counts(pred, raw.gt, raw.fg, raw.noc, cfg.model.max_disp);
        total.merge(rc);
        sample_blocks.push_back(reports_json(rc.reports(), 4));
    }
    if (m.samples.empty()) throw EvalError("eval: manifest lists no samples");

    std::ostringstream doc;
    doc << "{\n  \"samples\": [\n";
    for (std::size_t i = 0; i < sample_blocks.size(); ++i)
        doc << "    " << sample_blocks[i] << (i + 1 < sample_blocks.size() ? ",\n" : "\n");
    doc << "  ],\n  \"aggregate\": " << reports_json(total.reports(), 2) << "\n}\n";
    fs::create_directories(cfg.out);
    write_text(fs::path(cfg.out) / "metrics.json", doc.str());

    for (const MetricReport& r : total.reports())
        for (const std::string& line : r.to_kv()) std::printf("%s\n", line.c_str());
    std::printf("wrote %s\n", (fs::path(cfg.out) / "metrics.json").c_str());
    return 0;
}

int cmd_predict(const RunConfig& cfg) {
    std::vector<LoadedSample> data = load_dataset(cfg);
    StereoModel model(cfg.model, cfg.seed);
    if (!cfg.checkpoint.empty()) load_checkpoint(model, cfg.checkpoint);
    model.eval();
    const fs::path disp_dir = fs::path(cfg.out) / "disp";
    fs::create_directories(disp_dir);
    for (std::size_t i = 0; i < data.size(); ++i) {
        ModelOutputs out = model.forward(data[i].ts.left, data[i].ts.right);
        DisparityMap pred;
        pred.width = data[i].raw.gt.width;
        pred.height = data[i].raw.gt.height;
        pred.values = out.refined.data();
        pred.valid.assign(pred.values.size(), 1);
        const std::string base = sample_name(i);
        write_kitti_disp(pred, (disp_dir / (base + ".png")).string());
        write_image_png(colorize_disparity(pred, cfg.model.max_disp),
                        (disp_dir / (base + "_color.png")).string());
        std::printf("sample %zu -> %s\n", i, (disp_dir / (base + ".png")).c_str());
    }
    return 0;
}

int cmd_ablation(const RunConfig& cfg) {
    struct Row {
        std::string name;
        std::int64_t params = 0;
        std::optional<MetricReport> metrics;
    };
    std::vector<Row> rows;
    std::vector<LoadedSample> data;
    std::vector<TrainSample> ds;
    if (cfg.ablation_train) {
        data = load_dataset(cfg);
        for (auto& s : data) ds.push_back(s.ts);
    }
    for (const std::string& token : cfg.variants) {
        ModelConfig mc = cfg.model;
        mc.regularizer = regularizer_from_token(token);
        Row row;
        row.name = regularizer_display(mc.regularizer);
        row.params = count_parameters(mc);
        if (cfg.ablation_train) {
            StereoModel model(mc, cfg.seed);
            TrainConfig tc = cfg.train;
            tc.loss_weights.clear();  // all ones, sized per variant
            train(model, ds, tc);
            model.eval();
            RegionCounts total;
            for (auto& s : data) {
                ModelOutputs out = model.forward(s.ts.left, s.ts.right);
                total.merge(sample_counts(out.refined.data(), s.raw.gt, s.raw.fg, s.raw.noc,
                                          mc.max_disp));
            }
            row.metrics = total.all.report("All");
        }
        rows.push_back(std::move(row));
    }

    auto pct = [](const std::optional<MetricReport>& m, int t) {
        if (!m || !m->gt_px.count(t) || !m->gt_px.at(t)) return std::string("-");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f%%", *m->gt_px.at(t));
        return std::string(buf);
    };
    std::ostringstream md;
    md << "| Model | >1px | >3px | >5px | EPE | D1-all | Para. |\n";
    md << "|---|---|---|---|---|---|---|\n";
    for (const Row& r : rows) {
        std::string epe = "-", d1 = "-";
        if (r.metrics && r.metrics->epe) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.3f", *r.metrics->epe);
            epe = buf;
        }
        if (r.metrics && r.metrics->d1_all) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.2f%%", *r.metrics->d1_all);
            d1 = buf;
        }
        md << "| " << r.name << " | " << pct(r.metrics, 1) << " | " << pct(r.metrics, 3) << " | "
           << pct(r.metrics, 5) << " | " << epe << " | " << d1 << " | " << r.params << " |\n";
    }
    fs::create_directories(cfg.out);
    write_text(fs::path(cfg.out) / "table.md", md.str());
    std::printf("%s", md.str().c_str());
    std::printf("wrote %s\n", (fs::path(cfg.out) / "table.md").c_str());
    return 0;
}

int cmd_synth(const RunConfig& cfg) {
    if (cfg.synth_count < 1) throw ParamError("synth.count must be >= 1");
    fs::create_directories(cfg.out);
    std::ostringstream manifest;
    manifest << "{\n  \"samples\": [\n";
    for (int i = 0; i < cfg.synth_count; ++i) {
        SyntheticSpec spec = cfg.synth;
        spec.seed = cfg.seed + static_cast<std::uint64_t>(i);
        const StereoSample s = generate_stereogram(spec);
        const std::string base = sample_name(static_cast<std::size_t>(i));
        write_image_png(s.left, (fs::path(cfg.out) / (base + "_left.png")).string());
        write_image_png(s.right, (fs::path(cfg.out) / (base + "_right.png")).string());
        write_pfm(s.gt, (fs::path(cfg.out) / (base + "_gt.pfm")).string());
        write_mask_png(s.noc, s.gt.width, s.gt.height,
                       (fs::path(cfg.out) / (base + "_noc.png")).string());
        manifest << "    {\"left\": \"" << base << "_left.png\", \"right\": \"" << base
                 << "_right.png\", \"gt\": \"" << base << "_gt.pfm\", \"noc\": \"" << base
                 << "_noc.png\"";
        if (!s.fg.empty()) {
            write_mask_png(s.fg, s.gt.width, s.gt.height,
                           (fs::path(cfg.out) / (base + "_fg.png")).string());
            manifest << ", \"fg\": \"" << base << "_fg.png\"";
        }
        manifest << "}" << (i + 1 < cfg.synth_count ? "," : "") << "\n";
    }
    manifest << "  ]\n}\n";
    write_text(fs::path(cfg.out) / "manifest.json", manifest.str());
    std::printf("wrote %d samples and %s\n", cfg.synth_count,
                (fs::path(cfg.out) / "manifest.json").c_str());
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"stereo disparity network: train, evaluate, predict, verify, synthesize"};
    app.require_subcommand(1);
    std::string config_path, out_flag;
    std::vector<std::string> sets;
    for (const char* name : {"gradcheck", "train", "eval", "predict", "ablation", "synth"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", sets, "dotted key=value override (repeatable)");
        sub->add_option("--out", out_flag, "output directory");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    try {
        const RunConfig cfg = build_config(config_path, sets, out_flag);
        if (cmd == "gradcheck") return cmd_gradcheck(cfg);
        if (cmd == "train") return cmd_train(cfg);
        if (cmd == "eval") return cmd_eval(cfg);
        if (cmd == "predict") return cmd_predict(cfg);
        if (cmd == "ablation") return cmd_ablation(cfg);
        if (cmd == "synth") return cmd_synth(cfg);
        throw ParamError("unknown command " + cmd);
    } catch (const ParamError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::runtime_error& e) {  // parse/format/manifest/eval/train/compat
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    }
}

}  // namespace sled
