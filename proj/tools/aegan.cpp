// aegan: experiment driver for phantom generation, SSP pre-training, GAN
// training, evaluation and plotting.

#include "aegan/error.hpp"
#include "aegan/gan.hpp"
#include "aegan/json_reader.hpp"
#include "aegan/metrics.hpp"
#include "aegan/phantom.hpp"
#include "aegan/rng.hpp"
#include "aegan/ssp.hpp"
#include "aegan/volume.hpp"

#include "plots.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace aegan;

namespace {

constexpr int kSchemaVersion = 1;

const std::set<std::string> kTopKeys{"schema_version", "command", "seed",  "deterministic", "out",
                                     "phantom",        "dataset", "manifest", "ssp",        "train",
                                     "ablation",       "eval"};

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool deterministic = false;
};

struct Experiment {
    json root;
    fs::path config_dir;
    std::uint64_t seed = 0;
    fs::path out;
    std::string command;
    bool deterministic = false;
};

std::string sha256_hex(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

Experiment load_experiment(const Globals& g, const std::string& command) {
    if (g.config_path.empty()) throw ArgumentError("--config is required");
    const fs::path path(g.config_path);
    if (!fs::is_regular_file(path)) throw ArgumentError("config file not found: " + path.string());
    Experiment e;
    std::ifstream in(path);
    try {
        e.root = json::parse(in);
    } catch (const json::parse_error& err) {
        throw SchemaError("<root>", std::string("invalid JSON: ") + err.what());
    }
    if (!e.root.is_object()) throw SchemaError("<root>", "expected an object");
    for (const auto& [k, v] : e.root.items())
        if (!kTopKeys.contains(k)) throw SchemaError(k, "unknown key");
    if (!e.root.contains("schema_version")) throw SchemaError("schema_version", "missing required key");
    if (!e.root["schema_version"].is_number_integer() || e.root["schema_version"].get<int>() != kSchemaVersion)
        throw SchemaError("schema_version", "unsupported version (expected " + std::to_string(kSchemaVersion) + ")");
    if (e.root.contains("command")) {
        const auto& c = e.root["command"];
        if (!c.is_string()) throw SchemaError("command", "expected a string");
        const auto echoed = c.get<std::string>();
        if (echoed != command && !(echoed == "ablate" && command == "train"))
            throw SchemaError("command", "config was frozen for '" + echoed + "'");
    }
    if (e.root.contains("seed") && !e.root["seed"].is_number_unsigned())
        throw SchemaError("seed", "expected a non-negative integer");
    if (e.root.contains("out") && !e.root["out"].is_string()) throw SchemaError("out", "expected a string");
    if (e.root.contains("deterministic") && !e.root["deterministic"].is_boolean())
        throw SchemaError("deterministic", "expected a boolean");

    e.config_dir = fs::absolute(path).parent_path();
    e.command = command;
    e.seed = g.seed ? *g.seed : e.root.value("seed", std::uint64_t{0});
    e.deterministic = g.deterministic || e.root.value("deterministic", false);
    if (!g.out.empty()) {
        e.out = g.out;
    } else if (e.root.contains("out")) {
        e.out = e.config_dir / e.root["out"].get<std::string>();
    } else if (const char* cache = std::getenv("AEGAN_CACHE"); cache && command == "phantom-gen") {
        e.out = fs::path(cache) / ("phantoms-seed" + std::to_string(e.seed));
    } else {
        e.out = fs::path("runs") / command;
    }
    return e;
}

const json& section(const Experiment& e, const std::string& key) {
    if (!e.root.contains(key)) throw SchemaError(key, "missing required section");
    return e.root.at(key);
}

// Relative artifact paths resolve against the config directory, then AEGAN_CACHE.
fs::path resolve_artifact(const Experiment& e, const std::string& key_path, const fs::path& p) {
    if (p.is_absolute()) {
        if (!fs::exists(p)) throw IoError(key_path + ": not found: " + p.string());
        return p;
    }
    std::vector<fs::path> tries{e.config_dir / p, fs::current_path() / p};
    if (const char* cache = std::getenv("AEGAN_CACHE")) tries.push_back(fs::path(cache) / p);
    for (const auto& t : tries)
        if (fs::exists(t)) return fs::weakly_canonical(t);
    throw IoError(key_path + ": not found: " + p.string());
}

fs::path prepare_run_dir(const Experiment& e) {
    std::error_code ec;
    fs::create_directories(e.out, ec);
    if (ec || !fs::is_directory(e.out)) throw IoError("cannot create run directory " + e.out.string());
    return e.out;
}

json echo_base(const Experiment& e) {
    return json{{"schema_version", kSchemaVersion},
                {"command", e.command},
                {"seed", e.seed},
                {"deterministic", e.deterministic}};
}

fs::path manifest_path(const Experiment& e) {
    const auto m = section(e, "manifest");
    if (!m.is_string()) throw SchemaError("manifest", "expected a path string");
    return resolve_artifact(e, "manifest", m.get<std::string>());
}

std::vector<int> drf_values(const std::vector<DoseLevel>& drfs) {
    std::vector<int> out;
    for (auto d : drfs) out.push_back(d.value());
    return out;
}

// ---- phantom-gen -----------------------------------------------------------

VolumeFormat format_from_string(const std::string& s) {
    if (s == "raw") return VolumeFormat::Raw;
    if (s == "nifti") return VolumeFormat::Nifti;
    if (s == "nifti.gz") return VolumeFormat::NiftiGz;
    throw SchemaError("dataset.format", "expected raw, nifti or nifti.gz");
}

std::string to_string(VolumeFormat f) {
    switch (f) {
    case VolumeFormat::Raw: return "raw";
    case VolumeFormat::Nifti: return "nifti";
    case VolumeFormat::NiftiGz: return "nifti.gz";
    }
    return "raw";
}

DatasetOptions parse_dataset(const Experiment& e) {
    DatasetOptions opt;
    opt.base = parse_phantom_spec(section(e, "phantom"), "phantom");
    if (e.root.contains("dataset")) {
        JsonReader r(e.root.at("dataset"), "dataset");
        opt.n_subjects = r.get_or<Index>("subjects", opt.n_subjects);
        if (r.has("drfs")) {
            opt.drfs.clear();
            try {
                for (int d : r.get<std::vector<int>>("drfs")) opt.drfs.emplace_back(d);
            } catch (const ArgumentError& err) {
                r.fail("drfs", err.what());
            }
        }
        opt.format = format_from_string(r.get_or<std::string>("format", "raw"));
        if (r.has("split")) {
            auto s = r.child("split");
            opt.ratios.train = s.get<double>("train");
            opt.ratios.val = s.get<double>("val");
            opt.ratios.test = s.get<double>("test");
            s.finish();
        }
        r.finish();
    }
    opt.seed = e.seed;
    return opt;
}

int cmd_phantom_gen(const Globals& g) {
    const auto e = load_experiment(g, "phantom-gen");
    const auto opt = parse_dataset(e);
    const auto dir = prepare_run_dir(e);
    const auto manifest = build_dataset(opt, dir);

    json echo = echo_base(e);
    json phantom;
    to_json(phantom, opt.base);
    echo["phantom"] = phantom;
    echo["dataset"] = {{"subjects", opt.n_subjects},
                       {"drfs", drf_values(opt.drfs)},
                       {"format", to_string(opt.format)},
                       {"split", {{"train", opt.ratios.train}, {"val", opt.ratios.val}, {"test", opt.ratios.test}}}};
    write_json(echo, dir / "config.json");

    std::uintmax_t bytes = 0;
    std::size_t files = 0;
    for (const auto& entry : manifest.entries) {
        bytes += fs::file_size(entry.full);
        ++files;
        for (const auto& [drf, p] : entry.low) {
            bytes += fs::file_size(p);
            ++files;
        }
    }
    std::cout << "subjects: " << manifest.entries.size() << '\n'
              << "drfs: " << json(drf_values(opt.drfs)).dump() << '\n'
              << "volumes: " << files << '\n'
              << "bytes: " << bytes << '\n'
              << "manifest: " << (dir / "manifest.json").string() << '\n'
              << "manifest_sha256: " << sha256_hex(dir / "manifest.json") << '\n';
    return 0;
}

// ---- pretrain --------------------------------------------------------------

int cmd_pretrain(const Globals& g) {
    const auto e = load_experiment(g, "pretrain");
    json ssp_json = e.root.contains("ssp") ? e.root["ssp"] : json::object();
    if (!ssp_json.is_object()) throw SchemaError("ssp", "expected an object");
    int base = 16;
    if (ssp_json.contains("base_channels")) {
        if (!ssp_json["base_channels"].is_number_integer()) throw SchemaError("ssp.base_channels", "expected an integer");
        base = ssp_json["base_channels"].get<int>();
        ssp_json.erase("base_channels");
    }
    SspConfig cfg = parse_ssp_config(ssp_json, "ssp");
    cfg.seed = e.seed;
    const auto manifest = DatasetManifest::load(manifest_path(e));

    std::vector<SspSource> sources;
    for (const auto* entry : manifest.subjects_in(Bucket::Train))
        for (const auto& [drf, p] : entry->low) sources.push_back({load_volume(p), entry->subject + "_drf" + std::to_string(drf)});
    if (sources.empty()) throw DataError("manifest has no low-dose training volumes");

    const auto spec = nn::NetworkSpec::pixel_net(base);
    nn::PixelEncoder<float> encoder(spec, derive_seed(e.seed, {1}));
    nn::SspHeads<float> heads(spec, derive_seed(e.seed, {2}));
    const auto dir = prepare_run_dir(e);
    const auto result = pretrain(encoder, heads, sources, cfg);

    json ssp_echo;
    to_json(ssp_echo, cfg);
    ssp_echo["base_channels"] = base;
    json echo = echo_base(e);
    echo["manifest"] = manifest_path(e).string();
    echo["ssp"] = ssp_echo;
    write_json(echo, dir / "config.json");
    write_ssp_log(result.log, dir / "ssp_log.csv");
    save_encoder(dir / "encoder.ckpt", encoder, {{"ssp", ssp_echo}, {"seed", e.seed}});

    const auto& last = result.log.back();
    std::cout << "steps: " << result.log.size() << '\n'
              << "final_total: " << last.total << '\n'
              << "rotation_accuracy: " << last.rotation_accuracy << '\n'
              << "encoder: " << (dir / "encoder.ckpt").string() << '\n';
    return 0;
}

// ---- train / ablate --------------------------------------------------------

const std::map<std::string, std::string> kAblations{
    {"full", "Pixel-Net + AE-Net + discriminator"},
    {"pixel-only", "Pixel-Net alone"},
    {"pixel-ae", "Pixel-Net + AE-Net, no discriminator"},
    {"pixel-dis", "Pixel-Net + discriminator, no AE-Net"},
    {"ar", "additive residual in place of the AE-Net"},
    {"no-ssp", "random encoder initialization"},
};

void apply_ablation(TrainConfig& c, const std::string& name) {
    if (name == "full") {
        c.residual_mode = ResidualMode::AE;
        c.use_discriminator = true;
    } else if (name == "pixel-only") {
        c.residual_mode = ResidualMode::None;
        c.use_discriminator = false;
    } else if (name == "pixel-ae") {
        c.residual_mode = ResidualMode::AE;
        c.use_discriminator = false;
    } else if (name == "pixel-dis") {
        c.residual_mode = ResidualMode::None;
        c.use_discriminator = true;
    } else if (name == "ar") {
        c.residual_mode = ResidualMode::AR;
    } else if (name == "no-ssp") {
        c.pretrained_encoder.reset();
    } else {
        std::string known;
        for (const auto& [k, v] : kAblations) known += (known.empty() ? "" : ", ") + k;
        throw SchemaError("ablation", "unknown ablation '" + name + "' (expected one of " + known + ")");
    }
}

int run_train(const Globals& g, const std::string& command, const std::string& ablation_flag) {
    const auto e = load_experiment(g, command);
    TrainConfig cfg = parse_train_config(section(e, "train"), "train");
    cfg.seed = e.seed;
    if (cfg.pretrained_encoder)
        cfg.pretrained_encoder = resolve_artifact(e, "train.pretrained_encoder", *cfg.pretrained_encoder);

    std::string ablation = ablation_flag;
    if (ablation.empty() && e.root.contains("ablation")) {
        if (!e.root["ablation"].is_string()) throw SchemaError("ablation", "expected a string");
        ablation = e.root["ablation"].get<std::string>();
    }
    if (command == "ablate" && ablation.empty()) throw ArgumentError("ablate needs --ablation or an \"ablation\" key");
    if (!ablation.empty()) apply_ablation(cfg, ablation);
    cfg.validate();

    const auto mpath = manifest_path(e);
    const auto manifest = DatasetManifest::load(mpath);
    auto train = load_pair_sources(manifest, Bucket::Train, cfg.drf_mix);
    auto val = manifest.subjects_in(Bucket::Val).empty() ? std::vector<PairSource>{}
                                                          : load_pair_sources(manifest, Bucket::Val, cfg.drf_mix);
    const auto dir = prepare_run_dir(e);

    json train_echo;
    to_json(train_echo, cfg);
    json echo = echo_base(e);
    echo["manifest"] = mpath.string();
    echo["train"] = train_echo;
    if (!ablation.empty()) echo["ablation"] = ablation;
    write_json(echo, dir / "config.json");

    Trainer trainer(cfg, std::move(train), std::move(val));
    for (int epoch = 0; epoch < cfg.max_epochs && !trainer.schedule().stop; ++epoch) {
        const auto rec = trainer.run_epoch();
        std::cout << "epoch " << rec.epoch << " lr " << rec.lr << " L_content " << rec.content << " val_psnr "
                  << rec.val_psnr << '\n';
    }
    write_train_log(trainer.log(), cfg, dir / "train_log.csv");
    trainer.save_checkpoint(dir / "model.ckpt");

    std::ofstream steps(dir / "step_log.csv");
    steps.precision(10);
    steps << "step,epoch,L_content,total,drfs\n";
    for (const auto& s : trainer.log().steps) {
        std::string drfs;
        for (int d : s.drfs) drfs += (drfs.empty() ? "" : ";") + std::to_string(d);
        steps << s.step << ',' << s.epoch << ',' << s.content << ',' << s.total << ',' << drfs << '\n';
    }
    std::cout << "checkpoint: " << (dir / "model.ckpt").string() << '\n';
    return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
    fs::path checkpoint;
    Bucket bucket = Bucket::Test;
    std::vector<int> drfs{4, 10, 20, 50, 100};
    std::optional<Extent3> patch_shape;
    std::optional<Extent3> stride;
    int batch_size = 4;
    bool roi = false;
    double roi_diameter_mm = 20.0;
    bool ttest = false;
    std::string ttest_metric = "psnr";
    std::optional<fs::path> ttest_baseline;
    int kfold = 0;
};

EvalOptions parse_eval(const Experiment& e) {
    JsonReader r(section(e, "eval"), "eval");
    EvalOptions o;
    o.checkpoint = r.get<std::string>("checkpoint");
    try {
        o.bucket = bucket_from_string(r.get_or<std::string>("bucket", "test"));
    } catch (const ArgumentError& err) {
        r.fail("bucket", err.what());
    }
    o.drfs = r.get_or("drfs", o.drfs);
    for (int d : o.drfs) {
        try {
            if (DoseLevel(d).is_full()) r.fail("drfs", "full dose is not a reduced level");
        } catch (const SchemaError&) {
            throw;
        } catch (const ArgumentError& err) {
            r.fail("drfs", err.what());
        }
    }
    if (r.has("patch_shape")) o.patch_shape = r.extent("patch_shape");
    if (r.has("stride")) o.stride = r.extent("stride");
    o.batch_size = r.get_or("batch_size", o.batch_size);
    if (r.has("roi")) {
        auto s = r.child("roi");
        o.roi = true;
        o.roi_diameter_mm = s.get_or("diameter_mm", o.roi_diameter_mm);
        s.finish();
    }
    if (r.has("ttest")) {
        auto s = r.child("ttest");
        o.ttest = true;
        o.ttest_metric = s.get_or<std::string>("metric", o.ttest_metric);
        if (o.ttest_metric != "psnr" && o.ttest_metric != "ssim" && o.ttest_metric != "nrmse")
            s.fail("metric", "expected psnr, ssim or nrmse");
        if (s.has("baseline")) o.ttest_baseline = s.get<std::string>("baseline");
        s.finish();
    }
    if (r.has("kfold")) {
        auto s = r.child("kfold");
        o.kfold = s.get<int>("k");
        if (o.kfold < 2) s.fail("k", "expected >= 2");
        s.finish();
    }
    r.finish();
    return o;
}

double metric_of(const MetricTriple& t, const std::string& m) {
    return m == "psnr" ? t.psnr : m == "ssim" ? t.ssim : t.nrmse;
}

json triple(const MetricTriple& t) { return {{"psnr", t.psnr}, {"ssim", t.ssim}, {"nrmse", t.nrmse}}; }

int cmd_eval(const Globals& g) {
    const auto e = load_experiment(g, "eval");
    auto opt = parse_eval(e);
    opt.checkpoint = resolve_artifact(e, "eval.checkpoint", opt.checkpoint);
    if (opt.ttest_baseline) opt.ttest_baseline = resolve_artifact(e, "eval.ttest.baseline", *opt.ttest_baseline);
    const auto mpath = manifest_path(e);
    const auto manifest = DatasetManifest::load(mpath);
    auto model = SynthesisModel::load(opt.checkpoint);
    model.set_training(false);

    PatchGridSpec grid;
    grid.patch_shape = opt.patch_shape.value_or(model.config().patch_shape);
    grid.stride = opt.stride.value_or(Extent3{grid.patch_shape.x / 2, grid.patch_shape.y / 2, grid.patch_shape.z / 2});

    const auto subjects = manifest.subjects_in(opt.bucket);
    if (subjects.empty()) throw DataError(std::string("no subjects in bucket '") + to_string(opt.bucket) + "'");

    MetricsReport report;
    for (const auto* entry : subjects) {
        const Volume full = load_volume(entry->full);
        for (int drf : opt.drfs) {
            const auto it = entry->low.find(drf);
            if (it == entry->low.end())
                throw DataError("subject " + entry->subject + " has no DRF " + std::to_string(drf) + " volume");
            const Volume low = load_volume(it->second);
            const Volume synth = infer_volume(model, low, grid, opt.batch_size);
            report.rows.push_back({entry->subject, drf, evaluate_pair(full, synth), evaluate_pair(full, low)});
            if (opt.roi) {
                if (entry->liver_center_mm.size() != 3)
                    throw DataError("manifest has no liver center for " + entry->subject);
                RoiSphere roi;
                roi.center_mm = Eigen::Vector3d(entry->liver_center_mm[0], entry->liver_center_mm[1],
                                                entry->liver_center_mm[2]);
                roi.diameter_mm = opt.roi_diameter_mm;
                roi.validate(full);
                const auto ref = roi_suv_stats(full, roi);
                const auto pred = roi_suv_stats(synth, roi);
                report.roi.push_back({entry->subject, drf, ref, pred, percentage_error(ref.suv_max, pred.suv_max),
                                      percentage_error(ref.suv_mean, pred.suv_mean)});
            }
        }
    }
    report.aggregate();

    json out = report;
    out["checkpoint"] = opt.checkpoint.string();
    out["bucket"] = to_string(opt.bucket);

    if (opt.ttest) {
        std::vector<double> a, b;
        std::string against = "input";
        if (opt.ttest_baseline) {
            const auto base = report_from_json(read_json(*opt.ttest_baseline));
            std::map<std::pair<std::string, int>, double> lookup;
            for (const auto& row : base.rows) lookup[{row.subject, row.drf}] = metric_of(row.synthesized, opt.ttest_metric);
            for (const auto& row : report.rows) {
                const auto it = lookup.find({row.subject, row.drf});
                if (it == lookup.end())
                    throw DataError("baseline report lacks " + row.subject + " at DRF " + std::to_string(row.drf));
                a.push_back(metric_of(row.synthesized, opt.ttest_metric));
                b.push_back(it->second);
            }
            against = opt.ttest_baseline->string();
        } else {
            for (const auto& row : report.rows) {
                a.push_back(metric_of(row.synthesized, opt.ttest_metric));
                b.push_back(metric_of(row.input, opt.ttest_metric));
            }
        }
        const auto t = paired_ttest(a, b);
        out["ttest"] = {{"metric", opt.ttest_metric}, {"against", against}, {"t", t.t}, {"p", t.p}, {"dof", t.dof}};
    }

    if (opt.kfold > 0) {
        const auto folds = kfold_split(static_cast<Index>(subjects.size()), opt.kfold, e.seed);
        json arr = json::array();
        for (const auto& f : folds) {
            std::vector<std::string> ids;
            MetricTriple mean;
            int n = 0;
            for (Index i : f.val) ids.push_back(subjects[static_cast<std::size_t>(i)]->subject);
            for (const auto& row : report.rows)
                if (std::find(ids.begin(), ids.end(), row.subject) != ids.end()) {
                    mean.psnr += row.synthesized.psnr;
                    mean.ssim += row.synthesized.ssim;
                    mean.nrmse += row.synthesized.nrmse;
                    ++n;
                }
            if (n > 0) mean = {mean.psnr / n, mean.ssim / n, mean.nrmse / n};
            arr.push_back({{"val_subjects", ids}, {"mean", triple(mean)}});
        }
        out["kfold"] = {{"k", opt.kfold}, {"folds", arr}};
    }

    const auto dir = prepare_run_dir(e);
    json eval_echo{{"checkpoint", opt.checkpoint.string()},
                   {"bucket", to_string(opt.bucket)},
                   {"drfs", opt.drfs},
                   {"patch_shape", {grid.patch_shape.x, grid.patch_shape.y, grid.patch_shape.z}},
                   {"stride", {grid.stride.x, grid.stride.y, grid.stride.z}},
                   {"batch_size", opt.batch_size}};
    if (opt.roi) eval_echo["roi"] = {{"diameter_mm", opt.roi_diameter_mm}};
    if (opt.ttest) {
        eval_echo["ttest"] = {{"metric", opt.ttest_metric}};
        if (opt.ttest_baseline) eval_echo["ttest"]["baseline"] = opt.ttest_baseline->string();
    }
    if (opt.kfold > 0) eval_echo["kfold"] = {{"k", opt.kfold}};
    json echo = echo_base(e);
    echo["manifest"] = mpath.string();
    echo["eval"] = eval_echo;
    write_json(echo, dir / "config.json");
    write_json(out, dir / "report.json");
    report.write_csv(dir / "metrics.csv");

    for (const auto& [drf, t] : report.per_drf)
        std::cout << "drf " << drf << " psnr " << t.psnr << " ssim " << t.ssim << " nrmse " << t.nrmse << '\n';
    if (report.weighted_as_tables)
        std::cout << "weighted(as_tables) psnr " << report.weighted_as_tables->psnr << '\n';
    std::cout << "report: " << (dir / "report.json").string() << '\n';
    return 0;
}

// ---- plot ------------------------------------------------------------------

int cmd_plot(const std::vector<std::string>& paths, std::vector<std::string> labels, const std::string& out) {
    if (paths.empty()) throw ArgumentError("plot needs at least one report");
    if (!labels.empty() && labels.size() != paths.size()) throw ArgumentError("--labels must match the report count");
    std::vector<plots::Series> reports;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const fs::path p(paths[i]);
        if (!fs::is_regular_file(p)) throw ArgumentError("report not found: " + p.string());
        auto report = report_from_json(read_json(p));
        if (report.rows.empty() || report.per_drf.empty()) throw ArgumentError("empty report: " + p.string());
        std::string label = labels.empty() ? p.parent_path().filename().string() : labels[i];
        if (label.empty()) label = p.stem().string();
        reports.push_back({label, std::move(report)});
    }
    const fs::path dir = out.empty() ? fs::path("runs/plot") : fs::path(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create " + dir.string());

    std::vector<std::string> written;
    plots::metrics_by_drf(reports, dir / "metrics_by_drf.png");
    written.push_back("metrics_by_drf.png");
    plots::weighted_scores(reports, dir / "weighted_scores.png");
    written.push_back("weighted_scores.png");
    if (reports.size() >= 2) {
        plots::ssp_comparison(reports, dir / "ssp_comparison.png");
        written.push_back("ssp_comparison.png");
    }
    if (std::any_of(reports.begin(), reports.end(), [](const auto& r) { return !r.report.roi.empty(); })) {
        plots::roi_error_box(reports, dir / "roi_error_box.png");
        written.push_back("roi_error_box.png");
    }
    for (const auto& w : written) std::cout << (dir / w).string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised AE-GAN low-dose PET synthesis lab"};
    app.require_subcommand(1);
    Globals g;
    auto add_globals = [&g](CLI::App* sub) {
        sub->add_option("--config", g.config_path, "JSON experiment config");
        sub->add_option("--seed", g.seed, "global seed (overrides the config)");
        sub->add_option("--out", g.out, "run directory");
        sub->add_flag("--deterministic", g.deterministic, "single-threaded, reproducible execution");
    };

    auto* phantom = app.add_subcommand("phantom-gen", "generate a synthetic phantom dataset");
    auto* pre = app.add_subcommand("pretrain", "self-supervised encoder pre-training");
    auto* train = app.add_subcommand("train", "train the synthesis model");
    auto* ablate = app.add_subcommand("ablate", "train with a named ablation");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest bucket");
    auto* plot = app.add_subcommand("plot", "render report figures");
    for (auto* s : {phantom, pre, train, ablate, eval}) add_globals(s);

    std::string ablation;
    ablate->add_option("--ablation", ablation, "full, pixel-only, pixel-ae, pixel-dis, ar or no-ssp");

    std::vector<std::string> reports, labels;
    plot->add_option("reports", reports, "metrics report JSON files");
    plot->add_option("--labels", labels, "series labels, one per report");
    plot->add_option("--out", g.out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (g.deterministic) Eigen::setNbThreads(1);
        if (*phantom) return cmd_phantom_gen(g);
        if (*pre) return cmd_pretrain(g);
        if (*train) return run_train(g, "train", "");
        if (*ablate) return run_train(g, "ablate", ablation);
        if (*eval) return cmd_eval(g);
        if (*plot) return cmd_plot(reports, labels, g.out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
