#include "gradselect/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradselect/analysis.hpp"
#include "gradselect/error.hpp"
#include "gradselect/lexical.hpp"
#include "gradselect/pipeline.hpp"

namespace gradselect {

namespace fs = std::filesystem;

namespace {

// Config file plus flag overrides shared by the model-facing subcommands.
struct ConfigFlags {
    std::string path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<double> lr, m, n, alpha, beta;
    std::optional<std::size_t> k;
    std::optional<std::string> items, queries;

    void attach(CLI::App* app) {
        app->add_option("--config", path, "configuration file (JSON)");
        app->add_option("--set", sets, "override a config key: section.key=value")->take_all();
        app->add_option("--seed", seed, "train.seed");
        app->add_option("--epochs", epochs, "train.epochs");
        app->add_option("--lr", lr, "train.learning_rate");
        app->add_option("--m", m, "augment.m");
        app->add_option("--n", n, "augment.n");
        app->add_option("--alpha", alpha, "augment.alpha");
        app->add_option("--beta", beta, "augment.beta");
        app->add_option("--k", k, "itemaug.k");
        app->add_option("--items", items, "data.items");
        app->add_option("--queries", queries, "data.queries");
    }

    PipelineConfig load() const {
        nlohmann::json j = nlohmann::json::object();
        fs::path base;
        if (!path.empty()) {
            std::ifstream in(path);
            if (!in) throw UsageError("cannot open config " + path);
            try {
                j = nlohmann::json::parse(in);
            } catch (const nlohmann::json::parse_error& e) {
                throw UsageError("config " + path + " is not valid JSON: " + e.what());
            }
            base = fs::path(path).parent_path();
        }
        for (const auto& s : sets) apply_override(j, s);
        auto set = [&](const char* section, const char* key, const auto& v) {
            if (v) j[section][key] = *v;
        };
        set("train", "seed", seed);
        set("train", "epochs", epochs);
        set("train", "learning_rate", lr);
        set("augment", "m", m);
        set("augment", "n", n);
        set("augment", "alpha", alpha);
        set("augment", "beta", beta);
        set("itemaug", "k", k);
        // Paths given on the command line are taken relative to the working directory.
        if (items) j["data"]["items"] = fs::absolute(*items).string();
        if (queries) j["data"]["queries"] = fs::absolute(*queries).string();
        return config_from_json(j, base);
    }
};

std::vector<std::string> split_ids(const Dataset& data, const std::string& split) {
    if (split == "eval") return data.eval_ids;
    if (split == "train") return data.train_ids;
    if (split == "all") {
        std::vector<std::string> ids;
        for (const auto& q : data.queries) ids.push_back(q.id);
        return ids;
    }
    throw UsageError("--split must be eval, train or all");
}

ModelParams load_model(const fs::path& path, const Dataset& data) {
    ModelParams p = load_checkpoint(path);
    if (p.config.vocab_size != data.vocab.size())
        throw DataError("checkpoint " + path.string() + " was trained with a vocabulary of " +
                        std::to_string(p.config.vocab_size) + " tokens; the data yields " +
                        std::to_string(data.vocab.size()));
    return p;
}

QuerySet subset(const Dataset& data, std::span<const std::string> ids) {
    QuerySet out;
    for (const auto& id : ids) out.add(data.queries.at(id));
    return out;
}

void print_pairs(std::ostream& out, const std::vector<std::pair<std::string, double>>& values) {
    for (const auto& [k, v] : values) out << k << ' ' << v << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Gradient-selected augmentation for known-item retrieval"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "validate data files and build the vocabulary");
    std::string ingest_items, ingest_queries, ingest_out;
    std::size_t ingest_min_count = 1;
    ingest->add_option("--items", ingest_items)->required();
    ingest->add_option("--queries", ingest_queries)->required();
    ingest->add_option("--out", ingest_out, "output directory")->required();
    ingest->add_option("--min-count", ingest_min_count);

    // synth
    auto* synth = app.add_subcommand("synth", "generate the synthetic benchmark");
    std::string synth_config, synth_out;
    std::optional<std::uint64_t> synth_seed;
    synth->add_option("--config", synth_config);
    synth->add_option("--out", synth_out)->required();
    synth->add_option("--seed", synth_seed, "synth.seed");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a dual encoder (teacher stage)");
    ConfigFlags train_flags;
    std::string train_out;
    bool train_no_augment = false;
    train_flags.attach(train_cmd);
    train_cmd->add_option("--out", train_out, "output directory")->required();
    train_cmd->add_flag("--no-augment", train_no_augment, "plain cross-entropy");

    // itemaug
    auto* itemaug_cmd = app.add_subcommand("itemaug", "build augmented pairs and train a student");
    ConfigFlags itemaug_flags;
    std::string itemaug_teacher, itemaug_out;
    bool itemaug_pairs_only = false;
    itemaug_flags.attach(itemaug_cmd);
    itemaug_cmd->add_option("--teacher", itemaug_teacher, "teacher checkpoint")->required();
    itemaug_cmd->add_option("--out", itemaug_out, "output directory")->required();
    itemaug_cmd->add_flag("--pairs-only", itemaug_pairs_only, "skip student training");

    // retrieve
    auto* retrieve_cmd = app.add_subcommand("retrieve", "write a run file from a dense model");
    ConfigFlags retrieve_flags;
    std::string retrieve_model, retrieve_student, retrieve_out, retrieve_split = "eval";
    std::optional<std::size_t> retrieve_top_n;
    retrieve_flags.attach(retrieve_cmd);
    retrieve_cmd->add_option("--model", retrieve_model, "checkpoint")->required();
    retrieve_cmd->add_option("--student", retrieve_student, "student checkpoint; ensembles with --model");
    retrieve_cmd->add_option("--out", retrieve_out, "run file")->required();
    retrieve_cmd->add_option("--split", retrieve_split, "eval, train or all");
    retrieve_cmd->add_option("--top-n", retrieve_top_n);

    // bm25
    auto* bm25_cmd = app.add_subcommand("bm25", "write a BM25 run file");
    std::string bm25_items, bm25_queries, bm25_out;
    Bm25Params bm25_params;
    std::size_t bm25_top_n = 100;
    bm25_cmd->add_option("--items", bm25_items)->required();
    bm25_cmd->add_option("--queries", bm25_queries)->required();
    bm25_cmd->add_option("--out", bm25_out, "run file")->required();
    bm25_cmd->add_option("--k1", bm25_params.k1);
    bm25_cmd->add_option("--b", bm25_params.b);
    bm25_cmd->add_option("--top-n", bm25_top_n);

    // evaluate
    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a run file");
    std::string eval_run, eval_queries, eval_json, eval_text;
    bool eval_per_query = false;
    evaluate_cmd->add_option("--run", eval_run)->required();
    evaluate_cmd->add_option("--queries", eval_queries, "queries file with gold ids")->required();
    evaluate_cmd->add_option("--json", eval_json, "also write the report as JSON");
    evaluate_cmd->add_option("--text", eval_text, "also write the text report");
    evaluate_cmd->add_flag("--per-query", eval_per_query, "print the JSON report with per-query rows");

    // pilot
    auto* pilot_cmd = app.add_subcommand("pilot", "sentence-deletion study");
    ConfigFlags pilot_flags;
    std::string pilot_model, pilot_out, pilot_split = "eval";
    bool pilot_bm25 = false;
    pilot_flags.attach(pilot_cmd);
    pilot_cmd->add_option("--model", pilot_model, "dense checkpoint");
    pilot_cmd->add_flag("--bm25", pilot_bm25, "study the BM25 ranker instead");
    pilot_cmd->add_option("--split", pilot_split, "eval, train or all");
    pilot_cmd->add_option("--out", pilot_out, "report file")->required();

    // interval-ablation
    auto* interval_cmd = app.add_subcommand("interval-ablation", "retrain without importance intervals");
    ConfigFlags interval_flags;
    std::string interval_out;
    std::size_t interval_count = 5;
    interval_flags.attach(interval_cmd);
    interval_cmd->add_option("--intervals", interval_count);
    interval_cmd->add_option("--out", interval_out, "report file")->required();

    // aug-quality
    auto* quality_cmd = app.add_subcommand("aug-quality", "error rate and cosine distance of augmentations");
    ConfigFlags quality_flags;
    std::string quality_model, quality_out;
    quality_flags.attach(quality_cmd);
    quality_cmd->add_option("--model", quality_model, "checkpoint")->required();
    quality_cmd->add_option("--out", quality_out, "report file")->required();

    // pipeline
    auto* pipeline_cmd = app.add_subcommand("pipeline", "teacher, item augmentation, student, evaluation");
    ConfigFlags pipeline_flags;
    std::string pipeline_out;
    bool pipeline_resume = false, pipeline_quiet = false;
    pipeline_flags.attach(pipeline_cmd);
    pipeline_cmd->add_option("--out", pipeline_out, "run directory")->required();
    pipeline_cmd->add_flag("--resume", pipeline_resume, "reuse finished stages");
    pipeline_cmd->add_flag("--quiet", pipeline_quiet, "no progress lines");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*ingest) {
            const auto items = read_item_records(ingest_items);
            const auto queries = read_query_records(ingest_queries);
            std::vector<std::string> texts;
            for (const auto& r : items) texts.push_back(r.text);
            for (const auto& r : queries) texts.push_back(r.text);
            const Vocab vocab = build_vocab(texts, ingest_min_count);
            const ItemStore store = make_item_store(items, vocab);
            const QuerySet qs = make_query_set(queries, vocab);
            std::size_t gold = 0;
            for (const auto& q : qs) {
                if (!q.gold_item_id) continue;
                if (!store.contains(*q.gold_item_id))
                    throw DataError("query '" + q.id + "' has unknown gold item '" + *q.gold_item_id + "'");
                ++gold;
            }
            fs::create_directories(ingest_out);
            vocab.save(fs::path(ingest_out) / "vocab.txt");
            const std::vector<std::pair<std::string, double>> summary{
                {"items", static_cast<double>(store.size())},
                {"queries", static_cast<double>(qs.size())},
                {"queries_with_gold", static_cast<double>(gold)},
                {"vocab_size", static_cast<double>(vocab.size())}};
            write_scalar_report(summary, fs::path(ingest_out) / "summary.txt");
            print_pairs(out, summary);
            return 0;
        }
        if (*synth) {
            SynthConfig config;
            if (!synth_config.empty()) {
                const PipelineConfig pc = load_config(synth_config);
                if (pc.synth) config = *pc.synth;
            }
            if (synth_seed) config.seed = *synth_seed;
            const SynthData data = generate(config);
            const SynthFiles files = write_synth(data, synth_out);
            out << "items " << files.items.string() << "\nqueries " << files.queries.string()
                << "\nlabels " << files.labels.string() << '\n';
            return 0;
        }
        if (*train_cmd) {
            PipelineConfig config = train_flags.load();
            if (train_no_augment) config.augment_enabled = false;
            const fs::path dir(train_out);
            fs::create_directories(dir);
            const Dataset data = load_dataset(config, dir / "data");
            data.vocab.save(dir / "vocab.txt");
            std::ofstream(dir / "config.json") << to_json(config).dump(2) << '\n';
            ModelParams params = init_params(resolved_model(config, data));
            const auto objective = make_objective(config);
            const auto examples = resolve(data.train, data.queries, data.items);
            train(params, examples, objective.get(),
                  [&](const EpochStats& s) { err << "epoch " << s.epoch << " loss " << s.mean_loss << '\n'; });
            save_checkpoint(params, dir / "model.ckpt");
            out << (dir / "model.ckpt").string() << '\n';
            return 0;
        }
        if (*itemaug_cmd) {
            const PipelineConfig config = itemaug_flags.load();
            const fs::path dir(itemaug_out);
            fs::create_directories(dir);
            const Dataset data = load_dataset(config);
            const ModelParams teacher = load_model(itemaug_teacher, data);
            const AugmentedPairs pairs =
                build_augmented_pairs(teacher, data.train, data.queries, data.items, config.itemaug);
            write_augmented_pairs(pairs, dir / "augmented_pairs.jsonl");
            out << "pairs " << pairs.pairs.size() << "\ngated_queries " << pairs.gated_queries
                << "\nexamined_queries " << pairs.examined_queries << '\n';
            if (!itemaug_pairs_only) {
                const TrainingSet merged = merge_training_sets(data.train, pairs.pairs, data.queries, data.items);
                const auto objective = make_objective(config);
                const ModelParams student = train_student(teacher, merged, data.queries, data.items, objective.get());
                save_checkpoint(student, dir / "student.ckpt");
                out << "student " << (dir / "student.ckpt").string() << '\n';
            }
            return 0;
        }
        if (*retrieve_cmd) {
            const PipelineConfig config = retrieve_flags.load();
            const Dataset data = load_dataset(config);
            const ModelParams model = load_model(retrieve_model, data);
            const auto ids = split_ids(data, retrieve_split);
            const std::size_t top_n = std::min(retrieve_top_n.value_or(config.data.top_n), data.items.size());
            Rankings rankings;
            if (retrieve_student.empty()) {
                rankings = retrieve_all(model, data, ids, top_n);
            } else {
                const ModelParams student = load_model(retrieve_student, data);
                rankings = ensemble_all(model, student, data, ids, top_n, config.itemaug.ensemble_rule);
            }
            write_run(rankings, retrieve_student.empty() ? "dense" : "ensemble", retrieve_out);
            return 0;
        }
        if (*bm25_cmd) {
            const auto items = read_item_records(bm25_items);
            const auto queries = read_query_records(bm25_queries);
            std::vector<std::string> texts;
            for (const auto& r : items) texts.push_back(r.text);
            const Vocab vocab = build_vocab(texts);
            const ItemStore store = make_item_store(items, vocab);
            const QuerySet qs = make_query_set(queries, vocab);
            const Bm25Index index(store, bm25_params);
            Rankings rankings;
            for (const auto& q : qs) rankings[q.id] = index.rank(q, bm25_top_n);
            write_run(rankings, "bm25", bm25_out);
            return 0;
        }
        if (*evaluate_cmd) {
            const Rankings rankings = rankings_from_run(read_run(eval_run));
            const MetricsReport report = evaluate_run(rankings, read_gold_map(eval_queries));
            out << (eval_per_query ? report.to_json() + "\n" : report.to_text());
            if (!eval_json.empty() || !eval_text.empty()) {
                if (!eval_json.empty()) std::ofstream(eval_json) << report.to_json() << '\n';
                if (!eval_text.empty()) std::ofstream(eval_text) << report.to_text();
            }
            return 0;
        }
        if (*pilot_cmd) {
            const PipelineConfig config = pilot_flags.load();
            const Dataset data = load_dataset(config);
            const QuerySet queries = subset(data, split_ids(data, pilot_split));
            SentenceDeletionResult result;
            if (pilot_bm25) {
                const Bm25Index index(data.items);
                result = sentence_deletion_study(Bm25Backend(index), queries);
            } else {
                if (pilot_model.empty()) throw UsageError("pilot needs --model or --bm25");
                const ModelParams model = load_model(pilot_model, data);
                result = sentence_deletion_study(DenseBackend(model, data.items), queries);
            }
            const std::vector<std::pair<std::string, double>> values{
                {"improved", static_cast<double>(result.improved)},
                {"decreased", static_cast<double>(result.decreased)},
                {"unchanged", static_cast<double>(result.unchanged)},
                {"skipped", static_cast<double>(result.skipped)},
                {"excluded", static_cast<double>(result.excluded)},
                {"improved_ratio", result.improved_ratio},
                {"decreased_ratio", result.decreased_ratio},
                {"improved_share", result.improved_share},
                {"decreased_share", result.decreased_share},
                {"unchanged_share", result.unchanged_share}};
            write_scalar_report(values, pilot_out);
            print_pairs(out, values);
            return 0;
        }
        if (*interval_cmd) {
            const PipelineConfig config = interval_flags.load();
            const Dataset data = load_dataset(config);
            const ModelParams initial = init_params(resolved_model(config, data));
            const auto objective = make_objective(config);
            AblationSetup setup;
            setup.initial = &initial;
            setup.train = &data.train;
            setup.queries = &data.queries;
            setup.eval_queries = data.eval_ids;
            setup.items = &data.items;
            setup.objective = objective.get();
            const IntervalAblationResult result = gradient_interval_ablation(setup, interval_count);
            std::vector<std::pair<std::string, double>> values{{"baseline_em", result.baseline_em}};
            for (const auto& r : result.intervals) {
                const std::string prefix = "interval_" + std::to_string(r.interval) + "_";
                values.emplace_back(prefix + "removed_tokens", static_cast<double>(r.removed_tokens));
                values.emplace_back(prefix + "em", r.em);
                values.emplace_back(prefix + "em_decrease", r.em_decrease);
            }
            write_scalar_report(values, interval_out);
            print_pairs(out, values);
            return 0;
        }
        if (*quality_cmd) {
            const PipelineConfig config = quality_flags.load();
            const Dataset data = load_dataset(config);
            const ModelParams model = load_model(quality_model, data);
            const auto examples = resolve(data.train, data.queries, data.items);
            const AugmentationQuality q =
                augmentation_quality(model, examples, data.items, config.augment, config.model.seed);
            const std::vector<std::pair<std::string, double>> values{
                {"error_rate", q.error_rate},
                {"mean_cosine_distance", q.mean_cosine_distance},
                {"examples", static_cast<double>(q.examples)},
                {"noised_examples", static_cast<double>(q.noised_examples)}};
            write_scalar_report(values, quality_out);
            print_pairs(out, values);
            return 0;
        }
        if (*pipeline_cmd) {
            const PipelineConfig config = pipeline_flags.load();
            const fs::path dir(pipeline_out);
            fs::create_directories(dir);
            const Dataset data = load_dataset(config, dir / "data");
            PipelineOptions options;
            options.resume = pipeline_resume;
            if (!pipeline_quiet) options.log = [&](const std::string& line) { err << line << '\n'; };
            if (config.grid.active()) {
                for (const auto& cell : expand_grid(config)) {
                    options.out_dir = dir / cell.name;
                    if (!pipeline_quiet) err << "cell " << cell.name << '\n';
                    const PipelineResult r = run_pipeline(cell.config, data, options);
                    out << cell.name << " acc@5 " << r.final.acc_at_5 << " em " << r.final.em() << '\n';
                }
                std::ofstream(dir / "config.json") << to_json(config).dump(2) << '\n';
            } else {
                options.out_dir = dir;
                const PipelineResult r = run_pipeline(config, data, options);
                out << r.final.to_text();
            }
            return 0;
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace gradselect
