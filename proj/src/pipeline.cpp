#include "gradselect/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "gradselect/error.hpp"
#include "gradselect/gradaug.hpp"
#include "gradselect/rng.hpp"

namespace gradselect {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSplitStream = 0x5b117;

void log_line(const PipelineOptions& options, std::ofstream* file, const std::string& line) {
    if (options.log) options.log(line);
    if (file && *file) *file << line << '\n' << std::flush;
}

// Reraises the active exception with the stage name prefixed, keeping its type.
[[noreturn]] void rethrow_in_stage(const std::string& stage) {
    const std::string prefix = "stage '" + stage + "' failed: ";
    try {
        throw;
    } catch (const UsageError& e) {
        throw UsageError(prefix + e.what());
    } catch (const DataError& e) {
        throw DataError(prefix + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(prefix + e.what());
    } catch (const std::exception& e) {
        throw Error(prefix + e.what());
    }
}

template <typename F>
auto run_stage(const std::string& stage, F&& f) {
    try {
        return f();
    } catch (...) {
        rethrow_in_stage(stage);
    }
}

std::string cell_value(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

std::pair<std::vector<std::string>, std::vector<std::string>> split_query_ids(
    std::span<const QueryRecord> records, double eval_fraction, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& r : records)
        if (r.gold_id) ids.push_back(r.id);
    std::sort(ids.begin(), ids.end());
    Rng rng = make_rng({seed, kSplitStream});
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[uniform_index(rng, i)]);
    const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(ids.size())));
    std::vector<std::string> eval(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_eval));
    std::vector<std::string> train(ids.begin() + static_cast<std::ptrdiff_t>(n_eval), ids.end());
    std::sort(eval.begin(), eval.end());
    std::sort(train.begin(), train.end());
    return {train, eval};
}

Dataset make_dataset(std::span<const ItemRecord> items, std::span<const QueryRecord> queries,
                     const PipelineConfig& config, LabelMap labels) {
    Dataset d;
    std::tie(d.train_ids, d.eval_ids) =
        split_query_ids(queries, config.data.eval_fraction, config.data.split_seed);
    if (d.train_ids.empty()) throw DataError("no training queries after the split");
    if (d.eval_ids.empty()) throw DataError("no evaluation queries after the split");

    // The vocabulary sees items and training queries only.
    std::set<std::string> train_set(d.train_ids.begin(), d.train_ids.end());
    std::vector<std::string> texts;
    for (const auto& r : items) texts.push_back(r.text);
    for (const auto& r : queries)
        if (train_set.contains(r.id)) texts.push_back(r.text);
    d.vocab = build_vocab(texts, config.data.min_count);

    d.items = make_item_store(items, d.vocab, config.model.segment_length);
    d.queries = make_query_set(queries, d.vocab);
    for (const auto& id : d.train_ids) {
        const auto& q = d.queries.at(id);
        d.train.add({q.id, *q.gold_item_id, Provenance::Original}, d.queries, d.items);
    }
    for (const auto& id : d.eval_ids)
        if (!d.items.contains(*d.queries.at(id).gold_item_id))
            throw DataError("query '" + id + "' has unknown gold item '" +
                            *d.queries.at(id).gold_item_id + "'");
    d.labels = std::move(labels);
    return d;
}

Dataset load_dataset(const PipelineConfig& config, const std::optional<fs::path>& data_dir) {
    if (config.data.items.empty() || config.data.queries.empty()) {
        if (!config.synth) throw UsageError("no data paths and no synth section");
        const SynthData synth = generate(*config.synth);
        if (data_dir) write_synth(synth, *data_dir);
        const auto records = query_records(synth);
        return make_dataset(synth.items, records, config, labels_of(synth));
    }
    const auto items = read_item_records(config.data.items);
    const auto queries = read_query_records(config.data.queries);
    LabelMap labels;
    if (!config.data.labels.empty()) labels = read_labels(config.data.labels);
    return make_dataset(items, queries, config, std::move(labels));
}

ModelConfig resolved_model(const PipelineConfig& config, const Dataset& data) {
    ModelConfig m = config.model;
    m.vocab_size = data.vocab.size();
    m.validate();
    return m;
}

std::unique_ptr<Objective> make_objective(const PipelineConfig& config) {
    if (config.augment_enabled)
        return std::make_unique<CompositeObjective>(config.augment, config.model.seed);
    return std::make_unique<CrossEntropyObjective>();
}

Rankings retrieve_all(const ModelParams& params, const Dataset& data,
                      std::span<const std::string> query_ids, std::size_t top_n) {
    const EncodedCorpus corpus(params, data.items);
    Rankings out;
    for (const auto& id : query_ids) out[id] = retrieve(params, data.queries.at(id), corpus, top_n);
    return out;
}

Rankings ensemble_all(const ModelParams& teacher, const ModelParams& student, const Dataset& data,
                      std::span<const std::string> query_ids, std::size_t top_n,
                      EnsembleRule rule) {
    const EncodedCorpus tc(teacher, data.items);
    const EncodedCorpus sc(student, data.items);
    Rankings out;
    for (const auto& id : query_ids)
        out[id] = ensemble_retrieve(teacher, tc, student, sc, data.queries.at(id), top_n, rule);
    return out;
}

PipelineResult run_pipeline(const PipelineConfig& config, const Dataset& data,
                            const PipelineOptions& options) {
    config.validate();
    const bool persist = !options.out_dir.empty();
    std::ofstream log_file;
    if (persist) {
        fs::create_directories(options.out_dir);
        std::ofstream(options.out_dir / "config.json") << to_json(config).dump(2) << '\n';
        data.vocab.save(options.out_dir / "vocab.txt");
        log_file.open(options.out_dir / "pipeline.log", options.resume ? std::ios::app : std::ios::trunc);
    }
    auto log = [&](const std::string& line) { log_line(options, persist ? &log_file : nullptr, line); };
    auto artifact = [&](const char* name) { return options.out_dir / name; };
    auto reusable = [&](const char* name) { return persist && options.resume && fs::exists(artifact(name)); };

    const ModelConfig model_config = resolved_model(config, data);
    const auto objective = make_objective(config);
    const GoldMap gold = gold_map(data.queries);
    const std::size_t top_n = std::min(config.data.top_n, data.items.size());
    PipelineResult result;

    log("data: items=" + std::to_string(data.items.size()) + " train=" +
        std::to_string(data.train_ids.size()) + " eval=" + std::to_string(data.eval_ids.size()) +
        " vocab=" + std::to_string(data.vocab.size()));

    result.teacher_model = run_stage("teacher", [&] {
        if (reusable("teacher.ckpt")) {
            log("teacher: reusing " + artifact("teacher.ckpt").string());
            return load_checkpoint(artifact("teacher.ckpt"));
        }
        ModelParams teacher = init_params(model_config);
        const auto examples = resolve(data.train, data.queries, data.items);
        log("teacher: training on " + std::to_string(examples.size()) + " pairs, seed " +
            std::to_string(model_config.seed));
        train(teacher, examples, objective.get(), [&](const EpochStats& s) {
            std::ostringstream os;
            os << "teacher: epoch " << s.epoch << " loss " << s.mean_loss;
            log(os.str());
        });
        if (persist) save_checkpoint(teacher, artifact("teacher.ckpt"));
        return teacher;
    });
    const ModelParams& teacher = *result.teacher_model;

    result.teacher = run_stage("teacher-eval", [&] {
        const Rankings r = retrieve_all(teacher, data, data.eval_ids, top_n);
        if (persist) write_run(r, "teacher", artifact("run_teacher.txt"));
        return evaluate_run(r, gold, &data.items);
    });
    log("teacher: acc@5 " + std::to_string(result.teacher.acc_at_5) + " em " +
        std::to_string(result.teacher.em()));

    if (config.itemaug_enabled) {
        const std::vector<AugmentedPair> extra = run_stage("itemaug", [&] {
            if (reusable("augmented_pairs.jsonl")) {
                log("itemaug: reusing " + artifact("augmented_pairs.jsonl").string());
                return read_augmented_pairs(artifact("augmented_pairs.jsonl"));
            }
            const AugmentedPairs pairs =
                build_augmented_pairs(teacher, data.train, data.queries, data.items, config.itemaug);
            result.gated_queries = pairs.gated_queries;
            if (persist) write_augmented_pairs(pairs, artifact("augmented_pairs.jsonl"));
            log("itemaug: " + std::to_string(pairs.pairs.size()) + " pairs from " +
                std::to_string(pairs.gated_queries) + " of " +
                std::to_string(pairs.examined_queries) + " queries");
            return pairs.pairs;
        });
        result.augmented_pairs = extra.size();

        result.student_model = run_stage("student", [&] {
            if (reusable("student.ckpt")) {
                log("student: reusing " + artifact("student.ckpt").string());
                return load_checkpoint(artifact("student.ckpt"));
            }
            const TrainingSet merged = merge_training_sets(data.train, extra, data.queries, data.items);
            log("student: training on " + std::to_string(merged.size()) + " pairs");
            ModelParams student = train_student(teacher, merged, data.queries, data.items, objective.get());
            if (persist) save_checkpoint(student, artifact("student.ckpt"));
            return student;
        });
        const ModelParams& student = *result.student_model;

        result.student = run_stage("student-eval", [&] {
            const Rankings r = retrieve_all(student, data, data.eval_ids, top_n);
            if (persist) write_run(r, "student", artifact("run_student.txt"));
            return evaluate_run(r, gold, &data.items);
        });
        result.ensemble = run_stage("ensemble-eval", [&] {
            const Rankings r = ensemble_all(teacher, student, data, data.eval_ids, top_n,
                                            config.itemaug.ensemble_rule);
            if (persist) write_run(r, "ensemble", artifact("run_ensemble.txt"));
            return evaluate_run(r, gold, &data.items);
        });
        log("student: acc@5 " + std::to_string(result.student->acc_at_5) + "; ensemble: acc@5 " +
            std::to_string(result.ensemble->acc_at_5));
        result.final = *result.ensemble;
    } else {
        result.final = result.teacher;
    }

    if (persist) {
        run_stage("report", [&] {
            write_report(result.final, artifact("metrics.json"), artifact("metrics.txt"));
            write_report(result.teacher, artifact("metrics_teacher.json"), artifact("metrics_teacher.txt"));
            if (result.student)
                write_report(*result.student, artifact("metrics_student.json"), artifact("metrics_student.txt"));
            if (result.ensemble)
                write_report(*result.ensemble, artifact("metrics_ensemble.json"), artifact("metrics_ensemble.txt"));
            const char* final_run = config.itemaug_enabled ? "run_ensemble.txt" : "run_teacher.txt";
            fs::copy_file(artifact(final_run), artifact("run.txt"), fs::copy_options::overwrite_existing);
            return 0;
        });
    }
    log("done: acc@5 " + std::to_string(result.final.acc_at_5) + " em " + std::to_string(result.final.em()) +
        " ndcg " + std::to_string(result.final.ndcg));
    return result;
}

std::vector<GridCell> expand_grid(const PipelineConfig& config) {
    auto values = [](const std::vector<double>& grid, double v) {
        return grid.empty() ? std::vector<double>{v} : grid;
    };
    std::vector<GridCell> cells;
    for (double m : values(config.grid.m, config.augment.m))
        for (double n : values(config.grid.n, config.augment.n))
            for (double a : values(config.grid.alpha, config.augment.alpha))
                for (double b : values(config.grid.beta, config.augment.beta)) {
                    GridCell cell;
                    cell.config = config;
                    cell.config.grid = {};
                    cell.config.augment.m = m;
                    cell.config.augment.n = n;
                    cell.config.augment.alpha = a;
                    cell.config.augment.beta = b;
                    cell.name = "m" + cell_value(m) + "_n" + cell_value(n) + "_a" + cell_value(a) +
                                "_b" + cell_value(b);
                    cells.push_back(std::move(cell));
                }
    return cells;
}

}  // namespace gradselect
