#include <cvxdistill/cli.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include <cvxdistill/core_data.hpp>
#include <cvxdistill/gates.hpp>
#include <cvxdistill/model_spec.hpp>
#include <cvxdistill/nonconvex.hpp>
#include <cvxdistill/pipeline.hpp>
#include <cvxdistill/polish.hpp>
#include <cvxdistill/verify.hpp>

namespace cvxdistill {
namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

std::string trim(std::string s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

// key=value lines become --key=value arguments; '#' starts a comment.
std::vector<std::string> config_arguments(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    std::vector<std::string> out;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError(path.string() + ":" + std::to_string(number) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw UsageError(path.string() + ":" + std::to_string(number) + ": empty key");
        out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
    }
    return out;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what)
{
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        T value{};
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
        if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
            throw UsageError("invalid " + what + " list '" + text + "'");
        }
        out.push_back(value);
    }
    if (out.empty()) throw UsageError("empty " + what + " list");
    return out;
}

std::uint64_t default_seed()
{
    if (const char* env = std::getenv("CVXDISTILL_SEED")) {
        std::uint64_t value = 0;
        const std::string text(env);
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
        if (ec == std::errc() && ptr == text.data() + text.size()) return value;
        throw UsageError("CVXDISTILL_SEED is not an unsigned integer");
    }
    return 0;
}

void write_json(const fs::path& path, const nlohmann::json& j)
{
    write_file(path, j.dump(2) + "\n");
}

GateSource gate_source_from_string(const std::string& name)
{
    if (name == "gaussian") return GateSource::gaussian;
    if (name == "data-derived") return GateSource::data_derived;
    throw UsageError("unknown gate source '" + name + "'");
}

BlockStudent load_block_student(const fs::path& path)
{
    const ModelSpec spec = load_model(path);
    if (spec.layers.size() == 1 && spec.layers.front().kind == LayerKind::grelu_student) {
        return grelu_from_layer_spec(spec.layers.front());
    }
    return mlp_from_model_spec(spec);
}

ModelSpec student_spec(const GReLUStudent& student)
{
    ModelSpec spec;
    spec.layers.push_back(to_layer_spec(student));
    return spec;
}

// Options shared by every subcommand.
struct Common
{
    std::uint64_t seed = 0;
    std::string out = "out";
    std::string config;
};

void add_common(CLI::App* cmd, Common& c)
{
    cmd->add_option("--seed", c.seed, "Random seed (falls back to CVXDISTILL_SEED)");
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
    cmd->add_option("--config", c.config, "Flat key=value file; flags override it");
}

struct ExperimentFlags
{
    std::string seeds = "1,2,3";
    int jobs = 1;
    std::optional<std::size_t> samples_per_class;
    std::optional<std::size_t> gates;
    std::string gate_source = "data-derived";
    std::optional<int> lambda_points;
    std::optional<double> decade_span;
    std::optional<int> max_iters;
    std::optional<int> teacher_epochs;
    std::optional<int> nonconvex_epochs;
    double time_factor = 1.1;
    bool polish = false;
    std::string train_csv;
    std::string test_csv;
};

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f)
{
    cmd->add_option("--seeds", f.seeds, "Comma-separated seed list")->capture_default_str();
    cmd->add_option("--jobs", f.jobs, "Seeds run concurrently")->check(CLI::PositiveNumber);
    cmd->add_option("--samples-per-class", f.samples_per_class, "Distillation rows per class");
    cmd->add_option("--gates", f.gates, "Gate count");
    cmd->add_option("--gate-source", f.gate_source, "gaussian or data-derived")->capture_default_str();
    cmd->add_option("--lambda-points", f.lambda_points, "Points on the lambda path");
    cmd->add_option("--decade-span", f.decade_span, "Decades covered by the lambda path");
    cmd->add_option("--max-iters", f.max_iters, "Solver iterations per path point");
    cmd->add_option("--teacher-epochs", f.teacher_epochs, "Teacher training epochs");
    cmd->add_option("--nonconvex-epochs", f.nonconvex_epochs, "Fixed epoch budget for the non-convex student");
    cmd->add_option("--time-factor", f.time_factor, "Non-convex time budget relative to the convex solve")
        ->capture_default_str();
    cmd->add_option("--polish", f.polish, "Add a polished convex student");
    cmd->add_option("--train", f.train_csv, "Labeled training CSV (replaces the synthetic task)");
    cmd->add_option("--test", f.test_csv, "Labeled test CSV");
}

ExperimentConfig experiment_config(const ExperimentFlags& f)
{
    ExperimentConfig cfg = desk_scale_config();
    cfg.seeds = parse_list<std::uint64_t>(f.seeds, "seed");
    cfg.jobs = f.jobs;
    cfg.split.samples_per_class = f.samples_per_class;
    if (f.gates) cfg.distill.gate_count = *f.gates;
    cfg.distill.gate_source = gate_source_from_string(f.gate_source);
    if (f.lambda_points) cfg.distill.lambda_points = *f.lambda_points;
    if (f.decade_span) cfg.distill.decade_span = *f.decade_span;
    if (f.max_iters) cfg.distill.solver.max_iters = *f.max_iters;
    if (f.teacher_epochs) cfg.teacher.epochs = *f.teacher_epochs;
    cfg.nonconvex_epochs = f.nonconvex_epochs;
    cfg.time_budget_factor = f.time_factor;
    cfg.polish.enabled = f.polish;
    if (f.train_csv.empty() != f.test_csv.empty()) throw UsageError("--train and --test go together");
    if (!f.train_csv.empty()) cfg.data = TaskData{load_csv(f.train_csv, true), load_csv(f.test_csv, true)};
    return cfg;
}

std::string summary_of(const ExperimentReport& report)
{
    std::ostringstream s;
    bool first = true;
    for (const auto& [method, metrics] : report.aggregate) {
        s << (first ? "" : " ") << method << " acc=" << metrics.at("end_to_end_accuracy").mean
          << " mse=" << metrics.at("activation_mse").mean;
        first = false;
    }
    return s.str();
}

// Inserts config-file arguments right after the subcommand name so that
// command-line flags, parsed later, take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args)
{
    std::optional<std::string> config;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
    }
    if (!config || args.empty()) return args;
    std::vector<std::string> out{args.front()};
    for (auto& a : config_arguments(*config)) out.push_back(std::move(a));
    out.insert(out.end(), args.begin() + 1, args.end());
    return out;
}

} // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Convex distillation of network blocks into gated-ReLU students", "cvxdistill"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    Common common;

    auto* teacher_cmd = app.add_subcommand("teacher-train", "Train a teacher MLP");
    add_common(teacher_cmd, common);
    std::string teacher_train_csv;
    std::string teacher_test_csv;
    std::string teacher_widths = "32,16";
    int teacher_epochs = 20;
    double teacher_lr = 1e-3;
    teacher_cmd->add_option("--train", teacher_train_csv, "Labeled training CSV (default: synthetic task)");
    teacher_cmd->add_option("--test", teacher_test_csv, "Labeled test CSV");
    teacher_cmd->add_option("--widths", teacher_widths, "Hidden widths")->capture_default_str();
    teacher_cmd->add_option("--epochs", teacher_epochs)->capture_default_str();
    teacher_cmd->add_option("--lr", teacher_lr)->capture_default_str();

    auto* extract_cmd = app.add_subcommand("extract", "Record block activations");
    add_common(extract_cmd, common);
    std::string extract_model;
    std::string extract_data;
    Index extract_first = -1;
    Index extract_last = -1;
    bool extract_labeled = true;
    extract_cmd->add_option("--model", extract_model, "Teacher ModelSpec JSON")->required();
    extract_cmd->add_option("--data", extract_data, "Input CSV")->required();
    extract_cmd->add_option("--block", extract_first, "First layer of the block (default: penultimate)");
    extract_cmd->add_option("--block-last", extract_last, "Last layer of the block (default: --block)");
    extract_cmd->add_option("--labeled", extract_labeled, "CSV has a trailing label column")->capture_default_str();

    auto* distill_cmd = app.add_subcommand("distill", "Fit a GReLU student to activations");
    add_common(distill_cmd, common);
    std::string distill_acts;
    std::optional<std::size_t> distill_gates;
    std::string distill_source = "gaussian";
    int distill_points = 20;
    double distill_span = 3.0;
    int distill_iters = 1000;
    double distill_tol = 1e-7;
    bool distill_ova = true;
    distill_cmd->add_option("--acts", distill_acts, "CVXA activation file")->required();
    distill_cmd->add_option("--gates", distill_gates, "Gate count (default from n and d)");
    distill_cmd->add_option("--gate-source", distill_source, "gaussian or data-derived")->capture_default_str();
    distill_cmd->add_option("--lambda-points", distill_points)->capture_default_str();
    distill_cmd->add_option("--decade-span", distill_span)->capture_default_str();
    distill_cmd->add_option("--max-iters", distill_iters)->capture_default_str();
    distill_cmd->add_option("--tol", distill_tol, "Gradient-mapping tolerance")->capture_default_str();
    distill_cmd->add_option("--one-vs-all", distill_ova)->capture_default_str();

    auto* polish_cmd = app.add_subcommand("polish", "Refit the second layer with a group elastic net");
    add_common(polish_cmd, common);
    std::string polish_student;
    std::string polish_acts;
    double polish_alpha = 0.5;
    double polish_lambda = 0.0;
    polish_cmd->add_option("--student", polish_student, "GReLU student ModelSpec JSON")->required();
    polish_cmd->add_option("--acts", polish_acts, "CVXA activation file")->required();
    polish_cmd->add_option("--alpha", polish_alpha)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    polish_cmd->add_option("--lambda", polish_lambda)->check(CLI::NonNegativeNumber)->capture_default_str();

    auto* swap_cmd = app.add_subcommand("swap-eval", "Swap a student into the teacher and score it");
    add_common(swap_cmd, common);
    std::string swap_model;
    std::string swap_student;
    std::string swap_data;
    Index swap_first = -1;
    Index swap_last = -1;
    swap_cmd->add_option("--model", swap_model, "Teacher ModelSpec JSON")->required();
    swap_cmd->add_option("--student", swap_student, "Student ModelSpec JSON")->required();
    swap_cmd->add_option("--data", swap_data, "Labeled test CSV")->required();
    swap_cmd->add_option("--block", swap_first, "First layer of the block (default: penultimate)");
    swap_cmd->add_option("--block-last", swap_last, "Last layer of the block (default: --block)");

    auto* compare_cmd = app.add_subcommand("compare", "Convex vs non-convex vs pruning over seeds");
    add_common(compare_cmd, common);
    ExperimentFlags compare_flags;
    add_experiment_flags(compare_cmd, compare_flags);

    auto* sweep_cmd = app.add_subcommand("sweep", "Repeat the comparison over samples-per-class budgets");
    add_common(sweep_cmd, common);
    ExperimentFlags sweep_flags;
    std::string sweep_budgets = "10,50";
    add_experiment_flags(sweep_cmd, sweep_flags);
    sweep_cmd->add_option("--budgets", sweep_budgets, "Comma-separated samples per class")->capture_default_str();

    auto* enum_cmd = app.add_subcommand("enumerate-gates", "List every activation pattern of a small matrix");
    add_common(enum_cmd, common);
    std::string enum_data;
    std::string enum_random;
    std::optional<std::size_t> enum_probes;
    enum_cmd->add_option("--data", enum_data, "Unlabeled CSV with n <= 16 rows and d <= 4 columns");
    enum_cmd->add_option("--random", enum_random, "n,d for a seeded Gaussian matrix instead of --data");
    enum_cmd->add_option("--probes", enum_probes, "Random refinement probes (default 10 * 2^n)");

    auto* verify_cmd = app.add_subcommand("verify", "Run the oracle suite");
    add_common(verify_cmd, common);
    bool verify_tiny = false;
    verify_cmd->add_flag("--tiny", verify_tiny, "Smaller instance counts");

    try {
        const std::vector<std::string> args = expand_config(raw_args);
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        common.seed = default_seed();
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return exit_usage;
    }

    try {
        const fs::path out_dir = common.out;
        const auto finish = [&](const fs::path& report, const std::string& summary) {
            out << report.string() << "\n" << summary << "\n";
            return exit_ok;
        };

        if (*teacher_cmd) {
            TaskData data;
            if (teacher_train_csv.empty() != teacher_test_csv.empty()) throw UsageError("--train and --test go together");
            if (teacher_train_csv.empty()) {
                data = make_gaussian_mixture(desk_scale_config().task, common.seed);
            } else {
                data = {load_csv(teacher_train_csv, true), load_csv(teacher_test_csv, true)};
            }
            TeacherConfig tc;
            tc.hidden_widths.clear();
            for (const auto w : parse_list<Index>(teacher_widths, "width")) tc.hidden_widths.push_back(w);
            tc.epochs = teacher_epochs;
            tc.learning_rate = teacher_lr;
            tc.seed = common.seed;
            const TeacherResult teacher = train_teacher(data.train, tc);
            save_model(to_model_spec(teacher.net), out_dir / "teacher.json");
            save_csv(data.train, out_dir / "train.csv");
            save_csv(data.test, out_dir / "test.csv");
            const double test_acc = accuracy(teacher.net.forward(data.test.x), *data.test.labels);
            const fs::path report = out_dir / "report.json";
            write_json(report, {{"train_accuracy", teacher.train_accuracy},
                                {"test_accuracy", test_acc},
                                {"train_loss", teacher.train_loss},
                                {"parameters", teacher.net.parameter_count()},
                                {"seed", common.seed}});
            return finish(report, "teacher test_accuracy=" + std::to_string(test_acc));
        }

        const auto resolve = [](const MLPNet& net, Index first, Index last) {
            if (first < 0) return BlockRange{net.depth() - 2, net.depth() - 2};
            return BlockRange{first, last < 0 ? first : last};
        };

        if (*extract_cmd) {
            const MLPNet teacher = mlp_from_model_spec(load_model(extract_model));
            const Dataset ds = load_csv(extract_data, extract_labeled);
            const BlockRange block = resolve(teacher, extract_first, extract_last);
            const ActivationDataset acts = extract_block_activations(teacher, ds.x, block);
            save_activations(acts, out_dir / "acts.cvxa");
            const fs::path report = out_dir / "report.json";
            write_json(report, {{"rows", acts.rows()},
                                {"d_in", acts.z.cols()},
                                {"d_out", acts.t.cols()},
                                {"block_first", block.first},
                                {"block_last", block.last}});
            return finish(report, "extracted " + std::to_string(acts.rows()) + " rows");
        }

        if (*distill_cmd) {
            const ActivationDataset acts = load_activations(distill_acts);
            DistillConfig dc;
            dc.gate_count = distill_gates;
            dc.gate_source = gate_source_from_string(distill_source);
            dc.lambda_points = distill_points;
            dc.decade_span = distill_span;
            dc.solver.max_iters = distill_iters;
            dc.solver.tol_grad_map = distill_tol;
            dc.solver.one_vs_all = distill_ova;
            const DistillResult result = distill_activations(acts, dc, common.seed);
            save_model(student_spec(result.student), out_dir / "student.json");
            write_file(out_dir / "trace.jsonl", result.trace.to_jsonl());
            nlohmann::json path = nlohmann::json::array();
            for (const auto& p : result.path) {
                path.push_back({{"lambda", p.lambda},
                                {"holdout_mse", p.holdout_mse},
                                {"effective_parameters", p.effective_parameters},
                                {"iterations", p.iterations},
                                {"status", p.status}});
            }
            const auto& chosen = result.path[result.selected];
            const fs::path report = out_dir / "report.json";
            write_json(report, {{"loss_scale", "1/(2n)"},
                                {"path", path},
                                {"selected", result.selected},
                                {"gates", result.solution.gate_count()},
                                {"width", result.student.width()},
                                {"effective_parameters", result.student.effective_parameters()},
                                {"wall_ms", result.wall_ms}});
            return finish(report, "student width=" + std::to_string(result.student.width()) +
                                      " holdout_mse=" + std::to_string(chosen.holdout_mse));
        }

        if (*polish_cmd) {
            const BlockStudent loaded = load_block_student(polish_student);
            const auto* student = std::get_if<GReLUStudent>(&loaded);
            if (!student) throw Error("polish needs a grelu-student model");
            const ActivationDataset acts = load_activations(polish_acts);
            PolishProblem problem = build_polish_problem(*student, acts.z, acts.t);
            problem.alpha = polish_alpha;
            problem.lambda = polish_lambda;
            PolishConfig pc;
            pc.seed = common.seed;
            const PolishResult result = solve_group_elastic(problem, pc);
            const GReLUStudent pruned = prune_units(*student, result.beta, result.intercept);
            save_model(student_spec(pruned), out_dir / "student.json");
            write_file(out_dir / "trace.jsonl", result.trace.to_jsonl());
            const fs::path report = out_dir / "report.json";
            write_json(report, {{"initial_objective", result.initial_objective},
                                {"objective", result.objective},
                                {"status", to_string(result.status)},
                                {"width_before", student->width()},
                                {"width_after", pruned.width()},
                                {"params_before", student->effective_parameters()},
                                {"params_after", pruned.effective_parameters()}});
            return finish(report, "polished width " + std::to_string(student->width()) + " -> " +
                                      std::to_string(pruned.width()));
        }

        if (*swap_cmd) {
            const MLPNet teacher = mlp_from_model_spec(load_model(swap_model));
            const BlockStudent student = load_block_student(swap_student);
            const Dataset test = load_csv(swap_data, true);
            const BlockRange block = resolve(teacher, swap_first, swap_last);
            const SwapResult swapped = swap_and_evaluate(teacher, block, student, test);
            const double teacher_acc = accuracy(teacher.forward(test.x), *test.labels);
            const fs::path report = out_dir / "report.json";
            write_json(report, {{"accuracy", swapped.accuracy},
                                {"teacher_accuracy", teacher_acc},
                                {"frozen_checksum", swapped.checksum_after},
                                {"frozen_unchanged", swapped.checksum_before == swapped.checksum_after}});
            return finish(report, "swapped accuracy=" + std::to_string(swapped.accuracy));
        }

        if (*compare_cmd) {
            const ExperimentReport result = compare_methods(experiment_config(compare_flags));
            const fs::path report = out_dir / "report.json";
            write_json(report, result.to_json());
            return finish(report, summary_of(result));
        }

        if (*sweep_cmd) {
            const auto budgets = parse_list<std::size_t>(sweep_budgets, "budget");
            const auto results = sample_budget_sweep(experiment_config(sweep_flags), budgets);
            nlohmann::json all = nlohmann::json::array();
            for (const auto& r : results) all.push_back(r.to_json());
            const fs::path report = out_dir / "report.json";
            write_json(report, all);
            std::string summary;
            for (std::size_t i = 0; i < results.size(); ++i) {
                summary += (i ? " | " : "") + std::to_string(budgets[i]) + "/class: " + summary_of(results[i]);
            }
            return finish(report, summary);
        }

        if (*enum_cmd) {
            Matrix x;
            if (!enum_random.empty()) {
                const auto nd = parse_list<Index>(enum_random, "shape");
                if (nd.size() != 2) throw UsageError("--random expects n,d");
                Rng rng(common.seed);
                x = gaussian_matrix(nd[0], nd[1], rng);
            } else if (!enum_data.empty()) {
                x = load_csv(enum_data, false).x;
            } else {
                throw UsageError("enumerate-gates needs --data or --random");
            }
            EnumerationOptions opts;
            opts.refinement_probes = enum_probes;
            opts.seed = common.seed;
            const GateSet gates = enumerate_arrangements(x, opts);
            nlohmann::json patterns = nlohmann::json::array();
            for (Index j = 0; j < gates.size(); ++j) {
                std::string mask;
                for (const bool b : gates.patterns[static_cast<std::size_t>(j)]) mask += b ? '1' : '0';
                const Vector g = gates.directions.col(j);
                patterns.push_back({{"pattern", mask}, {"witness", std::vector<double>(g.data(), g.data() + g.size())}});
            }
            const auto bound = pattern_count_bound(static_cast<std::uint64_t>(x.rows()),
                                                   static_cast<std::uint64_t>(numerical_rank(x)));
            const fs::path report = out_dir / "gates.json";
            write_json(report, {{"n", x.rows()}, {"d", x.cols()}, {"count", gates.size()}, {"bound", bound},
                                {"patterns", patterns}});
            return finish(report, std::to_string(gates.size()) + " patterns (bound " + std::to_string(bound) + ")");
        }

        if (*verify_cmd) {
            const OracleReport result = run_oracle_suite(common.seed, verify_tiny);
            const fs::path report = out_dir / "verify.json";
            write_json(report, result.to_json());
            std::size_t passed = 0;
            for (const auto& c : result.checks) passed += c.passed ? 1 : 0;
            out << report.string() << "\n"
                << passed << "/" << result.checks.size() << " checks passed\n";
            if (!result.passed()) {
                for (const auto& c : result.checks) {
                    if (!c.passed) err << "check failed: " << c.name << " value=" << c.value << "\n";
                }
                return exit_domain_error;
            }
            return exit_ok;
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_domain_error;
    }
    return exit_usage;
}

} // namespace cvxdistill
