#include <doctest.h>

#include <algorithm>
#include <random>

#include <cvxdistill/pipeline.hpp>

#include "helpers.hpp"

using namespace cvxdistill;

namespace {

ExperimentConfig small_config()
{
    ExperimentConfig cfg = desk_scale_config();
    cfg.task.classes = 3;
    cfg.task.dim = 8;
    cfg.task.train_per_class = 80;
    cfg.task.test_per_class = 30;
    cfg.teacher.hidden_widths = {12, 8};
    cfg.teacher.epochs = 10;
    cfg.distill.gate_count = 8;
    cfg.distill.lambda_points = 3;
    cfg.nonconvex_epochs = 5;
    cfg.seeds = {1, 2};
    return cfg;
}

} // namespace

TEST_SUITE("pipeline")
{
    TEST_CASE("gaussian mixture task")
    {
        SyntheticTaskConfig cfg;
        const TaskData data = make_gaussian_mixture(cfg, 3);
        CHECK(data.train.rows() == 5000);
        CHECK(data.test.rows() == 1000);
        CHECK(data.train.cols() == 32);
        CHECK(data.train.num_classes() == 10);
        const TaskData again = make_gaussian_mixture(cfg, 3);
        CHECK(again.train.x == data.train.x);
        CHECK(make_gaussian_mixture(cfg, 4).train.x != data.train.x);
    }

    TEST_CASE("planted relu block is distilled exactly")
    {
        Rng rng(1);
        MLPNet block;
        block.layers.push_back({gaussian_matrix(6, 4, rng), gaussian_matrix(4, 1, rng, 0.5)});
        block.relu_output = true;
        const Matrix z = gaussian_matrix(400, 6, rng);
        const ActivationDataset acts{z, block.forward(z)};
        DistillConfig cfg;
        cfg.gate_source = GateSource::data_derived;
        cfg.gate_count = 12;
        cfg.lambda_points = 3;
        cfg.decade_span = 8.0;
        cfg.solver.max_iters = 20000;
        cfg.solver.tol_grad_map = 1e-10;
        const DistillResult r = distill_activations(acts, cfg, 5);
        CHECK(r.path[r.selected].holdout_mse <= 1e-6);
        CHECK(activation_mse(r.student.forward(z), acts.t) <= 1e-6);
    }

    TEST_CASE("distillation ignores labels")
    {
        const ExperimentConfig cfg = small_config();
        const TrainedTeacher prepared = prepare_teacher(cfg, 1);
        const BlockRange block = resolve_block(cfg, prepared.teacher.net);
        Dataset shuffled = prepared.data.train;
        std::shuffle(shuffled.labels->begin(), shuffled.labels->end(), Rng(9));
        Dataset unlabelled = prepared.data.train;
        unlabelled.labels.reset();
        const DistillResult a = distill_block(prepared.teacher.net, block, prepared.data.train, cfg.distill, 3);
        for (const Dataset* ds : {&shuffled, &unlabelled}) {
            const DistillResult b = distill_block(prepared.teacher.net, block, *ds, cfg.distill, 3);
            CHECK(b.student.w1 == a.student.w1);
            CHECK(b.student.w2 == a.student.w2);
            CHECK(b.student.gates == a.student.gates);
        }
    }

    TEST_CASE("empty gate set is rejected")
    {
        Rng rng(2);
        const ActivationDataset acts{gaussian_matrix(20, 3, rng), gaussian_matrix(20, 2, rng)};
        DistillConfig cfg;
        cfg.gate_count = 0;
        CHECK_THROWS_AS(distill_activations(acts, cfg, 1), Error);
    }

    TEST_CASE("parameter budget caps the selected student")
    {
        Rng rng(3);
        const Matrix z = gaussian_matrix(300, 5, rng);
        const ActivationDataset acts{z, (z * gaussian_matrix(5, 3, rng)).cwiseMax(0.0)};
        DistillConfig cfg;
        cfg.gate_count = 10;
        cfg.lambda_points = 5;
        cfg.param_budget = 40;
        const DistillResult r = distill_activations(acts, cfg, 1);
        REQUIRE(r.path.size() == 5);
        CHECK(r.path.front().effective_parameters == 0);
        CHECK(r.student.effective_parameters() <= 40);
        for (const auto& p : r.path) {
            if (p.effective_parameters <= 40) CHECK(p.holdout_mse >= r.path[r.selected].holdout_mse);
        }
    }

    TEST_CASE("swap and evaluate")
    {
        const ExperimentConfig cfg = small_config();
        const TrainedTeacher prepared = prepare_teacher(cfg, 2);
        const MLPNet& teacher = prepared.teacher.net;
        const Dataset& test = prepared.data.test;
        const BlockRange block = resolve_block(cfg, teacher);
        const double teacher_acc = accuracy(teacher.forward(test.x), *test.labels);

        const std::uint64_t before = frozen_checksum(teacher, block);
        const SwapResult copy = swap_and_evaluate(teacher, block, sub_network(teacher, block), test);
        CHECK(copy.accuracy == teacher_acc);
        CHECK(copy.checksum_before == before);
        CHECK(copy.checksum_after == before);
        CHECK(frozen_checksum(teacher, block) == before);

        CHECK(swap_and_evaluate(teacher, block, magnitude_prune(sub_network(teacher, block), 1.0), test).accuracy ==
              teacher_acc);

        MLPNet zero = sub_network(teacher, block);
        for (auto& l : zero.layers) {
            l.w.setZero();
            l.b.setZero();
        }
        MLPNet zeroed_model = teacher;
        for (Index l = block.first; l <= block.last; ++l) {
            zeroed_model.layers[static_cast<std::size_t>(l)].w.setZero();
            zeroed_model.layers[static_cast<std::size_t>(l)].b.setZero();
        }
        CHECK(swap_and_evaluate(teacher, block, zero, test).accuracy ==
              accuracy(zeroed_model.forward(test.x), *test.labels));

        const MLPNet wrong = he_initialized(3, {2}, 1);
        CHECK_THROWS_AS(swap_and_evaluate(teacher, block, wrong, test), DimensionError);
    }

    TEST_CASE("compare methods report")
    {
        const ExperimentConfig cfg = small_config();
        const ExperimentReport report = compare_methods(cfg);
        for (const char* method : {"teacher", "convex", "nonconvex", "prune"}) {
            CHECK(report.aggregate.at(method).at("end_to_end_accuracy").count == 2);
            for (const auto seed : cfg.seeds) CHECK_NOTHROW(report.row(method, seed));
        }
        CHECK(report.rows.size() == 8);
        CHECK(std::is_sorted(report.rows.begin(), report.rows.end(), [](const MethodRow& a, const MethodRow& b) {
            return std::tie(a.seed, a.method) < std::tie(b.seed, b.method);
        }));
        for (const auto& r : report.rows) {
            CHECK(r.end_to_end_accuracy >= 0.0);
            CHECK(r.end_to_end_accuracy <= 1.0);
        }
        const auto json = report.to_json();
        CHECK(json["rows"].size() == 8);
        CHECK(json["loss_scale"] == "1/(2n)");

        // everything except wall time is reproducible
        const ExperimentReport again = compare_methods(cfg);
        for (std::size_t i = 0; i < report.rows.size(); ++i) {
            CHECK(again.rows[i].activation_mse == report.rows[i].activation_mse);
            CHECK(again.rows[i].end_to_end_accuracy == report.rows[i].end_to_end_accuracy);
            CHECK(again.rows[i].params_effective == report.rows[i].params_effective);
        }

        ExperimentConfig one = cfg;
        one.seeds = {1};
        CHECK(compare_methods(one).aggregate.at("convex").at("activation_mse").two_std == 0.0);
    }

    TEST_CASE("polish row and parameter budget")
    {
        ExperimentConfig cfg = small_config();
        cfg.seeds = {3};
        cfg.polish.enabled = true;
        cfg.distill.param_budget = 150;
        cfg.distill.lambda_points = 8;
        const ExperimentReport report = compare_methods(cfg);
        CHECK(report.row("convex", 3).params_effective <= 150);
        REQUIRE(report.row("convex", 3).params_effective > 0);
        const MethodRow& polished = report.row("convex-polish", 3);
        CHECK(polished.params_effective > 0);
        CHECK(polished.end_to_end_accuracy >= 0.0);
        CHECK(polished.end_to_end_accuracy <= 1.0);
    }

    TEST_CASE("sample budget sweep")
    {
        ExperimentConfig cfg = small_config();
        cfg.run_prune = false;
        const auto reports = sample_budget_sweep(cfg, {5, 20});
        REQUIRE(reports.size() == 2);
        for (const auto seed : cfg.seeds) {
            CHECK(reports[0].row("convex", seed).train_rows == 15);
            CHECK(reports[1].row("convex", seed).train_rows == 60);
            CHECK(reports[0].class_counts.at(seed) == std::vector<std::size_t>{5, 5, 5});
            CHECK(reports[1].class_counts.at(seed) == std::vector<std::size_t>{20, 20, 20});
        }
        CHECK(*reports[0].samples_per_class == 5);
    }

    TEST_CASE("config validation")
    {
        ExperimentConfig cfg = small_config();
        cfg.time_budget_factor = 0.9;
        CHECK_THROWS_AS(compare_methods(cfg), Error);
        cfg = small_config();
        cfg.seeds.clear();
        CHECK_THROWS_AS(compare_methods(cfg), Error);
    }
}
