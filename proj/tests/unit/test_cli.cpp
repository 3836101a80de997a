#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include <cvxdistill/cli.hpp>
#include <cvxdistill/core_data.hpp>

#include "helpers.hpp"

using namespace cvxdistill;

namespace {

struct Run
{
    int code = -1;
    std::string out;
    std::string err;
};

Run cli(const std::vector<std::string>& args)
{
    std::ostringstream out;
    std::ostringstream err;
    Run r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

nlohmann::json read_json(const std::filesystem::path& p)
{
    return nlohmann::json::parse(read_file(p));
}

// teacher -> extract on a small synthetic task, shared by several cases
struct Artifacts
{
    testing::TempDir dir{"cli"};

    Artifacts()
    {
        REQUIRE(cli({"teacher-train", "--seed", "2", "--epochs", "2", "--widths", "8,6", "--out", path("t")}).code ==
                exit_ok);
        REQUIRE(cli({"extract", "--model", path("t/teacher.json"), "--data", path("t/train.csv"), "--out",
                     path("e")})
                    .code == exit_ok);
    }

    std::string path(const std::string& rel) const { return (dir.path() / rel).string(); }
};

} // namespace

TEST_SUITE("cli")
{
    TEST_CASE("usage errors exit 2")
    {
        CHECK(cli({}).code == exit_usage);
        CHECK(cli({"frobnicate"}).code == exit_usage);
        const Run bogus = cli({"distill", "--bogus", "1"});
        CHECK(bogus.code == exit_usage);
        CHECK_FALSE(bogus.err.empty());
        CHECK(cli({"distill", "--acts"}).code == exit_usage);
        CHECK(cli({"compare", "--seeds", "1,x"}).code == exit_usage);
        CHECK(cli({"polish", "--student", "a", "--acts", "b", "--alpha", "2"}).code == exit_usage);
        CHECK(cli({"--help"}).code == exit_ok);
        CHECK(cli({"verify", "--help"}).code == exit_ok);
    }

    TEST_CASE("verify tiny passes")
    {
        testing::TempDir dir("verify");
        const Run r = cli({"verify", "--tiny", "--out", dir.path().string()});
        CHECK(r.code == exit_ok);
        CHECK(read_json(dir / "verify.json")["passed"] == true);
        // report path and one summary line
        CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 2);
    }

    TEST_CASE("pipeline commands")
    {
        Artifacts a;
        const Run d = cli({"distill", "--acts", a.path("e/acts.cvxa"), "--gates", "6", "--lambda-points", "3",
                           "--max-iters", "50", "--out", a.path("d")});
        REQUIRE(d.code == exit_ok);
        CHECK(read_json(a.path("d/report.json"))["path"].size() == 3);
        CHECK(std::filesystem::exists(a.path("d/trace.jsonl")));

        const Run p = cli({"polish", "--student", a.path("d/student.json"), "--acts", a.path("e/acts.cvxa"),
                           "--lambda", "0.001", "--out", a.path("p")});
        CHECK(p.code == exit_ok);

        const Run s = cli({"swap-eval", "--model", a.path("t/teacher.json"), "--student", a.path("p/student.json"),
                           "--data", a.path("t/test.csv"), "--out", a.path("s")});
        CHECK(s.code == exit_ok);
        const auto report = read_json(a.path("s/report.json"));
        CHECK(report["frozen_unchanged"] == true);
        CHECK(report["accuracy"].get<double>() >= 0.0);

        const Run bad = cli({"swap-eval", "--model", a.path("t/teacher.json"), "--student", a.path("d/student.json"),
                             "--data", a.path("t/test.csv"), "--block", "0", "--out", a.path("s2")});
        CHECK(bad.code == exit_domain_error);
        CHECK(bad.err.find("maps") != std::string::npos);

        CHECK(cli({"distill", "--acts", a.path("missing.cvxa"), "--out", a.path("x")}).code == exit_domain_error);
        CHECK(cli({"polish", "--student", a.path("t/teacher.json"), "--acts", a.path("e/acts.cvxa"), "--out",
                   a.path("x")})
                  .code == exit_domain_error);

        // everything landed under the output directories
        for (const auto& entry : std::filesystem::directory_iterator(a.dir.path())) {
            CHECK(entry.is_directory());
        }
    }

    TEST_CASE("config file values lose to flags")
    {
        Artifacts a;
        {
            std::ofstream cfg(a.path("run.cfg"));
            cfg << "# distill settings\nlambda-points = 2\nmax-iters=40\ngates=5\n";
        }
        REQUIRE(cli({"distill", "--config", a.path("run.cfg"), "--acts", a.path("e/acts.cvxa"), "--out", a.path("c1")})
                    .code == exit_ok);
        CHECK(read_json(a.path("c1/report.json"))["path"].size() == 2);

        REQUIRE(cli({"distill", "--config", a.path("run.cfg"), "--acts", a.path("e/acts.cvxa"), "--lambda-points",
                     "4", "--out", a.path("c2")})
                    .code == exit_ok);
        CHECK(read_json(a.path("c2/report.json"))["path"].size() == 4);

        {
            std::ofstream cfg(a.path("bad.cfg"));
            cfg << "no-such-key=1\n";
        }
        CHECK(cli({"distill", "--config", a.path("bad.cfg"), "--acts", a.path("e/acts.cvxa")}).code == exit_usage);
        {
            std::ofstream cfg(a.path("broken.cfg"));
            cfg << "just words\n";
        }
        CHECK(cli({"distill", "--config", a.path("broken.cfg"), "--acts", a.path("e/acts.cvxa")}).code == exit_usage);
        CHECK(cli({"distill", "--config", a.path("absent.cfg"), "--acts", a.path("e/acts.cvxa")}).code == exit_usage);
    }

    TEST_CASE("seed falls back to the environment")
    {
        testing::TempDir dir("seed");
        ::setenv("CVXDISTILL_SEED", "7", 1);
        REQUIRE(cli({"enumerate-gates", "--random", "5,2", "--out", (dir / "a").string()}).code == exit_ok);
        ::unsetenv("CVXDISTILL_SEED");
        REQUIRE(cli({"enumerate-gates", "--random", "5,2", "--seed", "7", "--out", (dir / "b").string()}).code ==
                exit_ok);
        CHECK(read_file(dir / "a/gates.json") == read_file(dir / "b/gates.json"));
        ::setenv("CVXDISTILL_SEED", "seven", 1);
        CHECK(cli({"enumerate-gates", "--random", "5,2", "--out", (dir / "c").string()}).code == exit_usage);
        ::unsetenv("CVXDISTILL_SEED");
    }

    TEST_CASE("enumerate-gates")
    {
        testing::TempDir dir("enum");
        CHECK(cli({"enumerate-gates", "--random", "6,2", "--out", dir.path().string()}).code == exit_ok);
        const auto j = read_json(dir / "gates.json");
        CHECK(j["count"] == 12);
        CHECK(j["bound"] == 12);
        CHECK(cli({"enumerate-gates", "--random", "20,2", "--out", dir.path().string()}).code == exit_domain_error);
        CHECK(cli({"enumerate-gates", "--out", dir.path().string()}).code == exit_usage);
    }

    TEST_CASE("compare reports every seed")
    {
        testing::TempDir dir("compare");
        const Run r = cli({"compare", "--seeds", "1,2,3", "--samples-per-class", "10", "--teacher-epochs", "2",
                           "--nonconvex-epochs", "2", "--out", dir.path().string()});
        REQUIRE(r.code == exit_ok);
        const auto j = read_json(dir / "report.json");
        for (const char* method : {"teacher", "convex", "nonconvex", "prune"}) {
            CHECK(j["aggregate"][method]["end_to_end_accuracy"]["count"] == 3);
        }
        CHECK(j["rows"].size() == 12);
    }
}
