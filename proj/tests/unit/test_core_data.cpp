#include <doctest.h>

#include <algorithm>
#include <map>

#include <cvxdistill/core_data.hpp>
#include <cvxdistill/model_spec.hpp>

#include "helpers.hpp"

using namespace cvxdistill;

namespace {

Dataset labelled_blocks(int classes, int per_class)
{
    Dataset ds;
    ds.x.resize(classes * per_class, 2);
    std::vector<int> labels;
    for (int c = 0; c < classes; ++c) {
        for (int i = 0; i < per_class; ++i) {
            const Index r = c * per_class + i;
            ds.x(r, 0) = c;
            ds.x(r, 1) = i;
            labels.push_back(c);
        }
    }
    ds.labels = labels;
    return ds;
}

} // namespace

TEST_SUITE("core_data")
{
    TEST_CASE("csv parse keeps row order and labels")
    {
        const Dataset ds = parse_csv("1,2,0\n3,4,1\n5,6,0", true);
        CHECK(ds.rows() == 3);
        CHECK(ds.cols() == 2);
        CHECK(*ds.labels == std::vector<int>{0, 1, 0});
        CHECK(ds.x(2, 1) == 6.0);
        CHECK(ds.num_classes() == 2);
    }

    TEST_CASE("csv errors")
    {
        CHECK_THROWS_WITH_AS(parse_csv("", false), doctest::Contains("no rows"), FormatError);
        CHECK_THROWS_WITH_AS(parse_csv("1,NaN,0", true), doctest::Contains("row 0, col 1"), FormatError);
        CHECK_THROWS_WITH_AS(parse_csv("1,inf", false), doctest::Contains("non-finite"), FormatError);
        CHECK_THROWS_WITH_AS(parse_csv("1,2\n3", false), doctest::Contains("inconsistent width"), FormatError);
        CHECK_THROWS_AS(parse_csv("1,x", false), FormatError);
        CHECK_THROWS_AS(parse_csv("1,2,0.5", true), FormatError);
        CHECK_THROWS_AS(parse_csv("1,2,-1", true), FormatError);
    }

    TEST_CASE("csv file round trip")
    {
        testing::TempDir dir("csv");
        Dataset ds = labelled_blocks(3, 4);
        ds.x(0, 0) = 0.1;
        save_csv(ds, dir / "a.csv");
        const Dataset back = load_csv(dir / "a.csv", true);
        CHECK(back.x == ds.x);
        CHECK(*back.labels == *ds.labels);
        CHECK_THROWS_AS(load_csv(dir / "missing.csv", false), Error);
    }

    TEST_CASE("cvxa single row is 44 bytes")
    {
        ActivationDataset acts;
        acts.z = Matrix{{1.0, 2.0}};
        acts.t = Matrix{{3.0}};
        const std::string bytes = encode_activations(acts);
        CHECK(bytes.size() == 44);
        CHECK(bytes.substr(0, 4) == "CVXA");
        const ActivationDataset back = decode_activations(bytes);
        CHECK(back.z == acts.z);
        CHECK(back.t == acts.t);
    }

    TEST_CASE("cvxa rejects corrupt files")
    {
        ActivationDataset acts;
        acts.z = Matrix{{1.0, 2.0}};
        acts.t = Matrix{{3.0}};
        std::string bytes = encode_activations(acts);

        std::string bad_magic = bytes;
        bad_magic.replace(0, 4, "XXXX");
        CHECK_THROWS_WITH_AS(decode_activations(bad_magic), doctest::Contains("magic"), FormatError);

        std::string bad_version = bytes;
        bad_version[4] = 2;
        CHECK_THROWS_WITH_AS(decode_activations(bad_version), doctest::Contains("version"), FormatError);

        CHECK_THROWS_WITH_AS(decode_activations(bytes.substr(0, bytes.size() - 1)), doctest::Contains("truncated"),
                             FormatError);
        CHECK_THROWS_AS(decode_activations(bytes + "x"), FormatError);
    }

    TEST_CASE("cvxa round trip is bit exact on random artifacts")
    {
        testing::TempDir dir("cvxa");
        Rng rng(11);
        for (int trial = 0; trial < 25; ++trial) {
            ActivationDataset acts;
            const Index n = 1 + static_cast<Index>(rng() % 30);
            acts.z = gaussian_matrix(n, 1 + static_cast<Index>(rng() % 5), rng).cast<float>().cast<double>();
            acts.t = gaussian_matrix(n, 1 + static_cast<Index>(rng() % 4), rng).cast<float>().cast<double>();
            save_activations(acts, dir / "a.cvxa");
            const ActivationDataset back = load_activations(dir / "a.cvxa");
            CHECK(back.z == acts.z);
            CHECK(back.t == acts.t);
            CHECK(encode_activations(back) == read_file(dir / "a.cvxa"));
        }
    }

    TEST_CASE("subsample per class")
    {
        const Dataset ds = labelled_blocks(10, 500);
        SplitSpec spec;
        spec.seed = 4;
        spec.samples_per_class = 100;
        const Dataset small = subsample_per_class(ds, spec);
        CHECK(small.rows() == 1000);
        std::map<int, int> counts;
        for (const int l : *small.labels) ++counts[l];
        for (const auto& [label, count] : counts) CHECK(count == 100);

        const Dataset again = subsample_per_class(ds, spec);
        CHECK(again.x == small.x);

        spec.seed = 5;
        CHECK(subsample_per_class(ds, spec).x != small.x);

        spec.samples_per_class = 1'000'000'000;
        const Dataset all = subsample_per_class(ds, spec);
        CHECK(all.rows() == ds.rows());

        Dataset unlabelled = ds;
        unlabelled.labels.reset();
        CHECK_THROWS_AS(subsample_per_class(unlabelled, spec), Error);
    }

    TEST_CASE("train test split sizes")
    {
        const Dataset ds = labelled_blocks(2, 10);
        SplitSpec spec;
        spec.train_fraction = 0.7;
        const auto [train, test] = train_test_split(ds, spec);
        CHECK(train.rows() == 14);
        CHECK(test.rows() == 6);
    }

    TEST_CASE("standardize")
    {
        const Standardization s = standardize(Matrix{{1.0, 5.0}, {3.0, 5.0}});
        CHECK(s.x(0, 0) == doctest::Approx(-1.0));
        CHECK(s.x(1, 0) == doctest::Approx(1.0));
        CHECK(s.means(0) == doctest::Approx(2.0));
        CHECK(s.scales(0) == doctest::Approx(1.0));
        CHECK(s.x.col(1).isZero());
        CHECK(s.scales(1) == 1.0);

        Rng rng(2);
        const Matrix x = gaussian_matrix(40, 6, rng, 3.0).array() + 2.0;
        const Standardization once = standardize(x);
        const Standardization twice = standardize(once.x);
        CHECK(testing::max_abs_diff(once.x, twice.x) < 1e-6);
        CHECK(testing::max_abs_diff(apply_standardization(x, once.means, once.scales), once.x) < 1e-12);
    }

    TEST_CASE("model spec round trip is bit exact")
    {
        Rng rng(3);
        std::uniform_real_distribution<double> u(-1e3, 1e3);
        for (int trial = 0; trial < 25; ++trial) {
            ModelSpec m;
            Index width = 1 + static_cast<Index>(rng() % 5);
            for (int l = 0; l < 3; ++l) {
                const Index next = 1 + static_cast<Index>(rng() % 5);
                LayerSpec dense;
                dense.in_dim = width;
                dense.out_dim = next;
                std::vector<double> w(static_cast<std::size_t>(width * next));
                for (auto& v : w) v = u(rng) / 7.0;
                dense.blobs["weight"] = w;
                dense.blobs["bias"] = std::vector<double>(static_cast<std::size_t>(next), 1e-300);
                m.layers.push_back(dense);
                LayerSpec relu;
                relu.kind = LayerKind::relu;
                relu.in_dim = relu.out_dim = next;
                m.layers.push_back(relu);
                width = next;
            }
            const std::string text = dump_model(m);
            const ModelSpec back = parse_model(text);
            CHECK(back == m);
            CHECK(dump_model(back) == text);
        }
    }

    TEST_CASE("model spec rejects broken chains")
    {
        ModelSpec m;
        LayerSpec a;
        a.in_dim = 2;
        a.out_dim = 3;
        LayerSpec b;
        b.kind = LayerKind::relu;
        b.in_dim = b.out_dim = 4;
        m.layers = {a, b};
        CHECK_THROWS_AS(m.validate(), DimensionError);
        CHECK_THROWS_AS(layer_kind_from_string("lstm"), FormatError);
        CHECK(layer_kind_from_string("grelu-student") == LayerKind::grelu_student);
    }
}
