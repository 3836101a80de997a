#include <cvxdistill/core_data.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace cvxdistill {
namespace {

static_assert(std::endian::native == std::endian::little,
              "CVXA encoding assumes a little-endian host");

std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

double parse_number(std::string_view field, std::size_t row, std::size_t col)
{
    field = trim(field);
    if (!field.empty() && field.front() == '+') field.remove_prefix(1);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size()) {
        throw FormatError("parse error at row " + std::to_string(row) + ", col " +
                          std::to_string(col) + ": '" + std::string(field) + "'");
    }
    if (!std::isfinite(value)) {
        throw FormatError("non-finite value at row " + std::to_string(row) + ", col " +
                          std::to_string(col));
    }
    return value;
}

template <class T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T take(std::string_view& in)
{
    if (in.size() < sizeof(T)) throw FormatError("truncated CVXA payload");
    T value;
    std::memcpy(&value, in.data(), sizeof(T));
    in.remove_prefix(sizeof(T));
    return value;
}

void put_matrix(std::string& out, const Matrix& m)
{
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            put(out, static_cast<float>(m(i, j)));
        }
    }
}

Matrix take_matrix(std::string_view& in, std::uint64_t rows, std::uint64_t cols)
{
    if (cols != 0 && rows > in.size() / sizeof(float) / cols) {
        throw FormatError("truncated CVXA payload");
    }
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const float v = take<float>(in);
            if (!std::isfinite(v)) throw FormatError("non-finite value in CVXA payload");
            m(i, j) = v;
        }
    }
    return m;
}

} // namespace

int Dataset::num_classes() const
{
    if (!labels || labels->empty()) return 0;
    return *std::max_element(labels->begin(), labels->end()) + 1;
}

Dataset parse_csv(std::string_view text, bool has_labels)
{
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    std::size_t width = 0;

    std::size_t row = 0;
    while (!text.empty()) {
        const auto eol = text.find('\n');
        auto line = trim(text.substr(0, eol));
        text.remove_prefix(eol == std::string_view::npos ? text.size() : eol + 1);
        if (line.empty()) continue;

        std::vector<double> values;
        std::size_t col = 0;
        while (true) {
            const auto comma = line.find(',');
            values.push_back(parse_number(line.substr(0, comma), row, col));
            ++col;
            if (comma == std::string_view::npos) break;
            line.remove_prefix(comma + 1);
        }
        if (rows.empty()) {
            width = values.size();
            if (has_labels && width < 2) {
                throw FormatError("labelled CSV needs at least one feature column");
            }
        } else if (values.size() != width) {
            throw FormatError("inconsistent width at row " + std::to_string(row) + ": expected " +
                              std::to_string(width) + " columns, got " +
                              std::to_string(values.size()));
        }
        if (has_labels) {
            const double label = values.back();
            if (label != std::floor(label) || label < 0 || label > 1e9) {
                throw FormatError("non-integral label at row " + std::to_string(row) + ", col " +
                                  std::to_string(width - 1));
            }
            labels.push_back(static_cast<int>(label));
            values.pop_back();
        }
        rows.push_back(std::move(values));
        ++row;
    }
    if (rows.empty()) throw FormatError("no rows");

    Dataset ds;
    ds.x.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            ds.x(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
        }
    }
    if (has_labels) ds.labels = std::move(labels);
    return ds;
}

Dataset load_csv(const std::filesystem::path& path, bool has_labels)
{
    return parse_csv(read_file(path), has_labels);
}

std::string format_csv(const Dataset& ds)
{
    std::string out;
    char buf[64];
    for (Index i = 0; i < ds.rows(); ++i) {
        for (Index j = 0; j < ds.cols(); ++j) {
            if (j) out.push_back(',');
            const auto res = std::to_chars(buf, buf + sizeof(buf), ds.x(i, j));
            out.append(buf, res.ptr);
        }
        if (ds.labels) {
            out.push_back(',');
            out += std::to_string((*ds.labels)[static_cast<std::size_t>(i)]);
        }
        out.push_back('\n');
    }
    return out;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path)
{
    write_file(path, format_csv(ds));
}

std::string encode_activations(const ActivationDataset& ds)
{
    if (ds.z.rows() != ds.t.rows()) {
        throw DimensionError("activation z and t row counts differ");
    }
    std::string out;
    out.reserve(32 + sizeof(float) * static_cast<std::size_t>(ds.z.size() + ds.t.size()));
    out.append("CVXA", 4);
    put<std::uint32_t>(out, cvxa_version);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(ds.z.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(ds.z.cols()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(ds.t.cols()));
    put_matrix(out, ds.z);
    put_matrix(out, ds.t);
    return out;
}

ActivationDataset decode_activations(std::string_view bytes)
{
    if (bytes.size() < 4 || bytes.substr(0, 4) != "CVXA") throw FormatError("bad magic in CVXA file");
    bytes.remove_prefix(4);
    const auto version = take<std::uint32_t>(bytes);
    if (version != cvxa_version) {
        throw FormatError("CVXA version mismatch: expected " + std::to_string(cvxa_version) +
                          ", got " + std::to_string(version));
    }
    const auto n = take<std::uint64_t>(bytes);
    const auto d_in = take<std::uint64_t>(bytes);
    const auto d_out = take<std::uint64_t>(bytes);
    ActivationDataset ds;
    ds.z = take_matrix(bytes, n, d_in);
    ds.t = take_matrix(bytes, n, d_out);
    if (!bytes.empty()) throw FormatError("trailing bytes after CVXA payload");
    return ds;
}

void save_activations(const ActivationDataset& ds, const std::filesystem::path& path)
{
    write_file(path, encode_activations(ds));
}

ActivationDataset load_activations(const std::filesystem::path& path)
{
    return decode_activations(read_file(path));
}

Dataset select_rows(const Dataset& ds, std::span<const Index> rows)
{
    Dataset out;
    out.x.resize(static_cast<Index>(rows.size()), ds.cols());
    std::vector<int> labels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.x.row(static_cast<Index>(i)) = ds.x.row(rows[i]);
        if (ds.labels) labels.push_back((*ds.labels)[static_cast<std::size_t>(rows[i])]);
    }
    if (ds.labels) out.labels = std::move(labels);
    return out;
}

ActivationDataset select_rows(const ActivationDataset& ds, std::span<const Index> rows)
{
    ActivationDataset out;
    out.z.resize(static_cast<Index>(rows.size()), ds.z.cols());
    out.t.resize(static_cast<Index>(rows.size()), ds.t.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.z.row(static_cast<Index>(i)) = ds.z.row(rows[i]);
        out.t.row(static_cast<Index>(i)) = ds.t.row(rows[i]);
    }
    return out;
}

Dataset subsample_per_class(const Dataset& ds, const SplitSpec& spec)
{
    if (!ds.labels) throw Error("subsample_per_class requires labels");
    std::map<int, std::vector<Index>> by_class;
    for (Index i = 0; i < ds.rows(); ++i) {
        by_class[(*ds.labels)[static_cast<std::size_t>(i)]].push_back(i);
    }
    Rng rng(spec.seed);
    std::vector<Index> keep;
    for (auto& [label, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto take_n = std::min(idx.size(), spec.samples_per_class.value_or(idx.size()));
        keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take_n));
    }
    std::sort(keep.begin(), keep.end());
    return select_rows(ds, keep);
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, const SplitSpec& spec)
{
    if (!(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0)) {
        throw Error("train_fraction must lie in (0, 1]");
    }
    std::vector<Index> idx(static_cast<std::size_t>(ds.rows()));
    std::iota(idx.begin(), idx.end(), Index{0});
    Rng rng(spec.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(idx.size())));
    std::vector<Index> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<Index> test(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {select_rows(ds, train), select_rows(ds, test)};
}

Standardization standardize(const Matrix& x)
{
    Standardization out;
    const auto n = static_cast<double>(x.rows());
    out.means = x.colwise().mean().transpose();
    out.scales.resize(x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        const double var = (x.col(j).array() - out.means(j)).square().sum() / n;
        const double sd = std::sqrt(var);
        // dead teacher units show up as constant columns
        out.scales(j) = sd > 1e-12 * std::max(1.0, std::abs(out.means(j))) ? sd : 1.0;
    }
    out.x = apply_standardization(x, out.means, out.scales);
    return out;
}

Matrix apply_standardization(const Matrix& x, const Vector& means, const Vector& scales)
{
    if (x.cols() != means.size() || x.cols() != scales.size()) {
        throw DimensionError("standardization width mismatch");
    }
    return ((x.rowwise() - means.transpose()).array().rowwise() / scales.transpose().array()).matrix();
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace cvxdistill
