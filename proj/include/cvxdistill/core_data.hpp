#pragma once
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <cvxdistill/types.hpp>

namespace cvxdistill {

// Input rows plus optional class ids in [0, C).
struct Dataset
{
    Matrix x;
    std::optional<std::vector<int>> labels;

    Index rows() const { return x.rows(); }
    Index cols() const { return x.cols(); }
    // 1 + max label, or 0 when unlabeled.
    int num_classes() const;
};

// Teacher-block input activations z and output activations t, row-aligned.
struct ActivationDataset
{
    Matrix z;
    Matrix t;

    Index rows() const { return z.rows(); }
};

struct SplitSpec
{
    double train_fraction = 1.0;
    std::uint64_t seed = 0;
    std::optional<std::size_t> samples_per_class;
};

struct Standardization
{
    Matrix x;
    Vector means;
    Vector scales;
};

Dataset parse_csv(std::string_view text, bool has_labels);
Dataset load_csv(const std::filesystem::path& path, bool has_labels);
std::string format_csv(const Dataset& ds);
void save_csv(const Dataset& ds, const std::filesystem::path& path);

/*
 * CVXA activation files, little-endian:
 *   "CVXA" | u32 version (=1) | u64 n | u64 d_in | u64 d_out
 *   | n*d_in f32 (z, row-major) | n*d_out f32 (t, row-major)
 * Values are narrowed to f32 on encode and widened exactly on decode.
 */
inline constexpr std::uint32_t cvxa_version = 1;

std::string encode_activations(const ActivationDataset& ds);
ActivationDataset decode_activations(std::string_view bytes);
void save_activations(const ActivationDataset& ds, const std::filesystem::path& path);
ActivationDataset load_activations(const std::filesystem::path& path);

Dataset select_rows(const Dataset& ds, std::span<const Index> rows);
ActivationDataset select_rows(const ActivationDataset& ds, std::span<const Index> rows);

// Seeded per-class subsample. Each class keeps min(samples_per_class, available)
// rows chosen by a seeded shuffle; surviving rows keep their original order.
Dataset subsample_per_class(const Dataset& ds, const SplitSpec& spec);

// Seeded shuffle split; the first part holds round(train_fraction * n) rows.
std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, const SplitSpec& spec);

// Column-wise centering and scaling by the population standard deviation.
// Zero-variance columns keep scale 1.
Standardization standardize(const Matrix& x);
Matrix apply_standardization(const Matrix& x, const Vector& means, const Vector& scales);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

} // namespace cvxdistill
