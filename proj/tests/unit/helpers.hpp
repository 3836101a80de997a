#pragma once
#include <filesystem>
#include <random>
#include <string>

#include <cvxdistill/types.hpp>

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir
{
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("cvxdistill-" + tag + "-" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline double max_abs_diff(const cvxdistill::Matrix& a, const cvxdistill::Matrix& b)
{
    return (a - b).cwiseAbs().maxCoeff();
}

} // namespace testing
