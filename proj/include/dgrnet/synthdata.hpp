#pragma once

// Synthetic multi-modal volumes with nested labels (ET inside TC inside WT),
// a two-voxel ambiguity band along region boundaries, and report tokens that
// linearly encode the generator attributes. Cases are reproducible
// byte-for-byte from their seed.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dgrnet {

inline constexpr int kTokenCount = 16;  // L
inline constexpr int kTokenDim = 32;    // d_t

struct CaseProvenance {
    std::array<double, 3> wt_center{}, tc_center{}, et_center{};
    std::array<double, 3> wt_radii{}, tc_radii{}, et_radii{};
    int contrast_class = 0;
    std::uint64_t seed = 0;
};

struct Case {
    std::string id;
    std::array<int, 3> dims{};           // D, H, W
    std::vector<double> x;               // [4, D, H, W] in [0,1]
    std::vector<std::uint8_t> y;         // [3, D, H, W], channel order TC, WT, ET
    std::vector<double> tokens;          // [L, d_t]
    std::vector<std::uint8_t> token_mask;  // per-token validity
    CaseProvenance provenance;

    std::size_t voxels() const { return std::size_t(dims[0]) * dims[1] * dims[2]; }
};

// Label channels of Case::y.
enum YChannel : int { kTC = 0, kWT = 1, kET = 2 };

Case generate_case(std::uint64_t seed, std::array<int, 3> dims = {32, 32, 32});

void save_case(const Case& c, const std::filesystem::path& dir);
Case load_case(const std::filesystem::path& dir);

struct DatasetManifest {
    std::uint64_t base_seed = 0;
    std::array<int, 3> dims{};
    std::vector<std::string> ids;
    std::vector<std::string> splits;  // "train" / "val" / "test", parallel to ids
};

// Generates n cases under out_dir/cases/<id>/ with a 60/20/20 split manifest.
DatasetManifest generate_dataset(const std::filesystem::path& out_dir, std::uint64_t base_seed, int n,
                                 std::array<int, 3> dims = {32, 32, 32});

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir);
std::vector<std::string> split_ids(const DatasetManifest& m, const std::string& split);

}  // namespace dgrnet
