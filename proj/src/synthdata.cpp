#include "dgrnet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dgrnet/rng.hpp"
#include "dgrnet/serialize.hpp"

namespace dgrnet {

namespace {

namespace fs = std::filesystem;

// Region codes by nesting depth.
enum Region : int { kBg = 0, kEdema = 1, kCore = 2, kEnh = 3 };

// Per-modality intensity profiles (T1, T1ce, T2, FLAIR). Built as
// 0.5 + amp[region] * sign[modality] + jitter so that the midpoint between
// adjacent regions has a much smaller inter-modality spread than either
// interior; that is what makes the ambiguity band genuinely ambiguous.
constexpr double kSign[4] = {+1.0, -1.0, +1.0, -1.0};
constexpr double kAmp[4] = {0.02, 0.30, -0.22, 0.18};  // bg, edema, core, enh
constexpr double kJitter[4][4] = {
    // bg      edema   core    enh
    {+0.010, +0.020, -0.015, +0.025},  // T1
    {-0.015, +0.030, +0.010, -0.020},  // T1ce
    {+0.020, -0.025, +0.015, +0.010},  // T2
    {-0.010, +0.015, -0.020, -0.015},  // FLAIR
};
constexpr double kContrastScale[3] = {0.85, 1.0, 1.15};
constexpr double kNoiseSigma = 0.05;
constexpr int kBandRadius = 2;

double region_intensity(int modality, int region, int contrast_class) {
    return 0.5 + (kAmp[region] * kSign[modality] + kJitter[modality][region]) * kContrastScale[contrast_class];
}

struct Ellipsoid {
    std::array<double, 3> c;
    std::array<double, 3> r;
    bool contains(int z, int y, int x) const {
        const double dz = (z - c[0]) / r[0], dy = (y - c[1]) / r[1], dx = (x - c[2]) / r[2];
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
    bool fits(const std::array<int, 3>& dims) const {
        for (int a = 0; a < 3; ++a)
            if (c[a] - r[a] < 1.0 || c[a] + r[a] > dims[a] - 2.0) return false;
        return true;
    }
};

// Fixed linear map from generator attributes to report tokens; seeded with a
// constant so every dataset shares the same embedding space.
const std::vector<double>& token_matrix() {
    static const std::vector<double> m = [] {
        Rng rng(0x7e47d00dULL);
        constexpr int attr_dim = 8 + 9 + 3 + 1;
        return rng.normal_vec<double>(std::size_t(kTokenCount) * kTokenDim * attr_dim,
                                      0.0, 1.0 / std::sqrt(double(attr_dim)));
    }();
    return m;
}

}  // namespace

Case generate_case(std::uint64_t seed, std::array<int, 3> dims) {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] % 8 != 0 || dims[a] <= 0)
            throw std::invalid_argument("generate_case: dim " + std::to_string(dims[a]) +
                                        " is not a positive multiple of 8; pad to " +
                                        std::to_string(((dims[a] + 7) / 8) * 8));
    }
    Rng rng(seed);
    const int D = dims[0], H = dims[1], W = dims[2];
    const std::size_t N = std::size_t(D) * H * W;

    Ellipsoid wt, tc, et;
    std::vector<std::uint8_t> region(N);
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
        for (int a = 0; a < 3; ++a) {
            wt.c[a] = dims[a] * rng.uniform(0.40, 0.60);
            wt.r[a] = dims[a] * rng.uniform(0.24, 0.36);
        }
        for (int a = 0; a < 3; ++a) {
            tc.c[a] = wt.c[a] + dims[a] * rng.uniform(-0.05, 0.05);
            tc.r[a] = wt.r[a] * rng.uniform(0.55, 0.70);
            et.c[a] = tc.c[a] + dims[a] * rng.uniform(-0.03, 0.03);
            et.r[a] = tc.r[a] * rng.uniform(0.50, 0.65);
        }
        if (!wt.fits(dims)) continue;  // radii exceed the volume: resample

        std::size_t n_et = 0;
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const std::size_t i = (std::size_t(z) * H + y) * W + x;
                    // nesting enforced by intersection
                    const bool in_wt = wt.contains(z, y, x);
                    const bool in_tc = in_wt && tc.contains(z, y, x);
                    const bool in_et = in_tc && et.contains(z, y, x);
                    region[i] = in_et ? kEnh : in_tc ? kCore : in_wt ? kEdema : kBg;
                    n_et += in_et;
                }
        ok = n_et >= 8;
    }
    if (!ok) throw std::runtime_error("generate_case: could not fit nested regions after 64 attempts");

    Case c;
    c.id = "case_" + std::to_string(seed);
    c.dims = dims;
    c.provenance = {wt.c, tc.c, et.c, wt.r, tc.r, et.r, int(rng.uniform_int(3)), seed};
    const int cc = c.provenance.contrast_class;

    // clean render
    std::vector<double> clean(4 * N);
    for (int m = 0; m < 4; ++m)
        for (std::size_t i = 0; i < N; ++i) clean[m * N + i] = region_intensity(m, region[i], cc);

    // ambiguity band: pull voxels near a region boundary halfway toward the
    // mean intensity of the differing-label neighbours
    std::vector<std::array<float, 4>> band_target(N);
    std::vector<std::uint8_t> in_band(N, 0);
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t i = (std::size_t(z) * H + y) * W + x;
                double acc[4] = {0, 0, 0, 0};
                int count = 0;
                for (int dz = -kBandRadius; dz <= kBandRadius; ++dz)
                    for (int dy = -kBandRadius; dy <= kBandRadius; ++dy)
                        for (int dx = -kBandRadius; dx <= kBandRadius; ++dx) {
                            if (dz * dz + dy * dy + dx * dx > kBandRadius * kBandRadius) continue;
                            const int zz = z + dz, yy = y + dy, xx = x + dx;
                            if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                            const std::size_t j = (std::size_t(zz) * H + yy) * W + xx;
                            if (region[j] == region[i]) continue;
                            for (int m = 0; m < 4; ++m) acc[m] += region_intensity(m, region[j], cc);
                            ++count;
                        }
                if (count > 0) {
                    in_band[i] = 1;
                    for (int m = 0; m < 4; ++m) band_target[i][m] = float(acc[m] / count);
                }
            }
    for (int m = 0; m < 4; ++m)
        for (std::size_t i = 0; i < N; ++i)
            if (in_band[i]) clean[m * N + i] = 0.5 * (clean[m * N + i] + band_target[i][m]);

    // noise, then clamp to [0,1]
    c.x.resize(4 * N);
    for (std::size_t i = 0; i < c.x.size(); ++i)
        c.x[i] = std::clamp(clean[i] + rng.normal(0.0, kNoiseSigma), 0.0, 1.0);

    // labels, channel order (TC, WT, ET)
    c.y.assign(3 * N, 0);
    for (std::size_t i = 0; i < N; ++i) {
        c.y[kTC * N + i] = region[i] >= kCore;
        c.y[kWT * N + i] = region[i] >= kEdema;
        c.y[kET * N + i] = region[i] == kEnh;
    }

    // report tokens: fixed linear map of (center octant, log radii, contrast class)
    std::vector<double> attr;
    attr.reserve(21);
    {
        int octant = 0;
        for (int a = 0; a < 3; ++a)
            if (wt.c[a] >= dims[a] / 2.0) octant |= 1 << a;
        for (int k = 0; k < 8; ++k) attr.push_back(k == octant ? 1.0 : 0.0);
        for (const auto& r : {wt.r, tc.r, et.r})
            for (int a = 0; a < 3; ++a) attr.push_back(std::log(r[a]));
        for (int k = 0; k < 3; ++k) attr.push_back(k == cc ? 1.0 : 0.0);
        attr.push_back(1.0);
    }
    const auto& M = token_matrix();
    const int attr_dim = int(attr.size());
    c.tokens.assign(std::size_t(kTokenCount) * kTokenDim, 0.0);
    for (int t = 0; t < kTokenCount * kTokenDim; ++t) {
        double s = 0;
        for (int k = 0; k < attr_dim; ++k) s += M[std::size_t(t) * attr_dim + k] * attr[k];
        c.tokens[t] = s;
    }
    c.token_mask.assign(kTokenCount, 1);
    return c;
}

namespace {

std::vector<float> to_f32(const std::vector<double>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = float(v[i]);
    return out;
}

std::vector<float> to_f32(const std::vector<std::uint8_t>& v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = float(v[i]);
    return out;
}

nlohmann::json provenance_json(const CaseProvenance& p) {
    return nlohmann::json{{"wt_center", p.wt_center}, {"tc_center", p.tc_center}, {"et_center", p.et_center},
                          {"wt_radii", p.wt_radii},   {"tc_radii", p.tc_radii},   {"et_radii", p.et_radii},
                          {"contrast_class", p.contrast_class}, {"seed", p.seed}};
}

CaseProvenance provenance_from_json(const nlohmann::json& j) {
    CaseProvenance p;
    p.wt_center = j.at("wt_center");
    p.tc_center = j.at("tc_center");
    p.et_center = j.at("et_center");
    p.wt_radii = j.at("wt_radii");
    p.tc_radii = j.at("tc_radii");
    p.et_radii = j.at("et_radii");
    p.contrast_class = j.at("contrast_class");
    p.seed = j.at("seed");
    return p;
}

}  // namespace

void save_case(const Case& c, const std::filesystem::path& dir) {
    fs::create_directories(dir);
    const int D = c.dims[0], H = c.dims[1], W = c.dims[2];
    save_volume_f32(dir / "x", "x", {4, D, H, W}, to_f32(c.x));
    save_volume_f32(dir / "y", "y", {3, D, H, W}, to_f32(c.y));
    save_volume_f32(dir / "t", "t", {kTokenCount, kTokenDim}, to_f32(c.tokens));
    nlohmann::json meta{{"id", c.id},
                        {"dims", c.dims},
                        {"token_mask", c.token_mask},
                        {"provenance", provenance_json(c.provenance)}};
    write_text_atomic(dir / "case.json", meta.dump(2) + "\n");
}

Case load_case(const std::filesystem::path& dir) {
    std::ifstream f(dir / "case.json");
    if (!f) throw std::runtime_error("cannot open " + (dir / "case.json").string());
    nlohmann::json meta;
    f >> meta;
    Case c;
    c.id = meta.at("id").get<std::string>();
    c.dims = meta.at("dims");
    c.token_mask = meta.at("token_mask").get<std::vector<std::uint8_t>>();
    c.provenance = provenance_from_json(meta.at("provenance"));
    auto x = load_volume_f32(dir / "x");
    auto y = load_volume_f32(dir / "y");
    auto t = load_volume_f32(dir / "t");
    c.x.assign(x.data.begin(), x.data.end());
    c.tokens.assign(t.data.begin(), t.data.end());
    c.y.resize(y.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) c.y[i] = std::uint8_t(y.data[i] != 0.0f);
    return c;
}

DatasetManifest generate_dataset(const std::filesystem::path& out_dir, std::uint64_t base_seed, int n,
                                 std::array<int, 3> dims) {
    DatasetManifest m;
    m.base_seed = base_seed;
    m.dims = dims;
    fs::create_directories(out_dir / "cases");
    const int n_train = (n * 60) / 100;
    const int n_val = (n * 20) / 100;
    for (int i = 0; i < n; ++i) {
        Case c = generate_case(base_seed + std::uint64_t(i), dims);
        char buf[32];
        std::snprintf(buf, sizeof buf, "case_%04d", i);
        c.id = buf;
        save_case(c, out_dir / "cases" / c.id);
        m.ids.push_back(c.id);
        m.splits.push_back(i < n_train ? "train" : i < n_train + n_val ? "val" : "test");
    }
    nlohmann::json cases = nlohmann::json::array();
    for (std::size_t i = 0; i < m.ids.size(); ++i)
        cases.push_back({{"id", m.ids[i]}, {"seed", base_seed + i}, {"split", m.splits[i]}});
    nlohmann::json j{{"base_seed", base_seed}, {"dims", dims}, {"cases", cases}};
    write_text_atomic(out_dir / "manifest.json", j.dump(2) + "\n");
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dataset_dir) {
    std::ifstream f(dataset_dir / "manifest.json");
    if (!f) throw std::runtime_error("corrupt or missing dataset: cannot open " +
                                     (dataset_dir / "manifest.json").string());
    nlohmann::json j;
    f >> j;
    DatasetManifest m;
    m.base_seed = j.at("base_seed");
    m.dims = j.at("dims");
    for (const auto& e : j.at("cases")) {
        m.ids.push_back(e.at("id").get<std::string>());
        m.splits.push_back(e.at("split").get<std::string>());
    }
    return m;
}

std::vector<std::string> split_ids(const DatasetManifest& m, const std::string& split) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < m.ids.size(); ++i)
        if (m.splits[i] == split) out.push_back(m.ids[i]);
    return out;
}

}  // namespace dgrnet
