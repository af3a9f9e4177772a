#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ropelab/core.hpp"
#include "ropelab/quatchain.hpp"
#include "ropelab/sim.hpp"

namespace ropelab {

struct DatasetManifest {
    std::size_t segment_count = 0;    // L
    double link_length = 0.0;         // ℓ, mm
    std::size_t horizon = 0;          // T
    std::size_t n_trajectories = 0;
    std::uint64_t base_seed = 0;
    std::uint32_t format_version = 1;
    std::vector<std::size_t> train, val, test;
};

struct Batch {
    std::size_t batch_size = 0;  // B
    std::size_t window = 0;      // n
    std::size_t dim = 0;         // 3 + 4(L-1)
    std::vector<float> states;          // [B, n, dim]
    std::vector<std::uint32_t> grasps;  // [B, n-1]
    std::vector<float> displacements;   // [B, n-1, 2]
};

namespace data_detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CorruptDataset("unexpected end of record");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float read_f32(std::istream& is) {
    std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline std::string record_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "traj_%05zu.bin", k);
    return buf;
}

}  // namespace data_detail

// One binary record per trajectory plus manifest.json. Record layout
// (little-endian): magic "DLO1", u32 L, u32 T, f32 link length; then the
// T+1 states as f32 xyz triples, then T actions as (u32, f32, f32).
inline void save_dataset(const std::vector<Trajectory>& trajectories,
                         const DatasetManifest& manifest, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (trajectories.size() != manifest.n_trajectories)
        throw CorruptDataset("save_dataset: trajectory count does not match manifest");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("save_dataset: cannot create " + dir.string());

    nlohmann::json j;
    j["format_version"] = manifest.format_version;
    j["segment_count"] = manifest.segment_count;
    j["link_length"] = manifest.link_length;
    j["horizon"] = manifest.horizon;
    j["n_trajectories"] = manifest.n_trajectories;
    j["base_seed"] = manifest.base_seed;
    j["split"] = {{"train", manifest.train}, {"val", manifest.val}, {"test", manifest.test}};
    {
        std::ofstream os(dir / "manifest.json", std::ios::binary);
        if (!os) throw IoError("save_dataset: cannot write manifest.json");
        os << j.dump(2) << "\n";
        if (!os) throw IoError("save_dataset: write failure on manifest.json");
    }

    for (std::size_t k = 0; k < trajectories.size(); ++k) {
        const Trajectory& t = trajectories[k];
        if (t.states.size() != manifest.horizon + 1 ||
            t.actions.size() != manifest.horizon ||
            (!t.states.empty() && t.states[0].positions.size() != manifest.segment_count))
            throw CorruptDataset("save_dataset: trajectory shape does not match manifest");
        std::ofstream os(dir / data_detail::record_name(k), std::ios::binary);
        if (!os) throw IoError("save_dataset: cannot write record " + std::to_string(k));
        os.write("DLO1", 4);
        data_detail::write_u32(os, static_cast<std::uint32_t>(manifest.segment_count));
        data_detail::write_u32(os, static_cast<std::uint32_t>(manifest.horizon));
        data_detail::write_f32(os, static_cast<float>(manifest.link_length));
        for (const RopeState& s : t.states)
            for (const Vec3& p : s.positions) {
                data_detail::write_f32(os, static_cast<float>(p.x));
                data_detail::write_f32(os, static_cast<float>(p.y));
                data_detail::write_f32(os, static_cast<float>(p.z));
            }
        for (const PickPlaceAction& a : t.actions) {
            data_detail::write_u32(os, static_cast<std::uint32_t>(a.grasp_index));
            data_detail::write_f32(os, static_cast<float>(a.dx));
            data_detail::write_f32(os, static_cast<float>(a.dy));
        }
        if (!os) throw IoError("save_dataset: write failure on record " + std::to_string(k));
    }
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json", std::ios::binary);
    if (!is) throw IoError("load_dataset: missing manifest.json in " + dir.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception&) {
        throw FormatError("load_dataset: manifest.json is not valid JSON");
    }
    DatasetManifest m;
    try {
        m.format_version = j.at("format_version").get<std::uint32_t>();
        m.segment_count = j.at("segment_count").get<std::size_t>();
        m.link_length = j.at("link_length").get<double>();
        m.horizon = j.at("horizon").get<std::size_t>();
        m.n_trajectories = j.at("n_trajectories").get<std::size_t>();
        m.base_seed = j.at("base_seed").get<std::uint64_t>();
        m.train = j.at("split").at("train").get<std::vector<std::size_t>>();
        m.val = j.at("split").at("val").get<std::vector<std::size_t>>();
        m.test = j.at("split").at("test").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception&) {
        throw FormatError("load_dataset: manifest.json is missing required fields");
    }
    if (m.format_version != 1) throw FormatError("load_dataset: unsupported format_version");
    return m;
}

inline Trajectory load_record(const std::filesystem::path& file, const DatasetManifest& m) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("load_dataset: missing record " + file.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DLO1", 4) != 0)
        throw FormatError("load_dataset: bad magic in " + file.string());
    std::uint32_t L = data_detail::read_u32(is);
    std::uint32_t T = data_detail::read_u32(is);
    float len = data_detail::read_f32(is);
    if (L != m.segment_count || T != m.horizon ||
        len != static_cast<float>(m.link_length))
        throw CorruptDataset("load_dataset: record header disagrees with manifest");
    Trajectory t;
    t.states.resize(T + 1);
    for (RopeState& s : t.states) {
        s.positions.resize(L);
        for (Vec3& p : s.positions) {
            p.x = data_detail::read_f32(is);
            p.y = data_detail::read_f32(is);
            p.z = data_detail::read_f32(is);
        }
    }
    t.actions.resize(T);
    for (PickPlaceAction& a : t.actions) {
        a.grasp_index = data_detail::read_u32(is);
        a.dx = data_detail::read_f32(is);
        a.dy = data_detail::read_f32(is);
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw CorruptDataset("load_dataset: trailing bytes in " + file.string());
    return t;
}

inline std::pair<DatasetManifest, std::vector<Trajectory>> load_dataset(
    const std::filesystem::path& dir) {
    DatasetManifest m = load_manifest(dir);
    std::vector<Trajectory> out;
    out.reserve(m.n_trajectories);
    for (std::size_t k = 0; k < m.n_trajectories; ++k)
        out.push_back(load_record(dir / data_detail::record_name(k), m));
    return {m, out};
}

// Deterministic shuffled split; counts are floored, remainder goes to train.
inline void split(DatasetManifest& manifest, double f_train, double f_val, double f_test,
                  std::uint64_t seed) {
    if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
        throw ConfigError("split: fractions must sum to 1");
    if (f_train < 0 || f_val < 0 || f_test < 0)
        throw ConfigError("split: fractions must be non-negative");
    const std::size_t n = manifest.n_trajectories;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    std::size_t n_val = static_cast<std::size_t>(f_val * static_cast<double>(n));
    std::size_t n_test = static_cast<std::size_t>(f_test * static_cast<double>(n));
    std::size_t n_train = n - n_val - n_test;
    manifest.train.assign(idx.begin(), idx.begin() + n_train);
    manifest.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    manifest.test.assign(idx.begin() + n_train + n_val, idx.end());
}

// Caches the flattened quaternion-chain encoding of every state once, then
// draws contiguous windows uniformly over (trajectory, start offset).
class BatchSampler {
  public:
    BatchSampler(const std::vector<Trajectory>& trajectories, double link_length)
        : trajectories_(&trajectories), link_length_(link_length) {
        if (trajectories.empty()) throw EmptyDataset("BatchSampler: no trajectories");
        flat_.resize(trajectories.size());
    }

    std::size_t flat_dim() const {
        return 3 + 4 * ((*trajectories_)[0].states[0].positions.size() - 1);
    }

    Batch sample(const std::vector<std::size_t>& split_indices, std::size_t B, std::size_t n,
                 Rng& rng) {
        if (split_indices.empty()) throw EmptyDataset("sample_batch: empty split");
        const std::size_t n_states = (*trajectories_)[0].states.size();  // T + 1
        if (n > n_states) throw WindowTooLong("sample_batch: window exceeds trajectory length");
        if (n < 2) throw ConfigError("sample_batch: window must cover at least one transition");
        const std::size_t D = flat_dim();
        Batch b;
        b.batch_size = B;
        b.window = n;
        b.dim = D;
        b.states.resize(B * n * D);
        b.grasps.resize(B * (n - 1));
        b.displacements.resize(B * (n - 1) * 2);
        for (std::size_t w = 0; w < B; ++w) {
            std::size_t k = split_indices[rng.next_below(split_indices.size())];
            if (k >= trajectories_->size())
                throw CorruptDataset("sample_batch: split index out of range");
            std::size_t start = static_cast<std::size_t>(rng.next_below(n_states - n + 1));
            const auto& flat = encoded(k);
            const Trajectory& t = (*trajectories_)[k];
            for (std::size_t s = 0; s < n; ++s)
                std::copy(flat[start + s].begin(), flat[start + s].end(),
                          b.states.begin() + (w * n + s) * D);
            for (std::size_t s = 0; s + 1 < n; ++s) {
                const PickPlaceAction& a = t.actions[start + s];
                b.grasps[w * (n - 1) + s] = static_cast<std::uint32_t>(a.grasp_index);
                b.displacements[(w * (n - 1) + s) * 2] = static_cast<float>(a.dx);
                b.displacements[(w * (n - 1) + s) * 2 + 1] = static_cast<float>(a.dy);
            }
        }
        return b;
    }

    // flattened [T+1][3+4(L-1)] encoding of trajectory k, computed on first use
    const std::vector<std::vector<float>>& encoded(std::size_t k) {
        auto& slot = flat_[k];
        if (slot.empty()) {
            const Trajectory& t = (*trajectories_)[k];
            slot.reserve(t.states.size());
            for (const RopeState& s : t.states) {
                auto v = flatten(encode_chain(s, link_length_));
                std::vector<float> f(v.size());
                for (std::size_t i = 0; i < v.size(); ++i) f[i] = static_cast<float>(v[i]);
                slot.push_back(std::move(f));
            }
        }
        return slot;
    }

  private:
    const std::vector<Trajectory>* trajectories_;
    double link_length_;
    std::vector<std::vector<std::vector<float>>> flat_;
};

inline Batch sample_batch(BatchSampler& sampler, const std::vector<std::size_t>& split_indices,
                          std::size_t B, std::size_t n, Rng& rng) {
    return sampler.sample(split_indices, B, n, rng);
}

}  // namespace ropelab
