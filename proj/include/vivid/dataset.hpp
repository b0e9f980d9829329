#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "vivid/common.hpp"
#include "vivid/ums.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// Synthetic planted-signal data. Each finding owns one image quadrant; the
// quadrant's brightness encodes the finding's state, so a correct encoder can
// recover the labels by looking at the right region. Unassessable findings
// (state null) get a quadrant of pure uniform noise carrying no signal.
// ---------------------------------------------------------------------------

struct SyntheticDatasetSpec {
    int num_samples = 2000;
    int num_findings = 4;
    int image_size = 32;
    double mean_present = 0.8;
    double mean_absent = 0.1;
    double mean_uncertain = 0.45;
    double noise_std = 0.05;
    double p_uncertain = 0.1;
    double p_null = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_samples < 1) throw ConfigError("num_samples must be >= 1");
        if (num_findings < 1 || num_findings > 4) {
            throw ConfigError("num_findings must be in [1, 4] (one quadrant per finding)");
        }
        if (image_size < 2 || image_size % 2 != 0) {
            throw ConfigError("image_size must be even and >= 2");
        }
        if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
        if (!(p_uncertain >= 0.0 && p_null >= 0.0 && p_uncertain + p_null <= 1.0)) {
            throw ConfigError("p_uncertain and p_null must be nonnegative with sum <= 1");
        }
        for (double m : {mean_present, mean_absent, mean_uncertain}) {
            if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("state means must be in [0, 1]");
        }
    }

    nlohmann::json to_json() const {
        return {{"num_samples", num_samples},
                {"num_findings", num_findings},
                {"image_size", image_size},
                {"mean_present", mean_present},
                {"mean_absent", mean_absent},
                {"mean_uncertain", mean_uncertain},
                {"noise_std", noise_std},
                {"p_uncertain", p_uncertain},
                {"p_null", p_null},
                {"seed", seed}};
    }

    static SyntheticDatasetSpec from_json(const nlohmann::json& j);
};

namespace detail {

inline void dataset_maybe_fields(const nlohmann::json& j, SyntheticDatasetSpec& s);

}  // namespace detail

inline SyntheticDatasetSpec SyntheticDatasetSpec::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
    static const std::vector<std::string> known = {
        "num_samples", "num_findings", "image_size",  "mean_present", "mean_absent",
        "mean_uncertain", "noise_std", "p_uncertain", "p_null",       "seed"};
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const auto& k : known) {
            if (key == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown key \"" + key + "\" in dataset spec");
    }
    SyntheticDatasetSpec s;
    detail::dataset_maybe_fields(j, s);
    s.validate();
    return s;
}

namespace detail {

template <typename T>
inline void spec_maybe(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("bad value for \"") + key + "\" in dataset spec");
    }
}

inline void dataset_maybe_fields(const nlohmann::json& j, SyntheticDatasetSpec& s) {
    spec_maybe(j, "num_samples", s.num_samples);
    spec_maybe(j, "num_findings", s.num_findings);
    spec_maybe(j, "image_size", s.image_size);
    spec_maybe(j, "mean_present", s.mean_present);
    spec_maybe(j, "mean_absent", s.mean_absent);
    spec_maybe(j, "mean_uncertain", s.mean_uncertain);
    spec_maybe(j, "noise_std", s.noise_std);
    spec_maybe(j, "p_uncertain", s.p_uncertain);
    spec_maybe(j, "p_null", s.p_null);
    spec_maybe(j, "seed", s.seed);
}

}  // namespace detail

// Quadrant of finding i (row-major over 2x2): {r0, r1, c0, c1}, half-open.
struct Region {
    int r0, r1, c0, c1;
};

inline Region finding_region(int finding_index, int image_size) {
    if (finding_index < 0 || finding_index > 3) {
        throw IndexError("finding index " + std::to_string(finding_index) +
                         " has no assigned region");
    }
    const int h = image_size / 2;
    const int qr = finding_index / 2, qc = finding_index % 2;
    return {qr * h, (qr + 1) * h, qc * h, (qc + 1) * h};
}

inline const std::vector<std::string>& quadrant_finding_names() {
    static const std::vector<std::string> names = {"upper_left_opacity", "upper_right_opacity",
                                                   "lower_left_opacity", "lower_right_opacity"};
    return names;
}

struct Sample {
    Image image;
    UmsRecord record;
};

struct Dataset {
    SchemaConfig schema;
    std::vector<Sample> samples;
};

// Deterministic in spec.seed: a fixed draw order (per sample: states for all
// findings, then region pixels in finding order, then the remaining quadrants'
// background) keeps byte-for-byte reproducibility. Schema prevalence is the
// empirical present-rate so the field sampler's frequency pools have content.
inline Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    Dataset ds;
    ds.schema.findings.assign(quadrant_finding_names().begin(),
                              quadrant_finding_names().begin() + spec.num_findings);

    auto clamp01 = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
    std::vector<int> present_counts(static_cast<std::size_t>(spec.num_findings), 0);

    ds.samples.reserve(static_cast<std::size_t>(spec.num_samples));
    for (int s = 0; s < spec.num_samples; ++s) {
        Sample sample;
        sample.record.image_id = [&] {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "synth-%06d", s);
            return std::string(buf);
        }();
        sample.record.findings = ds.schema.findings;

        for (int f = 0; f < spec.num_findings; ++f) {
            const double r = rng.uniform();
            FindingState st;
            if (r < spec.p_null) {
                st = FindingState::Null;
            } else if (r < spec.p_null + spec.p_uncertain) {
                st = FindingState::Uncertain;
            } else {
                st = rng.bernoulli(0.5) ? FindingState::Present : FindingState::Absent;
            }
            sample.record.states.push_back(st);
            sample.record.answerable.push_back(st != FindingState::Null);
            if (st == FindingState::Present) present_counts[static_cast<std::size_t>(f)] += 1;
        }

        sample.image = make_image(spec.image_size, spec.image_size);
        for (int f = 0; f < spec.num_findings; ++f) {
            const Region reg = finding_region(f, spec.image_size);
            const FindingState st = sample.record.states[static_cast<std::size_t>(f)];
            for (int r = reg.r0; r < reg.r1; ++r) {
                for (int c = reg.c0; c < reg.c1; ++c) {
                    double v;
                    if (st == FindingState::Null) {
                        v = rng.uniform();
                    } else {
                        const double mean = st == FindingState::Present ? spec.mean_present
                                            : st == FindingState::Absent
                                                ? spec.mean_absent
                                                : spec.mean_uncertain;
                        v = clamp01(mean + rng.gaussian() * spec.noise_std);
                    }
                    sample.image.at(r, c) = v;
                }
            }
        }
        for (int f = spec.num_findings; f < 4; ++f) {
            const Region reg = finding_region(f, spec.image_size);
            for (int r = reg.r0; r < reg.r1; ++r) {
                for (int c = reg.c0; c < reg.c1; ++c) {
                    sample.image.at(r, c) = clamp01(spec.mean_absent + rng.gaussian() * spec.noise_std);
                }
            }
        }
        sample.record.validate();
        ds.samples.push_back(std::move(sample));
    }

    for (int f = 0; f < spec.num_findings; ++f) {
        ds.schema.prevalence[ds.schema.findings[static_cast<std::size_t>(f)]] =
            static_cast<double>(present_counts[static_cast<std::size_t>(f)]) /
            static_cast<double>(spec.num_samples);
    }
    ds.schema.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/schema.json, <dir>/meta.json (spec + counts),
// <dir>/images.f64 (contiguous little-endian doubles, samples in order),
// <dir>/ums.jsonl (one record per line, aligned with the image order).
// ---------------------------------------------------------------------------

inline void write_dataset(const std::string& dir, const Dataset& ds,
                          const SyntheticDatasetSpec& spec) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());

    atomic_write_file(dir + "/schema.json", ds.schema.to_json().dump(2) + "\n");

    nlohmann::json meta;
    meta["spec"] = spec.to_json();
    meta["num_samples"] = ds.samples.size();
    meta["image_size"] = spec.image_size;
    atomic_write_file(dir + "/meta.json", meta.dump(2) + "\n");

    std::string pixels;
    pixels.reserve(ds.samples.size() * static_cast<std::size_t>(spec.image_size) *
                   spec.image_size * sizeof(double));
    for (const auto& s : ds.samples) {
        pixels.append(reinterpret_cast<const char*>(s.image.pixels.data()),
                      s.image.pixels.size() * sizeof(double));
    }
    atomic_write_file(dir + "/images.f64", pixels);

    std::vector<UmsRecord> records;
    records.reserve(ds.samples.size());
    for (const auto& s : ds.samples) records.push_back(s.record);
    atomic_write_file(dir + "/ums.jsonl", ums_jsonl_text(records));
}

inline Dataset read_dataset(const std::string& dir) {
    Dataset ds;
    ds.schema = SchemaConfig::from_json_file(dir + "/schema.json");

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(read_file(dir + "/meta.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("dataset meta.json is not valid JSON: " + std::string(e.what()));
    }
    if (!meta.contains("num_samples") || !meta.contains("image_size")) {
        throw FormatError("dataset meta.json lacks num_samples/image_size");
    }
    const auto n = meta["num_samples"].get<std::size_t>();
    const auto size = meta["image_size"].get<int>();
    if (size < 1) throw FormatError("dataset meta.json has a bad image_size");

    const std::string pixels = read_file(dir + "/images.f64");
    const std::size_t per_image = static_cast<std::size_t>(size) * size;
    if (pixels.size() != n * per_image * sizeof(double)) {
        throw FormatError("images.f64 size does not match meta.json (" +
                          std::to_string(pixels.size()) + " bytes for " + std::to_string(n) +
                          " images)");
    }

    auto records = read_ums_jsonl(dir + "/ums.jsonl", ds.schema);
    if (records.size() != n) {
        throw FormatError("ums.jsonl holds " + std::to_string(records.size()) +
                          " records for " + std::to_string(n) + " images");
    }

    ds.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.samples[i].image = make_image(size, size);
        std::memcpy(ds.samples[i].image.pixels.data(), pixels.data() + i * per_image * sizeof(double),
                    per_image * sizeof(double));
        ds.samples[i].record = std::move(records[i]);
    }
    return ds;
}

}  // namespace vivid
