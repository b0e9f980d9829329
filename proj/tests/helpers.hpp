#pragma once

// Shared generators for randomized round-trip and property tests.

#include <string>
#include <vector>

#include "vivid/common.hpp"
#include "vivid/ums.hpp"

namespace vivid::testing {

// Finding names with awkward characters so escaping is exercised: quotes,
// backslashes, spaces, control bytes, multi-byte UTF-8.
inline std::string random_finding_name(Rng& rng, int index) {
    static const std::vector<std::string> pieces = {
        "a", "b", "Zz", " ", "\"", "\\", "\n", "\t", "\x01", "\xc3\xa9", "\xe4\xb8\xad", "/",
    };
    std::string name = "F" + std::to_string(index) + " ";
    const int extra = 1 + rng.uniform_int(6);
    for (int i = 0; i < extra; ++i) {
        name += pieces[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pieces.size())))];
    }
    return name;
}

inline SchemaConfig random_schema(Rng& rng, int num_findings, bool with_prevalence) {
    SchemaConfig s;
    for (int i = 0; i < num_findings; ++i) s.findings.push_back(random_finding_name(rng, i));
    if (with_prevalence) {
        for (const auto& f : s.findings) s.prevalence[f] = rng.uniform();
    }
    s.validate();
    return s;
}

inline UmsRecord random_record(Rng& rng, const SchemaConfig& schema) {
    UmsRecord r;
    r.findings = schema.findings;
    for (std::size_t i = 0; i < schema.findings.size(); ++i) {
        switch (rng.uniform_int(4)) {
            case 0: r.states.push_back(FindingState::Present); break;
            case 1: r.states.push_back(FindingState::Absent); break;
            case 2: r.states.push_back(FindingState::Uncertain); break;
            default: r.states.push_back(FindingState::Null); break;
        }
        r.answerable.push_back(r.states.back() == FindingState::Null ? 0 : 1);
    }
    r.validate();
    return r;
}

// Random valid UTF-8 string (codepoints outside the surrogate range).
inline std::string random_utf8(Rng& rng, int max_codepoints) {
    std::string out;
    const int n = rng.uniform_int(max_codepoints + 1);
    for (int i = 0; i < n; ++i) {
        std::uint32_t cp;
        switch (rng.uniform_int(4)) {
            case 0: cp = static_cast<std::uint32_t>(rng.uniform_int(0x80)); break;
            case 1: cp = 0x80 + static_cast<std::uint32_t>(rng.uniform_int(0x800 - 0x80)); break;
            case 2: cp = 0x800 + static_cast<std::uint32_t>(rng.uniform_int(0x10000 - 0x800)); break;
            default: cp = 0x10000 + static_cast<std::uint32_t>(rng.uniform_int(0x10FFFF - 0x10000));
        }
        if (cp >= 0xD800 && cp <= 0xDFFF) cp = 0x40;
        if (cp < 0x80) {
            out += static_cast<char>(cp);
        } else if (cp < 0x800) {
            out += static_cast<char>(0xC0 | (cp >> 6));
            out += static_cast<char>(0x80 | (cp & 0x3F));
        } else if (cp < 0x10000) {
            out += static_cast<char>(0xE0 | (cp >> 12));
            out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (cp & 0x3F));
        } else {
            out += static_cast<char>(0xF0 | (cp >> 18));
            out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
            out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (cp & 0x3F));
        }
    }
    return out;
}

// The four-finding record from the canonical worked example: opacity present,
// pneumonia uncertain, effusion present, cardiomegaly not assessable.
inline SchemaConfig example_schema() {
    SchemaConfig s;
    s.findings = {"Lung Opacity", "Pneumonia", "Pleural Effusion", "Cardiomegaly"};
    return s;
}

inline UmsRecord example_record() {
    UmsRecord r;
    r.findings = example_schema().findings;
    r.states = {FindingState::Present, FindingState::Uncertain, FindingState::Present,
                FindingState::Null};
    r.answerable = {1, 1, 1, 0};
    return r;
}

}  // namespace vivid::testing
