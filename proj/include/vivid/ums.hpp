#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vivid/common.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// Schema: the ordered finding vocabulary plus optional per-finding prevalence.
// Canonical key order everywhere below is this order.
// ---------------------------------------------------------------------------

struct SchemaConfig {
    std::vector<std::string> findings;
    std::map<std::string, double> prevalence;  // empty map = no prevalence data

    void validate() const {
        if (findings.empty()) throw ValidationError("schema has no findings");
        for (const auto& f : findings) {
            if (f.empty()) throw ValidationError("schema contains an empty finding name");
        }
        for (std::size_t i = 0; i < findings.size(); ++i) {
            for (std::size_t j = i + 1; j < findings.size(); ++j) {
                if (findings[i] == findings[j]) {
                    throw ValidationError("duplicate finding name '" + findings[i] + "'");
                }
            }
        }
        if (!prevalence.empty()) {
            for (const auto& f : findings) {
                auto it = prevalence.find(f);
                if (it == prevalence.end()) {
                    throw ValidationError("prevalence missing for finding '" + f + "'");
                }
                if (!(it->second >= 0.0 && it->second <= 1.0)) {
                    throw ValidationError("prevalence for '" + f + "' outside [0,1]");
                }
            }
        }
    }

    int index_of(std::string_view name) const {
        for (std::size_t i = 0; i < findings.size(); ++i) {
            if (findings[i] == name) return static_cast<int>(i);
        }
        return -1;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["findings"] = findings;
        if (!prevalence.empty()) j["prevalence"] = prevalence;
        return j;
    }

    static SchemaConfig from_json(const nlohmann::json& j) {
        SchemaConfig s;
        if (!j.is_object() || !j.contains("findings") || !j["findings"].is_array()) {
            throw ConfigError("schema JSON must be an object with a \"findings\" array");
        }
        for (const auto& f : j["findings"]) {
            if (!f.is_string()) throw ConfigError("schema finding names must be strings");
            s.findings.push_back(f.get<std::string>());
        }
        if (j.contains("prevalence")) {
            if (!j["prevalence"].is_object()) throw ConfigError("schema \"prevalence\" must be an object");
            for (const auto& [k, v] : j["prevalence"].items()) {
                if (!v.is_number()) throw ConfigError("prevalence for '" + k + "' must be a number");
                s.prevalence[k] = v.get<double>();
            }
        }
        s.validate();
        return s;
    }

    static SchemaConfig from_json_file(const std::string& path) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("schema file " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

// ---------------------------------------------------------------------------
// Finding states. null means not assessable and is paired with
// answerability=false; every other state requires answerability=true.
// ---------------------------------------------------------------------------

enum class FindingState { Present, Absent, Uncertain, Null };

inline const char* state_name(FindingState s) {
    switch (s) {
        case FindingState::Present: return "present";
        case FindingState::Absent: return "absent";
        case FindingState::Uncertain: return "uncertain";
        case FindingState::Null: return "null";
    }
    throw DomainError("invalid FindingState value");
}

struct UmsRecord {
    std::string image_id;
    std::vector<std::string> findings;  // schema order
    std::vector<FindingState> states;
    std::vector<std::uint8_t> answerable;

    void validate() const {
        if (findings.size() != states.size() || findings.size() != answerable.size()) {
            throw ValidationError("record field lists disagree in length");
        }
        if (findings.empty()) throw ValidationError("record has no findings");
        for (std::size_t i = 0; i < findings.size(); ++i) {
            const bool is_null = states[i] == FindingState::Null;
            if (is_null && answerable[i]) {
                throw ValidationError("finding '" + findings[i] +
                                      "' has state null but answerability true");
            }
            if (!is_null && !answerable[i]) {
                throw ValidationError("finding '" + findings[i] + "' has state " +
                                      state_name(states[i]) + " but answerability false");
            }
        }
    }

    int index_of(std::string_view name) const {
        for (std::size_t i = 0; i < findings.size(); ++i) {
            if (findings[i] == name) return static_cast<int>(i);
        }
        return -1;
    }

    bool operator==(const UmsRecord&) const = default;
};

// Raw label convention (CheXpert-style): 1.0 = present, 0.0 = absent,
// -1.0 = uncertain, missing = not assessable.
inline UmsRecord build_record(const std::vector<std::optional<double>>& raw,
                              const SchemaConfig& schema) {
    schema.validate();
    if (raw.size() != schema.findings.size()) {
        throw ValidationError("expected " + std::to_string(schema.findings.size()) +
                              " label values, got " + std::to_string(raw.size()));
    }
    UmsRecord r;
    r.findings = schema.findings;
    r.states.reserve(raw.size());
    r.answerable.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (!raw[i].has_value()) {
            r.states.push_back(FindingState::Null);
            r.answerable.push_back(0);
            continue;
        }
        const double v = *raw[i];
        FindingState s;
        if (v == 1.0) s = FindingState::Present;
        else if (v == 0.0) s = FindingState::Absent;
        else if (v == -1.0) s = FindingState::Uncertain;
        else {
            throw ValidationError("label value " + std::to_string(v) + " for finding '" +
                                  schema.findings[i] + "' is not one of 1, 0, -1, or blank");
        }
        r.states.push_back(s);
        r.answerable.push_back(1);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Canonical serialization. Two top-level blocks, "findings" then
// "answerability", keys in record (schema) order, no insignificant
// whitespace. Byte-identical output for identical input.
// ---------------------------------------------------------------------------

inline void json_escape_into(std::string& out, std::string_view s) {
    static const char* hex = "0123456789abcdef";
    for (unsigned char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\b': out += "\\b"; break;
            case '\f': out += "\\f"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (c < 0x20) {
                    out += "\\u00";
                    out += hex[c >> 4];
                    out += hex[c & 0xF];
                } else {
                    out += static_cast<char>(c);
                }
        }
    }
}

inline std::string json_quote(std::string_view s) {
    std::string out = "\"";
    json_escape_into(out, s);
    return out + "\"";
}

// Byte range [begin, end) of one finding's key+value inside the serialized
// findings block.
struct FieldSpan {
    std::string name;
    std::size_t begin = 0;
    std::size_t end = 0;
};

namespace detail {

// Resolves the queried subset to record indices in canonical order.
inline std::vector<std::size_t> subset_indices(const UmsRecord& r,
                                               const std::vector<std::string>* subset) {
    std::vector<std::size_t> idx;
    if (subset == nullptr) {
        idx.resize(r.findings.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return idx;
    }
    if (subset->empty()) throw ValidationError("empty field query");
    std::vector<std::uint8_t> wanted(r.findings.size(), 0);
    for (const auto& name : *subset) {
        const int i = r.index_of(name);
        if (i < 0) throw ValidationError("queried finding '" + name + "' not in record");
        wanted[static_cast<std::size_t>(i)] = 1;
    }
    for (std::size_t i = 0; i < wanted.size(); ++i) {
        if (wanted[i]) idx.push_back(i);
    }
    return idx;
}

}  // namespace detail

inline std::string serialize_canonical_with_spans(const UmsRecord& r,
                                                  const std::vector<std::string>* subset,
                                                  std::vector<FieldSpan>& spans_out) {
    r.validate();
    const auto idx = detail::subset_indices(r, subset);
    spans_out.clear();
    std::string out = "{\"findings\":{";
    for (std::size_t n = 0; n < idx.size(); ++n) {
        if (n) out += ',';
        const std::size_t i = idx[n];
        FieldSpan span;
        span.name = r.findings[i];
        span.begin = out.size();
        out += json_quote(r.findings[i]);
        out += ":{\"state\":";
        if (r.states[i] == FindingState::Null) out += "null";
        else out += json_quote(state_name(r.states[i]));
        out += '}';
        span.end = out.size();
        spans_out.push_back(std::move(span));
    }
    out += "},\"answerability\":{";
    for (std::size_t n = 0; n < idx.size(); ++n) {
        if (n) out += ',';
        const std::size_t i = idx[n];
        out += json_quote(r.findings[i]);
        out += r.answerable[i] ? ":true" : ":false";
    }
    out += "}}";
    return out;
}

inline std::string serialize_canonical(const UmsRecord& r,
                                       const std::vector<std::string>* subset = nullptr) {
    std::vector<FieldSpan> spans;
    return serialize_canonical_with_spans(r, subset, spans);
}

// Free-text-style flat target for the supervision-format ablation:
// "<finding> <state>" pairs joined by ", ", null rendered as "unknown".
inline std::string serialize_flat(const UmsRecord& r,
                                  const std::vector<std::string>* subset = nullptr) {
    r.validate();
    const auto idx = detail::subset_indices(r, subset);
    std::string out;
    for (std::size_t n = 0; n < idx.size(); ++n) {
        if (n) out += ", ";
        const std::size_t i = idx[n];
        out += r.findings[i];
        out += ' ';
        out += r.states[i] == FindingState::Null ? "unknown" : state_name(r.states[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Strict parser for the canonical grammar plus arbitrary JSON whitespace.
// Syntax problems raise ParseError with a byte offset; schema and
// consistency problems raise ValidationError.
// ---------------------------------------------------------------------------

namespace detail {

class UmsParser {
  public:
    UmsParser(std::string_view text, const SchemaConfig& schema) : s_(text), schema_(schema) {}

    UmsRecord parse() {
        UmsRecord r;
        skip_ws();
        expect('{');
        skip_ws();
        expect_key("findings");
        skip_ws();
        expect(':');
        skip_ws();
        parse_findings_block(r);
        skip_ws();
        expect(',');
        skip_ws();
        expect_key("answerability");
        skip_ws();
        expect(':');
        skip_ws();
        parse_answerability_block(r);
        skip_ws();
        expect('}');
        skip_ws();
        if (pos_ != s_.size()) throw ParseError("trailing content after record", pos_);
        r.validate();
        return r;
    }

  private:
    std::string_view s_;
    const SchemaConfig& schema_;
    std::size_t pos_ = 0;

    [[noreturn]] void fail(const std::string& msg) const { throw ParseError(msg, pos_); }

    char peek() const {
        if (pos_ >= s_.size()) throw ParseError("unexpected end of input", pos_);
        return s_[pos_];
    }

    void skip_ws() {
        while (pos_ < s_.size()) {
            const char c = s_[pos_];
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r') ++pos_;
            else break;
        }
    }

    void expect(char c) {
        if (pos_ >= s_.size() || s_[pos_] != c) {
            fail(std::string("expected '") + c + "'");
        }
        ++pos_;
    }

    void expect_key(std::string_view key) {
        const std::size_t at = pos_;
        const std::string got = parse_string();
        if (got != key) {
            throw ParseError("expected key \"" + std::string(key) + "\", got \"" + got + "\"", at);
        }
    }

    bool try_literal(std::string_view lit) {
        if (s_.substr(pos_, lit.size()) == lit) {
            pos_ += lit.size();
            return true;
        }
        return false;
    }

    void append_utf8(std::string& out, std::uint32_t cp) {
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

    std::uint32_t parse_hex4() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            const char c = peek();
            v <<= 4;
            if (c >= '0' && c <= '9') v |= static_cast<std::uint32_t>(c - '0');
            else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint32_t>(c - 'a' + 10);
            else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint32_t>(c - 'A' + 10);
            else fail("invalid \\u escape digit");
            ++pos_;
        }
        return v;
    }

    std::string parse_string() {
        expect('"');
        std::string out;
        while (true) {
            if (pos_ >= s_.size()) fail("unterminated string");
            const unsigned char c = static_cast<unsigned char>(s_[pos_]);
            if (c == '"') {
                ++pos_;
                return out;
            }
            if (c < 0x20) fail("unescaped control character in string");
            if (c == '\\') {
                ++pos_;
                const char e = peek();
                ++pos_;
                switch (e) {
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    case '/': out += '/'; break;
                    case 'b': out += '\b'; break;
                    case 'f': out += '\f'; break;
                    case 'n': out += '\n'; break;
                    case 'r': out += '\r'; break;
                    case 't': out += '\t'; break;
                    case 'u': {
                        std::uint32_t cp = parse_hex4();
                        if (cp >= 0xD800 && cp <= 0xDBFF) {
                            if (!try_literal("\\u")) fail("lone high surrogate");
                            const std::uint32_t lo = parse_hex4();
                            if (lo < 0xDC00 || lo > 0xDFFF) fail("invalid low surrogate");
                            cp = 0x10000 + ((cp - 0xD800) << 10) + (lo - 0xDC00);
                        } else if (cp >= 0xDC00 && cp <= 0xDFFF) {
                            fail("lone low surrogate");
                        }
                        append_utf8(out, cp);
                        break;
                    }
                    default: --pos_; fail("invalid escape sequence");
                }
            } else {
                out += static_cast<char>(c);
                ++pos_;
            }
        }
    }

    // Shared key-sequence walk for both blocks; enforces known names in
    // strictly increasing schema order (the canonical order, no duplicates).
    template <typename PerEntry>
    std::vector<int> parse_block(PerEntry&& per_entry) {
        expect('{');
        std::vector<int> indices;
        int last = -1;
        while (true) {
            skip_ws();
            if (peek() == '}' && indices.empty()) {
                fail("block must contain at least one finding");
            }
            const std::size_t name_at = pos_;
            const std::string name = parse_string();
            const int idx = schema_.index_of(name);
            if (idx < 0) throw ValidationError("unknown finding '" + name + "'");
            if (idx <= last) {
                throw ValidationError("finding '" + name + "' out of canonical order (offset " +
                                      std::to_string(name_at) + ")");
            }
            last = idx;
            indices.push_back(idx);
            skip_ws();
            expect(':');
            skip_ws();
            per_entry(name);
            skip_ws();
            if (peek() == ',') {
                ++pos_;
                continue;
            }
            expect('}');
            return indices;
        }
    }

    void parse_findings_block(UmsRecord& r) {
        parse_block([&](const std::string& name) {
            expect('{');
            skip_ws();
            expect_key("state");
            skip_ws();
            expect(':');
            skip_ws();
            FindingState st;
            if (peek() == 'n') {
                if (!try_literal("null")) fail("expected a state string or null");
                st = FindingState::Null;
            } else {
                const std::size_t at = pos_;
                const std::string v = parse_string();
                if (v == "present") st = FindingState::Present;
                else if (v == "absent") st = FindingState::Absent;
                else if (v == "uncertain") st = FindingState::Uncertain;
                else {
                    throw ValidationError("invalid state \"" + v + "\" for finding '" + name +
                                          "' (offset " + std::to_string(at) + ")");
                }
            }
            skip_ws();
            expect('}');
            r.findings.push_back(name);
            r.states.push_back(st);
        });
    }

    void parse_answerability_block(UmsRecord& r) {
        std::vector<std::string> names;
        std::vector<std::uint8_t> values;
        parse_block([&](const std::string& name) {
            bool v;
            if (try_literal("true")) v = true;
            else if (try_literal("false")) v = false;
            else fail("expected true or false");
            names.push_back(name);
            values.push_back(v ? 1 : 0);
        });
        if (names != r.findings) {
            throw ValidationError("answerability keys differ from findings keys");
        }
        r.answerable = std::move(values);
    }
};

}  // namespace detail

inline UmsRecord parse_validate(std::string_view text, const SchemaConfig& schema) {
    schema.validate();
    detail::UmsParser p(text, schema);
    return p.parse();
}

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0..255 are raw bytes, then BOS, EOS, PAD, SEP.
// ---------------------------------------------------------------------------

constexpr int kTokenBos = 256;
constexpr int kTokenEos = 257;
constexpr int kTokenPad = 258;
constexpr int kTokenSep = 259;
constexpr int kVocabSize = 260;

inline std::vector<int> byte_tokens(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

inline std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size() + 2);
    ids.push_back(kTokenBos);
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    ids.push_back(kTokenEos);
    return ids;
}

// Inverse of tokenize on the byte alphabet: specials are dropped, so
// detokenize(tokenize(s)) == s for every byte string s.
inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= kVocabSize) {
            throw IndexError("token id " + std::to_string(id) + " outside vocabulary [0, " +
                             std::to_string(kVocabSize) + ")");
        }
        if (id < 256) out += static_cast<char>(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Answerability weights. Token-space spans of each queried finding's
// key+value inside the findings block; weight 0 exactly there when the
// finding is unanswerable, weight 1 everywhere else (scaffolding, answerable
// spans, the whole answerability block, BOS/EOS).
// ---------------------------------------------------------------------------

struct TokenSpan {
    std::string name;
    std::size_t begin = 0;  // token indices, [begin, end)
    std::size_t end = 0;
};

struct SupervisionSequence {
    std::vector<int> token_ids;
    std::vector<double> weights;
    std::vector<TokenSpan> spans;  // findings-block span per queried finding
    std::vector<std::string> queried_fields;
};

inline SupervisionSequence answerability_weights(const UmsRecord& r,
                                                 const std::vector<std::string>& fields,
                                                 const std::vector<int>& token_ids) {
    std::vector<FieldSpan> byte_spans;
    const std::string canonical = serialize_canonical_with_spans(r, &fields, byte_spans);
    const std::vector<int> expected = tokenize(canonical);
    if (token_ids != expected) {
        throw ValidationError(
            "token sequence does not match the canonical serialization (span alignment)");
    }
    SupervisionSequence seq;
    seq.token_ids = token_ids;
    seq.weights.assign(token_ids.size(), 1.0);
    seq.queried_fields = fields;
    for (const auto& bs : byte_spans) {
        TokenSpan ts;
        ts.name = bs.name;
        ts.begin = bs.begin + 1;  // BOS occupies token 0, bytes shift by one
        ts.end = bs.end + 1;
        const int idx = r.index_of(bs.name);
        if (idx >= 0 && !r.answerable[static_cast<std::size_t>(idx)]) {
            for (std::size_t t = ts.begin; t < ts.end; ++t) seq.weights[t] = 0.0;
        }
        seq.spans.push_back(std::move(ts));
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Field Query Training sampler. Draws k uniform in [k_min, k_max] fields
// without replacement; each draw takes the low-prevalence pool (strictly
// below the median) with probability low_freq_prob, falling back to the
// other pool when one side empties.
// ---------------------------------------------------------------------------

inline std::vector<std::string> sample_fields(const SchemaConfig& schema, Rng& rng, int k_min = 4,
                                              int k_max = 6, double low_freq_prob = 0.6) {
    schema.validate();
    if (k_min < 1 || k_min > k_max) {
        throw DomainError("invalid field-count range [" + std::to_string(k_min) + ", " +
                          std::to_string(k_max) + "]");
    }
    if (!(low_freq_prob >= 0.0 && low_freq_prob <= 1.0)) {
        throw DomainError("low_freq_prob outside [0,1]");
    }
    const int n = static_cast<int>(schema.findings.size());
    if (n < k_max) {
        throw DomainError("insufficient fields: schema has " + std::to_string(n) +
                          " findings, need at least " + std::to_string(k_max));
    }
    const int k = k_min + rng.uniform_int(k_max - k_min + 1);

    std::vector<std::string> low, high;
    if (schema.prevalence.empty()) {
        high = schema.findings;  // one pool, draws are uniform
    } else {
        std::vector<double> vals;
        vals.reserve(schema.findings.size());
        for (const auto& f : schema.findings) vals.push_back(schema.prevalence.at(f));
        std::vector<double> sorted = vals;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t m = sorted.size();
        const double median =
            m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
        for (std::size_t i = 0; i < schema.findings.size(); ++i) {
            (vals[i] < median ? low : high).push_back(schema.findings[i]);
        }
    }

    auto draw_from = [&rng](std::vector<std::string>& pool) {
        const auto i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())));
        std::string name = std::move(pool[i]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
        return name;
    };

    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const bool want_low = rng.bernoulli(low_freq_prob);
        std::vector<std::string>& primary = want_low ? low : high;
        std::vector<std::string>& fallback = want_low ? high : low;
        out.push_back(draw_from(primary.empty() ? fallback : primary));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Label CSV: header row `image_id,<finding...>`, cells in the four-symbol
// convention (1, 0, -1, blank). Minimal quoting support for names/cells.
// ---------------------------------------------------------------------------

struct LabelTable {
    std::vector<std::string> finding_names;
    std::vector<std::string> image_ids;
    std::vector<std::vector<std::optional<double>>> rows;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            if (!cur.empty()) {
                throw FormatError("line " + std::to_string(line_no) + ": stray quote mid-cell");
            }
            quoted = true;
        } else if (c == ',') {
            cells.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw FormatError("line " + std::to_string(line_no) + ": unterminated quote");
    cells.push_back(std::move(cur));
    return cells;
}

inline std::optional<double> parse_label_cell(const std::string& cell, std::size_t line_no,
                                              const std::string& finding) {
    std::string trimmed = cell;
    while (!trimmed.empty() && (trimmed.back() == ' ' || trimmed.back() == '\t')) trimmed.pop_back();
    std::size_t i = 0;
    while (i < trimmed.size() && (trimmed[i] == ' ' || trimmed[i] == '\t')) ++i;
    trimmed.erase(0, i);
    if (trimmed.empty()) return std::nullopt;
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(trimmed, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != trimmed.size()) {
        throw FormatError("line " + std::to_string(line_no) + ": value '" + cell +
                          "' for finding '" + finding + "' is not numeric");
    }
    return v;
}

}  // namespace detail

inline LabelTable parse_label_csv(const std::string& text) {
    LabelTable table;
    std::size_t pos = 0, line_no = 0;
    bool have_header = false;
    while (pos <= text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = end + 1;
        ++line_no;
        if (line.empty()) {
            if (pos > text.size()) break;
            continue;
        }
        auto cells = detail::split_csv_line(line, line_no);
        if (!have_header) {
            if (cells.size() < 2 || cells[0] != "image_id") {
                throw FormatError("header must start with image_id and list at least one finding");
            }
            table.finding_names.assign(cells.begin() + 1, cells.end());
            have_header = true;
            continue;
        }
        if (cells.size() != table.finding_names.size() + 1) {
            throw FormatError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(table.finding_names.size() + 1) + " cells, got " +
                              std::to_string(cells.size()));
        }
        table.image_ids.push_back(cells[0]);
        std::vector<std::optional<double>> row;
        row.reserve(table.finding_names.size());
        for (std::size_t i = 1; i < cells.size(); ++i) {
            row.push_back(detail::parse_label_cell(cells[i], line_no, table.finding_names[i - 1]));
        }
        table.rows.push_back(std::move(row));
    }
    if (!have_header) throw FormatError("empty CSV: missing header row");
    return table;
}

inline LabelTable read_label_csv(const std::string& path) {
    return parse_label_csv(read_file(path));
}

// Fraction of rows labeled present, per finding (all rows in the denominator).
inline std::map<std::string, double> compute_prevalence(const LabelTable& table) {
    std::map<std::string, double> prev;
    if (table.rows.empty()) return prev;
    for (std::size_t f = 0; f < table.finding_names.size(); ++f) {
        std::size_t present = 0;
        for (const auto& row : table.rows) {
            if (row[f].has_value() && *row[f] == 1.0) ++present;
        }
        prev[table.finding_names[f]] =
            static_cast<double>(present) / static_cast<double>(table.rows.size());
    }
    return prev;
}

// ---------------------------------------------------------------------------
// UMS JSONL: one record per line, `{"image_id": "<id>", "ums": <record>}`.
// ---------------------------------------------------------------------------

inline std::string ums_jsonl_line(const UmsRecord& r) {
    std::string line = "{\"image_id\": ";
    line += json_quote(r.image_id);
    line += ", \"ums\": ";
    line += serialize_canonical(r);
    line += '}';
    return line;
}

inline std::string ums_jsonl_text(const std::vector<UmsRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += ums_jsonl_line(r);
        out += '\n';
    }
    return out;
}

namespace detail {

// Scans one JSONL wrapper line. The ums value is located by brace balancing
// (string-aware) and handed to the strict parser.
inline UmsRecord parse_jsonl_line(const std::string& line, const SchemaConfig& schema,
                                  std::size_t line_no) {
    std::size_t pos = 0;
    auto skip_ws = [&]() {
        while (pos < line.size() &&
               (line[pos] == ' ' || line[pos] == '\t' || line[pos] == '\r')) {
            ++pos;
        }
    };
    auto expect = [&](char c) {
        if (pos >= line.size() || line[pos] != c) {
            throw ParseError("line " + std::to_string(line_no) + ": expected '" + c + "'", pos);
        }
        ++pos;
    };
    auto expect_lit = [&](std::string_view lit) {
        if (line.compare(pos, lit.size(), lit) != 0) {
            throw ParseError("line " + std::to_string(line_no) + ": expected " + std::string(lit),
                             pos);
        }
        pos += lit.size();
    };
    auto scan_string = [&]() -> std::string {
        expect('"');
        std::string raw;
        while (true) {
            if (pos >= line.size()) {
                throw ParseError("line " + std::to_string(line_no) + ": unterminated string", pos);
            }
            const char c = line[pos];
            if (c == '"') {
                ++pos;
                break;
            }
            if (c == '\\') {
                if (pos + 1 >= line.size()) {
                    throw ParseError("line " + std::to_string(line_no) + ": bad escape", pos);
                }
                raw += c;
                raw += line[pos + 1];
                pos += 2;
            } else {
                raw += c;
                ++pos;
            }
        }
        std::string out;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            if (raw[i] != '\\') {
                out += raw[i];
                continue;
            }
            ++i;
            switch (raw[i]) {
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                case '/': out += '/'; break;
                case 'b': out += '\b'; break;
                case 'f': out += '\f'; break;
                case 'n': out += '\n'; break;
                case 'r': out += '\r'; break;
                case 't': out += '\t'; break;
                default:
                    throw ParseError("line " + std::to_string(line_no) + ": unsupported escape",
                                     pos);
            }
        }
        return out;
    };

    skip_ws();
    expect('{');
    skip_ws();
    expect_lit("\"image_id\"");
    skip_ws();
    expect(':');
    skip_ws();
    const std::string image_id = scan_string();
    skip_ws();
    expect(',');
    skip_ws();
    expect_lit("\"ums\"");
    skip_ws();
    expect(':');
    skip_ws();
    const std::size_t rec_begin = pos;
    if (pos >= line.size() || line[pos] != '{') {
        throw ParseError("line " + std::to_string(line_no) + ": expected record object", pos);
    }
    int depth = 0;
    bool in_string = false;
    for (; pos < line.size(); ++pos) {
        const char c = line[pos];
        if (in_string) {
            if (c == '\\') ++pos;
            else if (c == '"') in_string = false;
        } else if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            --depth;
            if (depth == 0) {
                ++pos;
                break;
            }
        }
    }
    if (depth != 0) {
        throw ParseError("line " + std::to_string(line_no) + ": unbalanced record object", pos);
    }
    const std::string record_text = line.substr(rec_begin, pos - rec_begin);
    skip_ws();
    expect('}');
    skip_ws();
    if (pos != line.size()) {
        throw ParseError("line " + std::to_string(line_no) + ": trailing content", pos);
    }
    UmsRecord r = parse_validate(record_text, schema);
    r.image_id = image_id;
    return r;
}

}  // namespace detail

inline std::vector<UmsRecord> parse_ums_jsonl(const std::string& text, const SchemaConfig& schema) {
    std::vector<UmsRecord> records;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty() || line == "\r") continue;
        records.push_back(detail::parse_jsonl_line(line, schema, line_no));
    }
    return records;
}

inline std::vector<UmsRecord> read_ums_jsonl(const std::string& path, const SchemaConfig& schema) {
    return parse_ums_jsonl(read_file(path), schema);
}

}  // namespace vivid
