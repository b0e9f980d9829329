#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vivid {

// ---------------------------------------------------------------------------
// Error types. Everything derives from Error so callers can catch broadly;
// the CLI maps ConfigError to exit code 2 and the rest to exit code 1.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf where finite values are required.
struct DomainError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

// Malformed input text; carries the byte offset of the first bad byte.
struct ParseError : Error {
    std::size_t offset;
    ParseError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte " + std::to_string(byte_offset) + ")"), offset(byte_offset) {}
};

// Structurally valid input that violates a contract (schema, state set,
// consistency, label convention, span alignment, ...).
struct ValidationError : Error {
    using Error::Error;
};

// Bad run configuration; the message names the offending field.
struct ConfigError : Error {
    using Error::Error;
};

// Checkpoint container problems: magic, version, truncation.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. Wraps mt19937_64 and derives all distributions from raw
// engine output directly, so the byte stream (and therefore every run) is
// reproducible and the full state serializes into checkpoints.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling, no modulo bias.
    int uniform_int(int n) {
        if (n <= 0) throw DomainError("uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller without the cached second value: state is just the engine.
    double gaussian(double stddev = 1.0) {
        const double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
        return stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (is.fail()) throw FormatError("rng state string is malformed");
    }

  private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Grayscale image, row-major, values nominally in [0, 1].
// ---------------------------------------------------------------------------

struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

inline Image make_image(int height, int width, double fill = 0.0) {
    return Image{height, width, std::vector<double>(static_cast<std::size_t>(height) * width, fill)};
}

// ---------------------------------------------------------------------------
// Worker-thread helpers. VIVID_THREADS caps parallelism; results must be
// written to per-item slots so the caller can reduce in index order.
// ---------------------------------------------------------------------------

inline int worker_threads() {
    if (const char* env = std::getenv("VIVID_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

template <typename Fn>
void parallel_for(int n_items, int n_workers, Fn&& fn) {
    if (n_workers <= 1 || n_items <= 1) {
        for (int i = 0; i < n_items; ++i) fn(0, i);
        return;
    }
    const int workers = std::min(n_workers, n_items);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (int i = w; i < n_items; i += workers) fn(w, i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// File helpers. Artifacts are written to a temp path and renamed so a failed
// run never leaves a partial file behind.
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void atomic_write_file(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
    }
}

}  // namespace vivid
