#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace playerfl {

// Root of every error raised by the library. The CLI maps ConfigError to exit
// code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidSpecError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class InvalidLabelError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class UndefinedSimilarityError : public Error {
public:
    using Error::Error;
};

class IncompleteResultsError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConfigError : public Error {
public:
    ConfigError(std::string key, std::size_t line, const std::string& what)
        : Error(format(key, line, what)), key_(std::move(key)), line_(line) {}

    const std::string& key() const noexcept { return key_; }
    // 1-based; 0 when the problem is not tied to a particular line.
    std::size_t line() const noexcept { return line_; }

private:
    static std::string format(const std::string& key, std::size_t line, const std::string& what) {
        std::string out = "config";
        if (line > 0) out += " line " + std::to_string(line);
        if (!key.empty()) out += " key '" + key + "'";
        return out + ": " + what;
    }

    std::string key_;
    std::size_t line_;
};

// A failure inside a training run, tagged with where it happened. Round 0
// means setup, before any training.
class RunFailure : public Error {
public:
    RunFailure(std::string algorithm, std::string dataset, std::uint64_t seed, std::size_t round, std::string cause)
        : Error(format(algorithm, dataset, seed, round, cause)),
          algorithm_(std::move(algorithm)),
          dataset_(std::move(dataset)),
          seed_(seed),
          round_(round),
          cause_(std::move(cause)) {}

    const std::string& algorithm() const noexcept { return algorithm_; }
    const std::string& dataset() const noexcept { return dataset_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t round() const noexcept { return round_; }
    const std::string& cause() const noexcept { return cause_; }

private:
    static std::string format(const std::string& algorithm, const std::string& dataset, std::uint64_t seed,
                              std::size_t round, const std::string& cause) {
        std::string out = "algorithm '" + algorithm + "'";
        if (!dataset.empty()) out += ", dataset '" + dataset + "'";
        return out + ", seed " + std::to_string(seed) + ", round " + std::to_string(round) + ": " + cause;
    }

    std::string algorithm_;
    std::string dataset_;
    std::uint64_t seed_;
    std::size_t round_;
    std::string cause_;
};

}  // namespace playerfl
