#pragma once

#include <stdexcept>
#include <string>

#include "caflow/data.hpp"
#include "caflow/conditional.hpp"
#include "caflow/train.hpp"

namespace caflow {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Line-oriented key=value run configuration with [model], [train], [task] and
// [io] sections. Unknown sections or keys are rejected with a line number.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    struct TaskSection {
        Task task = Task::Colorize;
        int n_train = 200;
        int n_val = 30;
        int n_test = 30;
        std::uint64_t synth_seed = 1;
        bool operator==(const TaskSection&) const = default;
    } task;
    struct IoSection {
        std::string out_dir = "out";
        std::string dataset_dir;  // empty: generate the synthetic set in memory
        bool operator==(const IoSection&) const = default;
    } io;

    bool operator==(const RunConfig& o) const;
};

RunConfig parse_config(const std::string& text);
std::string serialize_config(const RunConfig& cfg);
RunConfig load_config_file(const std::string& path);

}  // namespace caflow
