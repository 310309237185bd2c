#include "caflow/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace caflow {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string fmt_float(float v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", double(v));
    return buf;
}

[[noreturn]] void bad(int line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

int parse_int(const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (const std::exception&) {
        bad(line, "expected integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (const std::exception&) {
        bad(line, "expected unsigned integer, got '" + v + "'");
    }
}

float parse_float(const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const float r = std::stof(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (const std::exception&) {
        bad(line, "expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& v, int line) {
    if (v == "0" || v == "false") return false;
    if (v == "1" || v == "true") return true;
    bad(line, "expected boolean 0/1, got '" + v + "'");
}

const char* mode_name(DependencyMode m) { return m == DependencyMode::Caflow ? "caflow" : "dualglow"; }
const char* sharing_name(WeightSharing s) { return s == WeightSharing::Off ? "off" : "shared"; }
const char* dequant_name(DequantMode d) {
    return d == DequantMode::Uniform ? "uniform" : "variational";
}

}  // namespace

bool RunConfig::operator==(const RunConfig& o) const {
    const auto& m = model;
    const auto& n = o.model;
    const auto& t = train;
    const auto& u = o.train;
    return m.n_scales == n.n_scales && m.channels == n.channels && m.image_size == n.image_size &&
           m.k_steps_r == n.k_steps_r && m.k_steps_t == n.k_steps_t &&
           m.m_cond_steps == n.m_cond_steps && m.hidden_uncond == n.hidden_uncond &&
           m.hidden_cond == n.hidden_cond && m.deq_steps == n.deq_steps && m.mode == n.mode &&
           m.sharing == n.sharing && m.dequant == n.dequant && t.lambda == u.lambda &&
           t.target_lr == u.target_lr && t.warmup_iters == u.warmup_iters &&
           t.step_gamma == u.step_gamma && t.ema_rate == u.ema_rate &&
           t.grad_clip_norm == u.grad_clip_norm && t.batch_size == u.batch_size &&
           t.max_iters == u.max_iters && t.seed == u.seed && t.tau_eval == u.tau_eval &&
           t.best_of_m == u.best_of_m && t.val_interval == u.val_interval &&
           t.checkpoint_interval == u.checkpoint_interval &&
           t.plateau_lr_drop == u.plateau_lr_drop && task == o.task && io == o.io;
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream o;
    o << "[model]\n"
      << "n_scales=" << c.model.n_scales << "\n"
      << "channels=" << c.model.channels << "\n"
      << "image_size=" << c.model.image_size << "\n"
      << "k_steps_r=" << c.model.k_steps_r << "\n"
      << "k_steps_t=" << c.model.k_steps_t << "\n"
      << "m_cond_steps=" << c.model.m_cond_steps << "\n"
      << "hidden_uncond=" << c.model.hidden_uncond << "\n"
      << "hidden_cond=" << c.model.hidden_cond << "\n"
      << "deq_steps=" << c.model.deq_steps << "\n"
      << "mode=" << mode_name(c.model.mode) << "\n"
      << "sharing=" << sharing_name(c.model.sharing) << "\n"
      << "dequant=" << dequant_name(c.model.dequant) << "\n"
      << "[train]\n"
      << "lambda=" << fmt_float(c.train.lambda) << "\n"
      << "target_lr=" << fmt_float(c.train.target_lr) << "\n"
      << "warmup_iters=" << c.train.warmup_iters << "\n"
      << "step_gamma=" << fmt_float(c.train.step_gamma) << "\n"
      << "ema_rate=" << fmt_float(c.train.ema_rate) << "\n"
      << "grad_clip_norm=" << fmt_float(c.train.grad_clip_norm) << "\n"
      << "batch_size=" << c.train.batch_size << "\n"
      << "max_iters=" << c.train.max_iters << "\n"
      << "seed=" << c.train.seed << "\n"
      << "tau_eval=" << fmt_float(c.train.tau_eval) << "\n"
      << "best_of_m=" << c.train.best_of_m << "\n"
      << "val_interval=" << c.train.val_interval << "\n"
      << "checkpoint_interval=" << c.train.checkpoint_interval << "\n"
      << "plateau_lr_drop=" << (c.train.plateau_lr_drop ? 1 : 0) << "\n"
      << "[task]\n"
      << "task=" << task_name(c.task.task) << "\n"
      << "n_train=" << c.task.n_train << "\n"
      << "n_val=" << c.task.n_val << "\n"
      << "n_test=" << c.task.n_test << "\n"
      << "synth_seed=" << c.task.synth_seed << "\n"
      << "[io]\n"
      << "out_dir=" << c.io.out_dir << "\n"
      << "dataset_dir=" << c.io.dataset_dir << "\n";
    return o.str();
}

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string l = trim(raw);
        if (l.empty() || l[0] == '#') continue;
        if (l.front() == '[') {
            if (l.back() != ']') bad(line, "unterminated section header");
            section = l.substr(1, l.size() - 2);
            if (section != "model" && section != "train" && section != "task" && section != "io")
                bad(line, "unknown section '" + section + "'");
            continue;
        }
        const auto eq = l.find('=');
        if (eq == std::string::npos) bad(line, "expected key=value");
        const std::string key = trim(l.substr(0, eq));
        const std::string val = trim(l.substr(eq + 1));
        if (section.empty()) bad(line, "key '" + key + "' before any section header");

        if (section == "model") {
            auto& m = c.model;
            if (key == "n_scales") m.n_scales = parse_int(val, line);
            else if (key == "channels") m.channels = parse_int(val, line);
            else if (key == "image_size") m.image_size = parse_int(val, line);
            else if (key == "k_steps_r") m.k_steps_r = parse_int(val, line);
            else if (key == "k_steps_t") m.k_steps_t = parse_int(val, line);
            else if (key == "m_cond_steps") m.m_cond_steps = parse_int(val, line);
            else if (key == "hidden_uncond") m.hidden_uncond = parse_int(val, line);
            else if (key == "hidden_cond") m.hidden_cond = parse_int(val, line);
            else if (key == "deq_steps") m.deq_steps = parse_int(val, line);
            else if (key == "mode") {
                if (val == "caflow") m.mode = DependencyMode::Caflow;
                else if (val == "dualglow") m.mode = DependencyMode::DualGlow;
                else bad(line, "mode must be caflow or dualglow");
            } else if (key == "sharing") {
                if (val == "off") m.sharing = WeightSharing::Off;
                else if (val == "shared") m.sharing = WeightSharing::AppendixD;
                else bad(line, "sharing must be off or shared");
            } else if (key == "dequant") {
                if (val == "uniform") m.dequant = DequantMode::Uniform;
                else if (val == "variational") m.dequant = DequantMode::Variational;
                else bad(line, "dequant must be uniform or variational");
            } else {
                bad(line, "unknown key '" + key + "' in [model]");
            }
        } else if (section == "train") {
            auto& t = c.train;
            if (key == "lambda") t.lambda = parse_float(val, line);
            else if (key == "target_lr") t.target_lr = parse_float(val, line);
            else if (key == "warmup_iters") t.warmup_iters = parse_int(val, line);
            else if (key == "step_gamma") t.step_gamma = parse_float(val, line);
            else if (key == "ema_rate") t.ema_rate = parse_float(val, line);
            else if (key == "grad_clip_norm") t.grad_clip_norm = parse_float(val, line);
            else if (key == "batch_size") t.batch_size = parse_int(val, line);
            else if (key == "max_iters") t.max_iters = parse_int(val, line);
            else if (key == "seed") t.seed = parse_u64(val, line);
            else if (key == "tau_eval") t.tau_eval = parse_float(val, line);
            else if (key == "best_of_m") t.best_of_m = parse_int(val, line);
            else if (key == "val_interval") t.val_interval = parse_int(val, line);
            else if (key == "checkpoint_interval") t.checkpoint_interval = parse_int(val, line);
            else if (key == "plateau_lr_drop") t.plateau_lr_drop = parse_bool(val, line);
            else bad(line, "unknown key '" + key + "' in [train]");
        } else if (section == "task") {
            auto& t = c.task;
            if (key == "task") {
                try {
                    t.task = task_from_name(val);
                } catch (const DataError& e) {
                    bad(line, e.what());
                }
            } else if (key == "n_train") t.n_train = parse_int(val, line);
            else if (key == "n_val") t.n_val = parse_int(val, line);
            else if (key == "n_test") t.n_test = parse_int(val, line);
            else if (key == "synth_seed") t.synth_seed = parse_u64(val, line);
            else bad(line, "unknown key '" + key + "' in [task]");
        } else {  // io
            if (key == "out_dir") c.io.out_dir = val;
            else if (key == "dataset_dir") c.io.dataset_dir = val;
            else bad(line, "unknown key '" + key + "' in [io]");
        }
    }
    return c;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

}  // namespace caflow
