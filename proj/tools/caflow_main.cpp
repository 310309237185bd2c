#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "caflow/config.hpp"
#include "caflow/train.hpp"

namespace fs = std::filesystem;
using namespace caflow;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int thread_cap() {
    const char* e = std::getenv("CAFLOW_THREADS");
    if (!e) return 1;
    const int n = std::atoi(e);
    return n > 0 ? n : 1;
}

PairedDataset obtain_dataset(const RunConfig& cfg) {
    if (!cfg.io.dataset_dir.empty() &&
        fs::exists(fs::path(cfg.io.dataset_dir) / "manifest.txt"))
        return PairedDataset::load(cfg.io.dataset_dir);
    PairedDataset ds =
        PairedDataset::synthetic(cfg.task.task, cfg.model.image_size, cfg.task.n_train,
                                 cfg.task.n_val, cfg.task.n_test, cfg.task.synth_seed);
    if (!cfg.io.dataset_dir.empty()) ds.save(cfg.io.dataset_dir);
    return ds;
}

struct LoadedModel {
    RunConfig cfg;
    std::unique_ptr<CaflowModel> model;
    Checkpoint ck;
};

// Loads a checkpoint and rebuilds the model with EMA weights active.
LoadedModel load_model(const std::string& ckpt_path) {
    LoadedModel lm;
    lm.ck = load_checkpoint(ckpt_path);
    if (lm.ck.config_text.empty())
        throw DataError("checkpoint " + ckpt_path + " has no embedded config");
    lm.cfg = parse_config(lm.ck.config_text);
    lm.model = std::make_unique<CaflowModel>(lm.cfg.model, lm.cfg.train.seed);
    Adam opt;
    EmaShadow ema;
    restore(lm.ck, *lm.model, opt, ema);
    if (!ema.empty()) ema.swap_into(lm.model->params());
    return lm;
}

// Images enter the model as center-dequantized values in [0,1).
Tensor to_model_range(const Tensor& x_int) {
    Tensor half(x_int.shape(), 0.5f);
    Rng dummy(0);
    return uniform_dequantize(x_int, dummy, &half).first;
}

Tensor sample_to_255(const Tensor& s) { return add(mul(s, 256.0f), -0.5f); }

std::vector<Tensor> draw_samples(CaflowModel& model, const Tensor& y_deq, int num,
                                 float temperature, std::uint64_t seed) {
    std::vector<Tensor> samples{std::size_t(num)};
    const int threads = std::min(thread_cap(), num);
    auto worker = [&](int first) {
        for (int k = first; k < num; k += threads) {
            Rng rng = Rng(seed).derive(std::uint64_t(k) + 1);
            samples[std::size_t(k)] = model.conditional_sample(y_deq, rng, temperature);
        }
    };
    if (threads <= 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& t : pool) t.join();
    }
    return samples;
}

Image hstack(const std::vector<Image>& imgs) {
    int w = 0;
    const int h = imgs.at(0).height;
    for (const auto& im : imgs) w += im.width;
    Image out(w, h);
    int off = 0;
    for (const auto& im : imgs) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < im.width; ++x)
                for (int c = 0; c < 3; ++c) out.at(off + x, y, c) = im.at(x, y, c);
        off += im.width;
    }
    return out;
}

double conditional_nats(CaflowModel& model, const Tensor& w_deq, const Tensor& y_deq) {
    NoGradGuard ng;
    double acc = 0.0;
    const Tensor lp = model.conditional_log_prob(w_deq, y_deq);
    for (float v : lp.data()) acc += v;
    return acc;
}

int cmd_train(const std::string& config_path) {
    const RunConfig cfg = load_config_file(config_path);
    validate_model_config(cfg.model);
    validate_train_config(cfg.train);
    const PairedDataset ds = obtain_dataset(cfg);
    if (ds.image_size != cfg.model.image_size)
        throw DataError("dataset image size does not match model image_size");

    fs::create_directories(cfg.io.out_dir);
    std::ofstream metrics(fs::path(cfg.io.out_dir) / "metrics.txt", std::ios::app);
    if (!metrics) throw DataError("cannot open metrics log in " + cfg.io.out_dir);

    CaflowModel model(cfg.model, cfg.train.seed);
    Adam opt;
    EmaShadow ema;
    std::int64_t start_iter = 0;
    std::uint64_t rng_state = 0;
    const auto latest = fs::path(cfg.io.out_dir) / "latest.caflow";
    if (fs::exists(latest)) {
        Checkpoint ck = load_checkpoint(latest.string());
        restore(ck, model, opt, ema);
        start_iter = ck.iteration;
        rng_state = ck.rng_state;
        std::cout << "resuming from iteration " << start_iter << "\n";
    }

    TrainHooks hooks;
    hooks.metrics = &metrics;
    hooks.checkpoint_dir = cfg.io.out_dir;
    hooks.config_text = serialize_config(cfg);
    const TrainResult res =
        train_loop(model, ds, cfg.train, opt, ema, start_iter, rng_state, hooks);
    std::cout << "trained to iteration " << std::max(res.iterations, start_iter)
              << "; val bpd " << res.initial_val_bpd << " -> " << res.final_val_bpd
              << " (skipped steps: " << res.skipped_steps << ")\n";
    return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& y_path, float temperature, int num,
               int keep, std::uint64_t seed, const std::string& out_dir) {
    if (keep > num) throw DataError("--keep must be <= --num");
    LoadedModel lm = load_model(ckpt);
    const Image y_img = read_ppm(y_path);
    if (y_img.width != lm.cfg.model.image_size || y_img.height != lm.cfg.model.image_size)
        throw DataError("condition image is " + std::to_string(y_img.width) + "x" +
                        std::to_string(y_img.height) + ", model expects " +
                        std::to_string(lm.cfg.model.image_size) + " square");
    const Tensor y_deq = to_model_range(image_to_tensor(y_img));

    const auto samples = draw_samples(*lm.model, y_deq, num, temperature, seed);
    const auto order = lm.model->rank_samples(y_deq, samples);

    fs::create_directories(out_dir);
    std::ofstream sidecar(fs::path(out_dir) / "likelihoods.txt");
    std::vector<Image> grid_row{y_img};
    for (int r = 0; r < keep; ++r) {
        const Tensor& s = samples[std::size_t(order[std::size_t(r)])];
        const Image img = tensor_to_image(sample_to_255(s));
        char name[32];
        std::snprintf(name, sizeof name, "sample_%02d.ppm", r);
        write_ppm((fs::path(out_dir) / name).string(), img);
        sidecar << conditional_nats(*lm.model, s, y_deq) << "\n";
        grid_row.push_back(img);
    }
    write_ppm((fs::path(out_dir) / "grid.ppm").string(), hstack(grid_row));
    std::cout << "wrote " << keep << " of " << num << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_likelihood(const std::string& ckpt, const std::string& y_path,
                   const std::string& w_path) {
    LoadedModel lm = load_model(ckpt);
    const Image y_img = read_ppm(y_path), w_img = read_ppm(w_path);
    if (y_img.width != w_img.width || y_img.height != w_img.height)
        throw DataError("condition and target image shapes differ");
    if (w_img.width != lm.cfg.model.image_size || w_img.height != lm.cfg.model.image_size)
        throw DataError("image size does not match the checkpointed model");
    const Tensor y_deq = to_model_range(image_to_tensor(y_img));
    const Tensor w_deq = to_model_range(image_to_tensor(w_img));
    const double nats = conditional_nats(*lm.model, w_deq, y_deq);
    const auto dims = std::int64_t(3) * w_img.width * w_img.height;
    std::cout << "log p(w|y) [nats]: " << nats << "\n"
              << "bpd: " << bits_per_dim(nats, dims) << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dir, const std::string& metric,
             float temperature, int best_of, std::uint64_t seed) {
    if (metric != "psnr" && metric != "rmse")
        throw ConfigError("--metric must be psnr or rmse");
    LoadedModel lm = load_model(ckpt);
    const PairedDataset ds = PairedDataset::load(dir);
    if (ds.test.empty()) throw DataError("test split in " + dir + " is empty");
    if (ds.image_size != lm.cfg.model.image_size)
        throw DataError("dataset image size does not match the checkpointed model");

    std::ostringstream csv, table;
    csv << "index,psnr,rmse\n";
    table << "index  psnr(dB)  rmse\n";
    double sum_psnr = 0.0, sum_rmse = 0.0;
    int finite_psnr = 0;
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        auto [y_img, w_img] = make_pair(ds.task, ds.test[i]);
        const Tensor y_deq = to_model_range(image_to_tensor(y_img));
        const auto samples =
            draw_samples(*lm.model, y_deq, best_of, temperature, seed + i * 10007);
        const auto order = lm.model->rank_samples(y_deq, samples);
        const Image best = tensor_to_image(sample_to_255(samples[std::size_t(order[0])]));
        const double p = psnr(best, w_img), r = rmse(best, w_img);
        csv << i << "," << p << "," << r << "\n";
        table << i << "  " << p << "  " << r << "\n";
        sum_rmse += r;
        if (std::isfinite(p)) {
            sum_psnr += p;
            ++finite_psnr;
        }
    }
    const double mean_psnr = finite_psnr ? sum_psnr / finite_psnr : 0.0;
    const double mean_rmse = sum_rmse / double(ds.test.size());
    table << "mean  " << mean_psnr << "  " << mean_rmse << "\n";

    std::ofstream(fs::path(dir) / "eval_metrics.csv") << csv.str();
    std::ofstream(fs::path(dir) / "eval_table.txt") << table.str();
    std::cout << table.str();
    std::cout << "aggregate " << metric << ": " << (metric == "psnr" ? mean_psnr : mean_rmse)
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional flow model for paired image-to-image translation"};
    app.require_subcommand(1);

    std::string config_path, ckpt, y_path, w_path, dir;
    std::string out_dir = "samples", metric = "psnr";
    float temperature = 0.5f, eval_temperature = 0.5f;
    int num = 1, keep = 1, best_of = 10;
    std::uint64_t seed = 0, eval_seed = 0;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("config", config_path, "run configuration file")->required();

    auto* sample = app.add_subcommand("sample", "draw conditional samples for one condition image");
    sample->add_option("ckpt", ckpt, "checkpoint file")->required();
    sample->add_option("y", y_path, "condition image (PPM)")->required();
    sample->add_option("--temperature", temperature, "prior temperature");
    sample->add_option("--num", num, "samples to draw");
    sample->add_option("--keep", keep, "best samples to keep");
    sample->add_option("--seed", seed, "sampling seed");
    sample->add_option("--out", out_dir, "output directory");

    auto* lik = app.add_subcommand("likelihood", "conditional log-likelihood of a pair");
    lik->add_option("ckpt", ckpt, "checkpoint file")->required();
    lik->add_option("y", y_path, "condition image (PPM)")->required();
    lik->add_option("w", w_path, "target image (PPM)")->required();

    auto* eval = app.add_subcommand("eval", "metrics over a dataset's test split");
    eval->add_option("ckpt", ckpt, "checkpoint file")->required();
    eval->add_option("dir", dir, "dataset directory")->required();
    eval->add_option("--metric", metric, "psnr or rmse");
    eval->add_option("--temperature", eval_temperature, "prior temperature");
    eval->add_option("--best-of", best_of, "samples per image, best kept");
    eval->add_option("--seed", eval_seed, "sampling seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(config_path);
        if (sample->parsed()) return cmd_sample(ckpt, y_path, temperature, num, keep, seed, out_dir);
        if (lik->parsed()) return cmd_likelihood(ckpt, y_path, w_path);
        return cmd_eval(ckpt, dir, metric, eval_temperature, best_of, eval_seed);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const TensorError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
}
