// Command-line entry point: dataset synthesis, training, inference,
// evaluation, and verification suites.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "arns/datapipe.hpp"
#include "arns/metrics.hpp"
#include "arns/network.hpp"
#include "arns/trainer.hpp"
#include "arns/verify.hpp"

namespace fs = std::filesystem;
using namespace arns;

namespace {

// Flag/config errors that should exit with the usage code.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

void print_net_config(const NetConfig& c) {
    std::cout << "net.input_size=" << c.input_size << "\n"
              << "net.width_mult=" << fmt_double(c.width_mult) << "\n"
              << "net.rcl_channels=" << c.rcl_channels << "\n"
              << "net.rcl_time_steps=" << c.rcl_time_steps << "\n"
              << "net.decoder_channels=" << c.decoder_channels << "\n"
              << "net.attention_reduction=" << c.attention_reduction << "\n"
              << "net.attention_position_cap=" << c.attention_position_cap << "\n"
              << "net.seed=" << c.seed << "\n";
}

void print_train_config(const TrainConfig& c) {
    std::cout << "train.learning_rate=" << fmt_double(c.learning_rate) << "\n"
              << "train.beta1=" << fmt_double(c.beta1) << "\n"
              << "train.beta2=" << fmt_double(c.beta2) << "\n"
              << "train.epsilon=" << fmt_double(c.epsilon) << "\n"
              << "train.steps=" << c.steps << "\n"
              << "train.batch_size=" << c.batch_size << "\n"
              << "train.checkpoint_every=" << c.checkpoint_every << "\n"
              << "train.seed=" << c.seed << "\n";
}

// Flat key=value file; keys match the config field names; precedence is
// defaults < config file < command-line flags.
void apply_config_file(const fs::path& path, NetConfig& net, TrainConfig& train) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config file " + path.string() + ":" + std::to_string(lineno) +
                             ": expected key=value");
        }
        auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = strip(line.substr(0, eq));
        const std::string val = strip(line.substr(eq + 1));
        try {
            if (key == "input_size") net.input_size = std::stoi(val);
            else if (key == "width_mult") net.width_mult = std::stod(val);
            else if (key == "rcl_channels") net.rcl_channels = std::stoi(val);
            else if (key == "rcl_time_steps") net.rcl_time_steps = std::stoi(val);
            else if (key == "decoder_channels") net.decoder_channels = std::stoi(val);
            else if (key == "attention_reduction") net.attention_reduction = std::stoi(val);
            else if (key == "attention_position_cap") net.attention_position_cap = std::stoi(val);
            else if (key == "seed") {
                net.seed = std::stoull(val);
                train.seed = std::stoull(val);
            } else if (key == "learning_rate") train.learning_rate = std::stod(val);
            else if (key == "beta1") train.beta1 = std::stod(val);
            else if (key == "beta2") train.beta2 = std::stod(val);
            else if (key == "epsilon") train.epsilon = std::stod(val);
            else if (key == "steps") train.steps = std::stoll(val);
            else if (key == "batch_size") train.batch_size = std::stoi(val);
            else if (key == "checkpoint_every") train.checkpoint_every = std::stoll(val);
            else throw UsageError("config file " + path.string() + ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw UsageError("config file " + path.string() + ": bad value for '" + key + "'");
        }
    }
}

RasterImage saliency_to_gray(const Tensor<float>& pred) {
    const int H = pred.extent(1), W = pred.extent(2);
    RasterImage img(W, H, 1);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            long v = std::lround(static_cast<double>(pred(0, y, x)) * 255.0);
            if (v < 0) v = 0;
            if (v > 255) v = 255;
            img.at(y, x, 0) = static_cast<std::uint8_t>(v);
        }
    }
    return img;
}

void write_loss_log(const std::vector<TrainLogEntry>& log, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open loss log " + path.string() + " for writing");
    char buf[64];
    for (const TrainLogEntry& e : log) {
        std::snprintf(buf, sizeof(buf), "%lld\t%.17g\n", static_cast<long long>(e.step), e.loss);
        out << buf;
    }
}

int run_synth(int count, int size, std::uint64_t seed, const fs::path& out_dir) {
    std::cout << "synth.count=" << count << "\nsynth.size=" << size << "\nsynth.seed=" << seed
              << "\nsynth.out=" << out_dir.string() << "\n";
    DatasetManifest m = synth_generate(count, size, seed, out_dir);
    std::cout << "wrote " << m.size() << " samples and " << (out_dir / "manifest.txt").string() << "\n";
    return 0;
}

struct TrainFlags {
    std::string data, config, ckpt, resume, log;
    std::int64_t steps = -1;
    std::int64_t checkpoint_every = -1;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int run_train(const TrainFlags& flags) {
    NetConfig net;
    TrainConfig train_cfg;
    std::int64_t start_step = 0;
    std::unique_ptr<SaliencyModel<float>> model;

    if (!flags.resume.empty()) {
        CheckpointMeta meta;
        model = load_checkpoint<float>(flags.resume, &meta);
        net = meta.net;
        train_cfg = meta.train;
        start_step = meta.step;
    }
    if (!flags.config.empty()) apply_config_file(flags.config, net, train_cfg);
    if (flags.steps >= 0) train_cfg.steps = flags.steps;
    if (flags.checkpoint_every >= 0) train_cfg.checkpoint_every = flags.checkpoint_every;
    if (flags.seed_set) {
        net.seed = flags.seed;
        train_cfg.seed = flags.seed;
    }
    net.validate();
    train_cfg.validate();

    print_net_config(net);
    print_train_config(train_cfg);
    std::cout << "data=" << flags.data << "\ncheckpoint=" << flags.ckpt << "\nstart_step=" << start_step << "\n";

    DatasetManifest manifest = load_manifest(flags.data);
    if (model == nullptr) {
        model = std::make_unique<SaliencyModel<float>>(net);
        model->init_parameters(net.seed);
    }
    std::vector<TrainLogEntry> log = train(*model, manifest, train_cfg, start_step, fs::path(flags.ckpt));
    const fs::path log_path = flags.log.empty() ? fs::path(flags.ckpt + ".log") : fs::path(flags.log);
    write_loss_log(log, log_path);
    if (!log.empty()) {
        std::cout << "final step " << log.back().step << " loss " << log.back().loss << "\n";
    }
    std::cout << "checkpoint written to " << flags.ckpt << "\n";
    return 0;
}

template <typename T>
int run_infer_typed(const fs::path& ckpt, const fs::path& image_path, const fs::path& out_path) {
    CheckpointMeta meta;
    auto model = load_checkpoint<T>(ckpt, &meta);
    print_net_config(meta.net);
    std::cout << "checkpoint=" << ckpt.string() << "\nimage=" << image_path.string()
              << "\nout=" << out_path.string() << "\n";

    Tensor<double> raw = load_image(image_path, meta.net.input_size);
    Tensor<T> input(raw.shape());
    const int S = meta.net.input_size;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                input(c, y, x) = static_cast<T>(raw(c, y, x) - meta.channel_means[static_cast<std::size_t>(c)]);
            }
        }
    }
    Tape<T> tape;
    Var<T> pred = model->forward(tape, input);
    Tensor<float> predf(pred.value().shape());
    for (std::int64_t i = 0; i < predf.numel(); ++i) predf[i] = static_cast<float>(pred.value()[i]);
    write_pnm(out_path, saliency_to_gray(predf));
    std::cout << "saliency map written to " << out_path.string() << "\n";
    return 0;
}

int run_infer(const fs::path& ckpt, const fs::path& image_path, const fs::path& out_path) {
    const CheckpointMeta meta = read_checkpoint_meta(ckpt);
    if (meta.scalar_size == 4) return run_infer_typed<float>(ckpt, image_path, out_path);
    if (meta.scalar_size == 8) return run_infer_typed<double>(ckpt, image_path, out_path);
    throw std::runtime_error("checkpoint has unsupported scalar size " + std::to_string(meta.scalar_size));
}

int run_eval(const fs::path& pred_dir, const fs::path& mask_dir, const fs::path& csv, int threads) {
    std::cout << "pred_dir=" << pred_dir.string() << "\nmask_dir=" << mask_dir.string()
              << "\ncsv=" << csv.string() << "\nthreads=" << threads << "\n";
    std::vector<fs::path> preds;
    for (const auto& entry : fs::directory_iterator(pred_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".pgm") preds.push_back(entry.path());
    }
    std::sort(preds.begin(), preds.end());
    if (preds.empty()) throw std::runtime_error("no .pgm predictions found in " + pred_dir.string());

    std::vector<std::pair<Tensor<double>, Tensor<double>>> pairs;
    for (const fs::path& p : preds) {
        const std::string stem = p.stem().string();
        fs::path mask_path = mask_dir / (stem + "_mask.pgm");
        if (!fs::exists(mask_path)) mask_path = mask_dir / (stem + ".pgm");
        if (!fs::exists(mask_path)) {
            throw std::runtime_error("no mask found for prediction " + p.string() + " in " + mask_dir.string());
        }
        RasterImage pi = read_pnm(p);
        if (pi.channels != 1) throw std::runtime_error("prediction " + p.string() + " is not grayscale");
        RasterImage mi = read_pnm(mask_path);
        if (mi.channels != 1) throw std::runtime_error("mask " + mask_path.string() + " is not grayscale");
        if (pi.width != mi.width || pi.height != mi.height) {
            throw std::runtime_error("size mismatch between " + p.string() + " and " + mask_path.string());
        }
        Tensor<double> pred(Shape{1, pi.height, pi.width});
        Tensor<double> mask(Shape{1, mi.height, mi.width});
        for (int y = 0; y < pi.height; ++y) {
            for (int x = 0; x < pi.width; ++x) {
                pred(0, y, x) = pi.at(y, x, 0) / 255.0;
                mask(0, y, x) = mi.at(y, x, 0) >= 128 ? 1.0 : 0.0;
            }
        }
        pairs.emplace_back(std::move(pred), std::move(mask));
    }

    EvalReport report = evaluate_set(pairs, threads);
    write_report_csv(report, csv);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "samples=%d max_f=%.6f (thr=%d) mean_f=%.6f mae=%.6f\n", report.n_samples,
                  report.max_f, report.max_f_threshold, report.mean_f, report.mae);
    std::cout << buf;
    return 0;
}

int run_gradcheck(std::uint64_t seed, double tamper) {
    std::cout << "gradcheck.seed=" << seed << "\n";
    if (tamper != 0.0) std::cout << "gradcheck.tamper=" << fmt_double(tamper) << "\n";
    const std::vector<CheckResult> results = gradient_suite(seed, tamper);
    bool ok = true;
    for (const CheckResult& r : results) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-18s max_rel_err=%.3e  %s\n", r.name.c_str(), r.max_rel_err,
                      r.pass ? "PASS" : "FAIL");
        std::cout << buf;
        ok = ok && r.pass;
    }
    return ok ? 0 : 1;
}

int run_selftest() {
    std::cout << "selftest\n";
    bool all_ok = true;
    auto report = [&](const std::string& name, bool ok) {
        std::cout << (ok ? "PASS " : "FAIL ") << name << "\n";
        all_ok = all_ok && ok;
    };

    {
        // Attention is the identity while its gain is 0.
        std::mt19937_64 rng(5);
        SelfAttention<double> att = SelfAttention<double>::make("att", 8, 8);
        fill_uniform(att.key_kernel.value, rng, -0.5, 0.5);
        fill_uniform(att.query_kernel.value, rng, -0.5, 0.5);
        fill_uniform(att.value_kernel.value, rng, -0.5, 0.5);
        bool ok = true;
        for (int i = 0; i < 10; ++i) {
            Tensor<double> x = random_uniform<double>(Shape{8, 3, 3}, rng);
            Tape<double> tape;
            Var<double> y = att.forward(tape.input(x));
            for (std::int64_t k = 0; k < x.numel(); ++k) ok = ok && (y.value()[k] == x[k]);
        }
        report("attention identity at gain 0", ok);
    }
    {
        // Attention map columns are stochastic.
        std::mt19937_64 rng(6);
        SelfAttention<double> att = SelfAttention<double>::make("att", 4, 8);
        fill_uniform(att.key_kernel.value, rng, -0.5, 0.5);
        fill_uniform(att.query_kernel.value, rng, -0.5, 0.5);
        bool ok = true;
        for (int i = 0; i < 10; ++i) {
            Tensor<double> x = random_uniform<double>(Shape{4, 2, 3}, rng);
            Tensor<double> w = att.attention_map(x);
            for (int j = 0; j < w.extent(1); ++j) {
                double sum = 0;
                for (int r = 0; r < w.extent(0); ++r) {
                    ok = ok && w(r, j) >= 0.0 && w(r, j) <= 1.0;
                    sum += w(r, j);
                }
                ok = ok && std::abs(sum - 1.0) < 1e-9;
            }
        }
        report("attention map column-stochastic", ok);
    }
    {
        // A zero recurrent kernel collapses every time step to the first.
        std::mt19937_64 rng(7);
        RclUnit<double> a = RclUnit<double>::make("a", 2, 2, 0);
        fill_uniform(a.feed_kernel.value, rng, -0.5, 0.5);
        fill_uniform(a.bias.value, rng, -0.5, 0.5);
        RclUnit<double> b = RclUnit<double>::make("b", 2, 2, 3);
        b.feed_kernel.value = a.feed_kernel.value;
        b.bias.value = a.bias.value;
        b.recur_kernel.value.fill(0.0);
        Tensor<double> u = random_uniform<double>(Shape{2, 4, 4}, rng);
        Tape<double> t1, t2;
        Var<double> y0 = a.forward(t1.input(u));
        Var<double> y3 = b.forward(t2.input(u));
        bool ok = true;
        for (std::int64_t i = 0; i < y0.value().numel(); ++i) ok = ok && (y0.value()[i] == y3.value()[i]);
        report("rcl collapses with zero recurrence", ok);
    }
    {
        bool ok = true;
        for (double p : {0.0, 0.25, 0.5, 1.0}) ok = ok && (f_measure(p, p) == p);
        ok = ok && f_measure(1.0, 0.0) == 0.0;
        report("f-measure fixed points", ok);
    }

    const std::vector<CheckResult> results = gradient_suite(7);
    for (const CheckResult& r : results) report("gradcheck " + r.name, r.pass);
    return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attentional recurrent saliency network"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic shape dataset");
    int synth_count = 16, synth_size = 64;
    std::uint64_t synth_seed = 0;
    std::string synth_out;
    synth->add_option("--count", synth_count, "number of samples")->check(CLI::PositiveNumber);
    synth->add_option("--size", synth_size, "image size in pixels")->check(CLI::Range(16, 4096));
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--out", synth_out, "output directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model");
    TrainFlags tf;
    train_cmd->add_option("--data", tf.data, "dataset manifest")->required();
    train_cmd->add_option("--config", tf.config, "key=value config file");
    train_cmd->add_option("--steps", tf.steps, "optimization steps to run");
    train_cmd->add_option("--ckpt", tf.ckpt, "checkpoint path")->required();
    train_cmd->add_option("--checkpoint-every", tf.checkpoint_every, "checkpoint interval in steps");
    auto* seed_opt = train_cmd->add_option("--seed", tf.seed, "initialization and sampling seed");
    train_cmd->add_option("--resume", tf.resume, "checkpoint to resume from");
    train_cmd->add_option("--log", tf.log, "loss log path (default: <ckpt>.log)");

    // infer
    auto* infer = app.add_subcommand("infer", "run inference on one image");
    std::string infer_ckpt, infer_image, infer_out;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint path")->required();
    infer->add_option("--image", infer_image, "input image (PPM)")->required();
    infer->add_option("--out", infer_out, "output saliency map (PGM)")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate saved predictions against masks");
    std::string eval_pred, eval_mask, eval_csv;
    int eval_threads = 1;
    eval_cmd->add_option("--pred-dir", eval_pred, "directory of predicted maps (PGM)")->required();
    eval_cmd->add_option("--mask-dir", eval_mask, "directory of ground-truth masks (PGM)")->required();
    eval_cmd->add_option("--csv", eval_csv, "metrics CSV output path")->required();
    eval_cmd->add_option("--threads", eval_threads, "worker threads")->check(CLI::PositiveNumber);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::uint64_t gc_seed = 7;
    double gc_tamper = 0.0;
    gc->add_option("--seed", gc_seed, "verification seed");
    gc->add_option("--tamper", gc_tamper, "corrupt the first analytic gradient (harness self-check)")
        ->group("");  // hidden

    // selftest
    auto* st = app.add_subcommand("selftest", "run invariant and gradient suites");

    int rc = 0;
    synth->callback([&]() { rc = run_synth(synth_count, synth_size, synth_seed, synth_out); });
    train_cmd->callback([&]() {
        tf.seed_set = seed_opt->count() > 0;
        rc = run_train(tf);
    });
    infer->callback([&]() { rc = run_infer(infer_ckpt, infer_image, infer_out); });
    eval_cmd->callback([&]() { rc = run_eval(eval_pred, eval_mask, eval_csv, eval_threads); });
    gc->callback([&]() { rc = run_gradcheck(gc_seed, gc_tamper); });
    st->callback([&]() { rc = run_selftest(); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
