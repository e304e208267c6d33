#ifndef ARNS_TRAINER_HPP
#define ARNS_TRAINER_HPP

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "arns/datapipe.hpp"
#include "arns/network.hpp"
#include "arns/ops.hpp"

namespace arns {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t steps = 500;
    int batch_size = 1;
    std::int64_t checkpoint_every = 100;
    std::uint64_t seed = 0;

    void validate() const {
        // learning_rate 0 is admitted so a zero-rate run can be shown to be a
        // parameter no-op.
        if (learning_rate < 0) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
        if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
            throw std::invalid_argument("TrainConfig: beta1 and beta2 must lie in (0,1)");
        }
        if (epsilon <= 0) throw std::invalid_argument("TrainConfig: epsilon must be > 0");
        if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
        if (batch_size != 1) throw std::invalid_argument("TrainConfig: only batch_size 1 is supported");
        if (checkpoint_every < 0) throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 0");
    }
};

/// Pixel-mean binary cross-entropy between a saliency map in [0,1] and a
/// binary mask.
template <typename T>
Var<T> bce_loss(Var<T> pred, const Tensor<T>& mask) {
    return bce_mean(pred, mask);
}

/// One Adam update with bias correction; gradients are zeroed afterwards.
/// t is the 1-based step count.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const TrainConfig& cfg, std::int64_t t) {
    if (t < 1) throw std::invalid_argument("adam_step: step count must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (Parameter<T>* p : params) {
        if (!p->trainable) continue;
        if (!p->grad.all_finite()) {
            throw std::runtime_error("adam_step: non-finite gradient in parameter " + p->name);
        }
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const double g = static_cast<double>(p->grad[i]);
            const double m = cfg.beta1 * static_cast<double>(p->adam_m[i]) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * static_cast<double>(p->adam_v[i]) + (1.0 - cfg.beta2) * g * g;
            p->adam_m[i] = static_cast<T>(m);
            p->adam_v[i] = static_cast<T>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) -
                                         cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
        }
        p->zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: magic "ARNS", u32 version, u32 scalar size, length-prefixed text
// blob (configs, channel means, step counter), count-prefixed parameter
// records (name, shape, value/m/v bytes), trailing CRC32 of everything
// before it. All integers little-endian.
// ---------------------------------------------------------------------------

inline std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace ckpt_detail {

constexpr char kMagic[4] = {'A', 'R', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_bytes(std::vector<std::uint8_t>& buf, const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
}

struct Reader {
    const std::uint8_t* p;
    std::size_t n;
    std::size_t pos = 0;

    void need(std::size_t k) const {
        if (pos + k > n) throw std::runtime_error("truncated checkpoint");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    void bytes(void* dst, std::size_t k) {
        need(k);
        std::memcpy(dst, p + pos, k);
        pos += k;
    }
};

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string config_blob(const NetConfig& net, const TrainConfig& train, const std::array<double, 3>& means,
                               std::int64_t step) {
    std::string s;
    s += "net.input_size=" + std::to_string(net.input_size) + "\n";
    s += "net.width_mult=" + format_double(net.width_mult) + "\n";
    s += "net.rcl_channels=" + std::to_string(net.rcl_channels) + "\n";
    s += "net.rcl_time_steps=" + std::to_string(net.rcl_time_steps) + "\n";
    s += "net.decoder_channels=" + std::to_string(net.decoder_channels) + "\n";
    s += "net.attention_reduction=" + std::to_string(net.attention_reduction) + "\n";
    s += "net.attention_position_cap=" + std::to_string(net.attention_position_cap) + "\n";
    s += "net.seed=" + std::to_string(net.seed) + "\n";
    s += "train.learning_rate=" + format_double(train.learning_rate) + "\n";
    s += "train.beta1=" + format_double(train.beta1) + "\n";
    s += "train.beta2=" + format_double(train.beta2) + "\n";
    s += "train.epsilon=" + format_double(train.epsilon) + "\n";
    s += "train.steps=" + std::to_string(train.steps) + "\n";
    s += "train.batch_size=" + std::to_string(train.batch_size) + "\n";
    s += "train.checkpoint_every=" + std::to_string(train.checkpoint_every) + "\n";
    s += "train.seed=" + std::to_string(train.seed) + "\n";
    s += "means=" + format_double(means[0]) + " " + format_double(means[1]) + " " + format_double(means[2]) + "\n";
    s += "step=" + std::to_string(step) + "\n";
    return s;
}

inline void parse_blob(const std::string& blob, NetConfig& net, TrainConfig& train, std::array<double, 3>& means,
                       std::int64_t& step) {
    std::size_t start = 0;
    while (start < blob.size()) {
        std::size_t end = blob.find('\n', start);
        if (end == std::string::npos) end = blob.size();
        const std::string line = blob.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("malformed checkpoint config line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "net.input_size") net.input_size = std::stoi(val);
        else if (key == "net.width_mult") net.width_mult = std::stod(val);
        else if (key == "net.rcl_channels") net.rcl_channels = std::stoi(val);
        else if (key == "net.rcl_time_steps") net.rcl_time_steps = std::stoi(val);
        else if (key == "net.decoder_channels") net.decoder_channels = std::stoi(val);
        else if (key == "net.attention_reduction") net.attention_reduction = std::stoi(val);
        else if (key == "net.attention_position_cap") net.attention_position_cap = std::stoi(val);
        else if (key == "net.seed") net.seed = std::stoull(val);
        else if (key == "train.learning_rate") train.learning_rate = std::stod(val);
        else if (key == "train.beta1") train.beta1 = std::stod(val);
        else if (key == "train.beta2") train.beta2 = std::stod(val);
        else if (key == "train.epsilon") train.epsilon = std::stod(val);
        else if (key == "train.steps") train.steps = std::stoll(val);
        else if (key == "train.batch_size") train.batch_size = std::stoi(val);
        else if (key == "train.checkpoint_every") train.checkpoint_every = std::stoll(val);
        else if (key == "train.seed") train.seed = std::stoull(val);
        else if (key == "step") step = std::stoll(val);
        else if (key == "means") {
            std::istringstream ms(val);
            if (!(ms >> means[0] >> means[1] >> means[2])) {
                throw std::runtime_error("malformed means in checkpoint config");
            }
        } else {
            throw std::runtime_error("unknown checkpoint config key: " + key);
        }
    }
}

}  // namespace ckpt_detail

struct CheckpointMeta {
    NetConfig net;
    TrainConfig train;
    std::array<double, 3> channel_means{0.0, 0.0, 0.0};
    std::int64_t step = 0;
    int scalar_size = 0;
};

template <typename T>
void save_checkpoint(SaliencyModel<T>& model, const TrainConfig& train_cfg, const std::array<double, 3>& means,
                     std::int64_t step, const std::filesystem::path& path) {
    using namespace ckpt_detail;
    std::vector<std::uint8_t> buf;
    put_bytes(buf, kMagic, 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<std::uint32_t>(sizeof(T)));
    const std::string blob = config_blob(model.config(), train_cfg, means, step);
    put_u64(buf, blob.size());
    put_bytes(buf, blob.data(), blob.size());
    auto& params = model.parameters();
    put_u64(buf, params.size());
    for (Parameter<T>* p : params) {
        put_u32(buf, static_cast<std::uint32_t>(p->name.size()));
        put_bytes(buf, p->name.data(), p->name.size());
        put_u32(buf, static_cast<std::uint32_t>(p->value.rank()));
        for (int a = 0; a < p->value.rank(); ++a) put_u32(buf, static_cast<std::uint32_t>(p->value.extent(a)));
        const std::size_t nbytes = static_cast<std::size_t>(p->value.numel()) * sizeof(T);
        put_bytes(buf, p->value.data(), nbytes);
        put_bytes(buf, p->adam_m.data(), nbytes);
        put_bytes(buf, p->adam_v.data(), nbytes);
    }
    put_u32(buf, crc32_ieee(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

namespace ckpt_detail {

inline std::vector<std::uint8_t> read_and_verify(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16) throw std::runtime_error("truncated checkpoint " + path.string());
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(buf[buf.size() - 4 + i]) << (8 * i);
    const std::uint32_t computed = crc32_ieee(buf.data(), buf.size() - 4);
    if (stored != computed) {
        char msg[96];
        std::snprintf(msg, sizeof(msg), "checkpoint CRC mismatch (stored %08x, computed %08x)", stored, computed);
        throw std::runtime_error(std::string(msg) + " in " + path.string());
    }
    return buf;
}

inline CheckpointMeta read_meta(Reader& r) {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad checkpoint magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    CheckpointMeta meta;
    meta.scalar_size = static_cast<int>(r.u32());
    const std::uint64_t blob_len = r.u64();
    r.need(blob_len);
    std::string blob(reinterpret_cast<const char*>(r.p + r.pos), blob_len);
    r.pos += blob_len;
    parse_blob(blob, meta.net, meta.train, meta.channel_means, meta.step);
    meta.net.validate();
    return meta;
}

}  // namespace ckpt_detail

inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
    using namespace ckpt_detail;
    const std::vector<std::uint8_t> buf = read_and_verify(path);
    Reader r{buf.data(), buf.size() - 4};
    return read_meta(r);
}

/// Reconstructs the model and optimizer state. Validation happens before the
/// model is returned, so a corrupt file never yields a partially loaded model.
template <typename T>
std::unique_ptr<SaliencyModel<T>> load_checkpoint(const std::filesystem::path& path,
                                                  CheckpointMeta* meta_out = nullptr) {
    using namespace ckpt_detail;
    const std::vector<std::uint8_t> buf = read_and_verify(path);
    Reader r{buf.data(), buf.size() - 4};
    CheckpointMeta meta = read_meta(r);
    if (meta.scalar_size != static_cast<int>(sizeof(T))) {
        throw std::runtime_error("checkpoint stores " + std::to_string(meta.scalar_size * 8) +
                                 "-bit scalars but a " + std::to_string(sizeof(T) * 8) +
                                 "-bit model was requested");
    }

    auto model = std::make_unique<SaliencyModel<T>>(meta.net);
    auto& params = model->parameters();
    const std::uint64_t count = r.u64();
    if (count != params.size()) {
        throw std::runtime_error("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                                 std::to_string(params.size()));
    }
    std::vector<bool> seen(params.size(), false);
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::uint32_t name_len = r.u32();
        r.need(name_len);
        std::string name(reinterpret_cast<const char*>(r.p + r.pos), name_len);
        r.pos += name_len;
        Parameter<T>* p = model->find_parameter(name);
        if (p == nullptr) throw std::runtime_error("checkpoint names unknown parameter " + name);
        const std::uint32_t rank = r.u32();
        Shape shape;
        for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(static_cast<int>(r.u32()));
        if (shape != p->value.shape()) {
            throw std::runtime_error("checkpoint shape " + shape_str(shape) + " for " + name +
                                     " does not match model shape " + shape_str(p->value.shape()));
        }
        const std::size_t nbytes = static_cast<std::size_t>(p->value.numel()) * sizeof(T);
        r.bytes(p->value.data(), nbytes);
        r.bytes(p->adam_m.data(), nbytes);
        r.bytes(p->adam_v.data(), nbytes);
        std::size_t idx = 0;
        for (; idx < params.size(); ++idx) {
            if (params[idx] == p) break;
        }
        if (seen[idx]) throw std::runtime_error("checkpoint repeats parameter " + name);
        seen[idx] = true;
    }
    if (r.pos != r.n) throw std::runtime_error("checkpoint has trailing bytes after parameter records");
    if (meta_out != nullptr) *meta_out = meta;
    return model;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogEntry {
    std::int64_t step = 0;
    double loss = 0.0;
};

/// Runs cfg.steps optimization steps starting after `start_step`. Each step
/// draws one sample (with a 50% horizontal flip) from a per-step RNG derived
/// from (seed, step), so an interrupted run resumed from a checkpoint replays
/// the identical sequence. Writes a checkpoint every checkpoint_every steps
/// and at the end when a path is given.
template <typename T>
std::vector<TrainLogEntry> train(SaliencyModel<T>& model, const DatasetManifest& manifest, const TrainConfig& cfg,
                                 std::int64_t start_step = 0, const std::filesystem::path& checkpoint_path = {}) {
    cfg.validate();
    const int S = model.config().input_size;
    struct Item {
        Tensor<T> image, image_flipped;
        Tensor<T> mask, mask_flipped;
    };
    std::vector<Item> items;
    items.reserve(manifest.size());
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        Sample s = load_sample(manifest.image_path(i), manifest.mask_path(i), S);
        Item item;
        item.image = preprocess<T>(s, manifest.channel_means);
        item.mask = mask_tensor<T>(s);
        item.image_flipped = flip_horizontal(item.image);
        item.mask_flipped = flip_horizontal(item.mask);
        items.push_back(std::move(item));
    }

    std::vector<TrainLogEntry> log;
    log.reserve(static_cast<std::size_t>(cfg.steps));
    auto& params = model.parameters();
    for (std::int64_t i = 1; i <= cfg.steps; ++i) {
        const std::int64_t step = start_step + i;
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
        std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
        std::uniform_int_distribution<int> coin(0, 1);
        const Item& item = items[pick(rng)];
        const bool flip = coin(rng) == 1;

        Tape<T> tape;
        Var<T> pred = model.forward(tape, flip ? item.image_flipped : item.image);
        Var<T> loss = bce_loss(pred, flip ? item.mask_flipped : item.mask);
        const double loss_value = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(loss_value)) {
            throw std::runtime_error("non-finite loss at step " + std::to_string(step));
        }
        tape.backward(loss);
        adam_step(params, cfg, step);
        log.push_back(TrainLogEntry{step, loss_value});

        if (!checkpoint_path.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            save_checkpoint(model, cfg, manifest.channel_means, step, checkpoint_path);
        }
    }
    if (!checkpoint_path.empty()) {
        save_checkpoint(model, cfg, manifest.channel_means, start_step + cfg.steps, checkpoint_path);
    }
    return log;
}

}  // namespace arns

#endif  // ARNS_TRAINER_HPP
