#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "alterdetect/detectnet.hpp"

namespace alterdetect {
namespace {

constexpr char kMagic[8] = {'A', 'D', 'E', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kMaxNameLength = 256;

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor<float>& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u32(static_cast<std::uint32_t>(d));
        for (float v : t.data()) f32(v);
    }
    std::vector<std::uint8_t>& buffer() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    void need(std::size_t n, const char* what) {
        if (in_.size() - pos_ < n) {
            throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                  std::to_string(pos_));
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        if (n > kMaxNameLength) throw CheckpointError(std::string("checkpoint corrupt: oversized ") + what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    Tensor<float> tensor(const std::string& name) {
        const std::uint32_t rank = u32("tensor rank");
        if (rank == 0 || rank > 8) throw CheckpointError("checkpoint corrupt: bad rank for " + name);
        Shape shape(rank);
        std::size_t volume = 1;
        for (auto& d : shape) {
            d = u32("tensor dimension");
            if (d == 0) throw CheckpointError("checkpoint corrupt: zero dimension in " + name);
            volume *= d;
        }
        need(volume * 4, name.c_str());
        std::vector<float> data(volume);
        for (float& v : data) v = f32("tensor data");
        return Tensor<float>(std::move(shape), std::move(data));
    }
    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const DetectorModel& model) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);

    const ArchConfig& a = model.net.arch();
    w.u32(static_cast<std::uint32_t>(a.patch_size));
    for (std::size_t c : a.conv_channels) w.u32(static_cast<std::uint32_t>(c));
    w.u32(static_cast<std::uint32_t>(a.residual_block_depth));
    w.u32(static_cast<std::uint32_t>(a.fc_width));
    w.u32(static_cast<std::uint32_t>(a.num_classes));
    w.u32(a.enable_residual ? 1 : 0);
    w.u32(a.shortcut_pooling == ShortcutPooling::kBeforeBlock ? 1 : 0);

    const TrainConfig& t = model.train_config;
    w.f64(t.learning_rate);
    w.f64(t.lambda_l1);
    w.u32(t.l1_all_params ? 1 : 0);
    w.f64(t.loss.gamma);
    w.u32(static_cast<std::uint32_t>(t.loss.alpha.size()));
    for (double v : t.loss.alpha) w.f64(v);
    w.u32(t.loss.label_convention == nn::LabelConvention::kConventional ? 1 : 0);
    w.u64(t.batch_size);
    w.u64(t.epochs);
    w.u64(t.seed);
    w.u64(model.epoch_counter);

    w.u32(static_cast<std::uint32_t>(model.net.params().size()));
    for (const auto& [name, tensor] : model.net.params()) {
        w.str(name);
        w.tensor(tensor);
    }
    w.u32(static_cast<std::uint32_t>(model.net.running_stats().size()));
    for (const auto& [name, stats] : model.net.running_stats()) {
        w.str(name);
        w.tensor(stats.mean);
        w.tensor(stats.var);
    }
    const std::uint64_t checksum = fnv1a(w.buffer());
    w.u64(checksum);
    return std::move(w.buffer());
}

DetectorModel deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError("not a detector checkpoint (bad magic)");
    }
    Reader r(bytes.subspan(sizeof kMagic));
    const std::uint32_t version = r.u32("format version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }

    ArchConfig a;
    a.patch_size = r.u32("patch size");
    for (auto& c : a.conv_channels) c = r.u32("conv channels");
    a.residual_block_depth = r.u32("residual depth");
    a.fc_width = r.u32("fc width");
    a.num_classes = r.u32("class count");
    a.enable_residual = r.u32("residual flag") != 0;
    a.shortcut_pooling = r.u32("shortcut pooling") != 0 ? ShortcutPooling::kBeforeBlock : ShortcutPooling::kAfterBlock;

    DetectorModel model;
    TrainConfig& t = model.train_config;
    t.learning_rate = r.f64("learning rate");
    t.lambda_l1 = r.f64("lambda");
    t.l1_all_params = r.u32("l1 scope") != 0;
    t.loss.gamma = r.f64("gamma");
    const std::uint32_t n_alpha = r.u32("alpha count");
    if (n_alpha > 16) throw CheckpointError("checkpoint corrupt: alpha count " + std::to_string(n_alpha));
    t.loss.alpha.resize(n_alpha);
    for (double& v : t.loss.alpha) v = r.f64("alpha");
    t.loss.label_convention = r.u32("label convention") != 0 ? nn::LabelConvention::kConventional
                                                              : nn::LabelConvention::kAsPublished;
    t.batch_size = r.u64("batch size");
    t.epochs = r.u64("epochs");
    t.seed = r.u64("seed");
    model.epoch_counter = r.u64("epoch counter");

    ParamMap<float> params;
    const std::uint32_t n_params = r.u32("parameter count");
    for (std::uint32_t i = 0; i < n_params; ++i) {
        std::string name = r.str("parameter name");
        Tensor<float> tensor = r.tensor(name);
        params.emplace(std::move(name), std::move(tensor));
    }
    StatsMap<float> stats;
    const std::uint32_t n_stats = r.u32("statistics count");
    for (std::uint32_t i = 0; i < n_stats; ++i) {
        std::string name = r.str("statistics name");
        Tensor<float> mean = r.tensor(name + " mean");
        Tensor<float> var = r.tensor(name + " var");
        stats.emplace(std::move(name), nn::RunningStats<float>{std::move(mean), std::move(var)});
    }
    const std::size_t body = sizeof kMagic + r.position();
    const std::uint64_t stored = r.u64("checksum");
    if (r.remaining() != 0) {
        throw CheckpointError("checkpoint corrupt: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    if (stored != fnv1a(bytes.first(body))) throw CheckpointError("checkpoint corrupt: checksum mismatch");

    try {
        model.net = Network<float>(a, std::move(params), std::move(stats));
        model.train_config.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint inconsistent with its architecture: ") + e.what());
    }
    for (const auto& [name, tensor] : model.net.params()) {
        if (!tensor.all_finite()) throw CheckpointError("checkpoint corrupt: non-finite values in " + name);
    }
    return model;
}

void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

DetectorModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return deserialize_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace alterdetect
