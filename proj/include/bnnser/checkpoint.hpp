#pragma once

// Binary checkpoint. Layout (little-endian):
//   "BNNSCKPT" u32 version, u64 config hash, str config text,
//   u64 epochs done, f64 best loss, f64 tuning beta, u64 adam step,
//   sections "DETS" and (Bayesian systems only) "BAYS", each
//   u64 count + per tensor: str name, u32 rank, u64 dims[rank],
//   f64 value[n], f64 adam_m[n], f64 adam_v[n]; then "END!".
// Doubles are stored as raw bytes, so a round trip is bit-exact.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "bnnser/config.hpp"
#include "bnnser/model.hpp"

namespace bnnser {

inline constexpr char kCheckpointMagic[8] = {'B', 'N', 'N', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Adam moments, one vector per tensor in Model::parameters() order.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::uint64_t step = 0;

    void init(const std::vector<ad::Parameter*>& ps) {
        m.clear();
        v.clear();
        for (auto* p : ps) {
            m.emplace_back(p->value.size(), 0.0);
            v.emplace_back(p->value.size(), 0.0);
        }
        step = 0;
    }
};

struct TrainState {
    std::size_t epochs_done = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    AdamState adam;
};

namespace ckpt_detail {

class Writer {
public:
    template <class T>
    void pod(const T& v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof(T));
    }
    void str(const std::string& s) {
        pod<std::uint64_t>(s.size());
        buf_ += s;
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    void doubles(const std::vector<double>& v) { raw(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)); }
    const std::string& data() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string data, std::string where) : buf_(std::move(data)), where_(std::move(where)) {}
    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint64_t>();
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string tag() {
        need(4);
        std::string s = buf_.substr(pos_, 4);
        pos_ += 4;
        return s;
    }
    std::vector<double> doubles(std::size_t n) {
        need(n * sizeof(double));
        std::vector<double> v(n);
        std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
        return v;
    }
    [[noreturn]] void fail(const std::string& what) const { throw FormatError(where_ + ": " + what); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) fail("truncated checkpoint");
    }
    std::string buf_;
    std::string where_;
    std::size_t pos_ = 0;
};

inline void write_section(Writer& w, const char* tag, const std::vector<ad::Parameter*>& ps,
                          const std::vector<std::size_t>& idx, const AdamState& adam) {
    w.raw(tag, 4);
    w.pod<std::uint64_t>(ps.size());
    for (std::size_t k = 0; k < ps.size(); ++k) {
        const auto* p = ps[k];
        w.str(p->name);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(p->shape.size()));
        for (auto d : p->shape) w.pod<std::uint64_t>(d);
        w.doubles(p->value);
        const std::size_t i = idx[k];
        const bool have = i < adam.m.size();
        w.doubles(have ? adam.m[i] : std::vector<double>(p->value.size(), 0.0));
        w.doubles(have ? adam.v[i] : std::vector<double>(p->value.size(), 0.0));
    }
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::filesystem::path& path, Model& model, const TrainState& state) {
    using namespace ckpt_detail;
    Writer w;
    w.raw(kCheckpointMagic, 8);
    w.pod(kCheckpointVersion);
    w.pod<std::uint64_t>(config_hash(model.config()));
    w.str(render_model_config(model.config()));
    w.pod<std::uint64_t>(state.epochs_done);
    w.pod(state.best_loss);
    w.pod(model.tuning_beta);
    w.pod<std::uint64_t>(state.adam.step);
    const auto det = model.deterministic_parameters();
    const auto bay = model.bayes_parameters();
    std::vector<std::size_t> det_idx(det.size()), bay_idx(bay.size());
    for (std::size_t i = 0; i < det.size(); ++i) det_idx[i] = i;
    for (std::size_t i = 0; i < bay.size(); ++i) bay_idx[i] = det.size() + i;
    write_section(w, "DETS", det, det_idx, state.adam);
    if (is_bayesian(model.system())) write_section(w, "BAYS", bay, bay_idx, state.adam);
    w.raw("END!", 4);

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot write checkpoint " + tmp.string());
        out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
        if (!out) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
    Model model;
    TrainState state;
    std::uint64_t config_hash = 0;
    std::string config_text;
    bool has_bayes_section = false;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    using namespace ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(std::move(data), path.filename().string());
    char magic[8];
    for (auto& c : magic) c = r.pod<char>();
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) r.fail("not a checkpoint file");
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    const auto hash = r.pod<std::uint64_t>();
    std::string text = r.str();
    ModelConfig cfg;
    try {
        cfg = parse_model_config(text);
    } catch (const Error& e) {
        r.fail(std::string("embedded config is invalid: ") + e.what());
    }
    if (config_hash(cfg) != hash) r.fail("config hash does not match the embedded config");

    LoadedCheckpoint out{Model(cfg), {}, hash, std::move(text), false};
    out.state.epochs_done = r.pod<std::uint64_t>();
    out.state.best_loss = r.pod<double>();
    out.model.tuning_beta = r.pod<double>();
    out.state.adam.step = r.pod<std::uint64_t>();

    auto params = out.model.parameters();
    std::map<std::string, std::size_t> by_name;
    for (std::size_t i = 0; i < params.size(); ++i) by_name[params[i]->name] = i;
    out.state.adam.m.assign(params.size(), {});
    out.state.adam.v.assign(params.size(), {});
    std::vector<bool> seen(params.size(), false);
    while (true) {
        const auto tag = r.tag();
        if (tag == "END!") break;
        if (tag != "DETS" && tag != "BAYS") r.fail("unknown section '" + tag + "'");
        if (tag == "BAYS") out.has_bayes_section = true;
        const auto count = r.pod<std::uint64_t>();
        for (std::uint64_t k = 0; k < count; ++k) {
            const auto name = r.str();
            const auto rank = r.pod<std::uint32_t>();
            ad::Shape shape(rank);
            for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
            auto it = by_name.find(name);
            if (it == by_name.end()) r.fail("unexpected tensor '" + name + "'");
            auto* p = params[it->second];
            if (p->shape != shape) r.fail("tensor '" + name + "' has shape " + ad::to_string(shape) + ", expected " +
                                          ad::to_string(p->shape));
            const std::size_t n = p->value.size();
            p->value = r.doubles(n);
            out.state.adam.m[it->second] = r.doubles(n);
            out.state.adam.v[it->second] = r.doubles(n);
            seen[it->second] = true;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!seen[i]) r.fail("missing tensor '" + params[i]->name + "'");
    return out;
}

/// Copies parameter values (and optionally optimizer state) from a loaded checkpoint into `model`.
inline void restore_into(Model& model, const LoadedCheckpoint& ck) {
    if (config_hash(model.config()) != ck.config_hash || model.system() != ck.model.system())
        throw ValidationError("checkpoint was written for a different model configuration");
    auto dst = model.parameters();
    auto src = const_cast<Model&>(ck.model).parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
    model.tuning_beta = ck.model.tuning_beta;
}

}  // namespace bnnser
