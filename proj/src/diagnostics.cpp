#include "mvseq/diagnostics.hpp"

namespace mvseq {

ConsumptionProbe consumption_probe(const ModelConfig& config) {
    ModelConfig cfg = config;
    cfg.precision = "f64";
    cfg.dropout = 0.0;
    Model<double> model(cfg);
    model.init_parameters(0x5eedful);

    // synthetic batch, two rows, one with padding
    int64_t ls = std::min<int64_t>(6, cfg.max_len);
    IdMatrix src(2, ls);
    SplitMix64 rng(7);
    for (int64_t c = 0; c < ls; ++c) {
        src.at(0, c) = kFirstContentId +
                       static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(cfg.src_vocab - kFirstContentId)));
        src.at(1, c) = c + 1 < ls ? kFirstContentId + static_cast<int32_t>(rng.next_below(
                                        static_cast<uint64_t>(cfg.src_vocab - kFirstContentId)))
                                  : kPadId;
    }
    return consumption_probe(model, src);
}

namespace {

std::string g17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string ids_line(const std::vector<int32_t>& ids) {
    std::string s;
    for (size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
    return s;
}

}  // namespace

std::string attention_csv(const std::vector<double>& map, int64_t tgt_len, int64_t src_len,
                          const std::vector<int32_t>& tgt_ids, const std::vector<int32_t>& src_ids,
                          const std::string& title) {
    std::string out;
    out += "# " + title + "\n";
    out += "# src_ids: " + ids_line(src_ids) + "\n";
    out += "# tgt_ids: " + ids_line(tgt_ids) + "\n";
    for (int64_t t = 0; t < tgt_len; ++t) {
        for (int64_t s = 0; s < src_len; ++s)
            out += (s ? "," : "") + g17(map[static_cast<size_t>(t * src_len + s)]);
        out += "\n";
    }
    return out;
}

std::string cosine_csv(const CosineMap& map) {
    std::string out;
    out += "# layer " + std::to_string(map.layer) + " diffusion " + g17(map.diffusion) + "\n";
    for (int64_t a = 0; a < map.size; ++a) {
        for (int64_t b = 0; b < map.size; ++b) out += (b ? "," : "") + g17(map.at(a, b));
        out += "\n";
    }
    return out;
}

}  // namespace mvseq
