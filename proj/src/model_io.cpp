// UIVM v1 model container: JSON header, then per sub-network (order D, Dstar,
// f, S0) twelve float64 blocks
//   l1.w, l1.b, bn1.gamma, bn1.beta, bn1.running_mean, bn1.running_var,
//   l2.w, l2.b, bn2.gamma, bn2.beta, bn2.running_mean, bn2.running_var,
//   encoder.w, encoder.b
// followed by the packed mask bits of mask1 then mask2 for each sub-network.
// Full layout in docs/formats.md.

#include <json.hpp>

#include "uivim/network.hpp"
#include "uivim/serialize.hpp"

namespace uivim {

namespace {

nlohmann::json interval_json(const Interval& iv) { return nlohmann::json{iv.min, iv.max}; }

Interval interval_from(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 2) {
        throw std::runtime_error(std::string("model header: bad interval for ") + what);
    }
    return Interval{j[0].get<double>(), j[1].get<double>()};
}

nlohmann::json mask_json(const MaskSet& m) {
    const MaskConfig& c = m.config();
    nlohmann::json j{{"n_samples", c.n_samples},
                     {"width", c.width},
                     {"drop_rate", c.drop_rate},
                     {"seed", c.seed},
                     {"overlap_warning", m.overlap_warning()}};
    if (c.max_overlap.has_value()) j["max_overlap"] = *c.max_overlap;
    return j;
}

MaskConfig mask_config_from(const nlohmann::json& j) {
    MaskConfig c;
    c.n_samples = j.at("n_samples").get<size_t>();
    c.width = j.at("width").get<size_t>();
    c.drop_rate = j.at("drop_rate").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("max_overlap")) c.max_overlap = j.at("max_overlap").get<double>();
    return c;
}

}  // namespace

void save_model(const std::string& path, const UIvimNet& net) {
    net.validate();
    const size_t nb = net.n_b();

    nlohmann::json header{{"magic", "UIVM"},
                          {"version", 1},
                          {"n_b", nb},
                          {"n_samples", net.n_samples()},
                          {"folded", net.folded},
                          {"seed", net.seed},
                          {"b_values", net.schedule.b}};
    nlohmann::json ranges = nlohmann::json::array();
    nlohmann::json masks = nlohmann::json::array();
    nlohmann::json eps = nlohmann::json::array();
    for (const auto& s : net.subnets) {
        ranges.push_back(interval_json(s.range));
        masks.push_back(nlohmann::json{mask_json(s.mask1), mask_json(s.mask2)});
        eps.push_back(nlohmann::json{s.bn1.eps, s.bn2.eps});
    }
    header["ranges"] = ranges;
    header["masks"] = masks;
    header["bn_eps"] = eps;
    header["training_meta"] = net.training_meta.empty()
                                  ? nlohmann::json::object()
                                  : nlohmann::json::parse(net.training_meta);

    io::Writer w(path);
    w.header(header);
    for (const auto& s : net.subnets) {
        w.block(s.l1.w);
        w.block(s.l1.b);
        w.block(s.bn1.gamma);
        w.block(s.bn1.beta);
        w.block(s.bn1.running_mean);
        w.block(s.bn1.running_var);
        w.block(s.l2.w);
        w.block(s.l2.b);
        w.block(s.bn2.gamma);
        w.block(s.bn2.beta);
        w.block(s.bn2.running_mean);
        w.block(s.bn2.running_var);
        w.block(s.encoder.w);
        w.block(s.encoder.b);
    }
    for (const auto& s : net.subnets) {
        w.block(s.mask1.pack_bits());
        w.block(s.mask2.pack_bits());
    }
    w.finish(path);
}

UIvimNet load_model(const std::string& path) {
    io::Reader r(path);
    const nlohmann::json h = r.header("UIVM");
    if (h.at("version").get<int>() != 1) {
        throw std::runtime_error(path + ": unsupported model version");
    }
    const size_t nb = h.at("n_b").get<size_t>();
    const size_t n_samples = h.at("n_samples").get<size_t>();

    UIvimNet net;
    net.schedule.b = h.at("b_values").get<std::vector<double>>();
    net.folded = h.at("folded").get<bool>();
    net.seed = h.at("seed").get<uint64_t>();
    net.training_meta = h.at("training_meta").dump();
    if (net.schedule.size() != nb) {
        throw std::runtime_error(path + ": b_values length does not match n_b");
    }

    for (size_t k = 0; k < 4; ++k) {
        SubNetwork& s = net.subnets[k];
        s.range = interval_from(h.at("ranges").at(k), "subnet range");
        s.l1.out = s.l1.in = nb;
        s.l1.w = r.block<double>(nb * nb);
        s.l1.b = r.block<double>(nb);
        s.bn1.gamma = r.block<double>(nb);
        s.bn1.beta = r.block<double>(nb);
        s.bn1.running_mean = r.block<double>(nb);
        s.bn1.running_var = r.block<double>(nb);
        s.l2.out = s.l2.in = nb;
        s.l2.w = r.block<double>(nb * nb);
        s.l2.b = r.block<double>(nb);
        s.bn2.gamma = r.block<double>(nb);
        s.bn2.beta = r.block<double>(nb);
        s.bn2.running_mean = r.block<double>(nb);
        s.bn2.running_var = r.block<double>(nb);
        s.encoder.out = 1;
        s.encoder.in = nb;
        s.encoder.w = r.block<double>(nb);
        s.encoder.b = r.block<double>(1);
        s.bn1.eps = h.at("bn_eps").at(k).at(0).get<double>();
        s.bn2.eps = h.at("bn_eps").at(k).at(1).get<double>();
    }
    for (size_t k = 0; k < 4; ++k) {
        SubNetwork& s = net.subnets[k];
        const auto jm = h.at("masks").at(k);
        for (size_t layer = 0; layer < 2; ++layer) {
            const MaskConfig mc = mask_config_from(jm.at(layer));
            if (mc.width != nb || mc.n_samples != n_samples) {
                throw std::runtime_error(path + ": mask dimensions disagree with the header");
            }
            const size_t bytes = mc.n_samples * ((mc.width + 7) / 8);
            MaskSet ms = MaskSet::unpack_bits(mc, r.block<uint8_t>(bytes),
                                              jm.at(layer).at("overlap_warning").get<bool>());
            (layer == 0 ? s.mask1 : s.mask2) = std::move(ms);
        }
    }
    net.validate();
    return net;
}

}  // namespace uivim
