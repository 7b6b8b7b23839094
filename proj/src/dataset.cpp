#include "hydronet/dataset.hpp"

#include "hydronet/common.hpp"
#include "hydronet/json_util.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hydronet {

using nlohmann::json;

std::vector<Sample> window_trajectory(const DrainageGraph& graph, const Trajectory& traj,
                                      const WindowSpec& spec, const std::string& event_id) {
    if (spec.past < 1 || spec.future < 1 || spec.stride < 1)
        throw ValidationError("window spec must have positive past, future, stride");
    if (traj.states.size() != traj.forcing.size())
        throw ValidationError("trajectory states and forcing lengths differ");

    const int n = graph.node_count(), c = graph.edge_count();
    const int length = traj.length();
    const int m = spec.past, f = spec.future;

    std::vector<Sample> samples;
    for (int anchor = m - 1; anchor <= length - 1 - f; anchor += spec.stride) {
        Sample s;
        s.event_id = event_id;
        s.anchor = anchor;
        s.past_nodes.resize(m * n, 3);
        s.past_edges.resize(m * c, 2);
        s.past_node_forcing.resize(m * n, 1);
        s.past_edge_forcing.resize(m * c, 1);
        s.future_node_forcing.resize(f * n, 1);
        s.future_edge_forcing.resize(f * c, 1);
        s.target_nodes.resize(f * n, 3);
        s.target_edges.resize(f * c, 2);
        s.target_flood.resize(f * n, 1);
        s.flood_label.resize(f * n, 1);

        for (int k = 0; k < m; ++k) {
            const int t = anchor - m + 1 + k;
            const auto& st = traj.states[t];
            const auto& fc = traj.forcing[t];
            for (int i = 0; i < n; ++i) {
                s.past_nodes(k * n + i, 0) = static_cast<float>(st.node_depth[i]);
                s.past_nodes(k * n + i, 1) = static_cast<float>(st.node_inflow[i]);
                s.past_nodes(k * n + i, 2) = static_cast<float>(st.node_outflow[i]);
                s.past_node_forcing(k * n + i, 0) = static_cast<float>(fc.runoff[i]);
            }
            for (int j = 0; j < c; ++j) {
                s.past_edges(k * c + j, 0) = static_cast<float>(st.edge_depth[j]);
                s.past_edges(k * c + j, 1) = static_cast<float>(st.edge_flow[j]);
                s.past_edge_forcing(k * c + j, 0) = static_cast<float>(fc.control[j]);
            }
        }
        for (int k = 0; k < f; ++k) {
            const int t = anchor + 1 + k;
            const auto& st = traj.states[t];
            const auto& fc = traj.forcing[t];
            for (int i = 0; i < n; ++i) {
                s.future_node_forcing(k * n + i, 0) = static_cast<float>(fc.runoff[i]);
                s.target_nodes(k * n + i, 0) = static_cast<float>(st.node_depth[i]);
                s.target_nodes(k * n + i, 1) = static_cast<float>(st.node_inflow[i]);
                s.target_nodes(k * n + i, 2) = static_cast<float>(st.node_outflow[i]);
                const float qw = static_cast<float>(st.flooding[i]);
                s.target_flood(k * n + i, 0) = qw;
                s.flood_label(k * n + i, 0) = qw > 0.0f ? 1.0f : 0.0f;
            }
            for (int j = 0; j < c; ++j) {
                s.future_edge_forcing(k * c + j, 0) = static_cast<float>(fc.control[j]);
                s.target_edges(k * c + j, 0) = static_cast<float>(st.edge_depth[j]);
                s.target_edges(k * c + j, 1) = static_cast<float>(st.edge_flow[j]);
            }
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

namespace {

double scale_or_zero(double value, double lo, double hi) {
    if (hi <= lo) return 0.0;  // degenerate range carries no information
    return std::clamp((value - lo) / (hi - lo), 0.0, 1.0);
}

}  // namespace

double Normalizer::normalize(Kind kind, double value) const {
    switch (kind) {
        case Kind::depth_node: return scale_or_zero(value, h_v_min, h_v_max);
        case Kind::depth_edge: return scale_or_zero(value, h_e_min, h_e_max);
        case Kind::flow: return scale_or_zero(value, 0.0, flow_max);
        case Kind::control: return value;
    }
    return 0.0;
}

double Normalizer::denormalize(Kind kind, double value) const {
    switch (kind) {
        case Kind::depth_node:
            return h_v_max <= h_v_min ? h_v_min : h_v_min + value * (h_v_max - h_v_min);
        case Kind::depth_edge:
            return h_e_max <= h_e_min ? h_e_min : h_e_min + value * (h_e_max - h_e_min);
        case Kind::flow: return flow_max <= 0.0 ? 0.0 : value * flow_max;
        case Kind::control: return value;
    }
    return 0.0;
}

json Normalizer::to_json() const {
    return json{{"h_v", {h_v_min, h_v_max}},
                {"h_e", {h_e_min, h_e_max}},
                {"flow", {0.0, flow_max}},
                {"a", {0.0, 1.0}}};
}

Normalizer Normalizer::from_json(const json& j) {
    reject_unknown_keys(j, {"h_v", "h_e", "flow", "a"}, "normalizer");
    auto range = [&](const std::string& key) -> std::pair<double, double> {
        if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2)
            throw ValidationError("normalizer entry '" + key + "' must be a [min, max] array");
        return {j[key][0].get<double>(), j[key][1].get<double>()};
    };
    Normalizer n;
    std::tie(n.h_v_min, n.h_v_max) = range("h_v");
    std::tie(n.h_e_min, n.h_e_max) = range("h_e");
    auto [flow_min, flow_max] = range("flow");
    if (flow_min != 0.0)
        throw ValidationError("normalizer flow range must start at 0");
    n.flow_max = flow_max;
    return n;
}

Normalizer fit_normalizer(const std::vector<Sample>& samples) {
    Normalizer n;
    bool first = true;
    auto update = [&](double& lo, double& hi, float v) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    };
    double flow_hi = 0.0;
    for (const auto& s : samples) {
        if (first) {
            n.h_v_min = n.h_v_max = s.past_nodes(0, 0);
            n.h_e_min = n.h_e_max = s.past_edges.rows() > 0 ? s.past_edges(0, 0) : 0.0;
            first = false;
        }
        for (Eigen::Index r = 0; r < s.past_nodes.rows(); ++r)
            update(n.h_v_min, n.h_v_max, s.past_nodes(r, 0));
        for (Eigen::Index r = 0; r < s.target_nodes.rows(); ++r)
            update(n.h_v_min, n.h_v_max, s.target_nodes(r, 0));
        for (Eigen::Index r = 0; r < s.past_edges.rows(); ++r)
            update(n.h_e_min, n.h_e_max, s.past_edges(r, 0));
        for (Eigen::Index r = 0; r < s.target_edges.rows(); ++r)
            update(n.h_e_min, n.h_e_max, s.target_edges(r, 0));

        flow_hi = std::max<double>(flow_hi, s.past_nodes.col(1).maxCoeff());
        flow_hi = std::max<double>(flow_hi, s.past_nodes.col(2).maxCoeff());
        flow_hi = std::max<double>(flow_hi, s.target_nodes.col(1).maxCoeff());
        flow_hi = std::max<double>(flow_hi, s.target_nodes.col(2).maxCoeff());
        if (s.past_edges.rows() > 0) {
            flow_hi = std::max<double>(flow_hi, s.past_edges.col(1).maxCoeff());
            flow_hi = std::max<double>(flow_hi, s.target_edges.col(1).maxCoeff());
        }
        flow_hi = std::max<double>(flow_hi, s.past_node_forcing.maxCoeff());
        flow_hi = std::max<double>(flow_hi, s.future_node_forcing.maxCoeff());
        flow_hi = std::max<double>(flow_hi, s.target_flood.maxCoeff());
    }
    if (samples.empty()) throw ValidationError("cannot fit a normalizer on zero samples");
    n.flow_max = flow_hi;
    return n;
}

namespace {

constexpr char kMagic[8] = {'H', 'N', 'D', 'S', 'E', 'T', '1', '\0'};

void put_u32(std::string& buf, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    buf.append(b, 4);
}

void put_i32(std::string& buf, std::int32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    buf.append(b, 4);
}

void put_matrix(std::string& buf, const Eigen::MatrixXf& m) {
    buf.append(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(float));
}

class Reader {
public:
    Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    std::uint32_t u32() {
        std::uint32_t v;
        take(reinterpret_cast<char*>(&v), 4);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        take(reinterpret_cast<char*>(&v), 4);
        return v;
    }
    std::string str(std::size_t len) {
        std::string s(len, '\0');
        take(s.data(), len);
        return s;
    }
    void matrix(Eigen::MatrixXf& m, Eigen::Index rows, Eigen::Index cols) {
        m.resize(rows, cols);
        take(reinterpret_cast<char*>(m.data()), m.size() * sizeof(float));
    }
    bool exhausted() const { return pos_ == data_.size(); }

private:
    void take(char* dst, std::size_t len) {
        if (pos_ + len > data_.size())
            throw ValidationError("dataset file '" + path_ + "' is truncated");
        std::memcpy(dst, data_.data() + pos_, len);
        pos_ += len;
    }
    const std::string& data_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_dataset(const Dataset& dataset, const std::string& path) {
    // Payload is assembled in memory so the checksum covers exactly what is
    // written. Sizes here are small (float32, short windows).
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));

    std::uint32_t n = 0, c = 0;
    if (!dataset.samples.empty()) {
        n = static_cast<std::uint32_t>(dataset.samples.front().past_nodes.rows() / dataset.window.past);
        c = static_cast<std::uint32_t>(dataset.samples.front().past_edges.rows() / dataset.window.past);
    }
    put_u32(buf, n);
    put_u32(buf, c);
    put_u32(buf, static_cast<std::uint32_t>(dataset.window.past));
    put_u32(buf, static_cast<std::uint32_t>(dataset.window.future));
    put_u32(buf, static_cast<std::uint32_t>(dataset.samples.size()));

    for (const auto& s : dataset.samples) {
        put_u32(buf, static_cast<std::uint32_t>(s.event_id.size()));
        buf.append(s.event_id);
        put_i32(buf, s.anchor);
        put_matrix(buf, s.past_nodes);
        put_matrix(buf, s.past_edges);
        put_matrix(buf, s.past_node_forcing);
        put_matrix(buf, s.past_edge_forcing);
        put_matrix(buf, s.future_node_forcing);
        put_matrix(buf, s.future_edge_forcing);
        put_matrix(buf, s.target_nodes);
        put_matrix(buf, s.target_edges);
        put_matrix(buf, s.target_flood);
        put_matrix(buf, s.flood_label);
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw RuntimeFailure("write failure on '" + path + "'");
    out.close();

    json sidecar;
    sidecar["m"] = dataset.window.past;
    sidecar["n"] = dataset.window.future;
    sidecar["stride"] = dataset.window.stride;
    sidecar["network_hash"] = dataset.network_hash;
    sidecar["seed"] = dataset.seed;
    sidecar["event_ids"] = dataset.event_ids;
    sidecar["normalizer"] = dataset.normalizer.to_json();
    sidecar["sample_count"] = dataset.samples.size();
    sidecar["checksum"] = to_hex(fnv1a64(buf.data(), buf.size()));

    std::ofstream meta(path + ".json");
    if (!meta) throw RuntimeFailure("cannot open '" + path + ".json' for writing");
    meta << sidecar.dump(2) << '\n';
    if (!meta) throw RuntimeFailure("write failure on '" + path + ".json'");
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open dataset file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();

    std::ifstream meta_in(path + ".json");
    if (!meta_in) throw RuntimeFailure("cannot open dataset sidecar '" + path + ".json'");
    json sidecar;
    try {
        meta_in >> sidecar;
    } catch (const json::parse_error& e) {
        throw ValidationError("dataset sidecar '" + path + ".json' is not valid JSON: " + e.what());
    }
    reject_unknown_keys(sidecar, {"m", "n", "stride", "network_hash", "seed", "event_ids",
                                  "normalizer", "sample_count", "checksum"},
                        "dataset sidecar");

    const std::string expected = json_string(sidecar, "checksum", "dataset sidecar");
    const std::string actual = to_hex(fnv1a64(buf.data(), buf.size()));
    if (expected != actual)
        throw ValidationError("dataset file '" + path + "' checksum mismatch (expected " +
                              expected + ", got " + actual + "); file is corrupt");

    Dataset ds;
    ds.window.past = static_cast<int>(json_integer(sidecar, "m", "dataset sidecar"));
    ds.window.future = static_cast<int>(json_integer(sidecar, "n", "dataset sidecar"));
    ds.window.stride = static_cast<int>(json_integer(sidecar, "stride", "dataset sidecar"));
    ds.network_hash = json_string(sidecar, "network_hash", "dataset sidecar");
    ds.seed = sidecar["seed"].get<std::uint64_t>();
    ds.event_ids = sidecar["event_ids"].get<std::vector<std::string>>();
    ds.normalizer = Normalizer::from_json(sidecar["normalizer"]);

    Reader r(buf, path);
    if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw ValidationError("dataset file '" + path + "' has the wrong magic header");
    const auto n = r.u32(), c = r.u32(), m = r.u32(), f = r.u32(), count = r.u32();
    if (static_cast<int>(m) != ds.window.past || static_cast<int>(f) != ds.window.future)
        throw ValidationError("dataset sidecar window does not match the binary header");
    if (count != json_integer(sidecar, "sample_count", "dataset sidecar"))
        throw ValidationError("dataset sidecar sample_count does not match the binary header");

    ds.samples.resize(count);
    for (auto& s : ds.samples) {
        const auto id_len = r.u32();
        s.event_id = r.str(id_len);
        s.anchor = r.i32();
        r.matrix(s.past_nodes, m * n, 3);
        r.matrix(s.past_edges, m * c, 2);
        r.matrix(s.past_node_forcing, m * n, 1);
        r.matrix(s.past_edge_forcing, m * c, 1);
        r.matrix(s.future_node_forcing, f * n, 1);
        r.matrix(s.future_edge_forcing, f * c, 1);
        r.matrix(s.target_nodes, f * n, 3);
        r.matrix(s.target_edges, f * c, 2);
        r.matrix(s.target_flood, f * n, 1);
        r.matrix(s.flood_label, f * n, 1);
    }
    if (!r.exhausted())
        throw ValidationError("dataset file '" + path + "' has trailing bytes");
    return ds;
}

}  // namespace hydronet
