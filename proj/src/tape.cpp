#include "hydronet/tape.hpp"

#include "hydronet/common.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace hydronet {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ValidationError("tape: " + what);
    }
}

}  // namespace

Var Tape::emplace(Eigen::MatrixXd value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
    check(v);
    return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::check(Var v) const {
    require(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "invalid variable handle");
}

void Tape::accumulate(int id, const Eigen::MatrixXd& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

Var Tape::leaf(Eigen::MatrixXd value, bool requires_grad) {
    require(value.size() > 0, "leaf value must be non-empty");
    require(value.allFinite(), "leaf value must be finite");
    return emplace(std::move(value), requires_grad);
}

const Eigen::MatrixXd& Tape::value(Var v) const {
    return node(v).value;
}

Eigen::MatrixXd Tape::gradient(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) {
        return Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
}

bool Tape::requires_grad(Var v) const {
    return node(v).requires_grad;
}

void Tape::backward(Var loss) {
    const Node& l = node(loss);
    require(l.value.rows() == 1 && l.value.cols() == 1, "backward target must be scalar");
    for (Node& n : nodes_) {
        n.grad.resize(0, 0);
    }
    nodes_[static_cast<std::size_t>(loss.id)].grad = Eigen::MatrixXd::Constant(1, 1, 1.0);
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.backward && n.grad.size() != 0) {
            n.backward(*this);
        }
    }
}

Var Tape::add(Var a, Var b) {
    const Eigen::MatrixXd& av = node(a).value;
    const Eigen::MatrixXd& bv = node(b).value;
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch");
    const bool rg = node(a).requires_grad || node(b).requires_grad;
    Var out = emplace(av + bv, rg);
    if (rg) {
        const int out_id = out.id;
        const bool ga = node(a).requires_grad;
        const bool gb = node(b).requires_grad;
        const int aid = a.id;
        const int bid = b.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (ga) tp.accumulate(aid, g);
            if (gb) tp.accumulate(bid, g);
        };
    }
    return out;
}

Var Tape::sub(Var a, Var b) {
    const Eigen::MatrixXd& av = node(a).value;
    const Eigen::MatrixXd& bv = node(b).value;
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "sub: shape mismatch");
    const bool rg = node(a).requires_grad || node(b).requires_grad;
    Var out = emplace(av - bv, rg);
    if (rg) {
        const int out_id = out.id;
        const bool ga = node(a).requires_grad;
        const bool gb = node(b).requires_grad;
        const int aid = a.id;
        const int bid = b.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (ga) tp.accumulate(aid, g);
            if (gb) tp.accumulate(bid, -g);
        };
    }
    return out;
}

Var Tape::cmul(Var a, Var b) {
    const Eigen::MatrixXd& av = node(a).value;
    const Eigen::MatrixXd& bv = node(b).value;
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), "cmul: shape mismatch");
    const bool rg = node(a).requires_grad || node(b).requires_grad;
    Var out = emplace(av.cwiseProduct(bv), rg);
    if (rg) {
        const int out_id = out.id;
        const bool ga = node(a).requires_grad;
        const bool gb = node(b).requires_grad;
        const int aid = a.id;
        const int bid = b.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (ga) tp.accumulate(aid, g.cwiseProduct(tp.nodes_[static_cast<std::size_t>(bid)].value));
            if (gb) tp.accumulate(bid, g.cwiseProduct(tp.nodes_[static_cast<std::size_t>(aid)].value));
        };
    }
    return out;
}

Var Tape::scale(Var a, double c) {
    const bool rg = node(a).requires_grad;
    Var out = emplace(node(a).value * c, rg);
    if (rg) {
        const int out_id = out.id;
        const int aid = a.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            tp.accumulate(aid, tp.nodes_[static_cast<std::size_t>(out_id)].grad * c);
        };
    }
    return out;
}

Var Tape::relu(Var a) {
    const bool rg = node(a).requires_grad;
    Var out = emplace(node(a).value.cwiseMax(0.0), rg);
    if (rg) {
        const int out_id = out.id;
        const int aid = a.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& x = tp.nodes_[static_cast<std::size_t>(aid)].value;
            tp.accumulate(aid, (x.array() > 0.0).select(g, Eigen::MatrixXd::Zero(g.rows(), g.cols())));
        };
    }
    return out;
}

Var Tape::leaky_relu(Var a, double slope) {
    const Eigen::MatrixXd& x = node(a).value;
    const bool rg = node(a).requires_grad;
    Var out = emplace(x.cwiseMax(x * slope), rg);
    if (rg) {
        const int out_id = out.id;
        const int aid = a.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& xv = tp.nodes_[static_cast<std::size_t>(aid)].value;
            tp.accumulate(aid, (xv.array() >= 0.0).select(g, g * slope));
        };
    }
    return out;
}

Var Tape::sigmoid(Var a) {
    const Eigen::MatrixXd& x = node(a).value;
    Eigen::MatrixXd s = (1.0 / (1.0 + (-x.array()).exp())).matrix();
    const bool rg = node(a).requires_grad;
    Var out = emplace(std::move(s), rg);
    if (rg) {
        const int out_id = out.id;
        const int aid = a.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::ArrayXXd sv = tp.nodes_[static_cast<std::size_t>(out_id)].value.array();
            tp.accumulate(aid, (g.array() * sv * (1.0 - sv)).matrix());
        };
    }
    return out;
}

Var Tape::matmul(Var a, Var b) {
    const Eigen::MatrixXd& av = node(a).value;
    const Eigen::MatrixXd& bv = node(b).value;
    require(av.cols() == bv.rows(), "matmul: inner dimension mismatch");
    const bool rg = node(a).requires_grad || node(b).requires_grad;
    Var out = emplace(av * bv, rg);
    if (rg) {
        const int out_id = out.id;
        const bool ga = node(a).requires_grad;
        const bool gb = node(b).requires_grad;
        const int aid = a.id;
        const int bid = b.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (ga) tp.accumulate(aid, g * tp.nodes_[static_cast<std::size_t>(bid)].value.transpose());
            if (gb) tp.accumulate(bid, tp.nodes_[static_cast<std::size_t>(aid)].value.transpose() * g);
        };
    }
    return out;
}

Var Tape::linear(Var x, Var w, Var bias) {
    const Eigen::MatrixXd& xv = node(x).value;
    const Eigen::MatrixXd& wv = node(w).value;
    const Eigen::MatrixXd& bv = node(bias).value;
    require(xv.cols() == wv.rows(), "linear: inner dimension mismatch");
    require(bv.rows() == 1 && bv.cols() == wv.cols(), "linear: bias must be 1 x out");
    Eigen::MatrixXd y = xv * wv;
    y.rowwise() += bv.row(0);
    const bool rg = node(x).requires_grad || node(w).requires_grad || node(bias).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const bool gx = node(x).requires_grad;
        const bool gw = node(w).requires_grad;
        const bool gb = node(bias).requires_grad;
        const int xid = x.id;
        const int wid = w.id;
        const int bid = bias.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (gx) tp.accumulate(xid, g * tp.nodes_[static_cast<std::size_t>(wid)].value.transpose());
            if (gw) tp.accumulate(wid, tp.nodes_[static_cast<std::size_t>(xid)].value.transpose() * g);
            if (gb) tp.accumulate(bid, g.colwise().sum());
        };
    }
    return out;
}

Var Tape::concat_cols(Var a, Var b) {
    const Eigen::MatrixXd& av = node(a).value;
    const Eigen::MatrixXd& bv = node(b).value;
    require(av.rows() == bv.rows(), "concat_cols: row count mismatch");
    const Eigen::Index ca = av.cols();
    const Eigen::Index cb = bv.cols();
    Eigen::MatrixXd y(av.rows(), ca + cb);
    y.leftCols(ca) = av;
    y.rightCols(cb) = bv;
    const bool rg = node(a).requires_grad || node(b).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const bool ga = node(a).requires_grad;
        const bool gb = node(b).requires_grad;
        const int aid = a.id;
        const int bid = b.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (ga) tp.accumulate(aid, g.leftCols(ca));
            if (gb) tp.accumulate(bid, g.rightCols(cb));
        };
    }
    return out;
}

Var Tape::slice_cols(Var a, int first, int count) {
    const Eigen::MatrixXd& av = node(a).value;
    require(first >= 0 && count > 0 && first + count <= av.cols(), "slice_cols: range out of bounds");
    const bool rg = node(a).requires_grad;
    Var out = emplace(av.middleCols(first, count), rg);
    if (rg) {
        const int out_id = out.id;
        const int aid = a.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Node& an = tp.nodes_[static_cast<std::size_t>(aid)];
            Eigen::MatrixXd ga = Eigen::MatrixXd::Zero(an.value.rows(), an.value.cols());
            ga.middleCols(first, count) = g;
            tp.accumulate(aid, ga);
        };
    }
    return out;
}

Var Tape::block_lmul_const(const Eigen::MatrixXd& l, Var x, int rows_per_block) {
    const Eigen::MatrixXd& xv = node(x).value;
    require(rows_per_block > 0 && l.cols() == rows_per_block, "block_lmul_const: left matrix width mismatch");
    require(xv.rows() % rows_per_block == 0, "block_lmul_const: rows not divisible into blocks");
    const int blocks = static_cast<int>(xv.rows()) / rows_per_block;
    const int out_rows = static_cast<int>(l.rows());
    Eigen::MatrixXd y(static_cast<Eigen::Index>(blocks) * out_rows, xv.cols());
    for (int b = 0; b < blocks; ++b) {
        y.middleRows(static_cast<Eigen::Index>(b) * out_rows, out_rows).noalias() =
            l * xv.middleRows(static_cast<Eigen::Index>(b) * rows_per_block, rows_per_block);
    }
    const bool rg = node(x).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const int xid = x.id;
        const Eigen::MatrixXd lt = l.transpose();
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            Eigen::MatrixXd gx(static_cast<Eigen::Index>(blocks) * rows_per_block, g.cols());
            for (int b = 0; b < blocks; ++b) {
                gx.middleRows(static_cast<Eigen::Index>(b) * rows_per_block, rows_per_block).noalias() =
                    lt * g.middleRows(static_cast<Eigen::Index>(b) * out_rows, out_rows);
            }
            tp.accumulate(xid, gx);
        };
    }
    return out;
}

Var Tape::block_lmul_var(Var l, Var x, int rows_per_block) {
    const Eigen::MatrixXd& lv = node(l).value;
    const Eigen::MatrixXd& xv = node(x).value;
    require(rows_per_block > 0 && lv.cols() == rows_per_block, "block_lmul_var: left matrix width mismatch");
    require(xv.rows() % rows_per_block == 0, "block_lmul_var: rows not divisible into blocks");
    const int blocks = static_cast<int>(xv.rows()) / rows_per_block;
    const int out_rows = static_cast<int>(lv.rows());
    Eigen::MatrixXd y(static_cast<Eigen::Index>(blocks) * out_rows, xv.cols());
    for (int b = 0; b < blocks; ++b) {
        y.middleRows(static_cast<Eigen::Index>(b) * out_rows, out_rows).noalias() =
            lv * xv.middleRows(static_cast<Eigen::Index>(b) * rows_per_block, rows_per_block);
    }
    const bool rg = node(l).requires_grad || node(x).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const bool gl = node(l).requires_grad;
        const bool gx = node(x).requires_grad;
        const int lid = l.id;
        const int xid = x.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& lval = tp.nodes_[static_cast<std::size_t>(lid)].value;
            const Eigen::MatrixXd& xval = tp.nodes_[static_cast<std::size_t>(xid)].value;
            if (gl) {
                Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(lval.rows(), lval.cols());
                for (int b = 0; b < blocks; ++b) {
                    acc.noalias() +=
                        g.middleRows(static_cast<Eigen::Index>(b) * out_rows, out_rows) *
                        xval.middleRows(static_cast<Eigen::Index>(b) * rows_per_block, rows_per_block).transpose();
                }
                tp.accumulate(lid, acc);
            }
            if (gx) {
                Eigen::MatrixXd gxm(static_cast<Eigen::Index>(blocks) * rows_per_block, g.cols());
                for (int b = 0; b < blocks; ++b) {
                    gxm.middleRows(static_cast<Eigen::Index>(b) * rows_per_block, rows_per_block).noalias() =
                        lval.transpose() * g.middleRows(static_cast<Eigen::Index>(b) * out_rows, out_rows);
                }
                tp.accumulate(xid, gxm);
            }
        };
    }
    return out;
}

Var Tape::attention(Var z, Var a_src, Var a_dst,
                    const std::vector<std::vector<int>>& nbrs) {
    const Eigen::MatrixXd& zv = node(z).value;
    const Eigen::MatrixXd& sv = node(a_src).value;
    const Eigen::MatrixXd& dv = node(a_dst).value;
    const int r = static_cast<int>(nbrs.size());
    require(r > 0, "attention: empty neighborhood list");
    require(zv.rows() % r == 0, "attention: rows not divisible into blocks");
    require(sv.rows() == zv.cols() && sv.cols() == 1, "attention: a_src must be d x 1");
    require(dv.rows() == zv.cols() && dv.cols() == 1, "attention: a_dst must be d x 1");
    for (int i = 0; i < r; ++i) {
        require(!nbrs[static_cast<std::size_t>(i)].empty(), "attention: empty neighborhood");
        for (int j : nbrs[static_cast<std::size_t>(i)]) {
            require(j >= 0 && j < r, "attention: neighbor index out of range");
        }
    }
    const int blocks = static_cast<int>(zv.rows()) / r;
    const double slope = 0.2;

    Eigen::MatrixXd y(zv.rows(), zv.cols());
    Eigen::MatrixXd alpha = Eigen::MatrixXd::Zero(zv.rows(), r);
    Eigen::MatrixXd s_all(zv.rows(), 1);
    Eigen::MatrixXd t_all(zv.rows(), 1);
    for (int b = 0; b < blocks; ++b) {
        const Eigen::Index row0 = static_cast<Eigen::Index>(b) * r;
        const auto zb = zv.middleRows(row0, r);
        Eigen::VectorXd s = zb * sv;
        Eigen::VectorXd t = zb * dv;
        s_all.middleRows(row0, r) = s;
        t_all.middleRows(row0, r) = t;
        auto ab = alpha.middleRows(row0, r);
        for (int i = 0; i < r; ++i) {
            const std::vector<int>& ni = nbrs[static_cast<std::size_t>(i)];
            double mx = -std::numeric_limits<double>::infinity();
            for (int j : ni) {
                const double pre = s(i) + t(j);
                const double e = pre >= 0.0 ? pre : slope * pre;
                if (e > mx) mx = e;
            }
            double denom = 0.0;
            for (int j : ni) {
                const double pre = s(i) + t(j);
                const double e = pre >= 0.0 ? pre : slope * pre;
                const double w = std::exp(e - mx);
                ab(i, j) = w;
                denom += w;
            }
            ab.row(i) /= denom;
        }
        y.middleRows(row0, r).noalias() = ab * zb;
    }

    const bool rg = node(z).requires_grad || node(a_src).requires_grad || node(a_dst).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const bool gz = node(z).requires_grad;
        const bool gs = node(a_src).requires_grad;
        const bool gd = node(a_dst).requires_grad;
        const int zid = z.id;
        const int sid = a_src.id;
        const int did = a_dst.id;
        nodes_[static_cast<std::size_t>(out.id)].backward =
            [=, alpha = std::move(alpha), s_all = std::move(s_all), t_all = std::move(t_all)](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& zval = tp.nodes_[static_cast<std::size_t>(zid)].value;
            const Eigen::MatrixXd& aval = tp.nodes_[static_cast<std::size_t>(sid)].value;
            const Eigen::MatrixXd& bval = tp.nodes_[static_cast<std::size_t>(did)].value;
            Eigen::MatrixXd gz_m = Eigen::MatrixXd::Zero(zval.rows(), zval.cols());
            Eigen::VectorXd gs_v = Eigen::VectorXd::Zero(aval.rows());
            Eigen::VectorXd gd_v = Eigen::VectorXd::Zero(bval.rows());
            for (int b = 0; b < blocks; ++b) {
                const Eigen::Index row0 = static_cast<Eigen::Index>(b) * r;
                const auto zb = zval.middleRows(row0, r);
                const auto gb = g.middleRows(row0, r);
                const auto ab = alpha.middleRows(row0, r);
                const auto sb = s_all.middleRows(row0, r);
                const auto tb = t_all.middleRows(row0, r);
                gz_m.middleRows(row0, r).noalias() += ab.transpose() * gb;
                // Softmax and leaky-relu backward over the logits.
                Eigen::MatrixXd dp = gb * zb.transpose();
                Eigen::VectorXd ds = Eigen::VectorXd::Zero(r);
                Eigen::VectorXd dt = Eigen::VectorXd::Zero(r);
                for (int i = 0; i < r; ++i) {
                    const double dot = dp.row(i).dot(ab.row(i));
                    for (int j : nbrs[static_cast<std::size_t>(i)]) {
                        const double de = ab(i, j) * (dp(i, j) - dot);
                        const double pre = sb(i, 0) + tb(j, 0);
                        const double dpre = pre >= 0.0 ? de : slope * de;
                        ds(i) += dpre;
                        dt(j) += dpre;
                    }
                }
                gz_m.middleRows(row0, r).noalias() += ds * aval.col(0).transpose();
                gz_m.middleRows(row0, r).noalias() += dt * bval.col(0).transpose();
                gs_v.noalias() += zb.transpose() * ds;
                gd_v.noalias() += zb.transpose() * dt;
            }
            if (gz) tp.accumulate(zid, gz_m);
            if (gs) tp.accumulate(sid, gs_v);
            if (gd) tp.accumulate(did, gd_v);
        };
    }
    return out;
}

Var Tape::causal_conv(Var x, const std::vector<Var>& taps, Var bias,
                      int dilation, int batch, int steps, int rows_per_block) {
    const Eigen::MatrixXd& xv = node(x).value;
    require(!taps.empty(), "causal_conv: needs at least one tap");
    require(dilation > 0 && batch > 0 && steps > 0 && rows_per_block > 0,
            "causal_conv: layout must be positive");
    require(xv.rows() == static_cast<Eigen::Index>(batch) * steps * rows_per_block,
            "causal_conv: row count does not match layout");
    const Eigen::Index in_ch = xv.cols();
    const Eigen::Index out_ch = node(taps[0]).value.cols();
    for (Var w : taps) {
        const Eigen::MatrixXd& wv = node(w).value;
        require(wv.rows() == in_ch && wv.cols() == out_ch, "causal_conv: tap shape mismatch");
    }
    const Eigen::MatrixXd& bv = node(bias).value;
    require(bv.rows() == 1 && bv.cols() == out_ch, "causal_conv: bias must be 1 x out");

    const Eigen::Index block = rows_per_block;
    const Eigen::Index sample_rows = static_cast<Eigen::Index>(steps) * block;
    Eigen::MatrixXd y(xv.rows(), out_ch);
    y.rowwise() = bv.row(0);
    const int k_taps = static_cast<int>(taps.size());
    for (int k = 0; k < k_taps; ++k) {
        const int shift = k * dilation;
        if (shift >= steps) {
            continue;
        }
        const Eigen::Index span = static_cast<Eigen::Index>(steps - shift) * block;
        const Eigen::MatrixXd& wv = node(taps[static_cast<std::size_t>(k)]).value;
        for (int b = 0; b < batch; ++b) {
            const Eigen::Index x0 = static_cast<Eigen::Index>(b) * sample_rows;
            y.middleRows(x0 + static_cast<Eigen::Index>(shift) * block, span).noalias() +=
                xv.middleRows(x0, span) * wv;
        }
    }

    bool rg = node(x).requires_grad || node(bias).requires_grad;
    for (Var w : taps) {
        rg = rg || node(w).requires_grad;
    }
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const int xid = x.id;
        const int bid = bias.id;
        const bool gx = node(x).requires_grad;
        const bool gb = node(bias).requires_grad;
        std::vector<int> tap_ids;
        std::vector<char> tap_grad;
        for (Var w : taps) {
            tap_ids.push_back(w.id);
            tap_grad.push_back(node(w).requires_grad ? 1 : 0);
        }
        nodes_[static_cast<std::size_t>(out.id)].backward =
            [=, tap_ids = std::move(tap_ids), tap_grad = std::move(tap_grad)](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& xval = tp.nodes_[static_cast<std::size_t>(xid)].value;
            if (gx) {
                Eigen::MatrixXd gxm = Eigen::MatrixXd::Zero(xval.rows(), xval.cols());
                for (int k = 0; k < k_taps; ++k) {
                    const int shift = k * dilation;
                    if (shift >= steps) continue;
                    const Eigen::Index span = static_cast<Eigen::Index>(steps - shift) * block;
                    const Eigen::MatrixXd wt =
                        tp.nodes_[static_cast<std::size_t>(tap_ids[static_cast<std::size_t>(k)])].value.transpose();
                    for (int b = 0; b < batch; ++b) {
                        const Eigen::Index x0 = static_cast<Eigen::Index>(b) * sample_rows;
                        gxm.middleRows(x0, span).noalias() +=
                            g.middleRows(x0 + static_cast<Eigen::Index>(shift) * block, span) * wt;
                    }
                }
                tp.accumulate(xid, gxm);
            }
            for (int k = 0; k < k_taps; ++k) {
                if (!tap_grad[static_cast<std::size_t>(k)]) continue;
                const int shift = k * dilation;
                Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(in_ch, out_ch);
                if (shift < steps) {
                    const Eigen::Index span = static_cast<Eigen::Index>(steps - shift) * block;
                    for (int b = 0; b < batch; ++b) {
                        const Eigen::Index x0 = static_cast<Eigen::Index>(b) * sample_rows;
                        gw.noalias() += xval.middleRows(x0, span).transpose() *
                                        g.middleRows(x0 + static_cast<Eigen::Index>(shift) * block, span);
                    }
                }
                tp.accumulate(tap_ids[static_cast<std::size_t>(k)], gw);
            }
            if (gb) tp.accumulate(bid, g.colwise().sum());
        };
    }
    return out;
}

Var Tape::take_last_step(Var x, int batch, int steps, int rows_per_block) {
    const Eigen::MatrixXd& xv = node(x).value;
    require(batch > 0 && steps > 0 && rows_per_block > 0, "take_last_step: layout must be positive");
    require(xv.rows() == static_cast<Eigen::Index>(batch) * steps * rows_per_block,
            "take_last_step: row count does not match layout");
    const Eigen::Index block = rows_per_block;
    const Eigen::Index sample_rows = static_cast<Eigen::Index>(steps) * block;
    Eigen::MatrixXd y(static_cast<Eigen::Index>(batch) * block, xv.cols());
    for (int b = 0; b < batch; ++b) {
        y.middleRows(static_cast<Eigen::Index>(b) * block, block) =
            xv.middleRows(static_cast<Eigen::Index>(b) * sample_rows + (sample_rows - block), block);
    }
    const bool rg = node(x).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const int xid = x.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& xval = tp.nodes_[static_cast<std::size_t>(xid)].value;
            Eigen::MatrixXd gxm = Eigen::MatrixXd::Zero(xval.rows(), xval.cols());
            for (int b = 0; b < batch; ++b) {
                gxm.middleRows(static_cast<Eigen::Index>(b) * sample_rows + (sample_rows - block), block) =
                    g.middleRows(static_cast<Eigen::Index>(b) * block, block);
            }
            tp.accumulate(xid, gxm);
        };
    }
    return out;
}

Var Tape::broadcast_step_add(Var x, Var ctx, int batch, int steps, int rows_per_block) {
    const Eigen::MatrixXd& xv = node(x).value;
    const Eigen::MatrixXd& cv = node(ctx).value;
    require(batch > 0 && steps > 0 && rows_per_block > 0, "broadcast_step_add: layout must be positive");
    const Eigen::Index block = rows_per_block;
    const Eigen::Index sample_rows = static_cast<Eigen::Index>(steps) * block;
    require(xv.rows() == static_cast<Eigen::Index>(batch) * sample_rows,
            "broadcast_step_add: row count does not match layout");
    require(cv.rows() == static_cast<Eigen::Index>(batch) * block && cv.cols() == xv.cols(),
            "broadcast_step_add: context shape mismatch");
    Eigen::MatrixXd y = xv;
    for (int b = 0; b < batch; ++b) {
        const auto cb = cv.middleRows(static_cast<Eigen::Index>(b) * block, block);
        for (int t = 0; t < steps; ++t) {
            y.middleRows(static_cast<Eigen::Index>(b) * sample_rows +
                         static_cast<Eigen::Index>(t) * block, block) += cb;
        }
    }
    const bool rg = node(x).requires_grad || node(ctx).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const bool gx = node(x).requires_grad;
        const bool gc = node(ctx).requires_grad;
        const int xid = x.id;
        const int cid = ctx.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            if (gx) tp.accumulate(xid, g);
            if (gc) {
                Eigen::MatrixXd gcm = Eigen::MatrixXd::Zero(
                    static_cast<Eigen::Index>(batch) * block, g.cols());
                for (int b = 0; b < batch; ++b) {
                    auto dst = gcm.middleRows(static_cast<Eigen::Index>(b) * block, block);
                    for (int t = 0; t < steps; ++t) {
                        dst += g.middleRows(static_cast<Eigen::Index>(b) * sample_rows +
                                            static_cast<Eigen::Index>(t) * block, block);
                    }
                }
                tp.accumulate(cid, gcm);
            }
        };
    }
    return out;
}

Var Tape::split_rows(Var x, int factor, int out_cols) {
    const Eigen::MatrixXd& xv = node(x).value;
    require(factor > 0 && out_cols > 0, "split_rows: factor and width must be positive");
    require(xv.cols() == static_cast<Eigen::Index>(factor) * out_cols,
            "split_rows: column count does not match factor * width");
    Eigen::MatrixXd y(xv.rows() * factor, out_cols);
    for (Eigen::Index rrow = 0; rrow < xv.rows(); ++rrow) {
        for (int u = 0; u < factor; ++u) {
            y.row(rrow * factor + u) = xv.row(rrow).segment(static_cast<Eigen::Index>(u) * out_cols, out_cols);
        }
    }
    const bool rg = node(x).requires_grad;
    Var out = emplace(std::move(y), rg);
    if (rg) {
        const int out_id = out.id;
        const int xid = x.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const Eigen::MatrixXd& g = tp.nodes_[static_cast<std::size_t>(out_id)].grad;
            const Eigen::MatrixXd& xval = tp.nodes_[static_cast<std::size_t>(xid)].value;
            Eigen::MatrixXd gxm(xval.rows(), xval.cols());
            for (Eigen::Index rrow = 0; rrow < xval.rows(); ++rrow) {
                for (int u = 0; u < factor; ++u) {
                    gxm.row(rrow).segment(static_cast<Eigen::Index>(u) * out_cols, out_cols) =
                        g.row(rrow * factor + u);
                }
            }
            tp.accumulate(xid, gxm);
        };
    }
    return out;
}

Var Tape::mse(Var pred, const Eigen::MatrixXd& target, double weight) {
    const Eigen::MatrixXd& pv = node(pred).value;
    require(pv.rows() == target.rows() && pv.cols() == target.cols(), "mse: shape mismatch");
    const double v = weight * (pv - target).squaredNorm();
    const bool rg = node(pred).requires_grad;
    Var out = emplace(Eigen::MatrixXd::Constant(1, 1, v), rg);
    if (rg) {
        const int out_id = out.id;
        const int pid = pred.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const double g = tp.nodes_[static_cast<std::size_t>(out_id)].grad(0, 0);
            const Eigen::MatrixXd& pval = tp.nodes_[static_cast<std::size_t>(pid)].value;
            tp.accumulate(pid, (2.0 * weight * g) * (pval - target));
        };
    }
    return out;
}

Var Tape::bce_logits(Var z, const Eigen::MatrixXd& labels, double weight) {
    const Eigen::MatrixXd& zv = node(z).value;
    require(zv.rows() == labels.rows() && zv.cols() == labels.cols(), "bce_logits: shape mismatch");
    require(((labels.array() == 0.0) || (labels.array() == 1.0)).all(), "bce_logits: labels must be 0 or 1");
    // max(z, 0) - z*y + log(1 + exp(-|z|)) is the overflow-safe softplus form.
    const Eigen::ArrayXXd za = zv.array();
    const double v = weight * (za.max(0.0) - za * labels.array() +
                               (1.0 + (-za.abs()).exp()).log()).sum();
    const bool rg = node(z).requires_grad;
    Var out = emplace(Eigen::MatrixXd::Constant(1, 1, v), rg);
    if (rg) {
        const int out_id = out.id;
        const int zid = z.id;
        nodes_[static_cast<std::size_t>(out.id)].backward = [=](Tape& tp) {
            const double g = tp.nodes_[static_cast<std::size_t>(out_id)].grad(0, 0);
            const Eigen::ArrayXXd zval = tp.nodes_[static_cast<std::size_t>(zid)].value.array();
            const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-zval).exp());
            tp.accumulate(zid, ((weight * g) * (sig - labels.array())).matrix());
        };
    }
    return out;
}

}  // namespace hydronet
