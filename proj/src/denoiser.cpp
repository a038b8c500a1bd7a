#include "flare/denoiser.hpp"

#include <cmath>

namespace flare {

namespace {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_prime(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

// Column sums of g added into b.
void add_col_sums(std::span<double> b, const Matrix& g) {
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) b[j] += g(i, j);
}

Matrix as_matrix(std::span<const double> w, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    std::copy(w.begin(), w.end(), m.data.begin());
    return m;
}

struct BlockCache {
    Matrix h_in, gamma, beta_shift, u, z1, s1, h_out;
};

struct ForwardCache {
    Matrix x, te, h0, out;
    std::vector<BlockCache> blocks;
    const Matrix& final_hidden() const { return blocks.empty() ? h0 : blocks.back().h_out; }
};

}  // namespace

const LayoutEntry& ParamVector::entry(const std::string& name) const {
    for (const auto& e : layout)
        if (e.name == name) return e;
    throw InvalidArgument("ParamVector: no layout entry named " + name);
}

std::span<double> ParamVector::span_of(const std::string& name) {
    const auto& e = entry(name);
    return {values.data() + e.offset, e.length};
}

std::span<const double> ParamVector::span_of(const std::string& name) const {
    const auto& e = entry(name);
    return {values.data() + e.offset, e.length};
}

ModelConfig preset_model_config(const std::string& dataset_name) {
    ModelConfig cfg;
    cfg.time_embed_dim = 32;
    cfg.n_blocks = 2;
    if (dataset_name == "grid") {
        cfg.data_dim = 2;
        cfg.hidden = 32;
        cfg.total_steps = 800;
    } else if (dataset_name == "sine") {
        cfg.data_dim = 10;
        cfg.hidden = 32;
        cfg.total_steps = 600;
    } else if (dataset_name == "chirp") {
        cfg.data_dim = 80;
        cfg.hidden = 128;
        cfg.total_steps = 600;
    } else if (dataset_name == "damped") {
        cfg.data_dim = 40;
        cfg.hidden = 128;
        cfg.total_steps = 600;
    } else {
        throw InvalidArgument("no model preset for dataset: " + dataset_name);
    }
    return cfg;
}

DenoiserModel::DenoiserModel(ModelConfig cfg) : config(cfg) {
    if (cfg.data_dim == 0 || cfg.hidden == 0 || cfg.total_steps == 0)
        throw InvalidArgument("DenoiserModel: data_dim, hidden, total_steps must be positive");
    if (cfg.time_embed_dim % 2 != 0)
        throw InvalidArgument("DenoiserModel: time_embed_dim must be even");
    const std::size_t d = cfg.data_dim, h = cfg.hidden, te = cfg.time_embed_dim;
    std::size_t off = 0;
    auto add = [&](const std::string& name, std::size_t len) {
        params.layout.push_back({name, off, len});
        off += len;
    };
    add("in.w", h * d);
    add("in.b", h);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        add(prefix + "film.w", 2 * h * te);
        add(prefix + "film.b", 2 * h);
        add(prefix + "fc1.w", h * h);
        add(prefix + "fc1.b", h);
        add(prefix + "fc2.w", h * h);
        add(prefix + "fc2.b", h);
    }
    add("out.w", d * h);
    add("out.b", d);
    params.values.assign(off, 0.0);
}

void DenoiserModel::init_params(std::uint64_t seed) {
    Rng rng(seed);
    auto fill = [&rng](std::span<double> w, double scale) {
        std::uniform_real_distribution<double> u(-scale, scale);
        for (double& v : w) v = u(rng);
    };
    const double d = static_cast<double>(config.data_dim);
    const double h = static_cast<double>(config.hidden);
    const double te = static_cast<double>(config.time_embed_dim);
    fill(params.span_of("in.w"), 1.0 / std::sqrt(d));
    for (std::size_t b = 0; b < config.n_blocks; ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        fill(params.span_of(prefix + "film.w"), 1.0 / std::sqrt(te));
        fill(params.span_of(prefix + "fc1.w"), 1.0 / std::sqrt(h));
        fill(params.span_of(prefix + "fc2.w"), 1.0 / std::sqrt(h));
    }
    fill(params.span_of("out.w"), 0.1 / std::sqrt(h));
}

Matrix DenoiserModel::time_embedding(std::span<const std::size_t> t) const {
    const std::size_t half = config.time_embed_dim / 2;
    const double tf = static_cast<double>(config.total_steps);
    Matrix te(t.size(), config.time_embed_dim);
    for (std::size_t r = 0; r < t.size(); ++r)
        for (std::size_t j = 0; j < half; ++j) {
            // Frequencies geometric between 1 and T.
            const double freq =
                half > 1 ? std::pow(tf, static_cast<double>(j) / static_cast<double>(half - 1))
                         : 1.0;
            const double angle = freq * static_cast<double>(t[r]) / tf;
            te(r, 2 * j) = std::sin(angle);
            te(r, 2 * j + 1) = std::cos(angle);
        }
    return te;
}

namespace {

ForwardCache run_forward(const DenoiserModel& m, const Matrix& x,
                         std::span<const std::size_t> t) {
    const auto& cfg = m.config;
    if (x.cols != cfg.data_dim) throw ShapeError("forward: input dim mismatch");
    if (t.size() != x.rows) throw ShapeError("forward: one timestep per row required");
    for (std::size_t s : t)
        if (s < 1 || s > cfg.total_steps) throw InvalidArgument("forward: t out of [1, T]");
    const std::size_t n = x.rows, h = cfg.hidden;

    ForwardCache c;
    c.x = x;
    c.te = m.time_embedding(t);

    const Matrix in_w = as_matrix(m.params.span_of("in.w"), h, cfg.data_dim);
    const auto in_b = m.params.span_of("in.b");
    c.h0 = Matrix(n, h);
    gemm_acc(c.h0, x, in_w, false, true, 1.0, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < h; ++j) c.h0(r, j) += in_b[j];

    const Matrix* h_prev = &c.h0;
    c.blocks.resize(cfg.n_blocks);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        BlockCache& bc = c.blocks[b];
        bc.h_in = *h_prev;
        const Matrix film_w =
            as_matrix(m.params.span_of(prefix + "film.w"), 2 * h, cfg.time_embed_dim);
        const auto film_b = m.params.span_of(prefix + "film.b");
        Matrix f(n, 2 * h);
        gemm_acc(f, c.te, film_w, false, true, 1.0, 0.0);
        bc.gamma = Matrix(n, h);
        bc.beta_shift = Matrix(n, h);
        bc.u = Matrix(n, h);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < h; ++j) {
                bc.gamma(r, j) = f(r, j) + film_b[j];
                bc.beta_shift(r, j) = f(r, h + j) + film_b[h + j];
                bc.u(r, j) = bc.gamma(r, j) * bc.h_in(r, j) + bc.beta_shift(r, j);
            }
        const Matrix fc1_w = as_matrix(m.params.span_of(prefix + "fc1.w"), h, h);
        const auto fc1_b = m.params.span_of(prefix + "fc1.b");
        bc.z1 = Matrix(n, h);
        gemm_acc(bc.z1, bc.u, fc1_w, false, true, 1.0, 0.0);
        bc.s1 = Matrix(n, h);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < h; ++j) {
                bc.z1(r, j) += fc1_b[j];
                bc.s1(r, j) = silu(bc.z1(r, j));
            }
        const Matrix fc2_w = as_matrix(m.params.span_of(prefix + "fc2.w"), h, h);
        const auto fc2_b = m.params.span_of(prefix + "fc2.b");
        bc.h_out = Matrix(n, h);
        gemm_acc(bc.h_out, bc.s1, fc2_w, false, true, 1.0, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < h; ++j)
                bc.h_out(r, j) += fc2_b[j] + bc.h_in(r, j);
        h_prev = &bc.h_out;
    }

    const Matrix out_w = as_matrix(m.params.span_of("out.w"), cfg.data_dim, h);
    const auto out_b = m.params.span_of("out.b");
    c.out = Matrix(n, cfg.data_dim);
    gemm_acc(c.out, *h_prev, out_w, false, true, 1.0, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cfg.data_dim; ++j) c.out(r, j) += out_b[j];
    if (!c.out.all_finite()) throw NumericalBreakdown("forward: non-finite activation");
    return c;
}

// Backward pass accumulating parameter gradients summed over the batch.
void run_backward_sum(const DenoiserModel& m, const ForwardCache& c, const Matrix& d_out,
                      Vector& grad) {
    const auto& cfg = m.config;
    const std::size_t n = d_out.rows, h = cfg.hidden;
    auto gspan = [&](const std::string& name) {
        const auto& e = m.params.entry(name);
        return std::span<double>(grad.data() + e.offset, e.length);
    };
    auto gmat = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        const auto& e = m.params.entry(name);
        Matrix v(rows, cols);
        std::copy_n(grad.data() + e.offset, e.length, v.data.begin());
        return v;
    };
    auto gstore = [&](const std::string& name, const Matrix& v) {
        const auto& e = m.params.entry(name);
        std::copy(v.data.begin(), v.data.end(), grad.data() + e.offset);
    };

    // Head.
    {
        Matrix gw = gmat("out.w", cfg.data_dim, h);
        gemm_acc(gw, d_out, c.final_hidden(), true, false, 1.0, 1.0);
        gstore("out.w", gw);
        add_col_sums(gspan("out.b"), d_out);
    }
    const Matrix out_w = as_matrix(m.params.span_of("out.w"), cfg.data_dim, h);
    Matrix d_h(n, h);
    gemm_acc(d_h, d_out, out_w, false, false, 1.0, 0.0);

    for (std::size_t b = cfg.n_blocks; b-- > 0;) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        const BlockCache& bc = c.blocks[b];
        const Matrix& d_z2 = d_h;
        {
            Matrix gw = gmat(prefix + "fc2.w", h, h);
            gemm_acc(gw, d_z2, bc.s1, true, false, 1.0, 1.0);
            gstore(prefix + "fc2.w", gw);
            add_col_sums(gspan(prefix + "fc2.b"), d_z2);
        }
        const Matrix fc2_w = as_matrix(m.params.span_of(prefix + "fc2.w"), h, h);
        Matrix d_z1(n, h);
        gemm_acc(d_z1, d_z2, fc2_w, false, false, 1.0, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < h; ++j) d_z1(r, j) *= silu_prime(bc.z1(r, j));
        {
            Matrix gw = gmat(prefix + "fc1.w", h, h);
            gemm_acc(gw, d_z1, bc.u, true, false, 1.0, 1.0);
            gstore(prefix + "fc1.w", gw);
            add_col_sums(gspan(prefix + "fc1.b"), d_z1);
        }
        const Matrix fc1_w = as_matrix(m.params.span_of(prefix + "fc1.w"), h, h);
        Matrix d_u(n, h);
        gemm_acc(d_u, d_z1, fc1_w, false, false, 1.0, 0.0);
        // FiLM: u = gamma (.) h_in + beta_shift, gamma/beta affine in the embedding.
        Matrix d_f(n, 2 * h);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < h; ++j) {
                d_f(r, j) = d_u(r, j) * bc.h_in(r, j);
                d_f(r, h + j) = d_u(r, j);
            }
        {
            Matrix gw = gmat(prefix + "film.w", 2 * h, cfg.time_embed_dim);
            gemm_acc(gw, d_f, c.te, true, false, 1.0, 1.0);
            gstore(prefix + "film.w", gw);
            add_col_sums(gspan(prefix + "film.b"), d_f);
        }
        // Residual plus modulated path into the block input.
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < h; ++j)
                d_h(r, j) += d_u(r, j) * bc.gamma(r, j);
    }

    {
        Matrix gw = gmat("in.w", h, cfg.data_dim);
        gemm_acc(gw, d_h, c.x, true, false, 1.0, 1.0);
        gstore("in.w", gw);
        add_col_sums(gspan("in.b"), d_h);
    }
}

}  // namespace

Matrix DenoiserModel::forward_batch(const Matrix& x, std::span<const std::size_t> t) const {
    return run_forward(*this, x, t).out;
}

Vector DenoiserModel::forward(const Vector& x, std::size_t t) const {
    Matrix xm(1, x.size());
    std::copy(x.begin(), x.end(), xm.data.begin());
    const std::size_t ts[1] = {t};
    Matrix out = forward_batch(xm, ts);
    return Vector(out.data.begin(), out.data.end());
}

Matrix DenoiserModel::param_jacobian(const Vector& x, std::size_t t) const {
    const auto& cfg = config;
    const std::size_t d = cfg.data_dim, h = cfg.hidden;
    Matrix xm(1, x.size());
    std::copy(x.begin(), x.end(), xm.data.begin());
    const std::size_t ts[1] = {t};
    const ForwardCache c = run_forward(*this, xm, ts);

    Matrix jac(d, param_count());
    auto scatter = [&](const std::string& name, const Matrix& d_z, std::span<const double> a_in) {
        // Per-output-row weight gradient outer(d_z_k, a_in) plus bias gradient d_z_k.
        const auto& e = params.entry(name + ".w");
        const auto& eb = params.entry(name + ".b");
        const std::size_t h_out = d_z.cols, h_in = a_in.size();
        for (std::size_t k = 0; k < d; ++k) {
            double* jw = jac.row_ptr(k) + e.offset;
            double* jb = jac.row_ptr(k) + eb.offset;
            for (std::size_t i = 0; i < h_out; ++i) {
                const double g = d_z(k, i);
                jb[i] += g;
                if (g != 0.0)
                    for (std::size_t j = 0; j < h_in; ++j) jw[i * h_in + j] += g * a_in[j];
            }
        }
    };

    // Cotangent block: identity over the d outputs.
    Matrix d_out = Matrix::identity(d);
    scatter("out", d_out, {c.final_hidden().row_ptr(0), h});
    const Matrix out_w = as_matrix(params.span_of("out.w"), d, h);
    Matrix d_h(d, h);
    gemm_acc(d_h, d_out, out_w, false, false, 1.0, 0.0);

    for (std::size_t b = cfg.n_blocks; b-- > 0;) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        const BlockCache& bc = c.blocks[b];
        const Matrix& d_z2 = d_h;
        scatter(prefix + "fc2", d_z2, {bc.s1.row_ptr(0), h});
        const Matrix fc2_w = as_matrix(params.span_of(prefix + "fc2.w"), h, h);
        Matrix d_z1(d, h);
        gemm_acc(d_z1, d_z2, fc2_w, false, false, 1.0, 0.0);
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t j = 0; j < h; ++j) d_z1(k, j) *= silu_prime(bc.z1(0, j));
        scatter(prefix + "fc1", d_z1, {bc.u.row_ptr(0), h});
        const Matrix fc1_w = as_matrix(params.span_of(prefix + "fc1.w"), h, h);
        Matrix d_u(d, h);
        gemm_acc(d_u, d_z1, fc1_w, false, false, 1.0, 0.0);
        Matrix d_f(d, 2 * h);
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t j = 0; j < h; ++j) {
                d_f(k, j) = d_u(k, j) * bc.h_in(0, j);
                d_f(k, h + j) = d_u(k, j);
            }
        scatter(prefix + "film", d_f, {c.te.row_ptr(0), cfg.time_embed_dim});
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t j = 0; j < h; ++j) d_h(k, j) += d_u(k, j) * bc.gamma(0, j);
    }

    scatter("in", d_h, {x.data(), x.size()});
    return jac;
}

Matrix DenoiserModel::param_jacobian_columns(const Vector& x, std::size_t t,
                                             const IndexSet& set) const {
    set.validate(param_count());
    const Matrix jac = param_jacobian(x, t);
    Matrix sub(jac.rows, set.size());
    for (std::size_t k = 0; k < jac.rows; ++k)
        for (std::size_t j = 0; j < set.size(); ++j) sub(k, j) = jac(k, set.indices[j]);
    return sub;
}

IndexSet DenoiserModel::last_layer_indices() const {
    const std::size_t start = params.entry("out.w").offset;
    IndexSet set;
    set.indices.resize(param_count() - start);
    for (std::size_t i = 0; i < set.indices.size(); ++i) set.indices[i] = start + i;
    return set;
}

LossGrad loss_and_grad(const DenoiserModel& model, const DiffusionSchedule& schedule,
                       const Batch& batch, bool log_snr_weight) {
    const std::size_t n = batch.x0.rows;
    if (n == 0) throw InvalidArgument("loss_and_grad: empty batch");
    if (batch.t.size() != n || batch.eps.rows != n || batch.eps.cols != batch.x0.cols)
        throw ShapeError("loss_and_grad: batch shapes inconsistent");
    const std::size_t d = batch.x0.cols;

    Matrix x_t(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        const double ab = schedule.bar_alpha[batch.t[r]];
        const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < d; ++j)
            x_t(r, j) = c0 * batch.x0(r, j) + c1 * batch.eps(r, j);
    }

    const ForwardCache cache = run_forward(model, x_t, batch.t);

    LossGrad lg;
    lg.grad.assign(model.param_count(), 0.0);
    Matrix d_out(n, d);
    const double dn = static_cast<double>(n) * static_cast<double>(d);
    for (std::size_t r = 0; r < n; ++r) {
        // sigmoid(log snr) = bar_alpha, so the log-SNR weight is bar_alpha itself.
        const double w = log_snr_weight ? schedule.bar_alpha[batch.t[r]] : 1.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double resid = cache.out(r, j) - batch.eps(r, j);
            lg.loss += w * resid * resid / dn;
            d_out(r, j) = 2.0 * w * resid / dn;
        }
    }
    run_backward_sum(model, cache, d_out, lg.grad);
    return lg;
}

}  // namespace flare
