#include "dvfa/ctc.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace dvfa::ctc {

using namespace dvfa::ag;

namespace {

constexpr real kNegInf = -std::numeric_limits<real>::infinity();

real log_add(real a, real b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const real m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

std::vector<int> augment(const std::vector<int>& targets, int blank) {
    std::vector<int> ext;
    ext.reserve(targets.size() * 2 + 1);
    ext.push_back(blank);
    for (int t : targets) {
        ext.push_back(t);
        ext.push_back(blank);
    }
    return ext;
}

void check_feasible(std::int64_t t, std::int64_t n, const std::vector<int>& targets, int blank) {
    if (blank < 0 || blank >= n) throw ShapeError("ctc: blank index outside class range");
    if (targets.empty()) throw DataError("ctc: empty target sequence");
    for (int c : targets)
        if (c < 0 || c >= n || c == blank)
            throw DataError("ctc: target token " + std::to_string(c) + " invalid");
    std::int64_t min_frames = static_cast<std::int64_t>(targets.size());
    for (std::size_t i = 1; i < targets.size(); ++i)
        if (targets[i] == targets[i - 1]) ++min_frames;  // a blank must separate repeats
    if (t < min_frames)
        throw DataError("ctc: target needs at least " + std::to_string(min_frames) +
                        " frames, got " + std::to_string(t));
}

}  // namespace

TensorPtr ctc_loss(const TensorPtr& log_probs, const std::vector<int>& targets, int blank) {
    const std::int64_t t_len = log_probs->rows(), n = log_probs->cols();
    check_feasible(t_len, n, targets, blank);
    const auto ext = augment(targets, blank);
    const std::int64_t L = static_cast<std::int64_t>(ext.size());
    auto y = [&](std::int64_t t, std::int64_t s) {
        return log_probs->val[static_cast<std::size_t>(t * n + ext[static_cast<std::size_t>(s)])];
    };
    auto can_skip = [&](std::int64_t s) {
        return s >= 2 && ext[static_cast<std::size_t>(s)] != blank &&
               ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)];
    };

    std::vector<real> alpha(static_cast<std::size_t>(t_len * L), kNegInf);
    alpha[0] = y(0, 0);
    if (L > 1) alpha[1] = y(0, 1);
    for (std::int64_t t = 1; t < t_len; ++t)
        for (std::int64_t s = 0; s < L; ++s) {
            real a = alpha[static_cast<std::size_t>((t - 1) * L + s)];
            if (s >= 1) a = log_add(a, alpha[static_cast<std::size_t>((t - 1) * L + s - 1)]);
            if (can_skip(s)) a = log_add(a, alpha[static_cast<std::size_t>((t - 1) * L + s - 2)]);
            alpha[static_cast<std::size_t>(t * L + s)] = a == kNegInf ? kNegInf : a + y(t, s);
        }
    real log_p = alpha[static_cast<std::size_t>((t_len - 1) * L + L - 1)];
    if (L > 1)
        log_p = log_add(log_p, alpha[static_cast<std::size_t>((t_len - 1) * L + L - 2)]);
    if (log_p == kNegInf) throw DataError("ctc: no feasible path");

    const real loss = -log_p;
    return make_op({1}, {loss}, {log_probs},
                       [log_probs, blank, ext, alpha, log_p, t_len, n, L](Node& self) {
        if (!log_probs->requires_grad) return;
        log_probs->ensure_grad();
        auto y = [&](std::int64_t t, std::int64_t s) {
            return log_probs
                ->val[static_cast<std::size_t>(t * n + ext[static_cast<std::size_t>(s)])];
        };
        auto can_skip = [&](std::int64_t s) {
            return s >= 2 && ext[static_cast<std::size_t>(s)] != blank &&
                   ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)];
        };
        // beta includes the emission at its own frame.
        std::vector<real> beta(static_cast<std::size_t>(t_len * L), kNegInf);
        beta[static_cast<std::size_t>((t_len - 1) * L + L - 1)] = y(t_len - 1, L - 1);
        if (L > 1) beta[static_cast<std::size_t>((t_len - 1) * L + L - 2)] = y(t_len - 1, L - 2);
        for (std::int64_t t = t_len - 2; t >= 0; --t)
            for (std::int64_t s = L - 1; s >= 0; --s) {
                real b = beta[static_cast<std::size_t>((t + 1) * L + s)];
                if (s + 1 < L) b = log_add(b, beta[static_cast<std::size_t>((t + 1) * L + s + 1)]);
                if (s + 2 < L && can_skip(s + 2))
                    b = log_add(b, beta[static_cast<std::size_t>((t + 1) * L + s + 2)]);
                beta[static_cast<std::size_t>(t * L + s)] = b == kNegInf ? kNegInf : b + y(t, s);
            }
        for (std::int64_t t = 0; t < t_len; ++t) {
            std::vector<real> acc(static_cast<std::size_t>(n), kNegInf);
            for (std::int64_t s = 0; s < L; ++s) {
                const real a = alpha[static_cast<std::size_t>(t * L + s)];
                const real b = beta[static_cast<std::size_t>(t * L + s)];
                if (a == kNegInf || b == kNegInf) continue;
                const int k = ext[static_cast<std::size_t>(s)];
                acc[static_cast<std::size_t>(k)] =
                    log_add(acc[static_cast<std::size_t>(k)], a + b - y(t, s));
            }
            for (std::int64_t k = 0; k < n; ++k) {
                if (acc[static_cast<std::size_t>(k)] == kNegInf) continue;
                log_probs->grad[static_cast<std::size_t>(t * n + k)] +=
                    self.grad[0] * (-std::exp(acc[static_cast<std::size_t>(k)] - log_p));
            }
        }
    });
}

std::vector<std::pair<int, int>> ctc_segment(const std::vector<real>& log_probs,
                                             std::int64_t n_frames, std::int64_t n_classes,
                                             const std::vector<int>& targets, int blank) {
    check_feasible(n_frames, n_classes, targets, blank);
    const auto ext = augment(targets, blank);
    const std::int64_t L = static_cast<std::int64_t>(ext.size());
    auto y = [&](std::int64_t t, std::int64_t s) {
        return log_probs[static_cast<std::size_t>(t * n_classes +
                                                  ext[static_cast<std::size_t>(s)])];
    };
    auto can_skip = [&](std::int64_t s) {
        return s >= 2 && ext[static_cast<std::size_t>(s)] != blank &&
               ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)];
    };
    std::vector<real> v(static_cast<std::size_t>(n_frames * L), kNegInf);
    std::vector<std::int8_t> back(static_cast<std::size_t>(n_frames * L), 0);
    v[0] = y(0, 0);
    if (L > 1) v[1] = y(0, 1);
    for (std::int64_t t = 1; t < n_frames; ++t)
        for (std::int64_t s = 0; s < L; ++s) {
            real best = v[static_cast<std::size_t>((t - 1) * L + s)];
            std::int8_t arg = 0;
            if (s >= 1 && v[static_cast<std::size_t>((t - 1) * L + s - 1)] > best) {
                best = v[static_cast<std::size_t>((t - 1) * L + s - 1)];
                arg = 1;
            }
            if (can_skip(s) && v[static_cast<std::size_t>((t - 1) * L + s - 2)] > best) {
                best = v[static_cast<std::size_t>((t - 1) * L + s - 2)];
                arg = 2;
            }
            v[static_cast<std::size_t>(t * L + s)] = best == kNegInf ? kNegInf : best + y(t, s);
            back[static_cast<std::size_t>(t * L + s)] = arg;
        }
    std::int64_t s = L - 1;
    if (L > 1 && v[static_cast<std::size_t>((n_frames - 1) * L + L - 2)] >
                     v[static_cast<std::size_t>((n_frames - 1) * L + L - 1)])
        s = L - 2;
    if (v[static_cast<std::size_t>((n_frames - 1) * L + s)] == kNegInf)
        throw DataError("ctc_segment: no feasible path");
    std::vector<std::int64_t> state(static_cast<std::size_t>(n_frames));
    for (std::int64_t t = n_frames - 1; t >= 0; --t) {
        state[static_cast<std::size_t>(t)] = s;
        if (t > 0) s -= back[static_cast<std::size_t>(t * L + s)];
    }
    std::vector<std::pair<int, int>> spans(targets.size(), {-1, -1});
    for (std::int64_t t = 0; t < n_frames; ++t) {
        const std::int64_t st = state[static_cast<std::size_t>(t)];
        if (st % 2 == 0) continue;  // blank
        auto& span = spans[static_cast<std::size_t>((st - 1) / 2)];
        if (span.first < 0) span.first = static_cast<int>(t);
        span.second = static_cast<int>(t);
    }
    return spans;
}

std::string CtcConfig::to_json() const {
    nlohmann::json j;
    j["d_in"] = d_in;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["conv_kernel"] = conv_kernel;
    j["ff_mult"] = ff_mult;
    j["layers"] = layers;
    j["t_max"] = t_max;
    j["vocab"] = vocab;
    return j.dump();
}

CtcConfig CtcConfig::from_json(const std::string& text) {
    try {
        auto j = nlohmann::json::parse(text);
        CtcConfig c;
        c.d_in = j.at("d_in").get<std::int64_t>();
        c.d_model = j.at("d_model").get<std::int64_t>();
        c.n_heads = j.at("n_heads").get<std::int64_t>();
        c.conv_kernel = j.at("conv_kernel").get<std::int64_t>();
        c.ff_mult = j.at("ff_mult").get<std::int64_t>();
        c.layers = j.at("layers").get<std::int64_t>();
        c.t_max = j.at("t_max").get<std::int64_t>();
        c.vocab = j.at("vocab").get<std::int64_t>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("ctc config: ") + e.what());
    }
}

CtcModel::CtcModel(CtcConfig config, std::uint64_t init_seed) : cfg(config) {
    if (cfg.vocab < 1) throw ModelError("ctc model: vocab not set");
    Rng rng = make_rng(init_seed);
    nn::BlockConfig block;
    block.d_model = cfg.d_model;
    block.n_heads = cfg.n_heads;
    block.conv_kernel = cfg.conv_kernel;
    block.ff_mult = cfg.ff_mult;
    stem_.build(store, "stem", cfg.d_in, cfg.d_model, rng);
    pos_.build(store, "pos", cfg.t_max, 1, cfg.d_model, rng);
    stack_.resize(static_cast<std::size_t>(cfg.layers));
    for (std::size_t i = 0; i < stack_.size(); ++i)
        stack_[i].build(store, "conformer" + std::to_string(i), block, rng);
    head_.build(store, "head", cfg.d_model, cfg.vocab + 1, rng);
}

TensorPtr CtcModel::log_probs(const std::vector<real>& features, std::int64_t n_frames) const {
    if (n_frames < 1) throw ShapeError("ctc model: no frames");
    if (n_frames > cfg.t_max) throw DataError("ctc model: frame count exceeds t_max");
    if (static_cast<std::int64_t>(features.size()) != n_frames * cfg.d_in)
        throw DataError("ctc model: feature dim mismatch");
    auto x = constant({n_frames, cfg.d_in}, features);
    auto h = add(stem_(x), pos_(n_frames, nn::Modality::Visual));
    auto mask = nn::AttentionMask::full(n_frames, n_frames);
    for (const auto& layer : stack_) h = layer(h, n_frames, mask);
    return log_softmax(head_(h));
}

}  // namespace dvfa::ctc
