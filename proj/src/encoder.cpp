#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "wellbench/modeling.hpp"

namespace wellbench {

namespace {

constexpr int kSpecialTokens = 2;  // sequence-start and sequence-end markers
constexpr int kBosId = 0;
constexpr int kEosId = 1;

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Eigen::MatrixXd normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                              double scale) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = rng.next_normal() * scale;
        }
    }
    return m;
}

// Numerically stable row-wise softmax.
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& scores) {
    Eigen::MatrixXd out(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double mx = scores.row(r).maxCoeff();
        Eigen::ArrayXd e = (scores.row(r).array() - mx).exp();
        out.row(r) = (e / e.sum()).matrix();
    }
    return out;
}

}  // namespace

struct ReferenceEncoder::ForwardCache {
    std::vector<Eigen::MatrixXd> layer_inputs;          // X entering each layer
    std::vector<Eigen::MatrixXd> q, k, v;               // full-width projections
    std::vector<std::vector<Eigen::MatrixXd>> attn;     // per layer, per head
    std::vector<Eigen::MatrixXd> concat;                // per layer: heads side by side
    Eigen::MatrixXd final_x;
};

ReferenceEncoder::ReferenceEncoder(const ReferenceEncoderConfig& config)
    : cfg_(config) {
    if (cfg_.vocab_size < 1) throw ConfigError("encoder vocab_size must be >= 1");
    if (cfg_.dims < 1) throw ConfigError("encoder dims must be >= 1");
    if (cfg_.heads < 1) throw ConfigError("encoder heads must be >= 1");
    if (cfg_.dims % cfg_.heads != 0) {
        throw ConfigError("encoder dims must be divisible by heads");
    }
    if (cfg_.layers < 1) throw ConfigError("encoder layers must be >= 1");
    if (cfg_.max_length < 1) throw ConfigError("encoder max_length must be >= 1");

    Rng rng(cfg_.init_seed);
    embeddings_ = normal_matrix(rng, cfg_.vocab_size + kSpecialTokens, cfg_.dims, 0.02);
    positions_ = normal_matrix(rng, cfg_.max_length + kSpecialTokens, cfg_.dims, 0.02);
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.dims));
    for (int l = 0; l < cfg_.layers; ++l) {
        wq_.push_back(normal_matrix(rng, cfg_.dims, cfg_.dims, w_scale));
        wk_.push_back(normal_matrix(rng, cfg_.dims, cfg_.dims, w_scale));
        wv_.push_back(normal_matrix(rng, cfg_.dims, cfg_.dims, w_scale));
        wo_.push_back(normal_matrix(rng, cfg_.dims, cfg_.dims, w_scale));
    }
}

std::string ReferenceEncoder::identity_for(const ReferenceEncoderConfig& cfg) {
    return "ref-encoder/v1/d" + std::to_string(cfg.dims) + "h" +
           std::to_string(cfg.heads) + "l" + std::to_string(cfg.layers) +
           "/seed" + std::to_string(cfg.init_seed);
}

std::string ReferenceEncoder::identity() const { return identity_for(cfg_); }

ReferenceEncoder::TokenizedText ReferenceEncoder::tokenize(
    const std::string& text) const {
    TokenizedText out;
    out.tokens.push_back({"<s>", 0, 0, true});
    out.ids.push_back(kBosId);

    std::size_t i = 0;
    int content = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (i >= text.size()) break;
        const std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        if (content >= cfg_.max_length) {
            out.truncated = true;
            break;
        }
        std::string word = text.substr(start, i - start);
        std::string folded = word;
        for (char& c : folded) {
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
        const int id = kSpecialTokens +
                       static_cast<int>(fnv1a64(folded) %
                                        static_cast<std::uint64_t>(cfg_.vocab_size));
        out.tokens.push_back({std::move(word), start, i, false});
        out.ids.push_back(id);
        ++content;
    }

    out.tokens.push_back({"</s>", text.size(), text.size(), true});
    out.ids.push_back(kEosId);
    return out;
}

void ReferenceEncoder::forward(const TokenizedText& toks, ForwardCache& cache) const {
    const auto n = static_cast<Eigen::Index>(toks.tokens.size());
    const int d = cfg_.dims;
    const int dh = d / cfg_.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = embeddings_.row(toks.ids[static_cast<std::size_t>(i)]) +
                   positions_.row(i);
    }

    cache.layer_inputs.clear();
    cache.q.clear();
    cache.k.clear();
    cache.v.clear();
    cache.attn.clear();
    cache.concat.clear();
    for (int l = 0; l < cfg_.layers; ++l) {
        cache.layer_inputs.push_back(x);
        Eigen::MatrixXd q = x * wq_[static_cast<std::size_t>(l)];
        Eigen::MatrixXd k = x * wk_[static_cast<std::size_t>(l)];
        Eigen::MatrixXd v = x * wv_[static_cast<std::size_t>(l)];

        Eigen::MatrixXd concat(n, d);
        std::vector<Eigen::MatrixXd> heads;
        heads.reserve(static_cast<std::size_t>(cfg_.heads));
        for (int h = 0; h < cfg_.heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * dh;
            const Eigen::MatrixXd scores =
                q.middleCols(off, dh) * k.middleCols(off, dh).transpose() *
                inv_sqrt_dh;
            Eigen::MatrixXd a = softmax_rows(scores);
            concat.middleCols(off, dh) = a * v.middleCols(off, dh);
            heads.push_back(std::move(a));
        }
        x = x + concat * wo_[static_cast<std::size_t>(l)];

        cache.q.push_back(std::move(q));
        cache.k.push_back(std::move(k));
        cache.v.push_back(std::move(v));
        cache.attn.push_back(std::move(heads));
        cache.concat.push_back(std::move(concat));
    }
    cache.final_x = std::move(x);
}

EncodeResult ReferenceEncoder::encode(const std::string& text,
                                      const std::string& sample_id) const {
    const TokenizedText toks = tokenize(text);
    ForwardCache cache;
    forward(toks, cache);

    const auto n = cache.final_x.rows();
    const Eigen::Index content = n - kSpecialTokens;

    EncodeResult out;
    // Mean over content rows; a post with no content tokens falls back to
    // the special rows so the representation stays defined.
    if (content > 0) {
        out.representation =
            cache.final_x.middleRows(1, content).colwise().mean().transpose();
    } else {
        out.representation = cache.final_x.colwise().mean().transpose();
    }

    // Head-mean of the final layer: a convex combination of row-stochastic
    // matrices, so itself row-stochastic.
    const auto& heads = cache.attn.back();
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(n, n);
    for (const Eigen::MatrixXd& a : heads) mean += a;
    mean /= static_cast<double>(heads.size());

    out.attention.sample_id = sample_id;
    out.attention.tokens = toks.tokens;
    out.attention.matrix = std::move(mean);
    out.attention.provenance = identity() + "/layer" +
                               std::to_string(cfg_.layers - 1) + "/head-mean";
    out.truncated = toks.truncated;
    return out;
}

ReferenceEncoder::Gradients ReferenceEncoder::backward(
    const std::string& text, const Eigen::VectorXd& representation_grad) const {
    if (representation_grad.size() != cfg_.dims) {
        throw ShapeError("representation gradient width does not match encoder dims");
    }
    const TokenizedText toks = tokenize(text);
    ForwardCache cache;
    forward(toks, cache);

    const auto n = cache.final_x.rows();
    const Eigen::Index content = n - kSpecialTokens;
    const int d = cfg_.dims;
    const int dh = d / cfg_.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Gradients grads;
    grads.positions = Eigen::MatrixXd::Zero(positions_.rows(), positions_.cols());
    grads.wq.assign(static_cast<std::size_t>(cfg_.layers),
                    Eigen::MatrixXd::Zero(d, d));
    grads.wk = grads.wq;
    grads.wv = grads.wq;
    grads.wo = grads.wq;

    // Mean pooling spreads the gradient uniformly over the pooled rows.
    Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(n, d);
    if (content > 0) {
        const Eigen::RowVectorXd per_row =
            representation_grad.transpose() / static_cast<double>(content);
        for (Eigen::Index i = 1; i <= content; ++i) dx.row(i) = per_row;
    } else {
        const Eigen::RowVectorXd per_row =
            representation_grad.transpose() / static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) dx.row(i) = per_row;
    }

    for (int l = cfg_.layers - 1; l >= 0; --l) {
        const auto lu = static_cast<std::size_t>(l);
        const Eigen::MatrixXd& x_in = cache.layer_inputs[lu];
        const Eigen::MatrixXd& q = cache.q[lu];
        const Eigen::MatrixXd& k = cache.k[lu];
        const Eigen::MatrixXd& v = cache.v[lu];
        const Eigen::MatrixXd& concat = cache.concat[lu];

        // x_out = x_in + concat * Wo
        grads.wo[lu] += concat.transpose() * dx;
        const Eigen::MatrixXd dconcat = dx * wo_[lu].transpose();
        Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(n, d);
        Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(n, d);
        Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(n, d);

        for (int h = 0; h < cfg_.heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * dh;
            const Eigen::MatrixXd& a = cache.attn[lu][static_cast<std::size_t>(h)];
            const Eigen::MatrixXd dhead = dconcat.middleCols(off, dh);
            const Eigen::MatrixXd da = dhead * v.middleCols(off, dh).transpose();
            dv.middleCols(off, dh) = a.transpose() * dhead;

            // Row-wise softmax backward: ds = a .* (da - rowdot(da, a)).
            Eigen::MatrixXd ds(n, n);
            for (Eigen::Index r = 0; r < n; ++r) {
                const double dot = da.row(r).dot(a.row(r));
                ds.row(r) =
                    a.row(r).cwiseProduct((da.row(r).array() - dot).matrix());
            }
            ds *= inv_sqrt_dh;
            dq.middleCols(off, dh) = ds * k.middleCols(off, dh);
            dk.middleCols(off, dh) = ds.transpose() * q.middleCols(off, dh);
        }

        grads.wq[lu] += x_in.transpose() * dq;
        grads.wk[lu] += x_in.transpose() * dk;
        grads.wv[lu] += x_in.transpose() * dv;
        dx += dq * wq_[lu].transpose() + dk * wk_[lu].transpose() +
              dv * wv_[lu].transpose();
    }

    grads.embedding_rows.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        grads.embedding_rows.emplace_back(toks.ids[static_cast<std::size_t>(i)],
                                          dx.row(i).transpose());
        grads.positions.row(i) += dx.row(i);
    }
    return grads;
}

void ReferenceEncoder::apply_update(const Gradients& grads, double scale) {
    for (const auto& [row, g] : grads.embedding_rows) {
        embeddings_.row(row) += scale * g.transpose();
    }
    positions_ += scale * grads.positions;
    for (int l = 0; l < cfg_.layers; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        wq_[lu] += scale * grads.wq[lu];
        wk_[lu] += scale * grads.wk[lu];
        wv_[lu] += scale * grads.wv[lu];
        wo_[lu] += scale * grads.wo[lu];
    }
}

std::vector<Eigen::MatrixXd*> ReferenceEncoder::parameter_blocks() {
    std::vector<Eigen::MatrixXd*> blocks = {&embeddings_, &positions_};
    for (int l = 0; l < cfg_.layers; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        blocks.push_back(&wq_[lu]);
        blocks.push_back(&wk_[lu]);
        blocks.push_back(&wv_[lu]);
        blocks.push_back(&wo_[lu]);
    }
    return blocks;
}

std::vector<const Eigen::MatrixXd*> ReferenceEncoder::parameter_blocks() const {
    std::vector<const Eigen::MatrixXd*> blocks = {&embeddings_, &positions_};
    for (int l = 0; l < cfg_.layers; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        blocks.push_back(&wq_[lu]);
        blocks.push_back(&wk_[lu]);
        blocks.push_back(&wv_[lu]);
        blocks.push_back(&wo_[lu]);
    }
    return blocks;
}

}  // namespace wellbench
