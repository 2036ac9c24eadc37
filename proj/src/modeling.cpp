#include "wellbench/modeling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace wellbench {

using nlohmann::json;

namespace {

void check_unit_interval(const Eigen::VectorXd& v, const char* name) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (!(v(i) >= 0.0 && v(i) <= 1.0)) {
            throw DomainError(std::string(name) + " entries must lie in [0, 1]");
        }
    }
}

void check_loss_inputs(const Eigen::VectorXd& y, const Eigen::VectorXd& probs) {
    if (y.size() == 0) throw DomainError("loss inputs must be non-empty");
    if (y.size() != probs.size()) {
        throw ShapeError("label and probability vectors differ in length");
    }
    check_unit_interval(y, "labels");
    check_unit_interval(probs, "probabilities");
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty()) throw FormatError("matrix must be a 2-d array");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols) {
            throw FormatError("matrix rows differ in length");
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]
                          .get<double>();
        }
    }
    return m;
}

}  // namespace

double sce_loss(const Eigen::VectorXd& y, const Eigen::VectorXd& probs) {
    check_loss_inputs(y, probs);
    double total = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double p = std::clamp(probs(i), kProbEps, 1.0 - kProbEps);
        total += -(y(i) * std::log(p) + (1.0 - y(i)) * std::log(1.0 - p));
    }
    return total / static_cast<double>(y.size());
}

Eigen::VectorXd sce_loss_grad(const Eigen::VectorXd& y,
                              const Eigen::VectorXd& probs) {
    check_loss_inputs(y, probs);
    const double inv_k = 1.0 / static_cast<double>(y.size());
    Eigen::VectorXd grad(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (probs(i) < kProbEps || probs(i) > 1.0 - kProbEps) {
            grad(i) = 0.0;  // clamp active: flat in the raw probability
            continue;
        }
        grad(i) = inv_k * (-(y(i) / probs(i)) + (1.0 - y(i)) / (1.0 - probs(i)));
    }
    return grad;
}

double gamblers_loss(const Eigen::VectorXd& y, const Eigen::VectorXd& probs,
                     double g) {
    check_loss_inputs(y, probs);
    if (!(g >= 0.0 && g < 1.0)) {
        throw DomainError("reservation g must lie in [0, 1)");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y(i) == 0.0) continue;  // only positive labels contribute
        const double s = std::clamp(probs(i) + g, kProbEps, 1.0);
        total += -y(i) * std::log(s);
    }
    return total;
}

void gamblers_loss_grad(const Eigen::VectorXd& y, const Eigen::VectorXd& probs,
                        double g, Eigen::VectorXd& grad_probs, double& grad_g) {
    check_loss_inputs(y, probs);
    if (!(g >= 0.0 && g < 1.0)) {
        throw DomainError("reservation g must lie in [0, 1)");
    }
    grad_probs = Eigen::VectorXd::Zero(y.size());
    grad_g = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y(i) == 0.0) continue;
        const double s = probs(i) + g;
        if (s < kProbEps || s > 1.0) continue;  // clamp active
        const double d = -y(i) / s;
        grad_probs(i) = d;
        grad_g += d;
    }
}

std::string loss_name(LossKind k) {
    return k == LossKind::sce ? "SCE" : "GL";
}

LossKind loss_from_name(const std::string& name) {
    if (name == "SCE" || name == "sce") return LossKind::sce;
    if (name == "GL" || name == "gl") return LossKind::gamblers;
    throw ConfigError("unknown loss: " + name + " (expected SCE or GL)");
}

ClassifierHead::ClassifierHead(const HeadConfig& config) : cfg_(config) {
    if (cfg_.input_dim < 1) throw ConfigError("head input_dim must be >= 1");
    if (cfg_.hidden_dim < 1) throw ConfigError("head hidden_dim must be >= 1");
    if (cfg_.label_count < 1) throw ConfigError("head label_count must be >= 1");

    Rng rng(cfg_.init_seed);
    const int out = cfg_.label_count + (cfg_.with_reservation ? 1 : 0);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg_.input_dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
    w1_.resize(cfg_.hidden_dim, cfg_.input_dim);
    for (Eigen::Index r = 0; r < w1_.rows(); ++r) {
        for (Eigen::Index c = 0; c < w1_.cols(); ++c) {
            w1_(r, c) = rng.next_normal() * s1;
        }
    }
    b1_ = Eigen::MatrixXd::Zero(cfg_.hidden_dim, 1);
    w2_.resize(out, cfg_.hidden_dim);
    for (Eigen::Index r = 0; r < w2_.rows(); ++r) {
        for (Eigen::Index c = 0; c < w2_.cols(); ++c) {
            w2_(r, c) = rng.next_normal() * s2;
        }
    }
    b2_ = Eigen::MatrixXd::Zero(out, 1);
    if (cfg_.with_reservation) {
        // Start the abstention output low so the loss cannot be silenced by
        // saturating g toward 1 before the class outputs learn anything.
        b2_(cfg_.label_count, 0) = -2.0;
    }
}

ClassifierHead::Output ClassifierHead::forward(const Eigen::VectorXd& rep) const {
    if (rep.size() != cfg_.input_dim) {
        throw ShapeError("representation width does not match head input_dim");
    }
    const Eigen::VectorXd hidden = ((w1_ * rep) + b1_.col(0)).array().tanh();
    const Eigen::VectorXd z = (w2_ * hidden) + b2_.col(0);
    Output out;
    out.probs.resize(cfg_.label_count);
    for (int i = 0; i < cfg_.label_count; ++i) out.probs(i) = sigmoid(z(i));
    if (cfg_.with_reservation) out.reservation = sigmoid(z(cfg_.label_count));
    return out;
}

std::vector<Eigen::MatrixXd*> ClassifierHead::parameter_blocks() {
    return {&w1_, &b1_, &w2_, &b2_};
}

std::vector<const Eigen::MatrixXd*> ClassifierHead::parameter_blocks() const {
    return {&w1_, &b1_, &w2_, &b2_};
}

ClassifierHead::Backward ClassifierHead::backward(const Eigen::VectorXd& rep,
                                                  const Eigen::VectorXd& grad_probs,
                                                  double grad_reservation) const {
    if (rep.size() != cfg_.input_dim) {
        throw ShapeError("representation width does not match head input_dim");
    }
    if (grad_probs.size() != cfg_.label_count) {
        throw ShapeError("probability gradient width does not match label count");
    }
    const Eigen::VectorXd pre = (w1_ * rep) + b1_.col(0);
    const Eigen::VectorXd hidden = pre.array().tanh();
    const Eigen::VectorXd z = (w2_ * hidden) + b2_.col(0);
    const int out_dim = cfg_.label_count + (cfg_.with_reservation ? 1 : 0);

    Eigen::VectorXd dz(out_dim);
    for (int i = 0; i < cfg_.label_count; ++i) {
        const double p = sigmoid(z(i));
        dz(i) = grad_probs(i) * p * (1.0 - p);
    }
    if (cfg_.with_reservation) {
        const double g = sigmoid(z(cfg_.label_count));
        dz(cfg_.label_count) = grad_reservation * g * (1.0 - g);
    }

    Backward back;
    back.params.resize(4);
    back.params[2] = dz * hidden.transpose();                   // w2
    back.params[3] = dz;                                        // b2
    const Eigen::VectorXd dhidden = w2_.transpose() * dz;
    const Eigen::VectorXd dpre =
        dhidden.array() * (1.0 - hidden.array().square());
    back.params[0] = dpre * rep.transpose();                    // w1
    back.params[1] = dpre;                                      // b1
    back.input = w1_.transpose() * dpre;
    return back;
}

void derive_predicted(PredictionRecord& rec) {
    rec.predicted_labels.clear();
    rec.predicted_class = -1;
    if (rec.probs.size() == 0) throw ShapeError("prediction record has no probs");
    if (rec.task_kind == TaskKind::multi_label) {
        rec.predicted_labels.reserve(static_cast<std::size_t>(rec.probs.size()));
        for (Eigen::Index i = 0; i < rec.probs.size(); ++i) {
            rec.predicted_labels.push_back(rec.probs(i) >= 0.5 ? 1 : 0);
        }
    } else {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < rec.probs.size(); ++i) {
            if (rec.probs(i) > rec.probs(best)) best = i;  // first max wins ties
        }
        rec.predicted_class = static_cast<int>(best);
    }
}

namespace {

// One flat Adam state over an ordered list of parameter blocks.
class Adam {
  public:
    Adam(std::vector<Eigen::MatrixXd*> params, double lr)
        : params_(std::move(params)), lr_(lr) {
        for (Eigen::MatrixXd* p : params_) {
            m_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
            v_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
        }
    }

    void step(const std::vector<Eigen::MatrixXd>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(kBeta1, t_);
        const double bc2 = 1.0 - std::pow(kBeta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grads[i];
            v_[i] = kBeta2 * v_[i].array().matrix() +
                    (1.0 - kBeta2) * grads[i].array().square().matrix();
            const Eigen::ArrayXXd mhat = m_[i].array() / bc1;
            const Eigen::ArrayXXd vhat = v_[i].array() / bc2;
            params_[i]->array() -= lr_ * mhat / (vhat.sqrt() + kAdamEps);
        }
    }

  private:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kAdamEps = 1e-8;

    std::vector<Eigen::MatrixXd*> params_;
    std::vector<Eigen::MatrixXd> m_, v_;
    double lr_ = 0.0;
    int t_ = 0;
};

Eigen::VectorXd target_vector(const AnnotatedPost& post, const LabelSchema& schema,
                              TaskKind task) {
    const std::size_t k = schema.size();
    Eigen::VectorXd y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
    if (task == TaskKind::multi_label) {
        if (post.gold.task_kind != TaskKind::multi_label ||
            post.gold.values.size() != k) {
            throw ConfigError("post " + post.id +
                              ": labels do not match the schema arity");
        }
        for (std::size_t i = 0; i < k; ++i) y(static_cast<Eigen::Index>(i)) =
            static_cast<double>(post.gold.values[i]);
    } else {
        if (post.gold.task_kind != TaskKind::multi_class ||
            post.gold.class_index < 0 ||
            post.gold.class_index >= static_cast<int>(k)) {
            throw ConfigError("post " + post.id +
                              ": class index out of schema range");
        }
        y(post.gold.class_index) = 1.0;
    }
    return y;
}

}  // namespace

TrainResult train(EncoderAdapter& adapter, ClassifierHead& head,
                  const std::vector<AnnotatedPost>& data, const LabelSchema& schema,
                  TaskKind task, const TrainConfig& config) {
    if (config.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (config.warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (config.loss == LossKind::gamblers &&
        config.warmup_epochs >= config.epochs) {
        throw ConfigError("warmup_epochs must be < epochs for the gambler's loss");
    }
    if (!(config.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (config.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (data.empty()) throw ConfigError("training data is empty");
    schema.validate();
    if (head.config().label_count != static_cast<int>(schema.size())) {
        throw ConfigError("head label_count does not match schema size");
    }
    if (head.config().input_dim != adapter.dims()) {
        throw ConfigError("head input_dim does not match encoder dims");
    }
    const bool with_g = config.loss == LossKind::gamblers;
    if (head.config().with_reservation != with_g) {
        throw ConfigError("head reservation output does not match the loss kind");
    }

    ReferenceEncoder* tunable = nullptr;
    if (config.fine_tune_encoder) {
        tunable = dynamic_cast<ReferenceEncoder*>(&adapter);
        if (!tunable) {
            throw ConfigError("adapter '" + adapter.identity() +
                              "' does not support fine-tuning");
        }
    }

    const std::size_t n = data.size();
    std::vector<Eigen::VectorXd> targets;
    targets.reserve(n);
    for (const AnnotatedPost& p : data) {
        targets.push_back(target_vector(p, schema, task));
    }

    // Frozen encoder: representations never change, so encode once.
    std::vector<Eigen::VectorXd> frozen_reps;
    if (!tunable) {
        frozen_reps.reserve(n);
        for (const AnnotatedPost& p : data) {
            frozen_reps.push_back(adapter.encode(p.text, p.id).representation);
        }
    }

    std::vector<Eigen::MatrixXd*> param_ptrs = head.parameter_blocks();
    const std::size_t head_block_count = param_ptrs.size();
    if (tunable) {
        for (Eigen::MatrixXd* p : tunable->parameter_blocks()) {
            param_ptrs.push_back(p);
        }
    }
    Adam optimizer(param_ptrs, config.learning_rate);

    std::vector<Eigen::MatrixXd> grads(param_ptrs.size());
    auto zero_grads = [&] {
        for (std::size_t i = 0; i < param_ptrs.size(); ++i) {
            grads[i] = Eigen::MatrixXd::Zero(param_ptrs[i]->rows(),
                                             param_ptrs[i]->cols());
        }
    };

    Rng rng(config.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult result;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const bool use_gl = config.loss == LossKind::gamblers &&
                            epoch >= config.warmup_epochs;
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t batch_start = 0; batch_start < n;
             batch_start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t batch_end =
                std::min(n, batch_start + static_cast<std::size_t>(config.batch_size));
            const auto batch_n = static_cast<double>(batch_end - batch_start);
            zero_grads();

            for (std::size_t b = batch_start; b < batch_end; ++b) {
                const std::size_t idx = order[b];
                const Eigen::VectorXd rep =
                    tunable ? adapter.encode(data[idx].text, data[idx].id)
                                  .representation
                            : frozen_reps[idx];
                const ClassifierHead::Output out = head.forward(rep);

                double loss = 0.0;
                Eigen::VectorXd grad_probs;
                double grad_g = 0.0;
                if (use_gl) {
                    loss = gamblers_loss(targets[idx], out.probs, *out.reservation);
                    gamblers_loss_grad(targets[idx], out.probs, *out.reservation,
                                       grad_probs, grad_g);
                } else {
                    loss = sce_loss(targets[idx], out.probs);
                    grad_probs = sce_loss_grad(targets[idx], out.probs);
                }
                if (!std::isfinite(loss)) {
                    throw TrainingError("epoch " + std::to_string(epoch + 1) +
                                        ": loss became non-finite");
                }
                epoch_loss += loss;

                const ClassifierHead::Backward back =
                    head.backward(rep, grad_probs / batch_n, grad_g / batch_n);
                for (std::size_t i = 0; i < head_block_count; ++i) {
                    grads[i] += back.params[i];
                }
                if (tunable) {
                    const ReferenceEncoder::Gradients eg =
                        tunable->backward(data[idx].text, back.input);
                    Eigen::MatrixXd& demb = grads[head_block_count];
                    for (const auto& [row, gvec] : eg.embedding_rows) {
                        demb.row(row) += gvec.transpose();
                    }
                    grads[head_block_count + 1] += eg.positions;
                    const int layers = tunable->config().layers;
                    for (int l = 0; l < layers; ++l) {
                        const std::size_t base =
                            head_block_count + 2 + 4 * static_cast<std::size_t>(l);
                        grads[base + 0] += eg.wq[static_cast<std::size_t>(l)];
                        grads[base + 1] += eg.wk[static_cast<std::size_t>(l)];
                        grads[base + 2] += eg.wv[static_cast<std::size_t>(l)];
                        grads[base + 3] += eg.wo[static_cast<std::size_t>(l)];
                    }
                }
            }
            optimizer.step(grads);
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
    }
    return result;
}

std::vector<Prediction> predict(const EncoderAdapter& adapter,
                                const ClassifierHead& head,
                                const std::vector<AnnotatedPost>& posts) {
    std::vector<Prediction> out;
    out.reserve(posts.size());
    for (const AnnotatedPost& p : posts) {
        EncodeResult enc = adapter.encode(p.text, p.id);
        const ClassifierHead::Output scores = head.forward(enc.representation);
        Prediction pred;
        pred.record.sample_id = p.id;
        pred.record.task_kind = p.gold.task_kind;
        pred.record.probs = scores.probs;
        pred.record.reservation = scores.reservation;
        pred.record.truncated = enc.truncated;
        derive_predicted(pred.record);
        pred.attention = std::move(enc.attention);
        out.push_back(std::move(pred));
    }
    return out;
}

namespace {

json head_config_to_json(const HeadConfig& c) {
    return json{{"input_dim", c.input_dim},
                {"hidden_dim", c.hidden_dim},
                {"label_count", c.label_count},
                {"with_reservation", c.with_reservation},
                {"init_seed", c.init_seed}};
}

HeadConfig head_config_from_json(const json& j) {
    HeadConfig c;
    c.input_dim = j.at("input_dim").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.label_count = j.at("label_count").get<int>();
    c.with_reservation = j.at("with_reservation").get<bool>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

json load_checkpoint_json(const std::string& path, const std::string& kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": bad checkpoint: " + e.what());
    }
    if (j.value("format", "") != kind || j.value("version", 0) != 1) {
        throw FormatError(path + ": not a version-1 " + kind + " document");
    }
    return j;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot open for writing: " + path);
    out << j.dump() << "\n";
    if (!out) throw RuntimeError("write failed: " + path);
}

}  // namespace

void save_head(const ClassifierHead& head, const std::string& path) {
    json j;
    j["format"] = "head-checkpoint";
    j["version"] = 1;
    j["config"] = head_config_to_json(head.config());
    const auto blocks = head.parameter_blocks();
    const char* names[] = {"w1", "b1", "w2", "b2"};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        j[names[i]] = matrix_to_json(*blocks[i]);
    }
    write_json_file(j, path);
}

ClassifierHead load_head(const std::string& path) {
    const json j = load_checkpoint_json(path, "head-checkpoint");
    ClassifierHead head(head_config_from_json(j.at("config")));
    const auto blocks = head.parameter_blocks();
    const char* names[] = {"w1", "b1", "w2", "b2"};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        Eigen::MatrixXd m = matrix_from_json(j.at(names[i]));
        if (m.rows() != blocks[i]->rows() || m.cols() != blocks[i]->cols()) {
            throw FormatError(path + ": parameter block '" + names[i] +
                              "' has the wrong shape");
        }
        *blocks[i] = std::move(m);
    }
    return head;
}

void save_encoder(const ReferenceEncoder& enc, const std::string& path) {
    const ReferenceEncoderConfig& c = enc.config();
    json j;
    j["format"] = "encoder-checkpoint";
    j["version"] = 1;
    j["config"] = json{{"vocab_size", c.vocab_size}, {"dims", c.dims},
                       {"heads", c.heads},           {"layers", c.layers},
                       {"max_length", c.max_length}, {"init_seed", c.init_seed}};
    json blocks = json::array();
    for (const Eigen::MatrixXd* b : enc.parameter_blocks()) {
        blocks.push_back(matrix_to_json(*b));
    }
    j["blocks"] = std::move(blocks);
    write_json_file(j, path);
}

ReferenceEncoder load_encoder(const std::string& path) {
    const json j = load_checkpoint_json(path, "encoder-checkpoint");
    const json& cj = j.at("config");
    ReferenceEncoderConfig c;
    c.vocab_size = cj.at("vocab_size").get<int>();
    c.dims = cj.at("dims").get<int>();
    c.heads = cj.at("heads").get<int>();
    c.layers = cj.at("layers").get<int>();
    c.max_length = cj.at("max_length").get<int>();
    c.init_seed = cj.at("init_seed").get<std::uint64_t>();

    ReferenceEncoder enc(c);
    const auto blocks = enc.parameter_blocks();
    const json& bj = j.at("blocks");
    if (bj.size() != blocks.size()) {
        throw FormatError(path + ": unexpected parameter block count");
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        Eigen::MatrixXd m = matrix_from_json(bj[i]);
        if (m.rows() != blocks[i]->rows() || m.cols() != blocks[i]->cols()) {
            throw FormatError(path + ": parameter block " + std::to_string(i) +
                              " has the wrong shape");
        }
        *blocks[i] = std::move(m);
    }
    return enc;
}

}  // namespace wellbench
