#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wellbench/attention.hpp"
#include "wellbench/errors.hpp"
#include "wellbench/ingest.hpp"
#include "wellbench/rng.hpp"
#include "wellbench/schema.hpp"

namespace wellbench {

// Predicted probabilities are clamped into [kProbEps, 1 - kProbEps] before
// any logarithm; the reservation sum is clamped into (kProbEps, 1].
inline constexpr double kProbEps = 1e-7;

// Mean over labels of the per-label binary cross-entropy
//   -(y_i log p_i + (1 - y_i) log(1 - p_i)).
// Throws ShapeError on length mismatch, DomainError on values outside
// [0, 1] or empty vectors.
double sce_loss(const Eigen::VectorXd& y, const Eigen::VectorXd& probs);

// d sce / d probs at the clamped point (zero where the clamp is active).
Eigen::VectorXd sce_loss_grad(const Eigen::VectorXd& y,
                              const Eigen::VectorXd& probs);

// Gambler's objective: -sum_i y_i log(p_i + g) with the sum clamped into
// (0, 1]. Only positive labels contribute. Throws DomainError when g is
// outside [0, 1) or inputs leave [0, 1].
double gamblers_loss(const Eigen::VectorXd& y, const Eigen::VectorXd& probs,
                     double g);

// Analytic gradients w.r.t. probs and g (zero where the clamp is active).
void gamblers_loss_grad(const Eigen::VectorXd& y, const Eigen::VectorXd& probs,
                        double g, Eigen::VectorXd& grad_probs, double& grad_g);

struct EncodeResult {
    Eigen::VectorXd representation;
    AttentionRecord attention;
    bool truncated = false;
};

// Anything that maps text to a fixed-width vector plus an attention
// snapshot. Implementations must be deterministic for a fixed construction.
class EncoderAdapter {
  public:
    virtual ~EncoderAdapter() = default;
    virtual std::string identity() const = 0;
    virtual int dims() const = 0;
    virtual int max_length() const = 0;
    virtual EncodeResult encode(const std::string& text,
                                const std::string& sample_id) const = 0;
};

struct ReferenceEncoderConfig {
    int vocab_size = 4096;  // hashed vocabulary buckets (plus 2 specials)
    int dims = 32;
    int heads = 2;
    int layers = 2;
    int max_length = 64;    // content-token budget, specials excluded
    std::uint64_t init_seed = 1;
};

// Deterministic self-attention encoder: hashed whitespace tokens with
// character offsets, learned embeddings + positions, residual multi-head
// attention blocks, mean pooling over content rows. The exposed attention
// matrix is the head-mean of the final layer, so it stays row-stochastic.
class ReferenceEncoder : public EncoderAdapter {
  public:
    explicit ReferenceEncoder(const ReferenceEncoderConfig& config);

    // Identity string for a configuration, without building the encoder.
    static std::string identity_for(const ReferenceEncoderConfig& config);

    std::string identity() const override;
    int dims() const override { return cfg_.dims; }
    int max_length() const override { return cfg_.max_length; }
    EncodeResult encode(const std::string& text,
                        const std::string& sample_id) const override;

    const ReferenceEncoderConfig& config() const { return cfg_; }

    // Fine-tuning surface: gradient of a scalar loss w.r.t. the pooled
    // representation is pushed back through the full stack.
    struct Gradients {
        std::vector<std::pair<int, Eigen::VectorXd>> embedding_rows;
        Eigen::MatrixXd positions;
        std::vector<Eigen::MatrixXd> wq, wk, wv, wo;
    };
    Gradients backward(const std::string& text,
                       const Eigen::VectorXd& representation_grad) const;
    void apply_update(const Gradients& grads, double scale);

    // Flattened parameter access used by the trainer's Adam state and by
    // gradient checks.
    std::vector<Eigen::MatrixXd*> parameter_blocks();
    std::vector<const Eigen::MatrixXd*> parameter_blocks() const;

    struct TokenizedText {
        std::vector<TokenInfo> tokens;  // specials included
        std::vector<int> ids;
        bool truncated = false;
    };
    TokenizedText tokenize(const std::string& text) const;

  private:
    struct ForwardCache;
    void forward(const TokenizedText& toks, ForwardCache& cache) const;

    ReferenceEncoderConfig cfg_;
    Eigen::MatrixXd embeddings_;  // (vocab + specials) x dims
    Eigen::MatrixXd positions_;   // (max_length + specials) x dims
    std::vector<Eigen::MatrixXd> wq_, wk_, wv_, wo_;
};

struct HeadConfig {
    int input_dim = 0;
    int hidden_dim = 64;
    int label_count = 0;
    bool with_reservation = false;  // adds the abstention output g
    std::uint64_t init_seed = 1;
};

// Two-layer feed-forward scorer: tanh hidden layer, element-wise sigmoid
// outputs. With reservation enabled one extra sigmoid output g is produced;
// its bias starts low so early training cannot silence the loss by
// saturating g toward 1.
class ClassifierHead {
  public:
    ClassifierHead() = default;
    explicit ClassifierHead(const HeadConfig& config);

    struct Output {
        Eigen::VectorXd probs;
        std::optional<double> reservation;
    };
    Output forward(const Eigen::VectorXd& rep) const;

    const HeadConfig& config() const { return cfg_; }
    std::vector<Eigen::MatrixXd*> parameter_blocks();
    std::vector<const Eigen::MatrixXd*> parameter_blocks() const;

    // Gradient of a scalar loss w.r.t. all parameters, given the gradient
    // w.r.t. (probs, g). Returns the gradient w.r.t. the input rep so the
    // encoder can be fine-tuned through it.
    struct Backward {
        std::vector<Eigen::MatrixXd> params;
        Eigen::VectorXd input;
    };
    Backward backward(const Eigen::VectorXd& rep,
                      const Eigen::VectorXd& grad_probs,
                      double grad_reservation) const;

  private:
    HeadConfig cfg_;
    // Stored as single-column matrices where the block is a bias so the
    // optimizer can treat every block uniformly.
    Eigen::MatrixXd w1_, b1_, w2_, b2_;
};

enum class LossKind { sce, gamblers };

std::string loss_name(LossKind k);
LossKind loss_from_name(const std::string& name);

struct TrainConfig {
    LossKind loss = LossKind::sce;
    int epochs = 5;
    // Epochs of plain cross-entropy before the gambler's loss engages.
    // From a cold start the abstention output saturates before the
    // classifier separates (p + g hits the clamp and gradients vanish),
    // so the gambler's loss needs a brief warm start. Ignored under SCE.
    int warmup_epochs = 1;
    double learning_rate = 1e-5;
    int batch_size = 32;
    std::uint64_t seed = 200;
    bool fine_tune_encoder = false;
    int hidden_dim = 64;
};

struct TrainResult {
    std::vector<double> epoch_losses;  // mean loss per epoch
};

// Mini-batch Adam over the head (and optionally the encoder). Labels must
// match the schema arity. Identical inputs and seed reproduce identical
// parameters bit for bit. Throws ConfigError on invalid hyper-parameters,
// TrainingError (with epoch index) when the loss leaves the finite range.
TrainResult train(EncoderAdapter& adapter, ClassifierHead& head,
                  const std::vector<AnnotatedPost>& data,
                  const LabelSchema& schema, TaskKind task,
                  const TrainConfig& config);

struct PredictionRecord {
    std::string sample_id;
    TaskKind task_kind = TaskKind::multi_label;
    Eigen::VectorXd probs;
    std::optional<double> reservation;
    std::vector<int> predicted_labels;  // binary per label (multi-label)
    int predicted_class = -1;           // argmax (multi-class)
    bool truncated = false;
};

// predicted_* fields as a pure function of probs and task kind: multi-label
// thresholds at 0.5, multi-class takes the argmax (first index on ties).
void derive_predicted(PredictionRecord& rec);

struct Prediction {
    PredictionRecord record;
    AttentionRecord attention;
};

std::vector<Prediction> predict(const EncoderAdapter& adapter,
                                const ClassifierHead& head,
                                const std::vector<AnnotatedPost>& posts);

// Checkpoint serialization (JSON, versioned).
void save_head(const ClassifierHead& head, const std::string& path);
ClassifierHead load_head(const std::string& path);
void save_encoder(const ReferenceEncoder& enc, const std::string& path);
ReferenceEncoder load_encoder(const std::string& path);

}  // namespace wellbench
