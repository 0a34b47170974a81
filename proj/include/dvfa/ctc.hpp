#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dvfa/nn.hpp"

namespace dvfa::ctc {

// Negative log-likelihood over all blank-augmented paths (forward
// algorithm, log space); differentiable w.r.t. log_probs.
// log_probs: T x (V+1) log-distributions; blank is column `blank`.
ag::TensorPtr ctc_loss(const ag::TensorPtr& log_probs, const std::vector<int>& targets,
                       int blank);

// Most-probable monotonic token-to-frame assignment (Viterbi backtrace).
// Returns one inclusive frame span per target token.
std::vector<std::pair<int, int>> ctc_segment(const std::vector<real>& log_probs,
                                             std::int64_t n_frames, std::int64_t n_classes,
                                             const std::vector<int>& targets, int blank);

struct CtcConfig {
    std::int64_t d_in = 16;
    std::int64_t d_model = 64;
    std::int64_t n_heads = 4;
    std::int64_t conv_kernel = 7;
    std::int64_t ff_mult = 4;
    std::int64_t layers = 2;
    std::int64_t t_max = 512;
    std::int64_t vocab = 0;  // token inventory size, blank = vocab

    std::string to_json() const;
    static CtcConfig from_json(const std::string& text);
};

// Frame classifier over token inventory + blank; the alignment baseline.
class CtcModel {
  public:
    CtcConfig cfg;
    nn::ParamStore store;

    explicit CtcModel(CtcConfig config, std::uint64_t init_seed = 1);

    // T x (vocab+1) log-distributions.
    ag::TensorPtr log_probs(const std::vector<real>& features, std::int64_t n_frames) const;
    int blank() const { return static_cast<int>(cfg.vocab); }

  private:
    nn::Linear stem_;
    nn::PositionalModalityEmbedding pos_;
    std::vector<nn::ConformerLayer> stack_;
    nn::Linear head_;
};

}  // namespace dvfa::ctc
