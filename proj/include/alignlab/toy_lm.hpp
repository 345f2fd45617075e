#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "alignlab/core_mdp.hpp"
#include "alignlab/losses.hpp"
#include "alignlab/model.hpp"
#include "alignlab/types.hpp"

// Tiny synthetic sequence tasks for the decoder model. The interesting one
// is modular_chain: every target token is a fixed affine function of the
// previous token, so a single early mistake in free-running generation
// derails the whole continuation. That makes the task a clean probe for
// objectives that train under the model's own predictions.

namespace alignlab {

/// Reserved end-of-sequence token, appended to every target.
inline constexpr int kEosToken = 0;

enum class TaskKind { Copy, Reverse, ModularChain };

const char* task_name(TaskKind task);
TaskKind task_from_name(const std::string& name);

struct CorpusSpec {
  TaskKind task = TaskKind::ModularChain;
  int vocab_size = 12;  // token 0 is EOS; residue v maps to token v + 1
  // copy/reverse: prompt length is drawn uniformly from [min_len, max_len]
  int min_len = 3;
  int max_len = 5;
  // modular_chain: x -> (mult * x + add) mod modulus, chain_steps successors
  int modulus = 11;
  int mult = 2;
  int add = 1;
  int chain_steps = 9;
  int train_count = 7;
  int eval_count = 3;
  std::uint64_t seed = 7;
};

struct Corpus {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> eval;
};

/// The raw residue chain start, f(start), f(f(start)), ... (count values in
/// total), before the token shift.
std::vector<int> chain_values(int start, int count, int modulus, int mult,
                              int add);

/// Deterministic per seed; eval examples are disjoint from train (distinct
/// prompts; modular_chain additionally excludes fixed-point starts, whose
/// chains are constant). Throws std::invalid_argument("spec infeasible")
/// when the vocabulary or the example budget cannot support the task.
Corpus generate_corpus(const CorpusSpec& spec);

/// Line format: `prompt_tokens<TAB>target_tokens`, space-separated integers.
std::string dataset_to_tsv(const std::vector<TokenSequence>& dataset);
std::vector<TokenSequence> dataset_from_tsv(const std::string& text);

struct EvalResult {
  int epoch = 0;
  Scalar eval_loss = 0.0;   // mean per-token NLL over the eval set
  Scalar exact_match = 0.0; // greedy decode == target (EOS included)
  std::vector<Scalar> per_position_accuracy;  // teacher-forced argmax
};

extern const std::vector<std::string> kToyLmMethods;  // sft ift

struct ToyLmConfig {
  LossConfig loss;
  int epochs = 150;
  int batch = 4;
  Scalar lr = 5e-3;
  int embed_dim = 16;
  int hidden_dim = 32;
  int max_positions = 16;
  int eval_every = 25;
  std::uint64_t seed = 1;
};

/// Receives every per-example loss evaluation, in training order.
using ReportSink = std::function<void(int epoch, const LossReport&)>;

struct ToyLmResult {
  std::string method;
  std::uint64_t seed = 0;
  EvalResult final_eval;
  std::vector<EvalResult> snapshots;  // epoch 0, every eval_every, final
  std::vector<Scalar> loss_curve;     // mean training loss per epoch
};

/// Trains a fresh decoder on `corpus.train` with sft or ift and evaluates
/// on `corpus.eval`. The same seed gives both methods an identical initial
/// model and batch order. Throws std::runtime_error("non-finite loss at
/// epoch N (<method>)") if the objective diverges.
ToyLmResult train_toy_lm(const Corpus& corpus, const std::string& method,
                         const ToyLmConfig& cfg,
                         const ReportSink& sink = nullptr);

/// Greedy continuation of `prompt_tokens` until EOS or `max_len` new
/// tokens; action-for-action identical to a self-rollout trace.
TokenSequence greedy_decode(const PolicyModel& model,
                            const std::vector<int>& prompt_tokens,
                            int max_len);

/// Frozen-model evaluation of loss, exact match, and per-position accuracy.
EvalResult evaluate_model(const PolicyModel& model,
                          const std::vector<TokenSequence>& dataset,
                          int epoch);

}  // namespace alignlab
