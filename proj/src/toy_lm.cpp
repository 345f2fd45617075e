#include "alignlab/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "alignlab/math.hpp"

namespace alignlab {

const std::vector<std::string> kToyLmMethods = {"sft", "ift"};

const char* task_name(TaskKind task) {
  switch (task) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::ModularChain: return "modular_chain";
  }
  throw std::logic_error("unreachable");
}

TaskKind task_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "reverse") return TaskKind::Reverse;
  if (name == "modular_chain") return TaskKind::ModularChain;
  throw std::invalid_argument("unknown task: " + name);
}

std::vector<int> chain_values(int start, int count, int modulus, int mult,
                              int add) {
  std::vector<int> values;
  values.reserve(static_cast<std::size_t>(count));
  int x = start % modulus;
  for (int i = 0; i < count; ++i) {
    values.push_back(x);
    x = (mult * x + add) % modulus;
  }
  return values;
}

namespace {

TokenSequence make_example(std::vector<int> prompt, std::vector<int> target) {
  TokenSequence seq;
  seq.prompt_len = static_cast<int>(prompt.size());
  seq.tokens = std::move(prompt);
  seq.tokens.insert(seq.tokens.end(), target.begin(), target.end());
  seq.tokens.push_back(kEosToken);
  return seq;
}

Corpus chain_corpus(const CorpusSpec& spec) {
  if (spec.modulus < 2 || spec.mult < 0 || spec.add < 0 ||
      spec.chain_steps < 1 || spec.vocab_size < spec.modulus + 1) {
    throw std::invalid_argument("spec infeasible");
  }
  // A fixed-point start yields a constant chain; those teach nothing about
  // the recurrence and are kept out of both splits.
  std::vector<int> starts;
  for (int x = 0; x < spec.modulus; ++x) {
    if ((spec.mult * x + spec.add) % spec.modulus != x) starts.push_back(x);
  }
  if (static_cast<int>(starts.size()) < spec.train_count + spec.eval_count) {
    throw std::invalid_argument("spec infeasible");
  }
  Rng rng(spec.seed);
  rng.shuffle(starts);

  auto build = [&](int start) {
    const std::vector<int> values =
        chain_values(start, spec.chain_steps + 1, spec.modulus, spec.mult,
                     spec.add);
    std::vector<int> tokens;
    tokens.reserve(values.size());
    for (int v : values) tokens.push_back(v + 1);
    std::vector<int> prompt(tokens.begin(), tokens.begin() + 1);
    std::vector<int> target(tokens.begin() + 1, tokens.end());
    return make_example(std::move(prompt), std::move(target));
  };

  Corpus corpus;
  for (int i = 0; i < spec.train_count; ++i) {
    corpus.train.push_back(build(starts[static_cast<std::size_t>(i)]));
  }
  for (int i = 0; i < spec.eval_count; ++i) {
    corpus.eval.push_back(
        build(starts[static_cast<std::size_t>(spec.train_count + i)]));
  }
  return corpus;
}

Corpus prompt_task_corpus(const CorpusSpec& spec) {
  if (spec.vocab_size < 3 || spec.min_len < 1 ||
      spec.max_len < spec.min_len) {
    throw std::invalid_argument("spec infeasible");
  }
  const int needed = spec.train_count + spec.eval_count;
  Rng rng(spec.seed);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> prompts;
  int attempts = 0;
  const int attempt_cap = 1000 * needed;
  while (static_cast<int>(prompts.size()) < needed) {
    if (++attempts > attempt_cap) {
      throw std::invalid_argument("spec infeasible");
    }
    const int len =
        spec.min_len + rng.uniform_int(spec.max_len - spec.min_len + 1);
    std::vector<int> prompt;
    prompt.reserve(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
      prompt.push_back(1 + rng.uniform_int(spec.vocab_size - 1));
    }
    if (seen.insert(prompt).second) prompts.push_back(std::move(prompt));
  }

  auto build = [&](const std::vector<int>& prompt) {
    std::vector<int> target = prompt;
    if (spec.task == TaskKind::Reverse) {
      std::reverse(target.begin(), target.end());
    }
    return make_example(prompt, std::move(target));
  };

  Corpus corpus;
  for (int i = 0; i < spec.train_count; ++i) {
    corpus.train.push_back(build(prompts[static_cast<std::size_t>(i)]));
  }
  for (int i = 0; i < spec.eval_count; ++i) {
    corpus.eval.push_back(
        build(prompts[static_cast<std::size_t>(spec.train_count + i)]));
  }
  return corpus;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.train_count < 1 || spec.eval_count < 1 || spec.vocab_size > 32) {
    throw std::invalid_argument("spec infeasible");
  }
  Corpus corpus = spec.task == TaskKind::ModularChain
                      ? chain_corpus(spec)
                      : prompt_task_corpus(spec);
  const ActionSpace vocab{spec.vocab_size, {}};
  for (const TokenSequence& seq : corpus.train) seq.validate(vocab);
  for (const TokenSequence& seq : corpus.eval) seq.validate(vocab);
  return corpus;
}

std::string dataset_to_tsv(const std::vector<TokenSequence>& dataset) {
  std::ostringstream out;
  for (const TokenSequence& seq : dataset) {
    for (int i = 0; i < seq.prompt_len; ++i) {
      if (i) out << ' ';
      out << seq.tokens[static_cast<std::size_t>(i)];
    }
    out << '\t';
    for (int i = seq.prompt_len; i < seq.length(); ++i) {
      if (i > seq.prompt_len) out << ' ';
      out << seq.tokens[static_cast<std::size_t>(i)];
    }
    out << '\n';
  }
  return out.str();
}

std::vector<TokenSequence> dataset_from_tsv(const std::string& text) {
  std::vector<TokenSequence> dataset;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::invalid_argument("malformed dataset line: " + line);
    }
    auto parse_ints = [](const std::string& part) {
      std::vector<int> out;
      std::istringstream in(part);
      int v;
      while (in >> v) out.push_back(v);
      return out;
    };
    const std::vector<int> prompt = parse_ints(line.substr(0, tab));
    const std::vector<int> target = parse_ints(line.substr(tab + 1));
    if (prompt.empty() || target.empty()) {
      throw std::invalid_argument("malformed dataset line: " + line);
    }
    TokenSequence seq;
    seq.prompt_len = static_cast<int>(prompt.size());
    seq.tokens = prompt;
    seq.tokens.insert(seq.tokens.end(), target.begin(), target.end());
    dataset.push_back(std::move(seq));
  }
  return dataset;
}

TokenSequence greedy_decode(const PolicyModel& model,
                            const std::vector<int>& prompt_tokens,
                            int max_len) {
  const std::vector<int> emitted =
      greedy_rollout(model, prompt_tokens, max_len, kEosToken);
  TokenSequence seq;
  seq.prompt_len = static_cast<int>(prompt_tokens.size());
  seq.tokens = prompt_tokens;
  seq.tokens.insert(seq.tokens.end(), emitted.begin(), emitted.end());
  return seq;
}

EvalResult evaluate_model(const PolicyModel& model,
                          const std::vector<TokenSequence>& dataset,
                          int epoch) {
  if (dataset.empty()) throw std::invalid_argument("empty dataset");
  EvalResult result;
  result.epoch = epoch;

  int max_targets = 0;
  for (const TokenSequence& seq : dataset) {
    max_targets = std::max(max_targets, seq.target_count());
  }
  std::vector<int> position_hits(static_cast<std::size_t>(max_targets), 0);
  std::vector<int> position_counts(static_cast<std::size_t>(max_targets), 0);

  Scalar nll_sum = 0.0;
  int token_count = 0;
  int matches = 0;
  for (const TokenSequence& seq : dataset) {
    const Matrix logits = model.target_logits(seq);
    const Matrix logp = row_log_softmax(logits);
    for (int t = 0; t < seq.target_count(); ++t) {
      const int truth = seq.tokens[static_cast<std::size_t>(seq.prompt_len + t)];
      nll_sum -= logp(t, truth);
      ++token_count;
      ++position_counts[static_cast<std::size_t>(t)];
      if (argmax_lowest(logits.row(t)) == truth) {
        ++position_hits[static_cast<std::size_t>(t)];
      }
    }
    const std::vector<int> prompt(
        seq.tokens.begin(), seq.tokens.begin() + seq.prompt_len);
    const TokenSequence decoded =
        greedy_decode(model, prompt, seq.target_count());
    if (decoded.tokens == seq.tokens) ++matches;
  }

  result.eval_loss = nll_sum / static_cast<Scalar>(token_count);
  result.exact_match =
      static_cast<Scalar>(matches) / static_cast<Scalar>(dataset.size());
  result.per_position_accuracy.resize(static_cast<std::size_t>(max_targets));
  for (int t = 0; t < max_targets; ++t) {
    result.per_position_accuracy[static_cast<std::size_t>(t)] =
        static_cast<Scalar>(position_hits[static_cast<std::size_t>(t)]) /
        static_cast<Scalar>(position_counts[static_cast<std::size_t>(t)]);
  }
  return result;
}

ToyLmResult train_toy_lm(const Corpus& corpus, const std::string& method,
                         const ToyLmConfig& cfg, const ReportSink& sink) {
  if (method != "sft" && method != "ift") {
    throw std::invalid_argument("unknown method: " + method);
  }
  if (corpus.train.empty() || corpus.eval.empty()) {
    throw std::invalid_argument("empty dataset");
  }
  cfg.loss.validate();
  if (cfg.epochs < 1 || cfg.batch < 1 || cfg.lr <= 0.0) {
    throw std::invalid_argument("invalid training configuration");
  }

  int vocab = 0;
  for (const TokenSequence& seq : corpus.train) {
    for (int t : seq.tokens) vocab = std::max(vocab, t + 1);
  }
  for (const TokenSequence& seq : corpus.eval) {
    for (int t : seq.tokens) vocab = std::max(vocab, t + 1);
  }

  ModelConfig mc;
  mc.kind = ModelKind::DecoderLm;
  mc.action_count = vocab;
  mc.embed_dim = cfg.embed_dim;
  mc.hidden_dim = cfg.hidden_dim;
  mc.max_positions = cfg.max_positions;
  mc.seed = cfg.seed;
  PolicyModel model(mc);

  ToyLmResult result;
  result.method = method;
  result.seed = cfg.seed;
  result.snapshots.push_back(evaluate_model(model, corpus.eval, 0));
  result.loss_curve.reserve(static_cast<std::size_t>(cfg.epochs));

  ad::RmsProp opt(cfg.lr);
  std::vector<std::size_t> order(corpus.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    Scalar epoch_sum = 0.0;
    int epoch_batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch));
      ad::NodePtr batch_total;
      for (std::size_t i = begin; i < end; ++i) {
        const TokenSequence& seq = corpus.train[order[i]];
        LossReport report = method == "sft" ? sft_loss(model, seq, cfg.loss)
                                            : ift_loss(model, seq, cfg.loss);
        if (sink) sink(epoch, report);
        batch_total = batch_total ? ad::add(batch_total, report.total)
                                  : report.total;
      }
      auto batch_mean =
          ad::scale(batch_total, 1.0 / static_cast<Scalar>(end - begin));
      const Scalar value = batch_mean->value(0, 0);
      if (!std::isfinite(value)) {
        throw std::runtime_error("non-finite loss at epoch " +
                                 std::to_string(epoch) + " (" + method + ")");
      }
      epoch_sum += value;
      ++epoch_batches;
      model.params().zero_grad();
      ad::backward(batch_mean);
      opt.step(model.params());
    }
    result.loss_curve.push_back(epoch_sum /
                                static_cast<Scalar>(epoch_batches));

    const bool last = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_every == 0 || last) {
      result.snapshots.push_back(evaluate_model(model, corpus.eval, epoch + 1));
    }
  }
  result.final_eval = result.snapshots.back();
  return result;
}

}  // namespace alignlab
