#include "lopt/trainer.hpp"

#include <chrono>
#include <set>
#include <utility>

namespace lopt {

const char* to_string(Method m) {
  switch (m) {
    case Method::kE2E:
      return "e2e";
    case Method::kLoPT:
      return "lopt";
    case Method::kFreezeK1:
      return "freeze_k1";
    case Method::kLoPTK4:
      return "lopt_k4";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "e2e") return Method::kE2E;
  if (text == "lopt") return Method::kLoPT;
  if (text == "freeze_k1") return Method::kFreezeK1;
  if (text == "lopt_k4") return Method::kLoPTK4;
  throw ConfigError("unknown method '" + text + "'");
}

void TrainerOptions::validate() const {
  loss.validate();
  opt_local.validate();
  opt_task.validate();
  if (method == Method::kLoPTK4 && loss.kind != LocalObjective::kRecon)
    throw ConfigError("lopt_k4 supports only the recon objective");
}

// ---------------------------------------------------------------------------
// Batch helpers
// ---------------------------------------------------------------------------

template <typename Real>
Supervision<Real> next_token_supervision(const TokenBatch& tokens, int pad_id,
                                         const std::vector<std::size_t>& prompt_lens) {
  if (!prompt_lens.empty() && prompt_lens.size() != tokens.batch)
    throw ContractError("prompt_lens needs one entry per row");
  Supervision<Real> sup;
  sup.targets.assign(tokens.size(), 0);
  sup.mask.assign(tokens.size(), Real(0));
  const std::size_t L = tokens.seq_len;
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    const std::size_t first = prompt_lens.empty() ? 1 : std::max<std::size_t>(prompt_lens[b], 1);
    for (std::size_t t = 0; t + 1 < L; ++t) {
      const int next = tokens.ids[b * L + t + 1];
      if (next == pad_id) continue;
      sup.targets[b * L + t] = next;
      if (t + 1 >= first) sup.mask[b * L + t] = Real(1);
    }
  }
  return sup;
}

template <typename Real>
std::vector<Real> non_padding_rows(const TokenBatch& tokens, int pad_id) {
  std::vector<Real> mask(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) mask[i] = tokens.ids[i] == pad_id ? Real(0) : Real(1);
  return mask;
}

template <typename Real>
StepInput<Real> make_sft_input(const TokenBatch& tokens, const Supervision<Real>& sup, int pad_id) {
  StepInput<Real> in;
  in.tokens = tokens;
  in.row_mask = non_padding_rows<Real>(tokens, pad_id);
  in.local_sup = next_token_supervision<Real>(tokens, pad_id);
  in.chunks.push_back({tokens, [sup](Var<Real> logits) { return sft_loss(logits, sup); }});
  return in;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <typename Real>
struct Trainer<Real>::Snapshot {
  std::vector<Tensor<Real>> values;
  std::vector<Optimizer<Real>> opts;
};

template <typename Real>
Trainer<Real>::Trainer(Transformer<Real> model, TrainerOptions options, std::uint64_t seed)
    : model_(std::move(model)), options_(std::move(options)) {
  options_.validate();
  const std::size_t k = model_.partition().num_blocks();
  if (options_.method == Method::kLoPTK4 ? k != 4 : k != 2)
    throw ConfigError(std::string("method ") + to_string(options_.method) + " does not match a " +
                      std::to_string(k) + "-block partition");

  const std::size_t d = model_.config().d_model;
  const bool recon = options_.loss.kind != LocalObjective::kNtp;
  const bool ntp = options_.loss.kind != LocalObjective::kRecon;
  if (options_.method == Method::kLoPT) {
    if (recon) aux_.push_back(AuxHead<Real>::init(d, seed * 1000003ULL + 11));
    if (ntp) decoder_ = LocalDecoder<Real>::init(d, model_.config().vocab_size, seed * 1000003ULL + 29);
  } else if (options_.method == Method::kLoPTK4) {
    for (std::size_t b = 0; b + 1 < k; ++b)
      aux_.push_back(AuxHead<Real>::init(d, seed * 1000003ULL + 11 + b, "aux." + std::to_string(b)));
  }

  if (options_.method == Method::kE2E) {
    std::vector<Parameter<Real>*> all;
    for (auto& [_, p] : model_.params()) all.push_back(&p);
    opts_.emplace_back(options_.opt_task, std::move(all));
    return;
  }
  for (std::size_t b = 0; b < num_local_blocks(); ++b) {
    auto group = model_.block_params(b);
    if (b < aux_.size())
      for (auto* p : aux_[b].param_list()) group.push_back(p);
    if (b == 0 && decoder_)
      for (auto* p : decoder_->param_list()) group.push_back(p);
    opts_.emplace_back(options_.opt_local, std::move(group));
  }
  opts_.emplace_back(options_.opt_task, model_.block_params(k - 1));
}

template <typename Real>
std::size_t Trainer<Real>::num_local_blocks() const {
  switch (options_.method) {
    case Method::kLoPT:
    case Method::kLoPTK4:
      return model_.partition().num_blocks() - 1;
    default:
      return 0;
  }
}

template <typename Real>
std::vector<const Parameter<Real>*> Trainer<Real>::local_group(std::size_t b) const {
  std::vector<const Parameter<Real>*> out;
  for (const auto* p : opts_.at(b).group()) out.push_back(p);
  return out;
}

template <typename Real>
std::vector<const Parameter<Real>*> Trainer<Real>::all_trainable() const {
  std::vector<const Parameter<Real>*> out;
  for (const auto& [_, p] : model_.params()) out.push_back(&p);
  for (const auto& h : aux_)
    for (const auto* p : h.param_list()) out.push_back(p);
  if (decoder_)
    for (const auto& [_, p] : decoder_->params()) out.push_back(&p);
  return out;
}

template <typename Real>
typename Trainer<Real>::Snapshot Trainer<Real>::snapshot() const {
  Snapshot s;
  for (const auto* p : all_trainable()) s.values.push_back(p->value);
  s.opts = opts_;
  return s;
}

template <typename Real>
void Trainer<Real>::restore(const Snapshot& s) {
  auto params = all_trainable();
  for (std::size_t i = 0; i < params.size(); ++i) const_cast<Parameter<Real>*>(params[i])->value = s.values[i];
  opts_ = s.opts;
}

template <typename Real>
Tensor<Real> Trainer<Real>::block_input_values(const TokenBatch& tokens, std::size_t b) const {
  // One scratch tape per layer keeps at most one layer of no-grad
  // intermediates alive.
  Tensor<Real> h;
  {
    Tape<Real> tape(false);
    h = model_.embed(tape, tokens).value();
  }
  const std::size_t start = b == 0 ? 0 : model_.partition().boundaries.at(b - 1);
  for (std::size_t l = 0; l < start; ++l) {
    Tape<Real> tape(false);
    Var<Real> in = tape.constant(std::move(h));
    h = model_.run_layers(tape, in, l, l + 1).value();
  }
  return h;
}

template <typename Real>
typename Trainer<Real>::LocalResult Trainer<Real>::local_phase(const StepInput<Real>& input, std::size_t b) {
  const auto& bounds = model_.partition().boundaries;
  const std::size_t start = b == 0 ? 0 : bounds.at(b - 1);
  const std::size_t end = bounds.at(b);
  Tape<Real> tape;
  Var<Real> h0, hin;
  if (b == 0) {
    h0 = hin = model_.embed(tape, input.tokens);
  } else {
    Tape<Real> scratch(false);
    h0 = tape.constant(model_.embed(scratch, input.tokens).value());
    hin = tape.constant(block_input_values(input.tokens, b));
  }
  Var<Real> hout = model_.run_layers(tape, hin, start, end);
  const AuxHead<Real>* head = b < aux_.size() ? &aux_[b] : nullptr;
  const LocalDecoder<Real>* dec = b == 0 && decoder_ ? &*decoder_ : nullptr;
  LocalLoss<Real> ll =
      local_objective(tape, options_.loss, head, dec, hout, h0, std::span<const Real>(input.row_mask), input.local_sup);
  LocalResult r;
  r.recon = ll.recon;
  r.ntp = ll.ntp;
  r.grads = tape.backward(ll.total);
  return r;
}

template <typename Real>
typename Trainer<Real>::TaskResult Trainer<Real>::task_phase(const std::vector<TaskChunk<Real>>& chunks,
                                                             bool full_graph, memory::PhaseProfile* profile) {
  if (chunks.empty()) throw ContractError("step without task chunks");
  const std::size_t last = model_.partition().num_blocks() - 1;
  const std::size_t start = model_.partition().boundaries.back();
  auto scope = [&](const char* name) {
    return profile ? std::make_optional<memory::PhaseScope>(*profile, name) : std::nullopt;
  };
  TaskResult r;
  long double total = 0;
  for (const auto& chunk : chunks) {
    Tensor<Real> boundary_values;
    if (!full_graph) {
      // Boundary recomputed with the already-updated earlier blocks; it
      // enters the task tape as a leaf, so nothing upstream is recorded.
      auto s = scope("boundary");
      boundary_values = block_input_values(chunk.tokens, last);
    }
    auto s = scope("task");
    Tape<Real> tape;
    Var<Real> logits;
    if (full_graph) {
      logits = model_.forward(tape, chunk.tokens);
    } else {
      Var<Real> boundary = tape.constant(std::move(boundary_values));
      logits = model_.output_head(tape, model_.run_layers(tape, boundary, start, model_.config().n_layers));
    }
    Var<Real> loss = chunk.loss(logits);
    total += loss.value().item();
    r.grads.merge(tape.backward(loss));
  }
  r.loss = static_cast<double>(total);
  return r;
}

template <typename Real>
void Trainer<Real>::check_local(const GradStore<Real>& g, std::size_t b, IsolationFindings& out) const {
  const auto& allowed = model_.partition().blocks.at(b);
  for (const auto& [name, p] : model_.params())
    if (g.has(p) && !std::binary_search(allowed.begin(), allowed.end(), name)) out.aux_grad_outside.push_back(name);
}

template <typename Real>
void Trainer<Real>::check_task(const GradStore<Real>& g, IsolationFindings& out) const {
  const auto& part = model_.partition();
  for (std::size_t b = 0; b + 1 < part.num_blocks(); ++b)
    for (const auto& name : part.blocks[b]) {
      const Tensor<Real>* t = g.find(model_.param(name));
      if (!t) continue;
      if (std::any_of(t->values().begin(), t->values().end(), [](Real v) { return v != Real(0); }))
        out.task_grad_in_k1.push_back(name);
    }
}

template <typename Real>
StepReport Trainer<Real>::step(const StepInput<Real>& input) {
  const auto t0 = std::chrono::steady_clock::now();
  StepReport rep;
  rep.step = step_;
  std::optional<Snapshot> saved;
  if (options_.atomic) saved = snapshot();
  rep.memory.baseline = memory::live_bytes();
  try {
    if (options_.method == Method::kE2E) {
      {
        TaskResult tr = task_phase(input.chunks, true, &rep.memory);
        rep.task_loss = tr.loss;
        rep.grad_norm_k1 = grad_norm(tr.grads, std::as_const(model_).block_params(0));
        rep.grad_norm_k2 = grad_norm(tr.grads, std::as_const(model_).block_params(model_.partition().num_blocks() - 1));
        opts_[0].step(tr.grads);
      }
    } else {
      std::optional<double> before;
      if (options_.measure_interface_drift) before = evaluate(input.chunks);
      long double k1_sq = 0;
      for (std::size_t b = 0; b < num_local_blocks(); ++b) {
        memory::PhaseScope scope(rep.memory, "aux");
        LocalResult lr = local_phase(input, b);
        check_local(lr.grads, b, rep.isolation);
        const double g1 = grad_norm(lr.grads, std::as_const(model_).block_params(b));
        k1_sq += static_cast<long double>(g1) * g1;
        rep.drift_bound_increment += opts_[b].config().lr * g1;
        rep.aux_loss += lr.recon;
        rep.ntp_loss += lr.ntp;
        opts_[b].step(lr.grads);
      }
      rep.grad_norm_k1 = static_cast<double>(std::sqrt(k1_sq));
      {
        TaskResult tr = task_phase(input.chunks, !options_.detach_boundary, &rep.memory);
        rep.task_loss = tr.loss;
        check_task(tr.grads, rep.isolation);
        rep.grad_norm_k2 = grad_norm(tr.grads, std::as_const(model_).block_params(model_.partition().num_blocks() - 1));
        opts_.back().step(tr.grads);
      }
      if (before) rep.interface_drift = std::abs(rep.task_loss - *before);
    }
    if (!std::isfinite(rep.task_loss) || !std::isfinite(rep.aux_loss))
      throw NumericsError("non-finite loss at step " + std::to_string(step_));
  } catch (...) {
    if (saved) restore(*saved);
    throw;
  }
  ++step_;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

template <typename Real>
IsolationFindings Trainer<Real>::isolation_check(const StepInput<Real>& input) {
  IsolationFindings out;
  for (std::size_t b = 0; b < num_local_blocks(); ++b) check_local(local_phase(input, b).grads, b, out);
  if (options_.method != Method::kE2E) check_task(task_phase(input.chunks, !options_.detach_boundary, nullptr).grads, out);
  return out;
}

template <typename Real>
double Trainer<Real>::evaluate(const std::vector<TaskChunk<Real>>& chunks) const {
  long double total = 0;
  for (const auto& chunk : chunks) {
    Tape<Real> tape(false);
    total += chunk.loss(model_.forward(tape, chunk.tokens)).value().item();
  }
  return static_cast<double>(total);
}

#define LOPT_INSTANTIATE(Real)                                                                               \
  template class Trainer<Real>;                                                                              \
  template Supervision<Real> next_token_supervision<Real>(const TokenBatch&, int,                            \
                                                          const std::vector<std::size_t>&);                  \
  template std::vector<Real> non_padding_rows<Real>(const TokenBatch&, int);                                 \
  template StepInput<Real> make_sft_input<Real>(const TokenBatch&, const Supervision<Real>&, int);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace lopt
