#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fcil/disentangle.hpp"
#include "fcil/model_zoo.hpp"
#include "fcil/rehearsal_memory.hpp"

namespace fcil {

// Counts what entered condensation-model updates. condensed_samples must stay
// zero; update_condensation_model throws before it could become non-zero.
struct LeakageAudit {
  long omega_updates = 0;
  long real_samples = 0;
  long condensed_samples = 0;
  long rejected_batches = 0;

  LeakageAudit& operator+=(const LeakageAudit& o) {
    omega_updates += o.omega_updates;
    real_samples += o.real_samples;
    condensed_samples += o.condensed_samples;
    rejected_batches += o.rejected_batches;
    return *this;
  }
};

struct CondensationState {
  Backbone omega;
  double eta = 0.01;
  long step_count = 0;
  LeakageAudit audit;
};

// Fresh omega for a task; the caller derives the seed from (run seed, task).
CondensationState init_condensation_state(const ArchSpec& spec, int classes, double eta, std::uint64_t seed);

// Sum over weight tensors (biases skipped) of 1 - cos(a_l, b_l). d_a, when
// given, receives the gradient with respect to a (zero on bias tensors).
double gradient_distance(const ParamVector& a, const ParamVector& b, ParamVector* d_a = nullptr);

struct TermResult {
  double loss = 0.0;
  std::vector<double> pixel_grad;  // same layout as the exemplar batch pixels; empty if not requested
  bool skipped = false;
};

// f_dist between grad_omega CE(omega; M_k) and grad_omega CE(omega; B_k).
// The pixel gradient is exact: a forward-mode pass over the backward pass
// differentiates the exemplar gradient along dL/d(grad).
TermResult grad_match(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k, bool want_pixel_grad);
double grad_match_loss(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k);

// One SGD step on CE(B_n) + CE(M_orig). Throws std::logic_error if any sample
// is not tagged as a real image.
CondensationState update_condensation_model(CondensationState state, const ImageBatch& b_n, const ImageBatch& m_orig);

// rho(A) = mean over rows of A of cos(Phi(a), Phi(r_j)) for each reference r_j;
// loss = mean_j (rho(M_k)_j - rho(B_k)_j)^2. Empty references: 0, skipped.
TermResult relationship(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k, const ImageBatch& m_rest,
                        bool want_pixel_grad);
double relationship_loss(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k, const ImageBatch& m_rest);

double total_memory_loss(double l_cond, double l_rel, double l_mkcl, double beta);

// Contrastive term for condensed exemplars: z = features of the exemplar under
// `feature_model`; positives are the class prototypes, negatives every other
// class's prototypes. Averaged over the batch.
TermResult mkcl_term(const Backbone& feature_model, const ImageBatch& m_k, const PrototypeSet& prototypes, double tau,
                     bool want_pixel_grad);

struct CondenseOptions {
  bool grad_match = true;    // L_cond
  bool relationship = true;  // L_rel
  double beta = 0.5;         // weight of L_MKCL; inactive without prototypes
  double tau = 0.5;
  double exemplar_lr = 1.0;
  int iterations = 1;  // exemplar updates per incoming batch
  bool update_omega = true;
  int orig_cap = 0;
  std::uint64_t seed = 0;  // reservoir stream for M_orig
};

struct MkclContext {
  const Backbone* feature_model = nullptr;
  const PrototypeSet* prototypes = nullptr;
};

struct CondenseReport {
  long step = 0;
  double l_cond = 0.0;
  double l_rel = 0.0;
  double l_mkcl = 0.0;
  double l_total = 0.0;
};

// Copies real images of each class in the batch into summ until its quota is
// met.
void seed_summary(MemoryStore& store, const ImageBatch& batch);

// Exemplar-only update with omega frozen. Losses are measured before the
// pixel step.
CondenseReport condense_exemplars(const Backbone& omega, MemoryStore& store, const ImageBatch& b_n,
                                  const MkclContext& mkcl, const CondenseOptions& opt);

struct CondenseStepResult {
  MemoryStore store;
  CondensationState state;
  CondenseReport report;
};

// Per-class losses and one exemplar step, then the omega update on real data,
// then the M_orig reservoir update.
CondenseStepResult condense_step(CondensationState state, MemoryStore store, const ImageBatch& b_n,
                                 const MkclContext& mkcl, const CondenseOptions& opt);

ImageBatch memory_batch(const std::vector<StoredImage>& items, const ImageShape& shape);

void write_loss_trace(const std::filesystem::path& path, const std::vector<CondenseReport>& trace);

}  // namespace fcil
