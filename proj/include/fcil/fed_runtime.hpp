#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fcil/condensation.hpp"
#include "fcil/disentangle.hpp"
#include "fcil/model_zoo.hpp"
#include "fcil/rehearsal_memory.hpp"

namespace fcil {

enum class Method { ecoral, replay, lwf, ewc };

Method parse_method(std::string_view name);  // throws std::invalid_argument
std::string to_string(Method m);

// Ablation switches for ecoral. A = adjustable memory, G = L_cond,
// F = L_rel, C = Shared-VAE and prototypes, K = L_MKCL.
struct Components {
  bool adjustable_memory = true;
  bool grad_match = true;
  bool relationship = true;
  bool compensation = true;
  bool contrastive = true;

  std::string label() const;  // e.g. "A+G+F"
  bool operator==(const Components&) const = default;
};

struct StrategyConfig {
  Method method = Method::ecoral;
  Components components;
  double lr = 0.003;
  double lambda_kd = 3.0;   // weight of the distillation term
  double lambda_mem = 3.0;  // weight of the replay term
  double kd_temperature = 2.0;
  double ewc_factor = 300.0;
  double beta = 0.5;
  double tau = 0.5;
  double eta = 0.01;
  double exemplar_lr = 1.0;
  int local_epochs = 30;
  int batch_size = 16;
  int memory_batch = 16;
  int condense_iterations = 1;
  int vae_hidden = 64;
  int vae_latent = 8;
  int vae_embed = 8;
  double vae_lr = 0.01;
  double beta_vae = 1.0;
  int generated_per_class = 16;
  bool vae_every_round = true;
  bool include_old_group = false;

  bool uses_memory() const { return method == Method::ecoral || method == Method::replay; }
  bool uses_kd() const { return method == Method::ecoral || method == Method::lwf; }
  bool uses_condensation() const { return method == Method::ecoral; }
  bool uses_vae() const { return method == Method::ecoral && components.compensation; }
  void validate() const;
};

// ---------------------------------------------------------------------------

struct KdResult {
  double total = 0.0;
  double ce = 0.0;
  double kl = 0.0;  // T^2-scaled KL(teacher || student) on the old-class slice
};

// student: n x student_classes, teacher: n x old_classes (old_classes <=
// student_classes). Loss = CE(student, labels) + lambda * T^2 * KL.
// dstudent receives the gradient with respect to the student logits.
KdResult kd_loss(std::span<const double> student, int student_classes, std::span<const double> teacher, int old_classes,
                 double temperature, std::span<const int> labels, double lambda, std::vector<double>* dstudent = nullptr);

struct EwcState {
  bool active = false;
  ParamVector anchor;  // theta* after the previous task
  ParamVector fisher;  // diagonal Fisher, same layout as anchor
};

// factor * sum_i F_i (theta_i - theta*_i)^2 over the anchor's entries; new
// head rows beyond the anchor are unpenalized. grad (optional, same layout
// as theta) accumulates the penalty gradient.
double ewc_penalty(const ParamVector& theta, const EwcState& ewc, double factor, ParamVector* grad = nullptr);

// Exact minimizer of factor * F_i (x - theta*_i)^2 + (x - theta_i)^2 / (2 lr)
// per entry. Used in place of an explicit penalty gradient step, which
// diverges once 2 lr factor F_i exceeds 2.
void ewc_proximal_step(ParamVector& theta, const EwcState& ewc, double factor, double lr);

// Mean of per-sample squared CE gradients.
ParamVector diagonal_fisher(const Backbone& model, const ImageBatch& batch);

// Pads anchor and Fisher head tensors with zeros to match a grown head.
EwcState grow_ewc(const EwcState& ewc, const ParamVector& theta);

// ---------------------------------------------------------------------------

struct GlobalModelState {
  Backbone classifier;
  std::optional<SharedVAE> vae;
  std::optional<Backbone> teacher;  // frozen snapshot from the previous task
  EwcState ewc;
  int round = 0;
  int task = 0;
};

struct ClientState {
  int id = 0;
  MemoryStore store;
  std::optional<CondensationState> cond;
  int cond_task = -1;
  std::vector<CondenseReport> trace;
  LeakageAudit audit;
};

struct TaskContext {
  int task = 0;
  int round = 0;
  int classes_seen = 0;  // head width for this task
  bool final_round = false;
  int orig_cap = 0;
  ArchSpec omega_spec;
  std::uint64_t omega_seed = 0;
};

struct LocalReport {
  double ce = 0.0;
  double kd = 0.0;
  double memory = 0.0;
  double ewc = 0.0;
  double vae_total = 0.0;
  long batches = 0;
  CondenseReport last_condense;
};

struct ClientUpdate {
  int client_id = 0;
  int round = 0;
  int task = 0;
  std::size_t sample_count = 0;
  ParamVector params;
  std::optional<SharedVAE> vae;
  std::set<int> vae_classes;  // embeddings this client trained
  std::optional<ParamVector> fisher;
  LocalReport report;
};

// Thrown when a client has neither local data nor memory to train on.
struct SkipClient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ClientUpdate client_local_train(const GlobalModelState& global, const ImageBatch& local_data, ClientState& client,
                                const StrategyConfig& cfg, const TaskContext& ctx, std::uint64_t seed);

// Prototype bank for a client: VAE-generated features for every registered
// class plus the features of the client's real images, under the classifier.
PrototypeSet client_prototypes(const SharedVAE& vae, const Backbone& feature_model, const ImageBatch& local_data,
                               int generated_per_class, std::uint64_t seed);

// sum_l (n_l / sum n) * theta_l.
ParamVector fedavg_aggregate(const std::vector<ClientUpdate>& updates);

struct VaeContribution {
  const SharedVAE* vae = nullptr;
  double weight = 0.0;
  std::set<int> classes;  // embedding mask; empty means every class the client holds
};

// Weighted mean of encoder and decoder; each class embedding averages only
// over the contributions whose mask includes it.
SharedVAE aggregate_vae(const std::vector<VaeContribution>& contributions);

// Round message: u64 length prefix + wire block with header {round, task,
// client_id, n_l, ...}.
std::string encode_update(const ClientUpdate& update);
ClientUpdate decode_update(std::string_view bytes);

// ---------------------------------------------------------------------------

inline constexpr double kKlSentinel = 1e3;

// max(KL(p||q), KL(q||p)); kKlSentinel when either direction diverges.
double symmetric_kl(std::span<const double> p, std::span<const double> q);

struct HeterogeneityReport {
  std::vector<int> clients;
  std::vector<std::vector<double>> pairwise_kl;
  double mean_kl = 0.0;
  double delta_loss = 0.0;  // FedAvg global loss under the actual split minus an IID reshuffle
};

struct HeterogeneityOptions {
  int local_steps = 5;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

HeterogeneityReport heterogeneity_report(const std::map<int, MemoryStore>& banks, int class_count,
                                         const Backbone& global, const HeterogeneityOptions& opt);

// Serial or capped-parallel map over indices; honours FCIL_THREADS.
int worker_threads();

}  // namespace fcil
