#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "akd/augment.hpp"
#include "akd/data.hpp"
#include "akd/diversity.hpp"
#include "akd/losses.hpp"
#include "akd/nn.hpp"

namespace akd {

// ---- configuration -----------------------------------------------------------

enum class AugMode { None, Noise, Angular };

std::string to_string(AugMode m);
AugMode aug_mode_from_string(const std::string& s);
std::string to_string(Level l);
Level level_from_string(const std::string& s);

// Every knob of a training run. Defaults follow the long reference schedule
// (240 epochs, decay at 150/180/210); desk() scales the same shape down to
// something that finishes in seconds on a laptop.
struct TrainConfig {
    int epochs = 240;
    int warmup_epochs = -1;  // -1 = auto: scale 30/240 with epochs, floor, at least 1
    Index batch_size = 64;
    double lr = 0.01;
    double momentum = 0.9;
    std::vector<int> lr_milestones{150, 180, 210};
    double lr_decay = 0.1;
    std::uint64_t seed = 0;
    int n_views = 5;
    std::vector<double> dropout_probs{0.2, 0.25, 0.3, 0.35, 0.4};
    double tau_z = 4.0;     // distillation softmax temperature
    double tau_c = 0.07;    // contrastive temperature of the view alignment
    double gamma_init = 0.2;
    double tau_feat = 0.07;  // student feature-contrastive temperature
    Level level = Level::Both;
    AugMode aug_mode = AugMode::Angular;
    std::vector<double> ensemble_weights;  // empty = uniform over teacher + views
    double noise_sigma = 0.1;              // scale of the noise-baseline augmentor
    bool disable_inter = false;            // ablation switches for the two angular terms
    bool disable_intra = false;

    static TrainConfig desk();  // 60 epochs, decay {35,45,55}, 8 warm-up epochs

    // desk() calibrated for the blobs-hard benchmark. The long-schedule defaults
    // (tau_z=4, tau_c=0.07, uniform ensemble) let the learned margin saturate in a
    // 60-epoch run and the diversity pressure then flattens view accuracy; this
    // preset sharpens the label/KD anchors and weights the ensemble toward the
    // teacher so the views contribute spread without dominating the target.
    static TrainConfig desk_blobs_hard();
};

// warmup_epochs with the auto sentinel resolved.
int resolved_warmup_epochs(const TrainConfig& cfg);

// Throws ParamError naming the offending field. Checks milestone ordering,
// warm-up < epochs, positive temperatures/lr, dropout list length, etc.
void validate(const TrainConfig& cfg);

// Flat key=value view, used by config files and checkpoint snapshots.
// from_kv rejects unknown keys so a typo cannot silently change a run.
std::map<std::string, std::string> to_kv(const TrainConfig& cfg);
TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv);

// ---- metrics -------------------------------------------------------------------

// One logged row per epoch per phase. Fields that do not apply to a phase
// (e.g. angles during teacher pretraining) stay unset and serialize as null.
struct MetricsRow {
    int epoch = 0;
    std::string phase;  // "teacher" | "warmup" | "distill"
    double loss_total = 0.0;
    std::optional<double> loss_inter_constraint;
    std::optional<double> loss_inter_diversity;
    std::optional<double> loss_intra;
    std::optional<double> loss_aug_gt;
    std::optional<double> loss_kd_kl;
    std::optional<double> loss_feat_contrastive;
    std::optional<double> loss_student_ce;
    std::optional<double> train_acc;
    std::optional<double> test_acc;
    std::optional<double> diversity;
    std::optional<double> diversity_inter_form;
    std::optional<double> diversity_intra_form;
    std::optional<double> raw_variance;
    std::optional<double> kl_bound_lhs;
    std::optional<double> kl_bound_rhs;
    std::optional<double> bound_slack;
    std::optional<double> mean_inter_angle_deg;
    std::optional<double> mean_intra_angle_deg;
    std::optional<double> gamma;
    std::optional<double> gate_active_fraction;
};

using RunMetrics = std::vector<MetricsRow>;

// One JSON object per row, fixed key order, 17-significant-digit numbers,
// null for unset or non-finite fields.
std::string metrics_json_line(const MetricsRow& row);

// Appends one complete line and flushes, so a crash never leaves a partial
// record visible. Throws IoError when the sink fails.
void write_metrics_row(const MetricsRow& row, std::ostream& sink);
void write_metrics(const RunMetrics& rows, const std::string& path);

// ---- optimizer ---------------------------------------------------------------

struct SgdState {
    std::vector<Tensor> velocity;  // mirrors the parameter list
    double base_lr = 0.01;
    double momentum = 0.9;
    std::vector<int> milestones;
    double decay = 0.1;
    double current_lr = 0.0;  // lr used by the most recent step
};

SgdState make_sgd(std::span<const Var> params, const TrainConfig& cfg);

// lr(epoch) = base_lr * decay^(number of milestones <= epoch)
double lr_at_epoch(const SgdState& state, int epoch);

// Heavy-ball step: v <- momentum*v + g, p <- p - lr(epoch)*v. Gradients are
// read off the params, so call backward() first. Box-constrained scalars
// (the margin) are clamped by the caller right after the step.
void sgd_update(std::span<Var> params, SgdState& state, int epoch);

// Clamp a parameter's value into [0, 1] elementwise.
void clamp_unit_interval(Var& v);

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
    int format_version = 1;
    std::map<std::string, std::string> config;              // flat key=value snapshot
    std::string rng_state;                                  // may be empty
    std::vector<std::pair<std::string, Tensor>> arrays;     // named, shape-carrying
};

// Named snapshot (<prefix>.<i>) of a parameter list, config attached.
Checkpoint snapshot_params(const std::string& prefix, std::span<const Var> params,
                           const TrainConfig& cfg);

// Writes checkpoint values back into a parameter list created the same way.
// Throws FormatError on a missing name or shape mismatch.
void restore_params(const Checkpoint& ck, const std::string& prefix, std::span<Var> params);

// Text format, 17 significant digits per value; load(save(x)) reproduces
// forward outputs exactly. Unknown format versions and malformed files are
// rejected with FormatError.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---- models at desk scale -------------------------------------------------------

// Reference architectures used by the pipeline: teacher d_in -> 128 -> 128
// -> 64-d features, student d_in -> 32 -> 32 -> 32-d features projected up
// to the teacher's 64.
inline constexpr Index kTeacherFeatureDim = 64;
inline constexpr Index kStudentFeatureDim = 32;

TeacherBundle make_desk_teacher(Index d_in, Index num_classes, double tau_z, Rng& rng);
StudentBundle make_desk_student(Index d_in, Index num_classes, Rng& rng);

// ---- evaluation ------------------------------------------------------------------

// Fraction of rows whose argmax equals the label; ties break to the lowest
// class index so results do not depend on float noise ordering.
double evaluate_top1(const Tensor& scores, const std::vector<int>& labels);
double evaluate_top1(const TeacherBundle& teacher, const Dataset& data);
double evaluate_top1(const StudentBundle& student, const Dataset& data);

// ---- training pipelines ------------------------------------------------------------

struct TeacherPretrainResult {
    TeacherBundle teacher;
    Checkpoint checkpoint;
    RunMetrics metrics;  // one "teacher" row per epoch
    double final_train_acc = 0.0;
    double final_test_acc = 0.0;
};

// Plain cross-entropy training of the desk teacher under the SGD schedule.
// Deterministic in (cfg, seed); throws NumericError if the loss leaves the
// reals.
TeacherPretrainResult pretrain_teacher(const TrainConfig& cfg, const Dataset& train,
                                       const Dataset& test);

// Eval-mode diversity report of the current heads over a dataset: teacher
// included for the generalized diversity and the bound check, views only for
// the variance forms. The bound target is the one-hot labels smoothed by
// 1e-6 so it is strictly positive. Needs at least two heads (the pairwise
// statistics are undefined below that).
DiversityReport head_diversity_report(const TeacherBundle& teacher, ViewHeadSet& heads,
                                      const Dataset& data);

struct WarmupResult {
    RunMetrics metrics;  // one "warmup" row per epoch
    // Reports are filled only with >= 2 views (pairwise stats need a pair);
    // otherwise they stay zero-initialized.
    DiversityReport init_report;   // before any head update
    DiversityReport final_report;  // after the last warm-up epoch
};

// Trains the view heads and the margin against the frozen teacher for the
// resolved warm-up duration. Only head parameters and the margin move; the
// teacher is forwarded for values alone.
WarmupResult warmup_heads(const TeacherBundle& teacher, ViewHeadSet& heads,
                          AngularLossConfig& ang, const TrainConfig& cfg, const Dataset& train);

struct DistillResult {
    RunMetrics metrics;  // one "distill" row per epoch
    Checkpoint student_checkpoint;  // last completed epoch
    double final_train_acc = 0.0;
    double final_test_acc = 0.0;
    double ensemble_test_acc = 0.0;          // ensemble prediction accuracy (0 views: teacher)
    std::vector<double> view_test_accs;      // per-view individual accuracy, eval mode
    std::optional<DiversityReport> final_report;  // set when views exist
    bool diverged = false;   // loss left the reals; params rolled back to the
    int diverged_epoch = -1; // last good epoch and training stopped early
};

// Joint loop: per step one frozen-teacher forward, one head forward, one
// ensemble build from current values (so the student targets carry no
// gradient), then a head step on the view loss (angular mode) and a student
// step on the distillation loss. aug_mode none skips views entirely and
// reduces to plain distillation; noise swaps the heads for the parameter-free
// noise augmentor with the view loss disabled.
DistillResult run_distillation(const TeacherBundle& teacher, ViewHeadSet& heads,
                               AngularLossConfig& ang, StudentBundle& student,
                               const TrainConfig& cfg, const Dataset& train, const Dataset& test);

struct ExperimentResult {
    ViewHeadSet heads;       // empty unless angular
    StudentBundle student;
    WarmupResult warmup;     // metrics empty unless angular
    DistillResult distill;
};

// Head build + warm-up (angular only) + distillation against a pre-trained
// teacher. Head and student initializations depend only on cfg.seed, so runs
// that differ in aug_mode still start from the same student.
ExperimentResult run_experiment(const TeacherBundle& teacher, const TrainConfig& cfg,
                                const Dataset& train, const Dataset& test);

// ---- experiment comparison -----------------------------------------------------------

struct CompareRow {
    std::string mode;      // none | noise | angular
    std::string ablation;  // full | inter_only | intra_only | gt_only; "-" outside angular
    std::uint64_t seed = 0;
    double test_acc = 0.0;
    double diversity = 0.0;
    double mean_inter_deg = 0.0;
    double mean_intra_deg = 0.0;
    double gate_frac = 0.0;
};

struct CompareTable {
    std::vector<CompareRow> rows;
};

// Runs every (mode, ablation, seed) cell, reusing one pretrained teacher per
// seed so the comparison isolates the augmentation strategy. Ablations apply
// to the angular mode only; pass {"full"} for no ablation sweep. Needs at
// least two seeds.
CompareTable compare_experiment(const TrainConfig& base, const std::vector<AugMode>& modes,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<std::string>& ablations, const Dataset& train,
                                const Dataset& test);

std::string to_csv(const CompareTable& table);

struct CompareSummary {
    std::string mode;
    std::string ablation;
    double mean_acc = 0.0;
    double std_acc = 0.0;  // population std over seeds
    double mean_diversity = 0.0;
    double mean_inter_deg = 0.0;
    double mean_intra_deg = 0.0;
    double mean_gate_frac = 0.0;
    int num_seeds = 0;
};

std::vector<CompareSummary> summarize(const CompareTable& table);
std::string to_csv(const std::vector<CompareSummary>& rows);

}  // namespace akd
