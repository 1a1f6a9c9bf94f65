#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "akd/errors.hpp"
#include "akd/harness.hpp"

using namespace akd;

namespace {

TrainConfig mini_config(int epochs = 4, int n_views = 2) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.warmup_epochs = 1;
    cfg.lr_milestones = {};
    cfg.n_views = n_views;
    cfg.dropout_probs.assign(static_cast<std::size_t>(n_views), 0.1);
    cfg.seed = 5;
    return cfg;
}

std::pair<Dataset, Dataset> mini_blobs(std::uint64_t seed = 3, double spread = 0.8) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::Blobs;
    spec.num_classes = 3;
    spec.samples_per_class = 40;
    spec.input_dim = 8;
    spec.spread = spread;
    spec.seed = seed;
    return split_per_class(gen_synthetic(spec), 30);
}

std::string tmp_path(const char* stem) {
    return std::string("/tmp/akd_harness_test_") + stem;
}

std::string metrics_text(const RunMetrics& rows) {
    std::string out;
    for (const MetricsRow& r : rows) out += metrics_json_line(r) + "\n";
    return out;
}

}  // namespace

// ---- configuration ----------------------------------------------------------------

TEST_CASE("desk preset scales the long schedule down") {
    TrainConfig c = TrainConfig::desk();
    CHECK(c.epochs == 60);
    CHECK(c.warmup_epochs == 8);
    CHECK(c.lr_milestones == std::vector<int>{35, 45, 55});
    CHECK(c.lr == 0.01);
    CHECK(c.n_views == 5);
    CHECK_NOTHROW(validate(c));
    CHECK_NOTHROW(validate(TrainConfig{}));

    TrainConfig b = TrainConfig::desk_blobs_hard();
    CHECK(b.epochs == 60);
    CHECK(b.tau_z == 2.0);
    CHECK(b.tau_c == 1.0);
    CHECK(b.ensemble_weights.size() == 6);
    CHECK(b.ensemble_weights[0] == 0.7);
    CHECK_NOTHROW(validate(b));
}

TEST_CASE("warm-up auto-scales with run length") {
    TrainConfig c;
    CHECK(resolved_warmup_epochs(c) == 30);  // 240-epoch reference
    c.epochs = 100;
    CHECK(resolved_warmup_epochs(c) == 12);
    c.epochs = 8;
    CHECK(resolved_warmup_epochs(c) == 1);  // floor, but never 0
    c.warmup_epochs = 5;
    CHECK(resolved_warmup_epochs(c) == 5);  // explicit value wins
}

TEST_CASE("config validation names broken invariants") {
    TrainConfig c = TrainConfig::desk();
    c.lr_milestones = {35, 35, 45};
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.lr_milestones = {35, 60};  // must stay below epochs
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.warmup_epochs = 60;
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.momentum = 1.0;
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.dropout_probs = {0.1, 0.2};  // 5 views want 5 entries
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.gamma_init = 1.5;
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.ensemble_weights = {1.0, 1.0};  // needs n_views + 1 = 6
    CHECK_THROWS_AS(validate(c), ParamError);
    c = TrainConfig::desk();
    c.aug_mode = AugMode::None;
    c.dropout_probs = {0.1, 0.2};  // irrelevant outside angular mode
    CHECK_NOTHROW(validate(c));
}

TEST_CASE("config round-trips through the key=value view") {
    TrainConfig c = TrainConfig::desk();
    c.lr = 0.07;
    c.seed = 123456789;
    c.aug_mode = AugMode::Noise;
    c.level = Level::Feature;
    c.ensemble_weights = {2.0, 1.0, 1.0, 1.0, 1.0, 1.0};
    c.disable_intra = true;
    auto kv1 = to_kv(c);
    TrainConfig back = train_config_from_kv(kv1);
    auto kv2 = to_kv(back);
    CHECK(kv1 == kv2);
    CHECK(back.lr == 0.07);
    CHECK(back.seed == 123456789);
    CHECK(back.aug_mode == AugMode::Noise);
    CHECK(back.level == Level::Feature);
    CHECK(back.disable_intra);
    CHECK(back.ensemble_weights.size() == 6);
    CHECK(kv1.at("lr") == "0.07");
    CHECK(kv1.at("ensemble_weights") == "2,1,1,1,1,1");
}

TEST_CASE("unknown or malformed config keys are rejected") {
    CHECK_THROWS_AS(train_config_from_kv({{"epohcs", "60"}}), ParamError);
    CHECK_THROWS_AS(train_config_from_kv({{"lr", "fast"}}), ParamError);
    CHECK_THROWS_AS(train_config_from_kv({{"disable_inter", "yes"}}), ParamError);
    CHECK_THROWS_AS(train_config_from_kv({{"lr_milestones", "10,,20"}}), ParamError);
    TrainConfig c = train_config_from_kv({{"epochs", "10"}});
    CHECK(c.epochs == 10);
    CHECK(c.lr == 0.01);  // untouched keys keep defaults
}

// ---- metrics ----------------------------------------------------------------------

TEST_CASE("metrics rows serialize as one json object per line") {
    MetricsRow row;
    row.epoch = 2;
    row.phase = "distill";
    row.loss_total = 0.5;
    row.loss_kd_kl = 0.25;
    row.mean_intra_angle_deg = std::nan("");
    std::string line = metrics_json_line(row);
    CHECK(line.substr(0, 42) == "{\"epoch\":2,\"phase\":\"distill\",\"loss_total\":");
    CHECK(line.find("\"loss_kd_kl\":0.25") != std::string::npos);
    CHECK(line.find("\"loss_student_ce\":null") != std::string::npos);
    CHECK(line.find("\"mean_intra_angle_deg\":null") != std::string::npos);  // nan is not json
    CHECK(line.back() == '}');
    CHECK(line.find('\n') == std::string::npos);

    std::ostringstream sink;
    write_metrics_row(row, sink);
    write_metrics_row(row, sink);
    std::istringstream back(sink.str());
    std::string l1, l2, extra;
    CHECK(std::getline(back, l1));
    CHECK(std::getline(back, l2));
    CHECK(!std::getline(back, extra));
    CHECK(l1 == l2);
    CHECK(l1 == line);
}

TEST_CASE("high-precision numbers survive the metrics encoding") {
    MetricsRow row;
    row.phase = "teacher";
    row.loss_total = 1.0 / 3.0;
    std::string line = metrics_json_line(row);
    CHECK(line.find("0.33333333333333331") != std::string::npos);  // 17 significant digits
}

// ---- optimizer --------------------------------------------------------------------

TEST_CASE("learning rate decays by 10x at each milestone") {
    TrainConfig cfg;  // 240-epoch reference schedule
    Var p = parameter(Tensor::scalar(0.0));
    std::vector<Var> params{p};
    SgdState s = make_sgd(params, cfg);
    CHECK(lr_at_epoch(s, 0) == 0.01);
    CHECK(lr_at_epoch(s, 149) == 0.01);
    CHECK(lr_at_epoch(s, 150) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(lr_at_epoch(s, 180) == doctest::Approx(0.0001).epsilon(1e-12));
    CHECK(lr_at_epoch(s, 239) == doctest::Approx(0.00001).epsilon(1e-12));
}

TEST_CASE("sgd leaves parameters alone when gradient and velocity are zero") {
    TrainConfig cfg;
    Var p = parameter(Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0}));
    std::vector<Var> params{p};
    SgdState s = make_sgd(params, cfg);
    p.zero_grad();
    sgd_update(params, s, 0);
    CHECK(p.value()(0, 0) == 1.0);
    CHECK(p.value()(1, 1) == 4.0);
}

TEST_CASE("sgd contracts a quadratic by the closed-form factor") {
    TrainConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    cfg.lr_milestones = {};
    Var x = parameter(Tensor::scalar(2.0));
    std::vector<Var> params{x};
    SgdState s = make_sgd(params, cfg);
    double expect = 2.0;
    for (int i = 0; i < 10; ++i) {
        Var loss = mul(x, x);
        x.zero_grad();
        backward(loss);
        sgd_update(params, s, 0);
        expect *= 0.8;  // x - 0.1 * 2x
        CHECK(x.value().item() == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("momentum accumulates the way the update rule says") {
    TrainConfig cfg;
    cfg.lr = 0.5;
    cfg.momentum = 0.9;
    cfg.lr_milestones = {};
    Var x = parameter(Tensor::scalar(0.0));
    std::vector<Var> params{x};
    SgdState s = make_sgd(params, cfg);
    // drive with a constant gradient of 1 by hand
    x.zero_grad();
    x.mutable_value();  // noop, keeps the shape
    Var l1 = x;         // d/dx x = 1
    backward(l1);
    sgd_update(params, s, 0);
    CHECK(x.value().item() == doctest::Approx(-0.5).epsilon(1e-12));  // v=1
    x.zero_grad();
    Var l2 = x;
    backward(l2);
    sgd_update(params, s, 0);
    // v = 0.9*1 + 1 = 1.9, step = 0.5*1.9
    CHECK(x.value().item() == doctest::Approx(-0.5 - 0.95).epsilon(1e-12));
    CHECK(s.current_lr == 0.5);
}

TEST_CASE("sgd rejects a parameter list that does not match its state") {
    TrainConfig cfg;
    Var a = parameter(Tensor::scalar(1.0));
    Var b = parameter(Tensor::scalar(1.0));
    std::vector<Var> one{a};
    std::vector<Var> two{a, b};
    SgdState s = make_sgd(one, cfg);
    CHECK_THROWS_AS(sgd_update(two, s, 0), ShapeError);
}

TEST_CASE("unit-interval clamp pins the margin into [0,1]") {
    Var g = parameter(Tensor::scalar(1.5));
    clamp_unit_interval(g);
    CHECK(g.value().item() == 1.0);
    g.mutable_value()[0] = -0.25;
    clamp_unit_interval(g);
    CHECK(g.value().item() == 0.0);
    g.mutable_value()[0] = 0.4;
    clamp_unit_interval(g);
    CHECK(g.value().item() == 0.4);
}

// ---- checkpoints --------------------------------------------------------------------

TEST_CASE("checkpoint round-trip reproduces forward outputs exactly") {
    auto [train, test] = mini_blobs();
    Rng r1(7), r2(7);
    TeacherBundle a = make_desk_teacher(train.dim(), train.num_classes, 4.0, r1);
    TeacherBundle b = make_desk_teacher(train.dim(), train.num_classes, 4.0, r2);
    // push a away from b so the restore provably does something
    std::vector<Var> pa = parameters(a);
    for (Var& p : pa) p.mutable_value().array() += 0.25;

    const std::string path = tmp_path("teacher.ckpt");
    Checkpoint ck = snapshot_params("teacher", pa, TrainConfig::desk());
    Rng state_rng(99);
    state_rng.next_u64();
    ck.rng_state = state_rng.state_string();
    save_checkpoint(ck, path);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.format_version == 1);
    CHECK(back.config == ck.config);
    std::vector<Var> pb = parameters(b);
    restore_params(back, "teacher", pb);

    Tensor za = teacher_forward(a, test.features).raw_logits.value();
    Tensor zb = teacher_forward(b, test.features).raw_logits.value();
    double worst = (za.array() - zb.array()).abs().maxCoeff();
    CHECK(worst <= 1e-15);

    Rng resumed(0);
    resumed.restore_state(back.rng_state);
    Rng expect(99);
    expect.next_u64();
    CHECK(resumed.next_u64() == expect.next_u64());
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects foreign and damaged files") {
    const std::string path = tmp_path("damaged.ckpt");
    Var p = parameter(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    std::vector<Var> params{p};
    Checkpoint ck = snapshot_params("m", params, TrainConfig::desk());
    save_checkpoint(ck, path);

    auto rewrite = [&](const std::string& from, const std::string& to) {
        std::ifstream in(path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::size_t at = text.find(from);
        REQUIRE(at != std::string::npos);
        text.replace(at, from.size(), to);
        std::ofstream out(path);
        out << text;
    };

    SUBCASE("future format version") {
        rewrite("akd-checkpoint 1", "akd-checkpoint 2");
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version 2"), FormatError);
    }
    SUBCASE("corrupted shape field") {
        rewrite("tensor m.0 2 2 3", "tensor m.0 2 x 3");
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("value count below the shape") {
        rewrite("tensor m.0 2 2 3", "tensor m.0 2 2 4");
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("missing end marker") {
        rewrite("end", "");
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("not a checkpoint at all") {
        std::ofstream out(path);
        out << "hello world\n";
        out.close();
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(tmp_path("no_such.ckpt")), IoError);
    }
    std::remove(path.c_str());
}

TEST_CASE("restore rejects wrong names and shapes") {
    Var p = parameter(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    std::vector<Var> params{p};
    Checkpoint ck = snapshot_params("m", params, TrainConfig::desk());
    Var q = parameter(Tensor::zeros({3, 2}));
    std::vector<Var> wrong_shape{q};
    CHECK_THROWS_AS(restore_params(ck, "m", wrong_shape), FormatError);
    std::vector<Var> fine{parameter(Tensor::zeros({2, 2}))};
    CHECK_THROWS_AS(restore_params(ck, "other", fine), FormatError);
    CHECK_NOTHROW(restore_params(ck, "m", fine));
    CHECK(fine[0].value()(1, 1) == 4.0);
}

// ---- evaluation ---------------------------------------------------------------------

TEST_CASE("top-1 accuracy with deterministic tie-breaks") {
    Tensor scores = Tensor::matrix(3, 3, {0.9, 0.05, 0.05,  //
                                          0.1, 0.1, 0.8,    //
                                          0.3, 0.3, 0.3});  // tie -> class 0
    CHECK(evaluate_top1(scores, {0, 2, 0}) == 1.0);
    CHECK(evaluate_top1(scores, {0, 2, 1}) == doctest::Approx(2.0 / 3.0));
    Tensor flat = Tensor::zeros({8, 4});
    std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3};
    CHECK(evaluate_top1(flat, labels) == 0.25);  // constant predictor on balanced classes
    CHECK_THROWS_AS(evaluate_top1(Tensor::zeros({0, 3}), {}), ParamError);
    CHECK_THROWS_AS(evaluate_top1(flat, {0, 1}), ShapeError);
}

TEST_CASE("a random predictor sits at chance level") {
    const Index n = 2000, c = 4;
    Rng rng(21);
    Tensor scores = rng.normal_tensor({n, c});
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(i % c));
    double acc = evaluate_top1(scores, labels);
    double p = 1.0 / static_cast<double>(c);
    double band = 3.0 * std::sqrt(p * (1 - p) / static_cast<double>(n));
    CHECK(std::abs(acc - p) <= band);
}

// ---- teacher pretraining ---------------------------------------------------------------

TEST_CASE("separable blobs train to perfect accuracy within 20 epochs") {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::Blobs;
    spec.num_classes = 3;
    spec.samples_per_class = 30;
    spec.input_dim = 4;
    spec.spread = 0.0;
    spec.seed = 11;
    Dataset d = gen_synthetic(spec);
    TrainConfig cfg = mini_config(20, 0);
    cfg.aug_mode = AugMode::None;
    TeacherPretrainResult res = pretrain_teacher(cfg, d, d);
    CHECK(res.final_train_acc == 1.0);
    CHECK(res.metrics.size() == 20);
    CHECK(res.metrics.back().phase == "teacher");
    CHECK(res.checkpoint.arrays.size() == parameters(res.teacher).size());
}

TEST_CASE("pretraining is a pure function of config and seed") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(3, 0);
    TeacherPretrainResult a = pretrain_teacher(cfg, train, test);
    TeacherPretrainResult b = pretrain_teacher(cfg, train, test);
    CHECK(metrics_text(a.metrics) == metrics_text(b.metrics));
    cfg.seed = 6;
    TeacherPretrainResult c = pretrain_teacher(cfg, train, test);
    CHECK(metrics_text(a.metrics) != metrics_text(c.metrics));
}

TEST_CASE("exploding steps are reported as divergence, not garbage") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(4, 0);
    cfg.lr = 1e155;
    CHECK_THROWS_AS(pretrain_teacher(cfg, train, test), NumericError);
}

// ---- head warm-up -----------------------------------------------------------------------

TEST_CASE("warm-up trains heads while the teacher stays frozen") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(6, 3);
    cfg.warmup_epochs = 2;
    cfg.dropout_probs = {0.1, 0.15, 0.2};
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);

    Rng root(cfg.seed);
    Rng hr = root.fork("head-build");
    ViewHeadSet heads = build_view_heads(cfg.n_views, tp.teacher.feature_dim,
                                         tp.teacher.num_classes, cfg.dropout_probs, cfg.tau_z, hr);
    AngularLossConfig ang = make_angular_config(cfg.gamma_init, cfg.tau_c, cfg.level);

    std::vector<Var> tparams = parameters(tp.teacher);
    const std::uint64_t teacher_sum = parameter_checksum(tparams);
    const std::uint64_t heads_before = parameter_checksum(parameters(heads));

    WarmupResult res = warmup_heads(tp.teacher, heads, ang, cfg, train);
    CHECK(parameter_checksum(tparams) == teacher_sum);                    // frozen contract
    CHECK(parameter_checksum(parameters(heads)) != heads_before);         // heads moved
    CHECK(res.metrics.size() == 2);
    for (const MetricsRow& row : res.metrics) {
        CHECK(row.phase == "warmup");
        REQUIRE(row.gamma.has_value());
        CHECK(*row.gamma >= 0.0);
        CHECK(*row.gamma <= 1.0);
        REQUIRE(row.gate_active_fraction.has_value());
        CHECK(*row.gate_active_fraction >= 0.0);
        CHECK(*row.gate_active_fraction <= 1.0);
        REQUIRE(row.diversity.has_value());
        CHECK(*row.diversity >= 0.0);
        REQUIRE(row.bound_slack.has_value());
    }
    CHECK(res.init_report.mean_inter_angle_deg >= 0.0);
    CHECK(res.final_report.mean_inter_angle_deg >= 0.0);
}

TEST_CASE("a single view trains only the alignment and label terms") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(6, 1);
    cfg.warmup_epochs = 2;
    cfg.dropout_probs = {0.1};
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    Rng hr = Rng(cfg.seed).fork("head-build");
    ViewHeadSet heads = build_view_heads(1, tp.teacher.feature_dim, tp.teacher.num_classes,
                                         cfg.dropout_probs, cfg.tau_z, hr);
    AngularLossConfig ang = make_angular_config(cfg.gamma_init, cfg.tau_c, cfg.level);
    WarmupResult res = warmup_heads(tp.teacher, heads, ang, cfg, train);
    for (const MetricsRow& row : res.metrics) {
        CHECK(*row.loss_inter_diversity == 0.0);  // no pairs to diversify
        CHECK(*row.loss_intra == 0.0);
        // the constraint term is lse minus the clipped positive, so it can sit
        // below zero; it just has to be a real number that is training
        CHECK(std::isfinite(*row.loss_inter_constraint));
        CHECK(*row.loss_inter_constraint != 0.0);
        CHECK(*row.loss_aug_gt > 0.0);
        CHECK(!row.diversity.has_value());  // pairwise stats need two views
    }
}

TEST_CASE("diversity report demands at least two heads") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(4, 1);
    cfg.dropout_probs = {0.1};
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    Rng hr = Rng(cfg.seed).fork("head-build");
    ViewHeadSet one = build_view_heads(1, tp.teacher.feature_dim, tp.teacher.num_classes, {0.1},
                                       cfg.tau_z, hr);
    CHECK_THROWS_AS(head_diversity_report(tp.teacher, one, train), ParamError);
}

// ---- joint distillation --------------------------------------------------------------------

TEST_CASE("student losses never leak gradient into the heads") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(4, 2);
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    Rng root(cfg.seed);
    Rng hr = root.fork("head-build");
    ViewHeadSet heads = build_view_heads(2, tp.teacher.feature_dim, tp.teacher.num_classes,
                                         {0.1, 0.1}, cfg.tau_z, hr);
    Rng sr = root.fork("student-init");
    StudentBundle student = make_desk_student(train.dim(), train.num_classes, sr);

    TeacherOutput t = teacher_forward(tp.teacher, train.features);
    Rng ar = root.fork("probe");
    AugmentedViews views = augment_views(heads, t.features.value(), Mode::Train, ar);
    EnsembleOutput ens = combine_ensemble(t.logits.value(), t.features.value(), views, {});

    std::vector<Var> head_params = parameters(heads);
    for (Var& p : head_params) p.zero_grad();

    StudentOutput s = student_forward(student, train.features);
    Var feat = feature_contrastive_loss(ens.feature_ensemble, s.features_projected, cfg.tau_feat);
    Var logit = kd_kl_loss(ens.logit_ensemble, s.raw_logits, cfg.tau_z);
    Var gt = student_ce_loss(train.labels, s.raw_logits);
    DistillLoss dl = total_distill_loss(feat, logit, gt);
    backward(dl.total);

    for (const Var& p : head_params) CHECK(p.grad().array().abs().maxCoeff() == 0.0);
    // and the student did receive gradient
    double snorm = 0.0;
    for (const Var& p : parameters(student)) snorm += p.grad().array().abs().sum();
    CHECK(snorm > 0.0);
}

TEST_CASE("angular distillation runs end to end and keeps the teacher frozen") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(4, 2);
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    std::vector<Var> tparams = parameters(tp.teacher);
    const std::uint64_t teacher_sum = parameter_checksum(tparams);

    ExperimentResult ex = run_experiment(tp.teacher, cfg, train, test);
    CHECK(parameter_checksum(tparams) == teacher_sum);
    CHECK(!ex.distill.diverged);
    CHECK(ex.distill.metrics.size() == 4);
    CHECK(ex.distill.view_test_accs.size() == 2);
    REQUIRE(ex.distill.final_report.has_value());
    CHECK(ex.distill.final_report->diversity_direct >= 0.0);
    for (const MetricsRow& row : ex.distill.metrics) {
        CHECK(row.phase == "distill");
        REQUIRE(row.loss_kd_kl.has_value());
        REQUIRE(row.loss_feat_contrastive.has_value());
        REQUIRE(row.loss_student_ce.has_value());
        REQUIRE(row.gamma.has_value());
        REQUIRE(row.test_acc.has_value());
    }
    // warm-up happened first and logged its own phase
    CHECK(ex.warmup.metrics.size() == 1);
    CHECK(ex.warmup.metrics.front().phase == "warmup");
}

TEST_CASE("plain mode carries no augmentation state at all") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(3, 0);
    cfg.aug_mode = AugMode::None;
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    ExperimentResult ex = run_experiment(tp.teacher, cfg, train, test);
    CHECK(ex.heads.heads.empty());
    CHECK(ex.warmup.metrics.empty());
    CHECK(ex.distill.view_test_accs.empty());
    CHECK(!ex.distill.final_report.has_value());
    CHECK(ex.distill.ensemble_test_acc == evaluate_top1(tp.teacher, test));
    for (const MetricsRow& row : ex.distill.metrics) {
        CHECK(!row.loss_inter_constraint.has_value());
        CHECK(!row.gamma.has_value());
        CHECK(!row.diversity.has_value());
        REQUIRE(row.loss_kd_kl.has_value());
        REQUIRE(row.loss_feat_contrastive.has_value());
    }
}

TEST_CASE("noise mode draws parameter-free views") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(3, 3);
    cfg.aug_mode = AugMode::Noise;
    cfg.dropout_probs = {0.1, 0.1, 0.1};
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    ExperimentResult ex = run_experiment(tp.teacher, cfg, train, test);
    CHECK(ex.heads.heads.empty());  // no trainable heads in this mode
    CHECK(ex.distill.view_test_accs.size() == 3);
    REQUIRE(ex.distill.final_report.has_value());
    for (const MetricsRow& row : ex.distill.metrics) {
        CHECK(!row.loss_inter_constraint.has_value());  // view loss disabled
        REQUIRE(row.diversity.has_value());
        CHECK(*row.diversity > 0.0);  // independent noise cannot agree exactly
    }
}

TEST_CASE("distillation is deterministic and resumable from its checkpoint") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(3, 2);
    TeacherPretrainResult tp = pretrain_teacher(cfg, train, test);
    ExperimentResult a = run_experiment(tp.teacher, cfg, train, test);
    ExperimentResult b = run_experiment(tp.teacher, cfg, train, test);
    CHECK(metrics_text(a.distill.metrics) == metrics_text(b.distill.metrics));
    CHECK(a.distill.final_test_acc == b.distill.final_test_acc);

    // checkpoint reproduces the trained student exactly
    const std::string path = tmp_path("student.ckpt");
    save_checkpoint(a.distill.student_checkpoint, path);
    Checkpoint ck = load_checkpoint(path);
    Rng sr = Rng(cfg.seed).fork("student-init");
    StudentBundle fresh = make_desk_student(train.dim(), train.num_classes, sr);
    std::vector<Var> fparams = parameters(fresh);
    restore_params(ck, "student", fparams);
    Tensor za = student_forward(a.student, test.features).raw_logits.value();
    Tensor zb = student_forward(fresh, test.features).raw_logits.value();
    CHECK((za.array() - zb.array()).abs().maxCoeff() <= 1e-15);
    CHECK(train_config_from_kv(ck.config).epochs == cfg.epochs);
    std::remove(path.c_str());
}

// ---- comparison ---------------------------------------------------------------------------

TEST_CASE("mode comparison table has one row per cell and seed") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(3, 2);
    CompareTable t = compare_experiment(cfg, {AugMode::Angular, AugMode::None}, {5, 6}, {"full"},
                                        train, test);
    REQUIRE(t.rows.size() == 4);
    CHECK(t.rows[0].mode == "angular");
    CHECK(t.rows[0].ablation == "full");
    CHECK(t.rows[0].seed == 5);
    CHECK(t.rows[1].seed == 6);
    CHECK(t.rows[2].mode == "none");
    CHECK(t.rows[2].ablation == "-");

    std::string csv = to_csv(t);
    CHECK(csv.rfind("mode,ablation,seed,test_acc,diversity,mean_inter_deg,mean_intra_deg,gate_frac\n",
                    0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

    CompareTable again = compare_experiment(cfg, {AugMode::Angular, AugMode::None}, {5, 6},
                                            {"full"}, train, test);
    CHECK(to_csv(again) == csv);  // identical seeds -> identical table
}

TEST_CASE("comparison rejects degenerate requests") {
    auto [train, test] = mini_blobs();
    TrainConfig cfg = mini_config(3, 2);
    CHECK_THROWS_AS(compare_experiment(cfg, {AugMode::None}, {5}, {}, train, test), ParamError);
    CHECK_THROWS_AS(compare_experiment(cfg, {}, {5, 6}, {}, train, test), ParamError);
    CHECK_THROWS_AS(compare_experiment(cfg, {AugMode::Angular}, {5, 6}, {"sideways"}, train, test),
                    ParamError);
}

TEST_CASE("summaries aggregate seeds per cell") {
    CompareTable t;
    t.rows.push_back({"angular", "full", 1, 0.8, 0.1, 30.0, 20.0, 0.5});
    t.rows.push_back({"angular", "full", 2, 0.6, 0.3, 40.0, 30.0, 0.7});
    t.rows.push_back({"none", "-", 1, 0.5, 0.0, 0.0, 0.0, 0.0});
    auto s = summarize(t);
    REQUIRE(s.size() == 2);
    CHECK(s[0].mode == "angular");
    CHECK(s[0].num_seeds == 2);
    CHECK(s[0].mean_acc == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(s[0].std_acc == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(s[0].mean_diversity == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(s[1].mode == "none");
    CHECK(s[1].num_seeds == 1);
    std::string csv = to_csv(s);
    CHECK(csv.rfind("mode,ablation,num_seeds,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
