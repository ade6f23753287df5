#include <doctest.h>

#include <cmath>

#include "vglab/gradcheck.hpp"
#include "vglab/losses.hpp"
#include "vglab/optimizer.hpp"
#include "vglab/rng.hpp"
#include "vglab/trainer.hpp"

using namespace vg;

namespace {

BranchOutput<double> make_output(const std::vector<BoxCxCyWh>& boxes,
                                 const std::vector<double>& logits, bool rg = false) {
  BranchOutput<double> out;
  std::vector<double> bv;
  for (const BoxCxCyWh& b : boxes) {
    bv.push_back(b.cx);
    bv.push_back(b.cy);
    bv.push_back(b.w);
    bv.push_back(b.h);
  }
  out.boxes = Tensor<double>::from({static_cast<int>(boxes.size()), 4}, bv, rg);
  out.score_logits = Tensor<double>::from({static_cast<int>(logits.size()), 1}, logits, rg);
  return out;
}

Assignment match_against(const BranchOutput<double>& pred, const std::vector<BoxCxCyWh>& gt,
                         const LossWeights& w) {
  std::vector<BoxCxCyWh> boxes;
  std::vector<double> scores;
  for (int i = 0; i < pred.num_queries(); ++i) {
    boxes.push_back(pred.box_at(i));
    scores.push_back(pred.score_at(i));
  }
  return hungarian(build_cost_matrix(boxes, scores, gt, {w.lambda1, w.lambda2, w.lambda3}));
}

// BCE(x, sigmoid(x)): the unavoidable classification floor when the student
// matches the teacher exactly
double self_bce(double x) {
  auto softplus = [](double v) { return std::log1p(std::exp(-std::fabs(v))) + std::max(v, 0.0); };
  const double p = 1.0 / (1.0 + std::exp(-x));
  return p * softplus(-x) + (1 - p) * softplus(x);
}

}  // namespace

TEST_CASE("giou_pairs agrees with the scalar implementation") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto rb = [&]() -> BoxCxCyWh {
      const double w = rng.uniform(0.05, 0.5), h = rng.uniform(0.05, 0.5);
      return {rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h};
    };
    const BoxCxCyWh a = rb(), b = rb();
    BranchOutput<double> pa = make_output({a}, {0.0});
    BranchOutput<double> pb = make_output({b}, {0.0});
    Tensor<double> g = giou_pairs(pa.boxes, pb.boxes);
    CHECK(g.at(0, 0) == doctest::Approx(giou(a.to_xyxy(), b.to_xyxy())).epsilon(1e-7));
  }
}

TEST_CASE("giou_pairs backward matches finite differences") {
  Rng rng(6);
  Tensor<double> pred = Tensor<double>::zeros({3, 4}, true);
  Tensor<double> tgt = Tensor<double>::zeros({3, 4});
  for (auto& v : *pred.data) v = rng.uniform(0.25, 0.75);
  for (auto& v : *tgt.data) v = rng.uniform(0.25, 0.75);
  auto f = [&]() { return sum(giou_pairs(pred, tgt)); };
  GradCheckReport r = grad_check<double>(f, {&pred}, 1e-6, 1e-4);
  CHECK_MESSAGE(r.pass, "giou max_rel_err=", r.max_rel_err);
}

TEST_CASE("det_loss forced cases") {
  LossWeights w;
  const BoxCxCyWh b1{0.3, 0.3, 0.2, 0.2}, b2{0.7, 0.7, 0.25, 0.25};

  // near-perfect prediction: matched boxes identical, matched score ~1,
  // unmatched score ~0
  BranchOutput<double> perfect = make_output({b1, b2, {0.5, 0.5, 0.1, 0.1}}, {20.0, 20.0, -20.0});
  Assignment a = match_against(perfect, {b1, b2}, w);
  Tensor<double> loss = det_loss(perfect, {b1, b2}, a, w);
  CHECK(loss.item() < 1e-6);

  // no-target: a single query at score 0.5 leaves only the class term
  BranchOutput<double> half = make_output({b1}, {0.0});
  Tensor<double> l2 = det_loss(half, {}, Assignment{}, w);
  CHECK(l2.item() == doctest::Approx(w.lambda1 * std::log(2.0)).epsilon(1e-12));

  // doubling lambda2 doubles exactly the L1 component
  BranchOutput<double> off = make_output({{0.4, 0.3, 0.2, 0.2}}, {1.0});
  Assignment a3 = match_against(off, {b1}, w);
  const double base = det_loss(off, {b1}, a3, w).item();
  LossWeights w2 = w;
  w2.lambda2 *= 2;
  const double doubled = det_loss(off, {b1}, a3, w2).item();
  LossWeights wl1_only = w;
  wl1_only.lambda1 = 0;
  wl1_only.lambda3 = 0;
  const double l1_component = det_loss(off, {b1}, a3, wl1_only).item();
  CHECK(doubled - base == doctest::Approx(l1_component).epsilon(1e-9));

  // malformed assignment is rejected
  Assignment bad;
  bad.pairs = {{0, 0}, {0, 1}};
  CHECK_THROWS_AS(det_loss(off, {b1, b2}, bad, w), std::invalid_argument);
}

TEST_CASE("teacher confidence weight") {
  const BoxCxCyWh gt{0.5, 0.5, 0.4, 0.4};
  BranchOutput<double> exact = make_output({gt}, {40.0});
  Assignment a;
  a.pairs = {{0, 0}};
  CHECK(compute_wdt(exact, {gt}, a) == doctest::Approx(1.0).epsilon(1e-9));

  // matched IoU times a 0.8 score
  const BoxCxCyWh half{0.4, 0.5, 0.4, 0.4};
  const double i = iou(half.to_xyxy(), gt.to_xyxy());
  const double logit08 = std::log(0.8 / 0.2);
  BranchOutput<double> p2 = make_output({half}, {logit08});
  CHECK(compute_wdt(p2, {gt}, a) == doctest::Approx(i * 0.8).epsilon(1e-9));

  // two ground truths, one matched perfectly and one missed entirely
  const BoxCxCyWh g2{0.1, 0.1, 0.1, 0.1};
  BranchOutput<double> p3 = make_output({gt, {0.9, 0.9, 0.05, 0.05}}, {40.0, 40.0});
  Assignment a2;
  a2.pairs = {{0, 0}, {1, 1}};
  CHECK(compute_wdt(p3, {gt, g2}, a2) == doctest::Approx(0.5).epsilon(1e-9));

  CHECK_THROWS_AS(compute_wdt(exact, {}, a), std::invalid_argument);
}

TEST_CASE("dwbd loss structure") {
  LossWeights w;
  const BoxCxCyWh gt{0.5, 0.5, 0.4, 0.4};

  SUBCASE("weak teacher: loss reduces to the gt term") {
    BranchOutput<double> decoder = make_output({{0.1, 0.1, 0.05, 0.05}}, {0.0});
    BranchOutput<double> token = make_output({{0.4, 0.5, 0.3, 0.3}}, {0.5}, true);
    auto [loss, rec] = dwbd_loss(token, decoder, {gt}, w);
    CHECK(rec.w_dt == 0.0);
    CHECK(rec.w_gt == 1.0);
    Assignment ta = match_against(token, {gt}, w);
    const double gt_term = det_loss(token, {gt}, ta, w).item();
    CHECK(loss.item() == doctest::Approx(w.gamma2 * gt_term).epsilon(1e-12));
  }

  SUBCASE("identical branches: distillation term hits the self-BCE floor") {
    const std::vector<BoxCxCyWh> boxes = {gt, {0.2, 0.2, 0.1, 0.1}};
    const std::vector<double> logits = {2.0, -1.5};
    BranchOutput<double> decoder = make_output(boxes, logits);
    BranchOutput<double> token = make_output(boxes, logits, true);
    auto [loss, rec] = dwbd_loss(token, decoder, {gt}, w);
    Assignment ta = match_against(token, {gt}, w);
    const double gt_term = det_loss(token, {gt}, ta, w).item();
    const double floor = w.lambda1 * 0.5 * (self_bce(2.0) + self_bce(-1.5));
    const double expect = w.gamma1 * rec.w_dt * floor + w.gamma2 * rec.w_gt * gt_term;
    CHECK(rec.w_dt > 0.5);  // confident, well-placed teacher
    // the box terms vanish up to the epsilon guards inside the GIoU ratio
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-6));
  }

  SUBCASE("no-target sample forces pure gt supervision") {
    BranchOutput<double> decoder = make_output({{0.5, 0.5, 0.2, 0.2}}, {3.0});
    BranchOutput<double> token = make_output({{0.4, 0.4, 0.2, 0.2}}, {1.0}, true);
    auto [loss, rec] = dwbd_loss(token, decoder, {}, w);
    CHECK(rec.w_dt == 0.0);
    const double expect =
        w.gamma2 * w.lambda1 * (std::max(1.0, 0.0) - 1.0 * 0.0 + std::log1p(std::exp(-1.0)));
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-9));
  }

  SUBCASE("w_gt + w_dt stays exactly one over random instances") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      auto rb = [&]() -> BoxCxCyWh {
        const double bw = rng.uniform(0.1, 0.4), bh = rng.uniform(0.1, 0.4);
        return {rng.uniform(bw / 2, 1 - bw / 2), rng.uniform(bh / 2, 1 - bh / 2), bw, bh};
      };
      BranchOutput<double> decoder =
          make_output({rb(), rb()}, {rng.uniform(-2, 2), rng.uniform(-2, 2)});
      BranchOutput<double> token =
          make_output({rb(), rb()}, {rng.uniform(-2, 2), rng.uniform(-2, 2)}, true);
      auto [loss, rec] = dwbd_loss(token, decoder, {rb()}, w);
      CHECK(rec.w_dt + rec.w_gt == 1.0);
      CHECK(rec.w_dt >= 0.0);
      CHECK(rec.w_dt <= 1.0);
    }
  }
}

TEST_CASE("total loss decomposes additively and detaches the teacher") {
  LossWeights w;
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.embed_dim = 8;
  cfg.mme_layers = 1;
  cfg.mme_heads = 2;
  cfg.decoder_layers = 1;
  cfg.tqg_layers = 1;
  cfg.num_queries = 2;
  cfg.max_text_len = 3;
  cfg.vocab_size = 10;
  cfg.ffn_mult = 2;
  ModelParams<double> p = init_params<double>(cfg, 50);
  p.set_requires_grad();
  Rng rng(51);
  Tensor<double> img = Tensor<double>::zeros({3, 16, 16});
  for (auto& v : *img.data) v = rng.uniform();
  const std::vector<int> ids = {2, 3};
  const std::vector<BoxCxCyWh> gt = {{0.4, 0.6, 0.3, 0.2}};

  // additivity of the combined objective
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    ForwardResult<double> fr = forward(img, ids, p, cfg, ForwardMode::kTrain);
    TotalLossResult<double> tl = total_loss<double>(*fr.decoder, &*fr.token, gt, w);
    Tensor<double> det = det_loss(*fr.decoder, gt, tl.decoder_assignment, w);
    auto [dwbd, rec] = dwbd_loss(*fr.token, *fr.decoder, gt, w);
    CHECK(tl.total.item() == doctest::Approx(det.item() + dwbd.item()).epsilon(1e-12));
    CHECK(tl.record.w_dt == rec.w_dt);
  }

  // the distillation loss alone sends exactly zero gradient into any
  // decoder-exclusive parameter, and nonzero gradient into the token branch
  {
    p.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    ForwardResult<double> fr = forward(img, ids, p, cfg, ForwardMode::kTrain);
    auto [dwbd, rec] = dwbd_loss(*fr.token, *fr.decoder, gt, w);
    REQUIRE(rec.w_dt > 0.0);  // teacher path active in this probe
    tape.backward(dwbd);
    auto grad_mass = [](const std::vector<Tensor<double>*>& ts) {
      double s = 0;
      for (auto* t : ts)
        for (double g : *t->grad) s += std::fabs(g);
      return s;
    };
    std::vector<Tensor<double>*> decoder_only = {
        &p.image_proj.w, &p.decoder[0].self_attn.q.w, &p.decoder[0].cross_attn.v.w,
        &p.decoder_heads.box3.w, &p.decoder_heads.score.w};
    CHECK(grad_mass(decoder_only) == 0.0);
    std::vector<Tensor<double>*> token_side = {&p.object_proj.w, &p.token_heads.box3.w};
    CHECK(grad_mass(token_side) > 0.0);
    // shared trunk still learns through the student path
    std::vector<Tensor<double>*> shared = {&p.mme[0].attn.q.w, &p.text_proj.w};
    CHECK(grad_mass(shared) > 0.0);

    // finite-difference probe under stop-gradient semantics: freeze the
    // pseudo-targets, perturb a decoder weight, and the loss must not move
    BranchOutput<double> frozen_decoder;
    frozen_decoder.boxes = fr.decoder->boxes.detach();
    frozen_decoder.score_logits = fr.decoder->score_logits.detach();
    const double before = dwbd.item();
    ModelParams<double> p2 = p;
    p2.decoder_heads.box3.b = p.decoder_heads.box3.b.detach();
    (*p2.decoder_heads.box3.b.data)[1] += 1e-3;
    ForwardResult<double> fr2 = forward(img, ids, p2, cfg, ForwardMode::kTrain);
    auto [dwbd2, rec2] = dwbd_loss(*fr2.token, frozen_decoder, gt, w);
    CHECK(dwbd2.item() == doctest::Approx(before).epsilon(1e-12));
  }
}

TEST_CASE("adam step") {
  Tensor<float> p = Tensor<float>::from({1}, {1.0f}, true);
  AdamState<float> st;
  st.init_for({&p});

  // zero grads, zero decay: unchanged
  adam_step<float>({&p}, st, 0.1, 0.0);
  CHECK((*p.data)[0] == 1.0f);

  // constant gradient: the bias-corrected first step moves by about -lr
  Tensor<float> q = Tensor<float>::from({1}, {1.0f}, true);
  AdamState<float> st2;
  st2.init_for({&q});
  (*q.grad)[0] = 0.3f;
  adam_step<float>({&q}, st2, 0.01, 0.0);
  CHECK((*q.data)[0] == doctest::Approx(1.0f - 0.01f).epsilon(1e-4));

  // decay-only updates shrink the parameter monotonically
  Tensor<float> r = Tensor<float>::from({1}, {2.0f}, true);
  AdamState<float> st3;
  st3.init_for({&r});
  float prev = 2.0f;
  for (int i = 0; i < 5; ++i) {
    adam_step<float>({&r}, st3, 0.1, 0.5);
    CHECK((*r.data)[0] < prev);
    prev = (*r.data)[0];
  }

  // non-finite gradient is a hard error
  Tensor<float> s = Tensor<float>::from({1}, {1.0f}, true);
  AdamState<float> st4;
  st4.init_for({&s});
  (*s.grad)[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(adam_step<float>({&s}, st4, 0.1, 0.0), std::runtime_error);
}

TEST_CASE("training loop smoke: schedules, records, determinism") {
  DatasetOptions opts;
  opts.task = "REC";
  auto samples = generate_colorshapes(123, 24, opts);
  ModelConfig mcfg;
  mcfg.image_size = 16;
  mcfg.patch_size = 8;
  mcfg.embed_dim = 8;
  mcfg.mme_layers = 1;
  mcfg.mme_heads = 2;
  mcfg.decoder_layers = 1;
  mcfg.tqg_layers = 1;
  mcfg.num_queries = 1;
  mcfg.max_text_len = 6;
  mcfg.vocab_size = Vocab::builtin().size();
  mcfg.ffn_mult = 2;
  auto prepared = prepare_samples(samples, mcfg, ".");

  TrainConfig tcfg;
  tcfg.stage1_epochs = 1;
  tcfg.stage2_epochs = 1;
  tcfg.batch_size = 8;
  tcfg.learning_rate = 1e-3;
  tcfg.seed = 7;
  tcfg.eval_max = 24;

  TrainResult a = two_stage_train(prepared, {}, mcfg, tcfg);
  CHECK(a.history.size() == 2);
  CHECK(a.history[0].stage == 1);
  CHECK(a.history[1].stage == 2);
  CHECK(a.stage2_first_step == 3);  // 24 samples / batch 8 = 3 steps in stage 1
  for (const DistillRecord& r : a.records) {
    CHECK(r.w_dt + r.w_gt == 1.0);
    CHECK(r.w_dt >= 0.0);
    CHECK(r.w_dt <= 1.0);
  }
  // stage-1 records never touch the teacher
  CHECK(a.records[0].w_dt == 0.0);
  CHECK(a.records[0].loss_dwbd == 0.0);

  // stage1_epochs = 0 degenerates to one-stage distillation
  TrainConfig one = tcfg;
  one.stage1_epochs = 0;
  TrainResult b = two_stage_train(prepared, {}, mcfg, one);
  CHECK(b.stage2_first_step == 0);
  CHECK(b.history.size() == 1);
  CHECK(b.history[0].stage == 2);

  // same seed, same data: bit-identical history and records
  TrainResult c = two_stage_train(prepared, {}, mcfg, tcfg);
  REQUIRE(c.records.size() == a.records.size());
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    CHECK(c.records[i].w_dt == a.records[i].w_dt);
    CHECK(c.records[i].loss_det == a.records[i].loss_det);
    CHECK(c.records[i].loss_dwbd == a.records[i].loss_dwbd);
  }
  for (std::size_t i = 0; i < c.history.size(); ++i) {
    CHECK(c.history[i].mean_loss == a.history[i].mean_loss);
    CHECK(c.history[i].decoder_eval.precision == a.history[i].decoder_eval.precision);
    CHECK(c.history[i].token_eval.precision == a.history[i].token_eval.precision);
  }
}
