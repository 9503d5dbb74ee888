// Acceptance run: one PASS/FAIL line per criterion. Criterion 6 is soft and
// does not affect the exit status.
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/random.hpp"
#include "tmvod/train.hpp"

using namespace tmvod;
using tmvod::testing::gradcheck;
using tmvod::testing::GradCheckResult;
using tmvod::testing::random_box;
using tmvod::testing::random_param;
using tmvod::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

void report(int id, const std::string& name, bool pass, double secs, const std::string& detail, bool soft = false) {
  std::cout << (pass ? "PASS" : soft ? "SOFT-FAIL" : "FAIL") << "  criterion " << id << "  " << name << "  ("
            << std::fixed << std::setprecision(1) << secs << " s)  " << detail << std::endl;
}

// FNV-1a over the raw bytes of tensors and scalars.
struct Fingerprint {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ULL;
    }
  }
  template <typename T>
  void tensor(const Tensor<T>& t) {
    for (int d : t.shape()) bytes(&d, sizeof d);
    bytes(t.data(), t.size() * sizeof(T));
  }
  void var(const ag::Var<float>& v) {
    if (v) tensor(v->value);
  }
  void boxes(const std::vector<Box>& bs) {
    for (const Box& b : bs) bytes(&b, sizeof b);
  }
};

// ------------------------------------------------------------------ 1

TgRpnConfig small_tg() {
  TgRpnConfig c;
  c.channels = 8;
  c.gate_hidden = 4;
  c.motion_hidden = 4;
  c.se_reduction = 2;
  return c;
}

template <typename T>
ParamStore<T> tg_params(const TgRpnConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<T> ps;
  create_tg_rpn_gate(ps, rng, cfg);
  create_tg_rpn_motion(ps, rng, cfg);
  init::normal(ps.get("mam.cwa.fc2.weight")->value, 0.5, rng);
  return ps;
}

void criterion_invariants() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng rng(101);

  const auto tg = small_tg();
  double gate_dev = 0;
  for (int trial = 0; trial < 30; ++trial) {
    auto ps = tg_params<float>(tg, trial);
    auto a = ag::constant(random_tensor<float>({4, 8, 12, 12}, rng, -3, 3));
    auto b = ag::constant(random_tensor<float>({4, 8, 12, 12}, rng, -3, 3));
    const auto g = gam_gate(ps, tg, a, b);
    for (std::size_t i = 0; i < g.reference->value.size(); ++i) {
      const double s = static_cast<double>(g.reference->value[i]) + static_cast<double>(g.other->value[i]);
      gate_dev = std::max(gate_dev, std::abs(s - 1.0));
    }
  }
  o.require(gate_dev < 1e-6, "gate complementarity");

  int cos_out = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto ref = ag::constant(random_tensor<float>({3, 16}, rng, -5, 5));
    auto frames = ag::constant(random_tensor<float>({15, 16}, rng, -5, 5));
    const auto w = cosine_weights(ref, frames);
    for (float v : w->value.values()) cos_out += v < -1.0f || v > 1.0f;
  }
  o.require(cos_out == 0, "cosine weights in [-1, 1]");

  double p_ref = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 5, ref = trial % k;
    std::vector<LinkedProposal> linked(3);
    for (auto& lp : linked) {
      for (int f = 0; f < k; ++f) lp.boxes.push_back(random_box(rng, 96, 4));
      lp.anchor = lp.boxes[ref];
    }
    for (bool norm : {false, true}) {
      const auto p = box_differences<double>(linked, ref, norm);
      for (int r = 0; r < 3; ++r)
        for (int j = 0; j < 4; ++j) p_ref = std::max(p_ref, std::abs(p.at(r, 4 * ref + j)));
    }
  }
  o.require(p_ref == 0.0, "box displacement at the reference frame");

  double motion_max = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto ps = tg_params<float>(tg, 50 + trial);
    auto x = ag::constant(random_tensor<float>({2, 8, 12, 12}, rng));
    const auto pair_motion = mam_motion(ps, tg, x, x);
    for (float v : pair_motion->value.values()) motion_max = std::max(motion_max, std::abs(double(v)));
    FeatureMapSet<float> f;
    f.maps = ag::repeat_leading(ag::slice(x, 0, 0, 1), 5);
    f.reference_index = 2;
    const auto block = tg_rpn_forward(ps, tg, f, true);
    for (float v : block.motion->value.values()) motion_max = std::max(motion_max, std::abs(double(v)));
  }
  o.require(motion_max == 0.0, "motion map for identical frames");

  bool partition = true;
  SceneConfig scene;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto gts = ground_truth_records(generate_video(scene, 7000 + seed));
    const auto buckets = motion_split(gts, 2);
    partition = partition && buckets.size() == gts.size();
    const auto r = evaluate({}, gts, EvalConfig{});
    int visible = 0, counted[3] = {0, 0, 0};
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (gts[i].ignore) continue;
      ++visible;
      ++counted[static_cast<int>(buckets[i])];
    }
    partition = partition && r.gt_slow + r.gt_medium + r.gt_fast == visible && r.gt_slow == counted[0] &&
                r.gt_medium == counted[1] && r.gt_fast == counted[2];
  }
  o.require(partition, "motion-split partition");

  double softmax_dev = 0;
  JtmgConfig jc;
  jc.channels = 8;
  jc.aggregate_dim = 8;
  jc.displacement_dim = 8;
  jc.gru_hidden = 4;
  jc.head_hidden = 8;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore<float> ps;
    Rng prng(200 + trial);
    create_detection_head(ps, prng, jc.head_input_dim(), jc.head_hidden, jc.num_classes);
    init::normal(ps.get("head.cls.weight")->value, 3.0, prng);
    auto g = ag::constant(random_tensor<float>({16, jc.head_input_dim()}, rng, -5, 5));
    const auto head = detection_head(ps, g);
    for (const auto& p : softmax_rows(head.class_logits->value))
      softmax_dev = std::max(softmax_dev, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
  }
  o.require(softmax_dev < 1e-6, "softmax normalization");

  const double secs = seconds_since(t0);
  o.require(secs < 60, "runtime under 1 min");
  o.detail << "max|A_t+A_t-i-1|=" << gate_dev << " cos_out_of_range=" << cos_out << " max|p_t|=" << p_ref
           << " max|M|=" << motion_max << " max|sum softmax-1|=" << softmax_dev;
  report(1, "invariant suite", o.pass, secs, o.detail.str());
}

// ------------------------------------------------------------------ 2

GroundTruthObject gt_obj(int track, int cls, const Box& b) {
  GroundTruthObject g;
  g.track_id = track;
  g.class_id = cls;
  g.bbox = b;
  return g;
}

std::vector<ag::Var<double>> with_params(std::vector<ag::Var<double>> inputs, const ParamStore<double>& ps,
                                         const std::string& prefix = "") {
  for (const auto& [name, p] : ps.all())
    if (name.rfind(prefix, 0) == 0) inputs.push_back(p);
  return inputs;
}


// Every parameter of a float64 micro-model (C = 8, 16x16 frames) against
// L_total. Proposals and linked boxes are pinned so that the discrete choices
// stay fixed under perturbation.
GradCheckResult grad_micro_model() {
  DetectorConfig dc;
  dc.variant = Variant::kE;
  dc.backbone.widths = {4, 4, 8, 8};
  dc.backbone.strides = {2, 2, 1, 1};
  dc.tg.gate_hidden = 4;
  dc.tg.motion_hidden = 4;
  dc.tg.se_reduction = 2;
  dc.rpn.hidden = 8;
  dc.mtbr.offset_hidden = 6;
  dc.jtmg.aggregate_dim = 6;
  dc.jtmg.displacement_dim = 6;
  dc.jtmg.gru_hidden = 4;
  dc.jtmg.head_hidden = 6;
  dc.roi_size = 3;
  dc.sync();

  SceneConfig sc;
  sc.width = sc.height = 16;
  sc.min_size = 6;
  sc.max_size = 10;
  sc.min_vx = sc.min_vy = -1;
  sc.max_vx = sc.max_vy = 1;
  sc.num_frames = 5;
  sc.occlusion_prob = 0;
  const VideoSample video = generate_video(sc, 11);
  Detector<double> det(dc, 12);
  const WindowInput in = det.input_for(window_at(video, 2, 2, 2));

  ForwardOverrides ov;
  {
    const auto first = det.first_stage(in, true);
    const auto& p = first.rpn.proposals;
    ov.proposals = std::vector<Box>(p.begin(), p.begin() + std::min<std::ptrdiff_t>(4, std::ssize(p)));
    Rng r(13);
    ov.linked = det.training_step(in, r, ov).trace.tboc.linked;
  }
  auto f = [&] {
    Rng r(13);
    return det.training_step(in, r, ov).l_total;
  };
  return gradcheck(f, with_params({}, det.params()), 1e-6, 1e-4, 1e-6, 4);
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  int ops = 0;
  std::size_t entries = 0;
  double worst = 0;
  auto check = [&](const std::string& name, const GradCheckResult& r) {
    ++ops;
    entries += r.checked;
    worst = std::max(worst, r.max_abs_error);
    o.require(r.ok, name + " [" + r.worst + "]");
  };
  Rng rng(300);

  {
    TgRpnConfig cfg = small_tg();
    cfg.channels = 4;
    cfg.gate_hidden = 3;
    cfg.motion_hidden = 3;
    auto ps = tg_params<double>(cfg, 301);
    auto ft = random_param({1, 4, 8, 8}, rng), fo = random_param({1, 4, 8, 8}, rng);
    check("gam_gate", gradcheck([&] { return gam_gate(ps, cfg, ft, fo).reference; },
                                with_params({ft, fo}, ps, "gam."), 1e-6, 1e-4, 1e-6, 60));
    auto gate = random_param({1, 1, 8, 8}, rng, 0.05, 0.95);
    check("gated_fuse", gradcheck(
                            [&] {
                              return gated_fuse(ft, fo, GatePair<double>{gate, ag::one_minus(gate)});
                            },
                            {ft, fo, gate}));
    check("mam_motion", gradcheck([&] { return mam_motion(ps, cfg, ft, fo); }, with_params({ft, fo}, ps, "mam."),
                                  1e-6, 1e-4, 1e-6, 60));
  }
  {
    auto map = random_param({2, 2, 8, 8}, rng);
    std::vector<RoI> rois{{0, {3, 5, 40, 33}}, {1, {-6, 10, 20, 70}}, {0, {30.5, 2.25, 63, 60}}};
    check("roi_align",
          gradcheck([&] { return ag::mul(roi_align(map, rois, 8, 4), roi_align(map, rois, 8, 4)); }, {map}));
  }
  {
    MtbrConfig cfg;
    cfg.channels = 4;
    cfg.roi_size = 3;
    cfg.offset_hidden = 6;
    Rng prng(302);
    ParamStore<double> ps;
    create_tboc(ps, prng, cfg);
    init::normal(ps.get("tboc.offset.fc2.weight")->value, 0.3, prng);
    auto maps = random_param({3, 4, 8, 8}, rng);
    std::vector<Box> anchors{{4, 6, 30, 40}, {20, 18, 60, 58}};
    auto f = [&] {
      auto out = tboc_forward(ps, cfg, maps, anchors, 8, ImageSize{64, 64});
      return ag::concat<double>({ag::reshape(ag::tanh(out.deltas), {24}), ag::reshape(out.class_logits, {6})}, 0);
    };
    check("tboc head", gradcheck(f, with_params({maps}, ps), 1e-6, 1e-4, 1e-6, 50));
  }
  JtmgConfig jc;
  jc.channels = 4;
  jc.aggregate_dim = 5;
  jc.displacement_dim = 6;
  jc.gru_hidden = 8;
  jc.head_hidden = 7;
  {
    Rng prng(303);
    ParamStore<double> ps;
    LinearSpec<double>{"jtmg.agg.fc", jc.channels, jc.aggregate_dim}.create(ps, prng);
    auto ref = random_param({2, 4}, rng), frames = random_param({10, 4}, rng);
    check("box-level aggregation",
          gradcheck([&] { return box_level_aggregate(ps, jc, ref, frames, cosine_weights(ref, frames)); },
                    with_params({ref, frames}, ps)));
  }
  {
    Rng prng(304);
    ParamStore<double> ps;
    create_motion_gru(ps, prng, jc);
    std::vector<ag::Var<double>> seq;
    for (int i = 0; i < 5; ++i) seq.push_back(random_param({2, 4}, rng));
    check("bi-GRU", gradcheck([&] { return motion_gru(ps, jc, seq); }, with_params(seq, ps)));
  }
  {
    RpnTargets<double> t;
    t.labels = {1, 0, 1, 0};
    t.cls_weights = {0.25, 0.25, 0.25, 0.25};
    t.reg_weights = {0.25, 0, 0.25, 0};
    t.reg_targets = random_tensor({4, 4}, rng);
    auto logits = random_param({4}, rng, -2, 2), deltas = random_param({4, 4}, rng, -2, 2);
    check("rpn loss", gradcheck(
                          [&] {
                            const auto l = rpn_loss(logits, deltas, t);
                            return ag::add(l.cls, l.reg);
                          },
                          {logits, deltas}));
  }
  {
    std::vector<std::vector<GroundTruthObject>> frames(3, {gt_obj(1, 0, {10, 10, 30, 30})});
    frames[0][0].bbox = {12, 9, 33, 31};
    const auto t = build_ref_targets<double>({{8, 8, 28, 30}, {50, 50, 70, 70}}, {1, 0}, {0, -1}, frames, 1);
    auto logits = random_param({2, 3}, rng), deltas = random_param({6, 4}, rng, -2, 2);
    check("ref loss", gradcheck([&] { return ref_loss(logits, deltas, t); }, {logits, deltas}));
  }
  {
    std::vector<GroundTruthObject> gts{gt_obj(0, 1, {10, 10, 40, 40})};
    const auto t = build_det_targets<double>({{12, 8, 44, 38}, {60, 60, 90, 90}}, {2, 0}, {0, -1}, gts);
    auto logits = random_param({2, 3}, rng), deltas = random_param({2, 4}, rng, -2, 2);
    check("det loss", gradcheck([&] { return det_loss(logits, deltas, t); }, {logits, deltas}));
  }
  check("micro-model L_total", grad_micro_model());

  const double secs = seconds_since(t0);
  o.require(secs < 300, "runtime under 5 min");
  o.detail << ops << " operations, " << entries << " entries, max abs error " << worst;
  report(2, "gradient suite (float64, rtol 1e-4, atol 1e-6)", o.pass, secs, o.detail.str());
}

// ------------------------------------------------------------------ 3

struct Fixture {
  std::vector<DetectionRecord> dets;
  std::vector<GroundTruthRecord> gts;
};

Fixture random_fixture(Rng& rng, int classes) {
  std::uniform_int_distribution<int> nv(1, 2), nf(1, 3), ng(0, 3), nd(0, 5), cls(0, classes - 1), coin(0, 5);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  Fixture fx;
  for (int v = nv(rng); v > 0; --v) {
    const std::string vid = "v" + std::to_string(v);
    for (int f = nf(rng); f > 0; --f) {
      std::vector<Box> boxes;
      for (int g = ng(rng); g > 0; --g) {
        boxes.push_back(random_box(rng, 40, 8, 4));
        fx.gts.push_back({vid, f, cls(rng), g, boxes.back(), coin(rng) == 0});
      }
      for (int d = nd(rng); d > 0; --d) {
        Box b = random_box(rng, 40, 8, 4);
        if (!boxes.empty() && coin(rng) < 3) {
          b = boxes[std::uniform_int_distribution<int>(0, static_cast<int>(boxes.size()) - 1)(rng)];
          b.x2 += std::uniform_int_distribution<int>(0, 2)(rng) * 2;
        }
        fx.dets.push_back({vid, f, cls(rng), score(rng), b});
      }
    }
  }
  return fx;
}

void criterion_oracles() {
  const auto t0 = Clock::now();
  Outcome o;
  std::ostringstream counts;
  auto tally = [&](const std::string& name, int instances, int mismatches) {
    counts << name << " " << instances - mismatches << "/" << instances << ", ";
    o.require(instances >= 100 && mismatches == 0, name);
  };
  Rng rng(400);

  int bad = 0;
  for (int i = 0; i < 300; ++i) {
    const Box a = random_box(rng, 50, 0.5), b = random_box(rng, 50, 0.5);
    bad += std::abs(iou(a, b) - oracle::iou(a, b)) > 1e-6;
  }
  tally("IoU", 300, bad);

  bad = 0;
  std::uniform_int_distribution<int> count(1, 9), coarse(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ScoredBox> boxes;
    for (int i = count(rng); i > 0; --i) boxes.push_back({random_box(rng, 30, 4, 2), coarse(rng) * 0.25});
    const double thr = 0.3 + 0.2 * (trial % 3);
    const std::size_t keep = trial % 4 == 0 ? 2 : SIZE_MAX;
    bad += nms(boxes, thr, keep) != oracle::nms(boxes, thr, keep);
  }
  tally("NMS", 200, bad);

  bad = 0;
  std::uniform_int_distribution<int> nc(1, 12), ng(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> cands, gts;
    for (int i = nc(rng); i > 0; --i) cands.push_back(random_box(rng, 40, 2, 2));
    for (int i = ng(rng); i > 0; --i) gts.push_back(random_box(rng, 40, 2, 2));
    const auto got = assign_targets(cands, gts, 0.5, 0.3);
    const auto want = oracle::assign(cands, gts, 0.5, 0.3);
    bool same = got.labels.size() == cands.size();
    for (std::size_t i = 0; same && i < cands.size(); ++i) {
      same = static_cast<int>(got.labels[i]) == want.labels[i] &&
             (want.labels[i] != 1 || got.matched_gt[i] == want.matched[i]);
    }
    bad += !same;
  }
  tally("assignment", 200, bad);

  bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Fixture fx = random_fixture(rng, 2);
    for (int c = 0; c < 2; ++c) {
      const auto got = average_precision(fx.dets, fx.gts, c);
      const auto want = oracle::average_precision(fx.dets, fx.gts, c, 0.5);
      if (got.has_value() != want.has_value() || (got && std::abs(*got - *want) > 1e-6)) {
        ++bad;
        break;
      }
    }
  }
  tally("AP", 200, bad);

  bad = 0;
  for (int trial = 0; trial < 150; ++trial) {
    const Fixture fx = random_fixture(rng, 2);
    double sum = 0;
    int n = 0;
    for (int c = 0; c < 2; ++c)
      if (auto ap = oracle::average_precision(fx.dets, fx.gts, c, 0.5)) {
        sum += *ap;
        ++n;
      }
    bad += std::abs(evaluate(fx.dets, fx.gts, EvalConfig{}).map - (n ? sum / n : 0.0)) > 1e-6;
  }
  tally("mAP", 150, bad);

  bad = 0;
  std::uniform_int_distribution<int> cls3(0, 2), coin(0, 3);
  for (int trial = 0; trial < 150; ++trial) {
    const int k = 5, r = 3;
    std::vector<std::vector<GroundTruthObject>> frames(k);
    for (int tr = 0; tr < 3; ++tr)
      for (int j = 0; j < k; ++j) {
        if (j != 2 && coin(rng) == 0) continue;
        frames[j].push_back(gt_obj(10 + tr, tr % 2, random_box(rng, 96, 6)));
      }
    std::vector<Box> anchors;
    std::vector<int> labels, matched, track_of;
    for (int i = 0; i < r; ++i) {
      anchors.push_back(random_box(rng, 96, 6));
      const int m = cls3(rng) == 0 ? -1 : cls3(rng) % static_cast<int>(frames[2].size());
      matched.push_back(m);
      labels.push_back(m < 0 ? 0 : frames[2][m].class_id + 1);
      track_of.push_back(m < 0 ? -1 : frames[2][m].track_id);
    }
    const auto t = build_ref_targets<double>(anchors, labels, matched, frames, 2);
    const auto logits = random_tensor({r, 3}, rng, -3, 3);
    const auto deltas = random_tensor({k * r, 4}, rng, -2, 2);
    const double got = ref_loss(ag::constant(logits), ag::constant(deltas), t)->value[0];
    std::vector<std::vector<double>> lg(r, std::vector<double>(3));
    std::vector<std::vector<std::array<double, 4>>> dl(k, std::vector<std::array<double, 4>>(r));
    for (int i = 0; i < r; ++i)
      for (int c = 0; c < 3; ++c) lg[i][c] = logits.at(i, c);
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < r; ++i)
        for (int c = 0; c < 4; ++c) dl[j][i][c] = deltas.at(j * r + i, c);
    int pairs = 0;
    const double want = oracle::ref_loss(lg, dl, anchors, labels, track_of, frames, &pairs);
    bad += std::abs(got - want) > 1e-6 || pairs != t.total_positive_pairs();
  }
  tally("ref loss", 150, bad);

  bad = 0;
  std::uniform_int_distribution<int> nfr(1, 4), nb(0, 5), cls2(0, 1);
  std::uniform_real_distribution<double> score(0.01, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<DetectionRecord> dets;
    for (int f = nfr(rng) - 1; f >= 0; --f)
      for (int b = nb(rng); b > 0; --b) dets.push_back({"v", f, cls2(rng), score(rng), random_box(rng, 24, 6, 3)});
    const auto got = seq_nms(dets);
    const auto want = oracle::seq_nms(dets, 0.5, 0.5);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].bbox == want[i].bbox && got[i].class_id == want[i].class_id && got[i].frame == want[i].frame &&
             std::abs(got[i].score - want[i].score) <= 1e-6;
    }
    bad += !same;
  }
  tally("Seq-NMS", 200, bad);

  const double secs = seconds_since(t0);
  o.require(secs < 300, "runtime under 5 min");
  std::string c = counts.str();
  o.detail << c.substr(0, c.size() - 2);
  report(3, "oracle equivalence", o.pass, secs, o.detail.str());
}

// ------------------------------------------------------------------ 4

struct ShapeRun {
  bool ok = true;
  std::string first_bad;
  std::uint64_t fingerprint = 0;
  int proposals = 0;
  double secs = 0;
};

ShapeRun shape_contract() {
  const auto t0 = Clock::now();
  ShapeRun s;
  DetectorConfig dc;
  dc.variant = Variant::kE;
  dc.m = dc.n = 2;
  dc.sync();
  const VideoSample video = generate_video(SceneConfig{}, 4242);
  Detector<float> det(dc, 4243);
  const WindowInput in = det.input_for(window_at(video, 4, 2, 2));

  ag::NoGradGuard ng;
  const ForwardTrace<float> tr = det.forward(in, false);
  const int k = 5, c = dc.backbone.out_channels(), h = 96 / dc.backbone.total_stride(), p = dc.roi_size;
  const int r = static_cast<int>(tr.anchors.size());
  const int a = dc.rpn.anchors_per_cell() * h * h;
  s.proposals = r;
  Fingerprint fp;
  auto expect = [&](const std::string& name, const ag::Var<float>& v, Shape want) {
    const bool ok = v && v->value.shape() == want;
    if (!ok && s.ok) s.first_bad = name;
    s.ok = s.ok && ok;
    fp.var(v);
  };
  auto expect_count = [&](const std::string& name, std::size_t got, std::size_t want) {
    if (got != want && s.ok) s.first_bad = name;
    s.ok = s.ok && got == want;
  };
  expect("F", tr.features.maps, {k, c, h, h});
  expect("A_t", tr.tg.gates.reference, {k - 1, 1, h, h});
  expect("A_t-i", tr.tg.gates.other, {k - 1, 1, h, h});
  expect("F^G", tr.tg.gated, {k - 1, c, h, h});
  expect("F^A", tr.tg.aggregated, {1, c, h, h});
  expect("M", tr.tg.motion, {k, c, h, h});
  expect("rpn objectness", tr.rpn.objectness, {a});
  expect("rpn deltas", tr.rpn.deltas, {a, 4});
  expect_count("anchors", tr.rpn.anchors.size(), static_cast<std::size_t>(a));
  if (r == 0 || r > dc.rpn.post_nms_topk_eval) {
    s.ok = false;
    if (s.first_bad.empty()) s.first_bad = "proposal count";
  }
  expect("F^M", tr.motion_aware, {k, c, h, h});
  expect("tboc deltas", tr.tboc.deltas, {k * r, 4});
  expect("tboc logits", tr.tboc.class_logits, {r, dc.num_classes + 1});
  expect("f^M", tr.tboc.pooled, {k * r, c, p, p});
  expect_count("linked", tr.tboc.linked.size(), static_cast<std::size_t>(r));
  for (const auto& lp : tr.tboc.linked) {
    expect_count("linked boxes", lp.boxes.size(), static_cast<std::size_t>(k));
    fp.boxes(lp.boxes);
  }
  expect("r^A", tr.bundle.reference, {r, c, p, p});
  expect("r^F", tr.bundle.visual, {k * r, c, p, p});
  expect("r^M", tr.bundle.motion, {k * r, c, p, p});
  expect("cosine weights", tr.cos_weights, {k * r});
  expect("g visual", tr.g_visual, {r, dc.jtmg.aggregate_dim});
  expect("g displacement", tr.g_disp, {r, dc.jtmg.displacement_dim});
  expect("g motion", tr.g_motion, {r, 2 * dc.jtmg.gru_hidden});
  expect("joint feature", tr.head_input, {r, dc.head_input_dim()});
  expect("class logits", tr.head.class_logits, {r, dc.num_classes + 1});
  expect("box deltas", tr.head.deltas, {r, 4});
  for (const auto& d : det.detections_from(tr, in)) {
    fp.bytes(&d.score, sizeof d.score);
    fp.bytes(&d.bbox, sizeof d.bbox);
  }
  s.fingerprint = fp.h;
  s.secs = seconds_since(t0);
  return s;
}

// ------------------------------------------------------------------ 5-8

struct VariantRun {
  EvaluationResult eval;
  std::uint64_t params = 0;
};

struct TrainingRun {
  VariantRun a, e;
  std::vector<DetectionRecord> e_seq;
  EvalReport e_seq_report;
  double secs = 0;
};

TrainingRun train_and_evaluate(const PipelineConfig& base, const DataSplit& data, std::ostream* log) {
  const auto t0 = Clock::now();
  TrainingRun run;
  for (Variant v : {Variant::kA, Variant::kE}) {
    PipelineConfig cfg = base;
    cfg.detector.variant = v;
    Trainer<float> tr(cfg, &data.train, &data.val);
    tr.set_progress_log(log);
    if (log) *log << "training variant " << variant_letter(v) << std::endl;
    tr.train();
    VariantRun& out = v == Variant::kA ? run.a : run.e;
    Fingerprint fp;
    for (const auto& [name, p] : tr.detector().params().all()) fp.tensor(p->value);
    out.params = fp.h;
    out.eval = evaluate_detector(tr.detector(), data.val, false, base.seq_nms, base.motion_radius);
  }
  run.e_seq = seq_nms_all(run.e.eval.detections, base.seq_nms);
  run.e_seq_report = evaluate(run.e_seq, evaluation_records(data.val, base.detector.m, base.detector.n),
                              {base.detector.num_classes, 0.5, base.motion_radius});
  run.e_seq_report.seq_nms_applied = true;
  run.secs = seconds_since(t0);
  return run;
}

// Output records must be a sub-multiset of the input with only scores changed.
bool seq_nms_structure_ok(const std::vector<DetectionRecord>& in, const std::vector<DetectionRecord>& out) {
  using Key = std::tuple<std::string, int, int, double, double, double, double>;
  auto key = [](const DetectionRecord& d) {
    return Key{d.video_id, d.frame, d.class_id, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2};
  };
  std::map<Key, int> pool;
  for (const auto& d : in) ++pool[key(d)];
  for (const auto& d : out) {
    auto it = pool.find(key(d));
    if (it == pool.end() || it->second == 0) return false;
    --it->second;
  }
  return out.size() <= in.size();
}

std::vector<AblationRow> table_rows(const TrainingRun& run) {
  std::vector<AblationRow> rows(3);
  rows[0].variant = Variant::kA;
  rows[0].report = run.a.eval.report;
  rows[1].variant = Variant::kE;
  rows[1].report = run.e.eval.report;
  rows[2].variant = Variant::kF;
  rows[2].report = run.e_seq_report;
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TM-VoD acceptance criteria"};
  std::string out_dir = "acceptance_artifacts";
  bool skip_training = false;
  app.add_option("--out", out_dir, "directory for tables, dumps and logs");
  app.add_flag("--skip-training", skip_training, "run criteria 1-4 only");
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(out_dir);

  bool all_pass = true;
  auto guarded = [&](int id, const std::string& name, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, name, false, 0, std::string("exception: ") + e.what());
      all_pass = false;
    }
  };
  // criteria 1-3 report their own lines; track failures through a capture of stdout
  std::ostringstream captured;
  auto* old = std::cout.rdbuf(captured.rdbuf());
  guarded(1, "invariant suite", criterion_invariants);
  guarded(2, "gradient suite", criterion_gradients);
  guarded(3, "oracle equivalence", criterion_oracles);
  std::cout.rdbuf(old);
  std::cout << captured.str();
  {
    std::istringstream lines(captured.str());
    for (std::string line; std::getline(lines, line);) all_pass = all_pass && line.rfind("PASS", 0) == 0;
  }

  ShapeRun shapes;
  guarded(4, "shape contract", [&] {
    shapes = shape_contract();
    std::ostringstream d;
    d << "5-frame 96x96 window, M=N=2, " << shapes.proposals << " proposals";
    if (!shapes.ok) d << "; first mismatch: " << shapes.first_bad;
    const bool pass = shapes.ok && shapes.secs < 10;
    all_pass = all_pass && pass;
    report(4, "shape contract", pass, shapes.secs, d.str());
  });

  if (skip_training) {
    for (int id = 5; id <= 8; ++id) std::cout << "SKIP  criterion " << id << std::endl;
    return all_pass ? 0 : 1;
  }

  PipelineConfig cfg;  // 200 videos, 2 classes, blur and occlusion enabled
  std::ofstream log(std::filesystem::path(out_dir) / "training.log");
  const auto data = split_dataset(generate_videos(cfg.scene, cfg.num_videos, cfg.seed), cfg.val_fraction);
  TrainingRun run;
  bool trained = false;
  guarded(5, "desk-scale training", [&] {
    run = train_and_evaluate(cfg, data, &log);
    trained = true;
    const double ma = run.a.eval.report.map, me = run.e.eval.report.map;
    const bool pass = me >= 0.5 && me >= ma && run.secs <= 1800;
    all_pass = all_pass && pass;
    std::ostringstream d;
    d << std::setprecision(4) << "mAP(e)=" << me << " (>= 0.5), mAP(a)=" << ma << ", " << data.train.size()
      << " train / " << data.val.size() << " val videos";
    report(5, "desk-scale training", pass, run.secs, d.str());
  });
  if (!trained) return 1;

  const auto rows = table_rows(run);
  const std::string table = format_ablation_table(rows);
  std::ofstream(std::filesystem::path(out_dir) / "ablation_table.txt") << table;
  std::ofstream(std::filesystem::path(out_dir) / "ablation.json") << ablation_json(rows).dump(2) << '\n';
  {
    std::ofstream os(std::filesystem::path(out_dir) / "detections_e.jsonl");
    write_detections(os, run.e.eval.detections);
    std::ofstream ss(std::filesystem::path(out_dir) / "detections_e_seqnms.jsonl");
    write_detections(ss, run.e_seq);
  }

  {
    const auto& ra = run.a.eval.report;
    const auto& re = run.e.eval.report;
    const double gain_fast = re.map_fast - ra.map_fast, gain_slow = re.map_slow - ra.map_slow;
    std::ostringstream d;
    d << std::setprecision(4) << "gain fast " << gain_fast << " vs slow " << gain_slow << " (soft; table below)";
    report(6, "motion-split direction", gain_fast >= gain_slow, 0, d.str(), true);
    std::cout << table;
  }

  {
    const bool structure = seq_nms_structure_ok(run.e.eval.detections, run.e_seq);
    const double drop = run.e.eval.report.map - run.e_seq_report.map;
    const bool pass = structure && drop <= 0.01;
    all_pass = all_pass && pass;
    std::ostringstream d;
    d << std::setprecision(4) << "geometry preserved: " << (structure ? "yes" : "no") << ", mAP " << run.e.eval.report.map
      << " -> " << run.e_seq_report.map << " (drop " << drop << ", limit 0.01)";
    report(7, "Seq-NMS non-degradation", pass, 0, d.str());
  }

  guarded(8, "determinism", [&] {
    const auto t0 = Clock::now();
    const ShapeRun shapes2 = shape_contract();
    const TrainingRun run2 = train_and_evaluate(cfg, data, nullptr);
    const bool same_shapes = shapes2.fingerprint == shapes.fingerprint;
    const bool same_params = run2.a.params == run.a.params && run2.e.params == run.e.params;
    const bool same_dets = run2.a.eval.detections == run.a.eval.detections &&
                           run2.e.eval.detections == run.e.eval.detections && run2.e_seq == run.e_seq;
    const bool pass = same_shapes && same_params && same_dets;
    all_pass = all_pass && pass;
    std::ostringstream d;
    d << "forward trace " << (same_shapes ? "identical" : "differs") << ", trained parameters "
      << (same_params ? "identical" : "differ") << ", detections " << (same_dets ? "identical" : "differ");
    report(8, "determinism (criteria 4-5 rerun)", pass, seconds_since(t0), d.str());
  });

  return all_pass ? 0 : 1;
}
