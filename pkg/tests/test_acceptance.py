"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

The learning criteria (6-8) train on a 250-video synthetic corpus and take
roughly a quarter of an hour on one core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import check_grads, jitter_zero_init, numeric_grad, rel_err, tiny_config
from dcan import nn
from dcan import tensor as tn
from dcan.data import SyntheticSpec, generate_synthetic, load_annotations, write_corpus
from dcan.evaluation import auc, average_precision, recall_at
from dcan.inference import FusionConfig, Proposal, fuse_scores, soft_nms
from dcan.loss import reg_loss, wce
from dcan.model import DCAN, DilationSchedule, ModelConfig, ScoreMaps, valid_mask
from dcan.pipeline import checkpoint_hash, evaluate, infer, load_config, train
from dcan.rfanalyze import check_contiguity, dcan_stack, mtca_stack, propagate
from dcan.tensor import Tensor
from oracles import ap_brute, as_arrays, random_case, recall_brute

ROOT = Path(__file__).resolve().parents[1]
RESULTS: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


# ---------------------------------------------------------------- 1. gradients


def _op_cases(rng):
    def leaf(shape, lo=None, hi=None):
        data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
        return Tensor(data, requires_grad=True)

    def w(shape):
        return Tensor(rng.standard_normal(shape))

    a, b = leaf((3, 4), 0.5, 2.0), leaf((3, 4), 0.5, 2.0)
    wa = w((3, 4))
    cases = {op: (lambda op=op: tn.tsum(tn.elementwise(op, a, b) * wa), [a, b])
             for op in ("add", "sub", "mul", "div", "pow")}
    m1, m2, wm = leaf((3, 4)), leaf((4, 2)), w((3, 2))
    cases["matmul"] = (lambda: tn.tsum(tn.matmul(m1, m2) * wm), [m1, m2])
    smat = sp.random(4, 3, density=0.6, random_state=1, format="csr")
    s1, ws = leaf((2, 4)), w((2, 3))
    cases["sparse_matmul"] = (lambda: tn.tsum(tn.sparse_matmul(s1, smat) * ws), [s1])
    u = Tensor(rng.uniform(0.2, 2.0, (3, 3)) * rng.choice([-1, 1], (3, 3)), requires_grad=True)
    pos = leaf((3, 3), 0.2, 2.0)
    wu = w((3, 3))
    cases["relu"] = (lambda: tn.tsum(tn.relu(u) * wu), [u])
    cases["sigmoid"] = (lambda: tn.tsum(tn.sigmoid(u) * wu), [u])
    cases["exp"] = (lambda: tn.tsum(tn.exp(u) * wu), [u])
    cases["log"] = (lambda: tn.tsum(tn.log(pos) * wu), [pos])
    cases["clip"] = (lambda: tn.tsum(tn.clip(u, -1.0, 1.0) * wu), [u])
    x3 = leaf((2, 3, 4))
    cases["reshape"] = (lambda: tn.tsum(tn.reshape(x3, (4, 6)) * Tensor(wt_r)), [x3])
    wt_r = rng.standard_normal((4, 6))
    wt_t = rng.standard_normal((4, 3, 2))
    cases["transpose"] = (lambda: tn.tsum(tn.transpose(x3, (2, 1, 0)) * Tensor(wt_t)), [x3])
    y3 = leaf((2, 1, 4))
    wt_c = rng.standard_normal((2, 4, 4))
    cases["concat"] = (lambda: tn.tsum(tn.concat([x3, y3], axis=1) * Tensor(wt_c)), [x3, y3])
    wt_e = rng.standard_normal((2, 3, 4))
    cases["expand"] = (lambda: tn.tsum(tn.expand(y3, (2, 3, 4)) * Tensor(wt_e)), [y3])
    wt_i = rng.standard_normal((2, 2))
    cases["index"] = (lambda: tn.tsum(tn.index(x3, (slice(None), 1, slice(0, 2))) * Tensor(wt_i)), [x3])
    wt_s = rng.standard_normal((2, 4))
    cases["sum"] = (lambda: tn.tsum(tn.tsum(x3, axis=1) * Tensor(wt_s)), [x3])
    cx, cw, cb, cg = leaf((2, 2, 7)), leaf((3, 2, 3)), leaf((3,)), w((2, 3, 7))
    cases["conv1d"] = (lambda: tn.tsum(nn.conv1d(cx, cw, cb, 2) * cg), [cx, cw, cb])
    qx, qw, qb, qg = leaf((1, 2, 4, 4)), leaf((2, 2, 3, 3)), leaf((2,)), w((1, 2, 4, 4))
    cases["conv2d"] = (lambda: tn.tsum(nn.conv2d(qx, qw, qb) * qg), [qx, qw, qb])
    dx, dw, db, dg = leaf((1, 2, 3, 3)), leaf((2, 2, 4, 4)), leaf((2,)), w((1, 2, 6, 6))
    cases["deconv2d"] = (lambda: tn.tsum(nn.deconv2d(dx, dw, db) * dg), [dx, dw, db])
    nx, ns, nh, ng = leaf((2, 3, 6)), leaf((3,), 0.5, 1.5), leaf((3,)), w((2, 3, 6))
    cases["norm"] = (lambda: tn.tsum(nn.norm(nx, ns, nh) * ng), [nx, ns, nh])
    p = leaf((2, 5), 0.1, 0.9)
    lab = np.zeros((2, 5))
    lab[0, :2] = lab[1, 3] = 1.0
    cases["wce"] = (lambda: wce(p, lab), [p])
    mr = leaf((4, 4), 0.0, 1.0)
    giou = rng.uniform(size=(4, 4))
    giou[0, :2] = 0.0
    cases["reg_loss"] = (lambda: reg_loss(mr, giou, np.ones((4, 4), bool), np.random.default_rng(0)), [mr])
    return cases


def test_c1_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    failures = []
    for name, (f, inputs) in _op_cases(rng).items():
        try:
            worst[name] = check_grads(f, inputs)
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")

    cfg = tiny_config(T=16, D=8, G=2, n_b=2)
    net = DCAN(cfg, seed=0)
    r = np.random.default_rng(1)
    jitter_zero_init(net, r)
    rgb = Tensor(r.standard_normal((1, cfg.rgb_dim, cfg.T)))
    flow = Tensor(r.standard_normal((1, cfg.flow_dim, cfg.T)))
    weights = [Tensor(r.standard_normal(s)) for s in ((1, cfg.T), (1, cfg.T), (1, cfg.D, cfg.T), (1, cfg.D, cfg.T))]

    def forward():
        out = net(rgb, flow)
        return (tn.tsum(out.p_start * weights[0]) + tn.tsum(out.p_end * weights[1])
                + tn.tsum(out.m_cls * weights[2]) + tn.tsum(out.m_reg * weights[3]))

    forward().backward()
    params = list(net.named_parameters())
    model_worst = 0.0
    for k in r.choice(len(params), 20, replace=True):
        name, p = params[k]
        idx = tuple(int(r.integers(0, s)) for s in p.shape)
        err = rel_err(float(p.grad[idx]), numeric_grad(forward, p, idx))
        model_worst = max(model_worst, err)
        if err > 1e-4:
            failures.append(f"dcan_forward {name}{idx}: rel err {err:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    record("C1 gradient checks", ok,
           f"{len(worst)} ops max rel err {max(worst.values(), default=0):.1e}, tiny dcan_forward 20 params "
           f"max rel err {model_worst:.1e} (tol 1e-4), {elapsed:.1f}s (< 120s)")
    assert not failures, failures
    assert elapsed < 120


# ---------------------------------------------------------------- 2. receptive field


def test_c2_receptive_field():
    t0 = time.perf_counter()
    cfg = ModelConfig(n_b=6, r_smooth=3)
    mtca = propagate(mtca_stack(DilationSchedule.build(6, 3)))
    full = check_contiguity(propagate(dcan_stack(cfg)))
    e_only = check_contiguity(propagate(mtca_stack(DilationSchedule.build(6, smooth=False), multi_path=False)))
    elapsed = time.perf_counter() - t0
    ok = mtca.width == 289 and full.contiguous and not e_only.contiguous and elapsed < 1.0
    record("C2 receptive field", ok,
           f"MTCA width {mtca.width} (want 289), base+MTCA contiguous={full.contiguous}, "
           f"E-only holes={len(e_only.holes)}, {elapsed * 1e3:.0f}ms (< 1s)")
    assert mtca.width == 289
    assert full.contiguous
    assert e_only.holes
    assert elapsed < 1.0


# ---------------------------------------------------------------- 3. shapes


def test_c3_shapes():
    t0 = time.perf_counter()
    details = []
    ok = True
    for G, grid, stages in ((2, 50, 1), (4, 25, 2)):
        cfg = ModelConfig(T=100, D=100, G=G)
        net = DCAN(cfg, seed=0)
        r = np.random.default_rng(0)
        rgb = Tensor(r.standard_normal((1, cfg.rgb_dim, 100)))
        flow = Tensor(r.standard_normal((1, cfg.flow_dim, 100)))
        with tn.no_grad():
            f = net.base_forward(rgb, flow)
            coarse = net.group_map(net.reduced_feature(f))
            x, sizes = coarse, []
            for deconv in net.refine:
                x = tn.relu(deconv(x))
                sizes.append(x.shape[-1])
            out = net(rgb, flow)
        good = (coarse.shape[-2:] == (grid, grid) and len(net.refine) == stages
                and out.m_cls.shape[-2:] == (100, 100) and out.m_reg.shape[-2:] == (100, 100))
        ok &= good
        details.append(f"G={G}: {grid}x{grid} -> {' -> '.join(f'{s}x{s}' for s in sizes)}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    record("C3 shape contract", ok, f"{'; '.join(details)}, {elapsed:.1f}s (< 10s)")
    assert ok


# ---------------------------------------------------------------- 4. formulas


def test_c4a_fused_score():
    T = 4
    p_start, p_end = np.ones(T), np.ones(T)
    m_cls, m_reg = np.ones((T, T)), np.ones((T, T))
    p_start[0], p_end[2], m_cls[1, 0], m_reg[1, 0] = 0.8, 0.9, 0.5, 0.6
    props = fuse_scores(ScoreMaps(p_start, p_end, m_cls, m_reg, valid_mask(T, T)), FusionConfig(gamma=0.8))
    got = next(p.score for p in props if (p.start, p.end) == (0.0, 0.5))
    target = 0.27502
    ok = abs(got - target) <= 1e-5
    record("C4a fused score", ok,
           f"{got:.6f} vs target {target} +- 1e-5 (0.72 * 0.3**0.8 evaluates to {0.72 * 0.3 ** 0.8:.6f})")
    assert ok, f"fused score {got:.6f} differs from {target} by {abs(got - target):.2e}"


def test_c4b_soft_nms_decay():
    out = soft_nms([Proposal(0.0, 1.0, 0.9), Proposal(0.0, 1.0, 0.8)], FusionConfig(snms_sigma=0.4))
    target = 0.8 * math.exp(-2.5)
    ok = abs(out[1].score - target) <= 1e-6
    record("C4b Soft-NMS decay", ok, f"{out[1].score:.8f} vs 0.8*exp(-2.5)={target:.8f} +- 1e-6")
    assert ok


def test_c4c_balanced_wce():
    got = wce(Tensor(np.full(6, 0.5)), np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])).item()
    ok = abs(got - math.log(2.0)) <= 1e-9
    record("C4c balanced WCE", ok, f"{got:.12f} vs ln2={math.log(2.0):.12f} +- 1e-9")
    assert ok


# ---------------------------------------------------------------- 5. metric oracles


def test_c5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    grid = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
    bad_ap = bad_recall = 0
    for _ in range(1000):
        preds, gts = random_case(rng, max_props=20, max_gts=5, n_videos=1)
        thr = float(rng.choice(grid))
        an = int(rng.integers(1, 21))
        pa, ga = as_arrays(preds, gts)
        bad_recall += abs(recall_at(pa, ga, thr, an) - recall_brute(preds, gts, thr, an)) > 1e-12
        bad_ap += abs(average_precision(preds, gts, thr) - ap_brute(preds, gts, thr)) > 1e-12
    flat = auc(np.full(100, 0.5))
    elapsed = time.perf_counter() - t0
    ok = bad_ap == 0 and bad_recall == 0 and flat == 50.0 and elapsed < 30
    record("C5 metric oracles", ok,
           f"1000 trials, AP mismatches {bad_ap}, recall mismatches {bad_recall}, flat AUC {flat!r}, "
           f"{elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 6-8. learning


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    spec = SyntheticSpec.from_dict(json.loads((ROOT / "configs" / "synthetic_corpus.json").read_text()))
    features, annotations, subsets = generate_synthetic(spec)
    write_corpus(root, features, annotations, subsets)
    return root


def _run(corpus, out, seed, smooth=True):
    cfg = load_config(ROOT / "configs" / "synthetic_train.json")
    cfg.seed = seed
    cfg.model.smooth_blocks = smooth
    t0 = time.process_time()
    res = train(cfg, corpus, out / "run")
    infer(res["checkpoint"], corpus, cfg, out / "proposals.json", subset="test")
    metrics = evaluate(out / "proposals.json", corpus / "manifest.json", cfg.metric, out / "eval", subset="test")
    cpu = time.process_time() - t0
    return cfg, res, metrics, cpu


@pytest.fixture(scope="module")
def runs(corpus, tmp_path_factory):
    cache = {}

    def get(seed, smooth):
        key = (seed, smooth)
        if key not in cache:
            cache[key] = _run(corpus, tmp_path_factory.mktemp(f"s{seed}_{'full' if smooth else 'eonly'}"),
                              seed, smooth)
        return cache[key]

    return get


def _recall_at_10(corpus, proposals_path):
    manifest = json.loads((corpus / "manifest.json").read_text())
    props = json.loads(Path(proposals_path).read_text())
    anns = load_annotations({v: manifest[v] for v in props})
    gts = {v: anns[v].as_array() * anns[v].duration_seconds for v in props}
    pa = {v: np.array([(p["segment"][0], p["segment"][1], p["score"]) for p in props[v]]).reshape(-1, 3)
          for v in props}
    return recall_at(pa, gts, 0.5, 10)


def test_c6_end_to_end_learning(corpus, runs):
    cfg, res, metrics, cpu = runs(0, True)
    r10 = _recall_at_10(corpus, Path(res["checkpoint"]).parents[1] / "proposals.json")
    n_test = metrics["meta"]["n_videos"]
    ok = r10 >= 0.90 and metrics["AUC"] >= 70.0 and cpu < 15 * 60
    record("C6 end-to-end learning", ok,
           f"{n_test} test videos, AR@10 at tIoU 0.5 = {r10:.3f} (>= 0.90), AUC = {metrics['AUC']:.2f} (>= 70.0), "
           f"CPU {cpu / 60:.1f} min (< 15)")
    assert n_test == 50
    assert r10 >= 0.90
    assert metrics["AUC"] >= 70.0
    assert cpu < 15 * 60


def test_c7_ablation_direction(runs):
    rows = []
    wins = 0
    for seed in (0, 1, 2):
        full = runs(seed, True)[2]["AUC"]
        e_only = runs(seed, False)[2]["AUC"]
        wins += full >= e_only
        rows.append(f"seed {seed}: {full:.2f} vs {e_only:.2f}")
    ok = wins >= 2
    record("C7 ablation direction", ok, f"full >= E-only AUC in {wins}/3 seeds ({'; '.join(rows)})")
    assert ok


def test_c8_determinism(corpus, tmp_path):
    cfg = load_config(ROOT / "configs" / "synthetic_train.json")
    cfg.optimizer.schedule = [(1, 1e-3)]
    hashes, blobs, corpora = [], [], []
    for k in range(2):
        out = tmp_path / f"rep{k}"
        spec = SyntheticSpec.from_dict(json.loads((ROOT / "configs" / "synthetic_corpus.json").read_text()))
        write_corpus(out / "corpus", *generate_synthetic(spec))
        corpora.append((out / "corpus" / "manifest.json").read_bytes())
        res = train(cfg, out / "corpus", out / "run", plot=False)
        infer(res["checkpoint"], out / "corpus", cfg, out / "p.json", subset="test")
        evaluate(out / "p.json", out / "corpus" / "manifest.json", cfg.metric, out / "eval", plot=False,
                 subset="test")
        hashes.append(checkpoint_hash(res["checkpoint"]))
        blobs.append((out / "eval" / "metrics.json").read_bytes())
    ok = hashes[0] == hashes[1] and blobs[0] == blobs[1] and corpora[0] == corpora[1]
    record("C8 determinism", ok,
           f"checkpoint sha256 {hashes[0][:12]} / {hashes[1][:12]}, metrics JSON identical={blobs[0] == blobs[1]}")
    assert ok
