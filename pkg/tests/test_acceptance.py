"""End-to-end acceptance gate.

Each test prints a single PASS/FAIL line so a log scrape shows the verdicts
at a glance.  The trend tests (ablation, global-vs-dense) share one set of
trained runs via a module-scoped fixture; everything is seeded and
single-threaded, so the numbers are reproducible on the same machine.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import make_config, tiny_model
from fewseg.data import ImageSlice
from fewseg.encoder import l2_normalize
from fewseg.pipeline import (audit_test_class_purity, finetune, run_all,
                             run_stage1, run_stage2, _episode_dice,
                             _init_model, evaluate)
from fewseg.protoseg import Stage2Config, ce_loss, stage2_loss
from fewseg.protoseg import SegmentationLogits
from fewseg.stage1 import (combined_loss, dense_loss, global_loss,
                           match_positive_keys, stage1_batch_loss,
                           Stage1Config)
from fewseg.superpixel import FelzParams, FewShotEpisode, felzenszwalb_segment
from fewseg.synthetic import gen_synthetic
from oracle_felz import canonical, naive_segment
from oracle_losses import scalar_ce_loss, scalar_dense_loss, scalar_global_loss


def _verdict(name: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    print(f"[acceptance] {name}: {tag}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def _unit(rng, *shape, dim):
    t = torch.tensor(rng.standard_normal(shape), dtype=torch.float64)
    return l2_normalize(t, dim=dim)


# -- 1. loss oracle equivalence ---------------------------------------------

def test_loss_oracles():
    t0 = time.time()
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        s, c, n = 2, 4, 6
        ka, kb = _unit(rng, c, s, s, dim=0), _unit(rng, c, s, s, dim=0)
        negs = _unit(rng, n, c, dim=1)
        match = rng.integers(0, s * s, s * s)
        tau = float(rng.uniform(0.1, 1.0))
        got = float(dense_loss(ka, kb, match, negs, tau))
        ref = float(scalar_dense_loss(ka.reshape(c, -1).T.tolist(),
                                      kb.reshape(c, -1).T.tolist(),
                                      match.tolist(), negs.tolist(), tau))
        worst = max(worst, abs(got - ref) / abs(ref))
    for _ in range(100):
        g, g_pos = _unit(rng, 2, 8, dim=1)
        negs = _unit(rng, 10, 8, dim=1)
        tau = float(rng.uniform(0.1, 1.0))
        got = float(global_loss(g, g_pos, negs, tau))
        ref = float(scalar_global_loss(g.tolist(), g_pos.tolist(),
                                       negs.tolist(), tau))
        worst = max(worst, abs(got - ref) / abs(ref))
    for _ in range(100):
        p_fg = torch.tensor(rng.uniform(0.01, 0.99, (5, 5)))
        probs = torch.stack([1 - p_fg, p_fg])
        target = torch.tensor(rng.integers(0, 2, (5, 5)))
        logits = SegmentationLogits(torch.zeros(2, 5, 5), probs)
        got = float(ce_loss(logits, target))
        ref = float(scalar_ce_loss(probs.numpy(), target.numpy()))
        worst = max(worst, abs(got - ref) / abs(ref))
    dt = time.time() - t0
    _verdict("loss-oracles", worst < 1e-10 and dt < 30,
             f"worst rel err {worst:.2e}, {dt:.1f}s")


# -- 2. gradient correctness ------------------------------------------------

def _fd_check(model, loss_fn, eps=1e-5):
    """Norm-based relative error between autograd and central differences,
    maximized over parameter tensors."""
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for param in model.parameters():
        if param.grad is None:  # parameter not on this loss path
            continue
        analytic = param.grad.detach().clone()
        fd = torch.zeros_like(analytic)
        flat = param.data.view(-1)
        fd_flat = fd.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                plus = float(loss_fn())
                flat[i] = orig - eps
                minus = float(loss_fn())
                flat[i] = orig
            fd_flat[i] = (plus - minus) / (2 * eps)
        denom = max(float(analytic.norm()), 1e-12)
        worst = max(worst, float((fd - analytic).norm()) / denom)
    return worst


def test_gradient_correctness(monkeypatch):
    t0 = time.time()
    rng = np.random.default_rng(200)

    # seed chosen away from ReLU kinks: a pre-activation within eps of zero
    # makes the central difference straddle two linear pieces
    model = tiny_model(seed=3)
    views = torch.tensor(rng.random((2, 2, 1, 16, 16)))
    config = Stage1Config(batch_images=2, K=2, iterations=1)

    # The positive-key matching is a stop-gradient argmax: under a +/-eps
    # parameter bump a near-tie can flip and the finite difference would
    # measure a different branch of the piecewise-smooth loss.  Freeze the
    # matching at its unperturbed value so both probes stay on one branch.
    import fewseg.stage1 as s1
    frozen: list = []
    calls = {"i": 0}
    original_match = s1.match_positive_keys

    def frozen_match(a, b):
        i = calls["i"]
        calls["i"] += 1
        if i >= len(frozen):
            frozen.append(original_match(a, b))
        return frozen[i]

    monkeypatch.setattr(s1, "match_positive_keys", frozen_match)

    def loss_fn():
        calls["i"] = 0
        return stage1_batch_loss(model, views, config)

    err_s1 = _fd_check(model, loss_fn)

    model2 = tiny_model(seed=12)
    sup = ImageSlice(rng.random((16, 16)).astype(np.float32), "s")
    qry = ImageSlice(rng.random((16, 16)).astype(np.float32), "q")
    m_s = np.zeros((16, 16), dtype=np.uint8); m_s[3:11, 4:12] = 1
    m_q = np.zeros((16, 16), dtype=np.uint8); m_q[5:13, 3:11] = 1
    episode = FewShotEpisode(sup, m_s, qry, m_q)
    err_s2 = _fd_check(model2,
                       lambda: stage2_loss(episode, model2, Stage2Config()))

    dt = time.time() - t0
    ok = err_s1 < 1e-4 and err_s2 < 1e-4 and dt < 120
    _verdict("gradient-correctness", ok,
             f"combined {err_s1:.2e}, episodic {err_s2:.2e}, {dt:.1f}s")


# -- 3. matching oracle ------------------------------------------------------

def test_matching_oracle():
    t0 = time.time()
    rng = np.random.default_rng(300)
    mismatches = 0
    for s in (2, 4, 8):
        for _ in range(200):
            a, b = _unit(rng, 6, s, s, dim=0), _unit(rng, 6, s, s, dim=0)
            fast = match_positive_keys(a, b)
            av = a.reshape(6, -1).T.numpy()
            bv = b.reshape(6, -1).T.numpy()
            slow = np.argmax(av @ bv.T, axis=1)
            mismatches += int(np.sum(fast != slow))
    dt = time.time() - t0
    _verdict("matching-oracle", mismatches == 0 and dt < 10,
             f"{mismatches} mismatches over 600 pairs, {dt:.1f}s")


# -- 4. superpixel oracle ----------------------------------------------------

def test_superpixel_oracle():
    t0 = time.time()
    rng = np.random.default_rng(400)
    checked = 0
    for _ in range(1000):
        h = w = int(rng.integers(2, 9))
        levels = rng.choice([0.0, 0.25, 0.5, 1.0], size=(h, w))
        img = ImageSlice(levels.astype(np.float32), f"r{checked}")
        k = float(rng.uniform(0.01, 0.5))
        min_size = int(rng.integers(1, 4))
        params = FelzParams(k_scale=k, sigma=0.0, min_size=min_size)
        got = felzenszwalb_segment(img, params)
        ref = naive_segment(levels, k, min_size)
        assert np.array_equal(canonical(got.labels), canonical(ref)), \
            f"partition mismatch on instance {checked}"
        sizes = np.bincount(got.labels.ravel())
        assert got.n_segments == 1 or sizes.min() >= min_size
        checked += 1
    # constant image -> one segment
    const = felzenszwalb_segment(
        ImageSlice(np.full((8, 8), 0.5, dtype=np.float32), "c"),
        FelzParams(k_scale=0.1, sigma=0.0, min_size=1))
    assert const.n_segments == 1
    # n_segments non-increasing in k
    img = ImageSlice(rng.random((8, 8)).astype(np.float32), "k")
    counts = [felzenszwalb_segment(
        img, FelzParams(k_scale=k, sigma=0.0, min_size=1)).n_segments
        for k in (0.01, 0.05, 0.1, 0.3, 1.0)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    dt = time.time() - t0
    _verdict("superpixel-oracle", dt < 60, f"{checked} instances, {dt:.1f}s")


# -- 5. endpoint identities --------------------------------------------------

def test_endpoint_identities(manifest_path, tmp_path):
    lg, lt = torch.tensor(0.31), torch.tensor(0.87)
    blend_ok = (combined_loss(lg, lt, 0.0) is lg
                and combined_loss(lg, lt, 1.0) is lt)

    model = tiny_model(seed=13)
    rng = np.random.default_rng(500)
    sup = ImageSlice(rng.random((16, 16)).astype(np.float32), "s")
    m = np.zeros((16, 16), dtype=np.uint8); m[4:12, 4:12] = 1
    episode = FewShotEpisode(sup, m, sup, m)
    from fewseg.protoseg import extract_prototypes, similarity_segment
    cfg0 = Stage2Config(lambda_par=0.0)
    with torch.no_grad():
        loss0 = stage2_loss(episode, model, cfg0)
        f_s = model.encode(torch.tensor(sup.pixels, dtype=torch.float64))[0]
        protos = extract_prototypes(f_s, torch.tensor(m), cfg0)
        logits = similarity_segment(protos, f_s, cfg0.alpha, output_size=16)
        ref = ce_loss(logits, torch.tensor(m))
    stage2_ok = torch.equal(loss0, ref)

    cfg = make_config(manifest_path, tmp_path / "run")
    c1 = run_stage1(cfg)
    c2 = run_stage2(cfg, c1)
    c3 = finetune(cfg, c2)
    ckpt_ok = c1.read_bytes() == c2.read_bytes() == c3.read_bytes()

    _verdict("endpoint-identities", blend_ok and stage2_ok and ckpt_ok,
             f"blend={blend_ok} stage2={stage2_ok} checkpoints={ckpt_ok}")


# -- 6. overfit sanity -------------------------------------------------------

def _disk_episode(size=32, radius=10.0):
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy - size / 2 + 0.5) ** 2 + (xx - size / 2 + 0.5) ** 2)
            <= radius ** 2).astype(np.uint8)
    rng = np.random.default_rng(42)
    img = np.clip(0.2 + 0.6 * mask + rng.normal(0, 0.03, (size, size)),
                  0, 1).astype(np.float32)
    sl = ImageSlice(img, "disk")
    return FewShotEpisode(sl, mask, sl, mask)


def test_overfit_sanity(manifest_path, tmp_path):
    t0 = time.time()
    episode = _disk_episode()
    dices = []
    for seed in (0, 1, 2):
        cfg = make_config(manifest_path, tmp_path / f"run{seed}", seed=seed)
        model = _init_model(cfg)
        opt = torch.optim.SGD(model.parameters(), lr=cfg.stage2.lr,
                              momentum=cfg.stage2.momentum)
        for _ in range(200):
            opt.zero_grad()
            stage2_loss(episode, model, cfg.stage2).backward()
            opt.step()
        dices.append(_episode_dice(model, episode, cfg))
    med = float(np.median(dices))
    dt = time.time() - t0
    _verdict("overfit-sanity", med >= 0.90 and dt < 180,
             f"median dice {med:.3f} over seeds {dices}, {dt:.1f}s")


# -- 7/8. ablation trend and global-vs-dense ---------------------------------

TREND_SEEDS = range(7)

# augmentation kept geometric-dominant: the synthetic classes are defined by
# intensity bands, so heavy photometric jitter removes the class signal
TREND_OVERRIDES = {
    "view_transform.gamma_range": [1.0, 1.0],
    "view_transform.brightness_jitter": [0.0, 0.0],
    "view_transform.noise_std": 0.01,
    "episode_transform.gamma_range": [1.0, 1.0],
    "episode_transform.brightness_jitter": [0.0, 0.0],
    "episode_transform.noise_std": 0.01,
    "stage1.lr": 0.01,
    "stage1.tau": 1.0,
    "stage2.lr": 0.005,
    "min_fg": 40,
}


@pytest.fixture(scope="module")
def trend_scores(tmp_path_factory):
    """Mean test-class Dice for each pre-training variant, plus the
    global-only (lambda=0) comparison runs."""
    root = tmp_path_factory.mktemp("trend")
    data = root / "data"
    gen_synthetic(n_patients=25, image_size=32, seed=0, out_dir=data)
    manifest = data / "manifest.jsonl"

    def run(label, s1_iters, s2_iters, seed, **extra):
        cfg = make_config(manifest, root / f"{label}-{seed}", seed=seed,
                          **{**TREND_OVERRIDES,
                             "stage1.iterations": s1_iters,
                             "stage2.iterations": s2_iters, **extra})
        ckpt = run_stage2(cfg, run_stage1(cfg))
        return evaluate(cfg, ckpt)[0]["overall_mean"]

    scores = {
        "baseline": [run("baseline", 0, 0, s) for s in TREND_SEEDS],
        "stage1": [run("stage1", 500, 0, s) for s in TREND_SEEDS],
        "full": [run("full", 500, 600, s) for s in TREND_SEEDS],
        "global_only": [run("global-only", 500, 0, s,
                            **{"stage1.lambda_dense": 0.0})
                        for s in (0, 1, 2)],
    }
    return scores


def test_ablation_trend(trend_scores):
    t0 = time.time()
    base = float(np.mean(trend_scores["baseline"]))
    s1 = float(np.mean(trend_scores["stage1"]))
    full = float(np.mean(trend_scores["full"]))
    gap1, gap2 = s1 - base, full - s1
    ok = gap1 >= 0.03 and gap2 >= 0.03
    _verdict("ablation-trend", ok,
             f"baseline {base:.3f} < stage1 {s1:.3f} < full {full:.3f}; "
             f"gaps {gap1:+.3f}/{gap2:+.3f}")


def test_global_vs_dense(trend_scores):
    glob = float(np.median(trend_scores["global_only"]))
    dense = float(np.median(trend_scores["stage1"][:3]))
    _verdict("global-vs-dense", glob <= dense,
             f"global-only {glob:.3f} <= dense {dense:.3f}")


# -- 9. setting-2 purity audit -----------------------------------------------

def test_purity_audit(manifest_path, tmp_path):
    cfg = make_config(manifest_path, tmp_path / "run",
                      **{"stage1.iterations": 3, "stage2.iterations": 5,
                         "finetune.iterations": 10, "finetune.gt_mix": 0.5})
    finetune(cfg, run_stage2(cfg, run_stage1(cfg)))
    result = audit_test_class_purity(tmp_path / "run", cfg.data.test_classes)
    ok = result["entries_checked"] >= 15 and not result["violations"]
    _verdict("setting2-purity", ok,
             f"{result['entries_checked']} batches audited, "
             f"{len(result['violations'])} violations")


# -- 10. determinism ---------------------------------------------------------

def test_run_all_determinism(manifest_path, tmp_path):
    outputs = []
    for name in ("a", "b"):
        cfg = make_config(manifest_path, tmp_path / name,
                          **{"stage1.iterations": 3, "stage2.iterations": 3,
                             "finetune.iterations": 3})
        _, report_path = run_all(cfg)
        run = tmp_path / name
        outputs.append(((run / "finetune.ckpt").read_bytes(),
                        report_path.read_bytes()))
    ckpt_ok = outputs[0][0] == outputs[1][0]
    report_ok = outputs[0][1] == outputs[1][1]
    _verdict("determinism", ckpt_ok and report_ok,
             f"checkpoints identical={ckpt_ok}, reports identical={report_ok}")
