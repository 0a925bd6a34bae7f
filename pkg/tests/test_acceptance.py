"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE n PASS|FAIL`` line (also repeated in the
terminal summary) and then asserts the same condition.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from afford.contact_extract import fit_gmm
from afford.denoiser import TrainConfig, batch_loss, build_model, records_to_tensors
from afford.diffusion import AffordanceLatent, NoisePair, build_schedule, ddpm_step
from afford.errors import AmbiguousOrientation, ParallelAxes
from afford.geometry import (CameraIntrinsics, DepthMap, PixelPoint, Quaternion, geodesic_angle, matrix_to_quat,
                             project, quat_to_matrix, quat_to_rot6d, rot6d_to_quat, unproject)
from afford.grip_mapping import FingerPair, HandKeypoints, PairId, PalmFrame, hand_to_gripper, recover_contact_pose
from afford.pipeline import curate_records, evaluate_model, generate, train_model
from afford.synth.dataset import read_dataset, write_dataset
from afford.synth.records import Provenance

pytestmark = pytest.mark.acceptance

WIDTH = 64
N_TRAIN, N_HELD = 2000, 500
TRAIN_SEED, HELD_SEED, TWIN_TRAIN_SEED, TWIN_HELD_SEED, ROBOT_SEED = 0, 1, 2, 3, 4
EVAL_SAMPLES = 2
SL = build_schedule("scaled_linear", 100, beta_start=8.5e-4, beta_end=0.12)
SR = build_schedule("squared_cosine")


def training_set(records):
    """Curated records plus label-bearing robot records; failed curations are dropped, never backfilled."""
    return [r for r in records if r.curated is not None or r.provenance is Provenance.ROBOT]


def run_benchmark(train_records, held, cfg: TrainConfig = TrainConfig(), n_per_scene=EVAL_SAMPLES):
    t0 = time.time()
    model, curve = train_model(train_records, cfg, SL, SR)
    t_train = time.time() - t0
    res = evaluate_model(model, held, SL, SR, n_per_scene=n_per_scene, seed=0)
    return {"res": res, "agg": res.aggregates, "chance": res.extra["chance_sr"], "curve": curve,
            "t_train": t_train, "t_total": time.time() - t0}


# ---------------------------------------------------------------------------
# 1. geometry


def test_criterion_1_geometry(acceptance_report):
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst_px = 0.0
    for _ in range(20):
        w, h = int(rng.integers(16, 512)), int(rng.integers(16, 512))
        k = CameraIntrinsics(float(rng.uniform(50, 1000)), float(rng.uniform(50, 1000)),
                             float(rng.uniform(0, w)), float(rng.uniform(0, h)), w, h)
        depth = DepthMap(rng.uniform(0.05, 20, size=(h, w)))
        for _ in range(500):
            c = PixelPoint(float(rng.uniform(-0.5, w - 0.51)), float(rng.uniform(-0.5, h - 0.51)))
            back = project(k, unproject(k, c, depth))
            worst_px = max(worst_px, abs(back.u - c.u), abs(back.v - c.v))
    worst_rad = 0.0
    qs = rng.normal(size=(10_000, 4))
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    for q in qs:
        back = rot6d_to_quat(quat_to_rot6d(Quaternion(*q)))
        worst_rad = max(worst_rad, geodesic_angle(back.as_array(), q))
    dt = time.time() - t0
    ok = worst_px < 1e-6 and worst_rad < 1e-5 and dt < 5.0
    acceptance_report(1, ok, f"round-trip max {worst_px:.2e} px, 6D max {worst_rad:.2e} rad, {dt:.2f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. hand-to-gripper mapping


def test_criterion_2_mapping(acceptance_report):
    hands = [(r.intermediates.hand.joints, r.intermediates.object_points)
             for r in generate(1000, 21, width=WIDTH).records]
    rng = np.random.default_rng(2)
    worst_eq, worst_scale, skipped = 0.0, 0.0, 0
    for joints, pts in hands:
        j = joints + rng.normal(0, 0.002, size=joints.shape)
        Q = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
        try:
            q1, pair, palm = hand_to_gripper(HandKeypoints(j), pts)
            q2, _, _ = hand_to_gripper(HandKeypoints(j @ Q.T), pts @ Q.T)
        except (ParallelAxes, AmbiguousOrientation):
            skipped += 1
            continue
        expected = matrix_to_quat(Q @ quat_to_matrix(q1.as_array()))
        worst_eq = max(worst_eq, geodesic_angle(expected, q2.as_array()))
        s1, s2 = float(rng.uniform(1e-3, 1e3)), float(rng.uniform(1e-3, 1e3))
        a = np.asarray(pair.tip_a)
        scaled = FingerPair(pair.pair_id, pair.tip_a, tuple(a + s1 * (np.asarray(pair.tip_b) - a)), pair.score)
        q3 = recover_contact_pose(scaled, PalmFrame(palm.normal * s2, palm.centroid))
        worst_scale = max(worst_scale, geodesic_angle(q1.as_array(), q3.as_array()))

    def pose(v, n):
        return recover_contact_pose(FingerPair(PairId.THUMB_INDEX, (0, 0, 0), v, 1.0),
                                    PalmFrame(np.asarray(n, float), (0, 0, 0))).as_array().tolist()

    closed = pose((1, 0, 0), (0, 0, -1)) == [1.0, 0.0, 0.0, 0.0]
    closed &= pose((1, 0, 0), (0.6, 0, -0.8)) == [1.0, 0.0, 0.0, 0.0]
    try:
        pose((0, 0, 1), (0, 0, -1))
        closed = False
    except ParallelAxes:
        pass
    ok = worst_eq < 1e-6 and worst_scale < 1e-9 and closed and skipped <= 100
    acceptance_report(2, ok, f"equivariance max {worst_eq:.2e} rad, scale max {worst_scale:.2e} rad over "
                             f"{len(hands) - skipped} hands ({skipped} degenerate), closed forms {closed}")
    assert ok


# ---------------------------------------------------------------------------
# 3. EM fitting


def test_criterion_3_em(acceptance_report):
    fits = []
    worst_cluster = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.normal((20, 20), 2, size=(100, 2))
        b = rng.normal((80, 80), 2, size=(100, 2))
        g = fit_gmm(np.vstack([a, b]), 2, seed=seed)
        fits.append(g)
        m = g.means[np.argsort(g.means[:, 0])]
        worst_cluster = max(worst_cluster, np.linalg.norm(m[0] - a.mean(0)), np.linalg.norm(m[1] - b.mean(0)))
    rng = np.random.default_rng(3)
    worst_k1 = 0.0
    for _ in range(100):
        x = rng.normal(rng.uniform(-50, 50, 2), rng.uniform(0.5, 10), size=(int(rng.integers(2, 300)), 2))
        g = fit_gmm(x, 1)
        fits.append(g)
        worst_k1 = max(worst_k1, float(np.abs(g.means[0] - x.mean(0)).max()))
        for k in (2, 3):
            fits.append(fit_gmm(x, k, seed=int(rng.integers(1000))) if len(x) >= k else g)
    monotone = all(np.all(np.diff(g.ll_trace) >= -1e-9 * max(1.0, np.abs(g.ll_trace).max())) for g in fits)
    ok = monotone and worst_cluster < 0.5 and worst_k1 < 1e-9
    acceptance_report(3, ok, f"{len(fits)} fits monotone={monotone}, two-cluster max {worst_cluster:.3f} px, "
                             f"k=1 max {worst_k1:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. diffusion consistency


def test_criterion_4_diffusion(acceptance_report):
    worst_chain, worst_rec, mono = 0.0, 0.0, True
    rng = np.random.default_rng(4)
    for kind in ("scaled_linear", "squared_cosine"):
        for n in (1, 10, 100):
            s = build_schedule(kind, n)
            prev = np.concatenate([[1.0], s.alpha_bars[:-1]])
            worst_rec = max(worst_rec, float(np.abs(s.alpha_bars - s.alphas * prev).max()))
            mono &= bool(np.all(np.diff(np.concatenate([[1.0], s.alpha_bars])) < 0))
    for n in (1, 10, 100):
        sl, sr = build_schedule("scaled_linear", n), build_schedule("squared_cosine", n)
        for _ in range(20):
            a0 = AffordanceLatent(rng.uniform(-1, 1, 2), rng.normal(size=6))
            a = AffordanceLatent(rng.normal(size=2), rng.normal(size=6))
            for i in range(n, 0, -1):
                bl, br = sl.alpha_bars[i - 1], sr.alpha_bars[i - 1]
                eps = NoisePair((a.loc - math.sqrt(bl) * a0.loc) / math.sqrt(1 - bl),
                                (a.rot - math.sqrt(br) * a0.rot) / math.sqrt(1 - br))
                a = ddpm_step(a, i, eps, sl, sr, NoisePair.zeros())
            worst_chain = max(worst_chain, float(np.abs(a.loc - a0.loc).max()), float(np.abs(a.rot - a0.rot).max()))
    ok = worst_chain < 1e-6 and worst_rec < 1e-12 and mono
    acceptance_report(4, ok, f"oracle chain max {worst_chain:.1e}, recurrence max {worst_rec:.1e}, "
                             f"strictly decreasing {mono}")
    assert ok


# ---------------------------------------------------------------------------
# 5. gradient check


def test_criterion_5_gradient(acceptance_report):
    t0 = time.time()
    cfg = TrainConfig(d_model=16, n_layers=2, n_heads=4)
    model = build_model(cfg, dtype=torch.float64)
    recs = generate(4, 55, width=WIDTH).records
    data = records_to_tensors(recs, dtype=torch.float64)
    idx = np.arange(len(recs))

    def loss():
        return batch_loss(model, data, idx, SL, SR, cfg, np.random.default_rng(5))

    model.zero_grad()
    loss().backward()
    named = list(model.named_parameters())
    rng = np.random.default_rng(55)
    worst, h = 0.0, 1e-4
    for _ in range(20):
        _, p = named[int(rng.integers(len(named)))]
        flat = p.data.view(-1)
        j = int(rng.integers(flat.numel()))
        analytic = float(p.grad.view(-1)[j])
        old = float(flat[j])
        with torch.no_grad():
            flat[j] = old + h
            lp = float(loss())
            flat[j] = old - h
            lm = float(loss())
            flat[j] = old
        numeric = (lp - lm) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    dt = time.time() - t0
    ok = worst < 1e-3 and dt < 120
    acceptance_report(5, ok, f"max relative error {worst:.2e} on 20 parameters, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 6. curation closed loop


def curation_metrics():
    t0 = time.time()
    clean = curate_records(generate(500, 6, width=256).records)
    noisy = curate_records(generate(500, 6, width=256, sigma_track=2.0).records)
    within_clean = sum(px <= 2.0 and math.degrees(rad) <= 5.0
                       for px, rad in zip(clean.px_errors, clean.rot_errors)) / 500
    within_noisy = sum(px <= 6.0 for px in noisy.px_errors) / 500
    return {"clean": within_clean, "noisy": within_noisy, "t": time.time() - t0,
            "px_clean": clean.px_errors, "px_noisy": noisy.px_errors}


@pytest.fixture(scope="module")
def curation_run():
    return curation_metrics()


def test_criterion_6_curation(acceptance_report, curation_run):
    m = curation_run
    ok = m["clean"] >= 0.99 and m["noisy"] >= 0.95 and m["t"] < 180
    acceptance_report(6, ok, f"noiseless {m['clean']:.3f} within 2 px/5 deg, sigma 2 px {m['noisy']:.3f} "
                             f"within 6 px, {m['t']:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 7. end-to-end learning benchmark


def benchmark_data():
    train = curate_records(generate(N_TRAIN, TRAIN_SEED, width=WIDTH).records).records
    held = generate(N_HELD, HELD_SEED, width=WIDTH).records
    return training_set(train), held


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.time()
    train, held = benchmark_data()
    out = run_benchmark(train, held)
    out["t_all"] = time.time() - t0
    out["train"], out["held"] = train, held
    return out


def test_criterion_7_learning(acceptance_report, benchmark):
    agg, chance = benchmark["agg"], benchmark["chance"]
    med_deg = math.degrees(agg["rot_err_median"])
    ok = (agg["sr"] >= 0.80 and agg["sr"] >= chance + 0.3 and med_deg <= 30.0 and agg["dtm"] <= 0.02
          and benchmark["t_all"] <= 3600)
    acceptance_report(7, ok, f"SR {agg['sr']:.3f} (chance {chance:.3f}), median rot {med_deg:.1f} deg, "
                             f"DTM {agg['dtm']:.4f}, NSS {agg['nss']:.2f}, {len(benchmark['train'])} train / "
                             f"{agg['n']} held-out, {benchmark['t_all'] / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 8. mask-branch ablation on look-alike scenes


def test_criterion_8_mask_ablation(acceptance_report):
    train = training_set(curate_records(generate(N_TRAIN, TWIN_TRAIN_SEED, width=WIDTH, twin=True).records).records)
    held = generate(N_HELD, TWIN_HELD_SEED, width=WIDTH, twin=True).records
    with_mask = run_benchmark(train, held, TrainConfig(), n_per_scene=1)["agg"]["sr"]
    without = run_benchmark(train, held, TrainConfig(use_mask_branch=False), n_per_scene=1)["agg"]["sr"]
    ok = with_mask - without >= 0.05
    acceptance_report(8, ok, f"twin scenes SR with mask branch {with_mask:.3f}, zeroed {without:.3f}, "
                             f"drop {with_mask - without:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. robot-provenance records


def test_criterion_9_robot_mix(acceptance_report, benchmark, tmp_path):
    n_robot = N_TRAIN // 4
    robot = generate(n_robot, ROBOT_SEED, width=WIDTH, provenance="robot", id_prefix="r").records
    mixed = benchmark["train"][:N_TRAIN - n_robot] + robot
    write_dataset(mixed, tmp_path / "mixed")
    loaded = read_dataset(tmp_path / "mixed")
    summary = curate_records(loaded)
    train = training_set(summary.records)
    out = run_benchmark(train, benchmark["held"], n_per_scene=1)
    sr7 = benchmark["agg"]["sr"]
    sr9 = out["agg"]["sr"]
    n_rob = sum(r.provenance is Provenance.ROBOT for r in train)
    ok = summary.skipped == n_robot and sr9 >= sr7 - 0.05
    acceptance_report(9, ok, f"mixed set ({n_rob} robot / {len(train)}) SR {sr9:.3f} vs {sr7:.3f} "
                             f"(allowed drop 0.05)")
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_10_determinism(acceptance_report, benchmark, curation_run, tmp_path):
    again6 = curation_metrics()
    same6 = (again6["clean"] == curation_run["clean"] and again6["noisy"] == curation_run["noisy"]
             and np.allclose(again6["px_clean"], curation_run["px_clean"], rtol=0, atol=1e-9)
             and np.allclose(again6["px_noisy"], curation_run["px_noisy"], rtol=0, atol=1e-9))
    train, held = benchmark_data()
    again7 = run_benchmark(train, held)
    keys = ("sr", "nss", "dtm", "rot_err", "rot_err_median")
    diff7 = max(abs(again7["agg"][k] - benchmark["agg"][k]) for k in keys)
    same_curve = np.allclose(again7["curve"], benchmark["curve"], rtol=0, atol=1e-9)
    recs = generate(200, 10, width=WIDTH, sigma_track=1.0).records
    write_dataset(recs, tmp_path / "a")
    write_dataset(generate(200, 10, width=WIDTH, sigma_track=1.0).records, tmp_path / "b")
    same_bytes = tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    ok = same6 and diff7 <= 1e-9 and same_curve and same_bytes
    acceptance_report(10, ok, f"curation rerun identical {same6}, benchmark metric diff {diff7:.1e}, "
                              f"loss curve identical {same_curve}, dataset bytes identical {same_bytes}")
    assert ok
