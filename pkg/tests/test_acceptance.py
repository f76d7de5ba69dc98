"""The eight primary acceptance criteria, each reported as one PASS/FAIL line."""

import csv
import json
import time

import numpy as np
import pytest
import torch

from helpers import (FOUR_LABELS, FOUR_SCORES, GEOMETRY, angle_deg, block_cases, block_gradcheck,
                     binormal_cohort, concentration_field, cutoff_ap, mean_ci_width, pairwise_auroc,
                     plausible_stains, random_instance, tum_tiles)
from tilebench.cli import main
from tilebench.core import CohortManifest, SlideRecord, Task
from tilebench.metrics import auprc, auroc, bootstrap_ci
from tilebench.nn import Family, count_parameters, reference_spec
from tilebench.nn import blocks as B
from tilebench.preprocess import PreprocessConfig, macenko_fit, macenko_normalize, tessellate
from tilebench.synthetic import compose_he
from tilebench.tissue import select_tumor_tiles
from tilebench.train import stratified_kfold

TARGETS = [  # family, millions, relative tolerance
    (Family.RESNET18, 11.18, 0.01), (Family.RESNET50, 23.51, 0.01), (Family.MOBILENETV2, 2.23, 0.01),
    (Family.VIT, 85.8, 0.01), (Family.EFFICIENTNET, 4.01, 0.02), (Family.MOBILEVIT, 4.94, 0.02),
    (Family.CMT, 24.98, 0.02), (Family.SWINT, 48.84, 0.02), (Family.SEQUENCER2D, 27.27, 0.02),
]


def test_1_parameter_counts(verdict):
    t0 = time.perf_counter()
    misses = []
    for family, millions, tol in TARGETS:
        got = count_parameters(reference_spec(family, 2)) / 1e6
        if abs(got - millions) > tol * millions:
            misses.append(f"{family.value} {got:.2f}M vs {millions}M")
    secs = time.perf_counter() - t0
    ok = not misses and secs < 1.0
    verdict(1, "parameter counts", ok, f"9 families in {secs:.3f}s" + (f"; off: {misses}" if misses else ""))


def test_2_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        s, y = random_instance(rng, 200)
        if auroc(s, y) != float(pairwise_auroc(s, y)) or auprc(s, y) != float(cutoff_ap(s, y)):
            bad += 1
    four_roc = auroc(FOUR_SCORES, FOUR_LABELS)
    four_ap = auprc(FOUR_SCORES, FOUR_LABELS)
    secs = time.perf_counter() - t0
    ok = bad == 0 and abs(four_roc - 0.75) <= 1e-9 and abs(four_ap - 5 / 6) <= 1e-9 and secs < 30
    verdict(2, "metric oracles", ok,
            f"{1000 - bad}/1000 exact, fixture AUROC {four_roc:.4f} AUPRC {four_ap:.4f}, {secs:.1f}s")


def test_3_bootstrap(verdict):
    t0 = time.perf_counter()
    s, y = binormal_cohort(np.random.default_rng(9), 150)
    a = json.dumps(bootstrap_ci(s, y, "AUROC", 1000, seed=77).to_dict(), sort_keys=True).encode()
    b = json.dumps(bootstrap_ci(s, y, "AUROC", 1000, seed=77).to_dict(), sort_keys=True).encode()
    ratio = mean_ci_width(100) / mean_ci_width(400)
    secs = time.perf_counter() - t0
    ok = a == b and 2 * 0.75 <= ratio <= 2 * 1.25 and secs < 60
    verdict(3, "bootstrap reproducibility and 1/sqrt(n) width", ok,
            f"bytes equal {a == b}, width(100)/width(400) = {ratio:.3f}, {secs:.1f}s")


def test_4_gradient_checks(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, factory, shape in block_cases():
        worst[name] = max(block_gradcheck(factory, shape, draw) for draw in range(5))
    secs = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(e < 1e-4 for e in worst.values()) and secs < 300
    verdict(4, "finite-difference gradients", ok,
            f"{len(worst)} blocks x 5 draws, worst {top} {worst[top]:.2e}, {secs:.1f}s")


def _equivariance_error() -> float:
    torch.manual_seed(0)
    worst = 0.0
    attn = B.SelfAttention(16, 4).double()
    stack = torch.nn.Sequential(*(B.TransformerBlock(16, 4, 32) for _ in range(2))).double()
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 25, 16, generator=g, dtype=torch.float64)
        perm = torch.randperm(25, generator=g)
        with torch.no_grad():
            for f in (attn, stack):
                worst = max(worst, float((f(x)[:, perm] - f(x[:, perm])).abs().max()))
    return worst


def test_5_structural_roundtrips(verdict):
    x = torch.randn(3, 8, 8, 6)
    windows = torch.equal(B.window_merge(B.window_partition(x, 4), 4, 8, 8), x)
    shifts = all(torch.equal(B.cyclic_unshift(B.cyclic_shift(x, s), s), x) for s in (1, 2, 3))
    m = torch.randn(2, 5, 12, 8)
    folds = all(torch.equal(B.fold_patches(B.unfold_patches(m, p), p, 12, 8), m) for p in (1, 2, 4))
    err = _equivariance_error()
    ok = windows and shifts and folds and err <= 1e-6
    verdict(5, "structural round-trips", ok,
            f"partition {windows}, shift {shifts}, unfold {folds}, attention permutation error {err:.1e}")


def test_6_macenko(verdict):
    t0 = time.perf_counter()
    cfg = PreprocessConfig()
    angle = idem = scale = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        stains = plausible_stains(rng)
        conc = concentration_field(rng, stains)
        prof = macenko_fit(compose_he(conc, stains), cfg)
        angle = max(angle, *(angle_deg(prof.stain_matrix[:, k], stains[:, k]) for k in range(2)))
        once = macenko_normalize(compose_he(conc, stains), None, cfg)
        twice = macenko_normalize(once, None, cfg)
        idem = max(idem, np.abs(once.astype(int) - twice).max())
        a = macenko_normalize(compose_he(conc, stains, dtype=float), None, cfg)
        b = macenko_normalize(compose_he(conc * 1.4, stains, dtype=float), None, cfg)
        scale = max(scale, np.abs(a.astype(int) - b).max())
    secs = time.perf_counter() - t0
    ok = angle < 5.0 and idem <= 2 and scale <= 2 and secs < 60
    verdict(6, "Macenko normalization", ok,
            f"max angle {angle:.2f} deg, idempotence {idem}, scale {scale} (per 8-bit channel), {secs:.1f}s")


def test_7_protocol_fidelity(verdict):
    cfg = PreprocessConfig()
    geometry = all(
        [(r.x, r.y) for r, _ in tessellate(SlideRecord("S", "P", "c", "", mpp), cfg,
                                           image=np.zeros((h, w, 3), np.uint8))] == origins
        for w, h, mpp, origins in GEOMETRY)
    tiles = tum_tiles("S", 600)
    first = select_tumor_tiles(tiles, 500, seed=5, patient_id="P")
    again = select_tumor_tiles(tiles[::-1], 500, seed=5, patient_id="P")
    cap = len(first) == 500 and first == again

    folds_ok = True
    for n_pos, n_neg, seed in ((166, 972, 0), (13, 29, 1), (5, 5, 2), (31, 47, 3)):
        slides = tuple(SlideRecord(f"S{i}", f"P{i}", "c", "", 0.5, {"MSI": int(i < n_pos)})
                       for i in range(n_pos + n_neg))
        plan = stratified_kfold(CohortManifest(Task.MSI, slides), 5, seed)
        members = [plan.fold(i) for i in range(5)]
        folds_ok &= sorted(p for m in members for p in m) == sorted(s.patient_id for s in slides)
        for m in members:
            pos = sum(int(p[1:]) < n_pos for p in m)
            folds_ok &= abs(pos - n_pos / 5) <= 1 and abs(len(m) - pos - n_neg / 5) <= 1
    ok = geometry and cap and folds_ok
    verdict(7, "pipeline protocol fidelity", ok,
            f"tessellation {geometry}, 600 -> {len(first)} deterministic {first == again}, folds {folds_ok}")


@pytest.mark.slow
def test_8_end_to_end(tmp_path, verdict):
    t0 = time.perf_counter()
    code = main(["demo", "--dir", str(tmp_path), "--patients", "60", "--test-patients", "30"])
    secs = time.perf_counter() - t0
    rows = []
    summary = tmp_path / "out" / "report" / "summary.csv"
    if summary.is_file():
        with open(summary, newline="") as fh:
            rows = list(csv.DictReader(fh))
    auc = {r["family"]: float(r["AUROC"]) for r in rows}
    trained = {f: auc.get(f, float("nan")) for f in ("ResNet18", "Sequencer2D")}
    ok = code == 0 and len(rows) == 9 and all(v > 0.90 for v in trained.values()) and secs < 600
    verdict(8, "end-to-end smoke", ok,
            f"exit {code}, {len(rows)} rows, held-out AUROC "
            + ", ".join(f"{k} {v:.3f}" for k, v in trained.items()) + f", {secs:.0f}s")
