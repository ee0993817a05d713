"""End-to-end acceptance checks.

Each test prints exactly one summary line ("criterion NN <name>: PASS (...)"
or its FAIL twin), so `pytest tests/test_acceptance.py -s` yields a
twelve-line report. The segmentation suites take several minutes; everything
else finishes in seconds.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from flowseg import (
    FitConfig,
    HardMaskStack,
    ObjectiveConfig,
    SceneSpec,
    SoftMaskStack,
    add_flow_noise,
    default_prior,
    derive_seed,
    fg_ari,
    fit_masks_restarts,
    generate_sequence,
    hungarian,
    kl_to_uniform,
    lattice,
    loss_beta,
    loss_value_and_grad,
    miou_hungarian,
    nll_affine,
    nll_oracle,
    nll_translation,
    nll_translation_preweight,
    postprocess_connected_components,
    estimate_prior_covariance,
    Frame,
    GumbelRng,
    WarpPair,
)
from flowseg.cli import main as cli_main
from flowseg.motion import DEFAULT_AFFINE_COV

from helpers import (
    ari_by_pair_enumeration,
    brute_force_assignment,
    miou_by_enumeration,
    rand_flow,
    rand_hard,
    rand_lattice,
    rand_prior,
)


def report(index, name, ok, detail):
    line = "criterion %02d %s: %s (%s)" % (
        index, name, "PASS" if ok else "FAIL", detail
    )
    print("\n" + line, flush=True)
    assert ok, line


def rel_diff(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def hash_tree(root):
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# Shared segmentation suite: twenty fixed scenes plus their clean-flow fits,
# used by the recovery and noise-degradation checks.
# ---------------------------------------------------------------------------

LAT64 = lattice(64, 64)


def recovery_fit(flow, k, seed, use_warp=False, frames=None, warp_pair=None):
    cfg = FitConfig(k=k, iters=800, seed=seed, use_warp=use_warp)
    _, rep = fit_masks_restarts(
        flow, LAT64, default_prior("affine"), cfg, n_restarts=3,
        frames=frames, warp_pair=warp_pair,
    )
    return rep.masks.labels


@pytest.fixture(scope="module")
def clean_suite():
    start = time.perf_counter()
    scenes = []
    for seed in range(20):
        spec = SceneSpec(
            height=64, width=64, frames=2, objects=(3, 5),
            p_static=0.5, seed=seed, theta_style="raw",
        )
        rec = generate_sequence(spec)
        k = rec.manifest["k_true"]
        gt = rec.gt_masks[0].labels
        pred = recovery_fit(rec.forward_flows[0], k, seed)
        scenes.append({
            "record": rec,
            "k": k,
            "gt": gt,
            "ari": fg_ari(pred, gt),
            "miou": miou_hungarian(pred, gt),
        })
    return {"scenes": scenes, "wall": time.perf_counter() - start}


# ---------------------------------------------------------------------------
# 1. Closed forms match the dense-covariance oracle
# ---------------------------------------------------------------------------


def test_criterion_01_closed_form_matches_oracle():
    rng = np.random.default_rng(101)
    worst_affine = 0.0
    worst_translation = 0.0
    for i in range(200):
        lat = rand_lattice(rng, 4, 16)
        k = int(rng.integers(1, 5))
        masks = rand_hard(rng, k, lat.n)
        flow = rand_flow(rng, lat)
        if i % 2 == 0:
            pa, pt = default_prior("affine"), default_prior("translation")
        else:
            pa, pt = rand_prior(rng, "affine"), rand_prior(rng, "translation")
        worst_affine = max(
            worst_affine,
            rel_diff(nll_affine(flow, masks, lat, pa), nll_oracle(flow, masks, lat, pa)),
        )
        worst_translation = max(
            worst_translation,
            rel_diff(
                nll_translation(flow, masks, lat, pt),
                nll_oracle(flow, masks, lat, pt),
            ),
        )
    ok = worst_affine <= 1e-6 and worst_translation <= 1e-9
    report(
        1, "closed form vs oracle", ok,
        "200 instances, worst rel: affine %.2e (tol 1e-6), translation %.2e (tol 1e-9)"
        % (worst_affine, worst_translation),
    )


# ---------------------------------------------------------------------------
# 2. Translation dual-form identity
# ---------------------------------------------------------------------------


def test_criterion_02_translation_dual_form():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        lat = rand_lattice(rng, 4, 12)
        masks = rand_hard(rng, int(rng.integers(1, 5)), lat.n)
        soft = SoftMaskStack(masks.weights())
        flow = rand_flow(rng, lat)
        prior = rand_prior(rng, "translation")
        worst = max(worst, rel_diff(
            nll_translation(flow, soft, lat, prior),
            nll_translation_preweight(flow, soft, lat, prior),
        ))
    ok = worst <= 1e-9
    report(2, "translation dual form", ok,
           "100 one-hot instances, worst rel %.2e (tol 1e-9)" % worst)


# ---------------------------------------------------------------------------
# 3. Objective gradient vs central finite differences
# ---------------------------------------------------------------------------


def test_criterion_03_gradient_matches_finite_differences():
    worst = 0.0
    h = 1e-5
    case = 0
    for kind in ("affine", "translation"):
        for beta in (-0.1, 0.0, 0.1):
            case += 1
            rng = np.random.default_rng(300 + case)
            lat = lattice(int(rng.integers(6, 11)), int(rng.integers(6, 11)))
            flow = rand_flow(rng, lat)
            prior = default_prior(kind) if case % 2 else rand_prior(rng, kind)
            logits = rng.normal(0.0, 1.0, (3, lat.n))
            cfg = ObjectiveConfig(n_samples=2, beta_start=beta, beta_end=beta)
            noise = GumbelRng(900 + case)
            _, grad = loss_value_and_grad(logits, flow, lat, prior, cfg, 0, noise.clone())
            sampler = np.random.default_rng(77 + case)
            for _ in range(20):
                i = int(sampler.integers(0, logits.shape[0]))
                j = int(sampler.integers(0, logits.shape[1]))
                lp, lm = logits.copy(), logits.copy()
                lp[i, j] += h
                lm[i, j] -= h
                fd = (
                    loss_beta(lp, flow, lat, prior, cfg, 0, noise.clone())
                    - loss_beta(lm, flow, lat, prior, cfg, 0, noise.clone())
                ) / (2 * h)
                denom = max(abs(fd), abs(grad[i, j]), 1e-8)
                worst = max(worst, abs(grad[i, j] - fd) / denom)
    ok = worst < 1e-3
    report(3, "gradient finite differences", ok,
           "2 kinds x 3 beta values x 20 entries, worst rel %.2e (tol 1e-3)" % worst)


# ---------------------------------------------------------------------------
# 4. Analytic KL values
# ---------------------------------------------------------------------------


def test_criterion_04_kl_analytic_values():
    uniform = np.full((4, 30), 0.25)
    zero = kl_to_uniform(uniform)
    n, k = 50, 4
    onehot = np.zeros((k, n))
    onehot[np.arange(n) % k, np.arange(n)] = 1.0
    got = kl_to_uniform(onehot)
    expect = n * np.log(k)
    rel = abs(got - expect) / expect
    ok = zero == 0.0 and rel <= 1e-6
    report(4, "analytic KL values", ok,
           "uniform -> %r (exact 0), one-hot rel %.2e (tol 1e-6)" % (zero, rel))


# ---------------------------------------------------------------------------
# 5. Segmentation recovery on the fixed clean suite
# ---------------------------------------------------------------------------


def test_criterion_05_segmentation_recovery(clean_suite):
    aris = [s["ari"] for s in clean_suite["scenes"]]
    mious = [s["miou"] for s in clean_suite["scenes"]]
    mean_ari = float(np.mean(aris))
    mean_miou = float(np.mean(mious))
    ok = mean_ari >= 0.90 and mean_miou >= 0.70
    report(
        5, "segmentation recovery", ok,
        "20 scenes: mean FG-ARI %.4f (>= 0.90), mean mIoU %.4f (>= 0.70), %.0fs"
        % (mean_ari, mean_miou, clean_suite["wall"]),
    )


# ---------------------------------------------------------------------------
# 6. Affine prior beats translation prior on rotation-heavy scenes
# ---------------------------------------------------------------------------


def test_criterion_06_affine_beats_translation():
    aff, tr = [], []
    for seed in range(10):
        spec = SceneSpec(
            height=64, width=64, frames=2, objects=(1, 2),
            p_static=0.0, seed=seed, theta_style="about_center",
        )
        rec = generate_sequence(spec)
        k = rec.manifest["k_true"]
        gt = rec.gt_masks[0].labels
        flow = rec.forward_flows[0]
        for kind, acc in (("affine", aff), ("translation", tr)):
            cfg = FitConfig(k=k, iters=800, seed=seed)
            _, rep = fit_masks_restarts(flow, LAT64, default_prior(kind), cfg, n_restarts=3)
            acc.append(miou_hungarian(rep.masks.labels, gt))
    mean_aff, mean_tr = float(np.mean(aff)), float(np.mean(tr))
    ok = mean_aff > mean_tr
    report(6, "affine beats translation", ok,
           "10 rotation-heavy scenes: mIoU affine %.4f > translation %.4f"
           % (mean_aff, mean_tr))


# ---------------------------------------------------------------------------
# 7. Flow noise degrades recovery; warp term is non-harmful under noise
# ---------------------------------------------------------------------------


def test_criterion_07_noise_degrades_and_warp_not_harmful(clean_suite):
    noisy_m, warp_m = [], []
    for seed, scene in enumerate(clean_suite["scenes"]):
        rec = scene["record"]
        fwd = add_flow_noise(rec.forward_flows[0], 1.0, np.random.default_rng((seed, 7000)))
        bwd = add_flow_noise(rec.backward_flows[0], 1.0, np.random.default_rng((seed, 7001)))
        pred = recovery_fit(fwd, scene["k"], seed)
        noisy_m.append(miou_hungarian(pred, scene["gt"]))
        frames = (
            Frame.from_image(rec.images[0], LAT64),
            Frame.from_image(rec.images[1], LAT64),
        )
        pred = recovery_fit(
            fwd, scene["k"], seed,
            use_warp=True, frames=frames, warp_pair=WarpPair(fwd, bwd),
        )
        warp_m.append(miou_hungarian(pred, scene["gt"]))
    mean_clean = float(np.mean([s["miou"] for s in clean_suite["scenes"]]))
    mean_noisy = float(np.mean(noisy_m))
    mean_warp = float(np.mean(warp_m))
    ok = mean_noisy < mean_clean and mean_warp >= mean_noisy
    report(
        7, "noise degradation and warp", ok,
        "mIoU clean %.4f > noisy %.4f (sigma 1.0), warp-on %.4f >= noisy"
        % (mean_clean, mean_noisy, mean_warp),
    )


# ---------------------------------------------------------------------------
# 8. Post-processing rules on constructed fixtures
# ---------------------------------------------------------------------------


def test_criterion_08_postprocess_rules():
    # one label in two separated blobs splits into two labels
    arr = np.zeros((10, 10), dtype=np.int64)
    arr[:5, :6] = 1
    arr[:5, 7:] = 1
    lat = lattice(10, 10)
    out = postprocess_connected_components(
        HardMaskStack(arr.reshape(-1), k=2), lat, k_keep=3
    ).labels.reshape(10, 10)
    split_ok = (
        out[0, 0] != out[0, 9]
        and (out[:5, :6] == out[0, 0]).all()
        and (out[:5, 7:] == out[0, 9]).all()
    )

    # a 2px speck (far below 0.1% of 64x64) folds into the largest component
    arr = np.zeros((64, 64), dtype=np.int64)
    arr[:, :32] = 1
    arr[10, 40] = 2
    arr[10, 41] = 2
    out = postprocess_connected_components(
        HardMaskStack(arr.reshape(-1), k=3), lattice(64, 64), k_keep=3
    ).labels.reshape(64, 64)
    speck_ok = out[10, 40] == out[0, 0] and len(np.unique(out)) == 2

    # beyond k_keep, components merge into the largest one
    arr = np.zeros((8, 8), dtype=np.int64)
    arr[0:2, 0:2] = 1
    arr[0:2, 4:6] = 2
    arr[4:6, 0:2] = 3
    out = postprocess_connected_components(
        HardMaskStack(arr.reshape(-1), k=4), lattice(8, 8),
        k_keep=2, min_area_frac=0.01,
    ).labels.reshape(8, 8)
    merge_ok = (
        len(np.unique(out)) == 2
        and out[0, 0] == 1
        and out[0, 4] == 0
        and out[4, 0] == 0
    )

    ok = split_ok and speck_ok and merge_ok
    report(8, "post-processing rules", ok,
           "split %s, speck discard %s, merge overflow %s"
           % (split_ok, speck_ok, merge_ok))


# ---------------------------------------------------------------------------
# 9. Metrics agree with brute-force references
# ---------------------------------------------------------------------------


def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(909)

    ari_ok = True
    for _ in range(300):
        n = int(rng.integers(2, 13))
        gt = rng.integers(0, 4, size=n)
        if not (gt != 0).any():
            gt[0] = 1
        pred = rng.integers(0, 4, size=n)
        fg = gt != 0
        expect = ari_by_pair_enumeration(pred[fg].tolist(), gt[fg].tolist())
        ari_ok &= abs(fg_ari(pred, gt) - expect) <= 1e-12

    hung_ok = True
    for _ in range(1000):
        rows = int(rng.integers(1, 7))
        cols = int(rng.integers(1, 7))
        cost = rng.integers(0, 6, size=(rows, cols)).astype(float)
        got = hungarian(cost)
        pairs, total = brute_force_assignment(cost)
        hung_ok &= abs(got.total_cost - total) <= 1e-9 and got.pairs == pairs

    miou_ok = True
    for _ in range(200):
        n = int(rng.integers(4, 20))
        pred = rng.integers(0, 4, size=n)
        gt = rng.integers(0, 4, size=n)
        miou_ok &= abs(miou_hungarian(pred, gt) - miou_by_enumeration(pred, gt)) <= 1e-12

    ok = ari_ok and hung_ok and miou_ok
    report(9, "metric oracles", ok,
           "fg_ari pair counting %s, assignment brute force (1000 trials) %s, "
           "mIoU enumeration %s" % (ari_ok, hung_ok, miou_ok))


# ---------------------------------------------------------------------------
# 10. Closed form is at least 100x faster than the oracle at 64x64
# ---------------------------------------------------------------------------


def test_criterion_10_closed_form_speedup(tmp_path):
    out = str(tmp_path)
    rc = cli_main(["bench", "--size", "64x64", "--k", "4", "--repeats", "20", "--out", out])
    rep = json.load(open(os.path.join(out, "bench_report.json")))
    ok = rc == 0 and rep["ratio"] >= 100.0 and rep["max_rel_diff"] <= 1e-6
    report(10, "closed-form speedup", ok,
           "ratio %.0fx (>= 100x), rel diff %.1e (tol 1e-6)"
           % (rep["ratio"], rep["max_rel_diff"]))


# ---------------------------------------------------------------------------
# 11. Byte-identical repeated CLI runs
# ---------------------------------------------------------------------------


def test_criterion_11_byte_determinism(tmp_path):
    data = str(tmp_path / "data")
    gen = [
        "generate", "--out", data, "--scenes", "2", "--seed", "7",
        "--size", "24x24", "--objects", "1-2", "--p-static", "0.0",
        "--threads", "2",
    ]
    assert cli_main(gen) == 0
    first = hash_tree(data)
    assert cli_main(gen) == 0
    gen_ok = hash_tree(data) == first

    fit_out = str(tmp_path / "fit")
    fit = [
        "fit", "--data", data, "--out", fit_out, "--iters", "120",
        "--seed", "5", "--threads", "2",
    ]
    assert cli_main(fit) == 0
    first = hash_tree(fit_out)
    assert cli_main(fit) == 0
    fit_ok = hash_tree(fit_out) == first

    ok = gen_ok and fit_ok
    report(11, "byte determinism", ok,
           "repeated generate identical %s, repeated fit identical %s"
           % (gen_ok, fit_ok))


# ---------------------------------------------------------------------------
# 12. Prior calibration recovers known covariance diagonals within 2x
# ---------------------------------------------------------------------------


def test_criterion_12_prior_calibration_recovery():
    records = []
    for i in range(200):
        spec = SceneSpec(
            height=64, width=64, frames=2, objects=(3, 5),
            p_static=0.0, seed=derive_seed(1200, i),
        )
        records.append(generate_sequence(spec))
    prior = estimate_prior_covariance(records, "affine")
    ratios = np.diag(prior.cov) / np.diag(DEFAULT_AFFINE_COV)
    ok = bool(np.all((ratios >= 0.5) & (ratios <= 2.0)))
    report(12, "prior calibration", ok,
           "200 scenes, diag ratios %s (each within [0.5, 2])"
           % np.array2string(ratios, precision=3))
