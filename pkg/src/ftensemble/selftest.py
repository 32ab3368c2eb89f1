"""Built-in oracle and property checks behind the ``selftest`` subcommand.

Each check recomputes an expected answer along an independent route —
finite differences for gradients, the truncated Neumann series for the
propagation solve, the SVD path for the spectral penalty, direct hand
values elsewhere — and compares at the documented tolerance. Runs in a few
seconds; the pytest suite covers the same ground far more thoroughly.
"""

from __future__ import annotations

import numpy as np

from . import network as nw
from .augment import AugmentParams, flip_h, resize_bilinear, rotate, tta_predict
from .ensemble import make_projection
from .episodes import evaluate
from .labelprop import LPConfig, knn_graph, normalized_laplacian, propagate
from .linalg import BACKEND, RngStream, random_symmetric, singular_values, solve, sym_eig

__all__ = ["run_selftest"]


def _finite_difference_grads(params, cfg, x, y, spec, h=1e-5):
    """Central finite differences of the composite loss, every parameter."""
    grads = []
    for arr, _ in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = nw.composite_loss(params, cfg, x, y, spec)["total"]
            arr[idx] = orig - h
            down = nw.composite_loss(params, cfg, x, y, spec)["total"]
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def _check_frobenius_identity() -> tuple[bool, str]:
    worst = 0.0
    for trial in range(20):
        g = RngStream(100, trial).generator()
        b, m = int(g.integers(1, 17)), int(g.integers(2, 17))
        feats = g.normal(size=(b, m))
        direct = nw.loss_bsr(feats)
        via_svd = float(np.sum(singular_values(feats.T) ** 2))
        worst = max(worst, abs(direct - via_svd) / max(abs(via_svd), 1e-12))
    return worst <= 1e-8, f"max relative gap {worst:.2e}"


def _check_gradients() -> tuple[bool, str]:
    worst = 0.0
    for trial, (lam, beta) in enumerate([(0.0, 0.0), (0.001, 0.0), (0.1, 0.1)]):
        g = RngStream(200, trial).generator()
        cfg = nw.BackboneConfig(input_shape=(5,), hidden_widths=(6,), feature_dim=4)
        params = nw.init_params(cfg, 3, g, clf_in_dim=3)
        proj = make_projection(4, RngStream(201, trial)).matrix
        x = g.normal(size=(4, 5))
        y = g.integers(0, 3, size=4)
        xq = g.normal(size=(3, 5)) if beta > 0 else None
        spec = nw.LossSpec(bsr_weight=lam, ent_weight=beta, projection=proj, query_inputs=xq)
        analytic, _ = nw.backward(params, cfg, x, y, spec)
        numeric = _finite_difference_grads(params, cfg, x, y, spec)
        for (a, _), n in zip(analytic.arrays(), numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def _check_projections() -> tuple[bool, str]:
    worst = 0.0
    mats = []
    for trial in range(5):
        proj = make_projection(16, RngStream(300, trial))
        again = make_projection(16, RngStream(300, trial))
        if not np.array_equal(proj.matrix, again.matrix):
            return False, "projection not reproducible"
        e = proj.matrix
        worst = max(worst, float(np.abs(e @ e.T - np.eye(15)).max()))
        mats.append(e)
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            if float(np.abs(mats[i] - mats[j]).max()) <= 1e-6:
                return False, f"projections {i} and {j} coincide"
    return worst <= 1e-8, f"max |EE^T - I| {worst:.2e}"


def _check_eigensolver() -> tuple[bool, str]:
    s = random_symmetric(8, RngStream(400, 0))
    w, v = sym_eig(s)
    recon = float(np.abs(v @ np.diag(w) @ v.T - s).max())
    orth = float(np.abs(v.T @ v - np.eye(8)).max())
    return recon <= 1e-8 and orth <= 1e-8, f"recon {recon:.2e}, orth {orth:.2e}"


def _check_solver() -> tuple[bool, str]:
    hand = solve(np.array([[1.0, -0.5], [-0.5, 1.0]]), np.eye(2))
    expected = (4.0 / 3.0) * np.array([[1.0, 0.5], [0.5, 1.0]])
    hand_err = float(np.abs(hand - expected).max())
    g = RngStream(500, 0).generator()
    a = g.normal(size=(10, 10)) + 10.0 * np.eye(10)
    b = g.normal(size=(10, 3))
    x = solve(a, b)
    residual = float(np.abs(a @ x - b).max())
    bound = 1e-8 * (1.0 + float(np.abs(b).max()))
    return hand_err <= 1e-12 and residual <= bound, (
        f"hand {hand_err:.2e}, residual {residual:.2e}"
    )


def _check_propagation() -> tuple[bool, str]:
    hand = propagate(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 0.0]]), 0.5)
    hand_err = float(np.abs(hand - np.array([[4.0 / 3.0, 0.0], [2.0 / 3.0, 0.0]])).max())
    worst = hand_err if hand_err > 1e-12 else 0.0
    for trial in range(5):
        g = RngStream(600, trial).generator()
        feats = g.normal(size=(20, 4))
        graph = knn_graph(feats, LPConfig(k=3))
        lap = normalized_laplacian(graph)
        y0 = g.uniform(size=(20, 5))
        closed = propagate(lap, y0, 0.5)
        series = y0.copy()
        term = y0.copy()
        for _ in range(200):
            term = 0.5 * (lap @ term)
            series = series + term
        worst = max(worst, float(np.abs(closed - series).max()))
        if float(np.abs(propagate(lap, y0, 0.0) - y0).max()) != 0.0:
            return False, "alpha=0 is not exact"
    return worst <= 1e-6, f"max closed-form vs series gap {worst:.2e}"


def _check_protocol() -> tuple[bool, str]:
    mean, ci = evaluate([0.0, 1.0])
    expected_ci = 1.96 * np.sqrt(0.5) / np.sqrt(2.0)
    ok = mean == 0.5 and abs(ci - expected_ci) <= 1e-12
    mean2, ci2 = evaluate([0.8] * 10)
    ok = ok and abs(mean2 - 0.8) <= 1e-15 and ci2 == 0.0
    return ok, f"evaluate([0,1]) = ({mean:.3f}, {ci:.5f})"


def _check_augmentation() -> tuple[bool, str]:
    g = RngStream(700, 0).generator()
    img = g.uniform(size=(3, 9, 11))
    if not np.array_equal(flip_h(flip_h(img)), img):
        return False, "flip involution broken"
    if float(np.abs(rotate(img, 0.0) - img).max()) > 0.0:
        return False, "zero rotation is not the identity"
    resize_gap = float(np.abs(resize_bilinear(img, 9, 11) - img).max())
    if resize_gap > 1e-6:
        return False, f"identity resize gap {resize_gap:.2e}"
    outs = iter([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    avg = tta_predict(lambda _: next(outs), img, ("S", "SH"), g, AugmentParams(out_size=8))
    if float(np.abs(avg - 0.5).max()) > 1e-15:
        return False, f"tta average {avg}"
    return True, "flip/rotate/resize/tta all exact"


def _check_rng() -> tuple[bool, str]:
    a = RngStream(4, 2).generator().uniform(size=8)
    b = RngStream(4, 2).generator().uniform(size=8)
    c = RngStream(4, 3).generator().uniform(size=8)
    return bool(np.array_equal(a, b) and not np.array_equal(a, c)), "streams reproducible"


CHECKS = [
    ("spectral penalty equals SVD route", _check_frobenius_identity),
    ("analytic gradients match finite differences", _check_gradients),
    ("projections orthonormal, reproducible, distinct", _check_projections),
    ("eigendecomposition reconstructs its input", _check_eigensolver),
    ("pivoted solver residuals and hand inverse", _check_solver),
    ("propagation solve matches Neumann series", _check_propagation),
    ("protocol arithmetic", _check_protocol),
    ("augmentation identities", _check_augmentation),
    ("counter-based rng streams", _check_rng),
]


def run_selftest(verbose: bool = True) -> bool:
    all_ok = True
    if verbose:
        print(f"kernel backend: {BACKEND}")
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok = all_ok and ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name} ({detail})")
    return all_ok
