"""Property checks and independent oracles for the conserving cells.

Everything here works from recorded traces or plain matrices; nothing reaches
back into model internals. The checks:

* ``check_conservation``   the bookkeeping identity on a trace
* ``check_boundedness``    non-negative states under the cumulative-input cap
* ``check_stochasticity``  recorded gates are column-stochastic, o in [0, 1]
* ``markov_convergence``   state iteration c <- R c against a power-iteration
                           stationary oracle
* ``spectral_norm``        largest singular value via power iteration on R^T R
* ``gradient_flow_probe``  operator norm of a composed redistribution chain
* ``gradcheck_model``      tape gradients against central finite differences
* ``runtime_bench``        wall-time table across variants, plus the scaling
                           fit of cost against the cell count

Reports are small dataclasses that serialize to JSON-able dicts with the
tolerance used, the worst witness found, and a pass flag.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cells as cl
from . import engine as eg
from .engine import constant
from .errors import ContractError, ConvergenceError
from .tasks import _rng

__all__ = [
    "ConservationReport",
    "BoundednessReport",
    "StochasticityReport",
    "MarkovReport",
    "GradcheckReport",
    "check_conservation",
    "check_boundedness",
    "check_stochasticity",
    "markov_convergence",
    "spectral_norm",
    "chain_spectral_norm",
    "gradient_flow_probe",
    "gradcheck_model",
    "runtime_bench",
    "superlinear_scaling",
]

CONSERVATION_TOL = 1e-10
STATIONARY_TOL = 1e-12
STATIONARY_CAP = 10 ** 6


# === trace checks ===

@dataclass
class ConservationReport:
    """Residuals of the mass bookkeeping identity along one trace."""

    residuals: list[float]
    max_residual: float
    worst_step: int
    tol: float
    scale: float          # 1 + total input mass; the tolerance multiplier
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def check_conservation(trace: cl.CellTrace, tol: float = CONSERVATION_TOL
                       ) -> ConservationReport:
    """Stored mass must equal initial mass plus inflow minus outflow, stepwise.

    residual(t) = |sum c(t) - sum c(0) - sum_{u<=t} x(u) + sum_{u<=t} h(u)|,
    computed from the trace alone. Passes iff the max residual is at most
    ``tol * (1 + total input mass)``; the relative form keeps the check
    meaningful as accumulated mass grows.
    """
    if not trace.steps:
        raise ContractError("check_conservation: empty trace")
    m0 = float(trace.c0.sum())
    x_cum = 0.0
    h_cum = 0.0
    residuals = []
    for st in trace.steps:
        x_cum += float(st.x.sum())
        h_cum += float(st.h.sum())
        residuals.append(abs(float(st.c.sum()) - m0 - x_cum + h_cum))
    worst = int(np.argmax(residuals))
    total_in = sum(float(st.x.sum()) for st in trace.steps)
    scale = 1.0 + total_in
    return ConservationReport(
        residuals=residuals, max_residual=residuals[worst], worst_step=worst,
        tol=tol, scale=scale, passed=residuals[worst] <= tol * scale)


@dataclass
class BoundednessReport:
    """Non-negativity and the cumulative-input cap on every cell state."""

    passed: bool
    min_state: float      # most negative state seen (>= 0 when healthy)
    worst_margin: float   # min over (k, t) of bound(t) - c_k(t)
    worst_step: int
    tol: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_boundedness(trace: cl.CellTrace, tol: float = CONSERVATION_TOL
                      ) -> BoundednessReport:
    """Asserts 0 <= c_k(t) <= sum c(0) + cumulative input + tol * scale."""
    if not trace.steps:
        raise ContractError("check_boundedness: empty trace")
    if any(np.any(st.x < 0) for st in trace.steps):
        raise ContractError("check_boundedness: trace has negative mass inputs")
    m0 = float(trace.c0.sum())
    total_in = sum(float(st.x.sum()) for st in trace.steps)
    slack = tol * (1.0 + m0 + total_in)
    x_cum = 0.0
    min_state = float(trace.c0.min()) if trace.c0.size else 0.0
    worst_margin = math.inf
    worst_step = 0
    for t, st in enumerate(trace.steps):
        x_cum += float(st.x.sum())
        bound = m0 + x_cum
        margin = bound - float(st.c.max())
        min_state = min(min_state, float(st.c.min()))
        if margin < worst_margin:
            worst_margin = margin
            worst_step = t
    passed = (min_state >= 0.0) and (worst_margin >= -slack)
    return BoundednessReport(passed=passed, min_state=min_state,
                             worst_margin=worst_margin, worst_step=worst_step,
                             tol=tol)


@dataclass
class StochasticityReport:
    """Column sums of recorded gates and the output-gate range."""

    passed: bool
    max_column_error: float   # worst |column sum - 1| over i and R columns
    gate_min: float           # min output-gate entry seen
    gate_max: float           # max output-gate entry seen
    tol: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_stochasticity(trace: cl.CellTrace, tol: float = 1e-12) -> StochasticityReport:
    """Recorded input gates and redistributions must have unit column sums.

    Steps recorded with an exactly-zero input gate and zero mass input (the
    closed-system marker) skip the input-gate check: no mass is being routed.
    """
    worst = 0.0
    gmin, gmax = math.inf, -math.inf
    for st in trace.steps:
        closed = not np.any(st.i) and not np.any(st.x)
        if not closed:
            worst = max(worst, float(np.abs(st.i.sum(axis=0) - 1.0).max()))
            if np.any(st.i < 0):
                worst = max(worst, float(-st.i.min()) + 1.0)
            gmin = min(gmin, float(st.o.min()))
            gmax = max(gmax, float(st.o.max()))
        worst = max(worst, float(np.abs(st.r.sum(axis=0) - 1.0).max()))
        if np.any(st.r < 0):
            worst = max(worst, float(-st.r.min()) + 1.0)
    if not math.isfinite(gmin):
        gmin, gmax = 0.0, 0.0
    passed = worst <= tol and 0.0 <= gmin and gmax <= 1.0
    return StochasticityReport(passed=passed, max_column_error=worst,
                               gate_min=gmin, gate_max=gmax, tol=tol)


# === Markov chain behavior ===

@dataclass
class MarkovReport:
    """Distance of the gate-free state iteration to its stationary point."""

    distances: list[float]    # ||c(t) - c*||_1 for t = 0..steps
    stationary: list[float]
    converged_at: int | None  # first t with distance <= tol, None if never
    tol: float
    reducible: bool           # True -> convergence not asserted
    oracle_converged: bool
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _validate_stochastic_matrix(r: np.ndarray, what: str) -> None:
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ContractError(f"{what}: expected a square matrix, got shape {r.shape}")
    if np.any(r < 0):
        raise ContractError(f"{what}: negative entries")
    err = np.abs(r.sum(axis=0) - 1.0).max()
    if err > 1e-9:
        raise ContractError(f"{what}: columns must sum to 1 (worst error {err:.3g})")


def _strongly_connected(adj: np.ndarray) -> bool:
    """Reachability both ways from node 0 on the positive-entry graph."""
    n = adj.shape[0]

    def reach(mat: np.ndarray) -> bool:
        seen = np.zeros(n, dtype=bool)
        frontier = [0]
        seen[0] = True
        while frontier:
            i = frontier.pop()
            for j in np.nonzero(mat[:, i])[0]:
                if not seen[j]:
                    seen[j] = True
                    frontier.append(int(j))
        return bool(seen.all())

    return reach(adj) and reach(adj.T)


def markov_convergence(r: np.ndarray, c0: np.ndarray, steps: int = 1000,
                       tol: float = 1e-8) -> MarkovReport:
    """Iterate c <- R c and measure L1 distance to the stationary point.

    With all gates closed and no input the cell state evolves as a Markov
    chain on the redistribution matrix. The stationary oracle is power
    iteration from ``c0`` with L1 renormalization (tolerance 1e-12, cap 1e6
    iterations). A reducible R (positive-entry graph not strongly connected)
    downgrades the report to a warning instead of asserting convergence.
    """
    r = np.asarray(r, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    _validate_stochastic_matrix(r, "markov_convergence")
    if c0.shape != (r.shape[0],) or np.any(c0 < 0) or abs(c0.sum() - 1.0) > 1e-9:
        raise ContractError("markov_convergence: c0 must be a probability vector")

    warnings = []
    reducible = not _strongly_connected(r > 0)
    if reducible:
        warnings.append("reducible redistribution matrix: stationary point may "
                        "depend on the start; convergence not asserted")

    pi = c0.copy()
    oracle_converged = False
    for _ in range(STATIONARY_CAP):
        nxt = r @ pi
        s = nxt.sum()
        if s > 0:
            nxt = nxt / s
        if np.abs(nxt - pi).sum() <= STATIONARY_TOL:
            pi = nxt
            oracle_converged = True
            break
        pi = nxt
    if not oracle_converged:
        warnings.append("stationary oracle hit the iteration cap")

    distances = []
    c = c0.copy()
    converged_at = None
    for t in range(steps + 1):
        d = float(np.abs(c - pi).sum())
        distances.append(d)
        if converged_at is None and d <= tol:
            converged_at = t
        if t < steps:
            c = r @ c
    return MarkovReport(distances=distances, stationary=pi.tolist(),
                        converged_at=converged_at, tol=tol, reducible=reducible,
                        oracle_converged=oracle_converged, warnings=warnings)


# === spectral measurements ===

def _power_iteration(apply_gram, n: int, tol: float, max_iter: int,
                     seed: int, what: str) -> float:
    """Largest singular value given v -> (A^T A) v; relative tolerance on the
    eigenvalue estimate."""
    rng = _rng(seed)
    v = rng.uniform(-1.0, 1.0, n)
    v /= np.linalg.norm(v)
    prev = math.inf
    for it in range(1, max_iter + 1):
        w, lam = apply_gram(v)
        if lam == 0.0:
            return 0.0
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(lam - prev) <= tol * max(lam, 1e-300):
            return math.sqrt(lam)
        prev = lam
    raise ConvergenceError(
        f"{what}: power iteration did not converge in {max_iter} iterations")


def spectral_norm(r: np.ndarray, tol: float = 1e-10, max_iter: int = 100000,
                  seed: int = 0) -> float:
    """Largest singular value of a square matrix via power iteration on R^T R."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ContractError(f"spectral_norm: expected a square matrix, got {r.shape}")

    def gram(v):
        rv = r @ v
        return r.T @ rv, float(rv @ rv)

    return _power_iteration(gram, r.shape[0], tol, max_iter, seed, "spectral_norm")


def chain_spectral_norm(mats: list[np.ndarray], tol: float = 1e-10,
                        max_iter: int = 100000, seed: int = 0) -> float:
    """Largest singular value of the product mats[-1] @ ... @ mats[0]."""
    if not mats:
        raise ContractError("chain_spectral_norm: empty chain")
    n = mats[0].shape[1]

    def gram(v):
        w = v
        for m in mats:
            w = m @ w
        lam = float(w @ w)
        for m in reversed(mats):
            w = m.T @ w
        return w, lam

    return _power_iteration(gram, n, tol, max_iter, seed, "chain_spectral_norm")


def gradient_flow_probe(params: cl.CellParams, n_steps: int, seed: int = 0,
                        forced_output_bias: float = -30.0) -> dict:
    """Operator norm of the composed redistribution chain over ``n_steps``.

    The state-to-state Jacobian of a conserving cell is dominated by the
    redistribution matrices once the output gates are (near) closed, so the
    probe forces the output bias very negative, feeds zero mass, runs the cell
    on random auxiliary inputs, and measures the largest singular value of
    R(T) @ ... @ R(1) from the recorded trace. Column-stochastic routing keeps
    this bounded by sqrt(K) for any depth; unnormalized routing does not.
    """
    probe = params.copy()
    if "bo" in probe.arrays:
        probe.arrays["bo"][:] = forced_output_bias
    rng = _rng(seed)
    c0 = rng.uniform(0.5, 1.5, probe.n_cells)
    xs = np.zeros((n_steps, probe.n_mass))
    aux = rng.standard_normal((n_steps, probe.n_aux))
    with eg.no_grad():
        _, trace = cl.forward_sequence(probe, c0, xs, aux, collect_trace=True)
    mats = [st.r for st in trace.steps]
    per_step = [spectral_norm(m, seed=seed) for m in mats]
    return {
        "variant": probe.variant.value,
        "n_steps": int(n_steps),
        "n_cells": int(probe.n_cells),
        "chain_norm": chain_spectral_norm(mats, seed=seed),
        "per_step_max": max(per_step),
        "per_step_min": min(per_step),
    }


# === gradient checking ===

@dataclass
class GradcheckReport:
    """Tape-vs-finite-difference agreement, per parameter array."""

    passed: bool
    max_relative_error: float   # over coordinates with gradient above the floor
    max_absolute_error: float   # over coordinates below the floor
    per_array: dict
    eps: float
    rel_tol: float
    abs_tol: float
    floor: float

    def to_dict(self) -> dict:
        return asdict(self)


def _scalar_probe_loss(params: cl.CellParams, pt, mass_seq: np.ndarray,
                       aux_seq: np.ndarray):
    """A scalar touching every parameter: weighted outflow plus final state.

    The weights vary across cells and steps. Uniform weights would make the
    loss equal the total mass for conserving variants, which is constant in
    the parameters by construction, and the check would pass with identically
    zero gradients on both sides.
    """
    variant = params.variant
    K = params.n_cells
    cell_w = constant(np.linspace(0.5, 1.5, K))
    state_w = constant(np.linspace(2.0, 1.0, K))
    if variant in (cl.CellVariant.MCFC, cl.CellVariant.MCFC_MUL):
        forward = (cl.mcfc_mul_forward if variant is cl.CellVariant.MCFC_MUL
                   else cl.mcfc_forward)
        y = forward(params, pt, constant(mass_seq[0]))
        return eg.sum_all(y * cell_w)
    T = mass_seq.shape[0]
    c0 = (np.arange(K, dtype=np.float64) + 1.0) / K
    total = None
    if variant is cl.CellVariant.LSTM:
        h = constant(np.zeros(K))
        c = constant(c0)
        for t in range(T):
            v = constant(np.concatenate([mass_seq[t], aux_seq[t]]))
            h, c = cl.lstm_step(params, pt, h, c, v)
            term = eg.scale(eg.sum_all(h * cell_w), 1.0 + t / (T + 1.0))
            total = term if total is None else total + term
    else:
        c = constant(c0)
        for t in range(T):
            out = cl.step(params, pt, c, constant(mass_seq[t]), constant(aux_seq[t]))
            c = out.c
            term = eg.scale(eg.sum_all(out.h * cell_w), 1.0 + t / (T + 1.0))
            total = term if total is None else total + term
    return total + eg.sum_all(c * state_w)


def gradcheck_model(params: cl.CellParams, mass_seq, aux_seq, eps: float = 1e-6,
                    rel_tol: float = 1e-5, abs_tol: float = 1e-8,
                    floor: float = 1e-3) -> GradcheckReport:
    """Compare tape gradients of a probe loss against central differences.

    Coordinates where either gradient reaches ``floor`` must agree to
    ``rel_tol`` relatively; smaller ones to ``abs_tol`` absolutely (a relative
    test on a finite-difference value near zero only measures noise).
    """
    mass_seq = np.asarray(mass_seq, dtype=np.float64)
    aux_seq = np.asarray(aux_seq, dtype=np.float64)
    pt = params.tensors()
    loss = _scalar_probe_loss(params, pt, mass_seq, aux_seq)
    gmap = eg.backward(loss, wrt=[pt[n] for n in pt])
    tape = {n: gmap[pt[n]] for n in pt}

    def loss_value() -> float:
        with eg.no_grad():
            return float(_scalar_probe_loss(params, params.tensors(),
                                            mass_seq, aux_seq).data)

    per_array = {}
    worst_rel = 0.0
    worst_abs = 0.0
    for name, arr in params.arrays.items():
        orig = arr.copy()

        def f(x, arr=arr, shape=arr.shape):
            arr[...] = x.reshape(shape)
            return loss_value()

        fd = eg.finite_difference_gradient(f, orig.reshape(-1).copy(), eps=eps)
        arr[...] = orig
        fd = fd.reshape(arr.shape)
        g = tape[name]
        denom = np.maximum(np.abs(g), np.abs(fd))
        diff = np.abs(g - fd)
        big = denom >= floor
        rel = float((diff[big] / denom[big]).max()) if big.any() else 0.0
        small = float(diff[~big].max()) if (~big).any() else 0.0
        per_array[name] = {"max_rel": rel, "max_abs_small": small,
                           "ok": rel <= rel_tol and small <= abs_tol}
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, small)
    return GradcheckReport(
        passed=worst_rel <= rel_tol and worst_abs <= abs_tol,
        max_relative_error=worst_rel, max_absolute_error=worst_abs,
        per_array=per_array, eps=eps, rel_tol=rel_tol, abs_tol=abs_tol,
        floor=floor)


# === runtime measurement ===

def _timed_pass(params: cl.CellParams, mass: np.ndarray, aux: np.ndarray) -> float:
    c0 = np.zeros(params.n_cells)
    start = time.perf_counter()
    with eg.no_grad():
        pt = params.tensors()
        for row in range(mass.shape[0]):
            cl.forward_sequence(params, c0, mass[row], aux[row], pt=pt)
    return time.perf_counter() - start


BENCH_VARIANTS = ("mclstm-basic", "mclstm-time-r", "lstm")


def runtime_bench(variants=BENCH_VARIANTS, n_cells: int = 64, n_mass: int = 1,
                  n_aux: int = 30, seq_len: int = 365, batch: int = 256,
                  repeats: int = 5, seed: int = 0) -> dict:
    """Median wall time of ``repeats`` full forward passes per variant.

    One batch of random inputs is shared across variants; a smaller warmup
    pass runs first so allocator and library setup are excluded. The ratios
    compare the input-dependent-routing cell against the LSTM baseline and
    against its fixed-routing sibling at identical dimensions.
    """
    if repeats < 1:
        raise ContractError("runtime_bench: repeats must be >= 1")
    rng = _rng(seed)
    mass = rng.uniform(0.0, 1.0, (batch, seq_len, n_mass))
    aux = rng.standard_normal((batch, seq_len, n_aux))
    rows = []
    medians = {}
    for name in variants:
        params = cl.init_params(name, n_cells, n_mass=n_mass, n_aux=n_aux, seed=seed)
        _timed_pass(params, mass[: max(1, batch // 32)], aux[: max(1, batch // 32)])
        times = [_timed_pass(params, mass, aux) for _ in range(repeats)]
        med = float(np.median(times))
        medians[name] = med
        rows.append({"variant": name, "n_cells": n_cells, "n_mass": n_mass,
                     "n_aux": n_aux, "seq_len": seq_len, "batch": batch,
                     "median_seconds": med,
                     "seconds": [float(t) for t in times]})
    ratios = {}
    if "mclstm-time-r" in medians and "lstm" in medians:
        ratios["time-dependent-vs-lstm"] = medians["mclstm-time-r"] / medians["lstm"]
    if "mclstm-basic" in medians and "lstm" in medians:
        ratios["fixed-routing-vs-lstm"] = medians["mclstm-basic"] / medians["lstm"]
    if "mclstm-basic" in medians and "mclstm-time-r" in medians:
        ratios["fixed-vs-time-dependent"] = (
            medians["mclstm-basic"] / medians["mclstm-time-r"])
    return {"rows": rows, "ratios": ratios, "repeats": repeats, "seed": seed}


def _fit_power_law(ks: np.ndarray, ts: np.ndarray) -> tuple[float, float, float]:
    """Least-squares fit of t = c + a * K^p over a grid of exponents.

    The intercept absorbs per-step interpreter overhead so the exponent
    reflects how the arithmetic itself scales with the cell count.
    """
    ks = ks.astype(np.float64)
    best = None
    for p in np.arange(1.0, 4.001, 0.01):
        design = np.stack([np.ones_like(ks), ks ** p], axis=1)
        coef, *_ = np.linalg.lstsq(design, ts, rcond=None)
        resid = float(((design @ coef - ts) ** 2).sum())
        if best is None or resid < best[0]:
            best = (resid, float(p), float(coef[0]), float(coef[1]))
    _, p, c, a = best
    return p, c, a


def superlinear_scaling(variant: str = "mclstm-time-r",
                        cell_counts=(16, 32, 64, 128), n_mass: int = 1,
                        n_aux: int = 8, seq_len: int = 16, batch: int = 8,
                        repeats: int = 5, seed: int = 0) -> dict:
    """How forward cost grows with the cell count for one variant.

    Fits median pass time to ``c + a * K^p``; for input-dependent routing the
    K x K-by-K logit map makes the true arithmetic cubic in K, so the fitted
    exponent should sit well above 2 once K dominates the interpreter
    overhead (which the intercept absorbs).
    """
    rng = _rng(seed)
    mass = rng.uniform(0.0, 1.0, (batch, seq_len, n_mass))
    aux = rng.standard_normal((batch, seq_len, n_aux))
    medians = []
    for K in cell_counts:
        params = cl.init_params(variant, K, n_mass=n_mass, n_aux=n_aux, seed=seed)
        _timed_pass(params, mass[:1], aux[:1])
        times = [_timed_pass(params, mass, aux) for _ in range(repeats)]
        medians.append(float(np.median(times)))
    p, c, a = _fit_power_law(np.asarray(cell_counts), np.asarray(medians))
    return {"variant": variant, "cell_counts": list(cell_counts),
            "median_seconds": medians, "exponent": p,
            "intercept_seconds": c, "coefficient": a}
