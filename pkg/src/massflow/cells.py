"""Mass-conserving recurrent cells, baselines, ablations, and checkpoints.

The conserving cell keeps a non-negative state vector ``c`` of K cells whose
total behaves like a physical quantity: at each step a column-stochastic
redistribution matrix R moves stored mass between cells, a column-stochastic
input gate ``i`` distributes the new mass input over cells, and a sigmoid
output gate ``o`` decides which fraction of each cell leaves the system::

    m_tot = R @ c_prev + i @ x          (all mass present this step)
    c     = (1 - o) * m_tot             (what stays)
    h     = o * m_tot                   (what leaves; the cell's output)

Because every column of R and of ``i`` sums to one, summing the three lines
gives the bookkeeping identity  sum(c_t) = sum(c_{t-1}) + sum(x_t) - sum(h_t)
exactly (up to float rounding), for any parameters. Gates see the auxiliary
inputs and the L1-normalized state -- never ``h``; the hydrology-style variant
additionally feeds the scalar mass input to every gate.

Variants
--------
* ``mclstm-basic``      R = softmax(B_r), time-independent
* ``mclstm-time-r``     R = softmax(B_r + W_r a + U_r c/|c|), input-dependent
* ``mclstm-hypernet``   R produced by a ReLU MLP from (c_prev, a)
* ``mclstm-hydro``      normalized-logistic input gate, normalized-ReLU R,
                        mass input wired into all gates (scalar mass only)
* ``mcfc`` / ``mcfc-mul``  static one-shot cells (additive / multiplicative)
* ``lstm``              standard LSTM baseline (forget-gate, tanh candidate)
* ``ablation-sigmoid-gate``  input gate sigmoid, columns no longer sum to 1
* ``ablation-linear-r``      redistribution left as raw logits
* ``ablation-keep-mass``     output is read out but not subtracted from c

Parameters live in a ``CellParams`` bundle of named float64 arrays with a
versioned JSON checkpoint format (bit-exact round trip).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from . import engine as eg
from .engine import Tensor, constant
from .errors import ContractError, ShapeError

__all__ = [
    "CellVariant",
    "CellParams",
    "StepTrace",
    "CellTrace",
    "StepOutput",
    "RECURRENT_CONSERVING",
    "init_params",
    "diagonal_boost",
    "orthogonal_init",
    "normalized_state",
    "input_gate",
    "output_gate",
    "redistribution",
    "hypernet_redistribution",
    "apply_mass_update",
    "step",
    "forward_sequence",
    "readout",
    "mcfc_forward",
    "mcfc_mul_forward",
    "lstm_step",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_to_json",
    "checkpoint_from_json",
]

CHECKPOINT_FORMAT = "massflow-checkpoint"
CHECKPOINT_VERSION = 1

# Gate bias inits: output gates start mostly closed, LSTM forget gates open.
OUTPUT_GATE_BIAS = -3.0
LSTM_FORGET_BIAS = 3.0
# Fraction of each redistribution column placed on the diagonal at init.
INIT_DIAGONAL_MASS = 0.95


class CellVariant(str, Enum):
    MCLSTM = "mclstm-basic"
    MCLSTM_TIME_R = "mclstm-time-r"
    MCLSTM_HYPERNET = "mclstm-hypernet"
    MCLSTM_HYDRO = "mclstm-hydro"
    MCFC = "mcfc"
    MCFC_MUL = "mcfc-mul"
    LSTM = "lstm"
    ABLATION_SIGMOID_GATE = "ablation-sigmoid-gate"
    ABLATION_LINEAR_R = "ablation-linear-r"
    ABLATION_KEEP_MASS = "ablation-keep-mass"


# Recurrent variants for which the bookkeeping identity holds by construction.
RECURRENT_CONSERVING = frozenset({
    CellVariant.MCLSTM,
    CellVariant.MCLSTM_TIME_R,
    CellVariant.MCLSTM_HYPERNET,
    CellVariant.MCLSTM_HYDRO,
})

_MC_FAMILY = RECURRENT_CONSERVING | {
    CellVariant.ABLATION_SIGMOID_GATE,
    CellVariant.ABLATION_LINEAR_R,
    CellVariant.ABLATION_KEEP_MASS,
}

_TIME_DEPENDENT_R = frozenset({
    CellVariant.MCLSTM_TIME_R,
    CellVariant.MCLSTM_HYDRO,
    CellVariant.ABLATION_LINEAR_R,
})

READOUT_MODES = ("sum", "trash-sum", "linear")


# === parameter bundle ===

@dataclass
class CellParams:
    """Named parameter arrays plus the dimensions they were built for.

    ``arrays`` maps name -> float64 ndarray. Gate weight matrices that act on
    flattened (cell, column) pairs are stored in their 2-D matmul layout:
    ``wi``/``ui`` have K*M rows (input gate), ``wr``/``ur`` have K*K rows
    (redistribution logits), both row-major over (cell, column).

    ``meta`` holds small JSON-able settings: readout mode, hypernet hidden
    sizes, the closed-system flag.
    """

    variant: CellVariant
    n_cells: int
    n_mass: int
    n_aux: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        """Fresh gradient-enabled leaves sharing this bundle's storage."""
        return {name: Tensor(arr) for name, arr in self.arrays.items()}

    def copy(self) -> "CellParams":
        return CellParams(self.variant, self.n_cells, self.n_mass, self.n_aux,
                          {k: v.copy() for k, v in self.arrays.items()},
                          dict(self.meta))

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())


# === initialization ===

def diagonal_boost(n_cells: int) -> float:
    """Logit ``s`` so that softmax(s*I) puts INIT_DIAGONAL_MASS on the diagonal."""
    if n_cells <= 1:
        return 0.0
    p = INIT_DIAGONAL_MASS
    return math.log(p * (n_cells - 1) / (1.0 - p))


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """(Semi-)orthogonal matrix via QR of a Gaussian, sign-corrected by diag(R).

    Sign correction makes the factorization unique, so the draw is a pure
    function of the generator state.
    """
    n, m = (rows, cols) if rows >= cols else (cols, rows)
    g = rng.standard_normal((n, m))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _needs(variant, *members) -> bool:
    return variant in members


def init_params(variant: CellVariant | str,
                n_cells: int,
                n_mass: int = 1,
                n_aux: int = 1,
                seed: int = 0,
                readout: str | None = None,
                n_out: int = 1,
                hypernet_hidden: tuple[int, int] = (50, 100),
                closed_system: bool = False) -> CellParams:
    """Deterministic parameter init for any variant.

    All randomness flows from ``seed`` through a counter-based Philox stream;
    arrays are drawn in a fixed, documented order (the order they appear in
    the returned bundle), so the result is reproducible across platforms.
    """
    variant = CellVariant(variant)
    K, M, L = int(n_cells), int(n_mass), int(n_aux)
    if K < 1 or M < 1 or L < 1:
        raise ContractError(f"init_params: dims must be positive, got K={K} M={M} L={L}")
    if variant is CellVariant.MCLSTM_HYDRO and M != 1:
        raise ContractError("init_params: the hydro variant is defined for scalar mass (n_mass=1)")
    if readout is not None and readout not in READOUT_MODES:
        raise ContractError(f"init_params: unknown readout {readout!r}")
    if closed_system and variant is not CellVariant.MCLSTM_HYPERNET:
        raise ContractError("init_params: closed_system applies to the hypernet variant only")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    s = diagonal_boost(K)
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}

    if variant in _MC_FAMILY:
        wi = np.empty((K, M, L))
        ui = np.empty((K, M, K))
        for m in range(M):
            wi[:, m, :] = orthogonal_init(rng, K, L)
            ui[:, m, :] = orthogonal_init(rng, K, K)
        arrays["wi"] = wi.reshape(K * M, L)
        arrays["ui"] = ui.reshape(K * M, K)
        arrays["bi"] = np.zeros((K, M))
        arrays["wo"] = orthogonal_init(rng, K, L)
        arrays["uo"] = orthogonal_init(rng, K, K)
        arrays["bo"] = np.full(K, OUTPUT_GATE_BIAS)
        arrays["br"] = s * np.eye(K)
        if variant in _TIME_DEPENDENT_R:
            # Small relative to the diagonal boost so R starts near identity.
            std = 0.01 * math.sqrt(s) if s > 0 else 0.0
            arrays["wr"] = std * rng.standard_normal((K * K, L))
            arrays["ur"] = std * rng.standard_normal((K * K, K))
        if variant is CellVariant.MCLSTM_HYDRO:
            arrays["vi"] = 0.1 * rng.standard_normal(K)
            arrays["vo"] = 0.1 * rng.standard_normal(K)
            arrays["vr"] = 0.1 * rng.standard_normal((K, K))
        if variant is CellVariant.MCLSTM_HYPERNET:
            h1, h2 = int(hypernet_hidden[0]), int(hypernet_hidden[1])
            d_in = K + L
            arrays["hyper_w1"] = orthogonal_init(rng, h1, d_in)
            arrays["hyper_b1"] = np.zeros(h1)
            arrays["hyper_w2"] = orthogonal_init(rng, h2, h1)
            arrays["hyper_b2"] = np.zeros(h2)
            # Output layer: tiny weights + identity-pattern bias, so the
            # produced redistribution starts at softmax(s*I), same as br.
            arrays["hyper_w3"] = 0.01 * rng.standard_normal((K * K, h2))
            arrays["hyper_b3"] = (s * np.eye(K)).reshape(K * K)
            meta["hypernet_hidden"] = [h1, h2]
            meta["closed_system"] = bool(closed_system)
    elif variant in (CellVariant.MCFC, CellVariant.MCFC_MUL):
        arrays["bI"] = np.zeros((K, M))
        arrays["bo"] = np.full(K, OUTPUT_GATE_BIAS)
        if variant is CellVariant.MCFC_MUL:
            arrays["alpha"] = np.zeros(K)
    elif variant is CellVariant.LSTM:
        # Gate row order: input, forget, candidate, output. Forward weights
        # orthogonal per gate, recurrent weights identity, forget bias open.
        w = np.empty((4 * K, M + L))
        for gate in range(4):
            w[gate * K:(gate + 1) * K, :] = orthogonal_init(rng, K, M + L)
        arrays["w"] = w
        arrays["u"] = np.tile(np.eye(K), (4, 1))
        b = np.zeros(4 * K)
        b[K:2 * K] = LSTM_FORGET_BIAS
        arrays["b"] = b
    else:  # pragma: no cover - enum is exhaustive
        raise ContractError(f"init_params: unhandled variant {variant}")

    if readout is not None:
        meta["readout"] = readout
        if readout == "linear":
            arrays["w_out"] = orthogonal_init(rng, n_out, K)
            arrays["b_out"] = np.zeros(n_out)

    for name, arr in arrays.items():
        arrays[name] = np.ascontiguousarray(arr, dtype=np.float64)
    return CellParams(variant, K, M, L, arrays, meta)


# === traces ===

class StepOutput(NamedTuple):
    h: Tensor
    c: Tensor
    trace: "StepTrace | None"


@dataclass
class StepTrace:
    """Value snapshot of one step: enough to audit every mass movement."""
    x: np.ndarray        # (M,) mass input
    a: np.ndarray        # (L,) auxiliary input
    i: np.ndarray        # (K, M) input gate
    o: np.ndarray        # (K,) output gate
    r: np.ndarray        # (K, K) redistribution
    m_tot: np.ndarray    # (K,)
    c: np.ndarray        # (K,) state after the step
    h: np.ndarray        # (K,) outflow


@dataclass
class CellTrace:
    """Per-step records for a whole sequence, plus the initial state."""
    variant: CellVariant
    c0: np.ndarray
    steps: list[StepTrace] = field(default_factory=list)

    def replay(self) -> np.ndarray:
        """Re-execute the recorded gates with plain numpy; returns hs (T, K).

        An independent re-execution path: it never touches the tape, so a
        mismatch against the recorded outputs means the trace and the forward
        disagree about the arithmetic.
        """
        c = self.c0.copy()
        hs = np.zeros((len(self.steps), c.shape[0]))
        for t, st in enumerate(self.steps):
            m_tot = st.r @ c + st.i @ st.x
            if self.variant is CellVariant.ABLATION_KEEP_MASS:
                c = m_tot
            else:
                c = (1.0 - st.o) * m_tot
            hs[t] = st.o * m_tot
        return hs


# === gate computations ===

def normalized_state(c_prev: Tensor) -> Tensor:
    """c / |c|_1 with the uniform fallback for an exactly-zero state."""
    if float(c_prev.data.sum()) == 0.0:
        k = c_prev.data.shape[0]
        return constant(np.full(k, 1.0 / k))
    return c_prev / eg.sum_all(c_prev)


def _gate_matrix_logits(pt, wname: str, uname: str, bname: str,
                        a: Tensor, c_norm: Tensor, out_shape) -> Tensor:
    z = eg.matvec(pt[wname], a) + eg.matvec(pt[uname], c_norm)
    return eg.reshape(z, out_shape) + pt[bname]


def input_gate(pt: dict[str, Tensor], a: Tensor, c_norm: Tensor,
               x: Tensor, variant: CellVariant, K: int, M: int) -> Tensor:
    """Column-stochastic (K, M) gate distributing each mass coordinate over cells."""
    z = _gate_matrix_logits(pt, "wi", "ui", "bi", a, c_norm, (K, M))
    if variant is CellVariant.MCLSTM_HYDRO:
        z = z + eg.reshape(pt["vi"] * x, (K, 1))
        return eg.l1_normalize_columns(eg.sigmoid(z))
    if variant is CellVariant.ABLATION_SIGMOID_GATE:
        return eg.sigmoid(z)
    return eg.softmax_columns(z)


def output_gate(pt: dict[str, Tensor], a: Tensor, c_norm: Tensor,
                x: Tensor, variant: CellVariant) -> Tensor:
    z = eg.matvec(pt["wo"], a) + eg.matvec(pt["uo"], c_norm) + pt["bo"]
    if variant is CellVariant.MCLSTM_HYDRO:
        z = z + pt["vo"] * x
    return eg.sigmoid(z)


def hypernet_redistribution(pt: dict[str, Tensor], v: Tensor, K: int) -> Tensor:
    """ReLU MLP from (state, aux) to K*K logits, column-softmaxed to R."""
    z = eg.relu(eg.matvec(pt["hyper_w1"], v) + pt["hyper_b1"])
    z = eg.relu(eg.matvec(pt["hyper_w2"], z) + pt["hyper_b2"])
    logits = eg.matvec(pt["hyper_w3"], z) + pt["hyper_b3"]
    return eg.softmax_columns(eg.reshape(logits, (K, K)))


def redistribution(pt: dict[str, Tensor], a: Tensor, c_norm: Tensor,
                   x: Tensor, c_prev: Tensor, variant: CellVariant, K: int) -> Tensor:
    """The (K, K) mass-routing matrix; column-stochastic for conserving variants."""
    if variant is CellVariant.MCLSTM_HYPERNET:
        return hypernet_redistribution(pt, eg.concat([c_prev, a]), K)
    if variant in _TIME_DEPENDENT_R:
        z = _gate_matrix_logits(pt, "wr", "ur", "br", a, c_norm, (K, K))
        if variant is CellVariant.MCLSTM_HYDRO:
            z = z + pt["vr"] * x
            return eg.l1_normalize_columns(eg.relu(z))
        if variant is CellVariant.ABLATION_LINEAR_R:
            return z
        return eg.softmax_columns(z)
    return eg.softmax_columns(pt["br"])


def apply_mass_update(r: Tensor, i: Tensor, o: Tensor, c_prev: Tensor,
                      x: Tensor, keep_mass: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """The mass bookkeeping shared by every variant: returns (h, c, m_tot)."""
    m_tot = eg.matvec(r, c_prev) + eg.matvec(i, x)
    h = o * m_tot
    c = m_tot if keep_mass else m_tot - h
    return h, c, m_tot


# === stepping ===

def _check_step_inputs(params: CellParams, c_prev: Tensor, x: Tensor, a: Tensor):
    K, M, L = params.n_cells, params.n_mass, params.n_aux
    if c_prev.data.shape != (K,):
        raise ShapeError(f"step: state shape {c_prev.data.shape}, expected ({K},)")
    if x.data.shape != (M,):
        raise ShapeError(f"step: mass input shape {x.data.shape}, expected ({M},)")
    if a.data.shape != (L,):
        raise ShapeError(f"step: aux input shape {a.data.shape}, expected ({L},)")
    if np.any(x.data < 0):
        raise ContractError("step: mass inputs must be non-negative")
    if np.any(c_prev.data < 0):
        raise ContractError("step: cell states must be non-negative")


def step(params: CellParams, pt: dict[str, Tensor], c_prev: Tensor,
         x: Tensor, a: Tensor, collect_trace: bool = False) -> StepOutput:
    """One recurrent step for the conserving family and its ablations.

    ``pt`` is a tensor view of ``params.arrays`` (one per tape; make it with
    ``params.tensors()``). The LSTM baseline steps via :func:`lstm_step`.
    """
    variant = params.variant
    if variant not in _MC_FAMILY:
        raise ContractError(f"step: {variant.value} does not step this way")
    _check_step_inputs(params, c_prev, x, a)
    K, M = params.n_cells, params.n_mass

    if params.meta.get("closed_system"):
        if np.any(x.data != 0):
            raise ContractError("step: closed-system cell cannot accept mass input")
        r = redistribution(pt, a, c_prev, x, c_prev, variant, K)
        c = eg.matvec(r, c_prev)
        h = constant(np.zeros(K))
        trace = None
        if collect_trace:
            trace = StepTrace(x=x.data.copy(), a=a.data.copy(),
                              i=np.zeros((K, M)), o=np.zeros(K), r=r.data.copy(),
                              m_tot=c.data.copy(), c=c.data.copy(), h=h.data.copy())
        return StepOutput(h, c, trace)

    c_norm = normalized_state(c_prev)
    r = redistribution(pt, a, c_norm, x, c_prev, variant, K)
    i = input_gate(pt, a, c_norm, x, variant, K, M)
    o = output_gate(pt, a, c_norm, x, variant)
    h, c, m_tot = apply_mass_update(r, i, o, c_prev, x,
                                    keep_mass=variant is CellVariant.ABLATION_KEEP_MASS)
    trace = None
    if collect_trace:
        trace = StepTrace(x=x.data.copy(), a=a.data.copy(), i=i.data.copy(),
                          o=o.data.copy(), r=r.data.copy(), m_tot=m_tot.data.copy(),
                          c=c.data.copy(), h=h.data.copy())
    return StepOutput(h, c, trace)


def lstm_step(params: CellParams, pt: dict[str, Tensor], h_prev: Tensor,
              c_prev: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Standard LSTM step on the concatenated input v = (mass, aux)."""
    K = params.n_cells
    if v.data.shape != (params.n_mass + params.n_aux,):
        raise ShapeError(
            f"lstm_step: input shape {v.data.shape}, expected ({params.n_mass + params.n_aux},)")
    z = eg.matvec(pt["w"], v) + eg.matvec(pt["u"], h_prev) + pt["b"]
    i = eg.sigmoid(eg.narrow(z, 0, 0, K))
    f = eg.sigmoid(eg.narrow(z, 0, K, K))
    g = eg.tanh(eg.narrow(z, 0, 2 * K, K))
    o = eg.sigmoid(eg.narrow(z, 0, 3 * K, K))
    c = f * c_prev + i * g
    h = o * eg.tanh(c)
    return h, c


def forward_sequence(params: CellParams, c0, xs, aux,
                     collect_trace: bool = False,
                     pt: dict[str, Tensor] | None = None
                     ) -> tuple[list[Tensor], CellTrace | None]:
    """Run a whole sequence; returns per-step outputs and an optional trace.

    ``xs`` is (T, M) and ``aux`` is (T, L); both are treated as constants.
    For the LSTM baseline the hidden state starts at zero, ``c0`` seeds the
    LSTM cell state, and no trace is produced (there is no mass to audit).
    """
    xs = np.asarray(xs, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if xs.ndim != 2 or aux.ndim != 2 or xs.shape[0] != aux.shape[0]:
        raise ShapeError(
            f"forward_sequence: inputs (T,M) and (T,L) required, got {xs.shape} and {aux.shape}")
    if pt is None:
        pt = params.tensors()
    c = c0 if isinstance(c0, Tensor) else constant(np.asarray(c0, dtype=np.float64))
    hs: list[Tensor] = []

    if params.variant is CellVariant.LSTM:
        h = constant(np.zeros(params.n_cells))
        for t in range(xs.shape[0]):
            v = constant(np.concatenate([xs[t], aux[t]]))
            h, c = lstm_step(params, pt, h, c, v)
            hs.append(h)
        return hs, None

    trace = CellTrace(params.variant, np.asarray(c.data, dtype=np.float64).copy()) \
        if collect_trace else None
    for t in range(xs.shape[0]):
        out = step(params, pt, c, constant(xs[t]), constant(aux[t]),
                   collect_trace=collect_trace)
        c = out.c
        hs.append(out.h)
        if collect_trace:
            trace.steps.append(out.trace)
    return hs, trace


# === readouts ===

def readout(params: CellParams, pt: dict[str, Tensor], h: Tensor,
            mode: str | None = None) -> Tensor:
    """Map a cell output vector to a prediction.

    ``sum`` adds every cell's outflow; ``trash-sum`` drops cell 0 (a learned
    dump for mass the prediction should ignore); ``linear`` applies the
    trained affine readout and returns an (n_out,) vector.
    """
    mode = mode or params.meta.get("readout")
    if mode == "sum":
        return eg.sum_all(h)
    if mode == "trash-sum":
        k = params.n_cells
        if k < 2:
            raise ContractError("readout: trash-sum needs at least 2 cells")
        return eg.sum_all(eg.narrow(h, 0, 1, k - 1))
    if mode == "linear":
        if "w_out" not in pt:
            raise ContractError("readout: linear mode needs readout parameters "
                                "(init with readout='linear')")
        return eg.matvec(pt["w_out"], h) + pt["b_out"]
    raise ContractError(f"readout: unknown mode {mode!r}")


# === static cells ===

def mcfc_forward(params: CellParams, pt: dict[str, Tensor], x: Tensor) -> Tensor:
    """One-shot conserving cell: y = sigmoid(b_o) * (softmax_cols(B_I) @ x).

    Every input coordinate is distributed over cells by a column-stochastic
    gate, then scaled down by the output gate, so sum(y) <= sum(x) for
    non-negative x.
    """
    if params.variant not in (CellVariant.MCFC, CellVariant.MCFC_MUL):
        raise ContractError(f"mcfc_forward: wrong variant {params.variant.value}")
    if x.data.shape != (params.n_mass,):
        raise ShapeError(f"mcfc_forward: input shape {x.data.shape}, "
                         f"expected ({params.n_mass},)")
    gate = eg.softmax_columns(pt["bI"])
    return eg.sigmoid(pt["bo"]) * eg.matvec(gate, x)


def mcfc_mul_forward(params: CellParams, pt: dict[str, Tensor], x: Tensor) -> Tensor:
    """Multiplicative static cell: exp of the additive cell run in log space.

    Requires strictly positive inputs (log domain). With open gates and a
    one-hot pair of input columns this computes exact products; uniform
    columns give geometric means.
    """
    if params.variant is not CellVariant.MCFC_MUL:
        raise ContractError(f"mcfc_mul_forward: wrong variant {params.variant.value}")
    core = mcfc_forward(params, pt, eg.log(x))
    return eg.exp(core + pt["alpha"])


# === checkpoints ===

def checkpoint_to_json(params: CellParams) -> str:
    """Serialize to versioned JSON. Floats use shortest-repr decimal strings,
    which round-trip float64 bit-exactly for finite values."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": params.variant.value,
        "n_cells": params.n_cells,
        "n_mass": params.n_mass,
        "n_aux": params.n_aux,
        "meta": params.meta,
        "arrays": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in sorted(params.arrays.items())
        },
    }
    if not all(np.isfinite(a).all() for a in params.arrays.values()):
        raise ContractError("checkpoint: parameters contain NaN/Inf")
    return json.dumps(doc)


def checkpoint_from_json(text: str) -> CellParams:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"checkpoint: unrecognized format {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"checkpoint: unsupported version {doc.get('version')!r}")
    arrays = {}
    for name, spec in doc["arrays"].items():
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        arrays[name] = np.ascontiguousarray(arr)
    return CellParams(CellVariant(doc["variant"]), int(doc["n_cells"]),
                      int(doc["n_mass"]), int(doc["n_aux"]), arrays,
                      dict(doc.get("meta", {})))


def save_checkpoint(params: CellParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_to_json(params))


def load_checkpoint(path) -> CellParams:
    with open(path, "r", encoding="utf-8") as fh:
        return checkpoint_from_json(fh.read())
