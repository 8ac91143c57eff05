"""Training harness: Adam, losses, curriculum, and the two trainers.

``train_sequence_to_one`` fits one model to one (train, valid) pair of
sequence-to-one datasets. ``run_experiment`` wraps it with the standard
protocol: when no learning rate is pinned, the grid is run at the first seed,
the rate with the best final validation MSE among non-diverged runs wins, and
the remaining seeds train at that rate. ``train_autoregressive_pendulum``
fits the closed-system hypernet cell to one energy series with a growing
curriculum window.

Batching: mini-batches for the two variants trained at scale (basic conserving
cell, LSTM baseline, scalar mass) run through a tape-batched fast path whose
tensors carry the batch in their leading axis. Every other variant loops
per sample through ``cells.forward_sequence``. Both paths compute the same
math (equivalence-tested) and every verification/trace feature uses the
per-sample path.

All randomness is derived from the run seed via SeedSequence/Philox. Two runs
with the same config and seed produce bit-identical parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable

import numpy as np

from . import cells as cl
from . import engine as eg
from . import tasks as tk
from .engine import Tensor, constant
from .errors import ContractError, DivergenceError

__all__ = [
    "ExperimentConfig",
    "AdamState",
    "adam_init",
    "adam_step",
    "mse_loss",
    "pearson_r",
    "pendulum_loss",
    "CurriculumState",
    "curriculum_advance",
    "batch_gradients",
    "predict",
    "evaluate",
    "train_sequence_to_one",
    "run_experiment",
    "train_autoregressive_pendulum",
    "config_hash",
    "write_metrics_csv",
]

log = logging.getLogger(__name__)

LR_GRID_DEFAULT = (0.1, 0.05, 0.01, 0.005, 0.001)
GRID_EPOCHS = 20
PENDULUM_LR_DEFAULT = 0.01
# Mass carried by (1 + total input) scales the conservation tolerance.
CONSERVATION_RTOL = 1e-10

_FAST_PATH_VARIANTS = (cl.CellVariant.MCLSTM, cl.CellVariant.LSTM)
_STATIC_VARIANTS = (cl.CellVariant.MCFC, cl.CellVariant.MCFC_MUL)


# === experiment configuration ===

@dataclass
class ExperimentConfig:
    """One experiment: task, model, optimization, and bookkeeping knobs.

    Round-trips through JSON (``to_json``/``from_json``); unknown keys are
    rejected by name so a typo cannot silently fall back to a default.
    """

    task: str = "addition"           # addition | recurrent-arithmetic | static-arithmetic | pendulum
    variant: str = "mclstm-basic"
    n_cells: int = 10
    seeds: list[int] = field(default_factory=lambda: [0])
    data_seed: int = 0
    epochs: int = 100
    batch_size: int = 64
    lr: float | None = None          # None -> select from lr_grid on validation
    lr_grid: list[float] = field(default_factory=lambda: list(LR_GRID_DEFAULT))
    lr_milestones: list = field(default_factory=list)  # [[epoch, lr], ...]
    l2: float = 0.0                  # L2 penalty on the linear readout weights
    clip_norm: float = 0.0           # global gradient-norm clip; 0 = off
    readout: str = "linear"          # sum | trash-sum | linear
    arithmetic_op: str = "add"
    # addition geometry (the defaults are the reference configuration)
    seq_len: int = 100
    value_hi: float = 0.5
    n_marked: int = 2
    n_train_valid: int = 20000
    n_test: int = 1000
    # pendulum geometry and curriculum
    theta0: float = 0.2
    length: float = 1.0
    gamma: float = 0.0
    noise_sigma: float = 0.0
    n_steps: int = 200
    dt: float = 0.075
    curriculum_start: int = 11
    curriculum_step: int = 5
    curriculum_threshold: float = -0.9
    max_updates: int = 20000
    affine_correction: bool = False
    # bookkeeping
    out_dir: str = "runs"
    verify_every_batch: bool = False
    conservation_sample_every: int = 100

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ContractError(f"config: unknown keys {unknown}")
        doc = dict(doc)
        if isinstance(doc.get("seeds"), int):
            # same convention as the --seeds flag: a bare count means 0..N-1
            doc["seeds"] = list(range(doc["seeds"]))
        return cls(**doc)


def config_hash(config: ExperimentConfig) -> str:
    canon = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


# === optimizer ===

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(arrays: dict[str, np.ndarray], lr: float) -> AdamState:
    state = AdamState(lr=float(lr))
    for name, arr in arrays.items():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(state: AdamState, arrays: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """One in-place Adam update. Raises DivergenceError on non-finite grads."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"adam_step: non-finite gradient for {name!r}")
    state.t += 1
    correction = np.sqrt(1.0 - state.beta2 ** state.t) / (1.0 - state.beta1 ** state.t)
    step_size = state.lr * correction
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arrays[name] -= step_size * m / (np.sqrt(v) + state.eps)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# === losses ===

def mse_loss(pred: Tensor, target) -> Tensor:
    t = target if isinstance(target, Tensor) else constant(np.asarray(target, dtype=np.float64))
    if pred.data.shape != t.data.shape:
        raise ContractError(
            f"mse_loss: shape mismatch {pred.data.shape} vs {t.data.shape}")
    d = pred - t
    return eg.scale(eg.sum_all(d * d), 1.0 / max(pred.data.size, 1))


def pearson_r(pred: Tensor, target, eps: float = 1e-24) -> tuple[Tensor, bool]:
    """Sample correlation as a tape op; returns (r, degenerate_flag).

    When either side has (near-)zero variance the correlation is undefined;
    the term is then a constant 0 and the flag is set.
    """
    t = target if isinstance(target, Tensor) else constant(np.asarray(target, dtype=np.float64))
    n = pred.data.size
    if n < 2:
        raise ContractError("pearson_r: need a series of length >= 2")
    dp = pred - eg.scale(eg.sum_all(pred), 1.0 / n)
    dt = t - eg.scale(eg.sum_all(t), 1.0 / n)
    vp = eg.sum_all(dp * dp)
    vt = eg.sum_all(dt * dt)
    if float(vp.data) < eps or float(vt.data) < eps:
        return constant(0.0), True
    return eg.sum_all(dp * dt) / eg.sqrt(vp * vt), False


def pendulum_loss(pred: Tensor, target) -> tuple[Tensor, dict]:
    """MSE minus the mean per-channel correlation over a (T, 2) window.

    Perfect predictions score -1. Zero-variance channels contribute 0 to the
    correlation part and are reported in the info dict.
    """
    t = np.asarray(target, dtype=np.float64)
    if pred.data.ndim != 2 or pred.data.shape != t.shape or pred.data.shape[1] != 2:
        raise ContractError(
            f"pendulum_loss: expected matching (T,2) series, got {pred.data.shape} vs {t.shape}")
    T = t.shape[0]
    mse = mse_loss(pred, t)
    degenerate = []
    r_sum = None
    for ch in range(2):
        col = eg.reshape(eg.narrow(pred, 1, ch, 1), (T,))
        r, flat = pearson_r(col, t[:, ch])
        if flat:
            degenerate.append(ch)
        r_sum = r if r_sum is None else r_sum + r
    loss = mse - eg.scale(r_sum, 0.5)
    if degenerate:
        log.warning("pendulum_loss: zero-variance channel(s) %s; correlation term dropped",
                    degenerate)
    return loss, {"degenerate_channels": degenerate, "mse": float(mse.data)}


# === curriculum ===

@dataclass
class CurriculumState:
    window: int
    step: int = 5
    threshold: float = -0.9
    max_window: int = 10 ** 9


def curriculum_advance(state: CurriculumState, loss_value: float) -> CurriculumState:
    """Widen the training window when the combined loss clears the threshold."""
    if loss_value < state.threshold and state.window < state.max_window:
        state.window = min(state.window + state.step, state.max_window)
    return state


# === forward paths ===

def _readout_batch(params: cl.CellParams, pt: dict[str, Tensor], h: Tensor) -> Tensor:
    mode = params.meta.get("readout", "linear")
    if mode == "sum":
        return eg.sum_rows(h)
    if mode == "trash-sum":
        if params.n_cells < 2:
            raise ContractError("readout: trash-sum needs at least 2 cells")
        return eg.sum_rows(eg.narrow(h, 1, 1, params.n_cells - 1))
    if mode == "linear":
        b = h.data.shape[0]
        return eg.reshape(eg.matmul(h, eg.transpose(pt["w_out"])) + pt["b_out"], (b,))
    raise ContractError(f"readout: unknown mode {mode!r}")


def _forward_batch_mclstm(params: cl.CellParams, pt: dict[str, Tensor],
                          mass: np.ndarray, aux: np.ndarray,
                          track_conservation: bool):
    """Tape-batched basic conserving cell; returns (preds, conservation).

    Both gates share one fused pre-activation: a single (B, 2K) matmul pair
    per step instead of four separate gate matmuls.
    """
    B, T, _ = mass.shape
    K = params.n_cells
    r = eg.softmax_columns(pt["br"])      # time-independent: hoisted out of the loop
    rt = eg.transpose(r)
    w_all = eg.concat([eg.transpose(pt["wi"]), eg.transpose(pt["wo"])], axis=1)
    u_all = eg.concat([eg.transpose(pt["ui"]), eg.transpose(pt["uo"])], axis=1)
    b_all = eg.concat([eg.transpose(pt["bi"]), eg.reshape(pt["bo"], (1, K))], axis=1)
    c = constant(np.zeros((B, K)))
    h = None
    mh_sum = np.zeros(B) if track_conservation else None
    for t in range(T):
        a_t = constant(aux[:, t, :])
        x_t = constant(mass[:, t, :])     # (B, 1)
        c_norm = eg.l1_normalize_rows(c)
        z = eg.matmul(a_t, w_all) + eg.matmul(c_norm, u_all) + b_all
        gate_i = eg.softmax_rows(eg.narrow(z, 1, 0, K))
        gate_o = eg.sigmoid(eg.narrow(z, 1, K, K))
        m_tot = eg.matmul(c, rt) + gate_i * x_t
        h = gate_o * m_tot
        c = m_tot - h
        if track_conservation:
            mh_sum += h.data.sum(axis=1)
    preds = _readout_batch(params, pt, h)
    conservation = None
    if track_conservation:
        x_total = mass.sum(axis=(1, 2))
        residual = np.abs(c.data.sum(axis=1) - x_total + mh_sum)
        conservation = residual / (1.0 + x_total)
    return preds, conservation


def _forward_batch_lstm(params: cl.CellParams, pt: dict[str, Tensor],
                        mass: np.ndarray, aux: np.ndarray):
    B, T, _ = mass.shape
    K = params.n_cells
    inputs = np.concatenate([mass, aux], axis=2)
    wt = eg.transpose(pt["w"])
    ut = eg.transpose(pt["u"])
    h = constant(np.zeros((B, K)))
    c = constant(np.zeros((B, K)))
    for t in range(T):
        z = eg.matmul(constant(inputs[:, t, :]), wt) + eg.matmul(h, ut) + pt["b"]
        gi = eg.sigmoid(eg.narrow(z, 1, 0, K))
        gf = eg.sigmoid(eg.narrow(z, 1, K, K))
        gg = eg.tanh(eg.narrow(z, 1, 2 * K, K))
        go = eg.sigmoid(eg.narrow(z, 1, 3 * K, K))
        c = gf * c + gi * gg
        h = go * eg.tanh(c)
    return _readout_batch(params, pt, h), None


def _uses_fast_path(params: cl.CellParams) -> bool:
    return params.variant in _FAST_PATH_VARIANTS and params.n_mass == 1


def _forward_per_sample(params: cl.CellParams, pt: dict[str, Tensor],
                        mass_row: np.ndarray, aux_row: np.ndarray) -> Tensor:
    """One sample's scalar prediction through the per-sample cell code."""
    if params.variant in _STATIC_VARIANTS:
        if mass_row.shape[0] != 1:
            raise ContractError(
                f"{params.variant.value} is static; sequences of length "
                f"{mass_row.shape[0]} do not apply")
        x = constant(mass_row[0])
        y = (cl.mcfc_mul_forward if params.variant is cl.CellVariant.MCFC_MUL
             else cl.mcfc_forward)(params, pt, x)
        out = cl.readout(params, pt, y)
    else:
        c0 = np.zeros(params.n_cells)
        hs, _ = cl.forward_sequence(params, c0, mass_row, aux_row, pt=pt)
        out = cl.readout(params, pt, hs[-1])
    if out.data.ndim == 1:
        out = eg.reshape(out, ())
    return out


def batch_gradients(params: cl.CellParams, mass: np.ndarray, aux: np.ndarray,
                    targets: np.ndarray, l2: float = 0.0,
                    track_conservation: bool = False):
    """Mean-MSE loss and named gradients over one mini-batch.

    Dispatches to the tape-batched fast path when the variant supports it,
    else loops per sample. Returns (loss_value, grads by name, conservation
    residuals or None).
    """
    y = targets.reshape(-1)
    pt = params.tensors()
    names = list(pt.keys())
    if _uses_fast_path(params):
        if params.variant is cl.CellVariant.MCLSTM:
            preds, cons = _forward_batch_mclstm(params, pt, mass, aux, track_conservation)
        else:
            preds, cons = _forward_batch_lstm(params, pt, mass, aux)
        loss = mse_loss(preds, y)
        gmap = eg.backward(loss, wrt=[pt[n] for n in names])
        grads = {n: gmap[pt[n]] for n in names}
        loss_value = float(loss.data)
    else:
        B = mass.shape[0]
        grads = {n: np.zeros_like(params.arrays[n]) for n in names}
        loss_value = 0.0
        cons_list = [] if track_conservation else None
        for row in range(B):
            pred = _forward_per_sample(params, pt, mass[row], aux[row])
            loss = eg.scale(mse_loss(eg.reshape(pred, (1,)), y[row:row + 1]), 1.0 / B)
            gmap = eg.backward(loss, wrt=[pt[n] for n in names])
            for n in names:
                grads[n] += gmap[pt[n]]
            loss_value += float(loss.data)
            pt = params.tensors()  # fresh leaves: one tape per sample
        cons = None
        if track_conservation:
            cons = _per_sample_conservation(params, mass, aux)
    if l2 > 0 and "w_out" in params.arrays:
        w = params.arrays["w_out"]
        loss_value += l2 * float((w * w).sum())
        grads["w_out"] = grads["w_out"] + 2.0 * l2 * w
    return loss_value, grads, cons


def _per_sample_conservation(params: cl.CellParams, mass: np.ndarray,
                             aux: np.ndarray) -> np.ndarray | None:
    if params.variant not in cl.RECURRENT_CONSERVING:
        return None
    out = np.zeros(mass.shape[0])
    with eg.no_grad():
        for row in range(mass.shape[0]):
            c0 = np.zeros(params.n_cells)
            hs, trace = cl.forward_sequence(params, c0, mass[row], aux[row],
                                            collect_trace=True)
            x_total = float(mass[row].sum())
            mh = sum(float(st.h.sum()) for st in trace.steps)
            mc = float(trace.steps[-1].c.sum())
            out[row] = abs(mc - x_total + mh) / (1.0 + x_total)
    return out


def predict(params: cl.CellParams, mass: np.ndarray, aux: np.ndarray,
            batch_size: int = 1024) -> np.ndarray:
    """Model predictions for a whole split, without building gradient tapes."""
    preds = np.zeros(mass.shape[0])
    with eg.no_grad():
        pt = params.tensors()
        for lo in range(0, mass.shape[0], batch_size):
            hi = min(lo + batch_size, mass.shape[0])
            if _uses_fast_path(params):
                if params.variant is cl.CellVariant.MCLSTM:
                    out, _ = _forward_batch_mclstm(params, pt, mass[lo:hi], aux[lo:hi], False)
                else:
                    out, _ = _forward_batch_lstm(params, pt, mass[lo:hi], aux[lo:hi])
                preds[lo:hi] = out.data
            else:
                for row in range(lo, hi):
                    preds[row] = float(_forward_per_sample(params, pt, mass[row], aux[row]).data)
    return preds


def evaluate(params: cl.CellParams, ds: tk.Dataset, batch_size: int = 1024) -> dict:
    """MSE (and success-vs-imprecision flag where defined) on one dataset."""
    preds = predict(params, ds.mass, ds.aux, batch_size=batch_size)
    err = preds - ds.targets.reshape(-1)
    out = {"mse": float(np.mean(err ** 2)), "n": int(ds.n_samples)}
    try:
        bar = tk.imprecision_threshold(ds)
        out["imprecision_threshold"] = bar
        out["beats_float32"] = bool(out["mse"] < bar)
    except ContractError:
        pass
    return out


# === sequence-to-one trainer ===

def _current_lr(base_lr: float, milestones: Iterable, epoch: int) -> float:
    lr = base_lr
    for m_epoch, m_lr in milestones or ():
        if epoch >= int(m_epoch):
            lr = float(m_lr)
    return lr


def train_sequence_to_one(config: ExperimentConfig, train_ds: tk.Dataset,
                          valid_ds: tk.Dataset, seed: int, lr: float,
                          params: cl.CellParams | None = None) -> dict:
    """Train one model; returns a result dict with params, history, summary.

    History rows: epoch, train_mse (mean over batches), valid_mse, lr,
    max scaled conservation residual among sampled batches, seconds.
    Any non-finite loss or gradient marks the run diverged and stops it.
    """
    variant = cl.CellVariant(config.variant)
    if params is None:
        params = cl.init_params(
            variant, config.n_cells, n_mass=train_ds.mass.shape[2],
            n_aux=train_ds.aux.shape[2], seed=seed, readout=config.readout)
    opt = adam_init(params.arrays, lr)
    shuffle_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), 0x51])))
    n = train_ds.n_samples
    batches = range(0, n, config.batch_size)
    sample_every = 1 if config.verify_every_batch else max(1, config.conservation_sample_every)
    history: list[dict] = []
    diverged = False
    nan_at = None
    started = time.perf_counter()

    for epoch in range(config.epochs):
        opt.lr = _current_lr(lr, config.lr_milestones, epoch)
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        max_residual = 0.0
        checked = 0
        for bi, lo in enumerate(batches):
            idx = order[lo:lo + config.batch_size]
            track = (variant in cl.RECURRENT_CONSERVING) and (bi % sample_every == 0)
            loss_value, grads, cons = batch_gradients(
                params, train_ds.mass[idx], train_ds.aux[idx], train_ds.targets[idx],
                l2=config.l2, track_conservation=track)
            if cons is not None:
                max_residual = max(max_residual, float(cons.max()))
                checked += 1
            if not np.isfinite(loss_value):
                diverged, nan_at = True, {"epoch": epoch, "batch": bi, "where": "loss"}
                break
            if config.clip_norm > 0:
                _clip_gradients(grads, config.clip_norm)
            try:
                adam_step(opt, params.arrays, grads)
            except DivergenceError as err:
                diverged, nan_at = True, {"epoch": epoch, "batch": bi, "where": str(err)}
                break
            epoch_losses.append(loss_value)
        if diverged:
            break
        valid_mse = evaluate(params, valid_ds)["mse"]
        history.append({
            "epoch": epoch,
            "train_mse": float(np.mean(epoch_losses)),
            "valid_mse": valid_mse,
            "lr": opt.lr,
            "conservation_max_residual": max_residual if checked else float("nan"),
            "seconds": time.perf_counter() - started,
        })
        if not np.isfinite(valid_mse):
            diverged, nan_at = True, {"epoch": epoch, "where": "validation"}
            break

    final_train = evaluate(params, train_ds)["mse"] if not diverged else float("nan")
    final_valid = evaluate(params, valid_ds)["mse"] if not diverged else float("nan")
    summary = {
        "task": config.task, "variant": config.variant, "seed": seed, "lr": lr,
        "epochs_run": len(history), "diverged": diverged, "nan_at": nan_at,
        "final_train_mse": final_train, "final_valid_mse": final_valid,
        "n_parameters": params.n_parameters(),
        "wall_seconds": time.perf_counter() - started,
    }
    return {"params": params, "history": history, "summary": summary}


def _dataset_for(config: ExperimentConfig) -> tuple[tk.Dataset, tk.Dataset, tk.Dataset]:
    if config.task == "addition":
        pool = tk.gen_addition(config.n_train_valid, config.seq_len, config.value_hi,
                               config.n_marked, config.data_seed, split="train+valid")
        half = config.n_train_valid // 2
        train = tk.Dataset("train", pool.mass[:half], pool.aux[:half],
                           pool.targets[:half],
                           {**pool.descriptor, "split": "train", "slice": [0, half]})
        valid = tk.Dataset("valid", pool.mass[half:], pool.aux[half:],
                           pool.targets[half:],
                           {**pool.descriptor, "split": "valid",
                            "slice": [half, config.n_train_valid]})
        test = tk.gen_addition(config.n_test, config.seq_len, config.value_hi,
                               config.n_marked,
                               tk._child_seed(config.data_seed, "addition-test"),
                               split="test")
        return train, valid, test
    if config.task == "recurrent-arithmetic":
        ds = tk.gen_recurrent_arithmetic(config.arithmetic_op, config.n_train_valid,
                                         config.seq_len, config.data_seed)
        half = config.n_train_valid // 2
        train = tk.Dataset("train", ds.mass[:half], ds.aux[:half], ds.targets[:half],
                           {**ds.descriptor, "split": "train", "slice": [0, half]})
        valid = tk.Dataset("valid", ds.mass[half:], ds.aux[half:], ds.targets[half:],
                           {**ds.descriptor, "split": "valid",
                            "slice": [half, config.n_train_valid]})
        test = tk.gen_recurrent_arithmetic(
            config.arithmetic_op, config.n_test, config.seq_len,
            tk._child_seed(config.data_seed, "recurrent-test"), split="test")
        return train, valid, test
    if config.task == "static-arithmetic":
        train_all, test = tk.gen_static_arithmetic(config.arithmetic_op, config.data_seed)
        half = train_all.n_samples // 2
        train = tk.Dataset("train", train_all.mass[:half], train_all.aux[:half],
                           train_all.targets[:half],
                           {**train_all.descriptor, "split": "train", "slice": [0, half]})
        valid = tk.Dataset("valid", train_all.mass[half:], train_all.aux[half:],
                           train_all.targets[half:],
                           {**train_all.descriptor, "split": "valid",
                            "slice": [half, train_all.n_samples]})
        return train, valid, test
    raise ContractError(f"run_experiment: task {config.task!r} is not sequence-to-one")


def _attach_test_mse(res: dict, test_ds: tk.Dataset) -> dict:
    if res["summary"]["diverged"]:
        res["summary"]["test_mse"] = float("nan")
    else:
        res["summary"]["test_mse"] = evaluate(res["params"], test_ds)["mse"]
    return res


def _train_seed_worker(cfg_dict: dict, seed: int, lr: float) -> dict:
    """Self-contained per-seed run (picklable entry point for process pools)."""
    config = ExperimentConfig.from_dict(cfg_dict)
    train_ds, valid_ds, test_ds = _dataset_for(config)
    res = train_sequence_to_one(config, train_ds, valid_ds, seed, lr)
    return _attach_test_mse(res, test_ds)


def run_experiment(config: ExperimentConfig,
                   datasets: tuple[tk.Dataset, tk.Dataset, tk.Dataset] | None = None,
                   progress: Callable[[str], None] | None = None,
                   parallel: int = 1) -> dict:
    """The full protocol: LR selection on validation, then the seed sweep.

    The grid phase ranks learning rates at the first seed over a shortened
    budget (min(GRID_EPOCHS, epochs) epochs; rankings stabilize early on
    these tasks), then every seed trains at the winning rate for the full
    budget. When the grid already ran the full budget its winning run is
    reused as the first seed's result.

    ``parallel`` > 1 fans the per-seed runs (after the grid search, which is
    sequential by definition) out to worker processes; each worker regenerates
    its datasets from the config, so results match the sequential path bit for
    bit.
    """
    train_ds, valid_ds, test_ds = datasets or _dataset_for(config)
    say = progress or (lambda msg: log.info("%s", msg))

    grid_reusable = False
    if config.lr is not None:
        chosen_lr = float(config.lr)
        grid_results = {}
    else:
        first = config.seeds[0]
        grid_epochs = min(config.epochs, GRID_EPOCHS)
        grid_cfg = config if grid_epochs == config.epochs else replace(
            config, epochs=grid_epochs)
        grid_results = {}
        for lr in config.lr_grid:
            say(f"lr grid: seed {first}, lr {lr}, {grid_epochs} epochs")
            res = train_sequence_to_one(grid_cfg, train_ds, valid_ds, first, lr)
            grid_results[lr] = res
        alive = {lr: r for lr, r in grid_results.items()
                 if not r["summary"]["diverged"] and np.isfinite(r["summary"]["final_valid_mse"])}
        if not alive:
            raise DivergenceError("run_experiment: every learning rate diverged")
        chosen_lr = min(alive, key=lambda lr: alive[lr]["summary"]["final_valid_mse"])
        grid_reusable = grid_epochs == config.epochs
        say(f"lr grid: selected {chosen_lr}")

    results: list[dict | None] = [None] * len(config.seeds)
    pending: list[tuple[int, int]] = []
    for i, seed in enumerate(config.seeds):
        if grid_reusable and i == 0:
            results[i] = _attach_test_mse(grid_results[chosen_lr], test_ds)
        else:
            pending.append((i, seed))

    if parallel > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor
        cfg_dict = asdict(config)
        say(f"training: {len(pending)} seeds across {parallel} processes")
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {i: pool.submit(_train_seed_worker, cfg_dict, seed, chosen_lr)
                       for i, seed in pending}
            for i, fut in futures.items():
                results[i] = fut.result()
    else:
        for i, seed in pending:
            say(f"training: seed {seed}, lr {chosen_lr}")
            res = train_sequence_to_one(config, train_ds, valid_ds, seed, chosen_lr)
            results[i] = _attach_test_mse(res, test_ds)

    test_mses = [r["summary"]["test_mse"] for r in results
                 if not r["summary"]["diverged"]]
    return {
        "chosen_lr": chosen_lr,
        "runs": results,
        "median_test_mse": float(np.median(test_mses)) if test_mses else float("nan"),
        "n_diverged": sum(r["summary"]["diverged"] for r in results),
        "config_hash": config_hash(config),
    }


# === autoregressive pendulum trainer ===

def rollout_pendulum(params: cl.CellParams, c0: np.ndarray, embeddings: np.ndarray,
                     n_steps: int, pt: dict[str, Tensor] | None = None,
                     affine: bool = False) -> Tensor:
    """Closed-loop rollout: predictions for t = 1..n_steps as an (n_steps, 2) tensor.

    Each step feeds the previous prediction (the cell state) together with the
    step's temporal embedding back into the hypernetwork. No teacher forcing.
    """
    if pt is None:
        pt = params.tensors()
    c = constant(np.asarray(c0, dtype=np.float64))
    x = constant(np.zeros(params.n_mass))
    rows = []
    for t in range(1, n_steps + 1):
        out = cl.step(params, pt, c, x, constant(embeddings[t]))
        c = out.c
        rows.append(eg.reshape(c, (1, params.n_cells)))
    pred = eg.concat(rows, axis=0)
    if affine:
        pred = eg.scale(pred, 1.02) - 0.01
    return pred


def train_autoregressive_pendulum(config: ExperimentConfig, dataset: tk.Dataset,
                                  seed: int) -> dict:
    """Fit the closed-system hypernet cell to one energy series.

    The curriculum window starts at ``curriculum_start`` predicted steps and
    grows by ``curriculum_step`` whenever the combined loss (MSE minus mean
    correlation) beats ``curriculum_threshold``. Training always runs the full
    ``max_updates`` budget; once the window spans the series the parameters
    with the best full-window loss are kept, so late-stage drift cannot erase
    an earlier, better fit.
    """
    targets = dataset.targets[0]          # (T, 2)
    embeddings = dataset.aux[0]           # (T, 9)
    T = targets.shape[0]
    if T < config.curriculum_start + 1:
        raise ContractError("pendulum series shorter than the starting window")
    params = cl.init_params(cl.CellVariant.MCLSTM_HYPERNET, 2, n_mass=1,
                            n_aux=embeddings.shape[1], seed=seed, closed_system=True)
    c0 = np.maximum(targets[0], 0.0)
    lr = PENDULUM_LR_DEFAULT if config.lr is None else float(config.lr)
    opt = adam_init(params.arrays, lr)
    cur = CurriculumState(window=config.curriculum_start, step=config.curriculum_step,
                          threshold=config.curriculum_threshold, max_window=T - 1)
    history = []
    diverged = False
    nan_at = None
    started = time.perf_counter()
    updates = 0
    loss_value = float("inf")
    best_loss = float("inf")
    best_arrays = None

    while updates < config.max_updates:
        pt = params.tensors()
        pred = rollout_pendulum(params, c0, embeddings, cur.window, pt=pt,
                                affine=config.affine_correction)
        loss, _info = pendulum_loss(pred, targets[1:cur.window + 1])
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            diverged, nan_at = True, {"update": updates, "where": "loss"}
            break
        if cur.window == cur.max_window and loss_value < best_loss:
            best_loss = loss_value
            best_arrays = {n: a.copy() for n, a in params.arrays.items()}
        gmap = eg.backward(loss, wrt=[pt[n] for n in pt])
        grads = {n: gmap[pt[n]] for n in pt}
        if config.clip_norm > 0:
            _clip_gradients(grads, config.clip_norm)
        try:
            adam_step(opt, params.arrays, grads)
        except DivergenceError as err:
            diverged, nan_at = True, {"update": updates, "where": str(err)}
            break
        updates += 1
        if updates % 200 == 0 or updates == 1:
            history.append({"update": updates, "window": cur.window,
                            "loss": loss_value,
                            "seconds": time.perf_counter() - started})
        curriculum_advance(cur, loss_value)

    if best_arrays is not None:
        for n, a in best_arrays.items():
            params.arrays[n][...] = a
        loss_value = best_loss
    result = {"params": params, "history": history}
    if diverged:
        result["summary"] = {"task": "pendulum", "seed": seed, "diverged": True,
                             "nan_at": nan_at, "updates": updates}
        return result
    with eg.no_grad():
        pred = rollout_pendulum(params, c0, embeddings, T - 1,
                                affine=config.affine_correction).data
    err = pred - targets[1:]
    mse = float(np.mean(err ** 2))
    rs = []
    for ch in range(2):
        a, b = pred[:, ch], targets[1:, ch]
        denom = np.std(a) * np.std(b)
        rs.append(float(np.mean((a - a.mean()) * (b - b.mean())) / denom) if denom > 0 else 0.0)
    result["summary"] = {
        "task": "pendulum", "seed": seed, "diverged": False, "updates": updates,
        "final_window": cur.window, "final_loss": loss_value,
        "rollout_mse": mse, "pearson_pot": rs[0], "pearson_kin": rs[1],
        "wall_seconds": time.perf_counter() - started,
    }
    return result


# === metrics files ===

def write_metrics_csv(path, rows: list[dict]) -> None:
    """History rows as CSV with a stable header union (missing fields blank)."""
    if not rows:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n")
        return
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join("" if k not in row else repr(row[k]) for k in keys) + "\n")
