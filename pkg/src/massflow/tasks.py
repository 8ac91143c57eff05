"""Synthetic task generators and the columnar dataset file.

Every generator is a pure function of its arguments: randomness comes from a
counter-based Philox stream seeded through ``numpy.random.SeedSequence``, and
arrays are drawn in a fixed documented order, so regenerating from a stored
descriptor reproduces the dataset bit for bit on any platform.

Datasets are (mass, aux, targets) triples:

* ``mass``    (N, T, M) non-negative conserved-quantity inputs
* ``aux``     (N, T, L) auxiliary inputs (markers, end signals, embeddings)
* ``targets`` (N, n_out) for sequence-to-one tasks, (N, T, n_out) for series

File format ``MFDS1``: the 6-byte magic ``b"MFDS1\\n"``, a little-endian u32
header length, a UTF-8 JSON descriptor (task parameters, seed, split, and the
ordered array manifest), then each array's body as little-endian float64 in C
order, concatenated in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ContractError, DomainError

__all__ = [
    "Dataset",
    "PendulumConfig",
    "gen_addition",
    "addition_reference_splits",
    "gen_recurrent_arithmetic",
    "gen_static_arithmetic",
    "pendulum_series",
    "pendulum_dataset",
    "temporal_embedding",
    "embedding_series",
    "write_dataset",
    "read_dataset",
    "regenerate",
    "imprecision_threshold",
    "ADDITION_REFERENCE",
    "ADDITION_GENERALIZATION",
]

MAGIC = b"MFDS1\n"
FORMAT_VERSION = 1

ARITHMETIC_OPS = ("add", "sub", "mul")

# The addition reference configuration: (n, seq_len, value_hi, n_marked).
# Training/validation are one 20000-sample draw split 50/50; the test split is
# a separate 1000-sample draw from a child seed.
ADDITION_REFERENCE = {"n": 20000, "seq_len": 100, "value_hi": 0.5, "n_marked": 2}

# Out-of-distribution evaluation splits for models trained on the reference:
# name -> (n, seq_len, value_hi, n_marked).
ADDITION_GENERALIZATION = {
    "seq-length": (1000, 1000, 0.5, 2),
    "input-range": (1000, 100, 5.0, 2),
    "count": (1000, 100, 0.5, 20),
    "combo": (1000, 500, 2.5, 10),
}


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass
class Dataset:
    """In-memory dataset plus the descriptor that regenerates it."""

    split: str
    mass: np.ndarray
    aux: np.ndarray
    targets: np.ndarray
    descriptor: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.mass.shape[0]

    @property
    def seq_len(self) -> int:
        return self.mass.shape[1]


# === addition task ===

def gen_addition(n: int, seq_len: int, value_hi: float, n_marked: int,
                 seed: int, split: str = "train") -> Dataset:
    """Sum-the-marked-values task.

    Mass channel: per-step values ~ U(0, value_hi). Aux channel 0 carries the
    marker (1.0 at ``n_marked`` positions drawn without replacement over the
    whole sequence), channel 1 the end signal (-1.0 at the final step). The
    target is the sum of the marked values, accumulated left to right, so
    recomputing that sum from the raw arrays reproduces the targets exactly.
    """
    if n < 1 or seq_len < 1:
        raise ContractError(f"gen_addition: need positive sizes, got n={n} seq_len={seq_len}")
    if not (0 < n_marked <= seq_len):
        raise ContractError(
            f"gen_addition: n_marked={n_marked} outside [1, seq_len={seq_len}]")
    if value_hi <= 0:
        raise ContractError(f"gen_addition: value_hi must be positive, got {value_hi}")
    rng = _rng(seed)
    values = rng.uniform(0.0, value_hi, size=(n, seq_len))
    aux = np.zeros((n, seq_len, 2))
    aux[:, -1, 1] = -1.0
    targets = np.zeros((n, 1))
    for row in range(n):
        marks = rng.choice(seq_len, size=n_marked, replace=False)
        aux[row, marks, 0] = 1.0
        total = 0.0
        for t in sorted(marks):
            total += values[row, t]
        targets[row, 0] = total
    descriptor = {
        "format_version": FORMAT_VERSION, "task": "addition", "split": split,
        "n": n, "seq_len": seq_len, "value_hi": value_hi, "n_marked": n_marked,
        "seed": int(seed),
    }
    return Dataset(split, values[:, :, None], aux, targets, descriptor)


def addition_reference_splits(seed: int = 0,
                              n_train_valid: int = ADDITION_REFERENCE["n"],
                              n_test: int = 1000) -> tuple[Dataset, Dataset, Dataset]:
    """Reference train/valid/test. One draw split 50/50, test from a child seed."""
    cfg = ADDITION_REFERENCE
    pool = gen_addition(n_train_valid, cfg["seq_len"], cfg["value_hi"],
                        cfg["n_marked"], seed, split="train+valid")
    half = n_train_valid // 2
    train = Dataset("train", pool.mass[:half], pool.aux[:half], pool.targets[:half],
                    {**pool.descriptor, "split": "train", "slice": [0, half]})
    valid = Dataset("valid", pool.mass[half:], pool.aux[half:], pool.targets[half:],
                    {**pool.descriptor, "split": "valid", "slice": [half, n_train_valid]})
    test_seed = _child_seed(seed, "addition-test")
    test = gen_addition(n_test, cfg["seq_len"], cfg["value_hi"], cfg["n_marked"],
                        test_seed, split="test")
    return train, valid, test


def _child_seed(seed: int, label: str) -> int:
    """Deterministic child seed: fold the label into a SeedSequence spawn key."""
    key = int.from_bytes(label.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    ss = np.random.SeedSequence([int(seed), key])
    return int(ss.generate_state(1)[0])


# === arithmetic on subset sums ===

def _check_subsets(a: int, b: int, c: int, width: int) -> None:
    if not (1 <= a <= b <= a + c and b + c <= width):
        raise ContractError(
            f"subset bounds violated: need 1 <= a <= b <= a+c and b+c <= width, "
            f"got a={a} b={b} c={c} width={width}")


def _apply_op(op: str, lhs: float, rhs: float) -> float:
    if op == "add":
        return lhs + rhs
    if op == "sub":
        return lhs - rhs
    if op == "mul":
        return lhs * rhs
    raise ContractError(f"unknown arithmetic op {op!r}; pick one of {ARITHMETIC_OPS}")


def gen_recurrent_arithmetic(op: str, n: int, seq_len: int, seed: int,
                             subset_a: int = 6, subset_b: int = 7, subset_c: int = 1,
                             width: int = 10, lo: float = 1.0, hi: float = 2.0,
                             split: str = "train") -> Dataset:
    """Arithmetic on two overlapping subset sums of a vector input stream.

    Inputs are (T, width) with entries ~ U(lo, hi). With 1-based inclusive
    subsets, the left operand sums coordinates subset_a..subset_a+subset_c
    over all steps, the right operand subset_b..subset_b+subset_c, and the
    target applies ``op`` to the two sums. The default subsets sum x6+x7 and
    x7+x8 per step. Aux is a single channel: 1.0 every step, -1.0 at the last.
    Accumulation is time-major then coordinate, left to right.
    """
    _apply_op(op, 0.0, 0.0)
    _check_subsets(subset_a, subset_b, subset_c, width)
    if n < 1 or seq_len < 1:
        raise ContractError(f"gen_recurrent_arithmetic: bad sizes n={n} seq_len={seq_len}")
    rng = _rng(seed)
    x = rng.uniform(lo, hi, size=(n, seq_len, width))
    aux = np.ones((n, seq_len, 1))
    aux[:, -1, 0] = -1.0
    targets = np.zeros((n, 1))
    for row in range(n):
        lhs = 0.0
        rhs = 0.0
        for t in range(seq_len):
            for k in range(subset_a - 1, subset_a + subset_c):
                lhs += x[row, t, k]
            for k in range(subset_b - 1, subset_b + subset_c):
                rhs += x[row, t, k]
        targets[row, 0] = _apply_op(op, lhs, rhs)
    descriptor = {
        "format_version": FORMAT_VERSION, "task": "recurrent-arithmetic",
        "split": split, "op": op, "n": n, "seq_len": seq_len, "seed": int(seed),
        "subset_a": subset_a, "subset_b": subset_b, "subset_c": subset_c,
        "width": width, "lo": lo, "hi": hi,
    }
    return Dataset(split, x, aux, targets, descriptor)


def gen_static_arithmetic(op: str, seed: int, n_train: int = 10000,
                          n_test: int = 1000, width: int = 100
                          ) -> tuple[Dataset, Dataset]:
    """Single-step arithmetic with interpolation/extrapolation ranges.

    Train inputs ~ U(1,2)^width, test inputs ~ U(2,6)^width; both splits share
    subset indices drawn once from the seed under the documented constraint
    1 <= a <= b <= a+c, b+c <= width. Shapes follow the sequence layout with
    T=1 so the same models and file format apply.
    """
    _apply_op(op, 0.0, 0.0)
    if width < 2:
        raise ContractError(f"gen_static_arithmetic: width must be >= 2, got {width}")
    rng = _rng(seed)
    c = int(rng.integers(1, width // 2 + 1))
    a = int(rng.integers(1, width - c + 1))
    b = int(rng.integers(a, min(a + c, width - c) + 1))
    _check_subsets(a, b, c, width)

    def build(split: str, n: int, lo: float, hi: float, sub_seed: int) -> Dataset:
        sub = _rng(sub_seed)
        x = sub.uniform(lo, hi, size=(n, 1, width))
        aux = np.full((n, 1, 1), -1.0)
        targets = np.zeros((n, 1))
        for row in range(n):
            lhs = 0.0
            rhs = 0.0
            for k in range(a - 1, a + c):
                lhs += x[row, 0, k]
            for k in range(b - 1, b + c):
                rhs += x[row, 0, k]
            targets[row, 0] = _apply_op(op, lhs, rhs)
        descriptor = {
            "format_version": FORMAT_VERSION, "task": "static-arithmetic",
            "split": split, "op": op, "n": n, "seed": int(seed),
            "sub_seed": int(sub_seed), "subset_a": a, "subset_b": b, "subset_c": c,
            "width": width, "lo": lo, "hi": hi,
        }
        return Dataset(split, x, aux, targets, descriptor)

    train = build("train", n_train, 1.0, 2.0, _child_seed(seed, "static-train"))
    test = build("test", n_test, 2.0, 6.0, _child_seed(seed, "static-test"))
    return train, test


# === damped pendulum energies ===

@dataclass
class PendulumConfig:
    """Small-angle pendulum with optional linear damping.

    ``gamma`` is the damping coefficient of ``theta'' + gamma theta' +
    (g/l) theta = 0`` (underdamped regime required: gamma^2 < 4 g / l).
    ``dt`` defaults to 0.075 s, putting the standard 100/200/400-step grids
    at roughly 3 to 12 oscillation periods for l=1, g=6.
    """

    theta0: float = 0.2
    length: float = 1.0
    gamma: float = 0.0
    noise_sigma: float = 0.0
    n_steps: int = 200
    dt: float = 0.075
    mass: float = 0.5
    gravity: float = 6.0
    seed: int = 0


def pendulum_series(cfg: PendulumConfig) -> np.ndarray:
    """Closed-form (E_pot, E_kin) series, shape (n_steps, 2).

    theta(t) = theta0 e^{-gamma t/2} (cos w't + (gamma/2w') sin w't) with
    w' = sqrt(g/l - gamma^2/4); starting at rest, so the energy is all
    potential at t=0. E_pot = m g l theta^2 / 2, E_kin = m l^2 theta'^2 / 2.
    Optional i.i.d. Gaussian noise (sigma = noise_sigma) is added per channel.
    """
    w0sq = cfg.gravity / cfg.length
    if cfg.gamma * cfg.gamma >= 4.0 * w0sq:
        raise DomainError(
            f"pendulum_series: overdamped (gamma^2 = {cfg.gamma**2:.4g} >= "
            f"4 g/l = {4 * w0sq:.4g})")
    if cfg.n_steps < 1 or cfg.dt <= 0:
        raise ContractError(f"pendulum_series: bad grid n_steps={cfg.n_steps} dt={cfg.dt}")
    beta = cfg.gamma / 2.0
    w = math.sqrt(w0sq - beta * beta)
    t = np.arange(cfg.n_steps) * cfg.dt
    envelope = np.exp(-beta * t)
    theta = cfg.theta0 * envelope * (np.cos(w * t) + (beta / w) * np.sin(w * t))
    theta_dot = -cfg.theta0 * envelope * (w0sq / w) * np.sin(w * t)
    e_pot = 0.5 * cfg.mass * cfg.gravity * cfg.length * theta ** 2
    e_kin = 0.5 * cfg.mass * cfg.length ** 2 * theta_dot ** 2
    series = np.stack([e_pot, e_kin], axis=1)
    if cfg.noise_sigma > 0:
        rng = _rng(cfg.seed)
        series = series + rng.normal(0.0, cfg.noise_sigma, size=series.shape)
    return series


def pendulum_dataset(cfg: PendulumConfig) -> Dataset:
    """Wrap one pendulum series as a dataset: aux = temporal embedding,
    mass = zeros (closed system), targets = the (1, T, 2) energy series."""
    series = pendulum_series(cfg)
    T = cfg.n_steps
    aux = embedding_series(T)[None, :, :]
    mass = np.zeros((1, T, 1))
    descriptor = {
        "format_version": FORMAT_VERSION, "task": "pendulum", "split": "train",
        **asdict(cfg),
    }
    return Dataset("train", mass, aux, series[None, :, :], descriptor)


# === temporal embedding ===

def temporal_embedding(t, period: int) -> np.ndarray:
    """Nine sinusoids with geometric frequencies 1, 2, 4, ..., 256 over ``period``.

    e_j(t) = sin(2 pi 2^{j-1} t / period). Zero vector at t=0 and periodic in
    ``period``; for even periods t=0 and t=period/2 share the zero vector (all
    integer-frequency sine ladders do), every other integer step is distinct.
    """
    if period < 1:
        raise ContractError(f"temporal_embedding: period must be positive, got {period}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 2.0 ** np.arange(9)
    return np.sin(2.0 * np.pi * freqs * t[..., None] / period)


def embedding_series(n_steps: int) -> np.ndarray:
    """Embeddings for t = 0..n_steps-1 with period n_steps, shape (T, 9)."""
    return temporal_embedding(np.arange(n_steps), n_steps)


# === dataset files ===

def write_dataset(path, ds: Dataset) -> None:
    """Write the MFDS1 container (see module docstring for the layout)."""
    manifest = [
        {"name": "mass", "shape": list(ds.mass.shape)},
        {"name": "aux", "shape": list(ds.aux.shape)},
        {"name": "targets", "shape": list(ds.targets.shape)},
    ]
    header = dict(ds.descriptor)
    header["split"] = ds.split
    header["arrays"] = manifest
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (ds.mass, ds.aux, ds.targets):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContractError(f"dataset file truncated: wanted {n} bytes, got {len(data)}")
    return data


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise ContractError(f"{path}: not a MFDS1 dataset file")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = _read_exact(fh, 8 * count)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    descriptor = {k: v for k, v in header.items() if k != "arrays"}
    return Dataset(header.get("split", "train"), arrays["mass"], arrays["aux"],
                   arrays["targets"], descriptor)


def _apply_slice(ds: Dataset, descriptor: dict) -> Dataset:
    if "slice" not in descriptor:
        return ds
    lo, hi = descriptor["slice"]
    return Dataset(descriptor.get("split", ds.split), ds.mass[lo:hi], ds.aux[lo:hi],
                   ds.targets[lo:hi], dict(descriptor))


def regenerate(descriptor: dict) -> Dataset:
    """Rebuild a dataset from its descriptor; bitwise identical to the original.

    A ``slice: [lo, hi]`` key selects a row range of the full draw, which is
    how the 50/50 train/validation split of a single draw round-trips.
    """
    task = descriptor.get("task")
    d = descriptor
    if task == "addition":
        ds = gen_addition(d["n"], d["seq_len"], d["value_hi"], d["n_marked"],
                          d["seed"], split=d.get("split", "train"))
        return _apply_slice(ds, d)
    if task == "recurrent-arithmetic":
        ds = gen_recurrent_arithmetic(
            d["op"], d["n"], d["seq_len"], d["seed"], d["subset_a"], d["subset_b"],
            d["subset_c"], d["width"], d["lo"], d["hi"], split=d.get("split", "train"))
        return _apply_slice(ds, d)
    if task == "static-arithmetic":
        # The two splits draw from independent child streams, so the unused
        # one can be regenerated at size 1.
        if d.get("split") == "test":
            picked = gen_static_arithmetic(d["op"], d["seed"], n_train=1,
                                           n_test=d["n"], width=d["width"])[1]
        else:
            picked = gen_static_arithmetic(d["op"], d["seed"], n_train=d["n"],
                                           n_test=1, width=d["width"])[0]
        if picked.descriptor["sub_seed"] != d["sub_seed"]:  # pragma: no cover
            raise ContractError("static-arithmetic descriptor does not match its seed")
        return _apply_slice(picked, d)
    if task == "pendulum":
        fields = {k: descriptor[k] for k in (
            "theta0", "length", "gamma", "noise_sigma", "n_steps", "dt",
            "mass", "gravity", "seed")}
        return pendulum_dataset(PendulumConfig(**fields))
    raise ContractError(f"regenerate: unknown task {task!r}")


def imprecision_threshold(ds: Dataset) -> float:
    """MSE between the exact targets and the same computation in float32.

    The success bar for arithmetic tasks: a model whose MSE sits below this
    threshold is as accurate as running the true operation in single
    precision. Floored at 1e-30 so exact-zero recomputations stay usable.
    """
    task = ds.descriptor.get("task")
    d = ds.descriptor
    if task == "addition":
        x32 = ds.mass[:, :, 0].astype(np.float32)
        marked = ds.aux[:, :, 0] > 0.5
        approx = np.zeros(ds.n_samples, dtype=np.float32)
        for row in range(ds.n_samples):
            total = np.float32(0.0)
            for t in np.nonzero(marked[row])[0]:
                total += x32[row, t]
            approx[row] = total
    elif task in ("recurrent-arithmetic", "static-arithmetic"):
        a, b, c = d["subset_a"], d["subset_b"], d["subset_c"]
        x32 = ds.mass.astype(np.float32)
        approx = np.zeros(ds.n_samples, dtype=np.float32)
        for row in range(ds.n_samples):
            lhs = np.float32(0.0)
            rhs = np.float32(0.0)
            for t in range(ds.seq_len):
                for k in range(a - 1, a + c):
                    lhs += x32[row, t, k]
                for k in range(b - 1, b + c):
                    rhs += x32[row, t, k]
            approx[row] = np.float32(_apply_op(d["op"], float(lhs), float(rhs)))
    else:
        raise ContractError(f"imprecision_threshold: no exact operation for task {task!r}")
    err = approx.astype(np.float64) - ds.targets[:, 0]
    return max(float(np.mean(err ** 2)), 1e-30)
