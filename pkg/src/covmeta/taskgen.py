"""Synthetic multimodal regression benchmark.

A meta-distribution holds ``P`` covariate modes ``N(mu_p, sigma_p)`` and a
categorical weight vector over them.  A task picks a mode, draws its
covariates from it, and labels them with a hypothesis from one of five
families.  In the *dependent* case the mode fixes the family (or, for the
``sine`` variant, a slice of the sine parameter box); in the *independent*
case the family is drawn without looking at the mode.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import META_DISTRIBUTION, TASKS, CounterRng

FAMILIES = ("sine", "quad", "linear", "transformed-l1", "tanh")
FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES)}

VARIANTS = {
    "sine": ("sine",),
    "sine-quad-linear": ("sine", "quad", "linear"),
    "five": FAMILIES,
}
DEPENDENCE = ("dependent", "independent")
MODE_COUNT = {"sine": 3, "sine-quad-linear": 3, "five": 5}

NOISE_SIGMA = 0.3
SINE_RANGES = ((0.1, 5.0), (0.5, 2.0), (0.0, 2.0 * math.pi))
SMALL_A = ((-0.15, -0.02), (0.02, 0.15))
OFFSET = (-3.0, 3.0)
WIDE = (-3.0, 3.0)


class UnknownFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class CovariateMode:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("covariate mode sigma must be positive")


@dataclass(frozen=True)
class Hypothesis:
    family: str
    params: tuple

    def __call__(self, x):
        return eval_hypothesis(self, x)


def eval_hypothesis(h: Hypothesis, x):
    """Evaluate ``h`` at scalar or array ``x``.

    sine: ``A * (sin(w x) + b)``, quad: ``A (x - c)^2 + b``, linear: ``A x + b``,
    transformed-l1: ``A |x - c| + b``, tanh: ``A tanh(x - c) + b``.
    """
    x = np.asarray(x, dtype=np.float64)
    p = h.params
    if h.family == "sine":
        a, w, b = p
        out = a * (np.sin(w * x) + b)
    elif h.family == "quad":
        a, c, b = p
        out = a * (x - c) ** 2 + b
    elif h.family == "linear":
        a, b = p[:2]
        out = a * x + b
    elif h.family == "transformed-l1":
        a, c, b = p
        out = a * np.abs(x - c) + b
    elif h.family == "tanh":
        a, c, b = p
        out = a * np.tanh(x - c) + b
    else:
        raise UnknownFamilyError(f"unknown hypothesis family {h.family!r}")
    return out if out.ndim else float(out)


def sine_partition(p: int, P: int):
    """Ranges for (A, w, b) restricted to the ``p``-th of ``P`` equal slices (1-based)."""
    if not 1 <= p <= P:
        raise ValueError(f"mode {p} outside 1..{P}")
    out = []
    for lo, hi in SINE_RANGES:
        step = (hi - lo) / P
        out.append((lo + (p - 1) * step, hi if p == P else lo + p * step))
    return tuple(out)


def family_ranges(family: str):
    """Full parameter ranges; an entry that is a pair of pairs is a sign-split union."""
    if family == "sine":
        return SINE_RANGES
    if family in ("quad", "transformed-l1"):
        return (SMALL_A, OFFSET, OFFSET)
    if family == "linear":
        return (WIDE, OFFSET)
    if family == "tanh":
        return (WIDE, OFFSET, OFFSET)
    raise UnknownFamilyError(f"unknown hypothesis family {family!r}")


def _draw_params(ranges, u):
    # u: four uniforms [coin, p1, p2, p3]; unused entries are still consumed
    vals = []
    for i, r in enumerate(ranges):
        if isinstance(r[0], tuple):
            lo, hi = r[0] if u[0] < 0.5 else r[1]
        else:
            lo, hi = r
        vals.append(lo + (hi - lo) * u[i + 1])
    return tuple(float(v) for v in vals)


@dataclass
class MetaDistribution:
    variant: str
    dependence: str
    modes: list
    weights: np.ndarray
    seed: int
    noise_sigma: float = NOISE_SIGMA
    n_support: int = 5
    n_query: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dependence not in DEPENDENCE:
            raise ValueError(f"unknown dependence {self.dependence!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.modes) != MODE_COUNT[self.variant] or len(self.weights) != len(self.modes):
            raise ValueError(f"variant {self.variant} needs {MODE_COUNT[self.variant]} modes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mode weights must lie on the simplex")

    @property
    def P(self) -> int:
        return len(self.modes)

    @property
    def families(self):
        return VARIANTS[self.variant]

    def family_for_mode(self, p: int) -> str:
        """Family tied to mode ``p`` (0-based) in the dependent case."""
        return "sine" if self.variant == "sine" else self.families[p]

    def with_sizes(self, n_support: int, n_query: int) -> "MetaDistribution":
        return MetaDistribution(self.variant, self.dependence, list(self.modes), self.weights.copy(),
                                self.seed, self.noise_sigma, n_support, n_query)

    def manifest(self) -> dict:
        return {
            "variant": self.variant,
            "dependence": self.dependence,
            "P": self.P,
            "modes": [[m.mu, m.sigma] for m in self.modes],
            "weights": [float(w) for w in self.weights],
            "mode_families": [self.family_for_mode(p) if self.dependence == "dependent" else None
                              for p in range(self.P)],
            "noise_sigma": self.noise_sigma,
            "n_support": self.n_support,
            "n_query": self.n_query,
            "meta_seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "MetaDistribution":
        modes = [CovariateMode(float(mu), float(s)) for mu, s in m["modes"]]
        return cls(m["variant"], m["dependence"], modes, np.array(m["weights"]), int(m["meta_seed"]),
                   float(m["noise_sigma"]), int(m["n_support"]), int(m["n_query"]))


def build_meta_distribution(variant: str, dependence: str, seed: int,
                            n_support: int = 5, n_query: int = 5) -> MetaDistribution:
    """Draw the fixed modes and Dirichlet(1) mode weights for a benchmark variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    P = MODE_COUNT[variant]
    rng = CounterRng(seed, META_DISTRIBUTION, 0)
    u = rng.uniform(2 * P).reshape(P, 2)
    modes = [CovariateMode(-10.0 + 20.0 * a, 10.0 * (1.0 - b)) for a, b in u]
    e = rng.exponential(P)
    return MetaDistribution(variant, dependence, modes, e / e.sum(), seed,
                            n_support=n_support, n_query=n_query)


def anchor_distribution(dependence: str = "dependent") -> MetaDistribution:
    """sine-quad-linear with hand-picked modes: quad ~ N(-7, 1) and linear ~ N(7, 3).

    The sine mode is a free choice; N(0, 2) keeps it between the other two.
    """
    modes = [CovariateMode(0.0, 2.0), CovariateMode(-7.0, 1.0), CovariateMode(7.0, 3.0)]
    return MetaDistribution("sine-quad-linear", dependence, modes, np.full(3, 1.0 / 3.0), 0)


@dataclass
class Task:
    mode: int
    hypothesis: Hypothesis
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    index: int = field(default=-1, compare=False)

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return (self.mode == other.mode and self.hypothesis == other.hypothesis
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("support_x", "support_y", "query_x", "query_y")))


def sample_task(md: MetaDistribution, rng: CounterRng, index: int = -1) -> Task:
    """Draw one task.  Consumption order: mode, family, 4 parameter uniforms,
    covariates, noise."""
    p = rng.categorical(md.weights)
    fam_u = rng.uniform(1)[0]
    par_u = rng.uniform(4)
    if md.dependence == "dependent":
        family = md.family_for_mode(p)
        if md.variant == "sine":
            ranges = sine_partition(p + 1, md.P)
        else:
            ranges = family_ranges(family)
    else:
        fams = md.families
        family = fams[min(int(fam_u * len(fams)), len(fams) - 1)]
        ranges = family_ranges(family)
    params = _draw_params(ranges, par_u)
    h = Hypothesis(family, params)
    n = md.n_support + md.n_query
    mode = md.modes[p]
    xs = mode.mu + mode.sigma * rng.normal(n)
    noise = rng.normal(n)
    ys = np.asarray(eval_hypothesis(h, xs)) + md.noise_sigma * noise
    s = md.n_support
    return Task(p, h, xs[:s].copy(), ys[:s].copy(), xs[s:].copy(), ys[s:].copy(), index)


def task_at(md: MetaDistribution, seed: int, index: int) -> Task:
    """Task ``index`` of the dataset generated with ``seed``."""
    return sample_task(md, CounterRng(seed, TASKS, index), index)


def generate_dataset(md: MetaDistribution, n_tasks: int, seed: int):
    """``n_tasks`` tasks, each from its own ``(seed, index)`` stream, plus a manifest."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be at least 1")
    tasks = [task_at(md, seed, i) for i in range(n_tasks)]
    manifest = dict(md.manifest(), task_seed=int(seed), n_tasks=int(n_tasks))
    return tasks, manifest


def stack_tasks(tasks):
    """Batch arrays ``(support_x, support_y, query_x, query_y)`` of shape (B, n)."""
    return (np.stack([t.support_x for t in tasks]), np.stack([t.support_y for t in tasks]),
            np.stack([t.query_x for t in tasks]), np.stack([t.query_y for t in tasks]))


# ---------------------------------------------------------------- file format

DATASET_MAGIC = b"CVMDATA1"
DATASET_VERSION = 1


def _record_dtype(n_support, n_query):
    return np.dtype([("mode", "<i8"), ("family", "<i8"), ("params", "<f8", (3,)),
                     ("support_x", "<f8", (n_support,)), ("support_y", "<f8", (n_support,)),
                     ("query_x", "<f8", (n_query,)), ("query_y", "<f8", (n_query,))])


def encode_dataset(tasks, manifest: dict) -> bytes:
    m = dict(manifest, format_version=DATASET_VERSION, families=list(FAMILIES),
             record_layout=["mode:i64", "family:i64", "params:f64[3]", "support_x:f64[n_support]",
                            "support_y:f64[n_support]", "query_x:f64[n_query]", "query_y:f64[n_query]"])
    header = json.dumps(m, sort_keys=True, separators=(",", ":")).encode("utf-8")
    rec = np.zeros(len(tasks), dtype=_record_dtype(m["n_support"], m["n_query"]))
    for i, t in enumerate(tasks):
        params = list(t.hypothesis.params) + [0.0] * (3 - len(t.hypothesis.params))
        rec[i] = (t.mode, FAMILY_CODE[t.hypothesis.family], params,
                  t.support_x, t.support_y, t.query_x, t.query_y)
    return DATASET_MAGIC + struct.pack("<Q", len(header)) + header + rec.tobytes()


def decode_dataset(blob: bytes):
    if blob[:8] != DATASET_MAGIC:
        raise ValueError("dataset: bad magic")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError("dataset: unsupported format version")
    dt = _record_dtype(manifest["n_support"], manifest["n_query"])
    body = blob[16 + hlen:]
    if len(body) != dt.itemsize * manifest["n_tasks"]:
        raise ValueError("dataset: payload length does not match manifest")
    rec = np.frombuffer(body, dtype=dt)
    tasks = []
    for i, r in enumerate(rec):
        fam = FAMILIES[int(r["family"])]
        k = 2 if fam == "linear" else 3
        h = Hypothesis(fam, tuple(float(v) for v in r["params"][:k]))
        tasks.append(Task(int(r["mode"]), h, r["support_x"].copy(), r["support_y"].copy(),
                          r["query_x"].copy(), r["query_y"].copy(), i))
    return tasks, manifest


def write_dataset(path, tasks, manifest: dict) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_dataset(tasks, manifest))
    except OSError as e:
        raise OSError(f"cannot write dataset to {path}: {e.strerror}") from e


def read_dataset(path):
    return decode_dataset(Path(path).read_bytes())
