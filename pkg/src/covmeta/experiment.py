"""Experiment orchestration: dataset generation, training, evaluation, comparison, gradcheck.

Every function here is deterministic given its config; randomness comes only
from counter-based streams keyed by the config's seeds.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import meta, nets, taskgen
from .config import ConfigError, RunConfig
from .optim import AdamState, adam_step
from .rng import EVAL_EPS, MODEL_INIT, TRAIN_EPS, TRAIN_SHUFFLE, CounterRng

LOG_FIELDS = ("step", "epoch", "recon", "kl", "task_nll", "l2", "total")
RECORD_FIELDS = ("task_id", "mode", "family", "mse_pre", "mse_post")
EVAL_CHUNK = 100


class TrainingDiverged(ad.NonFiniteError):
    def __init__(self, step: int, component: str, detail: str = ""):
        self.step, self.component = step, component
        msg = f"training diverged at step {step}: non-finite {component}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------- datasets

def meta_distribution(cfg: RunConfig, n_support: int | None = None, n_query: int | None = None):
    return taskgen.build_meta_distribution(
        cfg.variant, cfg.dependence, cfg.data_seed,
        cfg.n_support if n_support is None else n_support,
        cfg.n_query if n_query is None else n_query)


def generate(cfg: RunConfig):
    """Training tasks and manifest described by ``cfg``."""
    return taskgen.generate_dataset(meta_distribution(cfg), cfg.n_tasks, cfg.data_seed)


def generate_to_file(cfg: RunConfig, path) -> dict:
    tasks, manifest = generate(cfg)
    taskgen.write_dataset(path, tasks, manifest)
    return manifest


def dataset_summary(manifest: dict, tasks=None) -> str:
    lines = [f"variant {manifest['variant']} ({manifest['dependence']}), P = {manifest['P']}, "
             f"{manifest['n_tasks']} tasks x ({manifest['n_support']} support + "
             f"{manifest['n_query']} query)",
             "mode        mu     sigma   weight  family"]
    counts = None
    if tasks is not None:
        counts = np.bincount([t.mode for t in tasks], minlength=manifest["P"])
    for p, ((mu, sigma), w) in enumerate(zip(manifest["modes"], manifest["weights"])):
        fam = manifest["mode_families"][p] or "any"
        line = f"{p:4d}  {mu:8.3f}  {sigma:8.3f}  {w:7.4f}  {fam}"
        if counts is not None:
            line += f"  ({counts[p]} tasks)"
        lines.append(line)
    return "\n".join(lines)


def check_manifest(cfg: RunConfig, manifest: dict) -> None:
    """Refuse datasets that were not generated for ``cfg``'s benchmark setting."""
    for key in ("variant", "dependence", "n_support", "n_query"):
        if manifest[key] != getattr(cfg, key):
            raise ConfigError(f"dataset {key} is {manifest[key]!r}, config expects {getattr(cfg, key)!r}")
    if manifest["meta_seed"] != cfg.data_seed:
        raise ConfigError(f"dataset was generated with data_seed {manifest['meta_seed']}, "
                          f"config has {cfg.data_seed}")
    if manifest["n_tasks"] < cfg.batch_size:
        raise ConfigError("dataset has fewer tasks than one batch")


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    params: dict
    adam: AdamState
    step: int


def initial_state(cfg: RunConfig) -> TrainState:
    layout = nets.meta_layout(cfg.architecture(), cfg.algorithm)
    params = nets.init_params(CounterRng(cfg.model_seed, MODEL_INIT, 0), layout)
    return TrainState(params, AdamState.zeros(nets.layout_size(layout), cfg.outer_lr), 0)


def steps_per_epoch(cfg: RunConfig, n_tasks: int) -> int:
    return n_tasks // cfg.batch_size


def batch_indices(cfg: RunConfig, n_tasks: int, step: int) -> np.ndarray:
    """Task indices of outer step ``step``: a fresh permutation per epoch, remainder dropped."""
    spe = steps_per_epoch(cfg, n_tasks)
    epoch, within = divmod(step, spe)
    perm = CounterRng(cfg.train_seed, TRAIN_SHUFFLE, epoch).permutation(n_tasks)
    return perm[within * cfg.batch_size:(within + 1) * cfg.batch_size]


def _diagnose(params, batch, eps_s, eps_q, arch, mcfg):
    """Name the first objective component that fails to evaluate finitely."""
    sx, sy, qx, qy = batch
    checks = [("l2", lambda: meta.l2_penalty(params))]
    if meta.uses_encoder(mcfg):
        def lam():
            return meta.adapt(params, sx, sy, eps_s, arch, mcfg).lambda_final
    else:
        def lam():
            return meta.maml_adapt(params, sx, sy, arch, mcfg)
    checks.append(("inner-loop", lam))
    checks.append(("task_nll", lambda: meta.task_nll(lam(), qx, qy, arch)))
    if meta.uses_encoder(mcfg) and not mcfg.encoder_bypass:
        terms = lambda: meta._elbo_terms(params, batch, eps_q,  # noqa: E731
                                          *meta.initial_params(params, sx, sy, eps_s, arch, mcfg)[1:],
                                          arch, mcfg)
        checks.append(("recon/kl", terms))
    for name, fn in checks:
        try:
            with np.errstate(all="ignore"):
                fn()
        except (ad.NonFiniteError, ad.DomainError):
            return name
    return "meta-gradient"


def train_step(state: TrainState, cfg: RunConfig, batch) -> tuple[TrainState, dict]:
    arch, mcfg = cfg.architecture(), cfg.meta_config()
    # overflow surfaces as NonFiniteError from the tape; numpy's warning adds nothing
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            if cfg.algorithm == "reptile":
                params, losses = meta.reptile_train_step(state.params, batch, arch, mcfg)
                adam = state.adam
            else:
                eps_rng = CounterRng(cfg.train_seed, TRAIN_EPS, state.step)
                params, adam, losses = meta.meta_train_step(state.params, state.adam, batch, eps_rng,
                                                            arch, mcfg)
    except (ad.NonFiniteError, ad.DomainError) as e:
        eps = meta.draw_eps(CounterRng(cfg.train_seed, TRAIN_EPS, state.step), len(batch[0]), arch)
        raise TrainingDiverged(state.step + 1, _diagnose(state.params, batch, *eps, arch, mcfg), str(e)) from e
    for k, v in losses.items():
        if not math.isfinite(v):
            raise TrainingDiverged(state.step + 1, k)
    return TrainState(params, adam, state.step + 1), losses


def train(cfg: RunConfig, tasks=None, manifest=None, resume: ckpt.Checkpoint | None = None,
          log_path=None, checkpoint_dir=None, max_steps: int | None = None, progress=None) -> TrainState:
    """Meta-train for ``cfg.epochs`` epochs (or until ``max_steps`` total steps).

    One NDJSON line per outer step is appended to ``log_path``.  Checkpoints go
    to ``checkpoint_dir``: every ``cfg.checkpoint_every`` steps and at the end.
    Resuming from a checkpoint of the same config continues the exact stream of
    batches and noise draws, so the result is bitwise identical to an
    uninterrupted run.
    """
    if tasks is None:
        tasks, manifest = generate(cfg)
    elif manifest is not None:
        check_manifest(cfg, manifest)
    data = taskgen.stack_tasks(tasks)
    n = len(tasks)
    if n < cfg.batch_size:
        raise ConfigError("dataset has fewer tasks than one batch")
    total_steps = cfg.epochs * steps_per_epoch(cfg, n)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    if resume is None:
        state = initial_state(cfg)
    else:
        _check_resume(cfg, resume.config)
        state = TrainState(resume.params, resume.adam, resume.step)
    log = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "a" if resume is not None else "w", encoding="utf-8")
    try:
        while state.step < total_steps:
            idx = batch_indices(cfg, n, state.step)
            batch = tuple(a[idx] for a in data)
            epoch = state.step // steps_per_epoch(cfg, n)
            state, losses = train_step(state, cfg, batch)
            rec = dict(step=state.step, epoch=epoch, **losses)
            if log is not None:
                log.write(json.dumps(rec) + "\n")
            if progress is not None:
                progress(rec)
            if checkpoint_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"checkpoint-{state.step:07d}.bin", cfg, state)
    finally:
        if log is not None:
            log.close()
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "checkpoint.bin", cfg, state)
    return state


def _check_resume(cfg: RunConfig, old: RunConfig) -> None:
    # epochs and output_dir may change between the interrupted and resumed run
    a = dict(cfg.to_dict(), epochs=0, output_dir="", checkpoint_every=0)
    b = dict(old.to_dict(), epochs=0, output_dir="", checkpoint_every=0)
    diff = sorted(k for k in a if a[k] != b[k])
    if diff:
        raise ConfigError(f"cannot resume: config differs from checkpoint in {', '.join(diff)}")


def save_checkpoint(path, cfg: RunConfig, state: TrainState) -> None:
    ckpt.save(path, ckpt.Checkpoint(cfg, state.params, state.adam, state.step))


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalRecord:
    task_id: int
    mode: int
    family: str
    mse_pre: float
    mse_post: float

    def __post_init__(self):
        if not (self.mse_pre >= 0 and self.mse_post >= 0):
            raise ValueError("MSE values must be non-negative")


@dataclass
class EvalSummary:
    algorithm: str
    variant: str
    dependence: str
    eval_seed: int
    n: int
    mean_pre: float
    mean_post: float
    ci_post: float
    inner_steps: int
    label: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def confidence_halfwidth(values) -> float:
    """Normal-approximation 95% half-width ``1.96 * s / sqrt(N)``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def eval_config(ck_cfg: RunConfig, overrides: dict) -> RunConfig:
    """Checkpoint config with evaluation overrides; architecture changes are refused."""
    cfg = ck_cfg.replace(**overrides)
    if cfg.architecture() != ck_cfg.architecture() or cfg.algorithm != ck_cfg.algorithm:
        raise ConfigError("architecture in the evaluation config does not match the checkpoint")
    return cfg


def evaluate(cfg: RunConfig, params: dict, label: str = "") -> tuple[list[EvalRecord], EvalSummary]:
    """Pre- and post-adaptation query MSE on ``cfg.eval_tasks`` fresh tasks.

    Adaptation sees the noisy support responses; the query error is measured
    against the noiseless hypothesis values.

    The modes come from ``data_seed`` (same covariate structure as training);
    the tasks come from ``eval_seed``.  Task ``i`` draws its latent noise from
    its own stream, so the result does not depend on how tasks are chunked.
    """
    arch, mcfg = cfg.architecture(), cfg.meta_config()
    expected = nets.meta_layout(arch, cfg.algorithm)
    if [(k, tuple(s)) for k, s in expected] != [(k, np.shape(v)) for k, v in params.items()]:
        raise ConfigError("parameters do not match the configured architecture")
    md = meta_distribution(cfg, cfg.eval_support, cfg.eval_query)
    records = []
    for start in range(0, cfg.eval_tasks, EVAL_CHUNK):
        ids = range(start, min(start + EVAL_CHUNK, cfg.eval_tasks))
        tasks = [taskgen.task_at(md, cfg.eval_seed, i) for i in ids]
        sx, sy, qx, _ = taskgen.stack_tasks(tasks)
        # scored against the noiseless response; the noisy one would floor every MSE at sigma^2
        qf = np.stack([taskgen.eval_hypothesis(t.hypothesis, t.query_x) for t in tasks])
        eps = np.stack([CounterRng(cfg.eval_seed, EVAL_EPS, i).normal(arch.latent) for i in ids])
        lam0, _, _ = meta.initial_params(params, sx, sy, eps, arch, mcfg)
        lam0 = {k: np.asarray(ad.value_of(v)) for k, v in lam0.items()}
        lam, _ = meta.inner_sgd(lam0, sx, sy, arch, mcfg.inner_steps, mcfg.inner_lr, first_order=True)
        pre = meta.mse(lam0, qx, qf, arch)
        post = meta.mse(lam, qx, qf, arch)
        if not (np.isfinite(pre).all() and np.isfinite(post).all()):
            raise ad.NonFiniteError("evaluation produced a non-finite MSE")
        records += [EvalRecord(t.index, t.mode, t.hypothesis.family, float(a), float(b))
                    for t, a, b in zip(tasks, pre, post)]
    post = [r.mse_post for r in records]
    summary = EvalSummary(cfg.algorithm, cfg.variant, cfg.dependence, cfg.eval_seed, len(records),
                          float(np.mean([r.mse_pre for r in records])), float(np.mean(post)),
                          confidence_halfwidth(post), cfg.inner_steps, label or cfg.algorithm)
    return records, summary


def summary_path(records_path) -> Path:
    p = Path(records_path)
    return p.with_name(p.name + ".summary.json")


def write_records(path, records, summary: EvalSummary) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(RECORD_FIELDS)
            for r in records:
                w.writerow([r.task_id, r.mode, r.family, repr(r.mse_pre), repr(r.mse_post)])
        summary_path(path).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write evaluation records to {path}: {e.strerror}") from e


def read_records(path) -> tuple[list[EvalRecord], EvalSummary]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != RECORD_FIELDS:
        raise ValueError(f"{path}: not an evaluation records file (bad header)")
    records = [EvalRecord(int(a), int(b), c, float(d), float(e)) for a, b, c, d, e in rows[1:]]
    summary = EvalSummary(**json.loads(summary_path(path).read_text(encoding="utf-8")))
    return records, summary


# ---------------------------------------------------------------- comparison

@dataclass
class Comparison:
    columns: list
    rows: list          # (label, {column: (mean, ci)})

    def to_text(self) -> str:
        width = max(8, *(len(r[0]) for r in self.rows))
        head = "algorithm".ljust(width) + "".join(f"  {c:>22}" for c in self.columns)
        lines = [head, "-" * len(head)]
        for label, cells in self.rows:
            cols = []
            for c in self.columns:
                cols.append(f"{cells[c][0]:.4f} +- {cells[c][1]:.4f}" if c in cells else "-")
            lines.append(label.ljust(width) + "".join(f"  {s:>22}" for s in cols))
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["algorithm," + ",".join(f"{c}_mean,{c}_ci" for c in self.columns)]
        for label, cells in self.rows:
            vals = []
            for c in self.columns:
                vals += [repr(cells[c][0]), repr(cells[c][1])] if c in cells else ["", ""]
            out.append(",".join([label] + vals))
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Comparison":
        rows = list(csv.reader(text.splitlines()))
        columns = [h[:-5] for h in rows[0][1::2]]
        out = []
        for r in rows[1:]:
            cells = {c: (float(r[1 + 2 * i]), float(r[2 + 2 * i]))
                     for i, c in enumerate(columns) if r[1 + 2 * i] != ""}
            out.append((r[0], cells))
        return cls(columns, out)


def compare(paths) -> Comparison:
    """One row per algorithm in input order, one column per dataset variant.

    A file whose (label, variant) cell is already filled opens a new row with
    a numbered label, so comparing a file with itself yields two rows.
    """
    if len(paths) < 2:
        raise ConfigError("compare needs at least two evaluation files")
    summaries = [read_records(p)[1] for p in paths]
    seeds = {s.eval_seed for s in summaries}
    if len(seeds) > 1:
        raise ConfigError(f"evaluation seeds differ across inputs: {sorted(seeds)}")
    mixed = len({s.dependence for s in summaries}) > 1
    columns, rows = [], []
    for s in summaries:
        col = f"{s.variant}/{s.dependence}" if mixed else s.variant
        if col not in columns:
            columns.append(col)
        label = s.label or s.algorithm
        target = next((r for r in rows if r[2] == label and col not in r[1]), None)
        if target is None:
            n = sum(1 for r in rows if r[2] == label)
            target = (label if n == 0 else f"{label}#{n + 1}", {}, label)
            rows.append(target)
        target[1][col] = (s.mean_post, s.ci_post)
    return Comparison(columns, [(name, cells) for name, cells, _ in rows])


# ---------------------------------------------------------------- gradcheck

GRADCHECK_TOL = 1e-4


@dataclass
class GradcheckResult:
    name: str
    group_errors: dict
    expected_divergent: bool = False

    @property
    def worst(self) -> float:
        return max(self.group_errors.values())

    @property
    def passed(self) -> bool:
        return self.expected_divergent or self.worst <= GRADCHECK_TOL


def gradcheck_one(algorithm: str, inner_steps: int = 3, first_order: bool = False, seed: int = 0,
                  inner_lr: float = 0.01, n_tasks: int = 2, arch: nets.Architecture = nets.MINIATURE,
                  h: float = 1e-5) -> GradcheckResult:
    """Tape meta-gradient vs central differences of the objective, per parameter group."""
    if algorithm == "reptile":
        raise ConfigError("reptile has no meta-gradient to check")
    overrides = {} if algorithm in ("ours", "mmaml-lite") else {"alpha_r": 0.0, "alpha_kl": 0.0}
    mcfg = meta.MetaConfig(algorithm, inner_steps=inner_steps, inner_lr=inner_lr,
                           first_order=first_order, **overrides)
    if algorithm == "mmaml-lite":
        arch = nets.Architecture(**dict(arch.to_dict(), hidden=arch.hidden, encoder_input="pairs"))
    md = taskgen.build_meta_distribution("sine-quad-linear", "dependent", seed)
    batch = taskgen.stack_tasks([taskgen.task_at(md, seed, i) for i in range(n_tasks)])
    layout = nets.meta_layout(arch, algorithm)
    beta = nets.init_params(CounterRng(seed, MODEL_INIT, 0), layout)
    # zero biases put ReLU units exactly on their kink, where differences are meaningless
    jitter = CounterRng(seed, MODEL_INIT, 1).normal(nets.layout_size(layout))
    beta = nets.unflatten(nets.flatten(beta, layout) + 0.05 * jitter, layout)
    eps_s, eps_q = meta.draw_eps(CounterRng(seed, TRAIN_EPS, 0), n_tasks, arch)
    grads, _ = meta.meta_gradient(beta, batch, eps_s, eps_q, arch, mcfg)
    exact_cfg = meta.MetaConfig(**dict(mcfg.to_dict(), first_order=False))

    def f(theta):
        return meta.objective_value(nets.unflatten(theta, layout), batch, eps_s, eps_q, arch, exact_cfg)

    fd = nets.unflatten(ad.finite_difference_grad(f, nets.flatten(beta, layout), h), layout)
    groups = {}
    for k in beta:
        groups.setdefault(k.split(".")[0], []).append(k)
    errors = {g: ad.relative_error(np.concatenate([grads[k].ravel() for k in ks]),
                                   np.concatenate([fd[k].ravel() for k in ks]))
              for g, ks in groups.items()}
    mode = "first-order" if first_order else "exact"
    return GradcheckResult(f"{algorithm} {mode} K={inner_steps}", errors,
                           expected_divergent=first_order and inner_steps >= 1)


def gradcheck_battery(inner_steps: int = 3, first_order: bool = False, seed: int = 0,
                      algorithms=("ours", "maml")) -> list[GradcheckResult]:
    """Exact checks for every algorithm, plus the first-order variants when requested."""
    results = [gradcheck_one(a, inner_steps, False, seed) for a in algorithms]
    if first_order:
        results += [gradcheck_one(a, inner_steps, True, seed) for a in algorithms]
        if inner_steps >= 1:
            results += [gradcheck_one(a, 0, True, seed) for a in algorithms]
    return results


def format_gradcheck(results) -> str:
    lines = []
    for r in results:
        status = "expected-divergent" if r.expected_divergent else ("ok" if r.passed else "FAIL")
        lines.append(f"{r.name}: worst relative error {r.worst:.3e} [{status}]")
        for g, e in r.group_errors.items():
            lines.append(f"    {g:<10} {e:.3e}")
    return "\n".join(lines)
