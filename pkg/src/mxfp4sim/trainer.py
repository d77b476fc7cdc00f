"""Desk-scale training harness for the stage-wise MXFP4 enablement ladder.

An MLP over one-hot token contexts is trained with hand-written backprop.
Every linear layer routes its three GEMMs (Fprop, Dgrad, Wgrad) through
:mod:`mxfp4sim.qgemm` with a per-path numeric chosen by the run config.
Master weights, biases and optimizer state stay in float64.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from mxfp4sim.block_quant import QuantLayout
from mxfp4sim.fp4_numerics import InvalidInput, Rounding
from mxfp4sim.hadamard import HadamardSpec
from mxfp4sim.qgemm import GemmPath, Numeric, PathConfig, dgrad, fprop, wgrad
from mxfp4sim.task import DataConfig, MarkovCorpus

STABILIZERS = (
    "none",
    "stochastic_rounding",
    "randomized_hadamard",
    "deterministic_hadamard",
)
ACTIVATIONS = ("gelu", "tanh", "relu")
SMOOTHING = 0.5  # EMA weight on the newest validation loss
PATH_ORDER = (GemmPath.FPROP, GemmPath.DGRAD, GemmPath.WGRAD)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    depth: int = 2  # number of hidden layers
    activation: str = "gelu"
    residual: bool = False
    init_scale: float = 1.0


@dataclass(frozen=True)
class OptimConfig:
    name: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9  # SGD momentum, or Adam beta1
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64


@dataclass(frozen=True)
class DivergenceConfig:
    blowup_factor: float = 3.0
    nan_abort: bool = True


@dataclass(frozen=True)
class LadderConfig:
    name: str = "baseline"
    mx_paths: tuple[str, ...] = ()
    stabilizer: str = "none"
    hadamard_size: int = 16
    baseline_numeric: str = "fp8"
    mx_numeric: str = "mxfp4"  # numeric of the paths in mx_paths; "exact" isolates the rotation
    act_layout: str = "row"
    weight_layout: str = "block"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    target_loss: float | None = None  # None: calibrate from the baseline
    target_fraction: float = 0.6
    max_steps: int = 2000
    eval_every: int = 20
    stop_at_target: bool = True
    quantize_head: bool = False  # output projection stays in baseline_numeric
    eval_numeric: str = "baseline"  # "baseline": score master weights; "run": row's Fprop numerics
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    seed: int = 0

    def __post_init__(self):
        validate(self)

    @property
    def paths(self) -> frozenset[GemmPath]:
        return frozenset(GemmPath(p) for p in self.mx_paths)

    @property
    def is_baseline(self) -> bool:
        return not self.mx_paths and self.stabilizer == "none"

    def shared_key(self) -> dict:
        """Settings every row of a ladder must agree on."""
        d = to_dict(self)
        for k in ("name", "mx_paths", "stabilizer", "hadamard_size"):
            d.pop(k)
        return d

    def replace(self, **kw) -> LadderConfig:
        return dataclasses.replace(self, **kw)


def validate(cfg: LadderConfig) -> None:
    for p in cfg.mx_paths:
        if p not in {g.value for g in GemmPath}:
            raise ConfigError(f"unknown GEMM path {p!r}")
    if len(set(cfg.mx_paths)) != len(cfg.mx_paths):
        raise ConfigError("duplicate GEMM path in mx_paths")
    if cfg.stabilizer not in STABILIZERS:
        raise ConfigError(f"unknown stabilizer {cfg.stabilizer!r}")
    if cfg.baseline_numeric not in ("exact", "fp8"):
        raise ConfigError("baseline_numeric must be 'exact' or 'fp8'")
    if cfg.mx_numeric not in ("mxfp4", "exact"):
        raise ConfigError("mx_numeric must be 'mxfp4' or 'exact'")
    for lay in (cfg.act_layout, cfg.weight_layout):
        QuantLayout(lay)
    m = cfg.model
    if m.depth < 1:
        raise ConfigError("model depth must be at least 1")
    if m.hidden < 1:
        raise ConfigError("hidden width must be positive")
    if m.activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {m.activation!r}")
    if cfg.eval_numeric not in ("baseline", "run"):
        raise ConfigError("eval_numeric must be 'baseline' or 'run'")
    if cfg.optim.name not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {cfg.optim.name!r}")
    if cfg.max_steps < 1 or cfg.eval_every < 1:
        raise ConfigError("max_steps and eval_every must be positive")
    if not 0 < cfg.target_fraction <= 1:
        raise ConfigError("target_fraction must lie in (0, 1]")
    if cfg.stabilizer.endswith("hadamard"):
        n = cfg.hadamard_size
        if n not in (16, 32):
            raise ConfigError(f"unsupported Hadamard size {n}")
        widths = [cfg.data.input_dim, m.hidden]
        if cfg.quantize_head:
            widths.append(cfg.data.vocab)
        axes = {
            GemmPath.FPROP: widths[:2],  # d_in of quantized layers
            GemmPath.DGRAD: widths[1:],  # d_out of quantized layers
            GemmPath.WGRAD: [cfg.optim.batch_size],  # tokens
        }
        for p in cfg.paths:
            for w in axes[p]:
                if w % n:
                    raise ConfigError(
                        f"{p.value} contraction width {w} is not a multiple of "
                        f"Hadamard size {n}"
                    )


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: LadderConfig) -> dict:
    return _plain(cfg)


def config_hash(cfg: LadderConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- seeding ---------------------------------------------------------------

_PURPOSES = {"init": 0, "data": 1, "sr": 2, "hadamard": 3}
_PATH_IDS = {GemmPath.FPROP: 0, GemmPath.DGRAD: 1, GemmPath.WGRAD: 2, None: 3}


@dataclass(frozen=True)
class SeedSchedule:
    """Counter-based sub-seeds: SeedSequence(master, spawn_key=(purpose, step, layer, path))."""

    master: int

    def sequence(self, purpose: str, step: int = 0, layer: int = 0, path=None):
        key = (_PURPOSES[purpose], step, layer, _PATH_IDS[path])
        return np.random.SeedSequence(self.master, spawn_key=key)

    def generator(self, purpose: str, step: int = 0, layer: int = 0, path=None):
        return np.random.Generator(np.random.PCG64(self.sequence(purpose, step, layer, path)))

    def int_seed(self, purpose: str, step: int = 0, layer: int = 0, path=None) -> int:
        return int(self.sequence(purpose, step, layer, path).generate_state(1)[0])


# --- model -------------------------------------------------------------------


@dataclass
class ModelState:
    weights: list[np.ndarray]  # [d_out, d_in]
    biases: list[np.ndarray]
    m: list[np.ndarray]  # first moments, weights then biases
    v: list[np.ndarray]
    step: int = 0

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def layer_dims(cfg: LadderConfig) -> list[tuple[int, int]]:
    """(d_in, d_out) of every linear layer."""
    m = cfg.model
    widths = [cfg.data.input_dim] + [m.hidden] * m.depth + [cfg.data.vocab]
    return list(zip(widths[:-1], widths[1:]))


def parameter_count(cfg: LadderConfig) -> int:
    return sum(i * o + o for i, o in layer_dims(cfg))


def build_model(cfg: LadderConfig) -> ModelState:
    if cfg.model.depth < 1:
        raise ConfigError("model depth must be at least 1")
    rng = SeedSchedule(cfg.seed).generator("init")
    weights, biases = [], []
    for d_in, d_out in layer_dims(cfg):
        std = cfg.model.init_scale / math.sqrt(d_in)
        weights.append(rng.normal(0.0, std, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    params = weights + biases
    return ModelState(
        weights, biases, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params]
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z * z * z)))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z2)


def path_configs(cfg: LadderConfig, step: int, layer: int, sched: SeedSchedule) -> dict:
    """The PathConfig each GEMM of ``layer`` uses at ``step``."""
    base = PathConfig(Numeric(cfg.baseline_numeric))
    if layer == cfg.model.depth and not cfg.quantize_head:
        return {p: base for p in PATH_ORDER}
    layouts = {
        GemmPath.FPROP: (QuantLayout(cfg.act_layout), QuantLayout(cfg.weight_layout)),
        GemmPath.DGRAD: (QuantLayout(cfg.act_layout), QuantLayout(cfg.weight_layout)),
        GemmPath.WGRAD: (QuantLayout(cfg.act_layout), QuantLayout(cfg.act_layout)),
    }
    had = None
    if cfg.stabilizer == "deterministic_hadamard":
        had = HadamardSpec(cfg.hadamard_size)
    elif cfg.stabilizer == "randomized_hadamard":
        # one sign diagonal per (step, layer), shared by all three paths
        had = HadamardSpec(cfg.hadamard_size, True, sched.int_seed("hadamard", step, layer))
    rounding = (
        Rounding.STOCHASTIC if cfg.stabilizer == "stochastic_rounding" else Rounding.NEAREST_EVEN
    )
    out = {}
    for p in PATH_ORDER:
        if p in cfg.paths:
            out[p] = PathConfig(Numeric(cfg.mx_numeric), had, rounding, layouts[p])
        else:
            out[p] = base
    return out


def _rng_for(pc: PathConfig, sched, step, layer, path):
    if pc.numeric is Numeric.MXFP4 and pc.rounding is Rounding.STOCHASTIC:
        return sched.generator("sr", step, layer, path)
    return None


def forward(state: ModelState, x, cfg: LadderConfig, pcs: list[dict], sched=None, step=0):
    """Returns logits and the per-layer cache (input, pre-activation)."""
    a = x
    cache = []
    n = len(state.weights)
    for l, (w, b) in enumerate(zip(state.weights, state.biases)):
        pc = pcs[l][GemmPath.FPROP]
        z = fprop(a, w, pc, _rng_for(pc, sched, step, l, GemmPath.FPROP)) + b
        cache.append((a, z))
        if l < n - 1:
            h = _act(cfg.model.activation, z)
            a = a + h if cfg.model.residual and a.shape == h.shape else h
        else:
            a = z
    return a, cache


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.size
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def backward(state: ModelState, cache, dlogits, cfg, pcs, sched=None, step=0):
    """Gradients of every weight and bias; the input layer's Dgrad is skipped."""
    n = len(state.weights)
    gw: list = [None] * n
    gb: list = [None] * n
    da = None
    for l in reversed(range(n)):
        a_in, z = cache[l]
        dz = dlogits if l == n - 1 else da * _act_grad(cfg.model.activation, z)
        pw = pcs[l][GemmPath.WGRAD]
        gw[l] = wgrad(dz, a_in, pw, _rng_for(pw, sched, step, l, GemmPath.WGRAD))
        gb[l] = dz.sum(axis=0)
        if l == 0:
            break
        pd = pcs[l][GemmPath.DGRAD]
        da_in = dgrad(dz, state.weights[l], pd, _rng_for(pd, sched, step, l, GemmPath.DGRAD))
        if cfg.model.residual and l < n - 1 and a_in.shape == z.shape:
            da_in = da_in + da
        da = da_in
    return gw, gb


def loss_and_grads(state, x, y, cfg, pcs, sched=None, step=0):
    logits, cache = forward(state, x, cfg, pcs, sched, step)
    loss, dlogits = cross_entropy(logits, y)
    gw, gb = backward(state, cache, dlogits, cfg, pcs, sched, step)
    return loss, gw, gb


def _update(state: ModelState, grads: list[np.ndarray], opt: OptimConfig) -> ModelState:
    t = state.step + 1
    params = state.params()
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if opt.name == "sgd":
            m = opt.momentum * m + g
            p = p - opt.lr * m
        else:
            m = opt.momentum * m + (1 - opt.momentum) * g
            v = opt.beta2 * v + (1 - opt.beta2) * g * g
            mhat = m / (1 - opt.momentum**t)
            vhat = v / (1 - opt.beta2**t)
            p = p - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    k = len(state.weights)
    return ModelState(new_p[:k], new_p[k:], new_m, new_v, t)


def train_step(state: ModelState, batch, cfg: LadderConfig, sched: SeedSchedule | None = None):
    """One optimizer step; returns the new state and a metrics dict.

    A non-finite loss (or a non-finite operand reaching a quantizer) is
    reported as ``metrics["nonfinite"]`` and leaves the parameters unchanged.
    """
    sched = sched or SeedSchedule(cfg.seed)
    step = state.step
    x, y = batch
    pcs = [path_configs(cfg, step, l, sched) for l in range(len(state.weights))]
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            loss, gw, gb = loss_and_grads(state, x, y, cfg, pcs, sched, step)
        except InvalidInput:
            loss = float("nan")
    if not math.isfinite(loss):
        return dataclasses.replace(state, step=step + 1), {"loss": loss, "nonfinite": True}
    grads = gw + gb
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    new_state = _update(state, grads, cfg.optim)
    return new_state, {"loss": loss, "grad_norm": gnorm, "nonfinite": False}


def evaluate(state: ModelState, cfg: LadderConfig, corpus: MarkovCorpus, sched: SeedSchedule) -> float:
    """Validation loss of the current master weights.

    With ``eval_numeric == "baseline"`` every layer runs in baseline numerics
    so rows differ only in how well they trained; ``"run"`` scores through
    the row's own Fprop numerics (nearest rounding).
    """
    if cfg.eval_numeric == "baseline":
        cfg = cfg.replace(mx_paths=(), stabilizer="none")
    pcs = []
    for l in range(len(state.weights)):
        pc = path_configs(cfg, state.step, l, sched)
        pcs.append({p: dataclasses.replace(c, rounding=Rounding.NEAREST_EVEN) for p, c in pc.items()})
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            logits, _ = forward(state, corpus.val_x, cfg, pcs)
        except InvalidInput:
            return float("nan")
        return cross_entropy(logits, corpus.val_y)[0]


@lru_cache(maxsize=4)
def get_corpus(data: DataConfig) -> MarkovCorpus:
    return MarkovCorpus(data)


# --- runs and verdicts -------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    converged: bool
    step: int | None = None
    reason: str | None = None  # "nan", "blowup" or "timeout" when not converged


def smoothed(values) -> list[float]:
    out = []
    s = None
    for v in values:
        s = v if s is None else SMOOTHING * v + (1 - SMOOTHING) * s
        out.append(s)
    return out


def detect_divergence(loss_curve, cfg: LadderConfig, target: float | None = None) -> Verdict:
    """Classify a (step, train_loss, val_loss) curve against the target.

    Diverged on any non-finite loss or a validation loss above
    ``blowup_factor`` times the first one; otherwise converged at the first
    step whose smoothed validation loss reaches the target, or timed out.
    """
    if not loss_curve:
        raise ValueError("empty loss curve")
    target = cfg.target_loss if target is None else target
    initial = loss_curve[0][2]
    s = None
    for step, train_loss, val in loss_curve:
        if not (math.isfinite(val) and math.isfinite(train_loss)):
            return Verdict(False, step, "nan")
        if val > cfg.divergence.blowup_factor * initial:
            return Verdict(False, step, "blowup")
        s = val if s is None else SMOOTHING * val + (1 - SMOOTHING) * s
        if target is not None and s <= target:
            return Verdict(True, step)
    return Verdict(False, loss_curve[-1][0], "timeout")


@dataclass
class RunResult:
    name: str
    config_hash: str
    steps_to_target: int | None  # None: did not converge
    loss_curve: list[tuple[int, float, float]]
    target_loss: float | None
    diverged: bool
    reason: str | None
    overhead_vs_baseline: float | None = None

    @property
    def converged(self) -> bool:
        return self.steps_to_target is not None


def train_run(cfg: LadderConfig, target: float | None = None, until_step: int | None = None):
    """Train one config, logging validation loss every ``eval_every`` steps.

    Stops at ``until_step``, on divergence, or (with ``stop_at_target``)
    once the smoothed validation loss reaches ``target``.
    """
    sched = SeedSchedule(cfg.seed)
    corpus = get_corpus(cfg.data)
    state = build_model(cfg)
    data_rng = sched.generator("data")
    last = cfg.max_steps if until_step is None else min(until_step, cfg.max_steps)
    curve = [(0, float("nan"), evaluate(state, cfg, corpus, sched))]
    curve[0] = (0, curve[0][2], curve[0][2])
    window = []
    for step in range(1, last + 1):
        state, metrics = train_step(state, corpus.batch(data_rng, cfg.optim.batch_size), cfg, sched)
        window.append(metrics["loss"])
        if metrics["nonfinite"] and cfg.divergence.nan_abort:
            curve.append((step, float("nan"), float("nan")))
            break
        if step % cfg.eval_every == 0 or step == last:
            curve.append((step, float(np.mean(window)), evaluate(state, cfg, corpus, sched)))
            window = []
            v = detect_divergence(curve, cfg, target)
            if not v.converged and v.reason in ("nan", "blowup"):
                break
            if v.converged and cfg.stop_at_target and target is not None:
                break
    return curve, state


def run_single(cfg: LadderConfig, target: float | None = None) -> RunResult:
    target = cfg.target_loss if target is None else target
    if target is None:
        raise ConfigError("run needs a target loss (or use run_ladder to calibrate one)")
    curve, _ = train_run(cfg, target)
    return _result(cfg, curve, target)


def _result(cfg, curve, target) -> RunResult:
    v = detect_divergence(curve, cfg, target)
    return RunResult(
        name=cfg.name,
        config_hash=config_hash(cfg),
        steps_to_target=v.step if v.converged else None,
        loss_curve=curve,
        target_loss=target,
        diverged=v.reason in ("nan", "blowup"),
        reason=v.reason,
    )


def calibrate_baseline(cfg: LadderConfig) -> RunResult:
    """Run the baseline and fix the target at its smoothed loss at target_fraction."""
    if cfg.target_loss is not None:
        return run_single(cfg)
    grid = cfg.eval_every
    at = max(grid, int(round(cfg.target_fraction * cfg.max_steps / grid)) * grid)
    curve, _ = train_run(cfg, None, until_step=at)
    v = detect_divergence(curve, cfg, None)
    if v.reason in ("nan", "blowup"):
        raise RuntimeError(f"baseline diverged ({v.reason}); cannot calibrate a target")
    steps = [c[0] for c in curve]
    target = smoothed([c[2] for c in curve])[steps.index(at)]
    return _result(cfg, curve, target)


def _check_shared(configs) -> None:
    ref = configs[0].shared_key()
    for c in configs[1:]:
        other = c.shared_key()
        if other != ref:
            diff = sorted(k for k in ref if ref[k] != other.get(k))
            raise ConfigError(f"row {c.name!r} differs from the ladder in shared settings: {diff}")


def _run_with_target(args):
    cfg, target = args
    return run_single(cfg, target)


def run_ladder(configs, jobs: int = 1) -> list[RunResult]:
    """Run the baseline row first, then every other row against its target.

    Results come back in input order with ``overhead_vs_baseline`` set to
    steps / baseline_steps - 1 (None for rows that did not converge).
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("empty ladder")
    _check_shared(configs)
    base_idx = [i for i, c in enumerate(configs) if c.is_baseline]
    if not base_idx:
        raise ConfigError("ladder has no baseline row (empty mx_paths, stabilizer none)")
    base = calibrate_baseline(configs[base_idx[0]])
    target = base.target_loss
    rest = [(i, c) for i, c in enumerate(configs) if i != base_idx[0]]
    work = [(c, target) for _, c in rest]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_with_target, work))
    else:
        done = [_run_with_target(w) for w in work]
    results: list = [None] * len(configs)
    results[base_idx[0]] = base
    for (i, _), r in zip(rest, done):
        results[i] = r
    for r in results:
        if r.converged and base.converged:
            r.overhead_vs_baseline = r.steps_to_target / base.steps_to_target - 1.0
    return results


# --- artifacts ---------------------------------------------------------------


def curve_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "train_loss", "val_loss"])
    for step, tl, vl in result.loss_curve:
        w.writerow([step, repr(float(tl)), repr(float(vl))])
    return buf.getvalue()


def run_summary(result: RunResult, cfg: LadderConfig) -> dict:
    return {
        "name": result.name,
        "config_hash": result.config_hash,
        "mx_paths": list(cfg.mx_paths),
        "stabilizer": cfg.stabilizer,
        "hadamard": hadamard_label(cfg),
        "target_loss": result.target_loss,
        "steps_to_target": result.steps_to_target,
        "overhead": result.overhead_vs_baseline,
        "converged": result.converged,
        "diverged": result.diverged,
        "reason": result.reason,
        "final_val_loss": _json_float(result.loss_curve[-1][2]),
        "steps_run": result.loss_curve[-1][0],
    }


def _json_float(v: float):
    return v if math.isfinite(v) else None


def hadamard_label(cfg: LadderConfig) -> str:
    if cfg.stabilizer == "deterministic_hadamard":
        return f"H{cfg.hadamard_size}"
    if cfg.stabilizer == "randomized_hadamard":
        return f"H{cfg.hadamard_size} (rand)"
    return "--"
