"""Training loop, evaluation, head-pruning sweeps and metric analysis."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint
from . import tensor as nt
from .attention import HeadMask
from .errors import CheckpointFormatError, ConfigError, MetricError, NonFiniteError, TrainingDivergedError
from .metrics import (
    MetricsReport,
    cross_layer_similarity,
    default_window,
    head_similarity,
    localness,
    token_correlation,
    ur,
)
from .model import EVAL, Mode, ModelConfig, ParamStore, Trace, build, model_forward, param_shapes
from .tasks import TaskKind, TaskSpec, generate
from .tensor import Tensor

log = logging.getLogger(__name__)

# rng stream ids
TRAIN_STREAM, EVAL_STREAM, ANALYZE_STREAM = 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr_max: float = 3e-3
    warmup_steps: int = 400
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    label_smoothing: float = 0.1
    grad_clip: float | None = 1.0
    seed: int = 0
    eval_every: int = 500
    checkpoint: str = "checkpoint.emha"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


def lr_at(step: int, lr_max: float, warmup: int) -> float:
    """Inverse-square-root schedule with linear warmup; ``step`` starts at 1."""
    step = max(step, 1)
    return lr_max * min(step / warmup, math.sqrt(warmup / step))


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, smoothing: float) -> Tensor:
    """Mean over tokens of -sum_v q_v log p_v with q = (1-e) onehot + e/V."""
    V = logits.shape[-1]
    targets = np.asarray(targets)
    logp = nt.log_softmax_rows(logits)
    q = np.full(logp.shape, smoothing / V, dtype=logp.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / V, axis=-1)
    return nt.scale(nt.sum(nt.mul(logp, q)), -1.0 / targets.size)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()
                          if p.grad is not None))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype, copy=False)
    return total


@dataclass
class TrainResult:
    params: ParamStore
    log: list[tuple[int, float, float, float]] = field(default_factory=list)
    evals: list[tuple[int, dict]] = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _fmt(v: float) -> str:
    return repr(float(v))


def _layer_stats(params: Mapping[str, Tensor]) -> dict:
    return {k: {"norm": float(np.linalg.norm(p.data)), "max_abs": float(np.abs(p.data).max())}
            for k, p in params.items()}


def train(model_config: ModelConfig, task: TaskSpec, train_config: TrainConfig,
          out_dir: str | os.PathLike | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train from scratch; writes ``train.csv`` and the checkpoint under ``out_dir``."""
    tc = train_config
    dtype = np.dtype(tc.dtype)
    params = build(model_config, tc.seed, dtype)
    opt = Adam(params, tc.betas, tc.eps)
    result = TrainResult(params)

    csv_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.log_path = out / "train.csv"
        csv_fh = open(result.log_path, "w", newline="")
        csv_fh.write("step,lr,loss,acc\n")

    try:
        for step in range(1, tc.steps + 1):
            x, y = generate(task, (tc.seed, TRAIN_STREAM, step), tc.batch_size)
            lr = lr_at(step, tc.lr_max, tc.warmup_steps)
            try:
                with nt.Tape() as tape:
                    logits = model_forward(x, params, model_config, Mode(True, tc.seed, step))
                    loss = label_smoothed_ce(logits, y, tc.label_smoothing)
                for p in params.values():
                    p.grad = None
                tape.backward(loss)
            except NonFiniteError as exc:
                dump = {"step": step, "inputs": x.tolist(), "targets": y.tolist(),
                        "layer_stats": _layer_stats(params)}
                if out_dir is not None:
                    with open(Path(out_dir) / "diverged.json", "w") as fh:
                        json.dump(dump, fh)
                raise TrainingDivergedError(f"non-finite value at step {step}: {exc}", dump) from exc
            if tc.grad_clip:
                clip_grad_norm(params, tc.grad_clip)
            opt.step(lr)
            acc = float((logits.data.argmax(axis=-1) == y).mean())
            row = (step, lr, loss.item(), acc)
            result.log.append(row)
            if csv_fh is not None:
                csv_fh.write(",".join([str(step), _fmt(lr), _fmt(row[2]), _fmt(acc)]) + "\n")
            if on_step is not None:
                on_step(step, row[2])
            if tc.eval_every and step % tc.eval_every == 0:
                res = evaluate(params, model_config, task)
                result.evals.append((step, res))
                log.info("step %d loss %.4f eval %s", step, row[2], res)
    finally:
        if csv_fh is not None:
            csv_fh.close()

    if out_dir is not None:
        result.checkpoint_path = Path(out_dir) / tc.checkpoint
        checkpoint.save(result.checkpoint_path, params)
    return result


def _resolve_params(params_or_path, model_config: ModelConfig) -> Mapping[str, Tensor]:
    if not isinstance(params_or_path, (str, os.PathLike)):
        return params_or_path
    params = checkpoint.load(params_or_path, requires_grad=False)
    expected = param_shapes(model_config)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise CheckpointFormatError(f"{params_or_path}: tensors do not match the model config "
                                    f"(missing {missing[:3]}, unexpected {extra[:3]})")
    return params


def predict_logits(params: Mapping[str, Tensor], model_config: ModelConfig, x: np.ndarray,
                   head_mask=None, chunk: int = 128) -> np.ndarray:
    out = []
    for i in range(0, len(x), chunk):
        out.append(model_forward(x[i:i + chunk], params, model_config, EVAL, head_mask).data)
    return np.concatenate(out, axis=0)


def evaluate(checkpoint_or_params, model_config: ModelConfig, task: TaskSpec, split_seed: int = 1234,
             n: int = 512, head_mask=None,
             predictor: Callable[[np.ndarray], np.ndarray] | None = None) -> dict:
    """Eval-mode token accuracy and per-token NLL on freshly generated data."""
    x, y = generate(task, (split_seed, EVAL_STREAM), n)
    if predictor is None:
        params = _resolve_params(checkpoint_or_params, model_config)
        logits = predict_logits(params, model_config, x, head_mask)
    else:
        logits = np.asarray(predictor(x), dtype=np.float64)
    logits = logits.astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = float(-np.take_along_axis(logp, y[..., None], axis=-1).mean())
    res = {"token_accuracy": float((logits.argmax(axis=-1) == y).mean()), "nll": nll}
    if task.kind is TaskKind.MARKOV_LM:
        res["entropy_floor"] = task.entropy
    return res


def primary_metric(task: TaskSpec) -> str:
    return "token_accuracy" if task.kind is TaskKind.REVERSAL else "nll"


def heads_for_ratio(ratio: float, M: int) -> int:
    if ratio < 0 or ratio > 1:
        raise ConfigError(f"prune ratio must lie in [0, 1], got {ratio}")
    k = ratio * M
    if abs(k - round(k)) > 1e-9:
        raise ConfigError(f"prune ratio {ratio} is not a multiple of 1/{M}")
    return int(math.ceil(round(k, 9)))


def prune_sweep(checkpoint_or_params, model_config: ModelConfig, task: TaskSpec, ratios: Sequence[float],
                split_seed: int = 1234, n: int = 512, out_dir=None) -> list[dict]:
    """Zero the first ceil(ratio*M) heads of every layer and re-evaluate."""
    M = model_config.attn.M
    counts = [heads_for_ratio(r, M) for r in ratios]
    params = _resolve_params(checkpoint_or_params, model_config)
    metric = primary_metric(task)
    rows = []
    for ratio, k in zip(ratios, counts):
        mask = HeadMask.prune_first(M, k) if k else None
        res = evaluate(params, model_config, task, split_seed, n, head_mask=mask)
        rows.append({"ratio": float(ratio), "heads_pruned": k, "metric": metric, "value": res[metric]})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "prune.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ratio", "heads_pruned", "metric", "value"])
            for r in rows:
                w.writerow([repr(r["ratio"]), r["heads_pruned"], r["metric"], repr(r["value"])])
    return rows


def config_hash(model_config: ModelConfig) -> str:
    from .config import model_to_dict

    blob = json.dumps(model_to_dict(model_config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def report_from_trace(trace: Trace, T: int, metadata: dict | None = None) -> MetricsReport:
    """Per-layer metrics from captured attention maps and hidden states."""
    if not trace.hidden:
        raise MetricError("trace holds no layers")
    w = default_window(T)
    cls = cross_layer_similarity(trace.hidden)
    layers = []
    for l, maps in enumerate(trace.attn_maps):
        entry = {"layer": l + 1}
        samples = maps if maps.ndim == 4 else maps[None]
        entry["head_similarity"] = _guard(lambda: head_similarity(samples)) if samples.shape[1] >= 2 else None
        entry["token_correlation"] = _guard(lambda: token_correlation(trace.hidden[l]))
        entry["localness"] = localness(samples, w)
        entry["ur_attn"] = _guard(lambda: ur(*trace.ur_attn[l]))
        entry["ur_ffn"] = _guard(lambda: ur(*trace.ur_ffn[l]))
        entry["cross_layer_similarity"] = cls[l]
        layers.append(entry)
    meta = dict(metadata or {})
    meta.setdefault("window", w)
    return MetricsReport(layers=layers, metadata=meta)


def _guard(fn):
    try:
        return fn()
    except MetricError as exc:
        log.warning("metric undefined: %s", exc)
        return None


def analyze(checkpoint_or_params, model_config: ModelConfig, task: TaskSpec, seed: int = 0, n: int = 64,
            out_dir=None) -> MetricsReport:
    """Run a fixed eval batch with capture hooks and compute the metric suite."""
    params = _resolve_params(checkpoint_or_params, model_config)
    x, _ = generate(task, (seed, ANALYZE_STREAM), n)
    trace = Trace()
    model_forward(x, params, model_config, EVAL, trace=trace)
    meta = {
        "config_hash": config_hash(model_config),
        "seed": seed,
        "dataset_id": f"{task.kind.value}-V{task.vocab_size}-T{task.seq_len}-s{seed}-n{n}",
        "variant": model_config.attn.variant.value,
    }
    report = report_from_trace(trace, task.seq_len, meta)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json())
        (out / "metrics.csv").write_text(report.to_csv())
    return report
