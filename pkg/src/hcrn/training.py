"""Training, evaluation, checkpoints and the metrics stream.

Step rule (Adam with bias correction)::

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    p <- p - lr * (m / (1 - b1^s)) / (sqrt(v / (1 - b2^s)) + eps)

The learning rate is ``lr * lr_decay ** ((epoch - 1) // decay_every)`` for
1-based epochs.  Gradients are clipped to global norm ``clip_norm`` before the
step; every clipped step is counted and reported in the metrics stream.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import serialization
from .decoders import (
    AnswerSpace,
    count_predict,
    init_head_params,
    loss,
    multichoice_scores,
    openended_logits,
    round_count,
)
from .model import HierarchyConfig, PlanSource, VideoBatch, forward, forward_candidates, init_hierarchy_params
from .params import ModelParams
from .synthetic import Dataset, DataSpec, build_vocab, generate, load_dataset, n_classes
from .tensor import Tensor, backward, no_grad, set_default_dtype

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class RunConfig:
    # task / data
    task: str = "transition"
    answer_format: str = "openended"
    dataset: str = ""  # directory written by gen-data; empty means generate in memory
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    noise_sigma: float = 0.1
    min_segment: int = 8
    data_seed: int = 0
    n_actions: int = 4
    n_attributes: int = 4
    count_lo: int = 1
    count_hi: int = 5
    # model
    levels: str = "2"
    n_clips: int = 8
    clip_len: int = 16
    d: int = 64
    d_in: int = 32
    t: int = 2
    k_max: str = "n-1"
    n_subvideos: int = 4
    gate_question: bool = True
    gate_motion: bool = False
    clip_motion: bool = True
    video_motion: bool = True
    clip_question: bool = True
    video_question: bool = True
    embed_dim: int = 0
    resample_plans: bool = True
    # optimisation
    lr: float = 1e-4
    lr_decay: float = 0.5
    decay_every: int = 10
    epochs: int = 25
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    dtype: str = "float64"
    # bookkeeping
    seed: int = 0
    eval_seed: int = 1234
    out_dir: str = "runs/default"

    def data_spec(self) -> DataSpec:
        return DataSpec(
            task=self.task,
            n_clips=self.n_clips,
            clip_len=self.clip_len,
            d_in=self.d_in,
            n_actions=self.n_actions,
            n_attributes=self.n_attributes,
            count_lo=self.count_lo,
            count_hi=self.count_hi,
            noise_sigma=self.noise_sigma,
            min_segment=self.min_segment,
            answer_format=self.answer_format,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            seed=self.data_seed,
        )

    def hierarchy(self, vocab_size: int) -> HierarchyConfig:
        return HierarchyConfig(
            n_clips=self.n_clips,
            clip_len=self.clip_len,
            d=self.d,
            d_in=self.d_in,
            t=self.t,
            k_max=self.k_max,
            levels=self.levels,
            n_subvideos=self.n_subvideos,
            gate_question=self.gate_question,
            gate_motion=self.gate_motion,
            clip_motion=self.clip_motion,
            video_motion=self.video_motion,
            clip_question=self.clip_question,
            video_question=self.video_question,
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
        )

    def answer_space(self) -> AnswerSpace:
        if self.task == "count":
            return AnswerSpace("count", lo=self.count_lo, hi=self.count_hi)
        if self.answer_format == "multichoice":
            return AnswerSpace("multichoice")
        return AnswerSpace("openended", n_labels=n_classes(self.data_spec()))

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_every)


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------


def _coerce(name: str, kind, raw: str):
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_flat(text: str, target) -> dict:
    """Parse ``key = value`` lines against the fields of dataclass ``target``."""
    types = {f.name: f.type for f in fields(target)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return values


def load_config(path, **overrides) -> RunConfig:
    values = parse_flat(Path(path).read_text(), RunConfig)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def dump_flat(obj) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in asdict(obj).items())


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = 0

    def step(self, lr: float) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.steps, 1 - b2**self.steps
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_gradients(params: ModelParams, max_norm: float) -> tuple[float, bool]:
    """Scale gradients to global norm ``max_norm``; return the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
        return norm, True
    return norm, False


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


@dataclass
class Model:
    hierarchy: HierarchyConfig
    space: AnswerSpace
    params: ModelParams

    def predict(self, batch: VideoBatch, plans: PlanSource) -> Tensor:
        """Logits ``(B, |A|)``, raw counts ``(B,)`` or candidate scores ``(B, C)``."""
        if self.space.kind == "multichoice":
            o_q, q, o_a, a = forward_candidates(batch, self.params, self.hierarchy, plans)
            return multichoice_scores(o_q, q, o_a, a, self.params)
        pooled, q = forward(batch, self.params, self.hierarchy, plans)
        if self.space.kind == "count":
            return count_predict(pooled.pooled, q, self.params)[0]
        return openended_logits(pooled.pooled, q, self.params)


def build_model(config: RunConfig, vocab_size: int, seed: int | None = None) -> Model:
    hier = config.hierarchy(vocab_size)
    space = config.answer_space()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed if seed is None else seed, spawn_key=(0,)))
    params = ModelParams()
    init_hierarchy_params(params, hier, rng)
    init_head_params(params, space, hier.d, rng)
    return Model(hier, space, params)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def evaluate(model: Model, dataset: Dataset, eval_seed: int = 1234, batch_size: int = 32) -> dict[str, float]:
    """Accuracy for classification, MSE of rounded counts for the count task.

    Plans are frozen from ``eval_seed`` so repeated evaluation is deterministic.
    """
    plans = PlanSource(model.hierarchy, eval_seed, resample=False)
    space = model.space
    hits, sq_err, n = 0.0, 0.0, 0
    with no_grad():
        for idx in _batches(len(dataset), batch_size):
            batch = dataset.batch(idx)
            pred = model.predict(batch, plans).data
            if space.kind == "count":
                rounded = round_count(pred, space.lo, space.hi)
                sq_err += float(np.sum((rounded - batch.answer) ** 2))
            else:
                hits += float(np.sum(pred.argmax(axis=-1) == batch.answer))
            n += len(idx)
    if n == 0:
        return {}
    if space.kind == "count":
        return {"mse": sq_err / n}
    return {"accuracy": hits / n}


def score(metrics: Mapping[str, float]) -> float:
    """Larger is better."""
    return -metrics["mse"] if "mse" in metrics else metrics["accuracy"]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_VERSION_KEY = "__checkpoint_version__"
_CONFIG_KEY = "__config__"


def checkpoint_bytes(params: ModelParams, config: RunConfig | None = None) -> bytes:
    arrays = dict(params.arrays())
    arrays[_VERSION_KEY] = np.asarray([CHECKPOINT_VERSION], dtype=np.int64)
    meta = json.dumps(asdict(config) if config else {}, sort_keys=True).encode()
    arrays[_CONFIG_KEY] = np.frombuffer(meta, dtype=np.uint8).astype(np.int64)
    return serialization.dumps(arrays)


def save_checkpoint(path, params: ModelParams, config: RunConfig | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(params, config))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], RunConfig | None]:
    arrays = serialization.load(path)
    version = arrays.pop(_VERSION_KEY, None)
    if version is None or int(version[0]) != CHECKPOINT_VERSION:
        found = None if version is None else int(version[0])
        raise CheckpointMismatch(f"checkpoint version {found} != supported {CHECKPOINT_VERSION}")
    raw = arrays.pop(_CONFIG_KEY, np.zeros(0, dtype=np.int64))
    meta = json.loads(raw.astype(np.uint8).tobytes() or b"{}")
    return arrays, (RunConfig(**meta) if meta else None)


def load_into(params: ModelParams, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy ``arrays`` into ``params``; names and shapes must match exactly."""
    expected = params.shape_map()
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks tensors: {missing}")
    if extra:
        raise CheckpointMismatch(f"checkpoint has tensors this model does not use: {extra}")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointMismatch(f"tensor {name!r}: checkpoint shape {arrays[name].shape} != model shape {shape}")
    for name in expected:
        params[name].data = np.array(arrays[name], dtype=params[name].dtype)


def load_checkpoint(path, params: ModelParams) -> RunConfig | None:
    arrays, config = read_checkpoint(path)
    load_into(params, arrays)
    return config


# ---------------------------------------------------------------------------
# metrics stream
# ---------------------------------------------------------------------------


class MetricsLog:
    """Append-only JSON-lines log of evaluation events."""

    def __init__(self, path, task: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.task = task
        self.t0 = time.perf_counter()
        self.records: list[dict] = []

    def emit(self, epoch: int, split: str, metric: str, value: float) -> None:
        rec = {
            "epoch": epoch,
            "split": split,
            "task": self.task,
            "metric": metric,
            "value": float(value),
            "wallclock": round(time.perf_counter() - self.t0, 6),
        }
        self.records.append(rec)
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")


def read_metrics(path, drop_wallclock: bool = False) -> list[dict]:
    out = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if drop_wallclock:
        for rec in out:
            rec.pop("wallclock", None)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_val: dict[str, float]
    test: dict[str, float]
    best_epoch: int
    checkpoint: Path
    metrics_path: Path
    model: Model


def load_or_generate(config: RunConfig) -> dict[str, Dataset]:
    if config.dataset:
        return load_dataset(config.dataset)
    return generate(config.data_spec())


def train(config: RunConfig, datasets: dict[str, Dataset] | None = None, log_every: int = 0) -> TrainResult:
    set_default_dtype(np.dtype(config.dtype))
    try:
        return _train(config, datasets, log_every)
    finally:
        set_default_dtype(np.float64)


def _train(config: RunConfig, datasets, log_every: int) -> TrainResult:
    datasets = datasets or load_or_generate(config)
    train_ds, val_ds = datasets["train"], datasets["val"]
    test_ds = datasets.get("test")
    vocab = train_ds.vocab or build_vocab(train_ds.spec)
    model = build_model(config, len(vocab))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_flat(config))
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    log = MetricsLog(metrics_path, config.task)
    best_path = out / "best.ckpt"

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    plan_seed = int(np.random.SeedSequence(config.seed, spawn_key=(2,)).generate_state(1)[0])
    plans = PlanSource(model.hierarchy, plan_seed, resample=config.resample_plans)
    opt = Adam(model.params, config.beta1, config.beta2, config.adam_eps)

    def validate(epoch: int) -> dict[str, float]:
        metrics = evaluate(model, val_ds, config.eval_seed, max(config.batch_size, 32))
        for name, value in metrics.items():
            log.emit(epoch, "val", name, value)
        return metrics

    best = validate(0)
    best_epoch = 0
    save_checkpoint(best_path, model.params, config)

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train_ds))
        total, clipped, steps = 0.0, 0, 0
        for idx in (order[s : s + config.batch_size] for s in range(0, len(order), config.batch_size)):
            batch = train_ds.batch(idx)
            model.params.zero_grad()
            value = loss(model.space.kind, model.predict(batch, plans), batch.answer)
            if not np.isfinite(value.data).all():
                raise TrainingAborted(
                    f"non-finite loss {float(value.data)} at epoch {epoch}, step {steps + 1} (lr={lr:g})"
                )
            backward(value, list(model.params.values()))
            _, was_clipped = clip_gradients(model.params, config.clip_norm)
            clipped += was_clipped
            opt.step(lr)
            total += float(value.data)
            steps += 1
            if log_every and steps % log_every == 0:
                print(f"epoch {epoch} step {steps} loss {total / steps:.4f}", flush=True)
        log.emit(epoch, "train", "loss", total / max(steps, 1))
        log.emit(epoch, "train", "lr", lr)
        if clipped:
            log.emit(epoch, "train", "clipped_steps", clipped)
        current = validate(epoch)
        if score(current) > score(best):
            best, best_epoch = current, epoch
            save_checkpoint(best_path, model.params, config)

    load_checkpoint(best_path, model.params)
    test_metrics = {}
    if test_ds is not None and len(test_ds) and config.epochs > 0:
        test_metrics = evaluate(model, test_ds, config.eval_seed, max(config.batch_size, 32))
        for name, value in test_metrics.items():
            log.emit(best_epoch, "test", name, value)
    return TrainResult(best, test_metrics, best_epoch, best_path, metrics_path, model)


def evaluate_checkpoint(path, dataset_dir, split: str = "test") -> dict[str, float]:
    """Rebuild the model stored in ``path`` and score it on a saved dataset."""
    arrays, config = read_checkpoint(path)
    if config is None:
        raise CheckpointMismatch("checkpoint carries no run configuration")
    datasets = load_dataset(dataset_dir)
    ds = datasets[split]
    model = build_model(config, len(ds.vocab))
    load_into(model.params, arrays)
    return evaluate(model, ds, config.eval_seed)
