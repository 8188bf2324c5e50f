"""Run configuration, training loop, evaluation and model persistence."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .arch import DecoderConfig, ModelGraph, build_model, get_profile, tiny_profile
from .data import SCALES, Sample, augment, load_samples, synth_generate
from .loss import LossConfig, edge_weight_alpha, weighted_bce
from .metrics import MetricReport, metric_report
from .optim import Adam
from .tensor import Tensor, backward, no_grad, reset_graph


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    backbone: str = "tiny"
    widths: tuple = (8, 16, 32, 64, 128)
    r: int = 2
    pcsp_count: int = 4
    ppm: bool = True
    fusion: str = "sum"
    input_size: int = 64
    seed: int = 0
    epochs: int = 30
    lr: float = 1e-3
    lr_drop_epoch: Optional[int] = None   # default: round(0.8 * epochs)
    batch_size: int = 1
    augment: bool = True
    flip: bool = True
    scales: tuple = SCALES
    gamma: float = 3.0
    delta: int = 10
    eps: float = 1e-6
    # data: either directories or a synthetic set
    train_images: Optional[str] = None
    train_masks: Optional[str] = None
    val_images: Optional[str] = None
    val_masks: Optional[str] = None
    synth_n: int = 500
    synth_val_n: int = 100
    synth_seed: int = 0
    model: Optional[str] = None
    report: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.scales:
            raise ValueError("scale set must not be empty")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        self.widths = tuple(int(w) for w in self.widths)
        self.scales = tuple(float(s) for s in self.scales)

    @property
    def drop_epoch(self) -> int:
        return self.lr_drop_epoch if self.lr_drop_epoch is not None else int(math.floor(0.8 * self.epochs + 0.5))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: divided by 10 from the drop epoch on."""
        return self.lr / 10.0 if epoch >= self.drop_epoch else self.lr

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(r=self.r, pcsp_count=self.pcsp_count, ppm_enabled=self.ppm, fusion=self.fusion)

    def loss_config(self) -> LossConfig:
        return LossConfig(gamma=self.gamma, delta=self.delta, eps=self.eps)

    def profile(self):
        return tiny_profile(self.widths) if self.backbone == "tiny" else get_profile(self.backbone)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


# -- config files ---------------------------------------------------------------


def _parse_value(raw: str):
    v = raw.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        return v[1:-1]
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if v.startswith("[") and v.endswith("]"):
        v = v[1:-1]
        return [] if not v.strip() else [_parse_value(x) for x in v.split(",")]
    if "," in v:
        return [_parse_value(x) for x in v.split(",")]
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; values are numbers, lists, booleans or strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key.isidentifier():
            raise ValueError(f"config line {lineno}: invalid key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_config(path) -> RunConfig:
    values = parse_config(Path(path).read_text())
    base = Path(path).parent
    for k in ("train_images", "train_masks", "val_images", "val_masks", "model", "report"):
        if isinstance(values.get(k), str) and not os.path.isabs(values[k]):
            values[k] = str(base / values[k])
    return RunConfig.from_dict(values)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    graph: ModelGraph
    epoch_loss: list[float] = field(default_factory=list)
    lr_log: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def build_from_config(cfg: RunConfig) -> ModelGraph:
    return build_model(cfg.profile(), cfg.decoder_config(), cfg.input_size, seed=cfg.seed, materialize=True)


def _batch(samples: Sequence[Sample], loss_cfg: LossConfig, alphas=None):
    x = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples])[:, None]
    if alphas is None:
        a = edge_weight_alpha(y, loss_cfg.delta)
    else:
        a = np.stack(alphas)[:, None]
    return x, y, a


def train(cfg: RunConfig, data: Optional[Sequence[Sample]] = None, graph: Optional[ModelGraph] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Single-sample (by default) Adam training on the weighted BCE."""
    if data is None:
        data = training_data(cfg)
    if not data:
        raise ValueError("training set is empty")
    graph = graph or build_from_config(cfg)
    for s in data:
        if s.mask.shape != graph.input_size:
            raise ValueError(f"sample {s.ident!r} is {s.mask.shape}, model expects {graph.input_size}")
    loss_cfg = cfg.loss_config()
    params = graph.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    cached = None if cfg.augment else [edge_weight_alpha(s.mask, cfg.delta) for s in data]
    result = TrainResult(graph)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        result.lr_log.append(opt.lr)
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            if cfg.augment:
                batch = [augment(data[i], rng, cfg.flip, cfg.scales) for i in idx]
                x, y, a = _batch(batch, loss_cfg)
            else:
                x, y, a = _batch([data[i] for i in idx], loss_cfg, [cached[i] for i in idx])
            reset_graph()
            opt.zero_grad()
            loss = weighted_bce(graph(Tensor(x)), y, loss_cfg, alpha=a)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {result.steps + 1}")
            backward(loss, params=params)
            opt.step()
            total += value * len(idx)
            count += len(idx)
            result.steps += 1
        result.epoch_loss.append(total / count)
        if log:
            log(f"epoch {epoch:3d}  lr {opt.lr:.2e}  loss {total / count:.5f}")
    result.seconds = time.perf_counter() - start
    return result


def training_data(cfg: RunConfig) -> list[Sample]:
    if cfg.train_images:
        return load_samples(cfg.train_images, cfg.train_masks or cfg.train_images)
    return synth_generate(cfg.synth_n, cfg.input_size, cfg.synth_seed)


def validation_data(cfg: RunConfig) -> list[Sample]:
    if cfg.val_images:
        return load_samples(cfg.val_images, cfg.val_masks or cfg.val_images)
    # held out: indices past the training range of the same generator
    return synth_generate(cfg.synth_val_n, cfg.input_size, cfg.synth_seed, start=cfg.synth_n)


# -- inference / evaluation ---------------------------------------------------------


def thread_count(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get("DNTDF_THREADS", "1") or 1)
    return max(1, threads)


def predict(graph: ModelGraph, images: Sequence[np.ndarray], threads: Optional[int] = None) -> list[np.ndarray]:
    """Saliency maps (h, w) in input order; work is spread over ``DNTDF_THREADS`` workers."""
    def run(img):
        with no_grad():
            return graph(Tensor(img[None])).data[0, 0].astype(np.float64)

    n = thread_count(threads)
    if n == 1:
        return [run(img) for img in images]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(run, images))


def evaluate(graph: ModelGraph, data: Sequence[Sample], threads: Optional[int] = None,
             mode: str = "per-image") -> MetricReport:
    if not data:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(graph, [s.image for s in data], threads)
    return metric_report(preds, [s.mask for s in data], mode)


def evaluate_predictions(preds: Sequence[np.ndarray], masks: Sequence[np.ndarray], mode: str = "per-image"):
    if not preds:
        raise ValueError("cannot evaluate on an empty dataset")
    return metric_report(list(preds), list(masks), mode)


# -- persistence ----------------------------------------------------------------------


def save_model(graph: ModelGraph, path, run: Optional[RunConfig] = None) -> None:
    """Parameters by name plus a JSON header describing how to rebuild the graph."""
    meta = {
        "profile": graph.profile.name,
        "depths": list(graph.profile.depths),
        "decoder": asdict(graph.config),
        "input_size": list(graph.input_size),
        "run": None if run is None else {k: v for k, v in asdict(run).items()},
    }
    arrays = {name: p.data for name, p in graph.named_parameters()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path) -> ModelGraph:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    dec = meta["decoder"]
    if dec.get("ppm_bins") is not None:
        dec["ppm_bins"] = tuple(dec["ppm_bins"])
    profile = tiny_profile(meta["depths"]) if meta["profile"] == "tiny" else get_profile(meta["profile"])
    graph = build_model(profile, DecoderConfig(**dec), tuple(meta["input_size"]), seed=0, materialize=True)
    named = dict(graph.named_parameters())
    missing = sorted(set(named) ^ set(arrays))
    if missing:
        raise ValueError(f"{path}: parameter set mismatch ({', '.join(missing[:5])})")
    for name, p in named.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name].astype(p.data.dtype)
    return graph
