"""Multi-horizon quantile Transformer forecaster and its training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .constants import CATEGORIES, CONTEXT_MINUTES, EPSILON, HORIZON, METRICS

log = logging.getLogger(__name__)

LOSS_NAMES = ("pinball", "median_mse", "sign", "hazard")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    context_minutes: int = CONTEXT_MINUTES
    horizon: int = HORIZON
    quantiles: tuple = (0.1, 0.5, 0.9)
    include_bbi: bool = True
    depth: int = 2
    heads: int = 4
    width: int = 64
    category_width: int = 8
    loss_weights: tuple = (1.0, 0.5, 0.5, 0.25)
    learning_rate: float = 1e-3
    batch_size: int = 16
    patience: int = 10
    max_epochs: int = 100
    return_run: int = 5
    seed: int = 0
    epsilon: dict = field(default_factory=lambda: dict(EPSILON))

    def __post_init__(self):
        q = tuple(float(x) for x in self.quantiles)
        if 0.5 not in q:
            raise ValueError("quantile levels must include the median 0.5")
        if any(not 0 < x < 1 for x in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("quantile levels must be strictly increasing in (0, 1)")
        self.quantiles = q
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 4 or any(w < 0 for w in self.loss_weights):
            raise ValueError("loss_weights needs four non-negative entries")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def targets(self):
        return METRICS if self.include_bbi else tuple(m for m in METRICS if m != "bbi")

    @property
    def median_index(self):
        return self.quantiles.index(0.5)


@dataclass
class QuantileForecast:
    targets: tuple
    quantiles: tuple
    values: np.ndarray  # (N, targets, horizon, quantiles), sorted along the last axis
    hazard: np.ndarray  # (N, targets, horizon)

    def median(self, target):
        i = self.targets.index(target)
        return self.values[:, i, :, self.quantiles.index(0.5)]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, contexts):
        flat = contexts.reshape(-1, contexts.shape[-1])
        mean = np.nanmean(np.where(np.isfinite(flat), flat, np.nan), axis=0)
        std = np.nanstd(np.where(np.isfinite(flat), flat, np.nan), axis=0)
        mean = np.nan_to_num(mean)
        std = np.where(np.isfinite(std) & (std > 1e-6), std, 1.0)
        return cls(mean, std)

    def encode(self, contexts):
        """Standardize, zero invalid entries and append the validity mask channels."""
        valid = np.isfinite(contexts)
        z = (np.where(valid, contexts, self.mean) - self.mean) / self.std
        return np.concatenate([z, valid.astype(z.dtype)], axis=-1)


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10_000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return torch.tensor(pe, dtype=torch.float32)


class Forecaster(nn.Module):
    def __init__(self, n_features: int, cfg: ModelConfig, n_categories: int = len(CATEGORIES)):
        super().__init__()
        self.cfg = cfg
        self.n_features = n_features
        d = cfg.width
        self.n_targets = len(cfg.targets)
        self.input_proj = nn.Linear(2 * n_features, d)
        self.register_buffer("positions", sinusoidal_positions(cfg.context_minutes, d))
        layer = nn.TransformerEncoderLayer(d, cfg.heads, dim_feedforward=2 * d, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.category = nn.Embedding(n_categories, cfg.category_width)
        self.trunk = nn.Linear(2 * d + cfg.category_width, d)
        self.quantile_head = nn.Linear(d, self.n_targets * cfg.horizon * len(cfg.quantiles))
        self.hazard_head = nn.Linear(d, self.n_targets * cfg.horizon)
        for head in (self.quantile_head, self.hazard_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, x, category):
        """``x``: (batch, context, 2F) encoded context; returns (quantiles, hazard logits)."""
        if x.shape[-1] != 2 * self.n_features:
            raise ValueError(f"expected {2 * self.n_features} input channels "
                             f"({self.n_features} features + masks), got {x.shape[-1]}")
        h = self.input_proj(x) + self.positions.to(x.dtype)
        h = self.norm(self.encoder(h))
        pooled = torch.cat([h[:, -1], h.mean(dim=1), self.category(category)], dim=-1)
        z = F.gelu(self.trunk(pooled))
        n, T, H, Q = x.shape[0], self.n_targets, self.cfg.horizon, len(self.cfg.quantiles)
        return self.quantile_head(z).view(n, T, H, Q), self.hazard_head(z).view(n, T, H)


# losses; all masked means return 0 when nothing is eligible

def _masked_mean(values, mask):
    mask = mask.to(values.dtype)
    return (values * mask).sum() / mask.sum().clamp_min(1.0)


def pinball_loss(y, yhat, q, mask=None):
    """Quantile loss ``max(q e, (q - 1) e)`` with ``e = y - yhat``, averaged over ``mask``."""
    y, yhat = torch.as_tensor(y, dtype=torch.float64), torch.as_tensor(yhat, dtype=torch.float64)
    e = y - yhat
    q = torch.as_tensor(q, dtype=e.dtype)
    loss = torch.maximum(q * e, (q - 1) * e)
    if mask is None:
        return loss.mean()
    return _masked_mean(loss, mask)


def sign_loss(median, s_a, eps, mask=None):
    """Hinge on the median's sign, scaled by the neutrality band, over minutes with ``s_a != 0``."""
    median = torch.as_tensor(median, dtype=torch.float64)
    s_a = torch.as_tensor(s_a, dtype=median.dtype)
    eps = torch.as_tensor(eps, dtype=median.dtype)
    loss = torch.relu(eps - s_a * median) / eps
    eligible = s_a != 0
    if mask is not None:
        eligible = eligible & mask
    return _masked_mean(loss, eligible)


def hazard_loss(h, event_time, event):
    """Discrete-time survival NLL from hazard probabilities ``h`` (..., horizon)."""
    h = torch.as_tensor(h, dtype=torch.float64)
    k = torch.arange(h.shape[-1])
    e = torch.as_tensor(event_time)[..., None]
    before = (k < e).to(h.dtype)
    at = ((k == e) & torch.as_tensor(event, dtype=torch.bool)[..., None]).to(h.dtype)
    nll = -(torch.special.xlog1py(before, -h) + torch.special.xlogy(at, h)).sum(-1)
    return nll.mean()


def hazard_nll_logits(logits, event_time, event, include):
    k = torch.arange(logits.shape[-1])
    e = event_time[..., None]
    before = (k < e).to(logits.dtype)
    at = ((k == e) & event[..., None]).to(logits.dtype)
    nll = -(before * F.logsigmoid(-logits) + at * F.logsigmoid(logits)).sum(-1)
    return _masked_mean(nll, include)


def return_events(delta, eps, run: int = 5):
    """First offset starting ``run`` consecutive in-band valid minutes.

    ``delta``: (..., horizon) with NaN invalid; ``eps`` broadcastable to
    ``delta[..., 0]``. Returns (time, event, include); censored sequences get
    their last valid offset as time, sequences with no valid minute are
    excluded.
    """
    delta = np.asarray(delta, dtype=float)
    valid = np.isfinite(delta)
    eps = np.asarray(eps, dtype=float)[..., None]
    inside = valid & (np.abs(np.nan_to_num(delta)) <= eps)
    H = delta.shape[-1]
    windows = np.ones(delta.shape[:-1] + (H - run + 1,), dtype=bool)
    for j in range(run):
        windows &= inside[..., j:H - run + 1 + j]
    event = windows.any(-1)
    first = np.argmax(windows, axis=-1)
    last_valid = H - 1 - np.argmax(valid[..., ::-1], axis=-1)
    include = valid.any(-1)
    time = np.where(event, first, np.where(include, last_valid, 0))
    return time.astype(np.int64), event, include


@dataclass
class Batch:
    x: torch.Tensor
    category: torch.Tensor
    y: torch.Tensor  # (N, T, H), 0 where invalid
    valid: torch.Tensor
    sign: torch.Tensor
    event_time: torch.Tensor
    event: torch.Tensor
    include: torch.Tensor

    def subset(self, idx):
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def make_batch(examples, cfg: ModelConfig, normalizer: Normalizer, dtype=torch.float32) -> Batch:
    rows = [METRICS.index(t) for t in cfg.targets]
    ctx = np.stack([e.context for e in examples])
    delta = np.stack([e.delta[rows] for e in examples])
    sign = np.stack([e.sign[rows] for e in examples]).astype(np.float64)
    eps = np.array([cfg.epsilon[t] for t in cfg.targets])
    time, event, include = return_events(delta, eps, cfg.return_run)
    valid = np.isfinite(delta)
    return Batch(
        x=torch.tensor(normalizer.encode(ctx), dtype=dtype),
        category=torch.tensor([e.category_index for e in examples], dtype=torch.long),
        y=torch.tensor(np.nan_to_num(delta), dtype=dtype),
        valid=torch.tensor(valid),
        sign=torch.tensor(np.where(valid, sign, 0.0), dtype=dtype),
        event_time=torch.tensor(time),
        event=torch.tensor(event),
        include=torch.tensor(include),
    )


def loss_terms(model: Forecaster, batch: Batch):
    """Unweighted (pinball, median MSE, sign, hazard) losses for one batch."""
    cfg = model.cfg
    qpred, logits = model(batch.x, batch.category)
    mask = batch.valid
    qs = torch.tensor(cfg.quantiles, dtype=qpred.dtype)
    e = batch.y[..., None] - qpred
    pin = torch.maximum(qs * e, (qs - 1) * e)
    pinball = _masked_mean(pin, mask[..., None].expand_as(pin))
    med = qpred[..., cfg.median_index]
    mse = _masked_mean((batch.y - med) ** 2, mask)
    eps = torch.tensor([cfg.epsilon[t] for t in cfg.targets], dtype=qpred.dtype)[None, :, None]
    hinge = torch.relu(eps - batch.sign * med) / eps
    sgn = _masked_mean(hinge, mask & (batch.sign != 0))
    haz = hazard_nll_logits(logits, batch.event_time, batch.event, batch.include)
    return torch.stack([pinball, mse, sgn, haz])


def total_loss(model, batch):
    w = torch.tensor(model.cfg.loss_weights, dtype=model.positions.dtype)
    terms = loss_terms(model, batch)
    return (w * terms).sum(), w * terms


@dataclass
class TrainResult:
    model: Forecaster
    normalizer: Normalizer
    feature_names: tuple
    report: dict = field(default_factory=dict)


def build_model(n_features, cfg: ModelConfig) -> Forecaster:
    torch.manual_seed(cfg.seed)
    return Forecaster(n_features, cfg)


def train(train_examples, val_examples, cfg: ModelConfig, feature_names) -> TrainResult:
    """Adam on the weighted loss; early stopping on validation pinball loss.

    Without validation examples the training pinball loss drives stopping.
    """
    if not train_examples:
        raise ValueError("no training examples")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    ctx = np.stack([e.context for e in train_examples])
    normalizer = Normalizer.fit(ctx)
    model = build_model(ctx.shape[-1], cfg)
    data = make_batch(train_examples, cfg, normalizer)
    val = make_batch(val_examples, cfg, normalizer) if val_examples else data
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    w = torch.tensor(cfg.loss_weights)

    def evaluate(batch):
        with torch.no_grad():
            return loss_terms(model, batch).double().numpy()

    v0 = evaluate(val)
    curves = [{"epoch": 0, "train": _terms_dict(w.numpy() * evaluate(data)),
               "val_pinball": float(v0[0])}]
    best = (float(v0[0]), 0, copy.deepcopy(model.state_dict()))
    stale = 0
    n = len(train_examples)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(4)
        for s in range(0, n, cfg.batch_size):
            batch = data.subset(perm[s:s + cfg.batch_size])
            loss, weighted = total_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: "
                                       f"{dict(zip(LOSS_NAMES, weighted.tolist()))}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += weighted.detach().double().numpy() * len(batch.category)
        model.eval()
        vp = float(evaluate(val)[0])
        curves.append({"epoch": epoch, "train": _terms_dict(sums / n), "val_pinball": vp})
        if vp < best[0]:
            best = (vp, epoch, copy.deepcopy(model.state_dict()))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best[2])
    model.eval()
    report = {"best_epoch": best[1], "best_val_pinball": best[0], "epochs_run": len(curves) - 1,
              "n_train": n, "n_validation": len(val_examples), "curves": curves,
              "loss_weights": list(cfg.loss_weights), "feature_names": list(feature_names)}
    return TrainResult(model, normalizer, tuple(feature_names), report)


def _terms_dict(values):
    return {k: float(v) for k, v in zip(LOSS_NAMES, values)}


def predict(result: TrainResult, examples) -> QuantileForecast:
    model, cfg = result.model, result.model.cfg
    if not examples:
        shape = (0, len(cfg.targets), cfg.horizon)
        return QuantileForecast(cfg.targets, cfg.quantiles, np.zeros(shape + (len(cfg.quantiles),)),
                                np.zeros(shape))
    ctx = np.stack([e.context for e in examples])
    x = torch.tensor(result.normalizer.encode(ctx), dtype=model.positions.dtype)
    cat = torch.tensor([e.category_index for e in examples], dtype=torch.long)
    with torch.no_grad():
        q, logits = model(x, cat)
    values = np.sort(q.double().numpy(), axis=-1)
    return QuantileForecast(cfg.targets, cfg.quantiles, values, torch.sigmoid(logits).double().numpy())


# persistence: flat parameter vector + JSON manifest

def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


def save_model(result: TrainResult, directory, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    state = result.model.state_dict()
    names = [k for k in state if k != "positions"]
    flat = np.concatenate([state[k].detach().numpy().ravel() for k in names]).astype(np.float32)
    np.save(d / "params.npy", flat)
    cfg = asdict(result.model.cfg)
    manifest = {
        "parameters": [{"name": k, "shape": list(state[k].shape)} for k in names],
        "feature_names": list(result.feature_names),
        "n_features": result.model.n_features,
        "config": cfg,
        "config_hash": config_digest(cfg),
        "normalizer": {"mean": result.normalizer.mean.tolist(), "std": result.normalizer.std.tolist()},
        **(extra or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_model(directory, feature_names=None) -> TrainResult:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if feature_names is not None and list(feature_names) != manifest["feature_names"]:
        raise ValueError("feature order of the data differs from the trained model")
    raw = dict(manifest["config"])
    raw["quantiles"] = tuple(raw["quantiles"])
    raw["loss_weights"] = tuple(raw["loss_weights"])
    cfg = ModelConfig(**raw)
    model = Forecaster(manifest["n_features"], cfg)
    flat = np.load(d / "params.npy")
    state = model.state_dict()
    pos = 0
    for p in manifest["parameters"]:
        size = math.prod(p["shape"]) if p["shape"] else 1
        state[p["name"]] = torch.tensor(flat[pos:pos + size].reshape(p["shape"]))
        pos += size
    model.load_state_dict(state)
    model.eval()
    norm = Normalizer(np.array(manifest["normalizer"]["mean"]), np.array(manifest["normalizer"]["std"]))
    return TrainResult(model, norm, tuple(manifest["feature_names"]))
