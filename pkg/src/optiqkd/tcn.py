"""Dilated-causal residual convolution network forecasting the channel state.

The forecaster ingests a fixed-length window of telemetry features and
predicts the next block's feature vector. Inference is read-only on the
parameters and safe to call concurrently; training mutates parameters and
is single-threaded per model instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .channel import Telemetry

FEATURES = ("q_mu", "e_mu", "v", "eta", "y0")


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TcnConfig:
    layers: int = 4
    dilations: Tuple[int, ...] = (1, 2, 4, 8)
    kernel: int = 3
    hidden: int = 16
    window: int = 32
    features: Tuple[str, ...] = FEATURES
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 64

    def __post_init__(self) -> None:
        if len(self.dilations) != self.layers:
            raise ValueError("need one dilation per layer")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.kernel < 1 or any(d < 1 for d in self.dilations):
            raise ValueError("kernel and dilations must be >= 1")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


@dataclass(frozen=True)
class Forecast:
    """One-step-ahead prediction, in normalized and physical units."""

    y_next: np.ndarray
    y_norm: np.ndarray
    horizon: int = 1


class Normalizer:
    """Frozen per-feature affine scaling (z-score)."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.where(np.asarray(std, dtype=float) > 1e-12, std, 1.0)

    @classmethod
    def identity(cls, n_features: int) -> "Normalizer":
        return cls(np.zeros(n_features), np.ones(n_features))

    @classmethod
    def calibrate(cls, data: np.ndarray) -> "Normalizer":
        data = np.asarray(data, dtype=float)
        return cls(data.mean(axis=0), data.std(axis=0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


def telemetry_features(telem: Telemetry) -> np.ndarray:
    return np.array([telem.q_mu_hat, telem.e_mu_hat, telem.v_hat,
                     telem.eta_hat, telem.y0_hat])


class TcnModel:
    """Stack of {dilated causal conv -> ReLU -> residual add} blocks with a
    linear head reading the final time step."""

    def __init__(self, cfg: TcnConfig, rng: np.random.Generator,
                 normalizer: Optional[Normalizer] = None):
        self.cfg = cfg
        self.normalizer = normalizer or Normalizer.identity(len(cfg.features))
        n_feat = len(cfg.features)
        self.convs: List[nn.Conv1dCausalLayer] = []
        self.projs: List[Optional[nn.Conv1dCausalLayer]] = []
        c_in = n_feat
        for d in cfg.dilations:
            self.convs.append(nn.Conv1dCausalLayer.create(c_in, cfg.hidden, cfg.kernel, d, rng))
            if c_in != cfg.hidden:
                self.projs.append(nn.Conv1dCausalLayer.create(c_in, cfg.hidden, 1, 1, rng))
            else:
                self.projs.append(None)
            c_in = cfg.hidden
        self.head = nn.DenseLayer.create(cfg.hidden, n_feat, rng)

    def params(self) -> List[nn.Var]:
        out: List[nn.Var] = []
        for conv, proj in zip(self.convs, self.projs):
            out += conv.params()
            if proj is not None:
                out += proj.params()
        out += self.head.params()
        return out

    def forward_batch(self, windows: np.ndarray) -> nn.Var:
        """windows: (B, W, F) normalized. Returns Var (B, F)."""
        x = nn.Var(np.transpose(windows, (0, 2, 1)))  # (B, F, W)
        h = x
        for conv, proj in zip(self.convs, self.projs):
            y = nn.relu(conv(h))
            skip = proj(h) if proj is not None else h
            h = nn.residual_add(y, skip)
        last = nn.index(h, (slice(None), slice(None), -1))  # (B, hidden)
        return self.head(last)

    def state_arrays(self) -> dict:
        arrays = {}
        for i, (conv, proj) in enumerate(zip(self.convs, self.projs)):
            arrays[f"conv{i}.kernel"] = conv.kernel.data
            arrays[f"conv{i}.bias"] = conv.bias.data
            if proj is not None:
                arrays[f"proj{i}.kernel"] = proj.kernel.data
                arrays[f"proj{i}.bias"] = proj.bias.data
        arrays["head.w"] = self.head.w.data
        arrays["head.b"] = self.head.b.data
        arrays["norm.mean"] = self.normalizer.mean
        arrays["norm.std"] = self.normalizer.std
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        for i, (conv, proj) in enumerate(zip(self.convs, self.projs)):
            conv.kernel.data = arrays[f"conv{i}.kernel"]
            conv.bias.data = arrays[f"conv{i}.bias"]
            if proj is not None:
                proj.kernel.data = arrays[f"proj{i}.kernel"]
                proj.bias.data = arrays[f"proj{i}.bias"]
        self.head.w.data = arrays["head.w"]
        self.head.b.data = arrays["head.b"]
        self.normalizer = Normalizer(arrays["norm.mean"], arrays["norm.std"])


def tcn_forward(window: np.ndarray, model: TcnModel) -> Forecast:
    """Forecast the next block from a fully populated feature window.

    ``window`` is (W, F) in physical units; raw predictions are clamped to
    each feature's [0, 1] range.
    """
    window = np.asarray(window, dtype=float)
    w = model.cfg.window
    if window.ndim != 2 or window.shape[0] < w or window.shape[1] != len(model.cfg.features):
        raise ValueError(f"window must be at least ({w}, {len(model.cfg.features)})")
    z = model.normalizer.normalize(window[-w:])
    out = model.forward_batch(z[None, :, :])
    y_norm = out.data[0]
    y_raw = np.clip(model.normalizer.denormalize(y_norm), 0.0, 1.0)
    return Forecast(y_next=y_raw, y_norm=y_norm)


def make_dataset(features: np.ndarray, window: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Slice a (T, F) feature matrix into (window, next-row) training pairs."""
    features = np.asarray(features, dtype=float)
    return [(features[t - window:t], features[t]) for t in range(window, features.shape[0])]


def persistence_mse(dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
                    normalizer: Normalizer) -> float:
    """Mean squared error of the repeat-last-row baseline (normalized units)."""
    errs = []
    for window, target in dataset:
        diff = normalizer.normalize(target) - normalizer.normalize(window[-1])
        errs.append(float(np.mean(diff**2)))
    return float(np.mean(errs))


def dataset_mse(dataset: Sequence[Tuple[np.ndarray, np.ndarray]], model: TcnModel) -> float:
    errs = []
    for window, target in dataset:
        fc = tcn_forward(window, model)
        diff = model.normalizer.normalize(target) - fc.y_norm
        errs.append(float(np.mean(diff**2)))
    return float(np.mean(errs))


def tcn_train(
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    cfg: TcnConfig,
    rng: np.random.Generator,
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    model: Optional[TcnModel] = None,
) -> Tuple[TcnModel, List[float]]:
    """Minimize mean squared forecast error; returns per-epoch mean losses.

    The normalizer is calibrated from the full training corpus and frozen
    before the first update, so the observation scaling seen downstream is
    stable. Aborts with :class:`DivergenceError` if the loss goes non-finite.
    """
    if len(dataset) < 1:
        raise ValueError("empty training dataset")
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    if model is None:
        corpus = np.concatenate([w for w, _ in dataset] + [t[None] for _, t in dataset])
        model = TcnModel(cfg, rng, Normalizer.calibrate(corpus))
    params = model.params()
    opt = nn.Adam(params, lr=lr)
    windows = np.stack([model.normalizer.normalize(w) for w, _ in dataset])
    targets = np.stack([model.normalizer.normalize(t) for _, t in dataset])
    curve: List[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            pred = model.forward_batch(windows[sel])
            loss = nn.vmean(nn.square(pred - nn.Var(targets[sel])))
            if not np.isfinite(loss.data):
                raise DivergenceError("forecaster training diverged")
            nn.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        curve.append(float(np.mean(losses)))
    return model, curve


def train_forecaster(
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    cfg: TcnConfig,
    rng: np.random.Generator,
) -> Tuple[TcnModel, List[float]]:
    """Two-stage fit: full rate then a fine-tune pass at lr/6."""
    model, curve = tcn_train(dataset, cfg, rng)
    model, tail = tcn_train(dataset, cfg, rng, epochs=cfg.epochs,
                            lr=cfg.lr / 6.0, model=model)
    return model, curve + tail


class Forecaster:
    """Inference wrapper with a persistence fallback during warm-up blocks."""

    def __init__(self, model: Optional[TcnModel], window: Optional[int] = None):
        self.model = model
        self.window = window if window is not None else (model.cfg.window if model else 1)
        self.calls = 0  # counts model-backed forecasts, for isolation checks

    def forecast(self, history: np.ndarray) -> Forecast:
        history = np.asarray(history, dtype=float)
        if history.ndim != 2 or history.shape[0] < 1:
            raise ValueError("history must be a non-empty (t, F) matrix")
        if self.model is None or history.shape[0] < self.window:
            last = history[-1]
            if self.model is not None:
                z = self.model.normalizer.normalize(last)
            else:
                z = last
            return Forecast(y_next=np.clip(last, 0.0, 1.0), y_norm=np.asarray(z))
        self.calls += 1
        return tcn_forward(history, self.model)


def save_tcn(path: str, model: TcnModel) -> None:
    meta = {
        "kind": "tcn",
        "layers": model.cfg.layers,
        "dilations": list(model.cfg.dilations),
        "kernel": model.cfg.kernel,
        "hidden": model.cfg.hidden,
        "window": model.cfg.window,
        "features": list(model.cfg.features),
    }
    nn.save_checkpoint(path, model.state_arrays(), meta)


def load_tcn(path: str) -> TcnModel:
    arrays, meta = nn.load_checkpoint(path)
    cfg = TcnConfig(
        layers=int(meta["layers"]),
        dilations=tuple(int(d) for d in meta["dilations"]),
        kernel=int(meta["kernel"]),
        hidden=int(meta["hidden"]),
        window=int(meta["window"]),
        features=tuple(meta["features"]),
    )
    model = TcnModel(cfg, np.random.Generator(np.random.Philox(key=0)))
    model.load_state_arrays(arrays)
    return model
