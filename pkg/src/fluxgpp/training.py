"""Training loop, Adam optimizer, checkpoints, and HyperBand search.

The training objective is mean absolute error against LOWESS-smoothed
targets; checkpoint selection uses raw-target validation MAE by default so
the kept weights track the quantity actually reported downstream.  All
randomness flows from one seed through named substreams, making every run
bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradkit as gk
from .dataset import SampleSet, SiteNorm, apply_norms, denormalize_predictions
from .gradkit import NonFiniteError, Tensor
from .models import LstmConfig, Model, TransformerConfig

__all__ = [
    "STREAM_INIT",
    "STREAM_SHUFFLE",
    "STREAM_DROPOUT",
    "STREAM_HYPERBAND",
    "TrainConfig",
    "TrainResult",
    "Checkpoint",
    "HyperbandConfig",
    "Bracket",
    "HyperbandResult",
    "smoothed_mae_loss",
    "sgd_step",
    "AdamState",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
    "get_hyperband_schedule",
    "hyperband",
]

# RNG substream tags (dataset owns STREAM_SYNTH=11, evaluation STREAM_PERMUTE=53)
STREAM_INIT = 23
STREAM_SHUFFLE = 31
STREAM_DROPOUT = 41
STREAM_HYPERBAND = 47

CHECKPOINT_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Unusable training setup (empty splits, bad config)."""


# -------------------------------------------------------------------- loss


def smoothed_mae_loss(predictions: Tensor, targets_smoothed) -> Tensor:
    """Mean |prediction - smoothed target|; subgradient 0 at exact ties."""
    targets = np.asarray(targets_smoothed, dtype=np.float64)
    if targets.size == 0:
        raise TrainingError("empty batch")
    if predictions.data.shape != targets.shape:
        raise TrainingError(
            f"prediction shape {predictions.data.shape} vs targets {targets.shape}"
        )
    return gk.reduce_mean(gk.absolute(predictions - Tensor(targets)))


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def initial(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    learning_rate: float,
    state: AdamState | None = None,
    clip_norm: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8), functional.

    Gradients may be pre-scaled by a single global max-norm via ``clip_norm``.
    """
    if params.keys() != grads.keys():
        raise TrainingError("parameter and gradient keys disagree")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    if clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / total
            grads = {k: g * scale for k, g in grads.items()}
    if state is None:
        state = AdamState.initial(params)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[k] = p - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ------------------------------------------------------------ train config


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    dropout: float = 0.3  # consumed by the model configs; recorded here too
    clip_norm: float | None = None
    val_metric: str = "raw"  # "raw" | "smoothed": target used for checkpointing

    def __post_init__(self):
        if self.max_epochs < 1:
            raise TrainingError("max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.val_metric not in ("raw", "smoothed"):
            raise TrainingError("val_metric must be 'raw' or 'smoothed'")


@dataclass(frozen=True)
class Checkpoint:
    model_kind: str
    model_config: LstmConfig | TransformerConfig
    train_config: TrainConfig
    epoch: int
    validation_loss: float
    norms: dict[str, SiteNorm]
    params: dict[str, np.ndarray]

    def __post_init__(self):
        if not np.isfinite(self.validation_loss):
            raise TrainingError("checkpoint validation loss must be finite")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]  # rows: {"epoch", "train_loss", "val_loss"}
    diverged: bool


# ------------------------------------------------------------------- train


def _param_arrays(model: Model) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in model.params.items()}


def _val_loss(model: Model, zval: SampleSet, raw_targets, cfg: TrainConfig, norms) -> float:
    preds = model.predict(zval.contexts)
    if cfg.val_metric == "raw":
        preds = denormalize_predictions(preds, zval.site_ids, norms)
        return float(np.mean(np.abs(preds - raw_targets)))
    return float(np.mean(np.abs(preds - zval.targets_smoothed)))


def train(
    model_kind: str,
    model_config,
    train_config: TrainConfig,
    train_set: SampleSet,
    val_set: SampleSet,
    norms: dict[str, SiteNorm],
) -> TrainResult:
    """Fit a model, returning the epoch with the lowest validation loss.

    A non-finite loss or gradient aborts the loop; the best finite
    checkpoint found so far is returned with ``diverged`` set.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and validation sets must be non-empty")
    seed = train_config.seed
    ztrain = apply_norms(train_set, norms)
    zval = apply_norms(val_set, norms)
    raw_val_targets = val_set.targets

    model = Model.create(model_kind, model_config, np.random.default_rng([seed, STREAM_INIT]))
    dropout_rng = np.random.default_rng([seed, STREAM_DROPOUT])
    state = AdamState.initial(_param_arrays(model))

    # epoch 0 = untrained weights, so a finite checkpoint always exists
    best_val = _val_loss(model, zval, raw_val_targets, train_config, norms)
    best_epoch = 0
    best_params = {k: t.data.copy() for k, t in model.params.items()}

    n = len(ztrain)
    history: list[dict] = []
    diverged = False
    for epoch in range(1, train_config.max_epochs + 1):
        perm = np.random.default_rng([seed, STREAM_SHUFFLE, epoch]).permutation(n)
        epoch_losses = []
        try:
            for lo in range(0, n, train_config.batch_size):
                idx = perm[lo : lo + train_config.batch_size]
                preds = model.forward_batch(
                    ztrain.contexts[idx], train_mode=True, rng=dropout_rng
                )
                loss = smoothed_mae_loss(preds, ztrain.targets_smoothed[idx])
                loss.backward()
                grads = {k: t.grad for k, t in model.params.items()}
                new_params, state = sgd_step(
                    _param_arrays(model),
                    grads,
                    train_config.learning_rate,
                    state,
                    train_config.clip_norm,
                )
                for k, t in model.params.items():
                    t.data = new_params[k]
                epoch_losses.append(float(loss.data))
        except NonFiniteError:
            diverged = True
            break
        train_loss = float(np.mean(epoch_losses))
        if not np.isfinite(train_loss):
            diverged = True
            break
        val_loss = _val_loss(model, zval, raw_val_targets, train_config, norms)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if np.isfinite(val_loss) and val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: t.data.copy() for k, t in model.params.items()}

    checkpoint = Checkpoint(
        model_kind=model_kind,
        model_config=model_config,
        train_config=train_config,
        epoch=best_epoch,
        validation_loss=best_val,
        norms=norms,
        params=best_params,
    )
    return TrainResult(checkpoint=checkpoint, history=history, diverged=diverged)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": ckpt.model_kind,
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "validation_loss": ckpt.validation_loss,
        "norms": {
            site: {
                "token_mean": nm.token_mean.tolist(),
                "token_std": nm.token_std.tolist(),
                "gpp_mean": nm.gpp_mean,
                "gpp_std": nm.gpp_std,
            }
            for site, nm in ckpt.norms.items()
        },
        "params": {k: v.tolist() for k, v in ckpt.params.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_checkpoint(path) -> Checkpoint:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise TrainingError(f"unsupported checkpoint format version {version!r}")
    kind = payload["model_kind"]
    cfg_cls = {"lstm": LstmConfig, "gpt2": TransformerConfig}.get(kind)
    if cfg_cls is None:
        raise TrainingError(f"unknown model kind {kind!r} in checkpoint")
    return Checkpoint(
        model_kind=kind,
        model_config=cfg_cls(**payload["model_config"]),
        train_config=TrainConfig(**payload["train_config"]),
        epoch=payload["epoch"],
        validation_loss=payload["validation_loss"],
        norms={
            site: SiteNorm(
                token_mean=np.array(d["token_mean"]),
                token_std=np.array(d["token_std"]),
                gpp_mean=d["gpp_mean"],
                gpp_std=d["gpp_std"],
            )
            for site, d in payload["norms"].items()
        },
        params={k: np.array(v) for k, v in payload["params"].items()},
    )


def build_model(ckpt: Checkpoint) -> Model:
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
    return Model(kind=ckpt.model_kind, config=ckpt.model_config, params=params)


# --------------------------------------------------------------- HyperBand


@dataclass(frozen=True)
class HyperbandConfig:
    resource: int = 27  # maximum epochs a single configuration may receive
    eta: int = 3
    space: tuple[tuple[str, tuple], ...] = ()

    def __post_init__(self):
        if self.eta < 2:
            raise TrainingError("eta must be >= 2")
        if self.resource < self.eta:
            raise TrainingError("resource must be >= eta")
        if not self.space or any(len(choices) == 0 for _, choices in self.space):
            raise TrainingError("search space must offer at least one choice per dimension")


@dataclass(frozen=True)
class Bracket:
    s: int
    rungs: tuple[tuple[int, int], ...]  # (n_configs, epochs) per rung

    @property
    def budget(self) -> int:
        return sum(n * r for n, r in self.rungs)


def get_hyperband_schedule(resource: int, eta: int) -> list[Bracket]:
    """Bracket table for the bandit schedule: brackets s = s_max..0, with
    n_0 = floor((s_max+1)/(s+1)) * eta^s configurations at r_0 = resource/eta^s
    epochs, successively keeping n/eta configs for eta-times the epochs."""
    if eta < 2 or resource < eta:
        raise TrainingError("need resource >= eta >= 2")
    s_max = 0
    while eta ** (s_max + 1) <= resource:
        s_max += 1
    brackets = []
    for s in range(s_max, -1, -1):
        n = ((s_max + 1) // (s + 1)) * eta**s
        r = max(1, resource // eta**s)
        rungs = []
        for _ in range(s + 1):
            rungs.append((n, r))
            n = n // eta
            r = r * eta
        brackets.append(Bracket(s=s, rungs=tuple(rungs)))
    return brackets


@dataclass
class HyperbandResult:
    best_config: dict
    best_loss: float
    best_payload: object
    log: list[dict]  # rows: {"bracket", "rung", "config", "epochs", "loss"}
    schedule: list[Bracket]


def hyperband(config: HyperbandConfig, train_fn, seed: int = 0) -> HyperbandResult:
    """Run the full bracket schedule over a discrete search space.

    ``train_fn(config_dict, epochs)`` must return ``(val_loss, payload)``;
    every rung trains from scratch at its epoch budget.  Non-finite losses
    rank last, so diverging configurations are dropped, not propagated.
    """
    schedule = get_hyperband_schedule(config.resource, config.eta)
    space = dict(config.space)
    log: list[dict] = []
    best = (math.inf, None, None)
    for bracket in schedule:
        rng = np.random.default_rng([seed, STREAM_HYPERBAND, bracket.s])
        n0 = bracket.rungs[0][0]
        candidates = [
            {name: choices[rng.integers(len(choices))] for name, choices in space.items()}
            for _ in range(n0)
        ]
        spent = 0
        for rung_index, (n, r) in enumerate(bracket.rungs):
            candidates = candidates[:n]
            scored = []
            for cand in candidates:
                loss, payload = train_fn(dict(cand), r)
                loss = float(loss)
                rank = loss if np.isfinite(loss) else math.inf
                scored.append((rank, cand, payload))
                spent += r
                log.append(
                    {
                        "bracket": bracket.s,
                        "rung": rung_index,
                        "config": dict(cand),
                        "epochs": r,
                        "loss": loss,
                    }
                )
                if rank < best[0]:
                    best = (rank, dict(cand), payload)
            scored.sort(key=lambda item: item[0])  # stable: ties keep sample order
            candidates = [cand for _, cand, _ in scored]
        assert spent <= bracket.budget <= config.resource * len(schedule)
    if best[1] is None:
        raise TrainingError("every configuration diverged")
    return HyperbandResult(
        best_config=best[1],
        best_loss=best[0],
        best_payload=best[2],
        log=log,
        schedule=schedule,
    )
