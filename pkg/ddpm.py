"""
ddpm.py - Conditional denoising diffusion model over decision vectors

Classifier-free guided DDPM: a fully connected noise predictor conditioned on
the problem parameter alpha, trained with the condition randomly replaced by a
learned null token, and sampled ancestrally with the guided noise

    eps_bar = w * eps(x_t, t, y) + (1 - w) * eps(x_t, t, null)

Data are mapped per dimension to [-1, 1] before diffusion.

Usage:
    model = train_dataset(filtered_ds, TrainConfig(epochs=200), loss_csv="out/loss.csv")
    result = sample_ddpm(model, y=0.35, w=1.3, n=100, rng_seed=7, bounds=spec.bounds(p))
"""

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

import datagen

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "amorgs-ddpm"


class DiffusionError(Exception):
    """Base class for diffusion model failures"""


class ScheduleError(DiffusionError):
    """Noise schedule parameters out of their domain"""


class ScheduleMismatchError(DiffusionError):
    """Model trained with a different number of diffusion steps"""


class DivergenceError(DiffusionError):
    """Loss became non-finite"""

    def __init__(self, message: str, batch_index: Optional[int] = None, model: Optional["DiffusionModel"] = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.model = model


# ============================================================================
# NOISE SCHEDULE
# ============================================================================

@dataclass(frozen=True)
class NoiseSchedule:
    """beta_t, alpha_t and alpha_bar_t tables; index t-1 holds step t"""
    betas: Tuple[float, ...]

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.betas)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        """Arbitrary schedule (constant betas allowed); used for closed-form checks"""
        betas = tuple(float(b) for b in betas)
        if not betas or any(not 0.0 < b < 1.0 for b in betas):
            raise ScheduleError("every beta must lie in (0, 1)")
        return cls(betas)

    def check_invariants(self) -> List[str]:
        violations = []
        beta = self.beta
        if np.any(np.diff(beta) <= 0):
            violations.append("betas are not strictly increasing")
        if np.any(np.diff(self.alpha_bar) >= 0):
            violations.append("alpha_bar is not strictly decreasing")
        if not self.alpha_bar[-1] < 0.05:
            violations.append(f"alpha_bar_T={self.alpha_bar[-1]:.4f} is not below 0.05")
        return violations


def linear_schedule(T: int = 500, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T={T} must be at least 2")
    if not 0.0 < beta_1 < beta_T < 1.0:
        raise ScheduleError(f"need 0 < beta_1 < beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}")
    return NoiseSchedule(tuple(np.linspace(beta_1, beta_T, T).tolist()))


def forward_noising(x0, t, eps, sched: NoiseSchedule):
    """
    x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps

    Works on numpy arrays (scalar t) and torch batches (t of shape (B,)).
    """
    t_arr = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise DiffusionError(f"t outside 1..{sched.T}")
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(sched.alpha_bar, dtype=x0.dtype)[torch.as_tensor(t) - 1]
        if ab.dim() == 1:
            ab = ab[:, None]
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    ab = sched.alpha_bar[t_arr - 1]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


# ============================================================================
# NORMALIZER
# ============================================================================

@dataclass
class Normalizer:
    """Per-dimension affine map onto [-1, 1]; constant dimensions get unit span"""
    low: np.ndarray
    span: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        X = np.asarray(X, dtype=float)
        low = X.min(axis=0)
        span = X.max(axis=0) - low
        span = np.where(span > 0, span, 1.0)
        return cls(low, span)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(X, dtype=float) - self.low) / self.span - 1.0

    def denormalize(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=float) + 1.0) * 0.5 * self.span + self.low

    def check_invariants(self) -> List[str]:
        if np.any(self.span <= 0) or not np.all(np.isfinite(self.span)):
            return ["normalizer span must be positive and finite"]
        return []

    def to_dict(self) -> Dict:
        return {"low": self.low.tolist(), "span": self.span.tolist()}

    @classmethod
    def from_dict(cls, d: Dict) -> "Normalizer":
        return cls(np.asarray(d["low"], dtype=float), np.asarray(d["span"], dtype=float))


# ============================================================================
# DENOISER
# ============================================================================

def sinusoidal_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class Denoiser(nn.Module):
    """Noise predictor eps(x_t, t, y) with a learned null condition"""

    def __init__(self, data_dim: int, hidden: int = 256, layers: int = 4, time_dim: int = 64,
                 cond_dim: int = 64, T_steps: int = 500):
        super().__init__()
        self.topology = {"data_dim": data_dim, "hidden": hidden, "layers": layers,
                         "time_dim": time_dim, "cond_dim": cond_dim, "T_steps": T_steps}
        self.time_dim = time_dim
        self.T_steps = T_steps
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU())
        self.cond_mlp = nn.Sequential(nn.Linear(1, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.null_token = nn.Parameter(0.1 * torch.randn(cond_dim, dtype=DTYPE))
        blocks: List[nn.Module] = []
        width = data_dim + time_dim + cond_dim
        for _ in range(layers):
            blocks += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        blocks.append(nn.Linear(width, data_dim))
        self.net = nn.Sequential(*blocks)
        self.to(DTYPE)

    def forward(self, x: torch.Tensor, t: torch.Tensor, y: Optional[torch.Tensor] = None,
                uncond: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            x: noisy batch (B, D)
            t: integer steps (B,)
            y: condition (B,), ignored where uncond is set
            uncond: boolean mask (B,); rows set use the null token
        """
        batch = x.shape[0]
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim))
        cemb = self.null_token.expand(batch, -1)
        if y is not None:
            keep = torch.ones(batch, dtype=torch.bool) if uncond is None else ~uncond
            if bool(keep.any()):
                rows = torch.nonzero(keep).squeeze(1)
                cond = self.cond_mlp(y[rows].to(DTYPE)[:, None])
                cemb = cemb.index_put((rows,), cond)
        return self.net(torch.cat([x, temb, cemb], dim=1))


# ============================================================================
# TRAINING
# ============================================================================

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_decay: float = 0.995
    p_uncond: float = 0.1
    T_steps: int = 500
    beta_1: float = 1e-4
    beta_T: float = 0.02
    seed: int = 0
    hidden: int = 256
    layers: int = 4
    time_dim: int = 64
    cond_dim: int = 64
    keep_best: bool = True

    def check_invariants(self) -> List[str]:
        violations = []
        if not 0.0 <= self.p_uncond < 1.0:
            violations.append(f"p_uncond={self.p_uncond} outside [0, 1)")
        for name in ("epochs", "batch_size", "learning_rate", "T_steps", "hidden", "layers", "time_dim", "cond_dim"):
            if getattr(self, name) <= 0:
                violations.append(f"{name} must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            violations.append("lr_decay must lie in (0, 1]")
        if self.time_dim % 2:
            violations.append("time_dim must be even")
        return violations


@dataclass
class DiffusionModel:
    """Trained denoiser with everything needed to sample from it"""
    denoiser: Denoiser
    normalizer: Normalizer
    schedule: NoiseSchedule
    config: TrainConfig
    dataset_fingerprint: str = ""
    history: List[float] = field(default_factory=list)

    def check_invariants(self) -> List[str]:
        violations = self.normalizer.check_invariants()
        if self.denoiser.T_steps != self.schedule.T:
            violations.append("denoiser and schedule disagree on T")
        if not all(bool(torch.isfinite(p).all()) for p in self.denoiser.parameters()):
            violations.append("non-finite parameter")
        return violations


def cfg_loss(x0: torch.Tensor, y: torch.Tensor, model: nn.Module, sched: NoiseSchedule, p_uncond: float,
             generator: torch.Generator, batch_index: Optional[int] = None) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """
    Classifier-free guidance training loss and its parameter gradients.

    Per row: t ~ U{1..T}, eps ~ N(0, I), null condition with probability
    p_uncond; loss = mean over rows of ||eps_pred - eps||^2.

    Returns:
        (loss, gradients in model.parameters() order)
    """
    if x0.shape[0] == 0:
        raise DiffusionError("empty batch")
    batch = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    uncond = torch.rand(batch, generator=generator, dtype=DTYPE) < p_uncond
    xt = forward_noising(x0, t, eps, sched)
    pred = model(xt, t, y, uncond)
    loss = ((pred - eps) ** 2).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss in batch {batch_index}", batch_index)

    params = list(model.parameters())
    if not params or not loss.requires_grad:
        return loss.detach(), [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return loss.detach(), [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def build_model(data_dim: int, cfg: TrainConfig) -> Denoiser:
    torch.manual_seed(cfg.seed)
    return Denoiser(data_dim, cfg.hidden, cfg.layers, cfg.time_dim, cfg.cond_dim, cfg.T_steps)


def train(X: np.ndarray, y: np.ndarray, cfg: TrainConfig = TrainConfig(), loss_csv=None,
          dataset_fingerprint: str = "", progress: bool = True) -> DiffusionModel:
    """
    Fit the normalizer, then run seeded mini-batch Adam on cfg_loss.

    Args:
        X: training decision vectors (n, dim)
        y: conditions (n,)
        loss_csv: optional path for the per-epoch training curve

    Raises:
        DivergenceError: non-finite loss; .model holds the last good state
    """
    violations = cfg.check_invariants()
    if violations:
        raise DiffusionError("; ".join(violations))
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise DiffusionError(f"need a non-empty (n, dim) array with n conditions, got {X.shape} and {y.shape}")

    normalizer = Normalizer.fit(X)
    sched = linear_schedule(cfg.T_steps, cfg.beta_1, cfg.beta_T)
    denoiser = build_model(X.shape[1], cfg)
    data = torch.as_tensor(normalizer.normalize(X), dtype=DTYPE)
    cond = torch.as_tensor(y, dtype=DTYPE)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.lr_decay)

    model = DiffusionModel(denoiser, normalizer, sched, cfg, dataset_fingerprint)
    best_loss = math.inf
    best_state = copy.deepcopy(denoiser.state_dict())
    rows = []
    batch_index = 0
    progress_bar = tqdm(range(cfg.epochs), desc="train", disable=not progress)
    for epoch in progress_bar:
        perm = torch.randperm(data.shape[0], generator=generator)
        total, count = 0.0, 0
        for start in range(0, data.shape[0], cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            optimizer.zero_grad()
            try:
                loss, grads = cfg_loss(data[idx], cond[idx], denoiser, sched, cfg.p_uncond, generator, batch_index)
            except DivergenceError as e:
                denoiser.load_state_dict(best_state)
                e.model = model
                logger.error("training diverged at epoch %d batch %d", epoch, batch_index)
                raise
            for p, g in zip(denoiser.parameters(), grads):
                p.grad = g
            optimizer.step()
            total += float(loss) * idx.numel()
            count += idx.numel()
            batch_index += 1
        scheduler.step()
        epoch_loss = total / count
        model.history.append(epoch_loss)
        rows.append((epoch + 1, epoch_loss, optimizer.param_groups[0]["lr"]))
        progress_bar.set_description(f"[Epoch {epoch + 1:4d}] loss {epoch_loss:.5f}")
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_state = copy.deepcopy(denoiser.state_dict())

    if cfg.keep_best:
        denoiser.load_state_dict(best_state)
    if loss_csv is not None:
        Path(loss_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(loss_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "lr"])
            writer.writerows(rows)
    logger.info("training done: %d epochs, best loss %.5f", cfg.epochs, best_loss)
    return model


def train_dataset(ds: "datagen.Dataset", cfg: TrainConfig = TrainConfig(), loss_csv=None, progress: bool = True) -> DiffusionModel:
    """Train on a dataset's (solution, alpha) pairs"""
    if not ds.records:
        raise DiffusionError("cannot train on an empty dataset")
    X, y = ds.arrays()
    return train(X, y, cfg, loss_csv, datagen.dataset_fingerprint(ds), progress)


# ============================================================================
# SAMPLING
# ============================================================================

def guided_noise(model: Denoiser, x_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor, w: float) -> torch.Tensor:
    """w * conditional + (1 - w) * unconditional noise estimate"""
    batch = x_t.shape[0]
    cond = model(x_t, t, y, torch.zeros(batch, dtype=torch.bool))
    uncond = model(x_t, t, y, torch.ones(batch, dtype=torch.bool))
    return w * cond + (1.0 - w) * uncond


@dataclass
class SampleResult:
    samples: np.ndarray
    n_out_of_box: int
    seconds_per_sample: float
    raw: Optional[np.ndarray] = None


def sample_ddpm(
    model: DiffusionModel,
    y: float,
    w: float,
    n: int,
    rng_seed: int,
    sched: Optional[NoiseSchedule] = None,
    bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> SampleResult:
    """
    Ancestral sampling with sigma_t^2 = beta_t, then denormalization and
    clipping to bounds (samples that left the box are counted).
    """
    sched = model.schedule if sched is None else sched
    if sched.T != model.denoiser.T_steps:
        raise ScheduleMismatchError(f"model trained with T={model.denoiser.T_steps}, schedule has T={sched.T}")
    dim = model.normalizer.low.size
    if n == 0:
        return SampleResult(np.zeros((0, dim)), 0, 0.0, np.zeros((0, dim)))

    start = time.perf_counter()
    generator = torch.Generator().manual_seed(int(rng_seed))
    beta = torch.as_tensor(sched.beta, dtype=DTYPE)
    alpha = torch.as_tensor(sched.alpha, dtype=DTYPE)
    alpha_bar = torch.as_tensor(sched.alpha_bar, dtype=DTYPE)
    cond = torch.full((n,), float(y), dtype=DTYPE)
    denoiser = model.denoiser
    denoiser.eval()
    with torch.no_grad():
        x = torch.randn((n, dim), generator=generator, dtype=DTYPE)
        for t in range(sched.T, 0, -1):
            steps = torch.full((n,), t, dtype=torch.long)
            eps = guided_noise(denoiser, x, steps, cond, w)
            i = t - 1
            x = (x - beta[i] / torch.sqrt(1.0 - alpha_bar[i]) * eps) / torch.sqrt(alpha[i])
            if t > 1:
                x = x + torch.sqrt(beta[i]) * torch.randn((n, dim), generator=generator, dtype=DTYPE)
    raw = model.normalizer.denormalize(x.numpy())
    samples = raw
    n_out = 0
    if bounds is not None:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
        outside = np.any((raw < lower) | (raw > upper), axis=1)
        n_out = int(outside.sum())
        samples = np.clip(raw, lower, upper)
    elapsed = time.perf_counter() - start
    return SampleResult(samples, n_out, elapsed / n, raw)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def to_checkpoint(model: DiffusionModel) -> Dict:
    weights = {
        name: {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
        for name, t in model.denoiser.state_dict().items()
    }
    return {
        "format": CHECKPOINT_FORMAT,
        "topology": model.denoiser.topology,
        "weights": weights,
        "normalizer": model.normalizer.to_dict(),
        "schedule": {"betas": list(model.schedule.betas)},
        "train_config": asdict(model.config),
        "dataset_fingerprint": model.dataset_fingerprint,
        "history": model.history,
    }


def from_checkpoint(d: Dict) -> DiffusionModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise DiffusionError("not a diffusion checkpoint")
    topo = d["topology"]
    denoiser = Denoiser(topo["data_dim"], topo["hidden"], topo["layers"], topo["time_dim"], topo["cond_dim"], topo["T_steps"])
    state = {
        name: torch.tensor(w["values"], dtype=DTYPE).reshape(w["shape"])
        for name, w in d["weights"].items()
    }
    denoiser.load_state_dict(state)
    return DiffusionModel(
        denoiser=denoiser,
        normalizer=Normalizer.from_dict(d["normalizer"]),
        schedule=NoiseSchedule.from_betas(d["schedule"]["betas"]),
        config=TrainConfig(**d["train_config"]),
        dataset_fingerprint=d.get("dataset_fingerprint", ""),
        history=list(d.get("history", [])),
    )


def save_checkpoint(model: DiffusionModel, path, extra: Optional[Dict] = None):
    payload = to_checkpoint(model)
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> DiffusionModel:
    with open(path) as f:
        return from_checkpoint(json.load(f))
