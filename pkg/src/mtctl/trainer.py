"""Semi-supervised training loop, schedules, evaluation and checkpoints.

Each step updates the segmentation network on the composite objective with
the discriminator frozen, then updates the discriminator on the
least-squares loss with the segmentation network frozen. Dropout randomness
is reseeded from ``(seed, step)`` so a run resumed from a checkpoint replays
the unbroken run exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import CheckpointError, ContractError, NumericsError
from .losses import LossBreakdown, LossWeights, discriminator_loss, total_loss
from .metrics import MetricReport, case_metrics
from .network import Discriminator, MTCTLNet, NetConfig, init_params
from .transforms import DEFAULT_K, batch_sdm, binarize
from .uncertainty import LN2, McConfig, entropy_map, mc_sample
from .volumes import Case, read_mtv, write_mtv

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 6000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr_main: float = 0.01
    lr_disc: float = 1e-4
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    gamma_rampup_iters: int = 2000
    t_schedule: tuple = (0.75, 1.0)
    mc: McConfig = field(default_factory=McConfig)
    k: float = DEFAULT_K
    seed: int = 0
    checkpoint_every: int = 1000
    random_flips: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise ContractError("max_iters must be >= 0")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ContractError("batch_labeled must be >= 1 and batch_unlabeled >= 0")
        if not (self.lr_main > 0 and self.lr_disc > 0):
            raise ContractError("learning rates must be > 0")
        t0, t1 = (float(t) for t in self.t_schedule)
        if not (0 < t0 <= 1 and 0 < t1 <= 1 and t0 <= t1):
            raise ContractError(f"t_schedule must satisfy 0 < start <= end <= 1, got {self.t_schedule}")
        object.__setattr__(self, "t_schedule", (t0, t1))
        if not (self.k > 0 and math.isfinite(self.k)):
            raise ContractError("k must be positive and finite")
        if self.gamma_rampup_iters < 0 or self.checkpoint_every < 0:
            raise ContractError("gamma_rampup_iters and checkpoint_every must be >= 0")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.mc, dict):
            object.__setattr__(self, "mc", McConfig(**self.mc))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_schedule"] = list(self.t_schedule)
        return d

    @property
    def semi_supervised(self) -> bool:
        return self.batch_unlabeled > 0


def gamma_at(step: int, cfg: TrainConfig) -> float:
    """Sigmoid-shaped ramp gamma_max * exp(-5 (1 - s)^2), s = min(step / rampup, 1)."""
    if cfg.gamma_rampup_iters == 0:
        return cfg.weights.gamma
    s = min(max(step, 0) / cfg.gamma_rampup_iters, 1.0)
    return cfg.weights.gamma * math.exp(-5.0 * (1.0 - s) ** 2)


def threshold_at(step: int, cfg: TrainConfig) -> float:
    """Uncertainty threshold, linear from t_start * ln2 to t_end * ln2 over the ramp."""
    t0, t1 = cfg.t_schedule
    s = 1.0 if cfg.gamma_rampup_iters == 0 else min(max(step, 0) / cfg.gamma_rampup_iters, 1.0)
    return (t0 + (t1 - t0) * s) * LN2


@dataclass
class TrainState:
    step: int
    net: MTCTLNet
    disc: Discriminator
    opt_main: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    rng: np.random.Generator
    best_val_dice: float = -math.inf


def _optimizers(net, disc, cfg: TrainConfig):
    opt_main = torch.optim.SGD(net.parameters(), lr=cfg.lr_main, momentum=cfg.momentum)
    opt_disc = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=(0.5, 0.999))
    return opt_main, opt_disc


def init_state(net_cfg: NetConfig, cfg: TrainConfig) -> TrainState:
    net, disc = init_params(net_cfg)
    opt_main, opt_disc = _optimizers(net, disc, cfg)
    return TrainState(0, net, disc, opt_main, opt_disc, np.random.default_rng(cfg.seed))


# -- data -------------------------------------------------------------------

def _as_input(volumes) -> torch.Tensor:
    return torch.as_tensor(np.stack([v.data for v in volumes])[:, None], dtype=torch.float32)


@dataclass
class TrainData:
    """Stacked tensors for the labeled and unlabeled training cases."""

    x_l: torch.Tensor
    mask_l: torch.Tensor
    sdm_l: torch.Tensor
    x_ul: Optional[torch.Tensor] = None

    @classmethod
    def from_cases(cls, labeled: Sequence[Case], unlabeled: Sequence[Case] = ()):
        if not labeled:
            raise ContractError("need at least one labeled case")
        masks = np.stack([c.mask.data for c in labeled])[:, None]
        x_ul = _as_input([c.volume for c in unlabeled]) if unlabeled else None
        return cls(
            x_l=_as_input([c.volume for c in labeled]),
            mask_l=torch.as_tensor(masks, dtype=torch.float32),
            sdm_l=torch.as_tensor(batch_sdm(masks), dtype=torch.float32),
            x_ul=x_ul,
        )


def _draw(rng, n, size):
    return rng.choice(n, size=size, replace=n < size)


def sample_batches(state: TrainState, data: TrainData, cfg: TrainConfig):
    idx_l = _draw(state.rng, data.x_l.shape[0], cfg.batch_labeled)
    labeled = (data.x_l[idx_l], data.mask_l[idx_l], data.sdm_l[idx_l])
    unlabeled = None
    if cfg.batch_unlabeled and data.x_ul is not None:
        unlabeled = data.x_ul[_draw(state.rng, data.x_ul.shape[0], cfg.batch_unlabeled)]
    if cfg.random_flips:
        axes = [a + 2 for a in range(3) if state.rng.random() < 0.5]
        if axes:
            labeled = tuple(t.flip(axes) for t in labeled)
            unlabeled = None if unlabeled is None else unlabeled.flip(axes)
    return labeled, unlabeled


# -- optimization -------------------------------------------------------------

def _step_seed(cfg: TrainConfig, step: int, stream: int) -> int:
    return (cfg.seed * 1_000_003 + step * 7 + stream) % (2 ** 63)


def _check_finite(bd: LossBreakdown, step: int, *extra):
    values = [bd.total, bd.dice, bd.dist, bd.cross_task, bd.guidance, bd.adv_gm, *extra]
    if not all(math.isfinite(v) for v in values):
        raise NumericsError(f"non-finite loss {bd.to_dict()}", step=step)


def train_step(state: TrainState, labeled, unlabeled, cfg: TrainConfig):
    """One alternating update. Returns ``(state, breakdown)``; ``state`` is updated in place."""
    try:
        return _train_step(state, labeled, unlabeled, cfg)
    except NumericsError as exc:
        if exc.step is None:
            raise NumericsError(str(exc), step=state.step) from exc
        raise


def _train_step(state: TrainState, labeled, unlabeled, cfg: TrainConfig):
    x_l, mask_l, sdm_l = labeled
    if x_l.shape[0] == 0:
        raise ContractError("labeled batch is empty")
    step = state.step
    w = cfg.weights
    net, disc = state.net, state.disc
    has_ul = unlabeled is not None and unlabeled.shape[0] > 0
    adversarial = has_ul and w.gamma > 0
    x_all = torch.cat([x_l, unlabeled]) if has_ul else x_l
    t = threshold_at(step, cfg)

    uncertainty = None
    if w.lambda_g > 0:
        samples = mc_sample(net, x_all, cfg.mc.n_samples, seed=_step_seed(cfg, step, 1) + cfg.mc.seed)
        uncertainty = entropy_map(samples)

    # segmentation network update, discriminator frozen
    disc.requires_grad_(False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_step_seed(cfg, step, 0))
        seg, dist = net(x_all, mode="train")
    b = x_l.shape[0]
    out_l = (seg[:b], dist[:b])
    out_ul = (seg[b:], dist[b:]) if has_ul else None
    score_l = score_ul = None
    gamma = gamma_at(step, cfg)
    if adversarial:
        score_l = disc(x_l, sdm_l)
        score_ul = disc(unlabeled, out_ul[1])
    loss, bd = total_loss(out_l, mask_l, sdm_l, w, out_ul=out_ul, uncertainty=uncertainty,
                          t=t, k=cfg.k, score_l=score_l, score_ul=score_ul, gamma=gamma)
    _check_finite(bd, step)
    state.opt_main.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_main.step()
    disc.requires_grad_(True)

    # discriminator update, segmentation network frozen
    d_loss = math.nan
    if adversarial:
        d_l = disc(x_l, sdm_l)
        d_ul = disc(unlabeled, out_ul[1].detach())
        d = discriminator_loss(d_l, d_ul, swap=w.swap_adv_pairing)
        d_loss = d.item()
        if not math.isfinite(d_loss):
            raise NumericsError("non-finite discriminator loss", step=step)
        state.opt_disc.zero_grad(set_to_none=True)
        d.backward()
        state.opt_disc.step()
    bd.disc = d_loss
    bd.t = t

    state.step += 1
    return state, bd


def _record(bd: LossBreakdown, step: int, t0: float) -> dict:
    rec = {"step": step}
    rec.update(bd.to_dict())
    rec["wall_time"] = time.perf_counter() - t0
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()}


def fit(
    state: TrainState,
    data: TrainData,
    cfg: TrainConfig,
    *,
    log_path=None,
    checkpoint_dir=None,
    val_cases: Sequence[Case] = (),
    until: Optional[int] = None,
    on_step: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> list[dict]:
    """Run ``train_step`` up to ``until`` (default ``cfg.max_iters``); returns the log records."""
    until = cfg.max_iters if until is None else until
    records = []
    t0 = time.perf_counter()
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        while state.step < until:
            labeled, unlabeled = sample_batches(state, data, cfg)
            state, bd = train_step(state, labeled, unlabeled, cfg)
            rec = _record(bd, state.step, t0)
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(state.step, bd)
            done = state.step == until
            if checkpoint_dir is not None and (done or (cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0)):
                if val_cases:
                    dice = float(np.nanmean(evaluate(state.net, val_cases).column("dice")))
                    state.best_val_dice = max(state.best_val_dice, dice)
                    log.info("step %d: validation dice %.2f", state.step, dice)
                save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:06d}", cfg)
    finally:
        if log_fh is not None:
            log_fh.close()
    return records


@torch.no_grad()
def predict(model, volume_data: np.ndarray):
    """Eval-mode forward for one 3D array; returns numpy (seg, dist)."""
    x = torch.as_tensor(np.asarray(volume_data)[None, None], dtype=torch.float32)
    out = model(x, mode="eval")
    return out.seg[0, 0].numpy(), out.dist[0, 0].numpy()


def evaluate(model, cases: Sequence[Case], threshold: float = 0.5) -> MetricReport:
    """Metrics for each labeled case; probabilities >= threshold count as foreground."""
    if not cases:
        raise ContractError("need at least one validation case")
    rows = []
    for c in cases:
        if c.mask is None:
            raise ContractError(f"validation case {c.id!r} has no mask")
        seg, _ = predict(model, c.volume.data)
        rows.append(case_metrics(c.id, binarize(seg, threshold), c.mask.data, c.volume.spacing))
    return MetricReport(rows)


# -- checkpoints --------------------------------------------------------------

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tensor_items(state: TrainState):
    for name, t in state.net.state_dict().items():
        yield f"net/{name}", t
    for name, t in state.disc.state_dict().items():
        yield f"disc/{name}", t
    for tag, opt in (("opt_main", state.opt_main), ("opt_disc", state.opt_disc)):
        for idx, slots in opt.state_dict()["state"].items():
            for key, t in slots.items():
                yield f"{tag}/{idx}/{key}", t


def save_checkpoint(state: TrainState, path, cfg: TrainConfig) -> Path:
    """Directory with ``manifest.json`` plus one ``.mtv`` blob per tensor."""
    path = Path(path)
    (path / "blobs").mkdir(parents=True, exist_ok=True)
    blobs, scalars = {}, {}
    for i, (name, t) in enumerate(_tensor_items(state)):
        t = torch.as_tensor(t).detach()
        if t.dtype != torch.float32:
            raise CheckpointError(f"{name}: only float32 tensors are checkpointed, got {t.dtype}")
        if t.ndim == 0:
            scalars[name] = float(t)
            continue
        fname = f"blobs/{i:04d}.mtv"
        write_mtv(path / fname, t.reshape(-1, 1, 1).numpy())
        blobs[name] = {"file": fname, "shape": list(t.shape), "sha256": _sha(path / fname)}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "seed": cfg.seed,
        "best_val_dice": None if math.isinf(state.best_val_dice) else state.best_val_dice,
        "net_config": state.net.cfg.to_dict(),
        "disc_channels": state.disc.score.in_features // 8,
        "train_config": cfg.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "blobs": blobs,
        "scalars": scalars,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def read_checkpoint_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{mpath}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mpath}: unsupported checkpoint format {manifest.get('format')}")
    return manifest


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> tuple[TrainState, TrainConfig]:
    """Restore a training state. ``cfg`` defaults to the config stored in the checkpoint."""
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    try:
        net_cfg = NetConfig(**manifest["net_config"])
        if cfg is None:
            cfg = TrainConfig(**manifest["train_config"])
    except (TypeError, ContractError) as exc:
        raise CheckpointError(f"{path}: bad config in manifest ({exc})") from exc

    tensors = {}
    for name, meta in manifest["blobs"].items():
        fpath = path / meta["file"]
        if not fpath.exists() or _sha(fpath) != meta["sha256"]:
            raise CheckpointError(f"{path}: blob {name} missing or corrupted")
        try:
            arr = read_mtv(fpath)
        except Exception as exc:
            raise CheckpointError(f"{path}: blob {name} unreadable ({exc})") from exc
        if arr.size != int(np.prod(meta["shape"])):
            raise CheckpointError(f"{path}: blob {name} size does not match manifest shape")
        tensors[name] = torch.from_numpy(arr.reshape(meta["shape"]))
    for name, v in manifest["scalars"].items():
        tensors[name] = torch.tensor(v, dtype=torch.float32)

    net = MTCTLNet(net_cfg)
    disc = Discriminator(manifest["disc_channels"], net_cfg.in_channels + 1)
    try:
        net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net/")})
        disc.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("disc/")})
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter mismatch ({exc})") from exc
    opt_main, opt_disc = _optimizers(net, disc, cfg)
    for tag, opt in (("opt_main", opt_main), ("opt_disc", opt_disc)):
        slots = {}
        for name, t in tensors.items():
            parts = name.split("/")
            if parts[0] == tag:
                slots.setdefault(int(parts[1]), {})[parts[2]] = t
        sd = opt.state_dict()
        sd["state"] = slots
        opt.load_state_dict(sd)
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    best = manifest.get("best_val_dice")
    state = TrainState(manifest["step"], net, disc, opt_main, opt_disc, rng,
                       -math.inf if best is None else best)
    return state, cfg
