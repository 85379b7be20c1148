"""Residual U-Net depth estimator, MSE + SSIM loss, and the SSIM-weight grid search."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .render import DepthEncoding

log = logging.getLogger(__name__)

BETA_GRID = (0.001, 0.01, 0.1, 0.0, 1.0, 10.0, 100.0)


@dataclass
class ResUnetConfig:
    levels: int = 4
    base_filters: int = 64
    filter_growth: int = 64
    channels: int = 3

    def filters(self) -> list[int]:
        return [self.base_filters + self.filter_growth * i for i in range(self.levels)]


@dataclass
class DepthLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    window: int = 11
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")


class ResidualBlock(nn.Module):
    """conv3x3 (in->in, stride) -> BN -> ReLU -> conv3x3 (in->out) -> BN, plus identity.

    The identity path gets a 1x1 projection only when channels or resolution change.
    """

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv2 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.project = nn.Conv2d(cin, cout, 1, stride=stride) if (cin != cout or stride != 1) else None

    def forward(self, x):
        r = F.relu(self.bn1(self.conv1(x)))
        r = self.bn2(self.conv2(r))
        ident = x if self.project is None else self.project(x)
        return F.relu(r + ident)


class ResUNet(nn.Module):
    def __init__(self, cfg: ResUnetConfig = ResUnetConfig()):
        super().__init__()
        self.cfg = cfg
        f = cfg.filters()
        chans = [cfg.channels] + f
        self.down = nn.ModuleList(ResidualBlock(chans[i], chans[i + 1], stride=2) for i in range(cfg.levels))
        # decoder level i consumes upsampled features concatenated with encoder level i-1 (or the input)
        ups = []
        cin = f[-1]
        for i in range(cfg.levels - 1, -1, -1):
            cout = f[i - 1] if i > 0 else f[0]
            ups.append(ResidualBlock(cin + chans[i], cout))
            cin = cout
        self.up = nn.ModuleList(ups)
        self.head = nn.Conv2d(cin, 1, 1)

    def logits(self, x):
        h, w = x.shape[-2:]
        n = 2**self.cfg.levels
        if h % n or w % n:
            raise ValueError(f"input size {h}x{w} is not divisible by {n}")
        skips = [x]
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_residual_unet(cfg: ResUnetConfig = ResUnetConfig()) -> ResUNet:
    return ResUNet(cfg)


# -- losses ----------------------------------------------------------------------

def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    return ((pred - target) ** 2).mean()


def ssim(x, y, cfg: DepthLossConfig = DepthLossConfig()):
    """Mean SSIM over all complete ``window x window`` uniform windows (N x C x H x W tensors)."""
    if x.shape != y.shape:
        raise ValueError("ssim inputs must have the same shape")
    if x.dim() == 2:
        x, y = x[None, None], y[None, None]
    k = cfg.window
    if x.shape[-1] < k or x.shape[-2] < k:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the {k}x{k} SSIM window")
    pool = lambda t: F.avg_pool2d(t, k, stride=1)  # noqa: E731
    mx, my = pool(x), pool(y)
    vx = pool(x * x) - mx * mx
    vy = pool(y * y) - my * my
    cxy = pool(x * y) - mx * my
    num = (2 * mx * my + cfg.c1) * (2 * cxy + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return (num / den).mean()


def combined_loss(pred, target, cfg: DepthLossConfig = DepthLossConfig()):
    loss = cfg.alpha * mse_loss(pred, target)
    if cfg.beta:
        loss = loss + cfg.beta * (1 - ssim(pred, target, cfg))
    return loss


# -- data ------------------------------------------------------------------------

def to_tensors(rgb, depth=None):
    """uint8 N x H x W x 3 (and N x H x W quantized depth) -> unit-range NCHW float tensors."""
    x = torch.from_numpy(np.asarray(rgb, dtype=np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    if depth is None:
        return x
    y = torch.from_numpy(np.asarray(depth, dtype=np.float32) / 255.0)[:, None]
    return x, y


def _fingerprints(rgb) -> set[str]:
    return {hashlib.sha1(np.ascontiguousarray(im).tobytes()).hexdigest() for im in rgb}


def _augment_pairs(x, y, gen: torch.Generator, shift: float):
    n = x.shape[0]
    hf = (torch.rand(n, generator=gen) < 0.5)[:, None, None, None]
    vf = (torch.rand(n, generator=gen) < 0.5)[:, None, None, None]
    off = (torch.rand(n, x.shape[1], 1, 1, generator=gen) * 2 - 1) * shift
    x = torch.where(hf, x.flip(-1), x)
    y = torch.where(hf, y.flip(-1), y)
    x = torch.where(vf, x.flip(-2), x)
    y = torch.where(vf, y.flip(-2), y)
    return x + off, y


# -- training ----------------------------------------------------------------------

@dataclass
class DepthHyper:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    loss: DepthLossConfig = field(default_factory=DepthLossConfig)
    augment: bool = True
    color_shift: float = 0.05
    seed: int = 0
    max_steps: int | None = None
    threads: int | None = None


@dataclass
class DepthTrainResult:
    model: ResUNet
    history: list  # one dict per epoch
    best_epoch: int
    checkpoints: list = field(default_factory=list)


def select_epoch(val_losses) -> int:
    """1-indexed epoch with the lowest validation loss; ties -> earliest."""
    v = np.asarray(val_losses, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty history")
    return int(np.argmin(v)) + 1


@torch.no_grad()
def evaluate(model: ResUNet, x, y, loss_cfg: DepthLossConfig, enc: DepthEncoding = DepthEncoding(),
             batch_size: int = 16) -> dict:
    model.eval()
    preds = torch.cat([model(x[k:k + batch_size]) for k in range(0, len(x), batch_size)])
    rmse_norm = math.sqrt(mse_loss(preds, y).item())
    return {"loss": combined_loss(preds, y, loss_cfg).item(), "rmse_norm": rmse_norm,
            "rmse_cm": rmse_norm * (enc.d_max - enc.d_min)}


def depth_header(cfg: ResUnetConfig, hyper: DepthHyper, enc: DepthEncoding, epoch: int, loss: float) -> dict:
    return {"kind": "depthnet", "epoch": epoch, "loss": loss, "model": asdict(cfg),
            "loss_config": asdict(hyper.loss),
            "encoding": {"d_min": enc.d_min, "d_max": enc.d_max, "levels": enc.levels}}


def train_depthnet(train, val=None, hyper: DepthHyper = DepthHyper(), cfg: ResUnetConfig = ResUnetConfig(),
                   enc: DepthEncoding = DepthEncoding(), checkpoint_dir: str | Path | None = None) -> DepthTrainResult:
    """Train on ``(rgb, depth_q)`` uint8 arrays; the returned model holds the selected epoch's weights.

    Selection uses validation loss when ``val`` is given, otherwise training loss.
    """
    rgb, depth = train
    if len(rgb) == 0 or len(rgb) != len(depth):
        raise ValueError("training set must be non-empty with one depth frame per image")
    if val is not None and _fingerprints(rgb) & _fingerprints(val[0]):
        raise ValueError("train and val sets overlap")
    torch.manual_seed(hyper.seed)
    torch.use_deterministic_algorithms(True)
    if hyper.threads:
        torch.set_num_threads(hyper.threads)
    model = build_residual_unet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr, betas=(hyper.beta1, hyper.beta2))
    x, y = to_tensors(rgb, depth)
    vx, vy = (None, None) if val is None else to_tensors(*val)
    gen = torch.Generator().manual_seed(hyper.seed)
    bs = hyper.batch_size
    history, paths = [], []
    best, best_state, steps = math.inf, None, 0
    for epoch in range(1, hyper.epochs + 1):
        if hyper.max_steps is not None and steps >= hyper.max_steps:
            break
        model.train()
        order = torch.randperm(len(x), generator=gen)
        losses = []
        for k in range(0, len(x), bs):
            if hyper.max_steps is not None and steps >= hyper.max_steps:
                break
            xb, yb = x[order[k:k + bs]], y[order[k:k + bs]]
            if hyper.augment:
                xb, yb = _augment_pairs(xb, yb, gen, hyper.color_shift)
            loss = combined_loss(model(xb), yb, hyper.loss)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite depth loss at epoch {epoch}, step {steps}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            steps += 1
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "steps": steps}
        if vx is not None:
            v = evaluate(model, vx, vy, hyper.loss, enc, bs)
            rec.update(val_loss=v["loss"], val_rmse_norm=v["rmse_norm"], val_rmse_cm=v["rmse_cm"])
        history.append(rec)
        score = rec.get("val_loss", rec["train_loss"])
        if score < best:
            best = score
            best_state = {k: t.clone() for k, t in model.state_dict().items()}
        log.info("epoch %d: %s", epoch, rec)
        if checkpoint_dir is not None:
            paths.append(save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt", model.state_dict(),
                                         depth_header(cfg, hyper, enc, epoch, score)))
    if not history:
        raise ValueError("no training steps were run")
    best_epoch = select_epoch([h.get("val_loss", h["train_loss"]) for h in history])
    model.load_state_dict(best_state)
    model.eval()
    return DepthTrainResult(model, history, best_epoch, paths)


def save_depthnet(result: DepthTrainResult, path, hyper: DepthHyper = DepthHyper(),
                  enc: DepthEncoding = DepthEncoding()) -> Path:
    h = result.history[result.best_epoch - 1]
    return save_checkpoint(path, result.model.state_dict(),
                           depth_header(result.model.cfg, hyper, enc, result.best_epoch,
                                        h.get("val_loss", h["train_loss"])))


def load_depthnet(path) -> tuple[ResUNet, DepthEncoding]:
    header, state = load_checkpoint(path)
    if header.get("kind") != "depthnet":
        raise ValueError(f"{path} is not a depth checkpoint")
    model = build_residual_unet(ResUnetConfig(**header["model"]))
    model.load_state_dict(state)
    model.eval()
    e = header["encoding"]
    return model, DepthEncoding(e["d_min"], e["d_max"], e["levels"])


@torch.no_grad()
def predict_depth(model, rgb, enc: DepthEncoding | None = None, batch_size: int = 16) -> np.ndarray:
    """Depth in cm for a uint8 N x H x W x 3 batch (or one H x W x 3 image)."""
    if not isinstance(model, nn.Module):
        model, stored = load_depthnet(model)
        enc = enc or stored
    enc = enc or DepthEncoding()
    rgb = np.asarray(rgb)
    single = rgb.ndim == 3
    x = to_tensors(rgb[None] if single else rgb)
    model.eval()
    out = torch.cat([model(x[k:k + batch_size]) for k in range(0, len(x), batch_size)])
    cm = output_to_cm(out[:, 0].double().numpy(), enc)
    return cm[0] if single else cm


def output_to_cm(out: np.ndarray, enc: DepthEncoding = DepthEncoding()) -> np.ndarray:
    return enc.d_min + np.asarray(out, dtype=np.float64) * (enc.d_max - enc.d_min)


# -- grid search ------------------------------------------------------------------

@dataclass
class GridResult:
    best_beta: float
    report: list  # dicts: beta, best_epoch, val_rmse_cm, val_rmse_norm
    models: dict = field(default_factory=dict)


def grid_search_beta(train, val, betas=BETA_GRID, hyper: DepthHyper = DepthHyper(),
                     cfg: ResUnetConfig = ResUnetConfig(), enc: DepthEncoding = DepthEncoding()) -> GridResult:
    """One training per SSIM weight; best = lowest validation RMSE (cm), ties -> smaller beta."""
    betas = [float(b) for b in betas]
    if not betas:
        raise ValueError("empty beta grid")
    report, models = [], {}
    for b in betas:
        h = DepthHyper(**{**hyper.__dict__, "loss": DepthLossConfig(**{**asdict(hyper.loss), "beta": b})})
        res = train_depthnet(train, val, h, cfg, enc)
        vx, vy = to_tensors(*val)
        v = evaluate(res.model, vx, vy, h.loss, enc, h.batch_size)
        report.append({"beta": b, "best_epoch": res.best_epoch, "val_rmse_cm": v["rmse_cm"],
                       "val_rmse_norm": v["rmse_norm"]})
        models[b] = res
    best = min(report, key=lambda r: (r["val_rmse_cm"], r["beta"]))
    return GridResult(best["beta"], report, models)
