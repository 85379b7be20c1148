"""Unpaired simulation -> real texture translation with a cycle-consistent GAN.

G maps simulation frames (domain X) to the real domain (Y), F maps back, and
the patch discriminators D_X / D_Y judge each domain. Only G is used at
inference time.
"""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DatasetManifest, ManifestEntry, denormalize, image_brightness, normalize
from .render import save_png

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class GeneratorConfig:
    layers: int = 4
    base_filters: int = 32
    filter_growth: int = 32
    kernel: int = 4
    leaky_slope: float = 0.2
    channels: int = 3

    def filters(self) -> list[int]:
        return [self.base_filters + self.filter_growth * i for i in range(self.layers)]


@dataclass
class DiscriminatorConfig:
    layers: int = 4
    base_filters: int = 64
    filter_growth: int = 64
    kernel: int = 4
    leaky_slope: float = 0.2
    channels: int = 3

    def filters(self) -> list[int]:
        return [self.base_filters + self.filter_growth * i for i in range(self.layers)]


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def _same_pad(kernel: int) -> nn.ZeroPad2d:
    total = kernel - 1
    return nn.ZeroPad2d((total // 2, total - total // 2, total // 2, total - total // 2))


def _check_input(x: torch.Tensor, layers: int):
    h, w = x.shape[-2:]
    if h != w or h % (2**layers) or h < 2 ** (layers + 1):
        raise ValueError(f"input must be square with side a multiple of {2**layers} and at least "
                         f"{2 ** (layers + 1)}, got {h}x{w}")


class Down(nn.Module):
    """Stride-2 convolution -> leaky ReLU -> instance norm."""

    def __init__(self, cin, cout, kernel=4, slope=0.2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride=2, padding=(kernel - 2) // 2)
        self.act = nn.LeakyReLU(slope)
        self.norm = nn.InstanceNorm2d(cout, affine=False)

    def forward(self, x):
        return self.norm(self.act(self.conv(x)))


class Up(nn.Module):
    """Bilinear x2 upsampling, then the encoder's conv -> leaky ReLU -> instance norm."""

    def __init__(self, cin, cout, kernel=4, slope=0.2):
        super().__init__()
        self.pad = _same_pad(kernel)
        self.conv = nn.Conv2d(cin, cout, kernel)
        self.act = nn.LeakyReLU(slope)
        self.norm = nn.InstanceNorm2d(cout, affine=False)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.norm(self.act(self.conv(self.pad(x))))


class UNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        f = cfg.filters()
        chans = [cfg.channels] + f
        self.down = nn.ModuleList(Down(chans[i], chans[i + 1], cfg.kernel, cfg.leaky_slope) for i in range(cfg.layers))
        ups = []
        cin = f[-1]
        for i in range(cfg.layers - 1, 0, -1):
            ups.append(Up(cin, f[i - 1], cfg.kernel, cfg.leaky_slope))
            cin = 2 * f[i - 1]  # after concatenation with the matching encoder output
        self.up = nn.ModuleList(ups)
        self.out_pad = _same_pad(cfg.kernel)
        self.out_conv = nn.Conv2d(cin, cfg.channels, cfg.kernel)

    def forward(self, x):
        _check_input(x, self.cfg.layers)
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        x = skips.pop()
        for layer in self.up:
            x = torch.cat([layer(x), skips.pop()], dim=1)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.tanh(self.out_conv(self.out_pad(x)))


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.channels] + cfg.filters()
        self.body = nn.Sequential(*[Down(chans[i], chans[i + 1], cfg.kernel, cfg.leaky_slope)
                                    for i in range(cfg.layers)])
        self.pad = _same_pad(cfg.kernel)
        self.head = nn.Conv2d(chans[-1], 1, cfg.kernel)

    def forward(self, x):
        _check_input(x, self.cfg.layers)
        return self.head(self.pad(self.body(x)))


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> UNetGenerator:
    return UNetGenerator(cfg)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> PatchDiscriminator:
    return PatchDiscriminator(cfg)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# -- losses ------------------------------------------------------------------

def discriminator_loss(d_real, d_fake, mode: str = "log"):
    if mode == "log":
        p_real = torch.sigmoid(d_real).clamp(EPS, 1 - EPS)
        p_fake = torch.sigmoid(d_fake).clamp(EPS, 1 - EPS)
        return -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()
    if mode == "lsgan":
        return ((d_real - 1) ** 2).mean() + (d_fake**2).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def generator_loss(d_fake, mode: str = "log"):
    """Non-saturating generator term."""
    if mode == "log":
        return -torch.log(torch.sigmoid(d_fake).clamp(EPS, 1 - EPS)).mean()
    if mode == "lsgan":
        return ((d_fake - 1) ** 2).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adversarial_loss(d_real, d_fake, mode: str = "log"):
    """Returns ``(loss_D, loss_G)`` averaged over patch map and batch."""
    if d_real.shape != d_fake.shape:
        raise ValueError("logit maps must have the same shape")
    return discriminator_loss(d_real, d_fake, mode), generator_loss(d_fake, mode)


def cycle_loss(x, x_rec, y, y_rec, mode: str = "l2"):
    if x.shape != x_rec.shape or y.shape != y_rec.shape:
        raise ValueError("reconstructions must match their inputs")
    if mode == "l2":
        return ((x_rec - x) ** 2).mean() + ((y_rec - y) ** 2).mean()
    if mode == "l1":
        return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()
    raise ValueError(f"unknown cycle mode {mode!r}")


def total_loss(adv_xy, adv_yx, cyc, weights: LossWeights = LossWeights()):
    return weights.alpha * (adv_xy + adv_yx) + weights.beta * cyc


# -- training ------------------------------------------------------------------

@dataclass
class CycleGanHyper:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    adv_mode: str = "log"
    cycle_mode: str = "l2"
    augment: bool = True
    color_shift: float = 0.05
    seed: int = 0
    max_steps: int | None = None
    threads: int | None = None


@dataclass
class CycleGanState:
    G: UNetGenerator
    F: UNetGenerator
    D_X: PatchDiscriminator
    D_Y: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    epoch: int = 0
    history: list = field(default_factory=list)  # per-epoch mean generator objective
    steps: list = field(default_factory=list)  # per-step loss dicts


def _to_tensor(images, target="signed") -> torch.Tensor:
    arr = np.stack([normalize(im, target) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _augment_batch(x: torch.Tensor, gen: torch.Generator, shift: float) -> torch.Tensor:
    n = x.shape[0]
    hf = torch.rand(n, generator=gen) < 0.5
    vf = torch.rand(n, generator=gen) < 0.5
    off = (torch.rand(n, x.shape[1], 1, 1, generator=gen) * 2 - 1) * shift
    x = torch.where(hf[:, None, None, None], x.flip(-1), x)
    x = torch.where(vf[:, None, None, None], x.flip(-2), x)
    return x + off


def configure_determinism(seed: int, threads: int | None = None):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    if threads:
        torch.set_num_threads(threads)


def init_cyclegan(gen_cfg=GeneratorConfig(), disc_cfg=DiscriminatorConfig(), hyper=CycleGanHyper()) -> CycleGanState:
    configure_determinism(hyper.seed, hyper.threads)
    G, Fn = build_generator(gen_cfg), build_generator(gen_cfg)
    D_X, D_Y = build_discriminator(disc_cfg), build_discriminator(disc_cfg)
    betas = (hyper.beta1, hyper.beta2)
    opt_g = torch.optim.Adam(list(G.parameters()) + list(Fn.parameters()), lr=hyper.lr, betas=betas)
    opt_d = torch.optim.Adam(list(D_X.parameters()) + list(D_Y.parameters()), lr=hyper.lr, betas=betas)
    return CycleGanState(G, Fn, D_X, D_Y, opt_g, opt_d)


def train_step(state: CycleGanState, x: torch.Tensor, y: torch.Tensor, hyper: CycleGanHyper) -> dict:
    """One generator update followed by one discriminator update on fresh fakes."""
    G, Fn, D_X, D_Y = state.G, state.F, state.D_X, state.D_Y
    fake_y = G(x)
    fake_x = Fn(y)
    adv_xy = generator_loss(D_Y(fake_y), hyper.adv_mode)
    adv_yx = generator_loss(D_X(fake_x), hyper.adv_mode)
    cyc = cycle_loss(x, Fn(fake_y), y, G(fake_x), hyper.cycle_mode)
    gen_total = total_loss(adv_xy, adv_yx, cyc, hyper.weights)
    state.opt_g.zero_grad(set_to_none=True)
    gen_total.backward()
    state.opt_g.step()

    d_y = discriminator_loss(D_Y(y), D_Y(fake_y.detach()), hyper.adv_mode)
    d_x = discriminator_loss(D_X(x), D_X(fake_x.detach()), hyper.adv_mode)
    state.opt_d.zero_grad(set_to_none=True)
    (d_x + d_y).backward()
    state.opt_d.step()
    out = {"gen_total": gen_total.item(), "adv_xy": adv_xy.item(), "adv_yx": adv_yx.item(),
           "cycle": cyc.item(), "disc_x": d_x.item(), "disc_y": d_y.item()}
    if not all(math.isfinite(v) for v in out.values()):
        raise FloatingPointError(f"non-finite loss at epoch {state.epoch + 1}, step {len(state.steps)}: {out}")
    return out


def gan_header(state: CycleGanState, epoch: int, loss: float) -> dict:
    return {"kind": "cyclegan", "epoch": epoch, "gen_loss": loss,
            "generator": asdict(state.G.cfg), "discriminator": asdict(state.D_X.cfg)}


def train_cyclegan(sim_images, real_images, hyper: CycleGanHyper = CycleGanHyper(),
                   gen_cfg: GeneratorConfig = GeneratorConfig(), disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
                   checkpoint_dir: str | Path | None = None, state: CycleGanState | None = None):
    """Train on unpaired uint8 image lists; returns ``(state, checkpoint paths)``.

    An epoch is one pass over the simulation set; real batches are drawn
    from an independent shuffle that wraps around.
    """
    if len(sim_images) == 0 or len(real_images) == 0:
        raise ValueError("both image sets must be non-empty")
    state = state or init_cyclegan(gen_cfg, disc_cfg, hyper)
    xs, ys = _to_tensor(sim_images), _to_tensor(real_images)
    gen = torch.Generator().manual_seed(hyper.seed)
    bs = hyper.batch_size
    steps_per_epoch = math.ceil(len(xs) / bs)
    real_order = torch.randperm(len(ys), generator=gen)
    real_pos = 0
    paths = []
    for G_or_D in (state.G, state.F, state.D_X, state.D_Y):
        G_or_D.train()
    while state.epoch < hyper.epochs:
        if hyper.max_steps is not None and len(state.steps) >= hyper.max_steps:
            break
        order = torch.randperm(len(xs), generator=gen)
        epoch_losses = []
        for k in range(steps_per_epoch):
            if hyper.max_steps is not None and len(state.steps) >= hyper.max_steps:
                break
            x = xs[order[k * bs:(k + 1) * bs]]
            idx = []
            while len(idx) < len(x):
                if real_pos == len(ys):
                    real_order = torch.randperm(len(ys), generator=gen)
                    real_pos = 0
                take = min(len(x) - len(idx), len(ys) - real_pos)
                idx.extend(real_order[real_pos:real_pos + take].tolist())
                real_pos += take
            y = ys[idx]
            if hyper.augment:
                x = _augment_batch(x, gen, hyper.color_shift)
                y = _augment_batch(y, gen, hyper.color_shift)
            losses = train_step(state, x, y, hyper)
            state.steps.append(losses)
            epoch_losses.append(losses["gen_total"])
        if not epoch_losses:
            break
        state.epoch += 1
        mean = float(np.mean(epoch_losses))
        state.history.append(mean)
        log.info("epoch %d: generator objective %.5f", state.epoch, mean)
        if checkpoint_dir is not None:
            paths.append(save_cyclegan(state, Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.ckpt"))
    return state, paths


def save_cyclegan(state: CycleGanState, path: str | Path) -> Path:
    weights = {f"{name}.{k}": v for name, net in (("G", state.G), ("F", state.F), ("D_X", state.D_X),
                                                  ("D_Y", state.D_Y)) for k, v in net.state_dict().items()}
    loss = state.history[-1] if state.history else float("nan")
    return save_checkpoint(path, weights, gan_header(state, state.epoch, loss))


def load_generator(path: str | Path, which: str = "G") -> UNetGenerator:
    header, weights = load_checkpoint(path)
    if header.get("kind") != "cyclegan":
        raise ValueError(f"{path} is not a translation checkpoint")
    net = build_generator(GeneratorConfig(**header["generator"]))
    prefix = which + "."
    net.load_state_dict({k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)})
    net.eval()
    return net


def select_checkpoint(history, window: int = 1) -> int:
    """1-indexed epoch of the minimum (optionally trailing-mean smoothed) loss; ties -> earliest."""
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty history")
    if window > 1:
        c = np.cumsum(np.insert(h, 0, 0.0))
        lo = np.maximum(np.arange(1, len(h) + 1) - window, 0)
        h = (c[1:] - c[lo]) / (np.arange(1, len(h) + 1) - lo)
    return int(np.argmin(h)) + 1


class IdentityGenerator(nn.Module):
    """Pass-through stand-in for G, for plumbing tests."""

    def forward(self, x):
        return x


@torch.no_grad()
def translate_images(generator: nn.Module, images, batch_size: int = 16) -> list[np.ndarray]:
    generator.eval()
    out = []
    for k in range(0, len(images), batch_size):
        x = _to_tensor(images[k:k + batch_size])
        y = generator(x).permute(0, 2, 3, 1).numpy()
        out.extend(denormalize(im, "signed") for im in y)
    return out


def translate(generator, manifest: DatasetManifest, out_dir: str | Path, entries: list[ManifestEntry] | None = None,
              batch_size: int = 16) -> DatasetManifest:
    """Translate simulation frames with G; depth frames are copied byte-for-byte.

    ``generator`` is a module or a checkpoint path. Returns a manifest of the
    translated pairs (rooted at ``out_dir``), in input order.
    """
    if not isinstance(generator, nn.Module):
        generator = load_generator(generator)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if entries is None:
        entries = [e for e in manifest.entries if e.split not in ("excluded", "cyclegan-train")]
    result = []
    for k in range(0, len(entries), batch_size):
        chunk = entries[k:k + batch_size]
        imgs = translate_images(generator, [manifest.load_rgb(e) for e in chunk], batch_size)
        for e, img in zip(chunk, imgs):
            stem = Path(e.rgb).name.replace("_rgb", "")
            stem = stem[: -len(Path(stem).suffix)] if Path(stem).suffix else stem
            rgb_p = out_dir / f"{stem}_rgb.png"
            save_png(rgb_p, img)
            dep_rel = None
            if e.depth is not None:
                dep_p = out_dir / f"{stem}_depth.png"
                shutil.copyfile(manifest.resolve(e.depth), dep_p)
                dep_rel = dep_p.name
            result.append(ManifestEntry(rgb_p.name, dep_rel, "unassigned", image_brightness(img), "translated"))
    return DatasetManifest(result, manifest.encoding, manifest.seed, out_dir)
