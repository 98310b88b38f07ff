"""ResNet generator, PatchGAN discriminator and the CycleGAN objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam

NORM_KINDS = ("instance", "batch", "instance_then_batch")


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite; the update was not applied."""


class Module:
    """Base class giving named, ordered access to parameters and buffers."""

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("running_") and isinstance(value, np.ndarray):
                yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def __call__(self, x):
        return self.forward(x)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=arr.dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, pad_mode="zero", dtype=np.float32):
        self.weight = _param(rng.normal(0.0, 0.02, (cout, cin, kernel, kernel)).astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype))
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, output_padding=0, dtype=np.float32):
        self.weight = _param(rng.normal(0.0, 0.02, (cin, cout, kernel, kernel)).astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype))
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Norm(Module):
    """Single instance or batch normalization with affine parameters."""

    def __init__(self, kind, channels, rng, eps=1e-5, dtype=np.float32):
        self.kind = kind
        self.eps = eps
        self.gamma = _param(rng.normal(1.0, 0.02, channels).astype(dtype))
        self.beta = _param(np.zeros(channels, dtype=dtype))
        if kind == "batch":
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if self.kind == "batch":
            return ad.normalize(x, "batch", self.gamma, self.beta, self.eps,
                                self.running_mean, self.running_var, training=self.training)
        return ad.normalize(x, "instance", self.gamma, self.beta, self.eps)


def make_norm(kind, channels, rng, dtype=np.float32):
    if kind == "instance_then_batch":
        return NormChain([Norm("instance", channels, rng, dtype=dtype), Norm("batch", channels, rng, dtype=dtype)])
    if kind not in ("instance", "batch"):
        raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {kind!r}")
    return Norm(kind, channels, rng, dtype=dtype)


class NormChain(Module):
    def __init__(self, norms):
        self.norms = norms

    def forward(self, x):
        for n in self.norms:
            x = n(x)
        return x


@dataclass
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_filters: int = 64
    n_res_blocks: int = 9
    norm_kind: str = "instance"

    def __post_init__(self):
        if self.n_res_blocks < 1:
            raise ValueError(f"n_res_blocks must be >= 1, got {self.n_res_blocks}")
        if self.base_filters < 4:
            raise ValueError(f"base_filters must be >= 4, got {self.base_filters}")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    base_filters: int = 64
    n_layers: int = 3
    slope: float = 0.2
    norm_kind: str = "instance"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")


class ResidualBlock(Module):
    def __init__(self, channels, norm_kind, rng, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1, pad_mode="reflection", dtype=dtype)
        self.norm1 = make_norm(norm_kind, channels, rng, dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, pad_mode="reflection", dtype=dtype)
        self.norm2 = make_norm(norm_kind, channels, rng, dtype)

    def forward(self, x):
        h = ad.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator(Module):
    """c7s1-k, d2k, d4k, n x R4k, u2k, uk, c7s1-out, tanh."""

    def __init__(self, cfg: GeneratorConfig, rng, dtype=np.float32):
        self.cfg = cfg
        nf, nk = cfg.base_filters, cfg.norm_kind
        self.head = Conv2d(cfg.in_channels, nf, 7, rng, padding=3, pad_mode="reflection", dtype=dtype)
        self.head_norm = make_norm(nk, nf, rng, dtype)
        self.down = [Conv2d(nf, 2 * nf, 3, rng, stride=2, padding=1, dtype=dtype),
                     Conv2d(2 * nf, 4 * nf, 3, rng, stride=2, padding=1, dtype=dtype)]
        self.down_norm = [make_norm(nk, 2 * nf, rng, dtype), make_norm(nk, 4 * nf, rng, dtype)]
        self.blocks = [ResidualBlock(4 * nf, nk, rng, dtype) for _ in range(cfg.n_res_blocks)]
        self.up = [ConvTranspose2d(4 * nf, 2 * nf, 3, rng, stride=2, padding=1, output_padding=1, dtype=dtype),
                   ConvTranspose2d(2 * nf, nf, 3, rng, stride=2, padding=1, output_padding=1, dtype=dtype)]
        self.up_norm = [make_norm(nk, 2 * nf, rng, dtype), make_norm(nk, nf, rng, dtype)]
        self.tail = Conv2d(nf, cfg.out_channels, 7, rng, padding=3, pad_mode="reflection", dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"generator expects (B, {self.cfg.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input H and W must be divisible by 4, got {h}x{w}")
        x = ad.relu(self.head_norm(self.head(x)))
        for conv, norm in zip(self.down, self.down_norm):
            x = ad.relu(norm(conv(x)))
        for block in self.blocks:
            x = block(x)
        for conv, norm in zip(self.up, self.up_norm):
            x = ad.relu(norm(conv(x)))
        return ad.tanh(self.tail(x))


def build_generator(cfg: GeneratorConfig, rng=None, dtype=np.float32) -> Generator:
    return Generator(cfg, rng if rng is not None else np.random.default_rng(0), dtype)


class Discriminator(Module):
    """70x70 PatchGAN: outputs one real-valued score per receptive-field patch."""

    def __init__(self, cfg: DiscriminatorConfig, rng, dtype=np.float32):
        self.cfg = cfg
        nf = cfg.base_filters
        chans = [cfg.in_channels] + [nf * min(2 ** i, 8) for i in range(cfg.n_layers + 1)]
        self.convs = [Conv2d(chans[i], chans[i + 1], 4, rng, stride=2, padding=1, dtype=dtype)
                      for i in range(cfg.n_layers)]
        self.convs.append(Conv2d(chans[-2], chans[-1], 4, rng, stride=1, padding=1, dtype=dtype))
        # first layer is never normalized
        self.norms = [make_norm(cfg.norm_kind, c, rng, dtype) for c in chans[2:]]
        self.out = Conv2d(chans[-1], 1, 4, rng, stride=1, padding=1, dtype=dtype)

    def output_size(self, size: int) -> int:
        for conv in self.convs:
            size = ad.conv_output_size(size, 4, conv.stride, 1)
        return ad.conv_output_size(size, 4, 1, 1)

    def min_input_size(self) -> int:
        size = 1
        while self.output_size(size) < 1:
            size += 1
        return size

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"discriminator expects (B, {self.cfg.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if self.output_size(h) < 1 or self.output_size(w) < 1:
            raise ValueError(f"discriminator input {h}x{w} is smaller than the minimum "
                             f"{self.min_input_size()}x{self.min_input_size()} that yields a patch score")
        x = ad.leaky_relu(self.convs[0](x), self.cfg.slope)
        for conv, norm in zip(self.convs[1:], self.norms):
            x = ad.leaky_relu(norm(conv(x)), self.cfg.slope)
        return self.out(x)


def build_discriminator(cfg: DiscriminatorConfig, rng=None, dtype=np.float32) -> Discriminator:
    return Discriminator(cfg, rng if rng is not None else np.random.default_rng(0), dtype)


# losses ------------------------------------------------------------------------


def gan_loss(scores: Tensor, target_is_real: bool) -> Tensor:
    """Least-squares adversarial loss against a constant 1 (real) or 0 (fake) target."""
    return ((scores - (1.0 if target_is_real else 0.0)).square()).mean()


def cycle_loss(original: Tensor, reconstructed: Tensor, lambda_cycle: float) -> Tensor:
    if original.shape != reconstructed.shape:
        raise ValueError(f"cycle_loss: shape mismatch {original.shape} vs {reconstructed.shape}")
    return (original - reconstructed).abs().mean() * lambda_cycle


class ImagePool:
    """History buffer of generated images shown to the discriminators."""

    def __init__(self, capacity=50, seed=0):
        self.capacity = capacity
        self.images: list[np.ndarray] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.images)

    def query_one(self, image: np.ndarray) -> np.ndarray:
        if self.capacity <= 0:
            return image
        if len(self.images) < self.capacity:
            self.images.append(image.copy())
            return image
        if self.rng.uniform() > 0.5:
            idx = int(self.rng.integers(0, self.capacity))
            out = self.images[idx]
            if out.shape != image.shape:
                # crop geometry changed; never hand back a mismatched image
                self.images[idx] = image.copy()
                return image
            self.images[idx] = image.copy()
            return out
        return image

    def query(self, images: Tensor) -> Tensor:
        """Apply the pool rule to each image of a batch; the result is detached."""
        out = np.stack([self.query_one(img) for img in images.data])
        return Tensor(out, dtype=images.dtype)


# full model --------------------------------------------------------------------


@dataclass
class LossReport:
    loss_G_total: float
    loss_D_clean: float
    loss_D_noisy: float
    loss_cycle_clean: float
    loss_cycle_noisy: float
    loss_adv_noisy: float = 0.0
    loss_adv_clean: float = 0.0
    loss_identity: float = 0.0

    def components_sum(self) -> float:
        return (self.loss_adv_noisy + self.loss_adv_clean + self.loss_cycle_clean
                + self.loss_cycle_noisy + self.loss_identity)


@dataclass
class CycleGanModel:
    """G maps clean -> noisy, F maps noisy -> clean."""

    G: Generator
    F: Generator
    D_clean: Discriminator
    D_noisy: Discriminator
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.0

    def networks(self):
        return {"G": self.G, "F": self.F, "D_clean": self.D_clean, "D_noisy": self.D_noisy}

    def named_parameters(self):
        for net_name, net in self.networks().items():
            yield from net.named_parameters(net_name + ".")

    def named_buffers(self):
        for net_name, net in self.networks().items():
            yield from net.named_buffers(net_name + ".")

    def train(self, mode=True):
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self):
        return self.train(False)


def build_model(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed=0,
                lambda_cycle=10.0, lambda_identity=0.0, dtype=np.float32) -> CycleGanModel:
    if lambda_cycle < 0 or lambda_identity < 0:
        raise ValueError("loss weights must be non-negative")
    rng = np.random.default_rng(seed)
    return CycleGanModel(G=Generator(gen_cfg, rng, dtype), F=Generator(gen_cfg, rng, dtype),
                         D_clean=Discriminator(disc_cfg, rng, dtype), D_noisy=Discriminator(disc_cfg, rng, dtype),
                         lambda_cycle=lambda_cycle, lambda_identity=lambda_identity)


@dataclass
class Optimizers:
    gen: Adam
    disc: Adam

    def set_lr(self, lr):
        self.gen.set_lr(lr)
        self.disc.set_lr(lr)


def make_optimizers(model: CycleGanModel, lr=1e-4, beta1=0.5, beta2=0.999) -> Optimizers:
    gen = [(f"{n}.{k}", p) for n in ("G", "F") for k, p in model.networks()[n].named_parameters()]
    disc = [(f"{n}.{k}", p) for n in ("D_clean", "D_noisy") for k, p in model.networks()[n].named_parameters()]
    return Optimizers(Adam(gen, lr, beta1, beta2), Adam(disc, lr, beta1, beta2))


@dataclass
class Pools:
    clean: ImagePool = field(default_factory=ImagePool)
    noisy: ImagePool = field(default_factory=ImagePool)


def _check_finite(**losses):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"non-finite loss: {bad}")


def training_step(model: CycleGanModel, batch_clean: Tensor, batch_noisy: Tensor,
                  pools: Pools, optimizers: Optimizers) -> LossReport:
    """One generator update followed by one update of each discriminator."""
    if batch_clean.shape != batch_noisy.shape:
        raise ValueError(f"clean batch {batch_clean.shape} and noisy batch {batch_noisy.shape} differ")
    G, F, D_clean, D_noisy = model.G, model.F, model.D_clean, model.D_noisy
    lam = model.lambda_cycle

    # generators, with the discriminators frozen
    D_clean.requires_grad_(False)
    D_noisy.requires_grad_(False)
    optimizers.gen.zero_grad()
    fake_noisy = G(batch_clean)
    rec_clean = F(fake_noisy)
    fake_clean = F(batch_noisy)
    rec_noisy = G(fake_clean)
    adv_noisy = gan_loss(D_noisy(fake_noisy), True)
    adv_clean = gan_loss(D_clean(fake_clean), True)
    cyc_clean = cycle_loss(batch_clean, rec_clean, lam)
    cyc_noisy = cycle_loss(batch_noisy, rec_noisy, lam)
    loss_g = adv_noisy + adv_clean + cyc_clean + cyc_noisy
    idt = 0.0
    if model.lambda_identity > 0:
        idt_loss = (cycle_loss(batch_noisy, G(batch_noisy), lam * model.lambda_identity)
                    + cycle_loss(batch_clean, F(batch_clean), lam * model.lambda_identity))
        loss_g = loss_g + idt_loss
        idt = idt_loss.item()
    loss_g.backward()

    D_clean.requires_grad_(True)
    D_noisy.requires_grad_(True)
    optimizers.disc.zero_grad()
    pooled_noisy = pools.noisy.query(fake_noisy.detach())
    pooled_clean = pools.clean.query(fake_clean.detach())
    loss_d_noisy = (gan_loss(D_noisy(batch_noisy), True) + gan_loss(D_noisy(pooled_noisy), False)) * 0.5
    loss_d_clean = (gan_loss(D_clean(batch_clean), True) + gan_loss(D_clean(pooled_clean), False)) * 0.5
    # nothing has been applied yet, so a divergent step leaves the weights untouched
    _check_finite(loss_G_total=loss_g.item(), loss_D_clean=loss_d_clean.item(),
                  loss_D_noisy=loss_d_noisy.item())
    (loss_d_noisy + loss_d_clean).backward()
    optimizers.gen.step()
    optimizers.disc.step()

    return LossReport(
        loss_G_total=loss_g.item(),
        loss_D_clean=loss_d_clean.item(),
        loss_D_noisy=loss_d_noisy.item(),
        loss_cycle_clean=cyc_clean.item(),
        loss_cycle_noisy=cyc_noisy.item(),
        loss_adv_noisy=adv_noisy.item(),
        loss_adv_clean=adv_clean.item(),
        loss_identity=idt,
    )
