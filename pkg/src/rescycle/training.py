"""CycleGAN training loop, checkpoint files and the loss log."""

from __future__ import annotations

import csv
import logging
import re
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .ingest import crop_offset, to_model_array
from .model import (
    NORM_KINDS,
    CycleGanModel,
    DiscriminatorConfig,
    GeneratorConfig,
    ImagePool,
    LossReport,
    Optimizers,
    Pools,
    TrainingDiverged,
    build_model,
    make_optimizers,
    training_step,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iter", "loss_G_total", "loss_D_clean", "loss_D_noisy",
               "loss_cycle_clean", "loss_cycle_noisy", "lr")
_LR_DECAY = re.compile(r"^linear_decay\((\d+)\)$")


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-4
    batch_size: int = 2
    crop_w: int = 400
    crop_h: int = 100
    checkpoint_every: int = 5
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.0
    pool_capacity: int = 50
    norm_kind: str = "instance"
    n_res_blocks: int = 9
    base_filters: int = 64
    seed: int = 0
    lr_schedule: str = "constant"
    max_steps: int = 0  # 0 means no cap

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.crop_w < 1 or self.crop_h < 1 or self.crop_w % 4 or self.crop_h % 4:
            raise ValueError(f"crop {self.crop_w}x{self.crop_h} must be positive multiples of 4")
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise ValueError("lambda_cycle and lambda_identity must be >= 0")
        if self.pool_capacity < 0 or self.max_steps < 0 or self.seed < 0:
            raise ValueError("pool_capacity, max_steps and seed must be >= 0")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        self.decay_start()
        self.generator_config()
        self.discriminator_config()

    def decay_start(self) -> int | None:
        if self.lr_schedule == "constant":
            return None
        m = _LR_DECAY.match(self.lr_schedule)
        if not m:
            raise ValueError(f"lr_schedule must be 'constant' or 'linear_decay(<epoch>)', got {self.lr_schedule!r}")
        start = int(m.group(1))
        if not 1 <= start < self.epochs:
            raise ValueError(f"linear decay start epoch {start} must lie in [1, epochs)")
        return start

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(base_filters=self.base_filters, n_res_blocks=self.n_res_blocks,
                               norm_kind=self.norm_kind)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_filters=self.base_filters, norm_kind=self.norm_kind)


def apply_lr_schedule(config: TrainConfig, epoch: int) -> float:
    start = config.decay_start()
    if start is None or epoch <= start:
        return config.learning_rate
    return config.learning_rate * max(0.0, (config.epochs - epoch) / (config.epochs - start))


def build_from_config(config: TrainConfig, dtype=np.float32) -> CycleGanModel:
    return build_model(config.generator_config(), config.discriminator_config(), seed=config.seed,
                       lambda_cycle=config.lambda_cycle, lambda_identity=config.lambda_identity, dtype=dtype)


# checkpoint files ------------------------------------------------------------

CKPT_MAGIC = b"CGCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


@dataclass
class CheckpointFile:
    """Raw contents of a checkpoint: named float32 tensors plus optional training state."""

    epoch: int
    tensors: dict[str, np.ndarray]
    state: dict[str, np.ndarray] | None = None


def _pack_tensors(named: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode_checkpoint(ck: CheckpointFile) -> bytes:
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, ck.epoch), _pack_tensors(ck.tensors)]
    if ck.state is None:
        body.append(b"\x00")
    else:
        body.append(b"\x01")
        body.append(_pack_tensors(ck.state))
    return b"".join(body)


class _Reader:
    def __init__(self, buf, source):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.source}: truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def tensors(self):
        (count,) = self.unpack("<I", "tensor count")
        named = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "name length")
            try:
                name = self.take(nlen, "tensor name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointFormatError(f"{self.source}: tensor name is not UTF-8") from exc
            (ndim,) = self.unpack("<B", f"rank of {name}")
            shape = self.unpack(f"<{ndim}I", f"extents of {name}")
            n = int(np.prod(shape)) if ndim else 1
            payload = self.take(4 * n, f"payload of {name}")
            if name in named:
                raise CheckpointFormatError(f"{self.source}: duplicate tensor {name!r}")
            named[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return named


def decode_checkpoint(buf: bytes, source="<bytes>") -> CheckpointFile:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    version, epoch = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    tensors = r.tensors()
    (flag,) = r.unpack("<B", "optimizer-state flag")
    if flag not in (0, 1):
        raise CheckpointFormatError(f"{source}: invalid optimizer-state flag {flag}")
    state = r.tensors() if flag else None
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{source}: {len(buf) - r.pos} trailing bytes")
    return CheckpointFile(epoch, tensors, state)


def model_tensors(model: CycleGanModel) -> dict[str, np.ndarray]:
    named = {name: p.data for name, p in model.named_parameters()}
    named.update(model.named_buffers())
    return named


def training_state(optimizers: Optimizers | None, pools: Pools | None) -> dict[str, np.ndarray]:
    """Flatten Adam moments, step counters and pool contents into named tensors."""
    state = {}
    if optimizers is not None:
        for tag, opt in (("gen", optimizers.gen), ("disc", optimizers.disc)):
            steps = {st.step for st in opt.states.values()}
            state[f"opt.{tag}.step"] = np.array([max(steps) if steps else 0], dtype=np.float32)
            for name, st in opt.states.items():
                state[f"opt.{tag}.m.{name}"] = st.m
                state[f"opt.{tag}.v.{name}"] = st.v
    if pools is not None:
        for tag, pool in (("clean", pools.clean), ("noisy", pools.noisy)):
            for i, img in enumerate(pool.images):
                state[f"pool.{tag}.{i:04d}"] = img
    return state


def save_checkpoint(model: CycleGanModel, path, epoch: int, optimizers: Optimizers | None = None,
                    pools: Pools | None = None) -> CheckpointFile:
    has_state = optimizers is not None or pools is not None
    ck = CheckpointFile(epoch, model_tensors(model), training_state(optimizers, pools) if has_state else None)
    Path(path).write_bytes(encode_checkpoint(ck))
    return ck


def read_checkpoint(path) -> CheckpointFile:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), source=str(path))


def _assign(target: np.ndarray, value: np.ndarray, name: str):
    if target.shape != value.shape:
        raise ArchitectureMismatchError(
            f"{name}: checkpoint shape {tuple(value.shape)} != model shape {tuple(target.shape)}")
    target[...] = value


def apply_checkpoint(ck: CheckpointFile, model: CycleGanModel, optimizers: Optimizers | None = None,
                     pools: Pools | None = None) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, value in ck.tensors.items():
        if name in params:
            _assign(params[name].data, value, name)
        elif name in buffers:
            _assign(buffers[name], value, name)
        else:
            raise UnknownParameterError(f"checkpoint tensor {name!r} does not exist in the model")
    missing = (set(params) | set(buffers)) - set(ck.tensors)
    if missing:
        raise ArchitectureMismatchError(f"checkpoint lacks {len(missing)} model tensors, e.g. {min(missing)!r}")
    if ck.state is None:
        return
    if optimizers is not None:
        for tag, opt in (("gen", optimizers.gen), ("disc", optimizers.disc)):
            step_key = f"opt.{tag}.step"
            if step_key not in ck.state:
                raise CheckpointFormatError(f"checkpoint has no optimizer state {step_key!r}")
            step = int(ck.state[step_key][0])
            for name, st in opt.states.items():
                _assign(st.m, ck.state[f"opt.{tag}.m.{name}"], f"opt.{tag}.m.{name}")
                _assign(st.v, ck.state[f"opt.{tag}.v.{name}"], f"opt.{tag}.v.{name}")
                st.step = step
    if pools is not None:
        for tag, pool in (("clean", pools.clean), ("noisy", pools.noisy)):
            keys = sorted(k for k in ck.state if k.startswith(f"pool.{tag}."))
            pool.images = [ck.state[k].copy() for k in keys]
    known = ("opt.gen.", "opt.disc.", "pool.clean.", "pool.noisy.")
    for key in ck.state:
        if not key.startswith(known):
            raise UnknownParameterError(f"unknown training-state tensor {key!r}")


def load_checkpoint(path, model: CycleGanModel, optimizers: Optimizers | None = None,
                    pools: Pools | None = None) -> int:
    """Load a checkpoint into an existing model; returns the stored epoch."""
    ck = read_checkpoint(path)
    apply_checkpoint(ck, model, optimizers, pools)
    return ck.epoch


def infer_config(tensors: dict[str, np.ndarray], base: TrainConfig | None = None) -> TrainConfig:
    """Recover the architecture fields of a TrainConfig from checkpoint tensors."""
    try:
        head = tensors["G.head.weight"]
    except KeyError:
        raise CheckpointFormatError("checkpoint has no G.head.weight tensor") from None
    blocks = {int(m.group(1)) for k in tensors if (m := re.match(r"G\.blocks\.(\d+)\.", k))}
    if "G.head_norm.norms.0.gamma" in tensors:
        norm = "instance_then_batch"
    elif "G.head_norm.running_mean" in tensors:
        norm = "batch"
    else:
        norm = "instance"
    values = asdict(base) if base is not None else {}
    values.update(base_filters=int(head.shape[0]), n_res_blocks=len(blocks), norm_kind=norm)
    return TrainConfig(**values)


# training loop -----------------------------------------------------------------


@dataclass
class LogRow:
    epoch: int
    iter: int
    report: LossReport
    lr: float
    timestamp: float = 0.0

    def values(self):
        r = self.report
        return (self.epoch, self.iter, r.loss_G_total, r.loss_D_clean, r.loss_D_noisy,
                r.loss_cycle_clean, r.loss_cycle_noisy, self.lr)


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def append(self, row: LogRow):
        if self.rows and (row.epoch, row.iter) <= (self.rows[-1].epoch, self.rows[-1].iter):
            raise ValueError("log rows must be strictly ordered by (epoch, iter)")
        self.rows.append(row)

    def epoch_means(self) -> dict[int, dict[str, float]]:
        out = {}
        for ep in sorted({r.epoch for r in self.rows}):
            rows = [r.values() for r in self.rows if r.epoch == ep]
            out[ep] = {c: float(np.mean([v[i] for v in rows])) for i, c in enumerate(LOG_COLUMNS) if i >= 2}
        return out

    def cycle_totals(self) -> np.ndarray:
        return np.array([r.report.loss_cycle_clean + r.report.loss_cycle_noisy for r in self.rows])


def format_log_row(values) -> str:
    return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in values)


def write_log_csv(log_: TrainLog, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        fh.writelines(format_log_row(row.values()) + "\n" for row in log_.rows)


def read_log_csv(path) -> TrainLog:
    out = TrainLog()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected log header {reader.fieldnames}")
        for rec in reader:
            rep = LossReport(*(float(rec[c]) for c in LOG_COLUMNS[2:7]))
            out.append(LogRow(int(rec["epoch"]), int(rec["iter"]), rep, float(rec["lr"])))
    return out


def ema(values, beta=0.9) -> np.ndarray:
    """Exponential moving average seeded with the first value."""
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else beta * acc + (1 - beta) * v
        out[i] = acc
    return out


@dataclass
class TrainResult:
    log: TrainLog
    checkpoints: list[Path]
    final_checkpoint: Path | None
    stopped_early: bool = False


def checkpoint_path(output_dir, epoch: int) -> Path:
    return Path(output_dir) / "checkpoints" / f"epoch_{epoch:04d}.ckpt"


def _epoch_rng(seed, epoch, stream=0):
    return np.random.default_rng([seed, epoch, stream])


def _check_corpus(name, images, config):
    if not images:
        raise ValueError(f"{name} corpus is empty")
    for i, img in enumerate(images):
        if img.ndim != 2 or img.shape[0] < config.crop_h or img.shape[1] < config.crop_w:
            raise ValueError(f"{name} image {i} of shape {img.shape} is smaller than the "
                             f"{config.crop_w}x{config.crop_h} crop")


def _batch(images, indices, config, rng) -> Tensor:
    crops = []
    for i in indices:
        img = images[i]
        top, left = crop_offset(img.shape, config.crop_w, config.crop_h, rng)
        crops.append(to_model_array(img[top:top + config.crop_h, left:left + config.crop_w])[None])
    return Tensor(np.stack(crops), dtype=np.float32)


def train(config: TrainConfig, clean_images, noisy_images, output_dir, resume=None,
          write_config=None) -> TrainResult:
    """Train on two unpaired lists of uint8 images, checkpointing into ``output_dir``.

    The run is a pure function of (config, corpora): every epoch draws its
    shuffles, crops and pool decisions from generators seeded by (seed, epoch),
    so resuming from an epoch-k checkpoint replays epoch k+1 exactly.
    """
    _check_corpus("clean", clean_images, config)
    _check_corpus("noisy", noisy_images, config)
    n_pairs = min(len(clean_images), len(noisy_images))
    if n_pairs < config.batch_size:
        raise ValueError(f"each corpus needs at least batch_size={config.batch_size} images, "
                         f"the smaller has {n_pairs}")
    steps_per_epoch = n_pairs // config.batch_size

    out = Path(output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if write_config is not None:
        write_config(config, out / "train_config.txt")

    model = build_from_config(config)
    d_min = model.D_clean.min_input_size()
    if min(config.crop_w, config.crop_h) < d_min:
        raise ValueError(f"crop {config.crop_w}x{config.crop_h} is below the discriminator minimum of {d_min}")
    optimizers = make_optimizers(model, config.learning_rate)
    pools = Pools(ImagePool(config.pool_capacity), ImagePool(config.pool_capacity))

    trainlog = TrainLog()
    start_epoch = 1
    log_path = out / "train_log.csv"
    if resume is not None:
        start_epoch = load_checkpoint(resume, model, optimizers, pools) + 1
        log.info("resumed from %s at epoch %d", resume, start_epoch - 1)
        if log_path.exists():
            for row in read_log_csv(log_path).rows:
                if row.epoch < start_epoch:
                    trainlog.append(row)

    step = 0
    if resume is not None:
        # one generator Adam update per training step, so the restored counter is the step count
        step = max((st.step for st in optimizers.gen.states.values()), default=0)
        if not step:
            step = trainlog.rows[-1].iter if trainlog.rows else (start_epoch - 1) * steps_per_epoch
    saved: list[Path] = []
    last_saved = None
    stopped = False
    with open(log_path, "w", newline="") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in trainlog.rows:
            fh.write(format_log_row(row.values()) + "\n")
        fh.flush()
        for epoch in range(start_epoch, config.epochs + 1):
            lr = apply_lr_schedule(config, epoch)
            optimizers.set_lr(lr)
            rng = _epoch_rng(config.seed, epoch)
            pools.clean.rng = _epoch_rng(config.seed, epoch, 1)
            pools.noisy.rng = _epoch_rng(config.seed, epoch, 2)
            perm_c = rng.permutation(len(clean_images))[:n_pairs]
            perm_n = rng.permutation(len(noisy_images))[:n_pairs]
            for it in range(steps_per_epoch):
                sl = slice(it * config.batch_size, (it + 1) * config.batch_size)
                batch_c = _batch(clean_images, perm_c[sl], config, rng)
                batch_n = _batch(noisy_images, perm_n[sl], config, rng)
                try:
                    report = training_step(model, batch_c, batch_n, pools, optimizers)
                except TrainingDiverged:
                    log.error("training diverged at epoch %d iteration %d", epoch, step + 1)
                    raise
                step += 1
                row = LogRow(epoch, step, report, lr, time.time())
                trainlog.append(row)
                fh.write(format_log_row(row.values()) + "\n")
                fh.flush()
                if config.max_steps and step >= config.max_steps:
                    stopped = True
                    break
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs or stopped:
                path = checkpoint_path(out, epoch)
                save_checkpoint(model, path, epoch, optimizers, pools)
                saved.append(path)
                last_saved = path
                log.info("epoch %d: saved %s", epoch, path.name)
            if stopped:
                break
    return TrainResult(trainlog, saved, last_saved, stopped)


def config_fields():
    return [f.name for f in fields(TrainConfig)]
