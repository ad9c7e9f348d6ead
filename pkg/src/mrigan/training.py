"""Adversarial training loop, sample grids and checkpoint plumbing."""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .checkpoint import Checkpoint
from .errors import ConfigError, DatasetEmpty, ShapeMismatch
from .layers import AvgPool2x, Sequential
from .model import (
    AdamState,
    ArchitectureSchedule,
    adam_step,
    bce,
    build_discriminator,
    build_generator,
    init_params,
    sample_noise,
)
from .rng import STREAM_INIT, STREAM_SAMPLES, STREAM_SUBSAMPLE, STREAM_TRAIN, from_state, get_state, make_rng
from .slices import DatasetTensor, export_png

log = logging.getLogger(__name__)

# fields that change the numerical trajectory; everything else is scheduling
TRAJECTORY_FIELDS = ("image_size", "batch_size", "lr", "max_images", "seed", "d_steps_per_g_step")


@dataclass
class TrainConfig:
    image_size: int = 256
    batch_size: int = 32
    epochs: int = 1
    lr: float = 1e-5
    dataset_path: str | None = None
    max_images: int = 10000
    checkpoint_every: int = 0
    sample_every: int = 0
    sample_grid: tuple[int, int] = (3, 3)
    seed: int = 0
    d_steps_per_g_step: int = 1
    run_dir: str | None = None
    deterministic: bool = False

    def __post_init__(self):
        self.sample_grid = tuple(self.sample_grid)
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch normalization, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.max_images < 1:
            raise ConfigError("max_images must be >= 1")
        ArchitectureSchedule(self.image_size)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_grid"] = list(self.sample_grid)
        return d

    def trajectory(self) -> dict:
        return {k: getattr(self, k) for k in TRAJECTORY_FIELDS}

    def config_hash(self) -> bytes:
        return ckio.config_digest(self.trajectory())

    @property
    def schedule(self) -> ArchitectureSchedule:
        return ArchitectureSchedule(self.image_size)


@dataclass
class EpochLog:
    epoch: int
    d_real: float
    d_fake: float
    g: float
    secs: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "d_real": self.d_real,
                           "d_fake": self.d_fake, "g": self.g, "secs": self.secs})

    def losses(self) -> tuple:
        """Everything except wall time (which is never reproducible)."""
        return (self.epoch, self.d_real, self.d_fake, self.g)


@dataclass
class TrainState:
    generator: Sequential
    discriminator: Sequential
    adam_g: AdamState
    adam_d: AdamState
    rng: np.random.Generator
    epoch: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list[EpochLog] = field(default_factory=list)
    state: TrainState | None = None


def load_training_images(ds: DatasetTensor, image_size: int, max_images: int = 10000,
                         seed: int = 0) -> np.ndarray:
    """Cap, subsample and average-pool a packed dataset down to (n, s, s, 1)."""
    if ds.n == 0:
        raise DatasetEmpty("dataset contains no images")
    h, w = ds.height, ds.width
    if h != w or h < image_size or h % image_size or (h // image_size) & (h // image_size - 1):
        raise ShapeMismatch(f"dataset images are {h}x{w}; cannot reduce to {image_size} by 2x2 pooling")
    values = ds.values
    if ds.n > max_images:
        pick = make_rng(seed, STREAM_SUBSAMPLE).choice(ds.n, size=max_images, replace=False)
        values = values[np.sort(pick)]
    x = np.ascontiguousarray(values, dtype=np.float32)[..., None]
    pool = AvgPool2x()
    while x.shape[1] > image_size:
        x = pool.forward(x)
    return x


def new_state(config: TrainConfig) -> TrainState:
    gen, disc = init_params(config.schedule, make_rng(config.seed, STREAM_INIT))
    hyper = dict(lr=config.lr)
    return TrainState(gen, disc, AdamState.for_params(gen.params(), **hyper),
                      AdamState.for_params(disc.params(), **hyper),
                      make_rng(config.seed, STREAM_TRAIN))


def _adam_scalars(a: AdamState) -> dict:
    return {"t": a.t, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "epsilon": a.epsilon}


def state_to_checkpoint(state: TrainState, config_traj: dict) -> Checkpoint:
    tensors = {}
    for prefix, net, adam in (("generator", state.generator, state.adam_g),
                              ("discriminator", state.discriminator, state.adam_d)):
        for k, v in net.state().items():
            tensors[f"{prefix}/{k}"] = v.copy()
        for k, v in adam.m.items():
            tensors[f"adam_{prefix}/m/{k}"] = v.copy()
        for k, v in adam.v.items():
            tensors[f"adam_{prefix}/v/{k}"] = v.copy()
    meta = {"rng": get_state(state.rng),
            "adam_generator": _adam_scalars(state.adam_g),
            "adam_discriminator": _adam_scalars(state.adam_d)}
    return Checkpoint(epoch=state.epoch, config=dict(config_traj), tensors=tensors, state=meta)


def _sub(tensors, prefix):
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    schedule = ArchitectureSchedule(ckpt.config["image_size"])
    gen, disc = build_generator(schedule), build_discriminator(schedule)
    gen.load_state(_sub(ckpt.tensors, "generator"))
    disc.load_state(_sub(ckpt.tensors, "discriminator"))
    adams = []
    for prefix, net in (("generator", gen), ("discriminator", disc)):
        m = _sub(ckpt.tensors, f"adam_{prefix}/m")
        v = _sub(ckpt.tensors, f"adam_{prefix}/v")
        if set(m) != set(net.params()) or set(v) != set(net.params()):
            raise ckio.CorruptCheckpoint(f"optimizer moments for {prefix} do not match its parameters")
        adams.append(AdamState(m={k: m[k].copy() for k in net.params()},
                               v={k: v[k].copy() for k in net.params()},
                               **ckpt.state[f"adam_{prefix}"]))
    return TrainState(gen, disc, adams[0], adams[1], from_state(ckpt.state["rng"]), ckpt.epoch)


def sample_grid(generator: Sequential, rows: int = 3, cols: int = 3, seed: int = 0,
                path=None, noise_dim: int = 512, count: int | None = None) -> np.ndarray:
    """Tile `rows * cols` generator samples (inference mode) into one image.

    With `count` smaller than the grid, the remaining tiles stay black (-1).
    """
    count = rows * cols if count is None else count
    z = sample_noise(make_rng(seed, STREAM_SAMPLES), count, noise_dim)
    imgs = generator.forward(z, training=False)[..., 0]
    s = imgs.shape[1]
    grid = np.full((rows * s, cols * s), -1.0, dtype=np.float32)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[r * s:(r + 1) * s, c * s:(c + 1) * s] = img
    if path is not None:
        export_png(grid, path)
    return grid


def milestones(epochs: int, every: int, start: int = 1) -> list[int]:
    """Epochs in [start, epochs] at which a periodic action fires."""
    if not every:
        return []
    return [e for e in range(start, epochs + 1) if e % every == 0]


def updates_per_epoch(n_images: int, config: TrainConfig) -> int:
    n = min(n_images, config.max_images)
    return math.ceil(n / config.batch_size) * (1 + config.d_steps_per_g_step)


def _batch_indices(perm: np.ndarray, batch: int, size: int) -> np.ndarray:
    # a short final batch is topped up by wrapping around the permutation
    return perm[np.arange(batch * size, (batch + 1) * size) % perm.size]


def train_epoch(state: TrainState, images: np.ndarray, config: TrainConfig) -> tuple[float, float, float]:
    gen, disc, rng = state.generator, state.discriminator, state.rng
    n, b = images.shape[0], config.batch_size
    perm = rng.permutation(n)
    d_real, d_fake, g_loss = [], [], []
    for bi in range(math.ceil(n / b)):
        real = images[_batch_indices(perm, bi, b)]
        for _ in range(config.d_steps_per_g_step):
            fake = gen.forward(sample_noise(rng, b), training=True, rng=rng)
            p = disc.forward(real, training=True, rng=rng)
            loss_r, grad = bce(p, 1.0)
            disc.backward(grad)
            grads_r = disc.grads()
            p = disc.forward(fake, training=True, rng=rng)
            loss_f, grad = bce(p, 0.0)
            disc.backward(grad)
            grads = {k: g + grads_r[k] for k, g in disc.grads().items()}
            adam_step(disc.params(), grads, state.adam_d)
            d_real.append(loss_r)
            d_fake.append(loss_f)
        # generator step reuses the last fake batch; its activations are still cached
        p = disc.forward(fake, training=True, rng=rng)
        loss_g, grad = bce(p, 1.0)
        gen.backward(disc.backward(grad))
        adam_step(gen.params(), gen.grads(), state.adam_g)
        g_loss.append(loss_g)
    return float(np.mean(d_real)), float(np.mean(d_fake)), float(np.mean(g_loss))


def _thread_guard(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def train(config: TrainConfig, dataset: DatasetTensor, resume: Checkpoint | None = None,
          callback=None) -> TrainResult:
    """Run (or continue) adversarial training up to `config.epochs`.

    `callback(epoch, state)` is invoked after every epoch.  When `run_dir` is
    set, ``log.jsonl``, ``epoch_<N>.png`` grids and ``ckpt_epoch_<N>.mrck``
    files are written there.
    """
    images = load_training_images(dataset, config.image_size, config.max_images, config.seed)
    if resume is not None:
        if resume.config_hash != config.config_hash():
            raise ckio.ConfigMismatch("checkpoint was produced under a different training configuration")
        state = state_from_checkpoint(resume)
    else:
        state = new_state(config)

    run_dir = Path(config.run_dir) if config.run_dir else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    logs = []
    rows, cols = config.sample_grid
    grid_epochs = set(milestones(config.epochs, config.sample_every))
    with _thread_guard(config.deterministic):
        for epoch in range(state.epoch + 1, config.epochs + 1):
            t0 = time.perf_counter()
            d_real, d_fake, g = train_epoch(state, images, config)
            state.epoch = epoch
            entry = EpochLog(epoch, d_real, d_fake, g, round(time.perf_counter() - t0, 3))
            logs.append(entry)
            log.info("epoch %d  d_real %.4f  d_fake %.4f  g %.4f", epoch, d_real, d_fake, g)
            if run_dir is not None:
                with open(run_dir / "log.jsonl", "a") as fh:
                    fh.write(entry.to_json() + "\n")
                if epoch in grid_epochs:
                    sample_grid(state.generator, rows, cols, config.seed, run_dir / f"epoch_{epoch}.png")
                last = epoch == config.epochs
                if (config.checkpoint_every and epoch % config.checkpoint_every == 0) or last:
                    ckio.save_checkpoint(state_to_checkpoint(state, config.trajectory()),
                                         run_dir / f"ckpt_epoch_{epoch}.mrck")
            if callback is not None:
                callback(epoch, state)
    return TrainResult(state_to_checkpoint(state, config.trajectory()), logs, state)
