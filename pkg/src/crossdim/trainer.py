"""Pre-training loop: mixed 2D/3D batches, three-loss objective, AdamW, EMA teacher."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import (
    DinoHead,
    LossReport,
    TeacherState,
    center_update,
    combine_losses,
    dino_pair_loss,
    ema_momentum,
    ema_update,
    info_nce_vl,
    match_tokens,
    total_loss,
)
from .model import ModelConfig, dino_logits, encode_tokens, image_embedding, init_model, normalize_intensity, text_embedding
from .nn import EncoderConfig, ParamRegistry
from .rng import stream
from .selection import build_views
from .synth import VOCAB, SyntheticSample
from .tensor import Tensor, no_grad
from .tokenizers import Geometry

log = logging.getLogger(__name__)

ABLATIONS = {
    "vl": {"use_sd": False, "use_attentive_selection": False},
    "vl-sd": {"use_sd": True, "use_attentive_selection": False},
    "full": {"use_sd": True, "use_attentive_selection": True},
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    peak_lr: float = 1e-3
    init_lr: float = 1e-8
    warmup_epochs: int = 12
    weight_decay: float = 0.05
    seed: int = 0
    k: int = 4
    retain_ratio: float = 0.5
    lambda_icl: float = 1.0
    lambda_pcl: float = 1.0
    use_sd: bool = True
    use_attentive_selection: bool = True
    warmup_select: int = 100
    grad_clip: float = 1.0
    ema_start: float = 0.99
    ema_end: float = 0.9995
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    # geometry and encoders
    image_size: int = 32
    patch_size: int = 8
    depth: int = 16
    slab_depth: int = 4
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 64
    mlp_ratio: int = 4
    text_layers: int = 2
    embed_dim: int = 32
    num_prototypes: int = 64
    init_temperature: float = 0.07
    intensity_mean: float = 0.3
    intensity_std: float = 0.065
    keep_checkpoints: int = 2

    def __post_init__(self):
        if self.init_lr > self.peak_lr:
            raise ValueError("init_lr must not exceed peak_lr")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 1 <= self.k <= self.depth:
            raise ValueError(f"k={self.k} outside [1, depth]")
        if not 0 < self.retain_ratio <= 1:
            raise ValueError("retain_ratio must be in (0, 1]")

    # -- derived ---------------------------------------------------------
    @property
    def model(self) -> ModelConfig:
        tokens = 1 + self.k * (self.image_size // self.patch_size) ** 2 + (self.depth // self.slab_depth) * (self.image_size // self.patch_size) ** 2
        return ModelConfig(
            geometry=Geometry(self.image_size, self.patch_size, self.depth, self.slab_depth),
            vision=EncoderConfig(self.num_layers, self.num_heads, self.model_dim, self.mlp_ratio, 0, tokens),
            text=EncoderConfig(self.text_layers, self.num_heads, self.model_dim, self.mlp_ratio, len(VOCAB), 64),
            embed_dim=self.embed_dim,
            num_prototypes=self.num_prototypes,
            init_temperature=self.init_temperature,
            intensity_mean=self.intensity_mean,
            intensity_std=self.intensity_std,
        )

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return dataclasses.replace(self, **ABLATIONS[name])

    # -- key=value text form ---------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(value, types[key])
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    def config_hash(self) -> str:
        return self.digest().hex()


PAPER_SCALE = TrainConfig(epochs=50, batch_size=144, peak_lr=2e-5, init_lr=1e-8, warmup_epochs=20, weight_decay=0.05)


def _parse_value(value: str, typ: str):
    if typ in ("bool", bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in ("int", int):
        return int(value)
    if typ in ("float", float):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# schedule and optimiser


def lr_at_step(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from init_lr to peak_lr, then cosine decay to 0 at the final step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.init_lr + (config.peak_lr - config.init_lr) * step / warm
    if total <= warm:
        return config.peak_lr
    progress = min((step - warm) / (total - warm), 1.0)
    return 0.5 * config.peak_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    decay: Callable[[str], bool] = lambda name: True,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update in place (decoupled weight decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        if weight_decay and decay(name):
            data = data * (1.0 - lr * weight_decay)
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= factor
    return norm


def decays(name: str, params: dict[str, Tensor]) -> bool:
    """Weight decay applies to weight matrices, not biases, norms, tables or temperature."""
    if params[name].ndim < 2:
        return False
    return not any(tag in name for tag in ("pos", "type", "embed"))


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    step: int
    student: ParamRegistry
    text: ParamRegistry
    teacher: TeacherState
    adam: AdamState

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        vision, text = init_model(config.model, config.seed, dtype=np.float32)
        head = DinoHead(np.zeros(config.num_prototypes, dtype=np.float32), config.teacher_temp, config.student_temp, config.center_momentum)
        teacher = TeacherState.from_student(vision, head, config.ema_start)
        return cls(config, 0, vision, text, teacher, AdamState())

    def trainable(self) -> dict[str, Tensor]:
        out = {"student/" + k: v for k, v in self.student.items()}
        out.update({"text/" + k: v for k, v in self.text.items()})
        return out


class Batcher:
    """Step-indexed batches over an endless stream of per-cycle permutations.

    Batch ``s`` is a pure function of (seed, s), which makes resume exact.
    """

    def __init__(self, samples: Sequence[SyntheticSample], batch_size: int, seed: int):
        self.images = [i for i, s in enumerate(samples) if s.kind == 2]
        self.volumes = [i for i, s in enumerate(samples) if s.kind == 3]
        if not self.images and not self.volumes:
            raise ValueError("dataset is empty")
        if self.images and self.volumes:
            self.b3 = max(1, batch_size // 2)
            self.b2 = max(1, batch_size - self.b3)
        else:
            self.b2 = batch_size if self.images else 0
            self.b3 = batch_size if self.volumes else 0
        self.seed = seed
        per_epoch = []
        if self.b2:
            per_epoch.append(math.ceil(len(self.images) / self.b2))
        if self.b3:
            per_epoch.append(math.ceil(len(self.volumes) / self.b3))
        self.steps_per_epoch = max(per_epoch)

    def _draw(self, pool: list[int], per_step: int, step: int, tag: str) -> list[int]:
        out = []
        for pos in range(step * per_step, (step + 1) * per_step):
            cycle, offset = divmod(pos, len(pool))
            perm = stream(self.seed, tag, cycle).permutation(len(pool))
            out.append(pool[perm[offset]])
        return out

    def batch(self, step: int) -> tuple[list[int], list[int]]:
        two = self._draw(self.images, self.b2, step, "shuffle2d") if self.b2 else []
        three = self._draw(self.volumes, self.b3, step, "shuffle3d") if self.b3 else []
        return two, three


# ---------------------------------------------------------------------------
# one step


def train_step(state: TrainState, images: Sequence[SyntheticSample], volumes: Sequence[SyntheticSample], steps_per_epoch: int = 1) -> LossReport:
    cfg = state.config
    mc = cfg.model
    if not images and not volumes:
        raise ValueError("empty batch")
    step = state.step
    attentive = cfg.use_attentive_selection and step >= cfg.warmup_select
    rng = stream(cfg.seed, "select", step)
    teacher = state.teacher

    groups = []
    for kind, samples in ((2, images), (3, volumes)):
        if not samples:
            continue
        pixels = normalize_intensity(np.stack([s.pixels for s in samples]), mc)
        views = build_views(pixels, kind, teacher.params, state.student, mc, cfg.k, cfg.retain_ratio, attentive, rng)
        groups.append((samples, views, encode_tokens(state.student, views.student, mc)))

    reports = [s.report for samples, _, _ in groups for s in samples]
    img = T.concat([image_embedding(state.student, out.cls_embedding) for _, _, out in groups], axis=0)
    txt = text_embedding(state.text, reports, mc)
    vl = info_nce_vl(img, txt, state.text["log_temperature"])

    icl = pcl = 0.0
    teacher_rows = []
    if cfg.use_sd:
        icl_terms, pcl_terms = [], []
        for _, views, s_out in groups:
            with no_grad():
                t_logits = dino_logits(teacher.params, views.teacher_output.hidden).data
            rows = np.arange(t_logits.shape[0])[:, None]
            matched = match_tokens(views.student, views.teacher)
            t_cls, t_patch = t_logits[:, 0], t_logits[rows, matched]
            s_logits = dino_logits(state.student, s_out.hidden)
            icl_terms.append(dino_pair_loss(s_logits[:, 0], t_cls, teacher.head, reduce=False))
            s_patch = s_logits[:, 1:]
            per_token = dino_pair_loss(s_patch, t_patch, teacher.head, reduce=False)
            pcl_terms.append(T.mean(per_token, axis=1))
            teacher_rows += [t_cls, t_patch.reshape(-1, t_patch.shape[-1])]
        icl = T.mean(T.concat(icl_terms, axis=0))
        pcl = T.mean(T.concat(pcl_terms, axis=0))
    total = combine_losses(vl, icl, pcl, cfg.lambda_icl, cfg.lambda_pcl)
    report = total_loss(vl, icl, pcl, cfg.lambda_icl, cfg.lambda_pcl)

    params = state.trainable()
    for p in params.values():
        p.zero_grad()
    T.backward(total)
    grads = {k: p.grad for k, p in params.items()}
    clip_grad_norm(grads, cfg.grad_clip)
    lr = lr_at_step(step, cfg, steps_per_epoch)
    adamw_step(params, grads, state.adam, lr, cfg.weight_decay, decay=lambda n: decays(n, params))
    lt = state.text["log_temperature"]
    lt.data = np.clip(lt.data, math.log(0.01), math.log(1.0)).astype(lt.dtype)

    total_steps = cfg.epochs * steps_per_epoch
    ema_update(teacher, state.student, ema_momentum(step, total_steps, cfg.ema_start, cfg.ema_end))
    if teacher_rows:
        teacher.head = center_update(teacher.head, np.concatenate(teacher_rows, axis=0))
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"XDCK"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for k, v in state.student.items():
        out["student/" + k] = v.data
    for k, v in state.text.items():
        out["text/" + k] = v.data
    for k, v in state.teacher.params.items():
        out["teacher/" + k] = v.data
    out["teacher_head/center"] = state.teacher.head.center
    for k in sorted(state.adam.m):
        out["adam_m/" + k] = state.adam.m[k]
        out["adam_v/" + k] = state.adam.v[k]
    return out


def encode_checkpoint(state: TrainState) -> bytes:
    cfg_text = state.config.to_text().encode()
    body = bytearray()
    body += struct.pack("<H", CKPT_VERSION)
    body += state.config.digest()
    body += struct.pack("<QQI", state.step, state.adam.t, len(cfg_text))
    body += cfg_text
    tensors = _state_tensors(state)
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return CKPT_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, expected: TrainConfig | None = None) -> TrainState:
    if len(buf) < 4 + 2 + 32 + 4 or buf[:4] != CKPT_MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic or too short)")
    body, (crc,) = buf[4:-4], struct.unpack("<I", buf[-4:])
    (version,) = struct.unpack("<H", body[:2])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, reader supports {CKPT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("checksum mismatch: file is damaged or was modified")
    try:
        digest = body[2:34]
        step, adam_t, n_cfg = struct.unpack_from("<QQI", body, 34)
        pos = 34 + 20
        cfg_text = body[pos : pos + n_cfg].decode()
        pos += n_cfg
        config = TrainConfig.from_text(cfg_text)
        if config.digest() != digest:
            raise CheckpointCorruptError("stored config does not match its hash")
        if expected is not None and expected.digest() != digest:
            raise ConfigMismatchError(f"checkpoint config hash {digest.hex()[:12]} != expected {expected.config_hash()[:12]}")
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape)) * 4
            if pos + size > len(body):
                raise CheckpointCorruptError(f"tensor {name} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).astype(np.float32).reshape(shape)
            pos += size
        if pos != len(body):
            raise CheckpointCorruptError(f"{len(body) - pos} unexpected trailing bytes")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointCorruptError(f"malformed checkpoint: {exc}") from exc

    state = TrainState.initial(config)
    state.step = int(step)
    state.adam.t = int(adam_t)

    def fill(registry: ParamRegistry, prefix: str):
        for k, p in registry.items():
            key = prefix + k
            if key not in tensors:
                raise CheckpointShapeError(f"checkpoint lacks tensor {key}")
            if tensors[key].shape != p.shape:
                raise CheckpointShapeError(f"{key}: checkpoint {tensors[key].shape} vs model {p.shape}")
            p.data = tensors[key].copy()

    fill(state.student, "student/")
    fill(state.text, "text/")
    fill(state.teacher.params, "teacher/")
    state.teacher.head.center = tensors["teacher_head/center"].copy()
    for key, arr in tensors.items():
        if key.startswith("adam_m/"):
            state.adam.m[key[7:]] = arr.copy()
        elif key.startswith("adam_v/"):
            state.adam.v[key[7:]] = arr.copy()
    return state


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    os.replace(tmp, path)


def load_checkpoint(path, expected: TrainConfig | None = None) -> TrainState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf, expected)


# ---------------------------------------------------------------------------
# loop

METRICS_HEADER = "step,lr,L_vl,L_icl,L_pcl,total\n"


def _metrics_row(step: int, lr: float, r: LossReport) -> str:
    return f"{step},{lr!r},{r.vl!r},{r.icl!r},{r.pcl!r},{r.total!r}\n"


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"epoch_{epoch:03d}.ckpt"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("epoch_*.ckpt"))
    return found[-1] if found else None


def train_loop(
    config: TrainConfig,
    dataset: Sequence[SyntheticSample],
    out_dir,
    resume=None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainState:
    """Run (or resume) pre-training; writes ``metrics.csv`` and per-epoch checkpoints."""
    if not dataset:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    batcher = Batcher(dataset, config.batch_size, config.seed)
    spe = batcher.steps_per_epoch
    metrics = out / "metrics.csv"
    if resume is not None:
        state = load_checkpoint(resume, expected=config)
        kept = [METRICS_HEADER]
        if metrics.exists():
            for line in metrics.read_text().splitlines(keepends=True)[1:]:
                if int(line.split(",", 1)[0]) < state.step:
                    kept.append(line)
        metrics.write_text("".join(kept))
    else:
        state = TrainState.initial(config)
        metrics.write_text(METRICS_HEADER)
        if config.epochs == 0:
            save_checkpoint(state, checkpoint_path(out, 0))
            return state
    total = config.epochs * spe
    with open(metrics, "a") as fh:
        while state.step < total:
            step = state.step
            two, three = batcher.batch(step)
            lr = lr_at_step(step, config, spe)
            report = train_step(state, [dataset[i] for i in two], [dataset[i] for i in three], spe)
            fh.write(_metrics_row(step, lr, report))
            if on_step is not None:
                on_step(step, report)
            if state.step % spe == 0:
                fh.flush()
                epoch = state.step // spe
                save_checkpoint(state, checkpoint_path(out, epoch))
                stale = checkpoint_path(out, epoch - config.keep_checkpoints)
                if config.keep_checkpoints > 0 and stale.exists():
                    stale.unlink()
                log.info("epoch %d/%d  L_vl=%.4f  L_icl=%.4f  L_pcl=%.4f", epoch, config.epochs, report.vl, report.icl, report.pcl)
    return state


def read_metrics(path) -> np.ndarray:
    """Metrics file as a structured array (step, lr, L_vl, L_icl, L_pcl, total)."""
    return np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
