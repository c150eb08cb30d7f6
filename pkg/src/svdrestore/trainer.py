"""Desk-scale training and evaluation of a small residual restoration network."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Conv2d, LossWeights, Module, SvaoLayer, SveoLayer, Tensor
from .imagestack import DegradationSpec, apply_degradation, patch_corners, synthetic_clean

log = logging.getLogger(__name__)

FLOWS = ("cascaded", "parallel", "cascaded+parallel")
TOGGLES = ("sveo", "svao", "l_orth", "l_dec")
MAGIC = b"DASL0001"
LOG_FIELDS = ("step", "task", "l_ori", "l_orth", "l_dec", "total", "psnr")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


DEFAULT_TASKS = (
    {"kind": "Rain", "params": {}},
    {"kind": "GaussianNoise", "params": {"sigma": 25}},
    {"kind": "Blur", "params": {"sigma_b": 1.5}},
    {"kind": "Haze", "params": {"t": 0.5, "A": 0.8}},
    {"kind": "LowLight", "params": {"s": 0.3}},
)


@dataclass
class TrainConfig:
    tasks: list[dict] = field(default_factory=lambda: [dict(t) for t in DEFAULT_TASKS])
    patch: int = 48
    batch: int = 8
    steps: int = 2000
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 250
    eval_patches: int = 50
    width: int = 16
    depth: int = 6
    r: int = 2
    flow: str = "cascaded+parallel"
    svao_activation: str = "none"
    sveo: bool = True
    svao: bool = True
    l_orth: bool = True
    l_dec: bool = True
    source_size: int = 96
    train_images: int = 64

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.flow not in FLOWS:
            raise ValueError(f"flow must be one of {FLOWS}, got {self.flow!r}")
        if self.patch <= 0 or self.patch % (2 * self.r):
            raise ValueError(f"patch {self.patch} must be divisible by 2*r = {2 * self.r} "
                             "(bottleneck runs at half resolution)")
        if self.patch > self.source_size:
            raise ValueError("patch larger than source images")
        if self.batch < 1 or self.steps < 0 or self.depth < 1 or self.width < 1:
            raise ValueError("batch, depth and width must be >= 1 and steps >= 0")
        if not self.tasks:
            raise ValueError("at least one task is required")
        for t in self.tasks:
            DegradationSpec.from_dict({"kind": t["kind"], "params": t.get("params", {})})

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    def task_names(self) -> list[str]:
        return [task_name(t) for t in self.tasks]


def task_name(task: dict) -> str:
    spec = DegradationSpec.from_dict({"kind": task["kind"], "params": task.get("params", {})})
    return spec.kind


# ---------------------------------------------------------------- model


class ResBlock(Module):
    """x + slot(relu(conv(x))), where slot is an SVEO or a 3x3 conv.

    A bottleneck block also carries an SVAO combined with the slot according
    to ``flow``.
    """

    def __init__(self, width: int, use_sveo: bool, use_svao: bool, r: int, flow: str,
                 rng: np.random.Generator, dtype, svao_activation: str = "none"):
        self.conv = Conv2d(width, width, 3, rng=rng, dtype=dtype)
        if use_sveo:
            self.sveo = SveoLayer(width, r, rng=rng, dtype=dtype)
        else:
            self.slot_conv = Conv2d(width, width, 3, rng=rng, dtype=dtype, gain=0.5)
        self.svao = SvaoLayer(width, dtype=dtype, activation=svao_activation) if use_svao else None
        self.flow = flow

    def slot(self, h: Tensor) -> Tensor:
        return self.sveo(h) if hasattr(self, "sveo") else self.slot_conv(h)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.conv(x))
        a = self.slot(h)
        if self.svao is not None:
            if self.flow == "cascaded":
                a = self.svao(a)
            elif self.flow == "parallel":
                a = a + self.svao(h)
            else:
                a = self.svao(a) + a + self.svao(h)
        return x + a


def sveo_block_indices(depth: int) -> list[int]:
    """ceil(depth/2) evenly spaced blocks."""
    return list(range(1 if depth % 2 == 0 else 0, depth, 2))


class ToyBackbone(Module):
    """Head conv, ``depth`` residual blocks with the middle one at half
    resolution (the bottleneck), tail conv and a global skip."""

    def __init__(self, cfg: TrainConfig, channels: int = 3, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        w = cfg.width
        self.bottleneck = cfg.depth // 2
        self.head = Conv2d(channels, w, 3, rng=rng, dtype=dtype)
        self.down = Conv2d(4 * w, w, 1, rng=rng, dtype=dtype, gain=1.0)
        self.up = Conv2d(w, 4 * w, 1, rng=rng, dtype=dtype, gain=1.0)
        sveo_at = set(sveo_block_indices(cfg.depth)) if cfg.sveo else set()
        self.blocks = [
            ResBlock(w, i in sveo_at, cfg.svao and i == self.bottleneck, cfg.r, cfg.flow, rng, dtype,
                     cfg.svao_activation)
            for i in range(cfg.depth)
        ]
        self.tail = Conv2d(w, channels, 3, rng=rng, dtype=dtype, gain=0.01)

    def __call__(self, x: Tensor) -> Tensor:
        f = self.head(x)
        for i, block in enumerate(self.blocks):
            if i == self.bottleneck:
                skip = f
                f = self.down(ad.unpixelshuffle(f, 2))
                f = block(f)
                f = ad.pixelshuffle(self.up(f), 2) + skip
            else:
                f = block(f)
        return x + self.tail(f)

    def sveo_layers(self) -> list[SveoLayer]:
        return [m for m in self.modules() if isinstance(m, SveoLayer)]

    def svao_layers(self) -> list[SvaoLayer]:
        return [m for m in self.modules() if isinstance(m, SvaoLayer)]

    def restore(self, imgs: np.ndarray) -> np.ndarray:
        """Inference on ``(n, h, w, c)`` images in [0, 1]; output clamped."""
        x = Tensor(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2), dtype=np.float32))
        with ad.no_grad():
            y = self(x).data
        return np.clip(y.transpose(0, 2, 3, 1), 0.0, 1.0)


# ---------------------------------------------------------------- optimizer


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# ---------------------------------------------------------------- data


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(2, np.uint64)[0])


class PatchSource:
    """Clean source images plus a deterministic (seed, step)-indexed batch stream."""

    def __init__(self, cfg: TrainConfig, split: str = "train"):
        self.cfg = cfg
        salt = {"train": 11, "eval": 13}[split]
        n = cfg.train_images if split == "train" else max(8, cfg.eval_patches // 4)
        self.images = [synthetic_clean(cfg.source_size, cfg.source_size, 3, seed=_seed(cfg.seed, salt, i))
                       for i in range(n)]
        self.specs = [DegradationSpec.from_dict({"kind": t["kind"], "params": t.get("params", {})})
                      for t in cfg.tasks]

    def pair(self, key: tuple[int, ...], task_idx: int) -> tuple[np.ndarray, np.ndarray]:
        s = _seed(self.cfg.seed, *key)
        rng = np.random.default_rng(s)
        img = self.images[int(rng.integers(len(self.images)))]
        size = self.cfg.patch
        ys, xs = patch_corners(img.shape[0], img.shape[1], size, 1, s)
        clean = img[ys[0]:ys[0] + size, xs[0]:xs[0] + size]
        if rng.random() < 0.5:
            clean = clean[:, ::-1]
        clean = np.ascontiguousarray(np.rot90(clean, int(rng.integers(4))))
        base = self.specs[task_idx]
        spec = DegradationSpec(base.kind, dict(base.params), seed=_seed(s, 7))
        return clean, apply_degradation(clean, spec)

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
        b = self.cfg.batch
        tasks = [(step * b + i) % len(self.specs) for i in range(b)]
        pairs = [self.pair((17, step, i), t) for i, t in enumerate(tasks)]
        clean = np.stack([p[0] for p in pairs])
        degraded = np.stack([p[1] for p in pairs])
        return clean, degraded, tasks

    def eval_set(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        n = self.cfg.eval_patches
        out = []
        for i in range(n):
            t = i % len(self.specs)
            c, d = self.pair((19, i), t)
            out.append((t, c, d))
        return out


# ---------------------------------------------------------------- metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5),
    evaluated on the valid region only."""
    from scipy.ndimage import correlate1d

    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    g = _gauss_window()
    pad = len(g) // 2
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(x):
        return correlate1d(correlate1d(x, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
        vals.append(smap[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def evaluate(model: ToyBackbone, pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> dict[str, dict[str, float]]:
    """Per-task mean PSNR/SSIM of restored and degraded inputs against clean.

    ``pairs`` holds ``(task, clean, degraded)`` with images ``(h, w, c)``.
    """
    rows: dict[str, list[tuple[float, float, float, float]]] = {}
    for task, clean, degraded in pairs:
        if clean.shape != degraded.shape:
            raise ValueError(f"shape mismatch {clean.shape} vs {degraded.shape}")
        restored = model.restore(degraded[None])[0]
        rows.setdefault(task, []).append(
            (psnr(restored, clean), ssim(restored, clean), psnr(degraded, clean), ssim(degraded, clean)))
    table = {}
    for task, vals in rows.items():
        arr = np.array(vals)
        table[task] = {
            "n": len(vals),
            "psnr": float(arr[:, 0].mean()),
            "ssim": float(arr[:, 1].mean()),
            "psnr_degraded": float(arr[:, 2].mean()),
            "ssim_degraded": float(arr[:, 3].mean()),
        }
    allv = np.array([v for vals in rows.values() for v in vals])
    table["all"] = {"n": len(allv), "psnr": float(allv[:, 0].mean()), "ssim": float(allv[:, 1].mean()),
                    "psnr_degraded": float(allv[:, 2].mean()), "ssim_degraded": float(allv[:, 3].mean())}
    return table


def write_metrics_csv(table: dict[str, dict[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["task", "n", "psnr", "ssim", "psnr_degraded", "ssim_degraded"])
        for task, m in table.items():
            wr.writerow([task, m["n"], _fmt(m["psnr"]), _fmt(m["ssim"]),
                         _fmt(m["psnr_degraded"]), _fmt(m["ssim_degraded"])])


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(model: Module, path: str | Path, config: dict | None = None) -> bytes:
    """Write ``magic | u32 manifest length | manifest JSON | payload | u32 CRC32``.

    The payload is every parameter as little-endian float32 in manifest
    order; the CRC covers the payload only.  Returns the file bytes.
    """
    entries, chunks, offset = [], [], 0
    for name, t in model.parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"tensors": entries}
    if config is not None:
        manifest["config"] = config
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    blob = MAGIC + struct.pack("<I", len(mbytes)) + mbytes + payload + struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)
    return blob


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    start = 12 + mlen
    if start + 4 > len(blob):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[12:start])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, checkpoint is corrupt")
    tensors, expect = {}, 0
    for e in manifest["tensors"]:
        if e["offset"] != expect:
            raise CheckpointError(f"{path}: tensor {e['name']} offset not contiguous")
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if n != e["nbytes"] or e["offset"] + n > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} size mismatch")
        tensors[e["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4,
                                           offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
        expect += n
    if expect != len(payload):
        raise CheckpointError(f"{path}: payload has trailing bytes")
    return manifest, tensors


def load_into(model: Module, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(f"checkpoint does not match model (missing {missing}, unexpected {extra})")
    for name, t in params.items():
        if tuple(tensors[name].shape) != t.shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} vs model {t.shape}")
        t.data = tensors[name].astype(t.dtype).copy()


def load_model(path: str | Path) -> tuple[ToyBackbone, TrainConfig]:
    manifest, tensors = read_checkpoint(path)
    cfg = TrainConfig.from_dict(manifest.get("config", {}))
    model = ToyBackbone(cfg)
    load_into(model, tensors)
    return model, cfg


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: ToyBackbone
    log_rows: list[dict]
    eval_table: dict | None = None


def train(cfg: TrainConfig, out: str | Path | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Train from scratch; deterministic given ``cfg``.

    Writes the checkpoint to ``out`` and the trajectory CSV to ``log_path``
    when given.  Raises TrainingDiverged on a non-finite loss.
    """
    model = ToyBackbone(cfg)
    params = [t for _, t in model.parameters()]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    source = PatchSource(cfg, "train")
    names = cfg.task_names()
    eval_pairs = None
    rows: list[dict] = []
    table = None
    for step in range(cfg.steps):
        clean, degraded, tasks = source.batch(step)
        x = Tensor(degraded.transpose(0, 3, 1, 2).copy())
        y = clean.transpose(0, 3, 1, 2).copy()
        model.zero_grad()
        rec = model(x)
        total, parts = ad.loss_total(rec, y, model, cfg.weights, use_orth=cfg.l_orth, use_dec=cfg.l_dec)
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(f"non-finite loss at step {step}: {parts}")
        total.backward()
        opt.step(cosine_lr(cfg.lr, step, cfg.steps))
        psnr_val = ""
        if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            if eval_pairs is None:
                eval_pairs = _eval_pairs(cfg)
            table = evaluate(model, eval_pairs)
            psnr_val = table["all"]["psnr"]
        residual = rec.data - y
        for t in sorted(set(tasks)):
            sel = [i for i, k in enumerate(tasks) if k == t]
            l_task = float(np.sqrt(residual[sel] ** 2 + 1e-6).mean())
            rows.append({"step": step, "task": names[t], "l_ori": l_task, "l_orth": parts["l_orth"],
                         "l_dec": parts["l_dec"], "total": parts["total"], "psnr": psnr_val})
    if out is not None:
        save_checkpoint(model, out, cfg.to_dict())
    if log_path is not None:
        write_log(rows, log_path)
    return TrainResult(model, rows, table)


def _eval_pairs(cfg: TrainConfig) -> list[tuple[str, np.ndarray, np.ndarray]]:
    names = cfg.task_names()
    return [(names[t], c, d) for t, c, d in PatchSource(cfg, "eval").eval_set()]


def heldout_pairs(cfg: TrainConfig) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """The fixed held-out patches (``cfg.eval_patches`` of them) used by eval."""
    return _eval_pairs(cfg)


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def windowed_totals(rows: list[dict], width: int = 100) -> tuple[float, float]:
    """Mean total loss over the first and last ``width`` steps."""
    per_step: dict[int, float] = {}
    for r in rows:
        per_step[r["step"]] = r["total"]
    totals = [per_step[s] for s in sorted(per_step)]
    return float(np.mean(totals[:width])), float(np.mean(totals[-width:]))


# ---------------------------------------------------------------- ablation


def ablate(cfg: TrainConfig, toggles: Sequence[str] = TOGGLES) -> list[dict]:
    """Train every on/off combination of ``toggles`` with the same seed.

    Toggles not listed keep their value from ``cfg``.  Returns one row per
    variant with its switches and held-out metrics.
    """
    for t in toggles:
        if t not in TOGGLES:
            raise ValueError(f"unknown toggle {t!r}; choose from {TOGGLES}")
    rows = []
    for values in itertools.product((True, False), repeat=len(toggles)):
        variant = replace(cfg, **dict(zip(toggles, values)))
        result = train(variant)
        table = evaluate(result.model, _eval_pairs(variant))
        n_params = sum(t.data.size for _, t in result.model.parameters())
        row = {t: getattr(variant, t) for t in TOGGLES}
        row.update(seed=variant.seed, params=n_params, psnr=table["all"]["psnr"], ssim=table["all"]["ssim"],
                   psnr_degraded=table["all"]["psnr_degraded"])
        rows.append(row)
    return rows


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def offdiag_energy(w: np.ndarray) -> float:
    gram = w @ w.T
    return float(((gram - np.diag(np.diag(gram))) ** 2).sum())


def orthogonality_drive(cfg: TrainConfig, steps: int = 1000, perturb: float = 0.05, lr: float = 1e-2,
                        seed: int = 0) -> tuple[list[float], list[float]]:
    """Perturb every SVEO weight, then minimize the orth loss alone with Adam.

    Returns (initial, final) off-diagonal energy per SVEO weight.
    """
    model = ToyBackbone(cfg)
    rng = np.random.default_rng(seed)
    ws = [layer.w for layer in model.sveo_layers()]
    for w in ws:
        w.data += (perturb * rng.standard_normal(w.shape)).astype(w.dtype)
        w.data = w.data.astype(np.float64)
    before = [offdiag_energy(w.data) for w in ws]
    opt = Adam(ws, lr)
    for step in range(steps):
        for w in ws:
            w.grad = None
        ad.add_scalars(ad.loss_orth(w) for w in ws).backward()
        opt.step(cosine_lr(lr, step, steps))
    return before, [offdiag_energy(w.data) for w in ws]
