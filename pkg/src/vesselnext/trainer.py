"""Training harness: pixelwise cross-entropy, Adam, early stopping,
checkpoint serialization, and stitched whole-image evaluation.

Model parameters are kept exactly float32-representable (compute stays
float64): initialization rounds through float32 and so does every Adam
update, which is what makes checkpoint round-trips bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, pipeline
from .core import ShapeError, Tape, Tensor
from .core import functional as F
from .model import ModelConfig, VesselNext, build

PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# objective and optimizer


def bce_loss(prob: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped away from 0/1."""
    if prob.shape != target.shape:
        raise ShapeError(f"prob {prob.shape} and target {target.shape} differ")
    p = F.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    pos = F.mul(target, F.log(p))
    negt = F.sub(1.0, target)
    neg = F.mul(negt, F.log(F.sub(1.0, p)))
    return F.neg(F.mean(F.add(pos, neg)))


@dataclass
class TrainConfig:
    epochs: int = 25
    batch: int = 8
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    seed: int = 0
    patches_per_image: int = 15000
    val_patches_per_image: int | None = None  # defaults to a tenth
    materialize: bool = False
    stride: int = 12
    threshold: float = 0.5
    preprocess: pipeline.PreprocessParams = field(default_factory=pipeline.PreprocessParams)

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        return self

    @property
    def val_patches(self) -> int:
        if self.val_patches_per_image is not None:
            return self.val_patches_per_image
        return max(1, self.patches_per_image // 10)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update over named parameters, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def _round_params_f32(model: VesselNext):
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# fitting


def _prepare(samples, pp: pipeline.PreprocessParams):
    prepared = []
    for s in samples:
        if s.truth is None:
            raise ValueError(f"{s.id}: training requires a truth mask")
        raster = pipeline.preprocess(s.image, pp)
        prepared.append(pipeline.FundusSample(id=s.id, image=raster, truth=s.truth,
                                              fov=s.fov))
    return prepared


def _draw_patches(prepared, n_per_image, patch, seed):
    out = []
    for i, sample in enumerate(prepared):
        out.extend(pipeline.sample_patches(sample, n_per_image, patch, seed + i))
    return out


def _batch_tensors(pairs, lo, hi):
    imgs = np.stack([p[0] for p in pairs[lo:hi]])[:, None, :, :]
    trus = np.stack([p[1] for p in pairs[lo:hi]]).astype(np.float64)[:, None, :, :]
    return Tensor(imgs), Tensor(trus)


def _val_loss(model, val_pairs, batch):
    total, count = 0.0, 0
    for lo in range(0, len(val_pairs), batch):
        x, y = _batch_tensors(val_pairs, lo, lo + batch)
        loss = bce_loss(model.forward(x), y)
        total += float(loss.data) * x.shape[0]
        count += x.shape[0]
    return total / count


def fit(model: VesselNext, train_set, val_set, cfg: TrainConfig,
        start_epoch: int = 0, state: AdamState | None = None):
    """Patch-based training with early stopping on validation loss.

    Returns (history, state): history rows are (epoch, train_loss,
    val_loss). The model is left holding the best-validation parameters.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be nonempty")
    patch = model.config.patch
    train_prep = _prepare(train_set, cfg.preprocess)
    val_prep = _prepare(val_set, cfg.preprocess)
    val_pairs = _draw_patches(val_prep, cfg.val_patches, patch, seed=cfg.seed + 7919)

    params = dict(model.named_parameters())
    state = state or AdamState()
    shuffler = np.random.default_rng(cfg.seed + 104729)
    history = []
    best_val = np.inf
    best_params = None
    stale = 0
    step = state.t
    materialized = None

    for epoch in range(start_epoch, cfg.epochs):
        if cfg.materialize:
            if materialized is None:
                materialized = _draw_patches(train_prep, cfg.patches_per_image, patch,
                                             seed=cfg.seed)
            pairs = materialized
        else:
            pairs = _draw_patches(train_prep, cfg.patches_per_image, patch,
                                  seed=cfg.seed + 1009 * (epoch + 1))
        order = shuffler.permutation(len(pairs))
        pairs = [pairs[i] for i in order]

        epoch_loss, seen = 0.0, 0
        for lo in range(0, len(pairs), cfg.batch):
            x, y = _batch_tensors(pairs, lo, lo + cfg.batch)
            model.zero_grad()
            with Tape() as tape:
                loss = bce_loss(model.forward(x), y)
            step += 1
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
            tape.backward(loss)
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            adam_step({n: params[n] for n in grads}, grads, state, cfg)
            _round_params_f32(model)
            epoch_loss += value * x.shape[0]
            seen += x.shape[0]

        val = _val_loss(model, val_pairs, cfg.batch)
        history.append((epoch, epoch_loss / seen, val))
        if val < best_val:
            best_val = val
            best_params = {n: p.data.copy() for n, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_params is not None:
        for name, p in params.items():
            p.data = best_params[name]
    return history, state


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{tr:.8f},{va:.8f}" for e, tr, va in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation over stitched test images


@dataclass
class EvalConfig:
    batch: int = 8
    stride: int = 12
    threshold: float = 0.5
    workers: int = 1  # per-image threads; results are order-preserving
    preprocess: pipeline.PreprocessParams = field(default_factory=pipeline.PreprocessParams)


@dataclass
class ImageResult:
    id: str
    basic: metrics.BasicMetrics
    cal: metrics.CalScore
    prob: np.ndarray


@dataclass
class EvalReport:
    """Per-image metrics plus the pooled-AUC aggregate row.

    Column order everywhere: AUC, SP, SE, Precision, F1, Acc.
    """
    images: list
    roc: metrics.RocCurve
    aggregate: dict

    def summary_csv(self) -> str:
        cols = ["auc", "sp", "se", "precision", "f1", "acc"]
        row = ",".join(f"{self.aggregate[c]:.6f}" for c in cols)
        return "auc,sp,se,precision,f1,acc\n" + row + "\n"

    def per_image_csv(self) -> str:
        lines = ["id,sp,se,precision,f1,acc"]
        for r in self.images:
            b = r.basic
            lines.append(f"{r.id},{b.sp:.6f},{b.se:.6f},{b.precision:.6f},"
                         f"{b.f1:.6f},{b.acc:.6f}")
        return "\n".join(lines) + "\n"

    def cal_csv(self) -> str:
        lines = ["id,c,a,l,f"]
        for r in self.images:
            c = r.cal
            lines.append(f"{r.id},{c.c:.6f},{c.a:.6f},{c.l:.6f},{c.f:.6f}")
        mc = self.aggregate
        lines.append(f"mean,{mc['cal_c']:.6f},{mc['cal_a']:.6f},"
                     f"{mc['cal_l']:.6f},{mc['cal_f']:.6f}")
        return "\n".join(lines) + "\n"


def predict_image(model, raster: np.ndarray, stride: int, batch: int) -> np.ndarray:
    """Overlap-crop, forward in grid order, and stitch one prepared raster."""
    patch = model.config.patch
    grid = pipeline.plan_grid(raster.shape[0], raster.shape[1], patch=patch, stride=stride)
    crops = pipeline.extract_patches(raster, grid)
    probs = []
    for lo in range(0, len(crops), batch):
        chunk = np.stack(crops[lo:lo + batch])[:, None, :, :]
        out = model.forward(Tensor(chunk))
        probs.extend(out.data[:, 0])
    return pipeline.stitch(probs, grid)


def evaluate(model, test_set, cfg: EvalConfig) -> EvalReport:
    """Preprocess, tile, stitch and score every test image."""
    if not test_set:
        raise ValueError("test split is empty")
    for sample in test_set:
        if sample.truth is None or sample.fov is None:
            raise ValueError(f"{sample.id}: evaluation needs truth and fov masks")

    def predict(sample):
        raster = pipeline.preprocess(sample.image, cfg.preprocess)
        return predict_image(model, raster, cfg.stride, cfg.batch)

    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            probs = list(pool.map(predict, test_set))
    else:
        probs = [predict(s) for s in test_set]

    images = []
    pooled_probs, pooled_truths, pooled_fovs = [], [], []
    for sample, prob in zip(test_set, probs):
        mask = pipeline.binarize(prob, cfg.threshold)
        basic = metrics.basic_metrics(metrics.confusion(mask, sample.truth, sample.fov))
        calscore = metrics.cal(mask, sample.truth)
        images.append(ImageResult(id=sample.id, basic=basic, cal=calscore, prob=prob))
        pooled_probs.append(prob)
        pooled_truths.append(sample.truth)
        pooled_fovs.append(sample.fov)

    roc = metrics.roc_auc(pooled_probs, pooled_truths, pooled_fovs)
    mean = lambda key: float(np.mean([getattr(r.basic, key) for r in images]))
    aggregate = {
        "auc": roc.auc,
        "sp": mean("sp"),
        "se": mean("se"),
        "precision": mean("precision"),
        "f1": mean("f1"),
        "acc": mean("acc"),
        "cal_c": float(np.mean([r.cal.c for r in images])),
        "cal_a": float(np.mean([r.cal.a for r in images])),
        "cal_l": float(np.mean([r.cal.l for r in images])),
        "cal_f": float(np.mean([r.cal.f for r in images])),
    }
    return EvalReport(images=images, roc=roc, aggregate=aggregate)


# ---------------------------------------------------------------------------
# checkpoints: magic TUNX, little-endian u32 framing, float32 payloads


MAGIC = b"TUNX"
FORMAT_VERSION = 1

_META_FIELDS = ("n1", "n2", "base_channels", "heads", "subsample_k", "patch",
                "in_channels", "out_channels", "fusion_depth")


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<I", len(encoded)), encoded,
             struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: VesselNext, state: AdamState | None = None,
                    epoch: int = 0, best_val: float = 0.0):
    entries: list[tuple[str, np.ndarray]] = []
    cfg = model.config
    for name in _META_FIELDS:
        entries.append((f"meta/{name}", np.array([getattr(cfg, name)], dtype=np.float64)))
    entries.append(("meta/epoch", np.array([epoch], dtype=np.float64)))
    entries.append(("meta/best_val", np.array([best_val], dtype=np.float64)))
    for name, p in model.named_parameters():
        entries.append((name, p.data))
    if state is not None:
        entries.append(("opt/t", np.array([state.t], dtype=np.float64)))
        for name, m in state.m.items():
            entries.append((f"opt/m/{name}", m))
        for name, v in state.v.items():
            entries.append((f"opt/v/{name}", v))

    payload = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(entries))]
    payload += [_pack_tensor(name, arr) for name, arr in entries]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(payload))
    tmp.replace(path)


def _unpack(blob: bytes):
    if blob[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        tensors[name] = arr.reshape(dims).astype(np.float64)
    return tensors


def load_checkpoint(path):
    """Rebuild (model, state, epoch, best_val) from a checkpoint file."""
    tensors = _unpack(Path(path).read_bytes())
    kwargs = {name: int(tensors[f"meta/{name}"][0]) for name in _META_FIELDS}
    model = build(ModelConfig(**kwargs), seed=0)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ValueError(f"checkpoint missing parameter {name}")
        if tensors[name].shape != p.shape:
            raise ValueError(f"checkpoint parameter {name} has shape "
                             f"{tensors[name].shape}, model expects {p.shape}")
        p.data = tensors[name]
    state = None
    if "opt/t" in tensors:
        state = AdamState(t=int(tensors["opt/t"][0]))
        for name, _ in model.named_parameters():
            if f"opt/m/{name}" in tensors:
                state.m[name] = tensors[f"opt/m/{name}"]
                state.v[name] = tensors[f"opt/v/{name}"]
    epoch = int(tensors["meta/epoch"][0])
    best_val = float(tensors["meta/best_val"][0])
    return model, state, epoch, best_val
