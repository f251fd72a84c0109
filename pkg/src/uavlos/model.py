"""Dual-input LoS/NLoS fusion network, single-modality baselines, training and evaluation.

Fusion network (per sample)::

    image (3,H,H) -> stem convs -> adaptive max pool (S,S) -> patches (N, P*P*C')
        -> patch embedding + positions -> L pre-norm encoder blocks
        -> token mean (D) -> linear D -> F*g*g -> f_vit (F,g,g)
    cir (2,g,g)   -> two same-size convs -> f_cnn (F,g,g)
    concat (2F,g,g) -> fusion convs -> classifier convs -> 1x1 conv -> sigmoid (g,g)

Baselines: ``rgb`` (stem + pooling + conv head) and ``cir`` (one-hidden-layer MLP).
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import Dataset, Sample, Split
from .errors import ConfigError, DomainError, FormatError, ShapeError
from .tensor import Tensor

MODEL_KINDS = ("fusion", "rgb", "cir")
BCE_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 96          # S, input to the patch embedding
    patch: int = 8                # P
    embed_dim: int = 64           # D
    depth: int = 2                # L
    heads: int = 4                # h
    branch_channels: int = 16     # F
    grid: int = 30                # g
    fusion_depth: int = 3
    classifier_depth: int = 2     # 3x3 convs halving channels before the final 1x1
    stem_channels: int = 8
    mlp_ratio: int = 4
    input_side: int = 96          # camera resolution fed to the stem
    paper_scale: bool = False

    def __post_init__(self):
        if self.image_side % self.patch:
            raise ConfigError(f"image side {self.image_side} not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.input_side < self.image_side:
            raise ConfigError("camera resolution must be >= the pooled image side")
        if self.branch_channels < 2 ** self.classifier_depth:
            raise ConfigError("branch_channels too small for classifier_depth halvings")
        if self.grid < 1:
            raise ConfigError("grid must be positive")

    @classmethod
    def paper(cls, grid: int = 30) -> "ModelConfig":
        """ViT-B/16-sized configuration at 1080 px input."""
        return cls(image_side=224, patch=16, embed_dim=768, depth=12, heads=12,
                   branch_channels=128, grid=grid, input_side=1080, paper_scale=True)

    @property
    def tokens(self) -> int:
        return (self.image_side // self.patch) ** 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


FINE_TUNE = TrainConfig(epochs=30, lr=1e-4)


# ---------------------------------------------------------------------------
# parameters

def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


_RELU_GAIN = math.sqrt(2.0)


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def put(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True)

    def conv(self, name: str, cin: int, cout: int, k: int, relu: bool = True) -> None:
        self.put(f"{name}.w", _uniform(self.rng, (cout, cin, k, k), cin * k * k,
                                       _RELU_GAIN if relu else 1.0))
        self.put(f"{name}.b", np.zeros(cout))

    def linear(self, name: str, nin: int, nout: int, gain: float = 1.0) -> None:
        self.put(f"{name}.w", _uniform(self.rng, (nout, nin), nin, gain))
        self.put(f"{name}.b", np.zeros(nout))

    def norm(self, name: str, d: int) -> None:
        self.put(f"{name}.g", np.ones(d))
        self.put(f"{name}.s", np.zeros(d))


def _init_stem(it: _Init, prefix: str, cfg: ModelConfig) -> None:
    c = cfg.stem_channels
    it.conv(f"{prefix}.0", 3, c, 3)
    it.conv(f"{prefix}.1", c, c, 3)


def init_params(kind: str, cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded fan-in-scaled uniform initialisation (He gain before ReLU)."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    it = _Init(seed)
    g, F, D = cfg.grid, cfg.branch_channels, cfg.embed_dim
    if kind == "fusion":
        _init_stem(it, "stem", cfg)
        it.linear("embed", cfg.stem_channels * cfg.patch ** 2, D)
        it.put("pos", it.rng.uniform(-0.02, 0.02, size=(cfg.tokens, D)))
        hidden = cfg.mlp_ratio * D
        for l in range(cfg.depth):
            b = f"block{l}"
            it.norm(f"{b}.ln1", D)
            for m in ("q", "k", "v", "o"):
                it.linear(f"{b}.attn.{m}", D, D)
            it.norm(f"{b}.ln2", D)
            it.linear(f"{b}.ffn.1", D, hidden)
            it.linear(f"{b}.ffn.2", hidden, D)
        it.norm("vit_norm", D)
        it.linear("vit_head", D, F * g * g)
        it.conv("cnn.0", 2, F, 3)
        it.conv("cnn.1", F, F, 3)
        for l in range(cfg.fusion_depth):
            it.conv(f"fuse.{l}", 2 * F, 2 * F, 3)
        c = 2 * F
        for l in range(cfg.classifier_depth):
            it.conv(f"cls.{l}", c, c // 2, 3)
            c //= 2
        it.conv("cls.out", c, 1, 1, relu=False)
    elif kind == "rgb":
        _init_stem(it, "stem", cfg)
        it.conv("head.0", cfg.stem_channels, F, 3)
        it.conv("head.1", F, F, 3)
        it.conv("head.out", F, 1, 1, relu=False)
    else:
        it.linear("mlp.0", 2 * g * g, 4 * g * g, _RELU_GAIN)
        it.linear("mlp.1", 4 * g * g, g * g)
    return it.params


# ---------------------------------------------------------------------------
# forward passes (batched: leading axis B)

def _conv(x: Tensor, p: dict[str, Tensor], name: str, act: bool = True) -> Tensor:
    y = T.conv2d_same(x, p[f"{name}.w"], p[f"{name}.b"])
    return T.relu(y) if act else y


def _lin(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return T.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _ln(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return T.layer_norm(x, p[f"{name}.g"], p[f"{name}.s"])


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def encoder_block(Z: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Pre-norm residual block: Z + MSA(LN(Z)), then + FFN(LN(.))."""
    attn = {f"{m}{k}": p[f"{prefix}.attn.{k}.{m}"] for k in "qkvo" for m in "wb"}
    Z = T.add(Z, T.multi_head_self_attention(_ln(Z, p, f"{prefix}.ln1"), attn, heads))
    ffn = {"w1": p[f"{prefix}.ffn.1.w"], "b1": p[f"{prefix}.ffn.1.b"],
           "w2": p[f"{prefix}.ffn.2.w"], "b2": p[f"{prefix}.ffn.2.b"]}
    return T.add(Z, T.feed_forward(_ln(Z, p, f"{prefix}.ln2"), ffn))


def vit_branch(x_rgb: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Image -> (F, g, g) feature map (batched input gives (B, F, g, g))."""
    x, single = _batched(x_rgb, 3)
    B = x.shape[0]
    if x.shape[1] != 3:
        raise ShapeError(f"vit_branch: expected 3 image channels, got {x.shape[1]}")
    f0 = _conv(_conv(x, params, "stem.0"), params, "stem.1")
    fres = T.adaptive_max_pool(f0, (cfg.image_side, cfg.image_side))
    patches = T.patchify(fres, cfg.patch)                               # (B, N, P*P*C)
    Z = T.add(_lin(patches, params, "embed"), T.expand(params["pos"], B))
    for l in range(cfg.depth):
        Z = encoder_block(Z, params, f"block{l}", cfg.heads)
    v = T.mean(_ln(Z, params, "vit_norm"), axis=1)                     # (B, D)
    F, g = cfg.branch_channels, cfg.grid
    out = T.reshape(_lin(v, params, "vit_head"), (B, F, g, g))
    return T.reshape(out, out.shape[1:]) if single else out


def cnn_branch(x_cir: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """CIR (2, g, g) -> (F, g, g) through two same-size convs; no pooling or stride."""
    x, single = _batched(x_cir, 3)
    if x.shape[1] != 2:
        raise ShapeError(f"cnn_branch: expected 2 CIR channels, got {x.shape[1]}")
    out = _conv(_conv(x, params, "cnn.0"), params, "cnn.1")
    return T.reshape(out, out.shape[1:]) if single else out


def fusion_logits(f_vit: Tensor, f_cnn: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    if f_vit.shape != f_cnn.shape:
        raise ShapeError(f"fusion: branch maps differ {f_vit.shape} vs {f_cnn.shape}")
    a, single = _batched(f_vit, 3)
    b, _ = _batched(f_cnn, 3)
    h = T.concat_channels(a, b)
    for l in range(cfg.fusion_depth):
        h = _conv(h, params, f"fuse.{l}")
    for l in range(cfg.classifier_depth):
        h = _conv(h, params, f"cls.{l}")
    z = _conv(h, params, "cls.out", act=False)                         # (B, 1, g, g)
    z = T.reshape(z, (z.shape[0],) + z.shape[2:])
    return T.reshape(z, z.shape[1:]) if single else z


def fuse_and_classify(f_vit: Tensor, f_cnn: Tensor, params: dict[str, Tensor],
                      cfg: ModelConfig) -> Tensor:
    """Concatenate branch maps, fuse, classify; returns LoS probabilities (g, g)."""
    return T.sigmoid(fusion_logits(f_vit, f_cnn, params, cfg))


def rgb_logits(x_rgb: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    x, single = _batched(x_rgb, 3)
    f = _conv(_conv(x, params, "stem.0"), params, "stem.1")
    f = T.adaptive_max_pool(f, (cfg.grid, cfg.grid))
    f = _conv(_conv(f, params, "head.0"), params, "head.1")
    z = _conv(f, params, "head.out", act=False)
    z = T.reshape(z, (z.shape[0],) + z.shape[2:])
    return T.reshape(z, z.shape[1:]) if single else z


def rgb_only_baseline(x_rgb: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    return T.sigmoid(rgb_logits(x_rgb, params, cfg))


def cir_logits(x_cir: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    x, single = _batched(x_cir, 3)
    B, g = x.shape[0], cfg.grid
    h = T.relu(_lin(T.reshape(x, (B, 2 * g * g)), params, "mlp.0"))
    z = T.reshape(_lin(h, params, "mlp.1"), (B, g, g))
    return T.reshape(z, z.shape[1:]) if single else z


def cir_only_baseline(x_cir: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    return T.sigmoid(cir_logits(x_cir, params, cfg))


# ---------------------------------------------------------------------------
# decisions and loss

def decide(prob: np.ndarray) -> np.ndarray:
    """Hard labels: 1 where prob >= 0.5."""
    return (np.asarray(prob) >= 0.5).astype(np.uint8)


def _check_labels(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    return y


def bce_loss(prob: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of the per-sample summed binary cross-entropy."""
    return T.binary_cross_entropy(prob, _check_labels(labels), BCE_EPS)


def bce_loss_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Same value as ``bce_loss(sigmoid(logits))``, computed stably."""
    return T.binary_cross_entropy_with_logits(logits, _check_labels(labels), BCE_EPS)


# ---------------------------------------------------------------------------
# model wrapper

def _stack(samples: Sequence[Sample], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])


@dataclass
class Model:
    kind: str
    cfg: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, kind: str, cfg: ModelConfig = ModelConfig(), seed: int = 0) -> "Model":
        return cls(kind, cfg, init_params(kind, cfg, seed))

    def logits(self, images: np.ndarray | Tensor, cirs: np.ndarray | Tensor) -> Tensor:
        p, cfg = self.params, self.cfg
        if self.kind == "fusion":
            img, cir = T.as_tensor(images), T.as_tensor(cirs)
            return fusion_logits(vit_branch(img, p, cfg), cnn_branch(cir, p, cfg), p, cfg)
        if self.kind == "rgb":
            return rgb_logits(T.as_tensor(images), p, cfg)
        return cir_logits(T.as_tensor(cirs), p, cfg)

    def logits_for(self, samples: Sequence[Sample], images: np.ndarray | None = None) -> Tensor:
        imgs = _stack(samples, "image") if images is None and self.kind != "cir" else images
        cirs = _stack(samples, "cir") if self.kind != "rgb" else None
        return self.logits(imgs, cirs)

    def predict_proba(self, samples: Sequence[Sample], batch_size: int = 16,
                      images: np.ndarray | None = None) -> np.ndarray:
        """(n, g, g) LoS probabilities; ``images`` optionally replaces the sample images."""
        out = []
        with T.no_grad():
            for s in range(0, len(samples), batch_size):
                chunk = samples[s:s + batch_size]
                imgs = None if images is None else images[s:s + batch_size]
                z = self.logits_for(chunk, imgs).data.astype(np.float64)
                out.append(0.5 * (1.0 + np.tanh(0.5 * z)))
        g = self.cfg.grid
        return np.concatenate(out) if out else np.zeros((0, g, g))

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        return decide(self.predict_proba(samples))

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.kind, self.cfg, params)

    def num_parameters(self) -> int:
        return int(np.sum([v.size for v in self.params.values()]))


# ---------------------------------------------------------------------------
# optimisation

class Adam:
    # elements per update chunk; keeps the dozen passes of one chunk in cache
    CHUNK = 1 << 15

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(v.size, dtype=v.data.dtype) for k, v in params.items()}
        self.v = {k: np.zeros(v.size, dtype=v.data.dtype) for k, v in params.items()}
        dtypes = {v.data.dtype for v in params.values()}
        self._tmp = {dt: np.empty(self.CHUNK, dtype=dt) for dt in dtypes}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One Adam update, computed as lr*sqrt(c2)/c1 * m / (sqrt(v) + eps*sqrt(c2)),
        which equals the bias-corrected form m_hat / (sqrt(v_hat) + eps)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step_size = self.lr * math.sqrt(c2) / c1
        eps_hat = self.eps * math.sqrt(c2)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            data = p.data.reshape(-1)
            g_all = np.asarray(p.grad, dtype=data.dtype).reshape(-1)
            m_all, v_all = self.m[k], self.v[k]
            buf = self._tmp[data.dtype.type(0).dtype]
            for s in range(0, data.size, self.CHUNK):
                e = min(s + self.CHUNK, data.size)
                g, m, v, tmp = g_all[s:e], m_all[s:e], v_all[s:e], buf[:e - s]
                np.multiply(g, 1.0 - b1, out=tmp)
                m *= b1
                m += tmp
                np.multiply(g, g, out=tmp)
                tmp *= 1.0 - b2
                v *= b2
                v += tmp
                np.sqrt(v, out=tmp)
                tmp += eps_hat
                np.divide(m, tmp, out=tmp)
                tmp *= step_size
                data[s:e] -= tmp


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def fit(model: Model, samples: Sequence[Sample], cfg: TrainConfig,
        eval_samples: Sequence[Sample] | None = None, max_steps: int | None = None,
        log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam on shuffled mini-batches; updates ``model`` in place."""
    if not samples:
        raise DomainError("cannot train on an empty sample set")
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    steps = 0
    epochs = cfg.epochs if max_steps is None else max(cfg.epochs, 1 << 30)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[s:s + cfg.batch_size]]
            opt.zero_grad()
            loss = bce_loss_logits(model.logits_for(batch), _stack(batch, "labels"))
            loss.backward()
            opt.step()
            losses.append(loss.item())
            result.step_losses.append(loss.item())
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        acc = evaluate(model, eval_samples).accuracy if eval_samples else float("nan")
        rec = EpochRecord(epoch, float(np.mean(losses)), acc)
        result.history.append(rec)
        if log:
            log(f"{model.kind} epoch {epoch}: loss {rec.train_loss:.3f} test acc {acc:.4f}")
        if max_steps is not None and steps >= max_steps:
            break
    return result


def train(kind: str, dataset: Dataset, split: Split, train_cfg: TrainConfig = TrainConfig(),
          model_cfg: ModelConfig | None = None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Train a fresh model of ``kind`` on the split's training samples."""
    if not split.train_ids:
        raise DomainError("training split is empty")
    if model_cfg is None:
        model_cfg = ModelConfig(grid=dataset.g, input_side=int(dataset.meta.get("image_side", 96)),
                                image_side=min(96, int(dataset.meta.get("image_side", 96))))
    model = Model.create(kind, model_cfg, train_cfg.seed)
    test = dataset.subset(split.test_ids) if split.test_ids else None
    return fit(model, dataset.subset(split.train_ids), train_cfg, test, log=log)


def fine_tune(model: Model, samples: Sequence[Sample], train_cfg: TrainConfig = FINE_TUNE,
              eval_samples: Sequence[Sample] | None = None) -> Model:
    """Continue training a copy of ``model`` on ``samples``; empty means zero-shot."""
    tuned = model.copy()
    if not samples:
        return tuned
    fit(tuned, samples, train_cfg, eval_samples)
    return tuned


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray                       # [true, predicted], 2 x 2 counts
    per_snapshot: list[tuple[int, int, float]]  # (route, snapshot index, accuracy)

    @property
    def cells(self) -> int:
        return int(self.confusion.sum())


Predictor = Callable[[Sequence[Sample]], np.ndarray]


def evaluate(model: Model | Predictor, samples: Sequence[Sample],
             images: np.ndarray | None = None) -> EvalResult:
    """Cell accuracy, confusion matrix and per-snapshot accuracy."""
    if not samples:
        raise DomainError("cannot evaluate on an empty sample list")
    if isinstance(model, Model):
        prob = model.predict_proba(samples, images=images)
    else:
        prob = np.asarray(model(samples))
    pred = decide(prob)
    truth = _stack(samples, "labels")
    conf = np.zeros((2, 2), dtype=np.int64)
    for t in (0, 1):
        for p in (0, 1):
            conf[t, p] = int(np.sum((truth == t) & (pred == p)))
    per = [(s.route_id, s.snapshot_index, float(np.mean(pred[i] == truth[i])))
           for i, s in enumerate(samples)]
    return EvalResult(float(np.trace(conf) / conf.sum()), conf, per)


# ---------------------------------------------------------------------------
# SNLM checkpoints

CKPT_MAGIC = b"SNLM"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Little-endian: magic, u32 version, u32 config length + JSON config,
    u32 parameter count, then (u16 name length, name, u32 ndim, u32 dims, f32 data)."""
    conf = json.dumps({"kind": model.kind, "config": asdict(model.cfg)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(conf)))
        fh.write(conf)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    try:
        magic, version, clen = struct.unpack_from("<4sII", raw, 0)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported SNLM version {version}")
        off = 12
        head = json.loads(raw[off:off + clen].decode("utf-8"))
        off += clen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(raw):
                raise FormatError(f"truncated parameter {name!r}")
            data = np.frombuffer(raw, "<f4", n, off).astype(np.float32).reshape(shape)
            off += 4 * n
            params[name] = Tensor(data, requires_grad=True, dtype=np.float32)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if off != len(raw):
        raise FormatError("trailing bytes after last parameter")
    cfg = ModelConfig(**head["config"])
    expected = init_params(head["kind"], cfg, 0)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
        raise FormatError("checkpoint parameters do not match the stored configuration")
    return Model(head["kind"], cfg, params)


def copy_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


__all__ = [
    "Adam", "EvalResult", "Model", "ModelConfig", "TrainConfig", "TrainResult", "bce_loss",
    "bce_loss_logits", "cir_only_baseline", "cnn_branch", "decide", "evaluate", "fine_tune",
    "fit", "fuse_and_classify", "init_params", "load_checkpoint", "rgb_only_baseline",
    "save_checkpoint", "train", "vit_branch", "FINE_TUNE",
]
