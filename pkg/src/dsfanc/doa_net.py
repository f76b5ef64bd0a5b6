"""Compact CNN for azimuth/elevation classification from 2J-channel
magnitude+phase spectrograms.

Three modules of conv3x3 -> GroupNorm -> ReLU -> maxpool2x2, a global
average pool and two softmax heads.  Forward and backward passes are plain
numpy; activations are kept channel-major, ``(C, B, H, W)``, so every
convolution is a single im2col matmul.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .anc import AZIMUTH_CLASSES, ELEVATION_CLASSES

log = logging.getLogger(__name__)

GN_EPS = 1e-5


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 8
    channels: tuple[int, ...] = (16, 32, 64)
    groups: tuple[int, ...] = (4, 8, 8)
    n_azim: int = len(AZIMUTH_CLASSES)
    n_elev: int = len(ELEVATION_CLASSES)
    input_hw: tuple[int, int] = (513, 110)

    def __post_init__(self):
        if len(self.channels) != len(self.groups):
            raise ValueError("one group count per conv module is required")
        for c, g in zip(self.channels, self.groups):
            if c % g:
                raise ValueError(f"{g} groups do not divide {c} channels")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for i, c in enumerate(self.channels, 1):
            shapes[f"conv{i}.w"] = (c, cin, 3, 3)
            shapes[f"conv{i}.b"] = (c,)
            shapes[f"gn{i}.gamma"] = (c,)
            shapes[f"gn{i}.beta"] = (c,)
            cin = c
        shapes["fc_azim.w"] = (self.n_azim, cin)
        shapes["fc_azim.b"] = (self.n_azim,)
        shapes["fc_elev.w"] = (self.n_elev, cin)
        shapes["fc_elev.b"] = (self.n_elev,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)


class CnnParams(dict):
    """Ordered name -> array mapping of every trainable tensor."""

    def __init__(self, arch: Architecture, arrays=None):
        super().__init__()
        self.arch = arch
        for name, shape in arch.param_shapes().items():
            a = np.zeros(shape) if arrays is None else np.asarray(arrays[name], dtype=float)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            self[name] = a

    @classmethod
    def init(cls, arch: Architecture = Architecture(), seed: int = 0) -> "CnnParams":
        rng = np.random.default_rng(seed)
        p = cls(arch)
        for name, shape in arch.param_shapes().items():
            if name.startswith("conv") and name.endswith(".w"):
                fan_in = shape[1] * 9
                p[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            elif name.startswith("fc") and name.endswith(".w"):
                p[name] = rng.standard_normal(shape) * math.sqrt(1.0 / shape[1])
            elif name.endswith(".gamma"):
                p[name] = np.ones(shape)
        return p

    def zeros_like(self) -> "CnnParams":
        return CnnParams(self.arch)

    def copy(self) -> "CnnParams":
        return CnnParams(self.arch, {k: v.copy() for k, v in self.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    @classmethod
    def from_flat(cls, arch: Architecture, vec) -> "CnnParams":
        vec = np.asarray(vec, dtype=float)
        arrays, k = {}, 0
        for name, shape in arch.param_shapes().items():
            n = int(np.prod(shape))
            arrays[name] = vec[k:k + n].reshape(shape)
            k += n
        if k != vec.size:
            raise ValueError(f"flat vector has {vec.size} values, architecture needs {k}")
        return cls(arch, arrays)

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))


@dataclass
class DoaPrediction:
    p_azim: np.ndarray
    p_elev: np.ndarray


def softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = 0) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


# --- layers (channel-major tensors) -------------------------------------


def _im2col(x):
    C, B, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, B, H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(C * 9, B * H * W)


def _col2im(dcols, shape):
    C, B, H, W = shape
    dcols = dcols.reshape(C, 3, 3, B, H, W)
    dxp = np.zeros((C, B, H + 2, W + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += dcols[:, i, j]
    return dxp[:, :, 1:-1, 1:-1]


def conv_forward(x, w, b):
    C, B, H, W = x.shape
    cols = _im2col(x)
    out = w.reshape(w.shape[0], -1) @ cols
    out += b[:, None]
    return out.reshape(w.shape[0], B, H, W), cols


def conv_backward(dout, cols, w, x_shape, need_dx=True):
    O = w.shape[0]
    d2 = dout.reshape(O, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = _col2im(w.reshape(O, -1).T @ d2, x_shape) if need_dx else None
    return dx, dw, db


def groupnorm_forward(x, gamma, beta, groups, eps=GN_EPS):
    C, B, H, W = x.shape
    xg = x.reshape(groups, C // groups, B, H, W)
    mu = xg.mean(axis=(1, 3, 4), keepdims=True)
    var = xg.var(axis=(1, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(C, B, H, W)
    out = xhat * gamma[:, None, None, None] + beta[:, None, None, None]
    return out, (xhat, inv)


def groupnorm_backward(dout, cache, gamma, groups):
    xhat, inv = cache
    C, B, H, W = dout.shape
    dgamma = np.einsum("cbhw,cbhw->c", dout, xhat)
    dbeta = dout.sum(axis=(1, 2, 3))
    dxhat = (dout * gamma[:, None, None, None]).reshape(groups, C // groups, B, H, W)
    xh = xhat.reshape(groups, C // groups, B, H, W)
    n = (C // groups) * H * W
    s1 = dxhat.sum(axis=(1, 3, 4), keepdims=True)
    s2 = (dxhat * xh).sum(axis=(1, 3, 4), keepdims=True)
    dx = (dxhat - s1 / n - xh * (s2 / n)) * inv
    return dx.reshape(C, B, H, W), dgamma, dbeta


def maxpool_forward(x):
    """2x2/stride-2 max pool; odd trailing rows/columns are dropped."""
    C, B, H, W = x.shape
    h, w = H // 2, W // 2
    win = x[:, :, :2 * h, :2 * w].reshape(C, B, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(C, B, h, w, 4)
    idx = win.argmax(axis=-1)  # first maximum in (0,0),(0,1),(1,0),(1,1) order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx, x_shape):
    C, B, H, W = x_shape
    h, w = dout.shape[2], dout.shape[3]
    dwin = np.zeros((C, B, h, w, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :2 * h, :2 * w] = dwin.reshape(C, B, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(C, B, 2 * h, 2 * w)
    return dx


# --- network ----------------------------------------------------------------


def _cast(params: CnnParams, dtype):
    return {k: v.astype(dtype, copy=False) for k, v in params.items()}


def forward_logits(x, params: CnnParams, dtype=np.float64):
    """Logits for a batch ``x`` of shape ``(B, 2J, F, T)`` (or one sample).

    Returns ``(logits_azim (A, B), logits_elev (Bc, B), cache)``.
    """
    arch = params.arch
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (arch.in_channels, *arch.input_hw):
        raise ValueError(f"expected input ({arch.in_channels}, {arch.input_hw[0]}, {arch.input_hw[1]}), "
                         f"got {x.shape[1:]}")
    p = _cast(params, dtype)
    h = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=dtype)
    cache = []
    for i, g in enumerate(arch.groups, 1):
        a, cols = conv_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        n, gcache = groupnorm_forward(a, p[f"gn{i}.gamma"], p[f"gn{i}.beta"], g)
        r = np.maximum(n, 0.0)
        h_next, idx = maxpool_forward(r)
        cache.append((h.shape, cols, gcache, n > 0, r.shape, idx))
        h = h_next
    pooled = h.mean(axis=(2, 3))  # (C, B)
    za = p["fc_azim.w"] @ pooled + p["fc_azim.b"][:, None]
    ze = p["fc_elev.w"] @ pooled + p["fc_elev.b"][:, None]
    if not (np.all(np.isfinite(za)) and np.all(np.isfinite(ze))):
        raise FloatingPointError("non-finite activations in forward pass")
    return za, ze, {"layers": cache, "pooled": pooled, "last_shape": h.shape, "params": p}


def forward(x, params: CnnParams, dtype=np.float64):
    """Class probabilities for one sample (or a batch) plus the cache."""
    za, ze, cache = forward_logits(x, params, dtype)
    pa, pe = softmax(za.astype(float)), softmax(ze.astype(float))
    if pa.shape[1] == 1:
        return DoaPrediction(pa[:, 0], pe[:, 0]), cache
    return DoaPrediction(pa.T, pe.T), cache


def argmax_classes(pred: DoaPrediction):
    """Most probable (azimuth, elevation) class; ties go to the lower index."""
    return int(np.argmax(pred.p_azim)), int(np.argmax(pred.p_elev))


def joint_loss(logits_azim, logits_elev, azim_class, elev_class):
    """Cross-entropy of both heads and their sum, in log-sum-exp form.

    Accepts a single sample (1-D logits, int labels) or a batch
    (``(A, B)`` logits, label arrays); batch losses are means.
    """
    za = np.asarray(logits_azim, dtype=float)
    ze = np.asarray(logits_elev, dtype=float)
    single = za.ndim == 1
    if single:
        za, ze = za[:, None], ze[:, None]
    ya = np.atleast_1d(np.asarray(azim_class, dtype=int))
    ye = np.atleast_1d(np.asarray(elev_class, dtype=int))
    cols = np.arange(za.shape[1])
    la = float(-log_softmax(za)[ya, cols].mean())
    le = float(-log_softmax(ze)[ye, cols].mean())
    return la + le, la, le


def backward(cache, logits_azim, logits_elev, azim_class, elev_class, params: CnnParams) -> CnnParams:
    """Gradient of the batch-mean joint loss w.r.t. every parameter."""
    arch = params.arch
    p = cache["params"]
    dtype = cache["pooled"].dtype
    B = logits_azim.shape[1]
    ya = np.atleast_1d(np.asarray(azim_class, dtype=int))
    ye = np.atleast_1d(np.asarray(elev_class, dtype=int))
    cols = np.arange(B)
    dza = softmax(np.asarray(logits_azim, dtype=float))
    dza[ya, cols] -= 1.0
    dze = softmax(np.asarray(logits_elev, dtype=float))
    dze[ye, cols] -= 1.0
    dza /= B
    dze /= B
    grads = params.zeros_like()
    pooled = cache["pooled"].astype(float)
    grads["fc_azim.w"] = dza @ pooled.T
    grads["fc_azim.b"] = dza.sum(axis=1)
    grads["fc_elev.w"] = dze @ pooled.T
    grads["fc_elev.b"] = dze.sum(axis=1)
    dpool = p["fc_azim.w"].T.astype(float) @ dza + p["fc_elev.w"].T.astype(float) @ dze
    C, _, h, w = cache["last_shape"]
    dh = np.broadcast_to((dpool / (h * w)).astype(dtype)[:, :, None, None], (C, B, h, w))
    for i in range(len(arch.groups), 0, -1):
        x_shape, cols_i, gcache, mask, r_shape, idx = cache["layers"][i - 1]
        dr = maxpool_backward(np.ascontiguousarray(dh), idx, r_shape)
        dn = dr * mask
        da, dg, dbeta = groupnorm_backward(dn, gcache, p[f"gn{i}.gamma"], arch.groups[i - 1])
        dh, dw, db = conv_backward(da, cols_i, p[f"conv{i}.w"], x_shape, need_dx=i > 1)
        grads[f"gn{i}.gamma"] = dg.astype(float)
        grads[f"gn{i}.beta"] = dbeta.astype(float)
        grads[f"conv{i}.w"] = dw.astype(float)
        grads[f"conv{i}.b"] = db.astype(float)
    return grads


def loss_and_grad(x, azim_class, elev_class, params: CnnParams, dtype=np.float64):
    za, ze, cache = forward_logits(x, params, dtype)
    loss = joint_loss(za, ze, azim_class, elev_class)
    return loss, backward(cache, za, ze, azim_class, elev_class, params)


def count_params_and_macs(params_or_arch, input_hw: tuple[int, int] | None = None):
    """Trainable parameter count and multiply-accumulates of one forward pass
    (convolutions and heads; normalization and pooling excluded)."""
    arch = params_or_arch.arch if isinstance(params_or_arch, CnnParams) else params_or_arch
    H, W = input_hw or arch.input_hw
    n_params = sum(int(np.prod(s)) for s in arch.param_shapes().values())
    macs, cin = 0, arch.in_channels
    for c in arch.channels:
        macs += c * cin * 9 * H * W
        H, W, cin = H // 2, W // 2, c
    macs += (arch.n_azim + arch.n_elev) * cin
    return n_params, macs


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    micro_batch: int = 4
    dtype: str = "f64"
    max_seconds: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: CnnParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: CnnParams, grads: CnnParams):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _np_dtype(tag: str):
    return np.float32 if tag == "f32" else np.float64


def predict(dataset, params: CnnParams, batch: int = 8, dtype="f64"):
    """Probabilities ``(p_azim (N, A), p_elev (N, B))`` for a whole dataset."""
    pa, pe = [], []
    for s in range(0, len(dataset), batch):
        x = dataset.batch(range(s, min(s + batch, len(dataset))))
        za, ze, _ = forward_logits(x, params, _np_dtype(dtype))
        pa.append(softmax(za.astype(float)).T)
        pe.append(softmax(ze.astype(float)).T)
    return np.concatenate(pa), np.concatenate(pe)


def evaluate(dataset, params: CnnParams, dtype="f64") -> dict:
    pa, pe = predict(dataset, params, dtype=dtype)
    ya, ye = dataset.azim, dataset.elev
    n = np.arange(len(ya))
    la = float(-np.mean(np.log(np.maximum(pa[n, ya], 1e-300))))
    le = float(-np.mean(np.log(np.maximum(pe[n, ye], 1e-300))))
    return {
        "loss": la + le, "loss_azim": la, "loss_elev": le,
        "acc_azim": float(np.mean(pa.argmax(1) == ya)),
        "acc_elev": float(np.mean(pe.argmax(1) == ye)),
        "pred_azim": pa.argmax(1), "pred_elev": pe.argmax(1),
    }


def train(train_set, val_set, cfg: TrainConfig, arch: Architecture = Architecture(), params=None):
    """Minibatch Adam on the joint loss; returns the best-validation-loss
    parameters and a per-epoch history."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    dtype = _np_dtype(cfg.dtype)
    params = CnnParams.init(arch, cfg.seed) if params is None else params.copy()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    best, best_loss, history = params.copy(), math.inf, []
    t0 = time.perf_counter()
    ya_all, ye_all = train_set.azim, train_set.elev
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            grads = params.zeros_like()
            batch_loss = 0.0
            for m in range(0, len(idx), cfg.micro_batch):
                sub = idx[m:m + cfg.micro_batch]
                (loss, _, _), g = loss_and_grad(train_set.batch(sub), ya_all[sub], ye_all[sub], params, dtype)
                w = len(sub) / len(idx)
                batch_loss += w * loss
                for k in grads:
                    grads[k] += w * g[k]
            if not math.isfinite(batch_loss):
                raise FloatingPointError(f"non-finite training loss in epoch {epoch}")
            opt.step(params, grads)
            losses.append(batch_loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        if val_set is not None and len(val_set):
            ev = evaluate(val_set, params, cfg.dtype)
            rec.update({k: ev[k] for k in ("loss", "acc_azim", "acc_elev")})
            rec["val_loss"] = rec.pop("loss")
            if rec["val_loss"] < best_loss:
                best_loss, best = rec["val_loss"], params.copy()
        else:
            best = params.copy()
        history.append(rec)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in rec.items()})
        # wall-clock budget: skip an epoch that would end past it (not part of the determinism contract)
        if cfg.max_seconds is not None and rec["seconds"] * (epoch + 2) / (epoch + 1) > cfg.max_seconds:
            if epoch + 1 < cfg.epochs:
                log.warning("stopping after epoch %d: next epoch would exceed the %.0f s budget", epoch,
                            cfg.max_seconds)
            break
    return best, history


# --- persistence -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: CnnParams
    manifest: dict

    @property
    def grid(self) -> dict:
        return self.manifest["grid"]

    @property
    def log_magnitude(self) -> bool:
        return bool(self.manifest.get("features", {}).get("log_magnitude", False))

    @property
    def normalize(self) -> str:
        return self.manifest.get("features", {}).get("normalize", "relative")


def save_checkpoint(path, params: CnnParams, log_magnitude: bool = False, normalize: str = "relative",
                    extra: dict | None = None) -> dict:
    """Flat f64 parameter tensor at ``path`` plus a ``.json`` architecture manifest."""
    from pathlib import Path

    from . import tensorio

    path = Path(path)
    digest = tensorio.write_tensor(path, params.flat(), "f64")
    n_params, macs = count_params_and_macs(params)
    manifest = {
        "kind": "doa_cnn_checkpoint", "tensor": path.name, "tensor_sha256": digest,
        "architecture": params.arch.to_dict(),
        "param_layout": [[k, list(v.shape)] for k, v in params.items()],
        "grid": {"azimuth_classes": list(AZIMUTH_CLASSES), "elevation_classes": list(ELEVATION_CLASSES)},
        "features": {"log_magnitude": log_magnitude, "normalize": normalize},
        "n_params": n_params, "macs": macs, **(extra or {}),
    }
    manifest["manifest_hash"] = tensorio.write_manifest(path.with_suffix(".json"), manifest)
    return manifest


def load_checkpoint(path) -> Checkpoint:
    from pathlib import Path

    from . import tensorio

    path = Path(path)
    manifest = tensorio.read_manifest(path.with_suffix(".json"))
    a = manifest["architecture"]
    arch = Architecture(a["in_channels"], tuple(a["channels"]), tuple(a["groups"]), a["n_azim"],
                        a["n_elev"], tuple(a["input_hw"]))
    return Checkpoint(CnnParams.from_flat(arch, tensorio.read_tensor(path)), manifest)
