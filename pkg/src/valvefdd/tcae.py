"""Temporal convolutional autoencoder with hand-written backpropagation.

Encoder: L blocks of [dilated causal conv (n_filters, kernel k) -> 1x1 conv
(n_1x1) -> ReLU -> dropout] with dilations 1, b, b^2, ...; block outputs are
concatenated along channels (n_1x1 * L), compressed by a 1x1 conv to
``c_latent`` channels, average-pooled by ``s`` and flattened through a dense
projection to the latent vector z of length ``c_latent``.

Decoder: dense expansion of z back to (c_latent, T/s), nearest-neighbour
upsampling by ``s``, L mirrored blocks with dilations b^(L-1) ... 1, skip
concatenation and a 1x1 output conv to ``c`` channels.

Internally activations are laid out as (channels, batch, time) so each
convolution is a single matrix product.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container


def auto_blocks(T: int, k: int, b: int = 2) -> int:
    """Smallest block count whose dilated stack covers a window of length T."""
    if T < 2 or k < 2 or b < 2:
        raise ValueError("need T >= 2, k >= 2 and b >= 2")
    arg = (T - 1) * (b - 1) / (2 * (k - 1)) + 1
    L = math.ceil(math.log(arg, b) - 1e-12)
    return max(L, 1)


@dataclass(frozen=True)
class TcaeConfig:
    T: int = 100
    c: int = 14
    L: int | None = None  # None -> auto_blocks(T, k, b)
    k: int = 9
    n_filters: int = 64
    n_1x1: int = 16
    c_latent: int = 16
    s: int = 4
    dropout: float = 0.12
    b: int = 2
    abs_residual: bool = False

    def __post_init__(self):
        if self.L is None:
            object.__setattr__(self, "L", auto_blocks(self.T, self.k, self.b))
        for name in ("T", "c", "L", "k", "n_filters", "n_1x1", "c_latent", "s", "b"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.T % self.s:
            raise ValueError(f"window length {self.T} is not divisible by pooling factor {self.s}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def encoder_dilations(self) -> list[int]:
        return [self.b ** i for i in range(self.L)]

    @property
    def decoder_dilations(self) -> list[int]:
        return self.encoder_dilations[::-1]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.k - 1) * sum(self.encoder_dilations)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Features:
    z: np.ndarray  # (n, c_latent)
    r: np.ndarray  # (n, c)
    e: np.ndarray  # (n,)


# -- layers -------------------------------------------------------------------

def _conv_forward(x, W, bias, d):
    """Causal dilated conv. x: (Cin, B, T); W: (Cout, Cin, k)."""
    cin, B, T = x.shape
    cout, _, k = W.shape
    pad = (k - 1) * d
    if pad:
        xp = np.concatenate([np.zeros((cin, B, pad), x.dtype), x], axis=2)
    else:
        xp = x
    cols = np.empty((cin, k, B, T), x.dtype)
    for j in range(k):
        cols[:, j] = xp[:, :, j * d:j * d + T]
    cols = cols.reshape(cin * k, B * T)
    y = W.reshape(cout, cin * k) @ cols
    y += bias[:, None]
    return y.reshape(cout, B, T), cols


def _conv_backward(dy, cols, W, d, x_shape):
    cin, B, T = x_shape
    cout, _, k = W.shape
    dy2 = dy.reshape(cout, B * T)
    dW = (dy2 @ cols.T).reshape(W.shape)
    db = dy2.sum(axis=1)
    dcols = (W.reshape(cout, cin * k).T @ dy2).reshape(cin, k, B, T)
    pad = (k - 1) * d
    dxp = np.zeros((cin, B, T + pad), dy.dtype)
    for j in range(k):
        dxp[:, :, j * d:j * d + T] += dcols[:, j]
    return dxp[:, :, pad:], dW, db


def _pw_forward(x, W, bias):
    cin, B, T = x.shape
    y = W @ x.reshape(cin, B * T)
    y += bias[:, None]
    return y.reshape(W.shape[0], B, T)


def _pw_backward(dy, x, W):
    cout, B, T = dy.shape
    dy2 = dy.reshape(cout, B * T)
    x2 = x.reshape(x.shape[0], B * T)
    return (W.T @ dy2).reshape(x.shape), dy2 @ x2.T, dy2.sum(axis=1)


class TcaeModel:
    """Parameter container plus forward/backward passes."""

    def __init__(self, config: TcaeConfig, params: dict | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.meta: dict = {}
        self.params = self._init_params(seed) if params is None else {
            k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        expected = self.param_shapes()
        if list(self.params) != list(expected):
            self.params = {k: self.params[k] for k in expected}
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def param_shapes(self) -> dict:
        cfg = self.config
        tp = cfg.T // cfg.s
        shapes = {}
        cin = cfg.c
        for i in range(cfg.L):
            shapes[f"enc{i}.conv.W"] = (cfg.n_filters, cin, cfg.k)
            shapes[f"enc{i}.conv.b"] = (cfg.n_filters,)
            shapes[f"enc{i}.pw.W"] = (cfg.n_1x1, cfg.n_filters)
            shapes[f"enc{i}.pw.b"] = (cfg.n_1x1,)
            cin = cfg.n_1x1
        shapes["enc.latent.W"] = (cfg.c_latent, cfg.n_1x1 * cfg.L)
        shapes["enc.latent.b"] = (cfg.c_latent,)
        shapes["enc.proj.W"] = (cfg.c_latent, cfg.c_latent * tp)
        shapes["enc.proj.b"] = (cfg.c_latent,)
        shapes["dec.expand.W"] = (cfg.c_latent * tp, cfg.c_latent)
        shapes["dec.expand.b"] = (cfg.c_latent * tp,)
        cin = cfg.c_latent
        for i in range(cfg.L):
            shapes[f"dec{i}.conv.W"] = (cfg.n_filters, cin, cfg.k)
            shapes[f"dec{i}.conv.b"] = (cfg.n_filters,)
            shapes[f"dec{i}.pw.W"] = (cfg.n_1x1, cfg.n_filters)
            shapes[f"dec{i}.pw.b"] = (cfg.n_1x1,)
            cin = cfg.n_1x1
        shapes["dec.out.W"] = (cfg.c, cfg.n_1x1 * cfg.L)
        shapes["dec.out.b"] = (cfg.c,)
        return shapes

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = {}
        shapes = self.param_shapes()
        for name, shape in shapes.items():
            wshape = shapes[name[:-1] + "W"]
            fan_in = int(np.prod(wshape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shape).astype(self.dtype)
        return params

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def memory_bytes(self) -> int:
        return int(sum(v.nbytes for v in self.params.values()))

    # -- passes ----------------------------------------------------------------

    def _stack_forward(self, prefix, x, dilations, train, rng, cache):
        p = self.params
        outs = []
        h = x
        for i, d in enumerate(dilations):
            a, cols = _conv_forward(h, p[f"{prefix}{i}.conv.W"], p[f"{prefix}{i}.conv.b"], d)
            u = _pw_forward(a, p[f"{prefix}{i}.pw.W"], p[f"{prefix}{i}.pw.b"])
            mask = u > 0
            o = u * mask
            drop = None
            if train and self.config.dropout > 0:
                keep = 1.0 - self.config.dropout
                drop = (rng.random(o.shape) < keep).astype(o.dtype) / keep
                o = o * drop
            cache.append((h.shape, cols, a, mask, drop))
            outs.append(o)
            h = o
        return outs

    def _stack_backward(self, prefix, douts, dilations, cache, grads):
        p = self.params
        dh_next = None
        for i in reversed(range(len(dilations))):
            x_shape, cols, a, mask, drop = cache[i]
            do = douts[i] if dh_next is None else douts[i] + dh_next
            if drop is not None:
                do = do * drop
            du = do * mask
            da, grads[f"{prefix}{i}.pw.W"], grads[f"{prefix}{i}.pw.b"] = _pw_backward(
                du, a, p[f"{prefix}{i}.pw.W"])
            dh_next, grads[f"{prefix}{i}.conv.W"], grads[f"{prefix}{i}.conv.b"] = _conv_backward(
                da, cols, p[f"{prefix}{i}.conv.W"], dilations[i], x_shape)
        return dh_next

    def _forward(self, x, train=False, rng=None):
        """x: (B, c, T) -> (x_hat (B, c, T), z (B, c_latent), cache)."""
        cfg = self.config
        p = self.params
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (cfg.c, cfg.T):
            raise ValueError(f"expected windows of shape (n, {cfg.c}, {cfg.T}), got {x.shape}")
        B = x.shape[0]
        tp = cfg.T // cfg.s
        xc = np.ascontiguousarray(x.transpose(1, 0, 2))
        enc_cache = []
        outs = self._stack_forward("enc", xc, cfg.encoder_dilations, train, rng, enc_cache)
        cat = np.concatenate(outs, axis=0)
        lat = _pw_forward(cat, p["enc.latent.W"], p["enc.latent.b"])
        pooled = lat.reshape(cfg.c_latent, B, tp, cfg.s).mean(axis=3)
        flat = pooled.transpose(1, 0, 2).reshape(B, cfg.c_latent * tp)
        z = flat @ p["enc.proj.W"].T + p["enc.proj.b"]
        u = z @ p["dec.expand.W"].T + p["dec.expand.b"]
        up = np.repeat(u.reshape(B, cfg.c_latent, tp).transpose(1, 0, 2), cfg.s, axis=2)
        dec_cache = []
        douts = self._stack_forward("dec", np.ascontiguousarray(up), cfg.decoder_dilations,
                                    train, rng, dec_cache)
        dcat = np.concatenate(douts, axis=0)
        yc = _pw_forward(dcat, p["dec.out.W"], p["dec.out.b"])
        x_hat = yc.transpose(1, 0, 2)
        cache = (B, enc_cache, cat, flat, z, dec_cache, dcat)
        return x_hat, z, cache

    def _backward(self, dx_hat, cache):
        cfg = self.config
        p = self.params
        B, enc_cache, cat, flat, z, dec_cache, dcat = cache
        tp = cfg.T // cfg.s
        n1 = cfg.n_1x1
        g = {}
        dyc = np.ascontiguousarray(dx_hat.transpose(1, 0, 2))
        ddcat, g["dec.out.W"], g["dec.out.b"] = _pw_backward(dyc, dcat, p["dec.out.W"])
        douts = [ddcat[i * n1:(i + 1) * n1] for i in range(cfg.L)]
        dup = self._stack_backward("dec", douts, cfg.decoder_dilations, dec_cache, g)
        du = dup.reshape(cfg.c_latent, B, tp, cfg.s).sum(axis=3).transpose(1, 0, 2).reshape(B, -1)
        g["dec.expand.W"] = du.T @ z
        g["dec.expand.b"] = du.sum(axis=0)
        dz = du @ p["dec.expand.W"]
        g["enc.proj.W"] = dz.T @ flat
        g["enc.proj.b"] = dz.sum(axis=0)
        dflat = dz @ p["enc.proj.W"]
        dpooled = dflat.reshape(B, cfg.c_latent, tp).transpose(1, 0, 2)
        dlat = np.repeat(dpooled / cfg.s, cfg.s, axis=2)
        dcat_enc, g["enc.latent.W"], g["enc.latent.b"] = _pw_backward(
            np.ascontiguousarray(dlat), cat, p["enc.latent.W"])
        eouts = [dcat_enc[i * n1:(i + 1) * n1] for i in range(cfg.L)]
        self._stack_backward("enc", eouts, cfg.encoder_dilations, enc_cache, g)
        return {k: g[k] for k in self.params}

    def loss_and_grads(self, x, train=False, rng=None):
        """Mean squared reconstruction error and its gradient w.r.t. every parameter."""
        x = np.asarray(x, dtype=self.dtype)
        x_hat, _, cache = self._forward(x, train, rng)
        diff = x_hat - x
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        grads = self._backward((2.0 / diff.size) * diff, cache)
        return loss, grads

    def loss(self, x) -> float:
        x = np.asarray(x, dtype=self.dtype)
        x_hat, _, _ = self._forward(x)
        return float(np.mean((x_hat - x).astype(np.float64) ** 2))

    # -- inference ---------------------------------------------------------------

    def reconstruct(self, x, batch_size: int = 1024) -> np.ndarray:
        return self.forward(x, batch_size)[0]

    def forward(self, x, batch_size: int = 1024):
        """Deterministic (eval-mode) pass: returns (x_hat, Features)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        xh, zs = [], []
        for lo in range(0, len(x), batch_size):
            a, z, _ = self._forward(x[lo:lo + batch_size])
            xh.append(a)
            zs.append(z)
        cfg = self.config
        if xh:
            x_hat = np.concatenate(xh)
            z = np.concatenate(zs)
        else:
            x_hat = np.zeros((0, cfg.c, cfg.T), self.dtype)
            z = np.zeros((0, cfg.c_latent), self.dtype)
        res = x.astype(np.float64) - x_hat
        r = np.abs(res).mean(axis=2) if cfg.abs_residual else res.mean(axis=2)
        e = np.abs(res).mean(axis=(1, 2))
        return x_hat, Features(z.astype(np.float64), r, e)

    def features(self, x, batch_size: int = 1024) -> Features:
        return self.forward(x, batch_size)[1]

    def encoder_pre_pool(self, x) -> np.ndarray:
        """Latent channels before pooling, shape (B, c_latent, T)."""
        x = np.asarray(x, dtype=self.dtype)
        cfg = self.config
        xc = np.ascontiguousarray(x.transpose(1, 0, 2))
        outs = self._stack_forward("enc", xc, cfg.encoder_dilations, False, None, [])
        lat = _pw_forward(np.concatenate(outs, axis=0), self.params["enc.latent.W"],
                          self.params["enc.latent.b"])
        return lat.transpose(1, 0, 2)

    # -- persistence -----------------------------------------------------------

    def save(self, path, channels=(), scaler_hash: str = "", config_hash: str = "") -> None:
        meta = {"config": self.config.to_dict(), "channels": list(channels),
                "scaler_hash": scaler_hash, "config_hash": config_hash,
                "param_order": list(self.params), "training": self.meta}
        arrays = {k: v.astype("<f4") for k, v in self.params.items()}
        container.write(path, "tcae", meta, arrays)

    @classmethod
    def load(cls, path, config_hash: str | None = None) -> "TcaeModel":
        meta, arrays = container.read(path, kind="tcae", config_hash=config_hash)
        model = cls(TcaeConfig(**meta["config"]), {k: arrays[k] for k in meta["param_order"]})
        model.meta = meta["training"]
        model.meta["scaler_hash"] = meta["scaler_hash"]
        return model


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4096
    patience: int = 20
    max_epochs: int = 200
    micro_batch: int = 512
    seed: int = 0


@dataclass
class TrainResult:
    model: TcaeModel
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0


def train(nominal_windows, val_windows, config: TcaeConfig, opt: TrainConfig = TrainConfig(),
          labels=None, val_labels=None, log=None) -> TcaeModel:
    """Fit on nominal windows only; early stopping on validation MSE.

    Args:
        nominal_windows: (n, c, T) scaled training windows.
        val_windows: (m, c, T) scaled validation windows.
        labels, val_labels: optional class labels; any non-zero label is rejected.

    Returns:
        The model at the epoch with the best validation loss; ``model.meta``
        holds the loss curves.
    """
    X = np.asarray(getattr(nominal_windows, "values", nominal_windows), dtype=np.float32)
    V = np.asarray(getattr(val_windows, "values", val_windows), dtype=np.float32)
    for lab in (labels, val_labels, getattr(nominal_windows, "labels", None),
                getattr(val_windows, "labels", None)):
        if lab is not None and np.any(np.asarray(lab) != 0):
            raise ValueError("the autoencoder is trained on nominal (label 0) windows only")
    if len(X) == 0 or len(V) == 0:
        raise ValueError("empty training or validation set")
    rng = np.random.default_rng(opt.seed)
    model = TcaeModel(config, seed=int(rng.integers(2**31)))
    adam = Adam(model.params, lr=opt.lr)
    bs = min(opt.batch_size, len(X))
    best = (math.inf, 0, {k: v.copy() for k, v in model.params.items()})
    train_curve, val_curve = [], []
    t0 = time.perf_counter()
    for epoch in range(1, opt.max_epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for lo in range(0, len(X), bs):
            idx = order[lo:lo + bs]
            acc = None
            batch_loss = 0.0
            for mlo in range(0, len(idx), opt.micro_batch):
                sub = idx[mlo:mlo + opt.micro_batch]
                loss, g = model.loss_and_grads(X[sub], train=True, rng=rng)
                w = len(sub) / len(idx)
                batch_loss += loss * w
                if acc is None:
                    acc = {k: v * w for k, v in g.items()}
                else:
                    for k in acc:
                        acc[k] += g[k] * w
            adam.step(model.params, acc)
            total += batch_loss * len(idx)
        tr = total / len(X)
        vl = _batched_loss(model, V)
        train_curve.append(tr)
        val_curve.append(vl)
        if log:
            log(f"epoch {epoch:3d} train {tr:.6f} val {vl:.6f}")
        if vl < best[0]:
            best = (vl, epoch, {k: v.copy() for k, v in model.params.items()})
        elif epoch - best[1] >= opt.patience:
            break
    model.params = best[2]
    model.meta = {"epochs": len(train_curve), "best_epoch": best[1], "train_loss": train_curve,
                  "val_loss": val_curve}
    if log:
        log(f"best epoch {best[1]} of {len(train_curve)}, {time.perf_counter() - t0:.1f} s")
    return model


def _batched_loss(model: TcaeModel, V: np.ndarray, bs: int = 1024) -> float:
    tot = 0.0
    for lo in range(0, len(V), bs):
        chunk = V[lo:lo + bs]
        tot += model.loss(chunk) * len(chunk)
    return tot / len(V)
