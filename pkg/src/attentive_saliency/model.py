"""The end-to-end toy saliency model: parameters, forward pass, loss gradients.

Pipeline: dilated backbone -> attentive ConvLSTM -> two prior replicas ->
1x1 readout + ReLU -> bilinear upsampling to the input extent.

Parameters live in a flat ``name -> ndarray`` dict so the optimizer, the
gradient checker and the file format can all treat them uniformly.  The
forward pass exists twice: :func:`forward_model` composes the numpy
modules, while :func:`backward_model` rebuilds the same computation on the
autodiff graph.  Tests hold the two against each other.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import metrics as M
from . import tensor as T
from .convlstm import AttentiveLSTMParams, refine
from .priors import (DEFAULT_N_PRIORS, PRIOR_HOLES, PRIOR_KERNEL, SIGMA_FLOOR,
                     PriorBank, PriorModuleParams, PriorReplica, apply_priors)

LSTM_NAMES = tuple(f"{p}_{g}" for p in "WUb" for g in "ifoc") + ("W_a", "U_a", "V_a", "b_a")
ORTHOGONAL = ("U_i", "U_f", "U_o", "U_c")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "vgg_like"
    width: int = 8
    in_channels: int = 1
    t_steps: int = 4
    lstm_kernel: int = 3
    n_priors: int = DEFAULT_N_PRIORS
    prior_sigma: float = 0.25
    n_replicas: int = 2
    dilated: bool = True

    def __post_init__(self):
        for name in ("width", "in_channels", "t_steps", "lstm_kernel", "n_priors", "n_replicas"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lstm_kernel % 2 == 0:
            raise ValueError("lstm_kernel must be odd")

    def network(self) -> bb.NetworkSpec:
        return build_backbone_spec(self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        extra = set(d) - set(known)
        if extra:
            raise ValueError(f"unknown model config keys {sorted(extra)}")
        return cls(**known)


def build_backbone_spec(cfg: ModelConfig) -> bb.NetworkSpec:
    net, _ = bb.build_toy_backbone(cfg.backbone, cfg.width, cfg.in_channels)
    return bb.apply_dilated_recipe(net, cfg.backbone) if cfg.dilated else net


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net = self.config.network()
        self.validate()

    # -- structure -------------------------------------------------------

    def expected_shapes(self) -> dict:
        cfg, net = self.config, self.net
        shapes = {}
        c = net.in_channels
        for i, layer in enumerate(net.layers):
            if layer.kind == "conv":
                shapes[f"backbone.{i}.weight"] = (layer.channels, c, layer.kernel, layer.kernel)
                shapes[f"backbone.{i}.bias"] = (layer.channels,)
                c = layer.channels
            elif layer.kind == "residual_block":
                for j, inner in enumerate(layer.inner):
                    shapes[f"backbone.{i}.conv{j + 1}.weight"] = (inner.channels, c, inner.kernel, inner.kernel)
                    shapes[f"backbone.{i}.conv{j + 1}.bias"] = (inner.channels,)
                    c = inner.channels
        k = cfg.lstm_kernel
        for name in LSTM_NAMES:
            if name.startswith("b_"):
                shapes[f"lstm.{name}"] = (c,)
            elif name == "V_a":
                shapes[f"lstm.{name}"] = (1, c, k, k)
            else:
                shapes[f"lstm.{name}"] = (c, c, k, k)
        for r in range(cfg.n_replicas):
            shapes[f"priors.{r}.bank"] = (cfg.n_priors, 4)
            shapes[f"priors.{r}.weight"] = (c, c + cfg.n_priors, PRIOR_KERNEL, PRIOR_KERNEL)
            shapes[f"priors.{r}.bias"] = (c,)
        shapes["readout.weight"] = (1, c, 1, 1)
        shapes["readout.bias"] = (1,)
        return shapes

    @property
    def channels(self) -> int:
        return self.net.out_channels

    def validate(self):
        shapes = self.expected_shapes()
        missing = set(shapes) - set(self.tensors)
        extra = set(self.tensors) - set(shapes)
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in shapes.items():
            a = np.asarray(self.tensors[name], dtype=np.float64)
            if a.shape != shape:
                raise T.ShapeError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            self.tensors[name] = a

    def names(self) -> list[str]:
        return list(self.expected_shapes())

    def role(self, name: str) -> str:
        if name.startswith("backbone."):
            return "backbone"
        if name.startswith("lstm."):
            return "lstm"
        if name.endswith(".bank"):
            return "prior_bank"
        if name.startswith("priors."):
            return "prior_conv"
        return "readout"

    def replace(self, tensors: Mapping) -> "ModelParams":
        return ModelParams(self.config, {k: np.array(v, dtype=np.float64) for k, v in tensors.items()})

    def copy(self) -> "ModelParams":
        return self.replace(self.tensors)

    def size(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    # -- views for the numpy modules ------------------------------------

    def backbone_params(self) -> list:
        out = []
        for i, layer in enumerate(self.net.layers):
            if layer.kind == "conv":
                out.append((self.tensors[f"backbone.{i}.weight"], self.tensors[f"backbone.{i}.bias"]))
            elif layer.kind == "residual_block":
                out.append(tuple((self.tensors[f"backbone.{i}.conv{j}.weight"],
                                  self.tensors[f"backbone.{i}.conv{j}.bias"]) for j in (1, 2)))
            else:
                out.append(None)
        return out

    def lstm_params(self) -> AttentiveLSTMParams:
        return AttentiveLSTMParams(**{n: self.tensors[f"lstm.{n}"] for n in LSTM_NAMES})

    def prior_banks(self) -> list[PriorBank]:
        banks = []
        for r in range(self.config.n_replicas):
            arr = self.tensors[f"priors.{r}.bank"].copy()
            arr[:, 2:] = np.maximum(arr[:, 2:], SIGMA_FLOOR)
            banks.append(PriorBank.from_array(arr))
        return banks

    def prior_module(self) -> PriorModuleParams:
        return PriorModuleParams(tuple(
            PriorReplica(self.tensors[f"priors.{r}.weight"], self.tensors[f"priors.{r}.bias"])
            for r in range(self.config.n_replicas)))

    # -- persistence ------------------------------------------------------------

    def to_bytes(self, meta: Mapping | None = None) -> bytes:
        from .io import samp_encode
        doc = {"model": self.config.to_dict(), "batch_reduction": "per-sample mean"}
        doc.update(meta or {})
        return samp_encode(self.tensors, {n: self.role(n) for n in self.tensors}, doc)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelParams":
        from .io import samp_decode
        tensors, manifest = samp_decode(buf)
        cfg = ModelConfig.from_dict(manifest.get("meta", {}).get("model", {}))
        return cls(cfg, tensors)


# --------------------------------------------------------------------------
# initialization

def random_orthogonal(rng: np.random.Generator, shape) -> np.ndarray:
    """Kernel whose (C_out, C_in*k*k) flattening has orthonormal rows.

    M = flat.T therefore satisfies M.T @ M = I.  Needs C_out <= C_in*k*k.
    """
    c_out = shape[0]
    n = int(np.prod(shape[1:]))
    if c_out > n:
        raise ValueError(f"cannot make {c_out} orthonormal rows of length {n}")
    q, r = np.linalg.qr(rng.standard_normal((n, c_out)))
    q *= np.sign(np.diag(r))  # Haar-distributed rather than QR-biased
    return q.T.reshape(shape)


def init_params(seed: int = 0, config: ModelConfig | None = None) -> ModelParams:
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    shapes = ModelParams.expected_shapes(_Shell(cfg))
    tensors = {}
    for name, shape in shapes.items():
        short = name.split(".")[-1]
        if name.startswith("lstm."):
            if short in ORTHOGONAL:
                tensors[name] = random_orthogonal(rng, shape)
            elif short[0] in "WU" and short != "V_a":
                tensors[name] = rng.normal(0.0, 0.05, shape)
            else:
                tensors[name] = np.zeros(shape)   # V_a and the biases
        elif name.endswith(".bank"):
            tensors[name] = PriorBank.grid(cfg.n_priors, cfg.prior_sigma).to_array()
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name == "readout.weight":
            # non-negative so the readout of ReLU features starts alive
            tensors[name] = np.abs(bb.glorot_uniform(rng, shape))
        else:
            tensors[name] = bb.glorot_uniform(rng, shape)
    return ModelParams(cfg, tensors)


class _Shell:
    """Just enough of ModelParams to compute shapes before tensors exist."""

    def __init__(self, cfg):
        self.config = cfg
        self.net = cfg.network()


# --------------------------------------------------------------------------
# numpy forward

def _check_image(params: ModelParams, image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise T.ShapeError(f"input: expected C x H x W image, got shape {x.shape}")
    if x.shape[0] != params.config.in_channels:
        raise T.ShapeError(f"input: image has {x.shape[0]} channels, "
                           f"backbone expects {params.config.in_channels}")
    return x


def forward_stages(params: ModelParams, image) -> dict:
    """Every intermediate of the numpy forward pass, keyed by stage."""
    x = _check_image(params, image)
    out = {"input": x}
    try:
        out["backbone"] = bb.forward(params.net, params.backbone_params(), x)
    except T.ShapeError as e:
        raise T.ShapeError(f"backbone: {e}") from None
    out["refined"], _ = refine(out["backbone"], params.lstm_params(), params.config.t_steps)
    out["priors"] = apply_priors(out["refined"], params.prior_banks(), params.prior_module())
    r = T.conv2d(out["priors"], params.tensors["readout.weight"], params.tensors["readout.bias"])
    out["readout"] = np.maximum(r, 0.0)
    out["map"] = T.bilinear_resize(out["readout"], x.shape[1], x.shape[2])[0]
    return out


def forward_model(params: ModelParams, image) -> np.ndarray:
    """Predicted H x W saliency map at the input extent (non-negative)."""
    return forward_stages(params, image)["map"]


# --------------------------------------------------------------------------
# graph forward and loss

def _graph_map(params: ModelParams, v: Mapping[str, ad.Var], x: np.ndarray,
               record: list | None = None) -> ad.Var:
    """Graph version of :func:`forward_model`, shape 1 x H x W.

    When ``record`` is a list, every non-smooth decision (ReLU masks, pool
    argmax, sigma clamps) is appended to it.
    """
    cfg, net = params.config, params.net

    def relu(a):
        if record is not None:
            record.append(a.value > 0)
        return ad.relu(a)

    h = ad.const(x)
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv":
            h = ad.conv2d(h, v[f"backbone.{i}.weight"], v[f"backbone.{i}.bias"],
                          layer.stride, layer.dilation, layer.padding)
        elif layer.kind == "max_pool":
            if record is not None:
                record.append(T.max_pool2d_argmax(h.value, layer.kernel, layer.stride,
                                                  layer.dilation, layer.padding))
            h = ad.max_pool2d(h, layer.kernel, layer.stride, layer.dilation, layer.padding)
        elif layer.kind == "activation":
            h = relu(h) if layer.activation == "relu" else getattr(ad, layer.activation)(h)
        else:
            c1, c2 = layer.inner
            r = relu(ad.conv2d(h, v[f"backbone.{i}.conv1.weight"], v[f"backbone.{i}.conv1.bias"],
                                  c1.stride, c1.dilation, c1.padding))
            r = ad.conv2d(r, v[f"backbone.{i}.conv2.weight"], v[f"backbone.{i}.conv2.bias"],
                          c2.stride, c2.dilation, c2.padding)
            h = h + r if layer.shortcut else r

    def same(a, w, b=None):
        return ad.conv2d(a, v[f"lstm.{w}"], None if b is None else v[f"lstm.{b}"], 1, 1, "same")

    X = h
    H = ad.const(np.zeros(X.shape))
    C = ad.const(np.zeros(X.shape))
    for _ in range(cfg.t_steps):
        z = same(ad.tanh(same(X, "W_a", "b_a") + same(H, "U_a")), "V_a")
        Xt = X * ad.softmax_spatial(z)
        i = ad.sigmoid(same(Xt, "W_i", "b_i") + same(H, "U_i"))
        f = ad.sigmoid(same(Xt, "W_f", "b_f") + same(H, "U_f"))
        o = ad.sigmoid(same(Xt, "W_o", "b_o") + same(H, "U_o"))
        g = ad.tanh(same(Xt, "W_c", "b_c") + same(H, "U_c"))
        C = f * C + i * g
        H = o * ad.tanh(C)

    feat = H
    hh, ww = feat.shape[1:]
    for r in range(cfg.n_replicas):
        if record is not None:
            record.append(v[f"priors.{r}.bank"].value[:, 2:] > SIGMA_FLOOR)
        maps = ad.gaussian_maps(v[f"priors.{r}.bank"], hh, ww, SIGMA_FLOOR)
        stacked = ad.concat([feat, maps], axis=0)
        feat = relu(ad.conv2d(stacked, v[f"priors.{r}.weight"], v[f"priors.{r}.bias"],
                                 1, T.holes_to_dilation(PRIOR_HOLES), "same"))
    out = relu(ad.conv2d(feat, v["readout.weight"], v["readout.bias"]))
    return ad.bilinear_resize(out, x.shape[1], x.shape[2])


def _graph_standardize(p: ad.Var) -> ad.Var:
    d = p - ad.mean(p)
    sd = ad.sqrt(ad.mean(d * d))
    if sd.value == 0:
        raise M.DegenerateInputError("predicted map has zero variance")
    return d / sd


def graph_loss(pred: ad.Var, gt_den, gt_fix, w: M.LossWeights):
    """Combined loss on a 1 x H x W prediction node; returns (loss, components)."""
    den = M.as_map(gt_den, "gt_den")[None]
    fix = M.as_fixations(gt_fix)[None].astype(np.float64)
    if den.shape != pred.shape or fix.shape != pred.shape:
        raise T.ShapeError(f"loss: groundtruth {den.shape[1:]} / {fix.shape[1:]} "
                           f"vs prediction {pred.shape[1:]}")
    terms, comps = [], {}
    if w.alpha:
        if fix.sum() == 0:
            raise M.DegenerateInputError("no fixations")
        nss = ad.total(_graph_standardize(pred) * fix) * (1.0 / fix.sum())
        terms.append(nss * w.alpha)
        comps["nss"] = float(nss.value)
    if w.beta:
        g = M.standardize(den[0])[None]
        cc = ad.mean(_graph_standardize(pred) * g)
        terms.append(cc * w.beta)
        comps["cc"] = float(cc.value)
    if w.gamma:
        s = ad.total(pred)
        if not s.value > 0:
            raise M.DegenerateInputError("predicted map sums to zero")
        q = M.normalize(den[0], "gt_den")[None]
        kl = ad.total(ad.log(q / (pred / s + M.KL_EPS) + M.KL_EPS) * q)
        terms.append(kl * w.gamma)
        comps["kl"] = float(kl.value)
    loss = ad.const(0.0)
    for t in terms:
        loss = loss + t
    return loss, comps


def loss_and_grads(params: ModelParams, image, gt_den, gt_fix,
                   w: M.LossWeights = M.LossWeights()):
    """Returns ``(loss, components, grads)``; components hold nss/cc/kl of nonzero terms."""
    x = _check_image(params, image)
    v = {n: ad.param(a, n) for n, a in params.tensors.items()}
    pred = _graph_map(params, v, x)
    loss, comps = graph_loss(pred, gt_den, gt_fix, w)
    names = list(v)
    gs = ad.grad(loss, [v[n] for n in names])
    return float(loss.value), comps, dict(zip(names, gs))


def backward_model(params: ModelParams, image, gt_den, gt_fix,
                   w: M.LossWeights = M.LossWeights()):
    """Combined loss and its exact gradient for every parameter tensor."""
    loss, _, grads = loss_and_grads(params, image, gt_den, gt_fix, w)
    return loss, grads


def model_loss(params: ModelParams, image, gt_den, gt_fix,
               w: M.LossWeights = M.LossWeights()) -> float:
    """Combined loss through the numpy forward pass and the metric functions."""
    return M.combined_loss(forward_model(params, image), gt_den, gt_fix, w)


# --------------------------------------------------------------------------
# finite differences

def central_difference(fn: Callable[[np.ndarray], float], theta, step: float = 1e-5,
                       indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``theta``.

    Only the flat ``indices`` are probed (all when None); others stay zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    flat, gflat = theta.reshape(-1), g.reshape(-1)
    for k in (range(flat.size) if indices is None else indices):
        orig = flat[k]
        flat[k] = orig + step
        up = fn(theta)
        flat[k] = orig - step
        down = fn(theta)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return g


def finite_diff_grad(params: ModelParams, image, gt_den, gt_fix,
                     w: M.LossWeights = M.LossWeights(), step: float = 1e-5,
                     probes: Mapping | None = None) -> dict:
    """Central-difference estimate of every parameter gradient.

    ``probes`` maps tensor names to flat indices; tensors not listed are
    probed in full, which is slow for anything beyond small models.
    """
    out = {}
    work = {n: a.copy() for n, a in params.tensors.items()}
    for name in params.tensors:
        def fn(theta, name=name):
            work[name] = theta
            return model_loss(params.replace(work), image, gt_den, gt_fix, w)
        idx = None if probes is None or name not in probes else probes[name]
        out[name] = central_difference(fn, params.tensors[name], step, idx)
        work[name] = params.tensors[name].copy()
    return out


GRADCHECK_FLOOR = 1e-5


def relative_error(a, b, floor: float = GRADCHECK_FLOOR) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def jitter_zero_tensors(params: ModelParams, seed: int = 0, scale: float = 0.05) -> ModelParams:
    """Copy with small noise added to every all-zero tensor (V_a, biases).

    At the reference initialization those tensors block whole gradient paths
    (uniform attention, exactly zero V_a gradient path); jittering them makes
    a gradient check exercise every route.
    """
    rng = np.random.default_rng(seed)
    t = {}
    for name in params.names():
        a = params.tensors[name]
        t[name] = a + rng.normal(0.0, scale, a.shape) if not a.any() else a.copy()
    return params.replace(t)


def kink_pattern(params: ModelParams, image) -> bytes:
    """Fingerprint of every non-smooth decision taken by the forward pass.

    Two parameter points with equal fingerprints lie in the same smooth
    piece of the loss, where a central difference is meaningful.
    """
    x = _check_image(params, image)
    rec: list = []
    _graph_map(params, {n: ad.const(a) for n, a in params.tensors.items()}, x, rec)
    return b"".join(np.ascontiguousarray(r).tobytes() for r in rec)


def gradcheck(params: ModelParams, image, gt_den, gt_fix,
              w: M.LossWeights = M.LossWeights(), n_probe: int = 20, step: float = 1e-5,
              seed: int = 0, floor: float = GRADCHECK_FLOOR) -> dict:
    """Max relative error per tensor over ``n_probe`` random scalars.

    A scalar whose +-step perturbation flips a ReLU, a pool argmax or a
    sigma clamp straddles a kink, where the loss has no derivative to
    compare against.  Such a scalar is retried once at a quarter of the
    step and, if it still straddles, replaced by a fresh draw.

    Returns ``{name: GradcheckRow}``.
    """
    rng = np.random.default_rng(seed)
    _, grads = backward_model(params, image, gt_den, gt_fix, w)
    work = {n: a.copy() for n, a in params.tensors.items()}
    base = kink_pattern(params, image)
    out = {}
    for name in params.names():
        flat = work[name].reshape(-1)
        g = grads[name].reshape(-1)
        errs, skipped = [], 0
        for k in rng.permutation(flat.size):
            if len(errs) == n_probe:
                break
            orig = flat[k]
            fd = None
            for h in (step, step / 4):
                vals = []
                for d in (h, -h):
                    flat[k] = orig + d
                    p = params.replace(work)
                    if kink_pattern(p, image) != base:
                        break
                    vals.append(model_loss(p, image, gt_den, gt_fix, w))
                flat[k] = orig
                if len(vals) == 2:
                    fd = (vals[0] - vals[1]) / (2 * h)
                    break
            if fd is None:
                skipped += 1
                continue
            errs.append((float(relative_error(g[k], fd, floor)), abs(float(g[k]))))
        out[name] = GradcheckRow(max(e for e, _ in errs), max(a for _, a in errs),
                                 len(errs), skipped)
    return out


@dataclass(frozen=True)
class GradcheckRow:
    max_rel_err: float
    max_abs_grad: float
    probed: int
    skipped_kinks: int
