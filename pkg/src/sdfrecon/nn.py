"""Dense networks, reverse-mode gradients, losses, optimizer, training.

Two heads drive reconstruction: a surface-refinement network mapping per-view
features plus the body SDF encoding to a refined signed distance and normal,
and an occupancy network mapping the (fused) features to an inside
probability. Everything runs in float64 on a small operation tape whose
gradients are validated against central finite differences.

Checkpoints: magic ``SESW``, a JSON metadata header, a tensor-count header,
then little-endian f64 tensors. Loss curves are CSV rows
(epoch, L_s, L_o, L_r, total).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Linear",
    "Mlp",
    "ReconNets",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "sesdf_forward",
    "occupancy_forward",
    "pipeline_forward",
    "pipeline_infer",
    "loss_surface",
    "loss_occupancy",
    "loss_eikonal",
    "total_loss",
    "train",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]

LEAKY_SLOPE = 0.01
BCE_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# Tape autodiff
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Records one forward pass; replaying in reverse accumulates gradients."""

    def __init__(self):
        self.nodes = []

    def node(self, value, parents=(), backward_fn=None):
        n = Node(value, parents, backward_fn)
        self.nodes.append(n)
        return n

    def constant(self, value):
        return self.node(np.asarray(value, dtype=np.float64))

    def backward(self, loss: Node):
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(np.asarray(loss.value, dtype=np.float64))
        for n in reversed(self.nodes):
            if n.grad is None or n.backward_fn is None:
                continue
            n.backward_fn(n.grad)


def _accum(node, grad):
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad += grad


class Linear:
    """Dense layer y = x W^T + b with gradient buffers."""

    def __init__(self, n_in, n_out, rng=None, zero=False):
        if zero or rng is None:
            self.weight = np.zeros((n_out, n_in))
        else:
            self.weight = rng.normal(scale=np.sqrt(2.0 / n_in), size=(n_out, n_in))
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def shape(self):
        return self.weight.shape

    def zero_grad(self):
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0


def linear(tape, x: Node, layer: Linear) -> Node:
    out = x.value @ layer.weight.T + layer.bias

    def backward(g):
        layer.grad_weight += g.T @ x.value
        layer.grad_bias += g.sum(axis=0)
        _accum(x, g @ layer.weight)

    return tape.node(out, (x,), backward)


def leaky_relu(tape, x: Node, slope=LEAKY_SLOPE) -> Node:
    mask = x.value > 0
    out = np.where(mask, x.value, slope * x.value)

    def backward(g):
        _accum(x, np.where(mask, g, slope * g))

    return tape.node(out, (x,), backward)


def sigmoid(tape, x: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-x.value))

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return tape.node(out, (x,), backward)


def concat(tape, xs) -> Node:
    sizes = [x.value.shape[1] for x in xs]
    out = np.concatenate([x.value for x in xs], axis=1)

    def backward(g):
        at = 0
        for x, s in zip(xs, sizes):
            _accum(x, g[:, at:at + s])
            at += s

    return tape.node(out, tuple(xs), backward)


def split(tape, x: Node, sizes):
    outs = []
    at = 0
    for s in sizes:
        lo = at

        def make_backward(lo=lo, s=s):
            def backward(g):
                full = np.zeros_like(x.value)
                full[:, lo:lo + s] = g
                _accum(x, full)
            return backward

        outs.append(tape.node(x.value[:, lo:lo + s].copy(), (x,), make_backward()))
        at += s
    return outs


def encode_distance(tape, d: Node, levels: int) -> Node:
    """Differentiable sinusoidal distance encoding of a (N, 1) column."""
    dval = d.value[:, 0]
    n = len(dval)
    out = np.empty((n, 2 * levels + 3))
    out[:, 0] = dval
    freqs = [(2.0 ** k) * np.pi for k in range(levels + 1)]
    for k, f in enumerate(freqs):
        out[:, 1 + 2 * k] = np.sin(f * dval)
        out[:, 2 + 2 * k] = np.cos(f * dval)

    def backward(g):
        dd = g[:, 0].copy()
        for k, f in enumerate(freqs):
            dd += g[:, 1 + 2 * k] * f * np.cos(f * dval)
            dd -= g[:, 2 + 2 * k] * f * np.sin(f * dval)
        _accum(d, dd[:, None])

    return tape.node(out, (d,), backward)


def fuse_views(tape, x: Node, n_views: int, weights) -> Node:
    """Convex combination of view blocks of a stacked (n_views*N, D) node.

    ``weights`` is (N, n_views), already normalized; constant w.r.t. the
    network parameters.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    blocks = x.value.reshape(n_views, n, -1)
    out = np.einsum("vnd,nv->nd", blocks, w)

    def backward(g):
        full = np.einsum("nd,nv->vnd", g, w).reshape(n_views * n, -1)
        _accum(x, full)

    return tape.node(out, (x,), backward)


def mean_abs(tape, x: Node) -> Node:
    out = np.abs(x.value).mean()

    def backward(g):
        _accum(x, g * np.sign(x.value) / x.value.size)

    return tape.node(out, (x,), backward)


def mean_row_norm(tape, x: Node, shift=0.0, square=False) -> Node:
    """mean over rows of ||x_i|| (or (||x_i|| + shift)^2 when square)."""
    norms = np.linalg.norm(x.value, axis=1)
    safe = np.maximum(norms, 1e-300)
    if square:
        out = ((norms + shift) ** 2).mean()
    else:
        out = (norms + shift).mean()

    def backward(g):
        n = len(norms)
        if square:
            coeff = 2.0 * (norms + shift) / (safe * n)
        else:
            coeff = 1.0 / (safe * n)
        _accum(x, g * coeff[:, None] * x.value)

    return tape.node(out, (x,), backward)


def sub_const(tape, x: Node, c) -> Node:
    out = x.value - np.asarray(c, dtype=np.float64)

    def backward(g):
        _accum(x, g)

    return tape.node(out, (x,), backward)


def bce_mean(tape, p: Node, labels) -> Node:
    """Mean binary cross entropy with predictions clamped away from {0, 1}."""
    y = np.asarray(labels, dtype=np.float64).reshape(p.value.shape)
    clamped = np.clip(p.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    out = -(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)).mean()
    inside = (p.value > BCE_CLAMP) & (p.value < 1.0 - BCE_CLAMP)

    def backward(g):
        d = np.where(inside, (-y / clamped + (1.0 - y) / (1.0 - clamped)), 0.0)
        _accum(p, g * d / p.value.size)

    return tape.node(out, (p,), backward)


def combine(tape, terms) -> Node:
    """Weighted sum of scalar nodes: sum of coeff * node."""
    out = sum(c * t.value for c, t in terms)

    def backward(g):
        for c, t in terms:
            _accum(t, g * c)

    return tape.node(out, tuple(t for _, t in terms), backward)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Mlp:
    """Feed-forward stack with leaky-rectifier hidden units.

    ``widths`` lists the input, hidden and output sizes; the layer at
    ``skip_at`` (1-indexed) receives the raw input concatenated to its
    activations, mirroring common implicit-surface decoders.
    """

    def __init__(self, widths, rng, skip_at=3, sigmoid_head=False):
        self.widths = list(widths)
        self.skip_at = skip_at if 1 <= (skip_at or 0) < len(widths) - 1 else None
        self.sigmoid_head = sigmoid_head
        self.layers = []
        for i in range(len(widths) - 1):
            n_in = widths[i]
            # The skip layer also sees the raw input.
            if self.skip_at is not None and i == self.skip_at - 1:
                n_in += widths[0]
            self.layers.append(Linear(n_in, widths[i + 1], rng))

    @property
    def n_in(self):
        return self.widths[0]

    def forward(self, tape, x: Node) -> Node:
        h = x
        for i, layer in enumerate(self.layers):
            if self.skip_at is not None and i == self.skip_at - 1:
                h = concat(tape, [h, x])
            h = linear(tape, h, layer)
            if i < len(self.layers) - 1:
                h = leaky_relu(tape, h)
        if self.sigmoid_head:
            h = sigmoid(tape, h)
        return h

    def __call__(self, x):
        """Plain forward on a raw array (fresh throwaway tape)."""
        tape = Tape()
        return self.forward(tape, tape.constant(np.atleast_2d(x))).value

    def preactivation_signs(self, x):
        """Signs of every hidden pre-activation (for kink detection)."""
        h = np.atleast_2d(x)
        signs = []
        for i, layer in enumerate(self.layers):
            if self.skip_at is not None and i == self.skip_at - 1:
                h = np.concatenate([h, np.atleast_2d(x)], axis=1)
            h = h @ layer.weight.T + layer.bias
            if i < len(self.layers) - 1:
                signs.append(h > 0)
                h = np.where(h > 0, h, LEAKY_SLOPE * h)
        return signs


PIXEL_DIM = 6
VOLUME_DIM = 23
EMBED_2D = 256
EMBED_3D = 128


@dataclass
class ReconNets:
    """Trainable stack: channel embeddings plus the two heads.

    Variants: ``full`` (refinement + encoding), ``no_sesdf`` (the occupancy
    head consumes the raw body SDF encoding and body normal directly) and
    ``no_de`` (refinement kept, sinusoidal encoding replaced by the raw
    scalar distance everywhere).
    """

    embed2d: Linear
    embed3d: Linear
    f_sd: Mlp | None
    f_o: Mlp
    variant: str = "full"
    levels: int = 5

    @classmethod
    def create(cls, variant="full", seed=0, levels=5,
               hidden=(512, 256, 128), pixel_dim=PIXEL_DIM):
        rng = np.random.default_rng(seed)
        embed2d = Linear(pixel_dim, EMBED_2D, rng)
        embed3d = Linear(VOLUME_DIM, EMBED_3D, rng)
        enc = 2 * levels + 3 if variant != "no_de" else 1
        f_sd = None
        if variant != "no_sesdf":
            f_sd = Mlp([EMBED_2D + EMBED_3D + enc + 3, *hidden, 4], rng)
        f_o = Mlp([EMBED_2D + EMBED_3D + enc + 3 + 1, *hidden, 1], rng, sigmoid_head=True)
        return cls(embed2d=embed2d, embed3d=embed3d, f_sd=f_sd, f_o=f_o,
                   variant=variant, levels=levels)

    def parameters(self):
        named = [("embed2d", self.embed2d), ("embed3d", self.embed3d)]
        if self.f_sd is not None:
            named += [(f"f_sd.{i}", l) for i, l in enumerate(self.f_sd.layers)]
        named += [(f"f_o.{i}", l) for i, l in enumerate(self.f_o.layers)]
        return named

    def zero_grad(self):
        for _, l in self.parameters():
            l.zero_grad()


def sesdf_forward(nets: ReconNets, f2d, f3d, denc, normal):
    """Refined (distance, normal) from embedded features (plain arrays)."""
    tape = Tape()
    x = tape.constant(np.concatenate([f2d, f3d, denc, normal], axis=1))
    out = nets.f_sd.forward(tape, x)
    return out.value[:, :1], out.value[:, 1:]


def occupancy_forward(nets: ReconNets, f2d, f3d, denc, normal, z):
    """Occupancy in [0, 1] from embedded features (plain arrays)."""
    tape = Tape()
    x = tape.constant(np.concatenate([f2d, f3d, denc, normal, z], axis=1))
    return nets.f_o.forward(tape, x).value[:, 0]


def pipeline_forward(nets: ReconNets, tape: Tape, batch, weights=None,
                     need_occupancy=True):
    """Per-view refinement, fusion, occupancy, on one assembled batch.

    ``batch`` is the dict from ``features.assemble_point_feature`` (view
    stacks flattened view-major); ``weights`` the (N, n_views) fusion
    weights (required for more than one view). Returns (occupancy node,
    per-view distance node, per-view normal node); the distance/normal
    nodes are None for the ``no_sesdf`` variant.
    """
    raw2d = batch["raw2d"]
    n_views, n, _ = raw2d.shape
    x2d = tape.constant(raw2d.reshape(n_views * n, -1))
    f2d = linear(tape, x2d, nets.embed2d)
    x3d = tape.constant(np.tile(batch["raw3d"], (n_views, 1)))
    f3d = linear(tape, x3d, nets.embed3d)
    body_norm = tape.constant(batch["normal"].reshape(n_views * n, 3))
    if nets.variant == "no_de":
        body_enc = tape.constant(np.tile(batch["d_body"][:, None], (n_views, 1)))
    else:
        body_enc = tape.constant(np.tile(batch["denc"], (n_views, 1)))

    if nets.variant == "no_sesdf":
        d_node = n_node = None
        enc_node = body_enc
        normal_node = body_norm
    else:
        sd_in = concat(tape, [f2d, f3d, body_enc, body_norm])
        sd_out = nets.f_sd.forward(tape, sd_in)
        d_node, n_node = split(tape, sd_out, [1, 3])
        enc_node = d_node if nets.variant == "no_de" else encode_distance(tape, d_node, nets.levels)
        normal_node = n_node

    if not need_occupancy:
        return None, d_node, n_node
    z_node = tape.constant(batch["z"].reshape(n_views * n, 1))
    fo_in = concat(tape, [f2d, f3d, enc_node, normal_node, z_node])
    if n_views == 1:
        fused = fo_in
    else:
        if weights is None:
            raise ValueError("multi-view forward requires fusion weights")
        fused = fuse_views(tape, fo_in, n_views, weights)
    occ = nets.f_o.forward(tape, fused)
    return occ, d_node, n_node


def _infer_mlp(mlp: Mlp, x):
    h = x
    for i, layer in enumerate(mlp.layers):
        if mlp.skip_at is not None and i == mlp.skip_at - 1:
            h = np.concatenate([h, x], axis=1)
        h = h @ layer.weight.T + layer.bias
        if i < len(mlp.layers) - 1:
            np.multiply(h, LEAKY_SLOPE, out=h, where=h < 0)
    if mlp.sigmoid_head:
        h = 1.0 / (1.0 + np.exp(-h))
    return h


def pipeline_infer(nets: ReconNets, batch, weights=None, need_occupancy=True):
    """Gradient-free twin of :func:`pipeline_forward`.

    Intermediate activations are freed eagerly, which matters when the
    pipeline sweeps dense lattices. Returns (occupancy (N,), per-view
    refined distance (n_views, N) or None, per-view normal or None); must
    produce bit-identical values to the tape path.
    """
    raw2d = batch["raw2d"]
    n_views, n, _ = raw2d.shape
    f2d = raw2d.reshape(n_views * n, -1) @ nets.embed2d.weight.T + nets.embed2d.bias
    f3d = np.tile(batch["raw3d"], (n_views, 1)) @ nets.embed3d.weight.T + nets.embed3d.bias
    body_norm = batch["normal"].reshape(n_views * n, 3)
    if nets.variant == "no_de":
        body_enc = np.tile(batch["d_body"][:, None], (n_views, 1))
    else:
        body_enc = np.tile(batch["denc"], (n_views, 1))

    if nets.variant == "no_sesdf":
        d_views = n_views_out = None
        enc = body_enc
        normal = body_norm
    else:
        sd_out = _infer_mlp(nets.f_sd, np.concatenate([f2d, f3d, body_enc, body_norm], axis=1))
        d_col = sd_out[:, :1]
        normal = sd_out[:, 1:]
        d_views = d_col.reshape(n_views, n)
        n_views_out = normal.reshape(n_views, n, 3)
        if nets.variant == "no_de":
            enc = d_col
        else:
            from .sampling import distance_encode

            enc = distance_encode(d_col[:, 0], nets.levels)
    if not need_occupancy:
        return None, d_views, n_views_out
    fo_in = np.concatenate(
        [f2d, f3d, enc, normal, batch["z"].reshape(n_views * n, 1)], axis=1)
    if n_views == 1:
        fused = fo_in
    else:
        if weights is None:
            raise ValueError("multi-view forward requires fusion weights")
        fused = np.einsum("vnd,nv->nd", fo_in.reshape(n_views, n, -1),
                          np.asarray(weights, dtype=np.float64))
    occ = _infer_mlp(nets.f_o, fused)
    return occ[:, 0], d_views, n_views_out


# ---------------------------------------------------------------------------
# Losses (tape nodes; module-level helpers return plain floats)
# ---------------------------------------------------------------------------

def loss_surface(d, n, n_gt, lambda_d=1.0, lambda_n=1.0) -> float:
    """Mean of lambda_d |d| + lambda_n ||n - n_gt|| over surface samples."""
    d = np.atleast_2d(np.asarray(d, dtype=np.float64).reshape(-1, 1))
    n = np.atleast_2d(n)
    return float(lambda_d * np.abs(d).mean() + lambda_n * np.linalg.norm(n - np.atleast_2d(n_gt), axis=1).mean())


def loss_occupancy(preds, labels) -> float:
    """Mean binary cross entropy with clamped predictions."""
    p = np.clip(np.asarray(preds, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def loss_eikonal(normals) -> float:
    """Mean (||n|| - 1)^2: unit-norm penalty on predicted normals."""
    n = np.linalg.norm(np.atleast_2d(normals), axis=1)
    return float(((n - 1.0) ** 2).mean())


def total_loss(l_s, l_o, l_r, lambda_s=1.0, lambda_o=1.0, lambda_r=0.1) -> float:
    return float(lambda_s * l_s + lambda_o * l_o + lambda_r * l_r)


# ---------------------------------------------------------------------------
# Optimizer and training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_every: int = 4
    lambda_s: float = 1.0
    lambda_o: float = 1.0
    lambda_r: float = 0.1
    lambda_d: float = 1.0
    lambda_n: float = 1.0
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("rates must be positive")
        for w in (self.lambda_s, self.lambda_o, self.lambda_r, self.lambda_d, self.lambda_n):
            if w < 0:
                raise ValueError("loss weights must be non-negative")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_every)


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard adaptive-moment update over named Linear layers."""
    state.t += 1
    t = state.t
    for name, layer in params:
        for suffix, value, grad in (
            ("w", layer.weight, layer.grad_weight),
            ("b", layer.bias, layer.grad_bias),
        ):
            key = f"{name}.{suffix}"
            if key not in state.m:
                state.m[key] = np.zeros_like(value)
                state.v[key] = np.zeros_like(value)
            m = state.m[key]
            v = state.v[key]
            m *= beta1
            m += (1 - beta1) * grad
            v *= beta2
            v += (1 - beta2) * grad * grad
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            value -= lr * mhat / (np.sqrt(vhat) + eps)


class TrainingDiverged(RuntimeError):
    pass


def _slice_batch(batch, idx):
    out = {}
    for k, v in batch.items():
        if k in ("raw2d", "normal", "z", "n_gt_view"):
            out[k] = v[:, idx]
        elif k == "weights":
            out[k] = v[idx] if v is not None else None
        else:
            out[k] = v[idx]
    return out


def train(nets: ReconNets, scenes, config: TrainConfig):
    """Joint training of the refinement and occupancy heads.

    ``scenes`` is a list of dicts with keys ``surface`` and ``occupancy``,
    each an assembled batch (from ``features.assemble_point_feature``)
    augmented with ``n_gt`` / ``labels`` and fusion ``weights``. Iterates
    scenes then minibatches in fixed order; gradients flow from the
    occupancy loss through the fused encoding back into the refinement head.
    Returns the loss curve as a list of (epoch, L_s, L_o, L_r, total) rows.
    """
    state = AdamState()
    curve = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        sums = np.zeros(3)
        batches = 0
        for si, scene in enumerate(scenes):
            n_surf = len(scene["surface"]["d_body"])
            n_occ = len(scene["occupancy"]["d_body"])
            steps = max(1, int(np.ceil(max(n_surf, n_occ) / config.batch_size)))
            for b in range(steps):
                tape = Tape()
                terms = []
                l_s_val = l_o_val = l_r_val = 0.0
                surf_idx = np.arange(b * config.batch_size, min((b + 1) * config.batch_size, n_surf))
                occ_idx = np.arange(b * config.batch_size, min((b + 1) * config.batch_size, n_occ))

                if nets.f_sd is not None and len(surf_idx):
                    sb = _slice_batch(scene["surface"], surf_idx)
                    n_views = sb["raw2d"].shape[0]
                    _, d_node, n_node = pipeline_forward(
                        nets, tape, sb, need_occupancy=False)
                    n_gt = np.concatenate(
                        [sb["n_gt_view"][v] for v in range(n_views)], axis=0)
                    l_s = combine(tape, [
                        (config.lambda_d, mean_abs(tape, d_node)),
                        (config.lambda_n, mean_row_norm(tape, sub_const(tape, n_node, n_gt))),
                    ])
                    terms.append((config.lambda_s, l_s))
                    l_s_val = float(l_s.value)

                if len(occ_idx):
                    ob = _slice_batch(scene["occupancy"], occ_idx)
                    occ, d_node, n_node = pipeline_forward(
                        nets, tape, ob, weights=ob.get("weights"))
                    l_o = bce_mean(tape, occ, ob["labels"][:, None])
                    terms.append((config.lambda_o, l_o))
                    l_o_val = float(l_o.value)
                    if n_node is not None:
                        l_r = mean_row_norm(tape, n_node, shift=-1.0, square=True)
                        terms.append((config.lambda_r, l_r))
                        l_r_val = float(l_r.value)

                loss = combine(tape, terms)
                if not np.isfinite(loss.value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} scene {si} batch {b}: "
                        f"L_s={l_s_val} L_o={l_o_val} L_r={l_r_val}")
                nets.zero_grad()
                tape.backward(loss)
                adam_step(nets.parameters(), state, lr)
                sums += (l_s_val, l_o_val, l_r_val)
                batches += 1
        mean = sums / max(batches, 1)
        curve.append((epoch, mean[0], mean[1], mean[2],
                      total_loss(mean[0], mean[1], mean[2],
                                 config.lambda_s, config.lambda_o, config.lambda_r)))
    return curve


def _occ_weights(batch, n_views):
    if n_views == 1:
        return None
    w = batch.get("weights")
    if w is None:
        w = np.full((len(batch["d_body"]), n_views), 1.0 / n_views)
    return w


def curve_to_csv(curve):
    lines = ["epoch,L_s,L_o,L_r,total"]
    for row in curve:
        lines.append(f"{row[0]},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradient_check(mlp: Mlp, x, eps=1e-4, max_per_tensor=400, seed=0):
    """Compare tape gradients of sum(mlp(x)) against central differences.

    Probes whose +/-eps evaluations straddle a rectifier kink are skipped:
    the function is not C1 there and a central difference does not estimate
    the one-sided derivative the tape reports. Large tensors are subsampled
    deterministically. Returns (max relative error, worst parameter name).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def probe():
        signs = mlp.preactivation_signs(x)
        return float(mlp(x).sum()), signs

    tape = Tape()
    out = mlp.forward(tape, tape.constant(x))
    total = tape.node(out.value.sum(), (out,),
                      lambda g: _accum(out, g * np.ones_like(out.value)))
    for layer in mlp.layers:
        layer.zero_grad()
    tape.backward(total)

    # Floor the relative-error denominator at the gradient scale of the whole
    # network: near-zero gradients otherwise amplify pure f64 roundoff.
    gscale = max(
        max(np.abs(l.grad_weight).max(), np.abs(l.grad_bias).max()) for l in mlp.layers
    )
    floor = max(1e-6 * gscale, 1e-12)

    rng = np.random.default_rng(seed)
    worst = (0.0, "")
    for li, layer in enumerate(mlp.layers):
        for pname, value, grad in (("w", layer.weight, layer.grad_weight),
                                   ("b", layer.bias, layer.grad_bias)):
            flat = value.reshape(-1)
            gflat = grad.reshape(-1)
            n = len(flat)
            idx = np.arange(n) if n <= max_per_tensor else rng.choice(n, max_per_tensor, replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + eps
                up, signs_up = probe()
                flat[i] = old - eps
                down, signs_down = probe()
                flat[i] = old
                if any((a != b).any() for a, b in zip(signs_up, signs_down)):
                    continue
                fd = (up - down) / (2 * eps)
                denom = max(abs(fd), abs(gflat[i]), floor)
                rel = abs(fd - gflat[i]) / denom
                if rel > worst[0]:
                    worst = (rel, f"layer{li}.{pname}[{i}]")
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, nets: ReconNets):
    meta = {
        "variant": nets.variant,
        "levels": nets.levels,
        "skip_at": nets.f_o.skip_at,
        "embed2d": list(nets.embed2d.shape),
        "embed3d": list(nets.embed3d.shape),
        "f_sd": [list(l.shape) for l in nets.f_sd.layers] if nets.f_sd else None,
        "f_sd_widths": nets.f_sd.widths if nets.f_sd else None,
        "f_o_widths": nets.f_o.widths,
        "f_o": [list(l.shape) for l in nets.f_o.layers],
    }
    tensors = []
    for _, layer in nets.parameters():
        tensors += [layer.weight, layer.bias]
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"SESW")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(t.astype("<f8").tobytes())


def load_checkpoint(path) -> ReconNets:
    with open(path, "rb") as fh:
        if fh.read(4) != b"SESW":
            raise ValueError("bad checkpoint magic")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        tensors = []
        for _ in range(n_tensors):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            tensors.append(np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy())

    rng = np.random.default_rng(0)
    nets = ReconNets(
        embed2d=Linear(meta["embed2d"][1], meta["embed2d"][0], rng),
        embed3d=Linear(meta["embed3d"][1], meta["embed3d"][0], rng),
        f_sd=Mlp(meta["f_sd_widths"], rng, skip_at=meta.get("skip_at", 3))
        if meta["f_sd_widths"] else None,
        f_o=Mlp(meta["f_o_widths"], rng, skip_at=meta.get("skip_at", 3), sigmoid_head=True),
        variant=meta["variant"],
        levels=meta["levels"],
    )
    it = iter(tensors)
    for _, layer in nets.parameters():
        layer.weight = next(it)
        layer.bias = next(it)
        layer.grad_weight = np.zeros_like(layer.weight)
        layer.grad_bias = np.zeros_like(layer.bias)
    return nets
