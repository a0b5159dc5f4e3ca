"""Symbolic residual network: stacked layers that softly select operator
combinations of their inputs.

Every layer sees the model input ``x = (q, qd)`` concatenated with the ``k``
head outputs of the previous layer (zeros for the first layer), enumerates
``n**2 + 3n`` candidate terms, and lets ``k`` selection heads form gated,
scaled, probability-weighted sums of them. The final layer's heads are summed
into the scalar output.

All numeric functions accept either plain arrays or tape values.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .expr import Expr, ExprStore, StateLayout, format_number, simplify
from .params import ParamSet

LN_EPS = 1e-5
COS_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    """A forward activation left the finite range."""


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 3
    n_heads: int = 12
    latent_dim: int = 16
    selection_hidden: int = 64
    ae_hidden: tuple[int, ...] = (128, 128)
    n_joints: int = 2
    # length of the constant all-ones input of the scale network; None means d_o
    scale_inputs: int | None = None

    @property
    def n_state(self) -> int:
        return 2 * self.n_joints

    @property
    def n_inputs(self) -> int:
        return self.n_state + self.n_heads

    @property
    def n_candidates(self) -> int:
        return candidate_count(self.n_inputs)

    @property
    def scale_input_dim(self) -> int:
        return self.scale_inputs or self.n_candidates

    @property
    def n_coefficients(self) -> int:
        return self.n_layers * self.n_heads * self.n_candidates

    def coeff_slot(self, layer: int, head: int, cand: int) -> int:
        return (layer * self.n_heads + head) * self.n_candidates + cand

    def as_dict(self) -> dict[str, str]:
        return {
            "n_layers": str(self.n_layers),
            "n_heads": str(self.n_heads),
            "latent_dim": str(self.latent_dim),
            "selection_hidden": str(self.selection_hidden),
            "ae_hidden": ",".join(str(h) for h in self.ae_hidden),
            "n_joints": str(self.n_joints),
            "scale_inputs": str(self.scale_inputs or 0),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ArchConfig":
        return cls(
            n_layers=int(d["n_layers"]),
            n_heads=int(d["n_heads"]),
            latent_dim=int(d["latent_dim"]),
            selection_hidden=int(d["selection_hidden"]),
            ae_hidden=tuple(int(h) for h in d["ae_hidden"].split(",")),
            n_joints=int(d.get("n_joints", 2)),
            scale_inputs=int(d.get("scale_inputs", 0)) or None,
        )


def candidate_count(n: int) -> int:
    return n * n + 3 * n


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n)


# ---------------------------------------------------------------- parameters

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def ae_layer_sizes(config: ArchConfig) -> tuple[list[int], list[int]]:
    enc = [config.n_candidates, *config.ae_hidden, config.latent_dim]
    dec = [config.latent_dim, *reversed(config.ae_hidden), config.n_candidates]
    return enc, dec


def init_params(config: ArchConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng([seed, 0x5EED])
    p = ParamSet()
    enc, dec = ae_layer_sizes(config)
    for part, sizes in (("enc", enc), ("dec", dec)):
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            p.add(f"ae.{part}{i}.W", _uniform(rng, (fan_out, fan_in), fan_in))
            p.add(f"ae.{part}{i}.b", _uniform(rng, (fan_out,), fan_in))
    d, k, r = config.latent_dim, config.n_heads, config.selection_hidden
    d_o, c = config.n_candidates, config.scale_input_dim
    for i in range(config.n_layers):
        p.add(f"layer{i}.special", _uniform(rng, (d, d), d))
        p.add(f"layer{i}.focus", _uniform(rng, (k, d), d))
        p.add(f"layer{i}.sel_hidden", _uniform(rng, (k, r, d), d))
        p.add(f"layer{i}.sel_out", _uniform(rng, (k, d_o, r), r))
        p.add(f"layer{i}.scale", _uniform(rng, (k, d_o, c), c))
        p.add(f"layer{i}.gate_p", _uniform(rng, (k, d_o), 2 * d_o))
        p.add(f"layer{i}.gate_joint", _uniform(rng, (k, d_o), 2 * d_o))
    return p


# ---------------------------------------------------------------- candidates

def candidate_exprs(inputs: list[Expr]) -> list[Expr]:
    """sin(u_a), cos(u_a), u_a + u_b (a <= b), u_a * u_b (a <= b)."""
    store = inputs[0].store
    ia, ib = _pairs(len(inputs))
    return (
        [store.sin(u) for u in inputs]
        + [store.cos(u) for u in inputs]
        + [store.add(inputs[a], inputs[b]) for a, b in zip(ia, ib)]
        + [store.mul(inputs[a], inputs[b]) for a, b in zip(ia, ib)]
    )


def candidate_values(U):
    """Candidate matrix ``(N, n**2 + 3n)`` from layer inputs ``(N, n)``."""
    ia, ib = _pairs(ad.value_of(U).shape[1])
    ua = ad.getitem(U, (slice(None), ia))
    ub = ad.getitem(U, (slice(None), ib))
    return ad.concat([ad.sin(U), ad.cos(U), ua + ub, ua * ub], axis=1)


def enumerate_candidates(exprs: list[Expr], values):
    return candidate_exprs(exprs), candidate_values(values)


@dataclass
class Jet:
    """Value, state-gradient and Hessian-vector product of ``(N, n)`` quantities.

    ``grad`` and ``hvp`` have shape ``(N, n, m)`` for an ``m``-dimensional
    state; ``hvp`` is the Hessian contracted with the fixed direction ``w``.
    """

    val: object
    grad: object
    hvp: object


def candidate_jets(U: Jet, w: np.ndarray) -> Jet:
    n = ad.value_of(U.val).shape[1]
    ia, ib = _pairs(n)
    x, g, hv = U.val, U.grad, U.hvp
    s = ad.sum_(g * w[:, None, :], axis=-1)  # directional derivative g.w
    sx, cx = ad.sin(x), ad.cos(x)
    sx3 = ad.reshape(sx, ad.value_of(sx).shape + (1,))
    cx3 = ad.reshape(cx, ad.value_of(cx).shape + (1,))
    s3 = ad.reshape(s, ad.value_of(s).shape + (1,))

    sel = lambda t, idx: ad.getitem(t, (slice(None), idx))  # noqa: E731
    xa, xb = sel(x, ia), sel(x, ib)
    ga, gb = sel(g, ia), sel(g, ib)
    ha, hb = sel(hv, ia), sel(hv, ib)
    sa, sb = sel(s3, ia), sel(s3, ib)
    xa3 = ad.reshape(xa, ad.value_of(xa).shape + (1,))
    xb3 = ad.reshape(xb, ad.value_of(xb).shape + (1,))

    val = ad.concat([sx, cx, xa + xb, xa * xb], axis=1)
    grad = ad.concat([cx3 * g, -(sx3 * g), ga + gb, xa3 * gb + xb3 * ga], axis=1)
    hvp = ad.concat(
        [
            cx3 * hv - sx3 * g * s3,
            -(sx3 * hv) - cx3 * g * s3,
            ha + hb,
            xa3 * hb + xb3 * ha + ga * sb + gb * sa,
        ],
        axis=1,
    )
    return Jet(val, grad, hvp)


# ------------------------------------------------------------ representation

def layer_normalize(V, axis: int = -1, eps: float = LN_EPS):
    mu = ad.mean(V, axis=axis, keepdims=True)
    c = V - mu
    var = ad.mean(c * c, axis=axis, keepdims=True)
    return c / ad.sqrt(var + eps)


def _linear(X, W, b=None):
    out = ad.matmul(X, W.T)
    return out if b is None else out + b


def ae_encode(params, Vn, n_layers: int):
    """Encoder: softplus hidden layers, linear latent. Returns (Z, pre-activations)."""
    h = Vn
    pre = []
    for i in range(n_layers):
        a = _linear(h, params[f"ae.enc{i}.W"], params[f"ae.enc{i}.b"])
        if i < n_layers - 1:
            pre.append(a)
            h = ad.softplus(a)
        else:
            h = a
    return h, pre


def ae_decode(params, Z, n_layers: int):
    h = Z
    for i in range(n_layers):
        a = _linear(h, params[f"ae.dec{i}.W"], params[f"ae.dec{i}.b"])
        h = ad.softplus(a) if i < n_layers - 1 else a
    return h


def ae_forward(params, Vn, config: ArchConfig):
    n = len(config.ae_hidden) + 1
    Z, pre = ae_encode(params, Vn, n)
    return Z, ae_decode(params, Z, n), pre


def contractive_penalty(params, Vn, config: ArchConfig, pre=None):
    """Mean over samples of the squared Frobenius norm of the encoder Jacobian.

    With encoder ``z = W_L s(... s(W_1 v + b_1) ...)`` the Jacobian is
    ``W_L D_{L-1} W_{L-1} ... D_1 W_1`` with ``D_i = diag(sigmoid(a_i))``;
    it is formed per sample as ``A = W_L D_{L-1} ... D_1`` and
    ``||A W_1||_F^2 = sum((A @ (W_1 W_1^T)) * A)``.
    """
    n = len(config.ae_hidden) + 1
    if pre is None:
        _, pre = ae_encode(params, Vn, n)
    Ws = [params[f"ae.enc{i}.W"] for i in range(n)]
    A = None
    for i in range(n - 1, 0, -1):
        d = ad.sigmoid(pre[i - 1])  # (N, h_i)
        d3 = ad.reshape(d, (ad.value_of(d).shape[0], 1, ad.value_of(d).shape[1]))
        if A is None:
            A = ad.reshape(Ws[i], (1,) + ad.value_of(Ws[i]).shape) * d3
        else:
            A = ad.matmul(A, Ws[i]) * d3
    W1 = Ws[0]
    gram = ad.matmul(W1, W1.T)
    if A is None:
        return ad.sum_(gram * np.eye(ad.value_of(gram).shape[0]))
    per_sample = ad.sum_(ad.matmul(A, gram) * A, axis=(1, 2))
    return ad.mean(per_sample)


def encoder_jacobian_fd(params, v: np.ndarray, config: ArchConfig, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the encoder at one normalized input."""
    n = len(config.ae_hidden) + 1
    p = {k: ad.value_of(x) for k, x in params.items()}
    cols = []
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        hi, _ = ae_encode(p, (v + e)[None, :], n)
        lo, _ = ae_encode(p, (v - e)[None, :], n)
        cols.append((hi[0] - lo[0]) / (2 * h))
    return np.stack(cols, axis=1)


def channel_cosine_similarity(Z):
    """``d x d`` cosine similarities between latent channels over the batch."""
    sq = ad.sum_(Z * Z, axis=0, keepdims=True)
    norm = ad.sqrt(ad.floor_min(sq, COS_FLOOR**2))
    Zn = Z / norm
    return ad.matmul(Zn.T, Zn)


def layer_specialize(M, W):
    return ad.matmul(M, W.T)


# ------------------------------------------------------------------- heads

def softmax(logits, axis: int = -1):
    shift = np.max(ad.value_of(logits), axis=axis, keepdims=True)
    e = ad.exp(logits - shift)
    return e / ad.sum_(e, axis=axis, keepdims=True)


@dataclass
class HeadState:
    """Per-layer head quantities, stacked over the ``k`` heads."""

    P: object      # (k, d_o) selection distributions
    S: object      # (k, d_o) scales
    phi: object    # (k,) gates

    @property
    def coefficients(self):
        phi = self.phi
        phi2 = ad.reshape(phi, (ad.value_of(phi).shape[0], 1))
        return phi2 * self.S * self.P


def head_forward(Mspec, prev_joint, params, layer: int) -> HeadState:
    """All heads of one layer. ``prev_joint`` is the previous layer's joint
    selection probability (ones for the first layer)."""
    pre = f"layer{layer}."
    Wf = params[pre + "focus"]
    F = ad.matmul(Wf, Mspec.T)  # (k, d)
    kf = ad.value_of(F).shape
    F3 = ad.reshape(F, kf + (1,))
    hidden = ad.matmul(params[pre + "sel_hidden"], F3)  # (k, r, 1)
    hidden = ad.reshape(hidden, ad.value_of(hidden).shape[:2])
    hidden = ad.softplus(layer_normalize(hidden, axis=-1))
    h3 = ad.reshape(hidden, ad.value_of(hidden).shape + (1,))
    logits = ad.matmul(params[pre + "sel_out"], h3)
    logits = ad.reshape(logits, ad.value_of(logits).shape[:2])
    P = softmax(layer_normalize(logits, axis=-1), axis=-1)
    S = ad.sum_(params[pre + "scale"], axis=-1)  # W_scale @ ones
    gate_in = ad.sum_(params[pre + "gate_p"] * P, axis=-1) + ad.sum_(params[pre + "gate_joint"] * prev_joint, axis=-1)
    phi = ad.sigmoid(gate_in)
    return HeadState(P, S, phi)


def joint_prob(P):
    """Elementwise product of the head distributions (rows of ``P``)."""
    k = ad.value_of(P).shape[0]
    out = ad.getitem(P, 0)
    for j in range(1, k):
        out = out * ad.getitem(P, j)
    return out


# ----------------------------------------------------------------- forward

@dataclass
class LayerTrace:
    V: object
    V_norm: object
    Z: object
    V_hat: object
    M: object
    M_spec: object
    heads: HeadState
    coefficients: object
    joint: object
    penalty: object
    reconstruction: object
    outputs: object


@dataclass
class ForwardResult:
    values: object                 # (N,) model output
    torque: object | None          # (N, n_joints) Euler-Lagrange torques, when requested
    traces: list[LayerTrace] = field(default_factory=list)

    def coefficient_vector(self) -> np.ndarray:
        return np.concatenate([ad.value_of(t.coefficients).ravel() for t in self.traces])


HeadOverride = Callable[[int, HeadState], HeadState]


def _check(stage: str, layer: int, x) -> None:
    if not np.all(np.isfinite(ad.value_of(x))):
        raise NonFiniteError(f"non-finite activation in layer {layer} ({stage})")


def forward(
    params,
    q: np.ndarray,
    qd: np.ndarray,
    config: ArchConfig,
    qdd: np.ndarray | None = None,
    head_override: HeadOverride | None = None,
) -> ForwardResult:
    """Run the network on a batch of states ``q, qd`` of shape ``(N, n_joints)``.

    When ``qdd`` is given the Euler-Lagrange torques of the output are
    propagated alongside the values (coefficients held fixed w.r.t. state).
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    N, nj = q.shape
    if N == 0:
        raise ValueError("empty batch")
    if nj != config.n_joints or qd.shape != q.shape:
        raise ValueError(f"expected state arrays of shape (N, {config.n_joints})")
    x = np.concatenate([q, qd], axis=1)
    m = config.n_state
    k = config.n_heads
    want_torque = qdd is not None
    if want_torque:
        qdd = np.asarray(qdd, dtype=float)
        if qdd.shape != q.shape:
            raise ValueError("qdd shape mismatch")
        w = np.concatenate([qd, qdd], axis=1)
        x_jet = Jet(x, np.broadcast_to(np.eye(m), (N, m, m)).copy(), np.zeros((N, m, m)))
        h_jet = Jet(np.zeros((N, k)), np.zeros((N, k, m)), np.zeros((N, k, m)))
    h_val = np.zeros((N, k))
    prev_joint = np.ones(config.n_candidates)
    traces = []
    n_ae = len(config.ae_hidden) + 1
    for i in range(config.n_layers):
        if want_torque:
            U = Jet(
                ad.concat([x_jet.val, h_jet.val], axis=1),
                ad.concat([x_jet.grad, h_jet.grad], axis=1),
                ad.concat([x_jet.hvp, h_jet.hvp], axis=1),
            )
            cj = candidate_jets(U, w)
            V = cj.val
        else:
            V = candidate_values(ad.concat([x, h_val], axis=1))
        _check("candidates", i, V)
        Vn = layer_normalize(V, axis=-1)
        Z, V_hat, pre = ae_forward(params, Vn, config)
        _check("latent", i, Z)
        penalty = contractive_penalty(params, Vn, config, pre)
        recon = ad.mean((Vn - V_hat) * (Vn - V_hat))
        M = channel_cosine_similarity(Z)
        Ms = layer_specialize(M, params[f"layer{i}.special"])
        heads = head_forward(Ms, prev_joint, params, i)
        if head_override is not None:
            heads = head_override(i, heads)
        _check("selection", i, heads.P)
        coeff = heads.coefficients
        c_t = coeff.T
        h_val = ad.matmul(V, c_t)
        _check("head output", i, h_val)
        if want_torque:
            gT = ad.swapaxes(cj.grad, 1, 2)
            hT = ad.swapaxes(cj.hvp, 1, 2)
            h_jet = Jet(
                h_val,
                ad.swapaxes(ad.matmul(gT, c_t), 1, 2),
                ad.swapaxes(ad.matmul(hT, c_t), 1, 2),
            )
        joint = joint_prob(heads.P)
        traces.append(LayerTrace(V, Vn, Z, V_hat, M, Ms, heads, coeff, joint, penalty, recon, h_val))
        prev_joint = joint
    values = ad.sum_(h_val, axis=1)
    torque = None
    if want_torque:
        g = ad.sum_(h_jet.grad, axis=1)    # (N, m)
        hv = ad.sum_(h_jet.hvp, axis=1)
        torque = ad.getitem(hv, (slice(None), slice(nj, 2 * nj))) - ad.getitem(g, (slice(None), slice(0, nj)))
        _check("torque", config.n_layers - 1, torque)
    return ForwardResult(values, torque, traces)


# ------------------------------------------------------- symbolic structure

def build_expr(
    config: ArchConfig,
    store: ExprStore | None = None,
    coefficient: Callable[[int, int, int], Expr | None] | None = None,
) -> Expr:
    """The network output as an expression.

    By default each (layer, head, candidate) contributes ``Coeff(slot) * v``.
    A ``coefficient(layer, head, cand)`` callback may return a replacement
    expression, or None to omit the term.
    """
    store = ExprStore(StateLayout(config.n_joints)) if store is None else store
    nj = config.n_joints
    x = [store.q(i) for i in range(nj)] + [store.qd(i) for i in range(nj)]
    zero = store.const(0.0)
    h = [zero] * config.n_heads
    for i in range(config.n_layers):
        cands = candidate_exprs(x + h)
        new_h = []
        for j in range(config.n_heads):
            terms = []
            for b, cand in enumerate(cands):
                if coefficient is None:
                    c = store.coeff(config.coeff_slot(i, j, b))
                else:
                    c = coefficient(i, j, b)
                    if c is None:
                        continue
                terms.append(store.mul(c, cand))
            new_h.append(store.sum(terms))
        h = new_h
    return store.sum(h)


def extract_equation(
    params,
    config: ArchConfig,
    q: np.ndarray,
    qd: np.ndarray,
    mode: str = "argmax",
    store: ExprStore | None = None,
    head_override: HeadOverride | None = None,
) -> Expr:
    """Symbolic equation learned by the network on a reference batch.

    ``soft`` keeps every probability-weighted term with numeric coefficients;
    ``argmax`` keeps only each head's most probable candidate (lowest index
    on ties) scaled by its gate and scale, then simplifies with eps=1e-6.
    """
    if mode not in ("soft", "argmax"):
        raise ValueError(f"unknown extraction mode {mode!r}")
    plain = {k: ad.value_of(v) for k, v in dict(params.items() if isinstance(params, ParamSet) else params).items()}
    result = forward(plain, q, qd, config, head_override=head_override)
    store = ExprStore(StateLayout(config.n_joints)) if store is None else store
    if mode == "soft":
        coeffs = [np.asarray(ad.value_of(t.coefficients)) for t in result.traces]
        return build_expr(config, store, lambda i, j, b: store.const(coeffs[i][j, b]))
    choice = []
    for t in result.traces:
        P = np.asarray(ad.value_of(t.heads.P))
        S = np.asarray(ad.value_of(t.heads.S))
        phi = np.asarray(ad.value_of(t.heads.phi))
        best = np.argmax(P, axis=1)
        choice.append({j: (int(b), float(phi[j] * S[j, b])) for j, b in enumerate(best)})

    def pick(i, j, b):
        chosen, c = choice[i][j]
        return store.const(c) if b == chosen else None

    return simplify(build_expr(config, store, pick), 1e-6)


def format_layered(params, config: ArchConfig, q: np.ndarray, qd: np.ndarray) -> list[str]:
    """Soft equation as one definition per head, referring to earlier heads by name."""
    plain = {k: ad.value_of(v) for k, v in dict(params.items() if isinstance(params, ParamSet) else params).items()}
    result = forward(plain, q, qd, config)
    layout = StateLayout(config.n_joints)
    names = [layout.name(layout.q(i)) for i in range(config.n_joints)]
    names += [layout.name(layout.qd(i)) for i in range(config.n_joints)]
    prev = ["0"] * config.n_heads
    lines = []
    for i, t in enumerate(result.traces):
        inputs = names + prev
        n = len(inputs)
        ia, ib = _pairs(n)
        cands = (
            [f"sin({u})" for u in inputs] + [f"cos({u})" for u in inputs]
            + [f"({inputs[a]} + {inputs[b]})" for a, b in zip(ia, ib)]
            + [f"{inputs[a]}*{inputs[b]}" for a, b in zip(ia, ib)]
        )
        coeffs = np.asarray(ad.value_of(t.coefficients))
        cur = []
        for j in range(config.n_heads):
            name = f"h{i + 1}_{j + 1}"
            body = " + ".join(f"{format_number(c)}*{v}" for c, v in zip(coeffs[j], cands))
            lines.append(f"{name} = {body}")
            cur.append(name)
        prev = cur
    lines.append("f = " + " + ".join(prev))
    return lines


def one_hot_params(config: ArchConfig, choices: dict[tuple[int, int], tuple[int, float]], seed: int = 0) -> ParamSet:
    """Parameters whose heads select fixed candidates.

    ``choices[(layer, head)] = (candidate, scale)``; every listed head gets its
    argmax at ``candidate``, scale exactly ``scale`` on that bin and gate
    weights zero (so the gate is exactly 0.5). Unlisted heads have zero scale.
    """
    p = init_params(config, seed)
    blocks = dict(p.items())
    for i in range(config.n_layers):
        blocks[f"layer{i}.sel_out"] = np.zeros_like(blocks[f"layer{i}.sel_out"])
        blocks[f"layer{i}.scale"] = np.zeros_like(blocks[f"layer{i}.scale"])
        blocks[f"layer{i}.gate_p"] = np.zeros_like(blocks[f"layer{i}.gate_p"])
        blocks[f"layer{i}.gate_joint"] = np.zeros_like(blocks[f"layer{i}.gate_joint"])
    for (i, j), (b, scale) in choices.items():
        blocks[f"layer{i}.sel_out"][j, b, :] = 1.0
        blocks[f"layer{i}.scale"][j, b, 0] = scale
    return ParamSet(blocks)


def with_config(config: ArchConfig, **changes) -> ArchConfig:
    return replace(config, **changes)
