"""Adversarial reconstruction from unknown-angle projections.

A fully connected critic (m -> w -> w/2 -> w/4 -> 1, ReLU, spectral
normalisation) scores Hartley lines. The generator holds HB coefficients
``c`` and PMF logits; synthetic lines are the ``N_theta`` templates
``H_theta c`` (plus noise) weighted per batch row by Gumbel-softmax samples
from the PMF, so the loss is differentiable in both ``c`` and ``p``.
All gradients are hand-written.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .hb_basis import BasisSpec, HBCoefficients, render_adjoint, render_matrix, render_spatial
from .metrics import recovery_scores
from .projection import AnglePMF, HBProjector, ProjectionDataset

__all__ = [
    "CheckpointError",
    "CriticParams",
    "GeneratorModel",
    "TrainConfig",
    "TrainState",
    "critic_backward",
    "critic_forward",
    "critic_input_grad",
    "critic_loss",
    "critic_step",
    "generator_loss",
    "generator_loss_per_sample",
    "generator_step",
    "gradient_penalty",
    "gumbel_noise",
    "gumbel_softmax",
    "gumbel_weights",
    "load_checkpoint",
    "power_iteration",
    "save_checkpoint",
    "spectral_normalize",
    "train",
    "write_history_csv",
]

LOG_FLOOR = 1e-12


# --------------------------------------------------------------------------
# critic


@dataclass
class CriticParams:
    """Raw critic weights plus spectral-normalisation state.

    ``weights[i]`` has shape ``[out, in]``. ``u``/``v`` are the persistent
    power-iteration vectors; the effective weights are ``W / (u^T W v)``.
    """

    weights: list
    biases: list
    u: list
    v: list

    @classmethod
    def init(cls, m: int, width: int, rng, std: float = 0.05) -> "CriticParams":
        if width % 4 or width < 4:
            raise ValueError("critic width must be a positive multiple of 4")
        sizes = [m, width, width // 2, width // 4, 1]
        W = [std * rng.standard_normal((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        b = [np.zeros(o) for o in sizes[1:]]
        u = [_unit(rng.standard_normal(o)) for o in sizes[1:]]
        v = [_unit(w.T @ uu) for w, uu in zip(W, u)]
        return cls(W, b, u, v)

    @property
    def shapes(self) -> list:
        return [w.shape for w in self.weights]

    @property
    def sigma(self) -> list:
        """Current estimates ``u^T W v`` (1 for a degenerate all-zero layer)."""
        out = []
        for w, u, v in zip(self.weights, self.u, self.v):
            s = float(u @ w @ v)
            out.append(s if s != 0 else 1.0)
        return out

    def effective(self) -> list:
        return [w / s for w, s in zip(self.weights, self.sigma)]

    def copy(self) -> "CriticParams":
        return CriticParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            [x.copy() for x in self.u], [x.copy() for x in self.v],
        )


def _unit(x):
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def power_iteration(W: np.ndarray, u: np.ndarray, iters: int = 1, tol: float | None = None,
                    max_iter: int = 10000):
    """Left/right singular-vector estimates and ``sigma = u^T W v``.

    With ``tol`` the iteration continues past ``iters`` until the relative
    change of ``sigma`` drops below ``tol`` (or ``max_iter``).
    """
    if iters < 1:
        raise ValueError("power_iters must be >= 1")
    sigma_old = None
    it = 0
    while True:
        v = _unit(W.T @ u)
        u = _unit(W @ v)
        sigma = float(u @ W @ v)
        it += 1
        if it >= iters:
            if tol is None or it >= max_iter:
                break
            if sigma_old is not None and abs(sigma - sigma_old) <= tol * abs(sigma):
                break
        sigma_old = sigma
    return sigma, u, v


def spectral_normalize(phi: CriticParams, power_iters: int = 1, tol: float | None = None) -> CriticParams:
    """Advance the power iteration of every layer in place."""
    for i, W in enumerate(phi.weights):
        _, phi.u[i], phi.v[i] = power_iteration(W, phi.u[i], power_iters, tol)
    return phi


def critic_forward(phi: CriticParams, x: np.ndarray):
    """Scores for a batch ``x[n, m]`` (or one line) and the backprop cache."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    Ws = phi.effective()
    pre = []
    acts = [h]
    for W, b in zip(Ws[:-1], phi.biases[:-1]):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    out = (h @ Ws[-1].T + phi.biases[-1])[:, 0]
    cache = (Ws, pre, acts)
    return (out[0] if single else out), cache


def critic_backward(phi: CriticParams, cache, grad_out) -> tuple[list, list, np.ndarray]:
    """Gradients of ``sum(grad_out * scores)`` wrt raw weights, biases and input.

    Spectral normalisation is differentiated with ``u`` and ``v`` held
    fixed: ``d(W / u^T W v) / dW``.
    """
    Ws, pre, acts = cache
    g = np.atleast_1d(np.asarray(grad_out, dtype=float))[:, None]  # [n, 1]
    n_layers = len(Ws)
    gW = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gW[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ Ws[i]
        if i > 0:
            g = g * (pre[i - 1] > 0)
    raw = [_sn_chain(phi, i, gW[i], Ws[i]) for i in range(n_layers)]
    return raw, gb, g


def _sn_chain(phi: CriticParams, i: int, g_eff: np.ndarray, W_eff: np.ndarray) -> np.ndarray:
    s = float(phi.u[i] @ phi.weights[i] @ phi.v[i])
    if s == 0:
        return g_eff
    return (g_eff - np.sum(g_eff * W_eff) * np.outer(phi.u[i], phi.v[i])) / s


def critic_input_grad(phi: CriticParams, x: np.ndarray, weights) -> tuple[np.ndarray, np.ndarray]:
    """Scores and ``d/dx sum_i weights_i D(x_i)``."""
    scores, cache = critic_forward(phi, np.atleast_2d(x))
    _, _, gx = critic_backward(phi, cache, weights)
    return scores, gx


def gradient_penalty(phi: CriticParams, x: np.ndarray):
    """``sum_n (||grad_x D(x_n)|| - 1)^2`` and its raw-weight gradients.

    ReLU masks are piecewise constant, so the input gradient is linear in
    each effective weight and bias gradients vanish.
    """
    _, (Ws, pre, _) = critic_forward(phi, np.atleast_2d(x))
    masks = [z > 0 for z in pre]
    # e_k: back-propagated unit signal at each hidden layer
    e = [None] * len(masks)
    e[-1] = masks[-1] * Ws[-1][0][None, :]
    for i in range(len(masks) - 2, -1, -1):
        e[i] = masks[i] * (e[i + 1] @ Ws[i + 1])
    g = e[0] @ Ws[0]
    norm = np.linalg.norm(g, axis=1)
    pen = float(np.sum((norm - 1.0) ** 2))
    gam = (2 * (norm - 1.0) / np.where(norm > 0, norm, 1.0))[:, None] * g
    gW = [None] * len(Ws)
    gW[0] = e[0].T @ gam
    d = gam @ Ws[0].T
    for i in range(1, len(Ws) - 1):
        eta = masks[i - 1] * d
        gW[i] = e[i].T @ eta
        d = eta @ Ws[i].T
    eta = masks[-1] * d
    gW[-1] = eta.sum(axis=0)[None, :]
    raw = [_sn_chain(phi, i, gW[i], Ws[i]) for i in range(len(Ws))]
    gb = [np.zeros_like(b) for b in phi.biases]
    return pen, raw, gb


def critic_loss(phi: CriticParams, real: np.ndarray, templates: np.ndarray, r: np.ndarray,
                lambda_gp: float = 0.0, alpha=None):
    """Critic objective (to be maximised) and its raw-parameter gradients.

    ``sum_b D(real_b) - sum_b sum_i r_{b,i} D(templates_i)``, minus
    ``lambda_gp`` times the gradient penalty at ``alpha real + (1 - alpha)
    syn`` where ``syn_b = sum_i r_{b,i} templates_i``.
    """
    B = real.shape[0]
    s = r.sum(axis=0)
    x = np.concatenate([real, templates], axis=0)
    scores, cache = critic_forward(phi, x)
    weights = np.concatenate([np.ones(B), -s])
    loss = float(np.sum(scores[:B]) - np.dot(s, scores[B:]))
    gW, gb, _ = critic_backward(phi, cache, weights)
    if lambda_gp > 0:
        if alpha is None:
            raise ValueError("gradient penalty needs interpolation weights alpha")
        syn = r @ templates
        inter = alpha[:, None] * real + (1 - alpha[:, None]) * syn
        pen, pW, _ = gradient_penalty(phi, inter)
        loss -= lambda_gp * pen
        gW = [a - lambda_gp * b for a, b in zip(gW, pW)]
    return loss, gW, gb


# --------------------------------------------------------------------------
# Gumbel-softmax


def gumbel_noise(shape, rng) -> np.ndarray:
    u = rng.uniform(size=shape)
    # u = 0 has probability ~2^-53; nudge to keep g finite
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps / 2)
    return -np.log(-np.log(u))


def _logp(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def gumbel_softmax(p, g: np.ndarray, tau: float) -> np.ndarray:
    """Rows ``softmax((g_b + log p) / tau)`` for fixed Gumbel draws ``g[B, N]``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    z = (g + _logp(p)[None, :]) / tau
    z -= z.max(axis=1, keepdims=True)
    r = np.exp(z)
    return r / r.sum(axis=1, keepdims=True)


def gumbel_weights(p, B: int, tau: float, rng) -> np.ndarray:
    """Relaxed one-hot samples ``r[B, N_theta]`` from the PMF ``p``."""
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    return gumbel_softmax(p, gumbel_noise((B, p.size), rng), tau)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


# --------------------------------------------------------------------------
# generator


class GeneratorModel:
    """Template operator, angle grid and image regulariser for one basis."""

    # dense render matrices above this many entries fall back to per-order loops
    DENSE_LIMIT = 30_000_000

    def __init__(self, spec: BasisSpec, m: int | None = None, n_theta: int = 240):
        self.spec = spec
        self.m = spec.m if m is None else int(m)
        self.n_theta = int(n_theta)
        self.thetas = 2 * np.pi * np.arange(self.n_theta) / self.n_theta
        self.projector = HBProjector(spec, self.m)
        self._render = None

    def templates(self, c) -> np.ndarray:
        return self.projector.project(c, self.thetas)

    def _render_op(self):
        if self._render is None and self.m * self.m * self.spec.size <= self.DENSE_LIMIT:
            self._render = render_matrix(self.spec, self.m)
        return self._render

    def render(self, c: np.ndarray) -> np.ndarray:
        M = self._render_op()
        if M is not None:
            return (M @ c).reshape(self.m, self.m)
        return render_spatial(HBCoefficients(c, self.spec), self.m)

    def render_T(self, img: np.ndarray) -> np.ndarray:
        M = self._render_op()
        if M is not None:
            return M.T @ img.ravel()
        return render_adjoint(self.spec, img)

    def image_tv(self, c: np.ndarray) -> tuple[float, np.ndarray]:
        """Anisotropic TV of the rendered image and its gradient in ``c``."""
        img = self.render(c)
        dx = np.diff(img, axis=1)
        dy = np.diff(img, axis=0)
        sx, sy = np.sign(dx), np.sign(dy)
        g = np.zeros_like(img)
        g[:, 1:] += sx
        g[:, :-1] -= sx
        g[1:, :] += sy
        g[:-1, :] -= sy
        return float(np.abs(dx).sum() + np.abs(dy).sum()), self.render_T(g)


def _pmf_regularizer(p: np.ndarray, g3: float, g4: float) -> tuple[float, np.ndarray]:
    d = np.roll(p, -1) - p
    sg = np.sign(d)
    val = g3 * np.abs(d).sum() + g4 * np.dot(p, p)
    grad = g3 * (np.roll(sg, 1) - sg) + 2 * g4 * p
    return float(val), grad


@dataclass
class LossParts:
    total: float
    adversarial: float
    regularizer: float


def _finish_generator(model, c, p_logits, D, dT, g, tau, gammas):
    """Shared tail: Gumbel/softmax chain rule and regularisers."""
    g1, g2, g3, g4 = gammas
    p = _softmax(np.asarray(p_logits, dtype=float))
    r = gumbel_softmax(p, g, tau)
    adv = -float(np.sum(np.sum(r * D, axis=1)))
    grad_c = model.projector.adjoint(dT, model.thetas)
    # d adv / d r = -D, then through r_b = softmax((g_b + log p) / tau)
    dr = -D
    dz = r * (dr - np.sum(r * dr, axis=1, keepdims=True))
    dlogp = dz.sum(axis=0) / tau
    dp = np.where(p > LOG_FLOOR, dlogp / np.maximum(p, LOG_FLOOR), 0.0)
    reg = 0.0
    if g1:
        tv, gtv = model.image_tv(c)
        reg += g1 * tv
        grad_c = grad_c + g1 * gtv
    if g2:
        reg += g2 * float(np.dot(c, c))
        grad_c = grad_c + 2 * g2 * c
    if g3 or g4:
        val, gp = _pmf_regularizer(p, g3, g4)
        reg += val
        dp = dp + gp
    grad_logits = p * (dp - np.dot(p, dp))
    return LossParts(adv + reg, adv, reg), grad_c, grad_logits


def generator_loss(model: GeneratorModel, c, p_logits, phi: CriticParams, noise_bank, g,
                   tau: float, gammas=(0.0, 0.0, 0.0, 0.0)):
    """Regularised generator loss with shared noisy templates.

    Parameters
    ----------
    model : GeneratorModel
    c : array
        HB coefficients.
    p_logits : array
        PMF logits; ``p = softmax(p_logits)``.
    phi : CriticParams
        Critic, already spectrally normalised.
    noise_bank : array or None
        ``[N_theta, m]`` Hartley noise, one line per template.
    g : array
        Gumbel draws ``[B, N_theta]``; weights are recomputed from ``p``.
    tau : float
    gammas : tuple
        ``(image TV, ||c||^2, TV(p), ||p||^2)`` weights.

    Returns
    -------
    (LossParts, grad_c, grad_p_logits)
    """
    c = np.asarray(getattr(c, "values", c), dtype=float)
    T = model.templates(c)
    if noise_bank is not None:
        T = T + noise_bank
    p = _softmax(np.asarray(p_logits, dtype=float))
    r = gumbel_softmax(p, g, tau)
    s = r.sum(axis=0)
    D, cache = critic_forward(phi, T)
    _, _, dT = critic_backward(phi, cache, -s)
    Dfull = np.broadcast_to(D, r.shape)
    return _finish_generator(model, c, p_logits, Dfull, dT, g, tau, gammas)


def generator_loss_per_sample(model: GeneratorModel, c, p_logits, phi: CriticParams, noise,
                              g, tau: float, gammas=(0.0, 0.0, 0.0, 0.0)):
    """Reference path with independent noise per (row, template).

    ``noise`` is ``[B, N_theta, m]`` (or None). At zero noise this equals
    :func:`generator_loss` exactly.
    """
    c = np.asarray(getattr(c, "values", c), dtype=float)
    T0 = model.templates(c)
    p = _softmax(np.asarray(p_logits, dtype=float))
    r = gumbel_softmax(p, g, tau)
    B = r.shape[0]
    D = np.empty(r.shape)
    dT = np.zeros_like(T0)
    for b in range(B):
        T = T0 if noise is None else T0 + noise[b]
        D[b], cache = critic_forward(phi, T)
        _, _, gx = critic_backward(phi, cache, -r[b])
        dT += gx
    return _finish_generator(model, c, p_logits, D, dT, g, tau, gammas)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Hyper-parameters; defaults follow the clean-data setting."""

    lr_phi: float = 0.008
    lr_c: float = 0.008
    lr_p: float = 0.0008
    gamma1: float = 1e-5
    gamma2: float = 5e-5
    gamma3: float = 0.01
    gamma4: float = 0.04
    tau: float = 0.5
    n_disc: int = 4
    n_disc_late: int = 2
    batch: int = 200
    clip_phi: float = 1.0
    clip_c: float = 10.0
    p_grad_norm: float = 0.1
    n_theta: int = 240
    iters: int = 20000
    seed: int = 0
    lambda_gp: float = 0.0
    width: int = 512
    init: str = "gaussian"
    decay: float = 0.5
    decay_every: int | None = None
    switch_at: int | None = None
    eval_every: int = 1000
    update_p: bool = True

    def __post_init__(self):
        for name in ("lr_phi", "lr_c", "lr_p", "tau", "p_grad_norm", "clip_phi", "clip_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_disc < 1 or self.n_disc_late < 1:
            raise ValueError("n_disc must be >= 1")
        if self.batch < 1 or self.iters < 0 or self.n_theta < 1:
            raise ValueError("batch, iters and n_theta must be positive")
        if self.init not in ("gaussian", "spike"):
            raise ValueError("init must be 'gaussian' or 'spike'")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")

    @property
    def gammas(self) -> tuple:
        return (self.gamma1, self.gamma2, self.gamma3, self.gamma4)

    def lr_scale(self, it: int) -> float:
        every = self.decay_every or max(1, math.ceil(self.iters / 4))
        return self.decay ** (it // every)

    def disc_steps(self, it: int) -> int:
        switch = self.iters // 2 if self.switch_at is None else self.switch_at
        return self.n_disc if it < switch else self.n_disc_late

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    c: HBCoefficients
    p_logits: np.ndarray
    phi: CriticParams
    iteration: int = 0
    seed: int = 0

    @property
    def p(self) -> AnglePMF:
        return AnglePMF(_softmax(self.p_logits))

    def rng(self, role: int) -> np.random.Generator:
        """Stream for one step; keyed so resumed runs replay exactly."""
        return np.random.default_rng([self.seed, self.iteration, role])

    @classmethod
    def initial(cls, spec: BasisSpec, m: int, config: TrainConfig) -> "TrainState":
        rng = np.random.default_rng([config.seed, 2**31 - 1])
        if config.init == "gaussian":
            c = 0.02 * rng.standard_normal(spec.size)
        else:
            c = np.zeros(spec.size)
            c[spec.index(0, 1)] = 0.01
        phi = CriticParams.init(m, config.width, rng)
        spectral_normalize(phi, 20, tol=1e-12)
        return cls(HBCoefficients(c, spec), np.zeros(config.n_theta), phi, 0, config.seed)


def critic_step(state: TrainState, model: GeneratorModel, real: np.ndarray, config: TrainConfig,
                rng, noise_sigma: float = 0.0, lr_scale: float = 1.0, templates=None) -> float:
    """One spectrally normalised SGD ascent step on the critic (in place)."""
    phi = state.phi
    spectral_normalize(phi, 1)
    T = model.templates(state.c.values) if templates is None else templates
    N = model.n_theta
    g = gumbel_noise((real.shape[0], N), rng)
    if noise_sigma > 0:
        T = T + noise_sigma * rng.standard_normal(T.shape)
    r = gumbel_softmax(_softmax(state.p_logits), g, config.tau)
    alpha = rng.uniform(size=real.shape[0]) if config.lambda_gp > 0 else None
    loss, gW, gb = critic_loss(phi, real, T, r, config.lambda_gp, alpha)
    lr = config.lr_phi * lr_scale
    clip = config.clip_phi
    for i in range(len(phi.weights)):
        phi.weights[i] += lr * np.clip(gW[i], -clip, clip)
        phi.biases[i] += lr * np.clip(gb[i], -clip, clip)
    return loss


def generator_step(state: TrainState, model: GeneratorModel, config: TrainConfig, rng,
                   noise_sigma: float = 0.0, lr_scale: float = 1.0, batch: int | None = None):
    """One SGD descent step on ``(c, p_logits)`` against the fixed critic."""
    B = config.batch if batch is None else batch
    g = gumbel_noise((B, model.n_theta), rng)
    noise = noise_sigma * rng.standard_normal((model.n_theta, model.m)) if noise_sigma > 0 else None
    parts, gc, gp = generator_loss(model, state.c.values, state.p_logits, state.phi, noise, g,
                                   config.tau, config.gammas)
    apply_generator_update(state, gc, gp, config, lr_scale)
    return parts


def apply_generator_update(state: TrainState, grad_c, grad_p, config: TrainConfig,
                           lr_scale: float = 1.0) -> None:
    gc = np.clip(grad_c, -config.clip_c, config.clip_c)
    state.c = HBCoefficients(state.c.values - config.lr_c * lr_scale * gc, state.c.spec)
    if config.update_p:
        n = np.linalg.norm(grad_p)
        if n > 0:
            state.p_logits = state.p_logits - config.lr_p * lr_scale * (config.p_grad_norm / n) * grad_p


@dataclass
class HistoryRow:
    iteration: int
    critic_loss: float
    gen_loss: float
    psnr: float = float("nan")
    cc: float = float("nan")
    d_tv: float = float("nan")


def train(dataset: ProjectionDataset, config: TrainConfig, spec: BasisSpec, truth=None,
          p_true=None, callback=None, state: TrainState | None = None, checkpoint=None):
    """Alternate critic and generator updates for ``config.iters`` iterations.

    Parameters
    ----------
    truth : array, optional
        Reference image; enables PSNR/CC columns in the history.
    p_true : AnglePMF, optional
        Reference PMF; enables the d_TV column.
    callback : callable, optional
        ``callback(state, row)`` after each evaluation.
    state : TrainState, optional
        Resume from this state (e.g. a loaded checkpoint).
    checkpoint : path, optional
        Written at every evaluation and at the end.

    Returns
    -------
    (c_hat, p_hat, history)
    """
    m = dataset.m
    model = GeneratorModel(spec, m, config.n_theta)
    if state is None:
        state = TrainState.initial(spec, m, config)
    sigma = float(dataset.sigma)
    L = dataset.L
    B = min(config.batch, L)
    history = []
    crit_acc, n_acc = 0.0, 0
    gen_loss = float("nan")
    while state.iteration < config.iters:
        it = state.iteration
        scale = config.lr_scale(it)
        T = model.templates(state.c.values)
        for j in range(config.disc_steps(it)):
            rng = state.rng(j + 1)
            idx = rng.choice(L, size=B, replace=False)
            crit_acc += critic_step(state, model, dataset.lines[idx], config, rng, sigma, scale, T)
            n_acc += 1
        gen_loss = generator_step(state, model, config, state.rng(0), sigma, scale, B).total
        state.iteration += 1
        done = state.iteration == config.iters
        if state.iteration % config.eval_every == 0 or done:
            row = HistoryRow(state.iteration, crit_acc / max(n_acc, 1), gen_loss)
            crit_acc, n_acc = 0.0, 0
            if truth is not None:
                sc = recovery_scores(model.render(state.c.values), state.p.probs, truth, p_true)
                row.psnr, row.cc, row.d_tv = sc["psnr"], sc["cc"], sc.get("d_tv", float("nan"))
            history.append(row)
            if checkpoint is not None:
                save_checkpoint(checkpoint, state)
            if callback is not None:
                callback(state, row)
    return state.c, state.p, history


def write_history_csv(history, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "critic_loss", "gen_loss", "psnr", "cc", "d_tv"])
        for row in history:
            w.writerow([row.iteration, repr(row.critic_loss), repr(row.gen_loss),
                        repr(row.psnr), repr(row.cc), repr(row.d_tv)])
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"UVTC"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()


def save_checkpoint(path, state: TrainState) -> None:
    """Write ``state`` atomically; the basis is identified by ``(s, R, m)``."""
    spec = state.c.spec
    phi = state.phi
    head = _MAGIC + struct.pack("<IqqdddI", _VERSION, state.iteration, state.seed,
                                spec.s, spec.R, float(spec.m), len(phi.weights))
    body = [_pack(state.c.values), _pack(state.p_logits)]
    for W, b, u, v in zip(phi.weights, phi.biases, phi.u, phi.v):
        body += [_pack(W), _pack(b), _pack(u), _pack(v)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head + b"".join(body))
    os.replace(tmp, path)


def load_checkpoint(path, spec: BasisSpec | None = None) -> TrainState:
    from .hb_basis import build_basis_spec

    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise CheckpointError("not a UVTC checkpoint")
    head = struct.calcsize("<IqqdddI")
    if len(data) < 4 + head:
        raise CheckpointError("truncated checkpoint header")
    version, it, seed, s, R, m, n_layers = struct.unpack_from("<IqqdddI", data, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 4 + head

    def take():
        nonlocal pos
        try:
            (nd,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{nd}Q", data, pos + 4)
        except struct.error as exc:
            raise CheckpointError("truncated checkpoint") from exc
        pos += 4 + 8 * nd
        n = int(np.prod(shape)) if nd else 1
        if pos + 8 * n > len(data):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(data, "<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        return arr

    if spec is None:
        spec = build_basis_spec(s, R, int(m))
    elif (spec.s, spec.R, spec.m) != (s, R, int(m)):
        raise CheckpointError("checkpoint basis does not match the requested basis")
    c = take()
    logits = take()
    W, b, u, v = [], [], [], []
    for _ in range(n_layers):
        W.append(take())
        b.append(take())
        u.append(take())
        v.append(take())
    if c.shape != (spec.size,):
        raise CheckpointError("coefficient count does not match the basis")
    phi = CriticParams(W, b, u, v)
    return TrainState(HBCoefficients(c, spec), logits, phi, int(it), int(seed))
