"""Two-phase training.

Phase 1 is ordinary GAN training.  Phase 2 rebuilds the pair from a phase-1
checkpoint, freezes the generator outright (its parameters stop requiring
gradients and are byte-compared at the end), and trains the feedback
modules with unit gain on a single unroll: the discriminator only ever sees
y1 = G(x, corrections(y0)) as fake, with y0 computed under no-grad.  The
discriminator keeps updating in both phases.

Update ratio: ``d_steps_per_g_step`` discriminator updates per generator
(or feedback) update, counted exactly.  All randomness comes from
counter-based streams keyed (seed, consumer, step), so runs are
bit-reproducible and adding a consumer never shifts the others.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import Network, tap
from .feedback import FeedbackModule, LoopConfig, compute_corrections, inject
from .checkpoint import Checkpoint
from .rng import stream

__all__ = [
    "TrainingError",
    "TrainConfig",
    "adversarial_losses",
    "gradient_penalty",
    "build_modules",
    "train_phase1",
    "train_phase2",
]

_DENSE_ONLY_KINDS = {"dense", "relu", "leaky_relu", "tanh", "sigmoid"}

_KIND_DEFAULTS = {
    # loss_kind: (lr, beta1, beta2, d_steps_per_g_step)
    "wgan_gp": (1e-4, 0.5, 0.9, 5),
    "bce": (2e-4, 0.5, 0.999, 1),
}


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    phase: int = 1
    loss_kind: str = "wgan_gp"
    gp_lambda: float = 10.0
    lr: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    batch_size: int = 128
    iterations: int = 8000
    seed: int = 0
    d_steps_per_g_step: int | None = None
    # feedback-phase knobs
    alpha_train: float = 1.0
    feedback_variant: str = "single"
    phase2_fakes_include_y0: bool = False

    def __post_init__(self):
        if self.loss_kind not in _KIND_DEFAULTS:
            raise TrainingError(f"unknown loss kind {self.loss_kind!r}")
        if self.phase not in (1, 2):
            raise TrainingError(f"phase must be 1 or 2, got {self.phase}")
        if self.batch_size < 1 or self.iterations < 1:
            raise TrainingError("batch_size and iterations must be positive")
        lr, b1, b2, dsteps = _KIND_DEFAULTS[self.loss_kind]
        if self.lr is None:
            self.lr = lr
        if self.beta1 is None:
            self.beta1 = b1
        if self.beta2 is None:
            self.beta2 = b2
        if self.d_steps_per_g_step is None:
            self.d_steps_per_g_step = dsteps
        if self.feedback_variant not in ("single", "dual"):
            raise TrainingError(f"unknown variant {self.feedback_variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# Sampler protocol: callable(n, rng) -> float64 array, leading axis n.
Sampler = Callable[[int, np.random.Generator], np.ndarray]


def adversarial_losses(kind: str, real_scores: Tensor,
                       fake_scores: Tensor) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from raw critic scores.

    bce treats scores as logits; the log-sigmoid terms are computed as
    softplus for stability.  wgan returns the critic gap (penalty is added
    separately by the caller).
    """
    if real_scores.data.shape[0] != fake_scores.data.shape[0]:
        raise TrainingError("score batches differ in size")
    if kind == "bce":
        d_loss = ad.add(ad.mean_all(ad.softplus(ad.neg(real_scores))),
                        ad.mean_all(ad.softplus(fake_scores)))
        g_loss = ad.mean_all(ad.softplus(ad.neg(fake_scores)))
        return d_loss, g_loss
    if kind == "wgan_gp":
        d_loss = ad.sub(ad.mean_all(fake_scores), ad.mean_all(real_scores))
        g_loss = ad.neg(ad.mean_all(fake_scores))
        return d_loss, g_loss
    raise TrainingError(f"unknown loss kind {kind!r}")


def _require_dense_only(net: Network) -> None:
    for layer in net.layers:
        if layer.kind not in _DENSE_ONLY_KINDS:
            raise TrainingError(
                f"{net.name}/{layer.name}: layer kind {layer.kind!r} cannot "
                f"be used under the gradient penalty (double backprop is "
                f"dense-only)")


def gradient_penalty(D: Network, real: np.ndarray, fake: np.ndarray,
                     lam: float, rng: np.random.Generator) -> Tensor:
    """WGAN-GP regularizer lam * mean((||d D/d xhat|| - 1)^2) at per-sample
    interpolates xhat = eps*real + (1-eps)*fake, eps ~ U[0,1].  The inner
    gradient is built with create_graph so the penalty trains D."""
    _require_dense_only(D)
    if real.shape != fake.shape:
        raise TrainingError(f"gradient_penalty: batch shapes differ "
                            f"({real.shape} vs {fake.shape})")
    eps = rng.uniform(size=(real.shape[0], 1))
    xhat = ad.Tensor(eps * real + (1.0 - eps) * fake, requires_grad=True,
                     name="xhat")
    scores = D.forward(xhat)
    (gx,) = ad.grad(ad.sum_all(scores), [xhat], create_graph=True)
    norms = ad.norm2_rows(gx, eps=1e-12)
    return ad.scale(ad.mean_all(ad.square(ad.add_scalar(norms, -1.0))), lam)


def _param_dicts(*nets) -> dict[str, Tensor]:
    out = {}
    for prefix, params in nets:
        for key, p in params.items():
            out[f"{prefix}/{key}"] = p
    return out


def _step(opt: ad.Adam, loss: Tensor, params: dict[str, Tensor]) -> float:
    names = sorted(params)
    gs = ad.grad(loss, [params[n] for n in names])
    opt.step({n: g.data for n, g in zip(names, gs)})
    return loss.item()


def build_modules(G: Network, D: Network, bindings: list[tuple[str, str]],
                  variant: str, seed: int, probe_input: np.ndarray,
                  alpha: float = 1.0) -> list[FeedbackModule]:
    """Construct one feedback module per (disc tap, gen tap) binding, sizing
    each from tap shapes measured on a probe forward."""
    with ad.no_grad():
        y = G.forward(ad.constant(probe_input))
        D.forward(y)
    modules = []
    for i, (d_name, g_name) in enumerate(bindings):
        d_shape = tap(D, d_name).data.shape[1:]
        g_shape = tap(G, g_name).data.shape[1:]
        modules.append(FeedbackModule(
            f"f{i}", variant, (d_name, g_name), d_shape, g_shape,
            seed=int(stream(seed, f"init/f{i}").integers(0, 2 ** 62)),
            alpha=alpha))
    return modules


def train_phase1(G: Network, D: Network, sampler: Sampler,
                 cfg: TrainConfig) -> Checkpoint:
    """Standard alternating GAN training; returns a phase-1 checkpoint with
    per-iteration loss curves."""
    if cfg.phase != 1:
        raise TrainingError("train_phase1 needs cfg.phase == 1")
    if cfg.loss_kind == "wgan_gp":
        _require_dense_only(D)
        _require_dense_only(G)
    G.set_mode("train")
    D.set_mode("train")
    opt_d = ad.Adam(dict(D.params), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_g = ad.Adam(dict(G.params), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    latent = _latent_dim(G)
    d_curve = np.zeros(cfg.iterations)
    g_curve = np.zeros(cfg.iterations)
    d_updates = 0
    for it in range(cfg.iterations):
        for k in range(cfg.d_steps_per_g_step):
            real = sampler(cfg.batch_size, stream(cfg.seed, "p1/data", d_updates))
            z = _sample_latent(cfg, "p1/noise_d", d_updates, latent)
            with ad.no_grad():
                fake = G.forward(z)
            fake = ad.constant(fake.data)
            d_loss, _ = adversarial_losses(
                cfg.loss_kind, D.forward(ad.constant(real)), D.forward(fake))
            if cfg.loss_kind == "wgan_gp":
                gp = gradient_penalty(D, real, fake.data, cfg.gp_lambda,
                                      stream(cfg.seed, "p1/gp", d_updates))
                d_loss = ad.add(d_loss, gp)
            d_curve[it] = _step(opt_d, d_loss, D.params)
            d_updates += 1
        z = _sample_latent(cfg, "p1/noise_g", it, latent)
        fake = G.forward(z)
        _, g_loss = adversarial_losses(
            cfg.loss_kind, _zero_scores(cfg.batch_size), D.forward(fake))
        g_curve[it] = _step(opt_g, g_loss, G.params)
    assert d_updates == cfg.d_steps_per_g_step * cfg.iterations
    return Checkpoint.snapshot(
        1, G, D, [],
        rng_info={"seed": cfg.seed, "iterations_completed": cfg.iterations},
        train_meta={"config": cfg.to_dict(), "d_updates": d_updates,
                    "g_updates": cfg.iterations},
        curves={"d_loss": d_curve, "g_loss": g_curve})


def _latent_dim(G: Network) -> int:
    first = G.layers[0]
    if first.kind == "dense":
        return first.in_dim
    if first.kind == "reshape":
        return int(np.prod(first.shape))
    raise TrainingError(f"cannot infer latent size from layer {first.kind!r}")


def _sample_latent(cfg: TrainConfig, label: str, index: int, dim: int) -> Tensor:
    z = stream(cfg.seed, label, index).normal(size=(cfg.batch_size, dim))
    return ad.constant(z)


def _zero_scores(n: int) -> Tensor:
    # generator-side losses never read real scores; a placeholder keeps the
    # two-sided loss signature uniform
    return ad.constant(np.zeros((n, 1)))


def _train_unroll(G: Network, D: Network, modules: list[FeedbackModule],
                  z: Tensor, alpha_train: float) -> tuple[Tensor, Tensor]:
    """One feedback unroll for phase-2 training: y0 under no-grad, taps on
    y0 through D, corrections with the training gain, regeneration.
    Returns (y1, y0)."""
    with ad.no_grad():
        y0 = G.forward(z)                       # also records phi taps
    y0c = ad.constant(y0.data)
    D.forward(y0c)                              # traced: theta path through D
    cfg = LoopConfig(iterations=1, alpha_global=alpha_train)
    corr = compute_corrections(modules, D, G, cfg)
    y1 = inject(G, corr, cfg, z, modules)
    return y1, y0c


def train_phase2(ckpt1: Checkpoint, sampler: Sampler, cfg: TrainConfig,
                 bindings: list[tuple[str, str]] | None = None) -> Checkpoint:
    """Feedback training on top of a phase-1 checkpoint.  G is frozen (and
    byte-verified at the end); feedback modules and D update."""
    if cfg.phase != 2:
        raise TrainingError("train_phase2 needs cfg.phase == 2")
    if ckpt1.phase != 1:
        raise TrainingError(f"need a phase-1 checkpoint, got phase {ckpt1.phase}")
    G, D, _ = ckpt1.build()
    g_before = {k: v.copy() for k, v in ckpt1.arrays.items()
                if k.startswith("G/")}
    if bindings is None:
        bindings = _default_bindings(G, D)
    for name in {b[0] for b in bindings}:
        if name not in D.tap_names():
            raise TrainingError(f"binding references unknown D tap {name!r}")
    for name in {b[1] for b in bindings}:
        if name not in G.tap_names():
            raise TrainingError(f"binding references unknown G tap {name!r}")

    latent = _latent_dim(G)
    probe = stream(cfg.seed, "p2/probe").normal(size=(2, latent))
    modules = build_modules(G, D, bindings, cfg.feedback_variant, cfg.seed,
                            probe, alpha=cfg.alpha_train)

    # freeze G: parameters stop requiring gradients, BN stats stay in eval
    for p in G.params.values():
        p.requires_grad = False
    G.set_mode("eval")
    D.set_mode("train")
    for m in modules:
        m.set_mode("train")

    opt_d = ad.Adam(dict(D.params), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    f_params = _param_dicts(*[(m.name, m.params) for m in modules])
    opt_f = ad.Adam(f_params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    d_curve = np.zeros(cfg.iterations)
    f_curve = np.zeros(cfg.iterations)
    d_updates = 0
    for it in range(cfg.iterations):
        for k in range(cfg.d_steps_per_g_step):
            real = sampler(cfg.batch_size, stream(cfg.seed, "p2/data", d_updates))
            z = _sample_latent(cfg, "p2/noise_d", d_updates, latent)
            with ad.no_grad():
                y1, y0 = _train_unroll(G, D, modules, z, cfg.alpha_train)
            fake_scores = D.forward(ad.constant(y1.data))
            if cfg.phase2_fakes_include_y0:
                fake_scores = ad.concat(
                    [fake_scores, D.forward(ad.constant(y0.data))], axis=0)
                real_scores = D.forward(ad.constant(
                    np.concatenate([real, real], axis=0)))
            else:
                real_scores = D.forward(ad.constant(real))
            d_loss, _ = adversarial_losses(cfg.loss_kind, real_scores,
                                           fake_scores)
            if cfg.loss_kind == "wgan_gp":
                gp = gradient_penalty(D, real, y1.data, cfg.gp_lambda,
                                      stream(cfg.seed, "p2/gp", d_updates))
                d_loss = ad.add(d_loss, gp)
            d_curve[it] = _step(opt_d, d_loss, D.params)
            d_updates += 1
        z = _sample_latent(cfg, "p2/noise_f", it, latent)
        y1, _ = _train_unroll(G, D, modules, z, cfg.alpha_train)
        _, f_loss = adversarial_losses(
            cfg.loss_kind, _zero_scores(cfg.batch_size), D.forward(y1))
        f_curve[it] = _step(opt_f, f_loss, f_params)
    assert d_updates == cfg.d_steps_per_g_step * cfg.iterations

    ckpt = Checkpoint.snapshot(
        2, G, D, modules,
        rng_info={"seed": cfg.seed, "iterations_completed": cfg.iterations,
                  "phase1": ckpt1.rng_info},
        train_meta={"config": cfg.to_dict(), "d_updates": d_updates,
                    "f_updates": cfg.iterations,
                    "phase1_meta": ckpt1.train_meta},
        curves={"d_loss": d_curve, "f_loss": f_curve,
                "phase1_d_loss": ckpt1.curve("d_loss"),
                "phase1_g_loss": ckpt1.curve("g_loss")})
    for key, before in g_before.items():
        after = ckpt.arrays[key]
        if not np.array_equal(before, after):
            raise TrainingError(f"generator drifted during phase 2: {key}")
    return ckpt


def _default_bindings(G: Network, D: Network) -> list[tuple[str, str]]:
    g_taps = G.tap_names()
    d_taps = D.tap_names()
    if len(g_taps) == 1 and len(d_taps) == 1:
        return [(d_taps[0], g_taps[0])]
    raise TrainingError("ambiguous taps; pass explicit bindings")
