"""Feedback modules and the test-time correction loop.

A feedback module reads a discriminator tap, optionally concatenated with
the matching generator tap (dual variant), and produces an additive
correction for the generator tap.  The iterative loop regenerates from the
same input with corrections computed on the previous output; a scalar gain
per module (0 deactivates, default 0.2) scales every correction.

Everything here is eval-path: pure functions of (networks, modules, input,
config), run without gradient tracking.  Training-time unrolls live in the
training module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autodiff as ad
from .autodiff import Tensor
from .nets import Network, LayerSpec, tap

__all__ = [
    "FeedbackError",
    "LoopConfig",
    "FeedbackModule",
    "feedback_forward",
    "compute_corrections",
    "inject",
    "afl_generate",
    "feedback_switch_generate",
    "ablate",
    "DEFAULT_ALPHA",
    "RECOMMENDED_ALPHA_BAND",
]

DEFAULT_ALPHA = 0.2
RECOMMENDED_ALPHA_BAND = (0.1, 0.2)


class FeedbackError(Exception):
    pass


@dataclass
class LoopConfig:
    """Test-time contract: iteration count and correction gains."""

    iterations: int = 1
    alpha_global: float = DEFAULT_ALPHA
    alpha_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 0:
            raise FeedbackError("iterations must be non-negative")
        if not 0.0 <= self.alpha_global <= 1.0:
            raise FeedbackError("alpha_global must lie in [0, 1]")

    def effective_alpha(self, module_name: str) -> float:
        a = self.alpha_overrides.get(module_name, self.alpha_global)
        return min(max(float(a), 0.0), 1.0)


class FeedbackModule:
    """Learned corrector bound to a (discriminator tap, generator tap) pair.

    The inner stack is two blocks, each a linear map followed by
    normalization, with one relu between them and nothing after the final
    normalization: conv-BN-relu-conv-BN on 4-D taps, dense-BN-relu-dense-BN
    on 2-D taps.  Output shape always equals the generator tap shape.
    """

    def __init__(self, name: str, variant: str, binding: tuple[str, str],
                 disc_shape: tuple, gen_shape: tuple, seed: int = 0,
                 alpha: float = 1.0, inner: Network | None = None):
        if variant not in ("single", "dual"):
            raise FeedbackError(f"unknown variant {variant!r}")
        if len(disc_shape) != len(gen_shape):
            raise FeedbackError(
                f"{name}: tap ranks differ ({disc_shape} vs {gen_shape})")
        if alpha < 0:
            raise FeedbackError(f"{name}: alpha must be non-negative")
        self.name = name
        self.variant = variant
        self.binding = tuple(binding)
        self.disc_shape = tuple(int(s) for s in disc_shape)   # per-sample
        self.gen_shape = tuple(int(s) for s in gen_shape)
        self.alpha = float(alpha)
        self.inner = inner if inner is not None else self._build_inner(seed)

    def _build_inner(self, seed: int) -> Network:
        if len(self.gen_shape) == 1:
            in_w = self.disc_shape[0]
            out_w = self.gen_shape[0]
            if self.variant == "dual":
                in_w += out_w
            layers = [
                LayerSpec("dense", "f1", in_dim=in_w, out_dim=out_w),
                LayerSpec("batch_norm", "n1", features=out_w),
                LayerSpec("relu", "a1"),
                LayerSpec("dense", "f2", in_dim=out_w, out_dim=out_w),
                LayerSpec("batch_norm", "n2", features=out_w),
            ]
        elif len(self.gen_shape) == 3:
            if self.disc_shape[1:] != self.gen_shape[1:]:
                raise FeedbackError(
                    f"{self.name}: spatial sizes differ "
                    f"({self.disc_shape} vs {self.gen_shape})")
            in_ch = self.disc_shape[0]
            out_ch = self.gen_shape[0]
            if self.variant == "dual":
                in_ch += out_ch
            layers = [
                LayerSpec("conv2d", "f1", in_ch=in_ch, out_ch=out_ch,
                          kernel=3, stride=1, padding=1),
                LayerSpec("batch_norm", "n1", features=out_ch),
                LayerSpec("relu", "a1"),
                LayerSpec("conv2d", "f2", in_ch=out_ch, out_ch=out_ch,
                          kernel=3, stride=1, padding=1),
                LayerSpec("batch_norm", "n2", features=out_ch),
            ]
        else:
            raise FeedbackError(
                f"{self.name}: tap rank {len(self.gen_shape) + 1} unsupported")
        return Network(self.name, layers, seed=seed)

    @property
    def mode(self) -> str:
        return self.inner.mode

    def set_mode(self, mode: str) -> None:
        self.inner.set_mode(mode)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.inner.params

    def forward(self, theta: Tensor, phi: Tensor | None = None) -> Tensor:
        if tuple(theta.data.shape[1:]) != self.disc_shape:
            raise FeedbackError(
                f"{self.name}: discriminator tap shape {theta.data.shape[1:]} "
                f"!= bound shape {self.disc_shape}")
        if self.variant == "dual":
            if phi is None:
                raise FeedbackError(f"{self.name}: dual variant needs the "
                                    f"generator tap")
            if tuple(phi.data.shape[1:]) != self.gen_shape:
                raise FeedbackError(
                    f"{self.name}: generator tap shape {phi.data.shape[1:]} "
                    f"!= bound shape {self.gen_shape}")
            x = ad.concat([theta, phi], axis=1)
        else:
            if phi is not None:
                raise FeedbackError(f"{self.name}: single variant takes no "
                                    f"generator tap")
            x = theta
        out = self.inner.forward(x)
        if tuple(out.data.shape[1:]) != self.gen_shape:
            raise FeedbackError(
                f"{self.name}: correction shape {out.data.shape[1:]} != "
                f"generator tap shape {self.gen_shape}")
        return out

    def describe(self) -> dict:
        return {
            "name": self.name,
            "variant": self.variant,
            "binding": list(self.binding),
            "disc_shape": list(self.disc_shape),
            "gen_shape": list(self.gen_shape),
            "alpha": self.alpha,
            "inner": self.inner.describe(),
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "FeedbackModule":
        inner = Network.from_descriptor(desc["inner"])
        return cls(desc["name"], desc["variant"], tuple(desc["binding"]),
                   tuple(desc["disc_shape"]), tuple(desc["gen_shape"]),
                   alpha=desc.get("alpha", 1.0), inner=inner)


def feedback_forward(f: FeedbackModule, theta: Tensor,
                     phi: Tensor | None = None) -> Tensor:
    return f.forward(theta, phi)


def _require_eval(*nets) -> None:
    for n in nets:
        if n.mode != "eval":
            raise FeedbackError(f"{n.name}: must be in eval mode for generation")


def compute_corrections(modules: list[FeedbackModule], D: Network, G: Network,
                        cfg: LoopConfig) -> dict[str, Tensor]:
    """Corrections for every active module, reading the taps recorded by the
    latest D and G forwards.  Keys are exactly the active module names."""
    out = {}
    for f in modules:
        if cfg.effective_alpha(f.name) == 0.0:
            continue
        theta = tap(D, f.binding[0])
        phi = tap(G, f.binding[1]) if f.variant == "dual" else None
        out[f.name] = f.forward(theta, phi)
    return out


def inject(G: Network, corrections: dict[str, Tensor], cfg: LoopConfig,
           x: Tensor, modules: list[FeedbackModule]) -> Tensor:
    """Generator forward with alpha-scaled corrections added at the bound
    taps.  alpha 0 (or an empty correction set with all modules inactive)
    reduces to the plain forward, bit for bit."""
    payload: dict[str, Tensor] = {}
    for f in modules:
        alpha = cfg.effective_alpha(f.name)
        if alpha == 0.0:
            continue
        if f.name not in corrections:
            raise FeedbackError(f"no correction supplied for active module "
                                f"{f.name!r}")
        scaled = ad.scale(corrections[f.name], alpha)
        gen_tap = f.binding[1]
        if gen_tap in payload:
            payload[gen_tap] = ad.add(payload[gen_tap], scaled)
        else:
            payload[gen_tap] = scaled
    if not payload:
        return G.forward(x)
    return G.forward(x, inject=payload)


def afl_generate(G: Network, D: Network, modules: list[FeedbackModule],
                 x: Tensor, cfg: LoopConfig) -> tuple[Tensor, list[Tensor]]:
    """Iterative correction loop: y_0 is the plain generation; each further
    iterate regenerates from x with corrections computed on the previous
    output.  Returns (y_T, [y_0 .. y_T])."""
    _require_eval(G, D, *[f.inner for f in modules])
    with ad.no_grad():
        y = G.forward(x)
        trace = [y]
        for _ in range(cfg.iterations):
            D.forward(y)
            corr = compute_corrections(modules, D, G, cfg)
            y = inject(G, corr, cfg, x, modules)
            trace.append(y)
    return trace[-1], trace


def feedback_switch_generate(G: Network, D: Network,
                             modules: list[FeedbackModule], x_a: Tensor,
                             reference: Tensor, cfg: LoopConfig) -> Tensor:
    """Steer generation from x_a toward a reference batch: corrections come
    from the discriminator's taps on the reference, while dual-variant
    generator taps come from G's own pass on x_a."""
    _require_eval(G, D, *[f.inner for f in modules])
    with ad.no_grad():
        y0 = G.forward(x_a)
        if reference.data.shape != y0.data.shape:
            raise FeedbackError(
                f"reference shape {reference.data.shape} != discriminator "
                f"input shape {y0.data.shape}")
        D.forward(reference)
        corr = compute_corrections(modules, D, G, cfg)
        return inject(G, corr, cfg, x_a, modules)


def ablate(modules: list[FeedbackModule], keep: str | None,
           alpha_global: float = DEFAULT_ALPHA,
           iterations: int = 1) -> LoopConfig:
    """Config that disables every module except ``keep`` (None disables
    all)."""
    names = [f.name for f in modules]
    if keep is not None and keep not in names:
        raise FeedbackError(f"ablate: unknown module {keep!r}; have {names}")
    overrides = {n: 0.0 for n in names if n != keep}
    return LoopConfig(iterations=iterations, alpha_global=alpha_global,
                      alpha_overrides=overrides)
