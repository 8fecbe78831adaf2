"""Network builders with named tap points.

A Network is an ordered stack of layers.  Layers flagged ``tap: true``
expose their activation under ``"<net>/<layer>"`` so a feedback path can
read the discriminator side and inject additive corrections on the
generator side.  Tap values are always the *pre-injection* activations:
corrections are added between a tapped layer and the next one.

The discriminator's input can itself be exposed as a tap (``input_tap``),
which is how the full-resolution pairing works: the image entering D is the
activation of its zeroth layer.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream

__all__ = [
    "NetworkError",
    "UnknownTapError",
    "LayerSpec",
    "Network",
    "SpectralNormState",
    "spectral_normalize",
    "tap",
    "build_toy_pair",
    "build_dcgan_pair",
]

_LAYER_KINDS = {
    "dense", "conv2d", "conv2d_transpose", "batch_norm", "relu",
    "leaky_relu", "tanh", "sigmoid", "reshape", "concat_channels",
    "upsample_nearest",
}

INIT_STD = 0.02
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class NetworkError(Exception):
    pass


class UnknownTapError(NetworkError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network; fields beyond ``kind``/``name``
    are meaningful only for the kinds that use them."""

    kind: str
    name: str
    tap: bool = False
    in_dim: int = 0
    out_dim: int = 0
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    features: int = 0
    slope: float = 0.2
    shape: tuple = ()
    factor: int = 2

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise NetworkError(f"unknown layer kind {self.kind!r} ({self.name})")
        if self.kind in ("conv2d", "conv2d_transpose") and self.kernel <= 0:
            raise NetworkError(f"layer {self.name}: kernel size required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["shape"] = tuple(d.get("shape", ()))
        return cls(**d)


class SpectralNormState:
    """Left singular-vector estimate for one wrapped weight."""

    def __init__(self, u: np.ndarray, n_power_iters: int = 1):
        if n_power_iters < 1:
            raise ValueError("n_power_iters must be positive")
        self.u = np.asarray(u, dtype=np.float64)
        self.n_power_iters = n_power_iters

    @classmethod
    def fresh(cls, out_dim: int, seed: int, label: str,
              n_power_iters: int = 1) -> "SpectralNormState":
        u = stream(seed, f"sn/{label}").normal(size=out_dim)
        u /= np.linalg.norm(u)
        return cls(u, n_power_iters)


def spectral_normalize(weight: Tensor, state: SpectralNormState,
                       update_state: bool = True) -> tuple[Tensor, SpectralNormState]:
    """Divide a weight by its power-iteration largest singular value.

    The weight is viewed as 2-D (out x rest).  sigma is computed through
    traced ops with the singular-vector estimates held constant, so the
    normalization is differentiable in the weight.  ``update_state=False``
    computes sigma from the stored estimate without mutating it (eval mode).
    """
    w = weight.data
    out_dim = w.shape[0]
    wmat = w.reshape(out_dim, -1)
    norm = np.linalg.norm(wmat)
    if norm == 0.0:
        raise NetworkError("spectral_normalize: zero weight matrix")
    u = state.u.copy()
    v = None
    for _ in range(state.n_power_iters):
        v = wmat.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = wmat @ v
        u /= max(np.linalg.norm(u), 1e-12)
    if update_state:
        state.u = u
    w2d = ad.reshape(weight, (out_dim, wmat.shape[1]))
    ut = ad.constant(u.reshape(1, -1))
    vt = ad.constant(v.reshape(-1, 1))
    sigma = ad.matmul(ad.matmul(ut, w2d), vt)          # (1,1) traced scalar
    sig_b = ad.broadcast_to(ad.reshape(sigma, (1,) * weight.data.ndim),
                            weight.data.shape)
    return ad.div(weight, sig_b), state


class Network:
    """Sequential layer stack with parameters, BN running stats, tap
    recording, optional spectral normalization of dense/conv weights, and
    additive injection at generator taps."""

    def __init__(self, name: str, layers: list[LayerSpec], seed: int | None = None,
                 spectral_norm: bool = False, input_tap: str | None = None,
                 sn_power_iters: int = 1):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise NetworkError(f"{name}: duplicate layer names")
        self.name = name
        self.layers = list(layers)
        self.mode = "train"
        self.spectral_norm = spectral_norm
        self.input_tap = input_tap
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, dict[str, np.ndarray]] = {}
        self.sn_states: dict[str, SpectralNormState] = {}
        self.taps: dict[str, Tensor] = {}
        if seed is not None:
            self._init_params(seed, sn_power_iters)

    # -- construction -------------------------------------------------------

    def _init_params(self, seed: int, sn_power_iters: int) -> None:
        for layer in self.layers:
            rng = stream(seed, f"init/{self.name}/{layer.name}")
            if layer.kind == "dense":
                w = rng.normal(0.0, INIT_STD, size=(layer.in_dim, layer.out_dim))
                self.params[f"{layer.name}.w"] = ad.parameter(
                    w, name=f"{self.name}/{layer.name}.w")
                self.params[f"{layer.name}.b"] = ad.parameter(
                    np.zeros(layer.out_dim), name=f"{self.name}/{layer.name}.b")
            elif layer.kind == "conv2d":
                w = rng.normal(0.0, INIT_STD,
                               size=(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
                self.params[f"{layer.name}.w"] = ad.parameter(
                    w, name=f"{self.name}/{layer.name}.w")
                self.params[f"{layer.name}.b"] = ad.parameter(
                    np.zeros(layer.out_ch), name=f"{self.name}/{layer.name}.b")
            elif layer.kind == "conv2d_transpose":
                w = rng.normal(0.0, INIT_STD,
                               size=(layer.in_ch, layer.out_ch, layer.kernel, layer.kernel))
                self.params[f"{layer.name}.w"] = ad.parameter(
                    w, name=f"{self.name}/{layer.name}.w")
                self.params[f"{layer.name}.b"] = ad.parameter(
                    np.zeros(layer.out_ch), name=f"{self.name}/{layer.name}.b")
            elif layer.kind == "batch_norm":
                self.params[f"{layer.name}.gamma"] = ad.parameter(
                    np.ones(layer.features), name=f"{self.name}/{layer.name}.gamma")
                self.params[f"{layer.name}.beta"] = ad.parameter(
                    np.zeros(layer.features), name=f"{self.name}/{layer.name}.beta")
                self.bn_stats[layer.name] = {
                    "mean": np.zeros(layer.features),
                    "var": np.ones(layer.features),
                }
                continue
            else:
                continue
            if self.spectral_norm and layer.kind in ("dense", "conv2d"):
                key = f"{layer.name}.w"
                # dense weights are stored (in, out); the 2-D view for power
                # iteration uses the leading axis, so track that size
                lead = self.params[key].data.shape[0]
                self.sn_states[key] = SpectralNormState.fresh(
                    lead, seed, f"{self.name}/{layer.name}", sn_power_iters)

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise NetworkError(f"unknown mode {mode!r}")
        self.mode = mode

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def tap_names(self) -> list[str]:
        names = []
        if self.input_tap:
            names.append(f"{self.name}/{self.input_tap}")
        names.extend(f"{self.name}/{l.name}" for l in self.layers if l.tap)
        return names

    # -- forward -------------------------------------------------------------

    def _weight(self, layer: LayerSpec) -> Tensor:
        w = self.params[f"{layer.name}.w"]
        key = f"{layer.name}.w"
        if self.spectral_norm and key in self.sn_states:
            w, _ = spectral_normalize(w, self.sn_states[key],
                                      update_state=(self.mode == "train"))
        return w

    def forward(self, x: Tensor, extra: Tensor | None = None,
                inject: dict[str, Tensor] | None = None) -> Tensor:
        """Run the stack.  ``inject`` maps tap names to already-scaled
        corrections added after the tapped layer; tap recordings are the
        activations before injection."""
        self.taps = {}
        inject = inject or {}
        used = set()
        h = x
        if self.input_tap:
            tname = f"{self.name}/{self.input_tap}"
            self.taps[tname] = h
            if tname in inject:
                h = ad.add(h, inject[tname])
                used.add(tname)
        for layer in self.layers:
            h = self._layer_forward(layer, h, extra)
            if layer.tap:
                tname = f"{self.name}/{layer.name}"
                self.taps[tname] = h
                if tname in inject:
                    corr = inject[tname]
                    if corr.data.shape != h.data.shape:
                        raise NetworkError(
                            f"injection at {tname}: correction shape "
                            f"{corr.data.shape} != activation shape {h.data.shape}")
                    h = ad.add(h, corr)
                    used.add(tname)
        unknown = set(inject) - used
        if unknown:
            raise UnknownTapError(
                f"{self.name}: injection targets {sorted(unknown)} are not taps")
        return h

    def _layer_forward(self, layer: LayerSpec, h: Tensor,
                       extra: Tensor | None) -> Tensor:
        kind = layer.kind
        if kind == "dense":
            return ad.affine(h, self._weight(layer), self.params[f"{layer.name}.b"])
        if kind == "conv2d":
            return ad.conv2d(h, self._weight(layer), self.params[f"{layer.name}.b"],
                             stride=layer.stride, padding=layer.padding)
        if kind == "conv2d_transpose":
            return ad.conv2d_transpose(h, self._weight(layer),
                                       self.params[f"{layer.name}.b"],
                                       stride=layer.stride, padding=layer.padding)
        if kind == "batch_norm":
            return self._batch_norm(layer, h)
        if kind == "relu":
            return ad.relu(h)
        if kind == "leaky_relu":
            return ad.leaky_relu(h, layer.slope)
        if kind == "tanh":
            return ad.tanh(h)
        if kind == "sigmoid":
            return ad.sigmoid(h)
        if kind == "reshape":
            batch = h.data.shape[0]
            return ad.reshape(h, (batch,) + layer.shape)
        if kind == "upsample_nearest":
            return ad.upsample_nearest(h, layer.factor)
        if kind == "concat_channels":
            if extra is None:
                raise NetworkError(
                    f"{self.name}/{layer.name}: concat_channels needs the extra input")
            return ad.concat([h, extra], axis=1)
        raise NetworkError(f"unhandled layer kind {kind!r}")

    def _batch_norm(self, layer: LayerSpec, h: Tensor) -> Tensor:
        gamma = self.params[f"{layer.name}.gamma"]
        beta = self.params[f"{layer.name}.beta"]
        stats = self.bn_stats[layer.name]
        nd = h.data.ndim
        if nd == 2:
            axes, shape = (0,), (1, layer.features)
        elif nd == 4:
            axes, shape = (0, 2, 3), (1, layer.features, 1, 1)
        else:
            raise NetworkError(f"{layer.name}: batch_norm needs 2-D or 4-D input")
        if self.mode == "train":
            mu = ad.mean_axes(h, axes, keepdims=True)
            centered = ad.sub(h, ad.broadcast_to(mu, h.data.shape))
            var = ad.mean_axes(ad.square(centered), axes, keepdims=True)
            denom = ad.sqrt(ad.add_scalar(var, BN_EPS))
            xn = ad.div(centered, ad.broadcast_to(denom, h.data.shape))
            stats["mean"] *= 1.0 - BN_MOMENTUM
            stats["mean"] += BN_MOMENTUM * mu.data.reshape(-1)
            stats["var"] *= 1.0 - BN_MOMENTUM
            stats["var"] += BN_MOMENTUM * var.data.reshape(-1)
        else:
            rmean = ad.constant(stats["mean"].reshape(shape))
            rstd = ad.constant(np.sqrt(stats["var"].reshape(shape) + BN_EPS))
            xn = ad.div(ad.sub(h, ad.broadcast_to(rmean, h.data.shape)),
                        ad.broadcast_to(rstd, h.data.shape))
        g = ad.broadcast_to(ad.reshape(gamma, shape), h.data.shape)
        b = ad.broadcast_to(ad.reshape(beta, shape), h.data.shape)
        return ad.add(ad.mul(xn, g), b)

    # -- persistence hooks ---------------------------------------------------

    def describe(self) -> dict:
        return {
            "name": self.name,
            "layers": [l.to_dict() for l in self.layers],
            "spectral_norm": self.spectral_norm,
            "input_tap": self.input_tap,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "Network":
        net = cls(desc["name"],
                  [LayerSpec.from_dict(d) for d in desc["layers"]],
                  seed=None,
                  spectral_norm=desc.get("spectral_norm", False),
                  input_tap=desc.get("input_tap"))
        return net

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array: parameters, BN stats, SN vectors."""
        out = {}
        for key in sorted(self.params):
            out[f"param/{key}"] = self.params[key].data
        for lname in sorted(self.bn_stats):
            out[f"bn/{lname}.mean"] = self.bn_stats[lname]["mean"]
            out[f"bn/{lname}.var"] = self.bn_stats[lname]["var"]
        for key in sorted(self.sn_states):
            out[f"sn/{key}.u"] = self.sn_states[key].u
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.params = {}
        self.bn_stats = {}
        self.sn_states = {}
        for full, arr in arrays.items():
            kind, key = full.split("/", 1)
            a = np.asarray(arr, dtype=np.float64)
            if kind == "param":
                self.params[key] = ad.parameter(a, name=f"{self.name}/{key}")
            elif kind == "bn":
                lname, stat = key.rsplit(".", 1)
                self.bn_stats.setdefault(lname, {})[stat] = a
            elif kind == "sn":
                self.sn_states[key[:-2]] = SpectralNormState(a)
            else:
                raise NetworkError(f"unknown state array {full!r}")

    def canonicalize_float32(self) -> None:
        """Round every persistent array to float32 precision so eval outputs
        are bit-identical before save and after load (storage is 32-bit)."""
        for p in self.params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)
        for stats in self.bn_stats.values():
            stats["mean"] = stats["mean"].astype(np.float32).astype(np.float64)
            stats["var"] = stats["var"].astype(np.float32).astype(np.float64)
        for s in self.sn_states.values():
            s.u = s.u.astype(np.float32).astype(np.float64)


def tap(net: Network, name: str) -> Tensor:
    """Read a tap activation recorded by the most recent forward."""
    if name not in net.taps:
        declared = net.tap_names()
        if name not in declared:
            raise UnknownTapError(f"{net.name}: no tap named {name!r}; "
                                  f"declared taps: {declared}")
        raise UnknownTapError(f"{net.name}: tap {name!r} not populated; "
                              f"run forward first")
    return net.taps[name]


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

def build_toy_pair(width: int = 64, seed: int = 0) -> tuple[Network, Network]:
    """2-D point generator/critic pair: four dense layers each, relu between
    hidden layers, linear outputs.  G's tap sits on the input of its last
    layer; D's tap on its first equally-sized hidden activation.  The critic
    has no batch-norm (gradient-penalty training forbids it)."""
    g_layers = [
        LayerSpec("dense", "fc1", in_dim=2, out_dim=width),
        LayerSpec("relu", "act1"),
        LayerSpec("dense", "fc2", in_dim=width, out_dim=width),
        LayerSpec("relu", "act2"),
        LayerSpec("dense", "fc3", in_dim=width, out_dim=width),
        LayerSpec("relu", "act3", tap=True),
        LayerSpec("dense", "fc4", in_dim=width, out_dim=2),
    ]
    d_layers = [
        LayerSpec("dense", "fc1", in_dim=2, out_dim=width),
        LayerSpec("relu", "act1", tap=True),
        LayerSpec("dense", "fc2", in_dim=width, out_dim=width),
        LayerSpec("relu", "act2"),
        LayerSpec("dense", "fc3", in_dim=width, out_dim=width),
        LayerSpec("relu", "act3"),
        LayerSpec("dense", "fc4", in_dim=width, out_dim=1),
    ]
    return (Network("G", g_layers, seed=seed),
            Network("D", d_layers, seed=seed))


def toy_tap_binding() -> tuple[str, str]:
    """(discriminator tap, generator tap) for the toy pair."""
    return ("D/act1", "G/act3")


def build_dcgan_pair(image_size: int = 32, base_channels: int = 64,
                     n_taps: int = 1, latent_dim: int = 128, seed: int = 0,
                     spectral_norm_d: bool = False) -> tuple[Network, Network]:
    """Standard 4/3-stage DCGAN pair with taps paired by equal activation
    shape.  n_taps=1 places the mid-resolution (8x8) pair; n_taps=4 places
    one pair per resolution level {4, 8, 16, 32} and needs image_size 32.
    The full-resolution pair binds G's pre-tanh activation to D's input."""
    if image_size not in (16, 32):
        raise NetworkError(f"image_size {image_size} unsupported (16 or 32)")
    if n_taps not in (1, 4):
        raise NetworkError(f"n_taps {n_taps} unsupported (1 or 4)")
    if n_taps == 4 and image_size != 32:
        raise NetworkError("n_taps=4 needs image_size 32 (four resolution levels)")
    if base_channels < 4 or base_channels % 4:
        raise NetworkError(f"base_channels {base_channels} must be a multiple of 4")

    stages = {16: 2, 32: 3}[image_size]          # stride-2 stages after the 4x4 seed
    # channel plan from the 4x4 seed down to RGB, halving per stage
    chans = [base_channels * (2 ** (stages - 1 - i)) for i in range(stages)] + [3]

    tap4 = n_taps == 4
    g_layers = [LayerSpec("reshape", "seed_reshape", shape=(latent_dim, 1, 1)),
                LayerSpec("conv2d_transpose", "up0", in_ch=latent_dim,
                          out_ch=chans[0], kernel=4, stride=1, padding=0),
                LayerSpec("batch_norm", "bn0", features=chans[0]),
                LayerSpec("relu", "act0", tap=tap4)]
    size = 4
    for i in range(stages):
        in_ch, out_ch = chans[i], chans[i + 1]
        last = i == stages - 1
        size *= 2
        # the pre-tanh activation doubles as the full-resolution tap
        g_layers.append(LayerSpec("conv2d_transpose", f"up{i+1}", in_ch=in_ch,
                                  out_ch=out_ch, kernel=4, stride=2, padding=1,
                                  tap=tap4 and last))
        if last:
            g_layers.append(LayerSpec("tanh", "out"))
        else:
            g_layers.append(LayerSpec("batch_norm", f"bn{i+1}", features=out_ch))
            g_layers.append(LayerSpec("relu", f"act{i+1}",
                                      tap=tap4 or (n_taps == 1 and size == 8)))

    d_layers = []
    size = image_size
    for i in range(stages):
        in_ch = 3 if i == 0 else chans[stages - i]
        out_ch = chans[stages - i - 1]
        d_layers.append(LayerSpec("conv2d", f"down{i}", in_ch=in_ch,
                                  out_ch=out_ch, kernel=4, stride=2, padding=1))
        size //= 2
        if i > 0:
            d_layers.append(LayerSpec("batch_norm", f"bn{i}", features=out_ch))
        mid = size == 8
        d_layers.append(LayerSpec("leaky_relu", f"act{i}", slope=0.2,
                                  tap=tap4 or (n_taps == 1 and mid)))
    d_layers.append(LayerSpec("conv2d", "down_out", in_ch=chans[0], out_ch=1,
                              kernel=4, stride=1, padding=0))
    d_layers.append(LayerSpec("reshape", "score", shape=(1,)))

    G = Network("G", g_layers, seed=seed)
    D = Network("D", d_layers, seed=seed, spectral_norm=spectral_norm_d,
                input_tap="image" if tap4 else None)
    return G, D


def dcgan_tap_bindings(G: Network, D: Network,
                       n_taps: int) -> list[tuple[str, str]]:
    """Equal-shape (disc tap, gen tap) pairs, smallest spatial size first."""
    g_taps = G.tap_names()               # small -> full resolution
    d_taps = D.tap_names()               # input tap first, then full -> small
    if n_taps == 1:
        return [(d_taps[0], g_taps[0])]
    d_by_size = list(reversed(d_taps))   # small -> full resolution
    return [(d, g) for g, d in zip(g_taps, d_by_size)]
