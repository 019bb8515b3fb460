"""Affine changes of basis of a network's activation and pre-activation spaces.

A NetworkReparam holds one invertible affine map per activation space
(index 0 is the input space, index i the output space of layer i) and one
per pre-activation space. Activation maps are stored in the old-to-new
direction (a' = B a + c); pre-activation maps in the new-to-old direction
(z = B z' + c). With that convention the transformed parameters are

    W' = Phi^-1 W Omega^-1,    b' = Phi^-1 (b - tau) - W' gamma

per layer (conv layers lift Omega over patch offsets, recurrent layers use
their single shared hidden-space map), the activation gets wrapped as
phi'(z) = Omega phi(Phi z + tau) + gamma, and the two networks compute the
same function: outputs agree after mapping through the last activation map.
"""

from dataclasses import dataclass

import numpy as np

from . import nets
from .errors import ShapeMismatch
from .linalg import kron, solve
from .nets import AffineWrapped, NetworkSpec, ParamSet


@dataclass
class AffineMap:
    """x -> b @ x + c with invertible b."""

    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.b.ndim != 2 or self.b.shape[0] != self.b.shape[1]:
            raise ShapeMismatch("AffineMap needs a square matrix")
        if self.c.shape != (self.b.shape[0],):
            raise ShapeMismatch("AffineMap offset length != matrix size")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @classmethod
    def identity(cls, n: int) -> "AffineMap":
        return cls(np.eye(n), np.zeros(n))

    def is_identity(self) -> bool:
        return np.array_equal(self.b, np.eye(self.dim)) and not self.c.any()

    def apply(self, x) -> np.ndarray:
        return self.b @ np.asarray(x, dtype=np.float64) + self.c

    def apply_cols(self, x) -> np.ndarray:
        return self.b @ np.asarray(x, dtype=np.float64) + self.c[:, None]

    def inverse(self) -> "AffineMap":
        binv = solve(self.b, np.eye(self.dim))
        return AffineMap(binv, -(binv @ self.c))

    def after(self, other: "AffineMap") -> "AffineMap":
        """self compose other: x -> self(other(x))."""
        return AffineMap(self.b @ other.b, self.b @ other.c + self.c)

    def homogeneous(self) -> np.ndarray:
        n = self.dim
        out = np.zeros((n + 1, n + 1))
        out[:n, :n] = self.b
        out[:n, n] = self.c
        out[n, n] = 1.0
        return out

    def lift(self, copies: int) -> "AffineMap":
        """The same map applied to each of `copies` stacked blocks."""
        if copies == 1:
            return self
        return AffineMap(kron(np.eye(copies), self.b), np.tile(self.c, copies))


@dataclass
class NetworkReparam:
    activation_maps: list  # one per activation space, input space first
    preactivation_maps: list  # one per layer

    def __post_init__(self):
        if len(self.activation_maps) != len(self.preactivation_maps) + 1:
            raise ShapeMismatch("need one more activation map than layers")

    @property
    def num_layers(self) -> int:
        return len(self.preactivation_maps)

    def inverse(self) -> "NetworkReparam":
        return NetworkReparam(
            [m.inverse() for m in self.activation_maps],
            [m.inverse() for m in self.preactivation_maps],
        )

    def in_map(self, i: int) -> AffineMap:
        return self.activation_maps[i]

    def out_map(self, i: int) -> AffineMap:
        return self.activation_maps[i + 1]

    def pre_map(self, i: int) -> AffineMap:
        return self.preactivation_maps[i]


def identity_reparam(spec: NetworkSpec) -> NetworkReparam:
    act_dims, pre_dims = space_dims(spec)
    return NetworkReparam(
        [AffineMap.identity(d) for d in act_dims],
        [AffineMap.identity(d) for d in pre_dims],
    )


def compose(s: NetworkReparam, r: NetworkReparam) -> NetworkReparam:
    """The reparam equivalent to applying r first and then s.

    Activation maps compose as s o r; pre-activation maps are stored in the
    opposite direction, so they compose as r o s.
    """
    return NetworkReparam(
        [sm.after(rm) for sm, rm in zip(s.activation_maps, r.activation_maps)],
        [rm.after(sm) for sm, rm in zip(s.preactivation_maps, r.preactivation_maps)],
    )


def space_dims(spec: NetworkSpec) -> tuple:
    """Local dimensions of the activation spaces (input first) and the
    pre-activation spaces. Conv spaces count channels, not grid cells."""
    first = spec.layers[0]
    if first.kind == "dense":
        act = [first.in_dim]
    elif first.kind == "conv2d":
        act = [first.in_channels]
    else:
        act = [first.input_dim]
    pre = []
    for layer in spec.layers:
        if layer.kind == "dense":
            act.append(layer.out_dim)
            pre.append(layer.out_dim)
        elif layer.kind == "conv2d":
            act.append(layer.out_channels)
            pre.append(layer.out_channels)
        else:
            act.append(layer.hidden_dim)
            pre.append(layer.hidden_dim)
    return act, pre


def _check_dims(spec: NetworkSpec, r: NetworkReparam) -> None:
    act, pre = space_dims(spec)
    got_act = [m.dim for m in r.activation_maps]
    got_pre = [m.dim for m in r.preactivation_maps]
    if got_act != act or got_pre != pre:
        raise ShapeMismatch(
            f"reparam dims {got_act}/{got_pre} do not match network {act}/{pre}"
        )
    if spec.layers[0].kind == "recurrent" and not r.activation_maps[0].is_identity():
        raise ShapeMismatch("sequence-input space must keep the identity map")


# ---------------------------------------------------------------------------
# parameter transforms


def _transform_wbar(wbar, in_map: AffineMap, pre_map: AffineMap) -> np.ndarray:
    """[W']_H = [Phi]_H^-1 [W]_H [Omega]_H^-1, returned without the last row."""
    n_out, n_in1 = wbar.shape
    wh = np.zeros((n_out + 1, n_in1))
    wh[:n_out] = wbar
    wh[n_out, n_in1 - 1] = 1.0
    rhs = wh @ in_map.inverse().homogeneous()
    # C-contiguous so downstream matmuls hit the same BLAS path as untouched
    # parameters; the identity transform is then bitwise inert end to end.
    return np.ascontiguousarray(solve(pre_map.homogeneous(), rhs)[:n_out])


def _layer_in_map(r: NetworkReparam, i: int, wbar) -> AffineMap:
    """Effective map on the layer's stacked input coordinates.

    Conv layers and dense layers fed by a flattened grid see several copies
    of the local activation space; the stored per-space map lifts over the
    copies. The copy count falls out of the weight shape.
    """
    local = r.in_map(i)
    copies, rem = divmod(wbar.shape[1] - 1, local.dim)
    if rem:
        raise ShapeMismatch(
            f"layer {i} input width {wbar.shape[1] - 1} is not a multiple of "
            f"the space dimension {local.dim}"
        )
    return local.lift(copies)


def transform_params(params: ParamSet, r: NetworkReparam) -> ParamSet:
    """Parameters of the equivalent network in the new bases."""
    if len(params.layers) != r.num_layers:
        raise ShapeMismatch("reparam layer count does not match params")
    out = []
    for i, lp in enumerate(params.layers):
        if lp.v is not None:
            in_map = r.out_map(i)  # recurrent: input space is the hidden space
            if in_map.dim != lp.wbar.shape[1] - 1:
                raise ShapeMismatch("hidden-space map does not fit recurrent layer")
            wbar = _transform_wbar(lp.wbar, in_map, r.pre_map(i))
            v = np.ascontiguousarray(solve(r.pre_map(i).b, lp.v))
            out.append(nets.LayerParams(wbar, v))
        else:
            in_map = _layer_in_map(r, i, lp.wbar)
            out.append(
                nets.LayerParams(_transform_wbar(lp.wbar, in_map, r.pre_map(i)))
            )
    return ParamSet(out)


def transform_params_dense(params: ParamSet, r: NetworkReparam) -> ParamSet:
    for i, lp in enumerate(params.layers):
        if lp.v is not None or r.in_map(i).dim != lp.wbar.shape[1] - 1:
            raise ShapeMismatch("transform_params_dense needs an all-dense network")
    return transform_params(params, r)


def transform_params_conv(params: ParamSet, r: NetworkReparam) -> ParamSet:
    if any(lp.v is not None for lp in params.layers):
        raise ShapeMismatch("transform_params_conv cannot handle recurrent layers")
    return transform_params(params, r)


def transform_params_rnn(params: ParamSet, r: NetworkReparam) -> ParamSet:
    if params.layers[0].v is None:
        raise ShapeMismatch("transform_params_rnn needs a leading recurrent layer")
    return transform_params(params, r)


def transform_activation(act, omega: AffineMap, phi: AffineMap):
    """Wrap an activation for new bases: phi'(z) = Omega act(Phi z + tau) + gamma.

    Wrapping an already-wrapped activation collapses into a single wrap of
    its base, so repeated transforms stay flat.
    """
    if omega.is_identity() and phi.is_identity():
        return act
    if isinstance(act, AffineWrapped):
        inner_omega = AffineMap(act.omega, act.gamma)
        inner_phi = AffineMap(act.phi, act.tau)
        new_omega = omega.after(inner_omega)
        new_phi = inner_phi.after(phi)
        return AffineWrapped(
            act.base, new_omega.b, new_omega.c, new_phi.b, new_phi.c
        )
    return AffineWrapped(act, omega.b, omega.c, phi.b, phi.c)


def transform_network(spec: NetworkSpec, params: ParamSet, r: NetworkReparam):
    """The equivalent network in the new bases: (spec, params) pair.

    Activations get wrapped, conv padding points and recurrent initial
    states get remapped, parameters transform per layer.
    """
    _check_dims(spec, r)
    new_params = transform_params(params, r)
    new_layers = []
    for i, layer in enumerate(spec.layers):
        act = transform_activation(layer.activation, r.out_map(i), r.pre_map(i))
        if layer.kind == "dense":
            new_layers.append(nets.DenseLayer(layer.in_dim, layer.out_dim, act))
        elif layer.kind == "conv2d":
            new_layers.append(
                nets.ConvLayer(
                    layer.in_channels,
                    layer.out_channels,
                    layer.kernel_radius,
                    layer.grid,
                    act,
                    padding_value=r.in_map(i).apply(layer.padding_value),
                )
            )
        else:
            new_layers.append(
                nets.RecurrentLayer(
                    layer.input_dim,
                    layer.hidden_dim,
                    layer.steps,
                    act,
                    initial_state=r.out_map(i).apply(layer.initial_state),
                )
            )
    return NetworkSpec(new_layers), new_params


def transform_input(spec: NetworkSpec, r: NetworkReparam, x) -> np.ndarray:
    """The network input expressed in the new input-space basis."""
    first = spec.layers[0]
    m = r.activation_maps[0]
    if first.kind == "dense":
        return m.apply(x)
    if first.kind == "conv2d":
        return m.apply_cols(x)
    return np.array(x, copy=True)  # sequence inputs keep their coordinates


def output_space_map(spec: NetworkSpec, r: NetworkReparam) -> AffineMap:
    """Effective map on the flattened network output (lifts conv-last grids)."""
    last = spec.layers[-1]
    m = r.activation_maps[-1]
    if last.kind == "conv2d":
        return m.lift(last.num_locations)
    return m


# ---------------------------------------------------------------------------
# generators and presets


def _random_orthogonal(n: int, rng) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(rr))


def random_reparam(
    spec: NetworkSpec,
    rng_seed: int,
    conditioning_cap: float = 100.0,
    identity_output: bool = False,
) -> NetworkReparam:
    """Random invertible maps with condition number at most conditioning_cap.

    Matrices are built as Q1 diag(s) Q2^T with singular values s drawn from
    [cap^-1/2, cap^1/2], so cap = 1 gives orthogonal maps. Deterministic per
    seed. identity_output pins the last activation-space map to the identity
    (needed whenever the output metric is not a Fisher pullback).
    """
    if conditioning_cap < 1.0:
        raise ValueError("conditioning_cap must be at least 1")
    rng = np.random.default_rng(rng_seed)
    act_dims, pre_dims = space_dims(spec)

    def rand_map(n):
        q1 = _random_orthogonal(n, rng)
        q2 = _random_orthogonal(n, rng)
        s = rng.uniform(conditioning_cap**-0.5, conditioning_cap**0.5, n)
        return AffineMap(q1 @ np.diag(s) @ q2.T, 0.5 * rng.standard_normal(n))

    act_maps = [rand_map(n) for n in act_dims]
    pre_maps = [rand_map(n) for n in pre_dims]
    if spec.layers[0].kind == "recurrent":
        act_maps[0] = AffineMap.identity(act_dims[0])
    if identity_output:
        act_maps[-1] = AffineMap.identity(act_dims[-1])
    return NetworkReparam(act_maps, pre_maps)


def logistic_to_tanh(spec: NetworkSpec) -> NetworkReparam:
    """Basis change under which wrapped logistic activations evaluate as tanh.

    Built from tanh(x) = 2 logistic(2x) - 1: every activation space maps by
    a -> 2a - 1 and every pre-activation space by z -> 2z (offsets on the
    activation side; putting them on the pre-activation side instead gives a
    different but equally valid identification). The input space keeps its
    coordinates.
    """
    act_dims, pre_dims = space_dims(spec)
    act_maps = [AffineMap.identity(act_dims[0])]
    act_maps += [AffineMap(2.0 * np.eye(n), -np.ones(n)) for n in act_dims[1:]]
    pre_maps = [AffineMap(2.0 * np.eye(n), np.zeros(n)) for n in pre_dims]
    return NetworkReparam(act_maps, pre_maps)


PRESETS = {"logistic-to-tanh": logistic_to_tanh}


# ---------------------------------------------------------------------------
# serialization


def _map_to_dict(m: AffineMap) -> dict:
    return {"B": m.b.tolist(), "c": m.c.tolist()}


def _map_from_dict(d: dict) -> AffineMap:
    return AffineMap(np.asarray(d["B"]), np.asarray(d["c"]))


def reparam_to_dict(r: NetworkReparam) -> dict:
    return {
        "activation_maps": [_map_to_dict(m) for m in r.activation_maps],
        "preactivation_maps": [_map_to_dict(m) for m in r.preactivation_maps],
    }


def reparam_from_dict(d: dict) -> NetworkReparam:
    return NetworkReparam(
        [_map_from_dict(m) for m in d["activation_maps"]],
        [_map_from_dict(m) for m in d["preactivation_maps"]],
    )
