"""Kronecker-factored approximation of the pulled-back output metric.

Per layer the approximation is scale * (A ox G): A is the second moment of
homogenized layer inputs, G the second moment of pre-activation cotangents,
and scale is 1 for dense layers, the number of spatial locations for conv
layers, and the number of time steps for recurrent layers. Expectations over
targets are exact (contraction of per-output-coordinate backward passes
against the closed-form output metric); expectations over inputs are plain
averages over the dataset, so every estimator here is deterministic.

All three estimators funnel through one per-location accumulator, which is
what makes the degenerate reductions (1x1 conv grid with radius 0, one-step
recurrence) reproduce the dense factors bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SingularFactor, SingularMatrix, TooLarge, UnsupportedLayer
from .linalg import kron, solve, unvec, vec
from .metrics import FisherMetric, basis_backpasses
from .nets import LayerParams, ParamSet, backward, forward, unflatten_params

ASSEMBLY_CAP = 5000


@dataclass
class KroneckerFactor:
    layer_index: int
    a: np.ndarray  # (n_in+1) x (n_in+1), homogenized input second moment
    g: np.ndarray  # n_out x n_out, pre-activation cotangent second moment
    scale: float


@dataclass
class KFacMetric:
    factors: list


@dataclass
class UpdateConfig:
    learning_rate: float
    damping: float = 0.0
    damping_mode: str = "none"

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError("learning_rate must be finite and non-negative")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.damping_mode not in ("none", "dense_tikhonov", "factored"):
            raise ValueError(f"unknown damping_mode {self.damping_mode!r}")
        if self.damping > 0 and self.damping_mode == "none":
            raise ValueError("damping > 0 needs a damping_mode")


# ---------------------------------------------------------------------------
# factor estimation


def _inputs_of(dataset):
    return dataset.inputs if hasattr(dataset, "inputs") else dataset


def _accumulate_layer(a_acc, g_acc, abar, dz_stack, m):
    """Add one sample's contribution, averaged over locations/steps.

    abar: homogenized input columns, one per location ((n+1) x T);
    dz_stack: cotangents of the activation input for each output coordinate
    (K x n_out x T); m: output metric matrix (K x K).
    """
    t = abar.shape[1]
    a_loc = np.zeros_like(a_acc)
    g_loc = np.zeros_like(g_acc)
    for ti in range(t):
        col = abar[:, ti].reshape(-1, 1)
        a_loc += col @ col.T
        c = dz_stack[:, :, ti].T
        g_loc += c @ m @ c.T
    a_acc += a_loc / t
    g_acc += g_loc / t


def estimate_factors(spec, params, model, dataset, metric=None) -> KFacMetric:
    """Kronecker factors for every layer of the network.

    The G factor contracts the per-output-coordinate backward passes against
    the output metric matrix, i.e. G_i = E_x[C_i M C_i^T] with C_i the
    Jacobian from layer i's pre-activations to the output. With the Fisher
    metric this is the exact E_x E_y[Dz Dz^T].
    """
    if metric is None:
        metric = FisherMetric()
    inputs = _inputs_of(dataset)
    if not len(inputs):
        raise ValueError("factor estimation needs a nonempty dataset")
    shapes = [
        (lp.wbar.shape[1], lp.wbar.shape[0]) for lp in params.layers
    ]  # (n_in+1, n_out)
    a_accs = [np.zeros((n_in, n_in)) for n_in, _ in shapes]
    g_accs = [np.zeros((n_out, n_out)) for _, n_out in shapes]
    for x in inputs:
        trace = forward(spec, params, x)
        passes = basis_backpasses(trace)
        m = metric.matrix(model, trace.output)
        for i in range(len(spec.layers)):
            dz_stack = np.stack([bt.layers[i].dz for bt in passes])
            _accumulate_layer(a_accs[i], g_accs[i], trace.layers[i].abar, dz_stack, m)
    n = len(inputs)
    factors = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            scale = 1.0
        elif layer.kind == "conv2d":
            scale = float(layer.num_locations)
        else:
            scale = float(layer.steps)
        factors.append(KroneckerFactor(i, a_accs[i] / n, g_accs[i] / n, scale))
    return KFacMetric(factors)


def estimate_factors_dense(spec, params, model, dataset, metric=None) -> KFacMetric:
    for layer in spec.layers:
        if layer.kind != "dense":
            raise UnsupportedLayer(f"dense estimator got a {layer.kind} layer")
    return estimate_factors(spec, params, model, dataset, metric)


def estimate_factors_conv(spec, params, model, dataset, metric=None) -> KFacMetric:
    kinds = {layer.kind for layer in spec.layers}
    if "conv2d" not in kinds:
        raise UnsupportedLayer("conv estimator needs at least one conv layer")
    if "recurrent" in kinds:
        raise UnsupportedLayer("conv estimator cannot handle recurrent layers")
    return estimate_factors(spec, params, model, dataset, metric)


def estimate_factors_rnn(spec, params, model, dataset, metric=None) -> KFacMetric:
    if spec.layers[0].kind != "recurrent":
        raise UnsupportedLayer("rnn estimator needs a leading recurrent layer")
    return estimate_factors(spec, params, model, dataset, metric)


# ---------------------------------------------------------------------------
# assembly and inverse application


def assemble_dense(metric: KFacMetric) -> np.ndarray:
    """Block-diagonal dense form: block i = scale_i * (A_i ox G_i)."""
    dims = [f.a.shape[0] * f.g.shape[0] for f in metric.factors]
    total = sum(dims)
    if total > ASSEMBLY_CAP:
        raise TooLarge(f"assembled dimension {total} exceeds {ASSEMBLY_CAP}")
    out = np.zeros((total, total))
    pos = 0
    for f, d in zip(metric.factors, dims):
        out[pos : pos + d, pos : pos + d] = f.scale * kron(f.a, f.g)
        pos += d
    return out


def _factor_solve(factor: KroneckerFactor, grad_wbar, config: UpdateConfig):
    lam = config.damping
    if config.damping_mode == "dense_tikhonov" and lam > 0:
        block = factor.scale * kron(factor.a, factor.g)
        block[np.diag_indices_from(block)] += lam
        x = solve(block, vec(grad_wbar))
        return unvec(x, *grad_wbar.shape)
    if config.damping_mode == "factored" and lam > 0:
        a = factor.a + np.sqrt(lam) * np.eye(factor.a.shape[0])
        g = factor.g + np.sqrt(lam) * np.eye(factor.g.shape[0])
    else:
        a, g = factor.a, factor.g
    try:
        left = solve(g, grad_wbar)
        right = solve(a, left.T).T
    except SingularMatrix as exc:
        raise SingularFactor(
            f"layer {factor.layer_index} factor is singular: {exc}"
        ) from exc
    return right / factor.scale


def apply_inverse(metric: KFacMetric, grad: ParamSet, config: UpdateConfig) -> ParamSet:
    """Per layer (1/scale) G^-1 grad_Wbar A^-1; V entries carry no factors and
    come back as None (callers decide what, if anything, to do with them)."""
    out = []
    for factor, lp in zip(metric.factors, grad.layers):
        out.append(LayerParams(_factor_solve(factor, lp.wbar, config), None))
    return ParamSet(out)


# ---------------------------------------------------------------------------
# objective and update rules


def objective_and_gradient(spec, params, model, dataset):
    """Empirical risk (mean loss) and its gradient as a ParamSet."""
    total = 0.0
    grad = None
    n = len(dataset.inputs)
    for x, y in zip(dataset.inputs, dataset.targets):
        trace = forward(spec, params, x)
        total += model.loss(y, trace.output)
        bt = backward(trace, model.loss_grad(y, trace.output))
        grad = bt.grad if grad is None else grad.add_scaled(bt.grad, 1.0)
    scale = 1.0 / n
    grad = ParamSet(
        [
            LayerParams(lp.wbar * scale, None if lp.v is None else lp.v * scale)
            for lp in grad.layers
        ]
    )
    return total / n, grad


def kfac_step(spec, params, model, dataset, metric, config: UpdateConfig) -> ParamSet:
    """One preconditioned step on the factored parameters.

    Only weights that own Kronecker factors move (every layer's homogenized
    W); a recurrent layer's input map V has no factors and stays fixed.
    """
    factors = estimate_factors(spec, params, model, dataset, metric)
    _, grad = objective_and_gradient(spec, params, model, dataset)
    delta = apply_inverse(factors, grad, config)
    return params.add_scaled(delta, -config.learning_rate)


def ngd_step(spec, params, model, dataset, metric, config: UpdateConfig) -> ParamSet:
    """Exact natural gradient step using the dense Fisher oracle."""
    from .metrics import exact_fisher  # local import keeps module load order simple

    del metric  # the exact step always uses the model's own Fisher
    fisher = exact_fisher(spec, params, model, dataset.inputs).matrix
    if config.damping > 0:
        fisher = fisher + config.damping * np.eye(fisher.shape[0])
    _, grad = objective_and_gradient(spec, params, model, dataset)
    step = solve(fisher, grad.flatten())
    return unflatten_params(spec, params.flatten() - config.learning_rate * step)


def sgd_step(spec, params, model, dataset, metric, config: UpdateConfig) -> ParamSet:
    """Plain gradient descent; the non-invariant control."""
    del metric
    _, grad = objective_and_gradient(spec, params, model, dataset)
    return params.add_scaled(grad, -config.learning_rate)


# ---------------------------------------------------------------------------
# factor dump


def _json_number(x: float) -> str:
    return format(float(x), ".17g")


def _json_matrix(m) -> str:
    rows = []
    for row in np.asarray(m):
        rows.append("[" + ", ".join(_json_number(v) for v in row) + "]")
    return "[" + ", ".join(rows) + "]"


def factors_to_json(metric: KFacMetric) -> str:
    """JSON dump of all factors, floats at 17 significant digits."""
    blocks = []
    for f in metric.factors:
        blocks.append(
            "{"
            + f'"layer_index": {f.layer_index}, '
            + f'"scale": {_json_number(f.scale)}, '
            + f'"A": {_json_matrix(f.a)}, '
            + f'"G": {_json_matrix(f.g)}'
            + "}"
        )
    return "[\n  " + ",\n  ".join(blocks) + "\n]\n"
