"""Knowledge-distillation losses, classic and relational, plus teacher glue.

Classic losses match features point-to-point: KL divergence on class
probabilities, mean-squared error on head-averaged attention maps and on
projected FFN outputs. Relational losses replace the strict matching
with Pearson correlation per vector (per class row, per attention row,
per token feature vector): loss = 1 - rho, which is invariant to any
per-vector positive scale-and-shift of either side. That invariance is
the testable difference between the two families.

Teacher activations never carry gradients; student-side projections
(C_s -> C_t per layer) are trainable alongside the student.
"""

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

DEFAULT_EPS = 1e-8


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return ag.constant(np.asarray(x))


def _mean_over_layers(per_layer_losses):
    total = per_layer_losses[0]
    for term in per_layer_losses[1:]:
        total = ag.add(total, term)
    return ag.scale(total, 1.0 / len(per_layer_losses))


def _check_same_length(teacher, student, what):
    if len(teacher) != len(student):
        raise ContractError(
            f"{what}: teacher has {len(teacher)} layers, student {len(student)}"
        )
    if not teacher:
        raise ContractError(f"{what}: empty layer list")


# ---------------------------------------------------------------------------
# classic losses


def loss_cd_kl(yt, ys, eps: float = DEFAULT_EPS) -> Tensor:
    """KL(teacher || student) averaged over rows of probability matrices.

    (1/B) sum_i sum_j Yt log(Yt / Ys), student entries clamped to >= eps
    so a zero student probability yields a finite penalty.
    """
    yt_arr = yt.data if isinstance(yt, Tensor) else np.asarray(yt)
    ys_t = ys if isinstance(ys, Tensor) else _const(ys)
    if yt_arr.shape != ys_t.shape or yt_arr.ndim != 2:
        raise ContractError(
            f"class matrices must be equal [B, C]: {yt_arr.shape} vs {ys_t.shape}"
        )
    for name, arr in (("teacher", yt_arr), ("student", ys_t.data)):
        sums = arr.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise ContractError(
                f"{name} rows are not probability vectors (max |sum-1| = "
                f"{np.max(np.abs(sums - 1.0)):.2e})"
            )
    b = yt_arr.shape[0]
    # teacher entropy term is a constant; 0 log 0 = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_logt = np.where(yt_arr > 0.0, yt_arr * np.log(yt_arr), 0.0)
    entropy_part = float(t_logt.sum()) / b
    cross = ag.tsum(ag.mul(_const(yt_arr), ag.log(ag.clamp_min(ys_t, eps))))
    return ag.add(ag.scale(cross, -1.0 / b), entropy_part)


def _head_average(x, what) -> Tensor:
    t = _const(x)
    if t.ndim != 4:
        raise ContractError(f"{what}: expected [B, H, N, N], got {t.shape}")
    return ag.tmean(t, axis=1)


def loss_ad_mse(at_layers, as_layers) -> Tensor:
    """Mean over layers of mean-squared attention-map difference.

    Teacher and student maps are head-averaged to [B, N, N] first, so the
    two sides may use different head counts.
    """
    _check_same_length(at_layers, as_layers, "attention distillation")
    terms = []
    for l, (at, as_) in enumerate(zip(at_layers, as_layers)):
        t = _head_average(at, f"layer {l} teacher")
        s = _head_average(as_, f"layer {l} student")
        if t.shape != s.shape:
            raise ContractError(
                f"layer {l}: head-averaged maps differ: {t.shape} vs {s.shape}"
            )
        d = ag.sub(s, t)
        terms.append(ag.tmean(ag.mul(d, d)))
    return _mean_over_layers(terms)


def _project(fs, proj, c_t: int, layer: int) -> Tensor:
    s = _const(fs)
    if proj is None:
        if s.shape[-1] != c_t:
            raise ContractError(
                f"layer {layer}: student width {s.shape[-1]} != teacher "
                f"{c_t} and no projection given"
            )
        return s
    w, bias = proj
    return ag.add(ag.matmul(s, w), bias)


def loss_fd_mse(ft_layers, fs_layers, projections) -> Tensor:
    """Mean over layers of mean-squared projected-feature difference."""
    _check_same_length(ft_layers, fs_layers, "feature distillation")
    terms = []
    for l, (ft, fs) in enumerate(zip(ft_layers, fs_layers)):
        t = _const(ft)
        s = _project(fs, projections[l], t.shape[-1], l)
        if t.shape != s.shape:
            raise ContractError(
                f"layer {l}: projected features {s.shape} vs teacher {t.shape}"
            )
        d = ag.sub(s, t)
        terms.append(ag.tmean(ag.mul(d, d)))
    return _mean_over_layers(terms)


# ---------------------------------------------------------------------------
# relational losses


def _pearson_rows(u: Tensor, v: Tensor, eps: float) -> Tensor:
    """Pearson correlation along the last axis, eps-stabilized.

    Standard deviations carry +eps^2 under the square root so constant
    vectors give rho ~ 0 (loss ~ 1) instead of a division blowup; the
    distortion for non-degenerate vectors is far below 1e-6.
    """
    uc = ag.sub(u, ag.tmean(u, axis=-1, keepdims=True))
    vc = ag.sub(v, ag.tmean(v, axis=-1, keepdims=True))
    cov = ag.tmean(ag.mul(uc, vc), axis=-1)
    su = ag.sqrt(ag.add(ag.tmean(ag.mul(uc, uc), axis=-1), eps * eps))
    sv = ag.sqrt(ag.add(ag.tmean(ag.mul(vc, vc), axis=-1), eps * eps))
    return ag.div(cov, ag.add(ag.mul(su, sv), eps))


def pearson_loss(u, v, eps: float = DEFAULT_EPS) -> Tensor:
    """1 - rho(u, v) for two vectors; in [0, 2]."""
    ut, vt = _const(u), _const(v)
    if ut.ndim != 1 or vt.ndim != 1 or ut.shape != vt.shape:
        raise ContractError(
            f"pearson_loss expects equal-length vectors, got {ut.shape} and "
            f"{vt.shape}"
        )
    if ut.size < 2:
        raise ContractError("pearson_loss needs at least 2 elements")
    rho = _pearson_rows(ut, vt, eps)
    return ag.add(ag.scale(rho, -1.0), 1.0)


def loss_cd_rel(yt, ys, eps: float = DEFAULT_EPS) -> Tensor:
    """Relational class loss: mean over rows of 1 - rho(Yt_i, Ys_i)."""
    t, s = _const(yt), _const(ys)
    if t.shape != s.shape or t.ndim != 2 or t.shape[1] < 2:
        raise ContractError(
            f"relational class loss expects matching [B, C>=2]: {t.shape} vs "
            f"{s.shape}"
        )
    rho = _pearson_rows(t, s, eps)
    return ag.tmean(ag.add(ag.scale(rho, -1.0), 1.0))


def loss_ad_rel(at_layers, as_layers, eps: float = DEFAULT_EPS) -> Tensor:
    """Relational attention loss: pearson per head-averaged attention row,
    averaged over rows, tokens, batch and layers."""
    _check_same_length(at_layers, as_layers, "attention distillation")
    terms = []
    for l, (at, as_) in enumerate(zip(at_layers, as_layers)):
        t = _head_average(at, f"layer {l} teacher")
        s = _head_average(as_, f"layer {l} student")
        if t.shape != s.shape:
            raise ContractError(
                f"layer {l}: head-averaged maps differ: {t.shape} vs {s.shape}"
            )
        rho = _pearson_rows(t, s, eps)
        terms.append(ag.tmean(ag.add(ag.scale(rho, -1.0), 1.0)))
    return _mean_over_layers(terms)


def loss_fd_rel(ft_layers, fs_layers, projections,
                eps: float = DEFAULT_EPS) -> Tensor:
    """Relational feature loss: 1 - rho per token feature vector,
    averaged over tokens, batch and layers."""
    _check_same_length(ft_layers, fs_layers, "feature distillation")
    terms = []
    for l, (ft, fs) in enumerate(zip(ft_layers, fs_layers)):
        t = _const(ft)
        s = _project(fs, projections[l], t.shape[-1], l)
        if t.shape != s.shape:
            raise ContractError(
                f"layer {l}: projected features {s.shape} vs teacher {t.shape}"
            )
        if t.shape[-1] < 2:
            raise ContractError(
                f"layer {l}: feature width {t.shape[-1]} too small for "
                "correlation"
            )
        rho = _pearson_rows(t, s, eps)
        terms.append(ag.tmean(ag.add(ag.scale(rho, -1.0), 1.0)))
    return _mean_over_layers(terms)


# ---------------------------------------------------------------------------
# teacher and projections


class TeacherBundle:
    """A frozen trained model serving activation targets.

    Freezing flips requires_grad off on every parameter, which both
    guarantees the no-gradient contract and prunes the teacher's half of
    the compute graph.
    """

    def __init__(self, model):
        self.model = model
        for t in model.params.values():
            t.requires_grad = False
        self.frozen = True

    def trace(self, input_ids, causal: bool = False):
        logits, trace = self.model.forward(input_ids, causal=causal, trace=True)
        return logits, trace


def layer_map(n_teacher: int, n_student: int):
    """Student layer l -> teacher layer; identity when depths match,
    uniform striding otherwise."""
    if n_teacher < 1 or n_student < 1:
        raise ContractError("layer_map needs positive depths")
    return [((l + 1) * n_teacher) // n_student - 1 for l in range(n_student)]


def make_projections(c_student: int, c_teacher: int, n_layers: int, rng,
                     dtype=np.float32) -> dict:
    """Trainable per-layer projections C_s -> C_t, named for the optimizer."""
    params = {}
    for l in range(n_layers):
        w = rng.normal(0.0, 0.02, (c_student, c_teacher)).astype(dtype)
        params[f"kd.proj.{l}.w"] = ag.tensor(w, dtype=dtype)
        params[f"kd.proj.{l}.b"] = ag.tensor(
            np.zeros(c_teacher, dtype=dtype), dtype=dtype)
    return params


def projection_pairs(params: dict, n_layers: int):
    """View the named projection dict as the per-layer (w, b) list the
    loss functions take."""
    return [
        (params[f"kd.proj.{l}.w"], params[f"kd.proj.{l}.b"])
        for l in range(n_layers)
    ]
