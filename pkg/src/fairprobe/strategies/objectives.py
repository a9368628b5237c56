"""Per-batch objectives with hand-derived gradients.

Every objective takes a :class:`Batch` and a flat parameter dict and returns a
:class:`~fairprobe.numerics.GradientBundle`. Parameter names are prefixed by
head: ``probe``, ``proj``, ``domain``, ``aux_y``, ``aux_d`` and ``moe``.

Adversarial objectives are games, not single scalars: each parameter group
("player") descends its own combination of the named ``terms``.
:func:`players` spells that out, which is what the gradient tests check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, NumericError
from ..numerics import LOG_FLOOR, GradientBundle, Params, log_softmax, softmax
from ..probes import ProjectionParams, grl_backward, projection_backward, projection_hidden
from .config import StrategyConfig

TC_RIDGE = 1e-4
NORM_EPS = 1e-12


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if len(self.x) == 0:
            raise DataError("empty batch")
        if not len(self.x) == len(self.y) == len(self.d):
            raise DataError("batch arrays differ in length")

    def __len__(self) -> int:
        return len(self.x)


# -- building blocks ---------------------------------------------------------

def cross_entropy(logits: np.ndarray, target: np.ndarray, coef: np.ndarray):
    """``sum_i coef_i * CE(target_i, softmax(logits_i))`` and its logit gradient.

    ``target`` rows are distributions (one-hot for hard labels). Log terms are
    floored at log(1e-12); floored entries carry no gradient.
    """
    lsm = log_softmax(logits)
    p = np.exp(lsm)
    live = lsm > LOG_FLOOR
    t_live = target * live
    loss = float(-(coef[:, None] * target * np.where(live, lsm, LOG_FLOOR)).sum())
    dlogits = coef[:, None] * (p * t_live.sum(axis=1, keepdims=True) - t_live)
    return loss, dlogits


def _onehot(idx: np.ndarray, k: int) -> np.ndarray:
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise DataError(f"label index outside 0..{k - 1}")
    return np.eye(k)[idx]


def _linear(params: Params, prefix: str, x: np.ndarray) -> np.ndarray:
    W = params[f"{prefix}.W"]
    if x.shape[1] != W.shape[1]:
        raise DataError(f"{prefix} expects {W.shape[1]} inputs, got {x.shape[1]}")
    return x @ W.T + params[f"{prefix}.b"]


def _linear_grads(prefix: str, x: np.ndarray, dlogits: np.ndarray) -> Params:
    return {f"{prefix}.W": dlogits.T @ x, f"{prefix}.b": dlogits.sum(axis=0)}


def _add(grads: Params, new: Params) -> None:
    for k, v in new.items():
        grads[k] = grads[k] + v if k in grads else v


def mean_entropy(logits: np.ndarray):
    """Mean softmax entropy over rows and its gradient w.r.t. the logits."""
    lsm = log_softmax(logits)
    p = np.exp(lsm)
    H = -(p * lsm).sum(axis=1)
    n = len(logits)
    return float(H.mean()), -p * (lsm + H[:, None]) / n


def gaussian_total_correlation(z: np.ndarray, ridge: float = TC_RIDGE):
    """Gaussian total correlation ``0.5 * (sum_j log S_jj - log det S)``.

    ``S`` is the (1/n) batch covariance plus ``ridge * I``. Returns the value
    and ``dTC/dz``.
    """
    n, k = z.shape
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / n + ridge * np.eye(k)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericError("batch covariance is not positive definite")
    value = 0.5 * (np.log(np.diag(cov)).sum() - logdet)
    G = 0.5 * (np.diag(1.0 / np.diag(cov)) - np.linalg.inv(cov))
    return float(value), (2.0 / n) * zc @ G


def hard_conditional_mi(y_hat: np.ndarray, d_hat: np.ndarray, d: np.ndarray) -> float:
    """Plug-in estimate of I(y_hat; d_hat | d) from counts.

    Within each domain the joint table spans only the observed prediction
    values and every cell gets +1 (Laplace). A constant prediction therefore
    yields a one-row table and zero information.
    """
    total = 0.0
    n = len(d)
    for dom in np.unique(d):
        sel = d == dom
        a_vals, a = np.unique(y_hat[sel], return_inverse=True)
        b_vals, b = np.unique(d_hat[sel], return_inverse=True)
        table = np.ones((len(a_vals), len(b_vals)))
        np.add.at(table, (a, b), 1.0)
        pj = table / table.sum()
        pa = pj.sum(axis=1, keepdims=True)
        pb = pj.sum(axis=0, keepdims=True)
        mi = float((pj * np.log(pj / (pa * pb))).sum())
        total += sel.sum() / n * max(mi, 0.0)
    return total


def supervised_contrastive(z: np.ndarray, y: np.ndarray):
    """Contrastive loss over same-label pairs with cosine similarity.

    For every ordered positive pair (i, j) the term is
    ``-log(e^{s_ij} / (e^{s_ij} + sum_{k: y_k != y_i} e^{s_ik}))``; the loss
    is the mean over positive pairs (0 when the batch has none).
    """
    n = len(z)
    norm = np.sqrt((z * z).sum(axis=1) + NORM_EPS)
    u = z / norm[:, None]
    S = u @ u.T
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    npos = int(pos.sum())
    if npos == 0:
        return 0.0, np.zeros_like(z)
    E = np.exp(S)
    negsum = (E * neg).sum(axis=1)
    D = E + negsum[:, None]
    loss = float((pos * (np.log(D) - S)).sum() / npos)
    G = np.where(pos, E / D - 1.0, 0.0)
    G += neg * E * (pos / D).sum(axis=1)[:, None]
    G /= npos
    dU = (G + G.T) @ u
    dz = dU / norm[:, None] - z * ((dU * z).sum(axis=1) / norm ** 3)[:, None]
    return loss, dz


def _encode(params: Params, x: np.ndarray):
    proj = ProjectionParams.from_dict(params, "proj")
    pre = projection_hidden(proj, x)
    z = np.maximum(pre, 0.0) @ proj.W2.T + proj.b2
    return proj, pre, z


def _task_ce(logits: np.ndarray, batch: Batch, weights: np.ndarray):
    K = logits.shape[1]
    coef = weights[batch.y] / len(batch)
    return cross_entropy(logits, _onehot(batch.y, K), coef)


# -- objectives --------------------------------------------------------------

def wce_objective(batch: Batch, params: Params, weights: np.ndarray) -> GradientBundle:
    """Class-weighted cross-entropy, ``mean_i w_{y_i} * -log p_{y_i}``.

    With ``proj.*`` entries present the probe reads the projection output.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if "proj.W1" in params:
        proj, pre, z = _encode(params, batch.x)
        loss, dlog = _task_ce(_linear(params, "probe", z), batch, weights)
        grads = _linear_grads("probe", z, dlog)
        grads.update(projection_backward(proj, batch.x, pre, dlog @ params["probe.W"], "proj"))
    else:
        loss, dlog = _task_ce(_linear(params, "probe", batch.x), batch, weights)
        grads = _linear_grads("probe", batch.x, dlog)
    return GradientBundle(loss, grads, {"wce": loss})


def _domain_ce(logits: np.ndarray, d: np.ndarray):
    D = logits.shape[1]
    if d.size and d.max() >= D:
        raise DataError(f"unknown domain id {int(d.max())} for a {D}-way domain head")
    return cross_entropy(logits, _onehot(d, D), np.full(len(d), 1.0 / len(d)))


def _adversarial(batch: Batch, params: Params, weights: np.ndarray, lambda_grl: float):
    """Shared DANN core: task CE on z plus a reversed domain CE on z."""
    proj, pre, z = _encode(params, batch.x)
    wce, dlog_y = _task_ce(_linear(params, "probe", z), batch, weights)
    dom, dlog_d = _domain_ce(_linear(params, "domain", z), batch.d)
    grads = _linear_grads("probe", z, dlog_y)
    grads.update(_linear_grads("domain", z, dlog_d))
    dz = dlog_y @ params["probe.W"]
    if lambda_grl:
        dz = dz + grl_backward(dlog_d @ params["domain.W"], lambda_grl)
    return proj, pre, z, dz, grads, {"wce": wce, "domain": dom}


def dann_objective(batch: Batch, params: Params, weights: np.ndarray,
                   lambda_grl: float = 1.0) -> GradientBundle:
    """Domain-adversarial training through a gradient-reversal connector.

    The domain head minimises its cross-entropy; the projection receives that
    gradient multiplied by ``-lambda_grl``. The reported loss is the sum of
    both cross-entropies.
    """
    weights = np.asarray(weights, dtype=np.float64)
    proj, pre, _, dz, grads, terms = _adversarial(batch, params, weights, lambda_grl)
    grads.update(projection_backward(proj, batch.x, pre, dz, "proj"))
    return GradientBundle(terms["wce"] + terms["domain"], grads, terms)


def fairdisco_objective(batch: Batch, params: Params, weights: np.ndarray,
                        lambda_grl: float = 1.0, alpha: float = 1.0, beta: float = 1.0,
                        conf_target: str = "domain_head") -> GradientBundle:
    """DANN plus a confusion term and a supervised contrastive term on z.

    The confusion term is the cross-entropy of a head's output against the
    uniform distribution. By default it is the domain head's output and only
    the projection descends it; ``conf_target="task_head"`` applies it to the
    task probe instead (probe and projection descend it).
    """
    weights = np.asarray(weights, dtype=np.float64)
    proj, pre, z, dz, grads, terms = _adversarial(batch, params, weights, lambda_grl)
    loss = terms["wce"] + terms["domain"]
    n = len(batch)
    if alpha:
        head = "domain" if conf_target == "domain_head" else "probe"
        logits = _linear(params, head, z)
        uniform = np.full_like(logits, 1.0 / logits.shape[1])
        conf, dlog = cross_entropy(logits, uniform, np.full(n, 1.0 / n))
        dz = dz + alpha * (dlog @ params[f"{head}.W"])
        if head == "probe":
            _add(grads, {k: alpha * v for k, v in _linear_grads("probe", z, dlog).items()})
        terms["conf"] = conf
        loss += alpha * conf
    if beta:
        contr, dz_c = supervised_contrastive(z, batch.y)
        dz = dz + beta * dz_c
        terms["contr"] = contr
        loss += beta * contr
    grads.update(projection_backward(proj, batch.x, pre, dz, "proj"))
    return GradientBundle(loss, grads, terms)


def fades_objective(batch: Batch, params: Params, weights: np.ndarray,
                    lambda_grl: float = 1.0, tc_weight: float = 1.0,
                    cmi_weight: float = 1.0, reg_weight: float = 1.0) -> GradientBundle:
    """Disentangled adversarial objective over z = [z_task | z_domain | z_rest].

    The task probe reads z_task, the domain head reads z_domain behind the
    gradient reversal, total correlation is taken over all of z, and the
    hard-prediction CMI is a monitored term without gradient. Two auxiliary
    heads learn to predict label and domain from z_rest; the projection
    maximises their entropy (``reg`` is minus that entropy).
    """
    weights = np.asarray(weights, dtype=np.float64)
    proj, pre, z = _encode(params, batch.x)
    zb = z.shape[1] // 3
    if z.shape[1] % 3:
        raise NumericError("z_dim must be divisible by 3")
    n = len(batch)
    if n < zb + 2:
        raise NumericError(f"batch of {n} too small for a {z.shape[1]}-dim covariance block")
    z_y, z_d, z_r = z[:, :zb], z[:, zb:2 * zb], z[:, 2 * zb:]
    dz = np.zeros_like(z)

    logit_y = _linear(params, "probe", z_y)
    wce, dlog_y = _task_ce(logit_y, batch, weights)
    grads = _linear_grads("probe", z_y, dlog_y)
    dz[:, :zb] += dlog_y @ params["probe.W"]

    logit_d = _linear(params, "domain", z_d)
    dom, dlog_d = _domain_ce(logit_d, batch.d)
    grads.update(_linear_grads("domain", z_d, dlog_d))
    if lambda_grl:
        dz[:, zb:2 * zb] += grl_backward(dlog_d @ params["domain.W"], lambda_grl)

    tc, dz_tc = gaussian_total_correlation(z)
    if tc_weight:
        dz += tc_weight * dz_tc

    cmi = hard_conditional_mi(np.argmax(logit_y, axis=1), np.argmax(logit_d, axis=1), batch.d)

    aux_y = _linear(params, "aux_y", z_r)
    aux_d = _linear(params, "aux_d", z_r)
    h_y, dh_y = mean_entropy(aux_y)
    h_d, dh_d = mean_entropy(aux_d)
    reg = -(h_y + h_d)
    if reg_weight:
        dz[:, 2 * zb:] += -reg_weight * (dh_y @ params["aux_y.W"] + dh_d @ params["aux_d.W"])

    # auxiliary heads: the adversaries that keep z_rest honest
    ce_y, dax_y = cross_entropy(aux_y, _onehot(batch.y, aux_y.shape[1]), np.full(n, 1.0 / n))
    ce_d, dax_d = cross_entropy(aux_d, _onehot(batch.d, aux_d.shape[1]), np.full(n, 1.0 / n))
    grads.update(_linear_grads("aux_y", z_r, dax_y))
    grads.update(_linear_grads("aux_d", z_r, dax_d))

    grads.update(projection_backward(proj, batch.x, pre, dz, "proj"))
    terms = {"wce": wce, "domain": dom, "tc": tc, "cmi": cmi, "reg": reg, "aux_ce": ce_y + ce_d}
    loss = wce + dom + tc_weight * tc + cmi_weight * cmi + reg_weight * reg
    return GradientBundle(loss, grads, terms)


def groupdro_step(per_domain_losses: np.ndarray, q: np.ndarray, eta_q: float):
    """Exponentiated-gradient ascent on the group weights.

    Returns ``(q_new, sum_d q_new[d] * loss[d])``.
    """
    losses = np.asarray(per_domain_losses, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite group loss")
    if abs(q.sum() - 1.0) > 1e-9 or np.any(q < 0):
        raise NumericError("q must lie on the probability simplex")
    expo = eta_q * losses
    q_new = q * np.exp(expo - expo.max())
    q_new /= q_new.sum()
    return q_new, float(q_new @ losses)


def groupdro_objective(batch: Batch, params: Params, weights: np.ndarray, q: np.ndarray,
                       eta_q: float = 0.1) -> GradientBundle:
    """Worst-group reweighting of per-domain class-weighted CE.

    ``q`` is updated from this batch's group losses first; the gradient then
    uses the updated weights as constants. The new weights are returned in
    ``state["q"]``. Domains absent from the batch contribute zero loss.
    """
    weights = np.asarray(weights, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    D = len(q)
    if batch.d.max() >= D:
        raise DataError(f"unknown domain id {int(batch.d.max())}")
    logits = _linear(params, "probe", batch.x)
    K = logits.shape[1]
    counts = np.bincount(batch.d, minlength=D).astype(np.float64)
    per_sample = weights[batch.y] / counts[batch.d]
    target = _onehot(batch.y, K)
    group_losses = np.zeros(D)
    for g in range(D):
        sel = batch.d == g
        if sel.any():
            group_losses[g], _ = cross_entropy(logits[sel], target[sel], per_sample[sel])
    q_new, loss = groupdro_step(group_losses, q, eta_q)
    _, dlog = cross_entropy(logits, target, q_new[batch.d] * per_sample)
    grads = _linear_grads("probe", batch.x, dlog)
    terms = {"dro": loss, "worst_group": float(group_losses.max())}
    return GradientBundle(loss, grads, terms, {"q": q_new, "group_losses": group_losses})


def moe_objective(batch: Batch, params: Params, weights: np.ndarray,
                  warmup: bool = False) -> GradientBundle:
    """Class-weighted CE of the gated expert mixture.

    During warmup the gate is also fitted to the true domain (expert ``e``
    is the specialist of domain ``e``).
    """
    weights = np.asarray(weights, dtype=np.float64)
    x, y = batch.x, batch.y
    n = len(batch)
    gate_logits = _linear(params, "moe.gate", x)
    E = gate_logits.shape[1]
    if E < 2:
        raise DataError("mixture needs at least 2 experts")
    alpha = softmax(gate_logits)
    expert_logits = [_linear(params, f"moe.expert{e}", x) for e in range(E)]
    expert_p = np.stack([softmax(l) for l in expert_logits], axis=1)  # n x E x K
    rows = np.arange(n)
    p_true_e = expert_p[rows, :, y]          # n x E
    p_true = (alpha * p_true_e).sum(axis=1)  # n
    live = p_true > math.exp(LOG_FLOOR)
    w = weights[y]
    mixture = float((w * -np.log(np.maximum(p_true, math.exp(LOG_FLOOR)))).mean())
    g = np.where(live, -w / (n * np.where(live, p_true, 1.0)), 0.0)  # dL/dp_true

    K = expert_p.shape[2]
    onehot = _onehot(y, K)
    grads: Params = {}
    for e in range(E):
        coef = g * alpha[:, e] * p_true_e[:, e]
        dlog = coef[:, None] * (onehot - expert_p[:, e, :])
        grads.update(_linear_grads(f"moe.expert{e}", x, dlog))
    d_alpha = g[:, None] * p_true_e
    d_gate = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
    terms = {"mixture": mixture}
    loss = mixture
    if warmup:
        gate_ce, dlog_gate = _domain_ce(gate_logits, batch.d)
        d_gate = d_gate + dlog_gate
        terms["gate"] = gate_ce
        loss += gate_ce
    grads.update(_linear_grads("moe.gate", x, d_gate))
    return GradientBundle(loss, grads, terms, {"alpha": alpha})


ADVERSARIES = {"dann": ("domain",), "fairdisco": ("domain",), "fades": ("domain", "aux_y", "aux_d")}


def adversary_objective(config: StrategyConfig, batch: Batch, params: Params,
                        z: np.ndarray | None = None) -> GradientBundle:
    """Cross-entropy of the adversarial heads alone, with the encoder held fixed.

    Used for the extra head-only steps taken before each encoder step. Pass a
    precomputed ``z`` to reuse one encoding across several steps.
    """
    s = config.strategy
    if s not in ADVERSARIES:
        raise ValueError(f"{s} has no adversarial heads")
    if z is None:
        z = _encode(params, batch.x)[2]
    if s != "fades":
        dom, dlog = _domain_ce(_linear(params, "domain", z), batch.d)
        return GradientBundle(dom, _linear_grads("domain", z, dlog), {"domain": dom})
    zb = z.shape[1] // 3
    z_d, z_r = z[:, zb:2 * zb], z[:, 2 * zb:]
    n = len(batch)
    dom, dlog = _domain_ce(_linear(params, "domain", z_d), batch.d)
    grads = _linear_grads("domain", z_d, dlog)
    aux_ce = 0.0
    for head, target in (("aux_y", batch.y), ("aux_d", batch.d)):
        logits = _linear(params, head, z_r)
        ce, dl = cross_entropy(logits, _onehot(target, logits.shape[1]), np.full(n, 1.0 / n))
        grads.update(_linear_grads(head, z_r, dl))
        aux_ce += ce
    return GradientBundle(dom + aux_ce, grads, {"domain": dom, "aux_ce": aux_ce})


def encode(params: Params, x: np.ndarray) -> np.ndarray:
    return _encode(params, np.asarray(x, dtype=np.float64))[2]


# -- dispatch ----------------------------------------------------------------

def players(config: StrategyConfig) -> list[tuple[tuple[str, ...], dict[str, float]]]:
    """Which parameter prefixes descend which weighted sum of ``terms``."""
    s = config.strategy
    lam = config.lambda_grl
    if s == "wce":
        return [(("probe",), {"wce": 1.0})]
    if s == "dann":
        return [(("probe", "proj"), {"wce": 1.0, "domain": -lam}), (("domain",), {"domain": 1.0})]
    if s == "fairdisco":
        enc = {"wce": 1.0, "domain": -lam, "conf": config.alpha, "contr": config.beta}
        return [(("probe", "proj"), enc), (("domain",), {"domain": 1.0})]
    if s == "fades":
        enc = {"wce": 1.0, "domain": -lam, "tc": config.tc_weight, "reg": config.reg_weight}
        return [(("probe", "proj"), enc), (("domain",), {"domain": 1.0}),
                (("aux_y", "aux_d"), {"aux_ce": 1.0})]
    if s == "groupdro":
        return [(("probe",), {"dro": 1.0})]
    if s == "moe":
        return [(("moe",), {"mixture": 1.0, "gate": 1.0})]
    raise ValueError(s)


def evaluate_objective(config: StrategyConfig, batch: Batch, params: Params,
                       weights: np.ndarray, *, q: np.ndarray | None = None,
                       warmup: bool = False) -> GradientBundle:
    s = config.strategy
    if s == "wce":
        return wce_objective(batch, params, weights)
    if s == "dann":
        return dann_objective(batch, params, weights, config.lambda_grl)
    if s == "fairdisco":
        return fairdisco_objective(batch, params, weights, config.lambda_grl, config.alpha,
                                   config.beta, config.conf_target)
    if s == "fades":
        return fades_objective(batch, params, weights, config.lambda_grl, config.tc_weight,
                               config.cmi_weight, config.reg_weight)
    if s == "groupdro":
        return groupdro_objective(batch, params, weights, q, config.eta_q)
    if s == "moe":
        return moe_objective(batch, params, weights, warmup)
    raise ValueError(s)
