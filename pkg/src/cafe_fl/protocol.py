"""Federated round machinery: local training, aggregation, SWA and the baselines.

Methods
-------
``cafe``       SAM local steps on ``alpha * CE + (1 - alpha) * lambda_correct / N_correct``,
               sharpness-aware aggregation weights, server-side SWA.
``fedavg``     SGD, data-size weights.
``fedsam``     SAM, data-size weights.
``fedswa``     SAM, data-size weights, SWA.
``kd_fedavg``  FedAvg for a warm-up period, then local distillation from the
               received global model.

The ``optimizer``, ``aggregation`` and ``use_swa`` fields of
:class:`MethodConfig` override the per-method defaults, which is how ablations
(and the FedAvg reduction check) are expressed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import curvature, metrics, nn
from .errors import ConfigError, ConvergenceError, InputError, NumericError
from .optim import LrSchedule, lr_at_round, sam_step, sgd_step

log = logging.getLogger(__name__)

METHODS = ("cafe", "fedavg", "fedsam", "fedswa", "kd_fedavg")
_DEFAULTS = {
    # method: (optimizer, aggregation, swa)
    "cafe": ("sam", "sharpness", True),
    "fedavg": ("sgd", "data_size", False),
    "fedsam": ("sam", "data_size", False),
    "fedswa": ("sam", "data_size", True),
    "kd_fedavg": ("sgd", "data_size", False),
}
LOSS_FLOOR = 1e-8
MAX_EMPTY_DRAWS = 100


@dataclass(frozen=True)
class MethodConfig:
    method: str = "cafe"
    alpha: float = 0.92
    epsilon: float = 0.005
    cycle: int = 5
    swa_start_fraction: float = 0.2
    epochs: int = 3
    batch_size: int = 32
    total_rounds: int = 80
    base_lr: float = 0.01
    swa_lr: float = 0.001
    rho: float = 0.05
    kd_warmup_fraction: float = 0.2
    kd_temperature: float = 2.0
    kd_mix: float = 0.5
    eig_tol: float = 1e-6
    eig_max_iter: int = 5000
    hvp_h: float = 1e-4
    optimizer: str | None = None
    aggregation: str | None = None
    use_swa: bool | None = None

    def problems(self) -> list[str]:
        out = []
        if self.method not in METHODS:
            out.append(f"method: must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            out.append(f"alpha: must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            out.append(f"epsilon: must be > 0, got {self.epsilon}")
        if self.cycle < 1:
            out.append(f"cycle: must be >= 1, got {self.cycle}")
        if not 0.0 <= self.swa_start_fraction <= 1.0:
            out.append(f"swa_start_fraction: must lie in [0, 1], got {self.swa_start_fraction}")
        if self.epochs < 0:
            out.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.total_rounds < 0:
            out.append(f"total_rounds: must be >= 0, got {self.total_rounds}")
        for name in ("base_lr", "swa_lr", "kd_temperature", "eig_tol", "hvp_h"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be > 0, got {getattr(self, name)}")
        if not self.rho >= 0:
            out.append(f"rho: must be >= 0, got {self.rho}")
        if not 0.0 <= self.kd_mix <= 1.0:
            out.append(f"kd_mix: must lie in [0, 1], got {self.kd_mix}")
        if not 0.0 <= self.kd_warmup_fraction <= 1.0:
            out.append(f"kd_warmup_fraction: must lie in [0, 1], got {self.kd_warmup_fraction}")
        if self.eig_max_iter < 1:
            out.append(f"eig_max_iter: must be >= 1, got {self.eig_max_iter}")
        if self.optimizer not in (None, "sgd", "sam"):
            out.append(f"optimizer: must be 'sgd' or 'sam', got {self.optimizer!r}")
        if self.aggregation not in (None, "sharpness", "data_size", "uniform"):
            out.append(f"aggregation: must be 'sharpness', 'data_size' or 'uniform', got {self.aggregation!r}")
        return out

    def validate(self) -> "MethodConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def resolved_optimizer(self) -> str:
        return self.optimizer or _DEFAULTS[self.method][0]

    @property
    def resolved_aggregation(self) -> str:
        return self.aggregation or _DEFAULTS[self.method][1]

    @property
    def swa_enabled(self) -> bool:
        return _DEFAULTS[self.method][2] if self.use_swa is None else self.use_swa

    @property
    def penalty_enabled(self) -> bool:
        return self.method == "cafe" and self.alpha < 1.0

    @property
    def swa_start_round(self) -> int:
        return int(round(self.swa_start_fraction * self.total_rounds))

    @property
    def kd_warmup_rounds(self) -> int:
        return int(round(self.kd_warmup_fraction * self.total_rounds))

    def schedule(self) -> LrSchedule:
        if self.swa_enabled:
            return LrSchedule(self.base_lr, self.swa_lr, self.swa_start_round, self.total_rounds)
        return LrSchedule(self.base_lr, self.base_lr, self.total_rounds, self.total_rounds)


@dataclass(frozen=True)
class ClientState:
    id: int
    train_data: nn.Batch
    eval_data: nn.Batch
    rng_seed: int = 0

    @property
    def n_train(self) -> int:
        return len(self.train_data)


@dataclass(frozen=True)
class TrainReturn:
    params: np.ndarray
    eval_loss: float
    eval_lambda: float
    best_epoch: int = -1


@dataclass(frozen=True)
class ClientRoundInfo:
    id: int
    eval_loss: float
    eval_lambda: float
    weight: float


@dataclass
class RoundReport:
    round: int
    lr: float
    swa_active: bool
    clients: list[ClientRoundInfo]
    global_eval: metrics.MetricsReport | None = None
    group_lambdas: dict[int, float] = field(default_factory=dict)
    group_lambda_gap: float = float("nan")
    global_loss: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "lr": self.lr,
            "swa_active": self.swa_active,
            "clients": [
                {"id": c.id, "eval_loss": c.eval_loss, "eval_lambda": c.eval_lambda, "weight": c.weight}
                for c in self.clients
            ],
            "global_loss": self.global_loss,
            "global": None if self.global_eval is None else self.global_eval.to_dict(),
            "group_lambdas": {str(k): v for k, v in sorted(self.group_lambdas.items())},
            "group_lambda_gap": self.group_lambda_gap,
        }


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    final_params: np.ndarray
    last_global: np.ndarray
    swa_params: np.ndarray | None
    swa_models: int = 0


# -- local objective -----------------------------------------------------------------


def penalty_lambda_and_grad(
    spec: nn.MlpSpec,
    params,
    batch: nn.Batch,
    tol: float = 1e-6,
    max_iter: int = 5000,
    seed: int = 0,
    h: float = 1e-4,
):
    """Top Fisher eigenvalue over the correctly classified examples, and its gradient.

    Returns ``(lambda_correct, grad_lambda, n_correct)``. The gradient holds
    the top eigenvector ``v`` fixed:
    ``grad = (2 / N_c) * sum_i (g_i . v) H_i v``, where the weighted
    Hessian-vector sum is a central difference of the ``(g_i . v)``-weighted
    gradient along ``v``. With no correct examples everything is zero.
    """
    params = nn.check_params(spec, params)
    _, correct = nn.classify(spec, params, batch)
    idx = np.flatnonzero(correct)
    if idx.size == 0:
        return 0.0, np.zeros_like(params), 0
    sub = batch.subset(idx)
    G = nn.per_sample_grads(spec, params, sub)
    est = _top_eig(curvature.FimOperator(G), tol, max_iter, seed)
    v = est.eigvec
    coeff = G @ v
    grad_lam = curvature.hvp_from_grad(lambda p: nn.weighted_grad(spec, p, sub, coeff), params, v, h)
    return est.lam, (2.0 / idx.size) * grad_lam, int(idx.size)


def _top_eig(op, tol, max_iter, seed):
    try:
        return curvature.top_eig_power(op, tol=tol, max_iter=max_iter, seed=seed)
    except ConvergenceError as exc:
        log.debug("using unconverged eigen-estimate: %s", exc)
        return exc.estimate


def client_local_loss(ce_loss: float, lambda_correct: float, n_correct: int, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise InputError("alpha must lie in [0, 1]")
    penalty = lambda_correct / n_correct if n_correct > 0 else 0.0
    return alpha * ce_loss + (1.0 - alpha) * penalty


def eval_lambda(spec, params, batch: nn.Batch, cfg: MethodConfig, seed: int = 0) -> float:
    """Top Fisher eigenvalue over the correctly classified examples of ``batch``."""
    _, correct = nn.classify(spec, params, batch)
    idx = np.flatnonzero(correct)
    if idx.size == 0:
        return 0.0
    G = nn.per_sample_grads(spec, params, batch.subset(idx))
    return float(_top_eig(curvature.FimOperator(G), cfg.eig_tol, cfg.eig_max_iter, seed).lam)


def kd_distill_loss(student_probs, teacher_probs, hard_labels, temperature: float, mix: float) -> float:
    """``mix * CE(hard) + (1 - mix) * KL(teacher_T || student_T)`` for binary outputs.

    Both distributions are softened by rescaling their logits by ``1/temperature``.
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    if not 0.0 <= mix <= 1.0:
        raise InputError("mix must lie in [0, 1]")
    eps = nn.PROB_CLAMP
    q = np.clip(np.asarray(student_probs, dtype=np.float64), eps, 1 - eps)
    p = np.clip(np.asarray(teacher_probs, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(hard_labels, dtype=np.float64)
    ce = -np.mean(y * np.log(q) + (1 - y) * np.log1p(-q))
    q_t = np.clip(nn.sigmoid(_logit(q) / temperature), eps, 1 - eps)
    p_t = np.clip(nn.sigmoid(_logit(p) / temperature), eps, 1 - eps)
    kl = np.mean(p_t * np.log(p_t / q_t) + (1 - p_t) * np.log((1 - p_t) / (1 - q_t)))
    return float(max(0.0, mix * ce + (1 - mix) * kl))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _kd_grad(spec, params, batch, teacher_logits, temperature, mix):
    z = nn.raw_output(spec, params, batch.features)
    delta = mix * (nn.sigmoid(z) - batch.labels)
    delta = delta + (1 - mix) * (nn.sigmoid(z / temperature) - nn.sigmoid(teacher_logits / temperature)) / temperature
    return nn.grad_from_output_delta(spec, params, batch.features, delta)


# -- client ----------------------------------------------------------------------------


def _local_step(spec, params, batch, cfg: MethodConfig, lr: float, rng_seed: int, teacher=None):
    if teacher is not None:
        t_logits = nn.raw_output(spec, teacher, batch.features)
        g = _kd_grad(spec, params, batch, t_logits, cfg.kd_temperature, cfg.kd_mix)
        return sgd_step(params, g, lr)

    weight = 1.0
    extra = None
    if cfg.penalty_enabled:
        weight = cfg.alpha
        _, g_pen, n_c = penalty_lambda_and_grad(spec, params, batch, cfg.eig_tol, cfg.eig_max_iter, rng_seed, cfg.hvp_h)
        if n_c > 0:
            extra = ((1.0 - cfg.alpha) / n_c) * g_pen

    def ce_grad(p):
        g = nn.grad(spec, p, batch)
        return g if weight == 1.0 else weight * g

    if cfg.resolved_optimizer == "sam":
        return sam_step(params, ce_grad, cfg.rho, lr, extra_grad=extra)
    g = ce_grad(params)
    if extra is not None:
        g = g + extra
    return sgd_step(params, g, lr)


def train_client(
    client: ClientState,
    global_params,
    spec: nn.MlpSpec,
    cfg: MethodConfig,
    lr: float,
    round_index: int = 0,
    teacher_params=None,
) -> TrainReturn:
    """Local training for one client and one round.

    Runs ``cfg.epochs`` passes of shuffled mini-batch updates, evaluates on
    the client's eval split after each, and returns the epoch with the lowest
    eval loss together with that loss and its correct-sample Fisher eigenvalue.
    """
    train = client.train_data.strip_groups()
    evald = client.eval_data.strip_groups()
    params = nn.check_params(spec, global_params).copy()
    rng = np.random.default_rng([client.rng_seed, round_index, client.id])
    eig_seed = int(rng.integers(2**31))
    try:
        if cfg.epochs == 0:
            return TrainReturn(params, nn.loss(spec, params, evald), eval_lambda(spec, params, evald, cfg, eig_seed))
        best = None
        n = len(train)
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                mb = train.subset(order[start : start + cfg.batch_size])
                params = _local_step(spec, params, mb, cfg, lr, eig_seed, teacher_params)
            if not np.all(np.isfinite(params)):
                raise NumericError("parameters became non-finite", client_id=client.id)
            ev_loss = nn.loss(spec, params, evald)
            if best is None or ev_loss < best[1]:
                best = (params.copy(), ev_loss, epoch)
        best_params, best_loss, best_epoch = best
        lam = eval_lambda(spec, best_params, evald, cfg, eig_seed)
        return TrainReturn(best_params, best_loss, lam, best_epoch)
    except NumericError as exc:
        exc.client_id = client.id
        raise NumericError(f"client {client.id}: {exc}", layer=exc.layer, client_id=client.id) from exc


# -- server ----------------------------------------------------------------------------


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def aggregation_weights(eval_losses, eval_lambdas, epsilon: float = 0.005) -> np.ndarray:
    """Sharpness-aware weights ``S(S(L) * S(T))``.

    ``L = eps + 1/loss`` and ``T = eps + 1/lambda``, with losses and
    eigenvalues floored at ``1e-8`` first.
    """
    losses = np.asarray(eval_losses, dtype=np.float64)
    lams = np.asarray(eval_lambdas, dtype=np.float64)
    if losses.shape != lams.shape or losses.ndim != 1 or losses.size == 0:
        raise InputError("need equally long, non-empty loss and eigenvalue vectors")
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(lams))):
        raise InputError("losses and eigenvalues must be finite")
    L = epsilon + 1.0 / np.maximum(losses, LOSS_FLOOR)
    T = epsilon + 1.0 / np.maximum(lams, LOSS_FLOOR)
    return softmax(softmax(L) * softmax(T))


def data_size_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def aggregate(models: Sequence[np.ndarray], weights) -> np.ndarray:
    """Convex combination ``sum_n w_n * theta_n``."""
    models = [np.asarray(m, dtype=np.float64) for m in models]
    weights = np.asarray(weights, dtype=np.float64)
    if not models or len(models) != weights.shape[0]:
        raise InputError("need one weight per model")
    if len({m.shape for m in models}) != 1:
        raise InputError("all models must have the same length")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise InputError("weights must be non-negative and sum to 1")
    out = weights[0] * models[0]
    for w, m in zip(weights[1:], models[1:]):
        out = out + w * m
    return out


def swa_update(g_swa, g_round, n_models: int) -> np.ndarray:
    """Fold ``g_round`` into a running mean that already holds ``n_models`` models."""
    if n_models < 0:
        raise InputError("n_models must be >= 0")
    g_round = np.asarray(g_round, dtype=np.float64)
    if n_models == 0:
        return g_round.copy()
    return (n_models * np.asarray(g_swa, dtype=np.float64) + g_round) / (n_models + 1)


def sample_clients(participation_probs, rng: np.random.Generator) -> list[int]:
    """Independent Bernoulli participation; empty draws are redrawn (up to 100 times)."""
    probs = np.asarray(participation_probs, dtype=np.float64)
    if np.any((probs < 0) | (probs > 1)):
        raise InputError("participation probabilities must lie in [0, 1]")
    for _ in range(MAX_EMPTY_DRAWS):
        chosen = np.flatnonzero(rng.random(probs.shape[0]) < probs)
        if chosen.size:
            return [int(i) for i in chosen]
    raise ConfigError(f"{MAX_EMPTY_DRAWS} consecutive empty participation draws")


# -- round loop ------------------------------------------------------------------------


def group_lambdas(spec, params, data: nn.Batch, cfg: MethodConfig, seed: int = 0) -> dict[int, float]:
    """Top Fisher eigenvalue of each group's examples (all of them, not just correct ones)."""
    out = {}
    for g in np.unique(data.group_tags):
        sub = data.subset(np.flatnonzero(data.group_tags == g))
        op = curvature.FimOperator.from_model(spec, params, sub)
        out[int(g)] = float(_top_eig(op, cfg.eig_tol, cfg.eig_max_iter, seed).lam)
    return out


def evaluate_global(spec, params, data: nn.Batch, cfg: MethodConfig):
    """``(MetricsReport, group lambdas, mean loss)`` of a model on tagged data."""
    pred, _ = nn.classify(spec, params, data)
    report = metrics.evaluate(data.labels.astype(np.int64), pred, data.group_tags)
    lams = group_lambdas(spec, params, data, cfg) if data.group_tags is not None else {}
    return report, lams, nn.loss(spec, params, data)


def run_experiment(
    clients: Sequence[ClientState],
    spec: nn.MlpSpec,
    cfg: MethodConfig,
    seed: int = 0,
    init_params=None,
    participation=None,
    eval_data: nn.Batch | None = None,
    evaluate_rounds: bool = True,
) -> ExperimentResult:
    """Run ``cfg.total_rounds`` federated rounds.

    ``participation`` is an optional per-client Bernoulli probability vector
    (all clients every round when omitted). ``eval_data`` defaults to the
    pooled client eval splits and is used only for reporting.
    """
    cfg.validate()
    clients = list(clients)
    if not clients:
        raise InputError("need at least one client")
    G = spec.init_params(seed) if init_params is None else nn.check_params(spec, init_params).copy()
    if eval_data is None:
        eval_data = nn.Batch.concat([c.eval_data for c in clients])
    clients = [replace(c, rng_seed=seed) for c in clients]
    sched = cfg.schedule()
    sample_rng = np.random.default_rng([seed, 7919])

    reports: list[RoundReport] = []
    g_swa = None
    n_models = 0
    swa_start = cfg.swa_start_round
    for r in range(cfg.total_rounds):
        if cfg.swa_enabled and r == swa_start:
            g_swa, n_models = G.copy(), 1
        lr = lr_at_round(sched, r)

        chosen = range(len(clients)) if participation is None else sample_clients(participation, sample_rng)
        teacher = G if cfg.method == "kd_fedavg" and r >= cfg.kd_warmup_rounds else None
        returns = [train_client(clients[i], G, spec, cfg, lr, r, teacher) for i in chosen]
        chosen_clients = [clients[i] for i in chosen]

        agg = cfg.resolved_aggregation
        if agg == "sharpness":
            weights = aggregation_weights([t.eval_loss for t in returns], [t.eval_lambda for t in returns], cfg.epsilon)
        elif agg == "uniform":
            weights = np.full(len(returns), 1.0 / len(returns))
        else:
            weights = data_size_weights([c.n_train for c in chosen_clients])
        G_next = aggregate([t.params for t in returns], weights)

        if cfg.swa_enabled and r > swa_start and r % cfg.cycle == 0:
            g_swa = swa_update(g_swa, G, n_models)
            n_models += 1
        G = G_next

        report = RoundReport(
            round=r,
            lr=lr,
            swa_active=cfg.swa_enabled and r >= swa_start,
            clients=[
                ClientRoundInfo(c.id, t.eval_loss, t.eval_lambda, float(w))
                for c, t, w in zip(chosen_clients, returns, weights)
            ],
        )
        if evaluate_rounds:
            report.global_eval, report.group_lambdas, report.global_loss = evaluate_global(spec, G, eval_data, cfg)
            if len(report.group_lambdas) >= 2:
                report.group_lambda_gap = curvature.group_disparity(list(report.group_lambdas.values()))
        reports.append(report)

    final = g_swa if g_swa is not None else G
    return ExperimentResult(reports, final.copy(), G, g_swa, n_models)
