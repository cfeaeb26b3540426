"""Bilevel training engine: virtual step, analytic meta-gradient for the
miner, in-batch weight normalization, actual step, and the baseline
strategies used for ablations.

One iteration runs on an unbalanced train batch (m positives, m*C negatives)
and a balanced meta batch (m positives, m negatives):

1. virtual step: one speculative SGD update of the kinship model under the
   raw miner weights; the live parameters are untouched,
2. miner update: gradient descent on the balanced meta loss evaluated at the
   virtual parameters, differentiated analytically through the virtual step,
3. actual step: the real kinship update under the freshly normalized weights.

The meta-gradient avoids second-order autodiff: because the virtual step is
plain SGD and the miner inputs are detached from the kinship model, the
gradient of the meta loss w.r.t. the miner is
    -(alpha / M) * sum_s d_s * dg_s/dphi,
where M is the batch size and d_s is the inner product of sample s's
per-sample loss gradient with the meta-loss gradient at the virtual point.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import accuracy as accuracy_metric
from .metrics import positive_weight_ratio, roc_auc
from .models import (
    KinshipConfig,
    KinshipParams,
    MinerConfig,
    MinerParams,
    bce_graph,
    init_kinship,
    init_miner,
    kinship_batch,
    kinship_graph,
    miner_batch,
    miner_graph,
    miner_inputs,
)
from .numerics import (
    AdamState,
    ContractError,
    GradSet,
    NumericError,
    ParamSet,
    Rng,
    Tensor,
    adam_step,
    ceil_div,
    jvp,
    logc,
    mul,
    powc,
    sgd_step,
    tsum,
    value_and_grad,
)
from .pairdata import (
    Batch,
    PairDataset,
    SamplerConfig,
    balanced_eval_pairs,
    bayes_scores,
    generate_synthetic,
    sample_balanced_batch,
    sample_unbalanced_batch,
)

STRATEGIES = (
    "dsmm",
    "balance_batch",
    "unbalance_const",
    "focal_balance",
    "focal_unbalance",
    "fixed_dataset",
)

OPTIMIZERS = ("sgd", "adam")

WEIGHT_SUM_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-3  # virtual step size
    beta: float = 1e-4  # miner step size
    gamma: float = 1e-3  # actual step size
    c_ratio: int = 4  # negatives per positive in the train batch
    m_pos: int = 8  # positives per batch
    epochs: int = 200
    optimizer: str = "adam"  # rule for the actual/baseline step
    decay_factor: float = 0.1
    milestones: tuple[int, ...] | None = None  # None: 50% and 75% of epochs
    strategy: str = "dsmm"
    focal_gamma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ContractError("step sizes alpha, beta, gamma must be positive")
        if self.m_pos < 1 or self.c_ratio < 1:
            raise ContractError("m_pos and c_ratio must be >= 1")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer '{self.optimizer}'")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy '{self.strategy}'")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ContractError("decay_factor must be in (0, 1]")
        if self.milestones is not None and list(self.milestones) != sorted(
            set(self.milestones)
        ):
            raise ContractError("milestones must be strictly increasing")

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        # mirrors decay at 100 and 150 of 200 when epochs differ
        first = ceil_div(self.epochs, 2)
        second = ceil_div(3 * self.epochs, 4)
        return (first,) if second == first else (first, second)

    def lr_at(self, epoch: int) -> float:
        hits = sum(1 for ms in self.resolved_milestones() if epoch >= ms)
        return self.gamma * self.decay_factor**hits


@dataclass
class WeightVector:
    """Raw miner outputs and their in-batch normalization."""

    raw: np.ndarray
    normalized: np.ndarray
    used_fallback: bool


def normalize_weights(raw: np.ndarray) -> WeightVector:
    """Divide each raw weight by the batch total so they sum to 1.

    A vanishing total (possible when every sigmoid output underflows) falls
    back to uniform weights and flags the event for the diagnostics counter.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ContractError("cannot normalize an empty weight vector")
    if np.any(raw < 0.0):
        raise ContractError("raw weights must be non-negative")
    total = float(np.sum(raw))
    if total < WEIGHT_SUM_FLOOR:
        return WeightVector(raw, np.full(raw.size, 1.0 / raw.size), True)
    return WeightVector(raw, raw / total, False)


@dataclass
class OptState:
    """Optimizer rule plus its accumulators; step() is pure."""

    kind: str
    adam: AdamState | None = None
    steps: int = 0

    @staticmethod
    def create(kind: str, params: ParamSet) -> "OptState":
        if kind == "adam":
            return OptState("adam", AdamState.zeros(params))
        if kind == "sgd":
            return OptState("sgd")
        raise ContractError(f"unknown optimizer '{kind}'")

    def step(
        self, params: ParamSet, grads: GradSet, lr: float
    ) -> tuple[ParamSet, "OptState"]:
        if self.kind == "sgd":
            return sgd_step(params, grads, lr), OptState("sgd", None, self.steps + 1)
        t = self.steps + 1
        new_params, new_adam = adam_step(params, grads, self.adam, lr, t=t)
        return new_params, OptState("adam", new_adam, t)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    meta_loss: float
    pos_weight_ratio: float
    accuracy: float
    lr: float


@dataclass
class TrainState:
    theta: KinshipParams
    phi: MinerParams | None
    opt: OptState
    epoch: int
    history: list[EpochRecord]
    weight_fallbacks: int = 0


# loss builders; each returns a scalar-graph closure over the kinship params


def _require_mix(batch: Batch, m_pos: int, n_neg: int) -> None:
    actual_pos = int(np.sum(batch.labels == 1))
    actual_neg = int(np.sum(batch.labels == 0))
    if actual_pos != m_pos or actual_neg != n_neg:
        raise ContractError(
            f"batch mix {actual_pos}+/{actual_neg}- does not match "
            f"declared {m_pos}+/{n_neg}-"
        )


def _weighted_loss_fn(dataset: PairDataset, batch: Batch, weights: np.ndarray, config: KinshipConfig):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(batch),):
        raise ContractError(
            f"{weights.shape[0] if weights.ndim else 0} weights for a batch of {len(batch)}"
        )
    _require_mix(batch, batch.m_pos, batch.m_pos * batch.c_ratio)
    x, y = batch.features(dataset)
    scale = 1.0 / (batch.m_pos * (1 + batch.c_ratio))
    w_col = weights.reshape(-1, 1)

    def fn(p):
        probs = kinship_graph(p, x, y, config)
        return tsum(mul(Tensor(w_col), bce_graph(probs, batch.labels))) * scale

    return fn


def _balanced_loss_fn(dataset: PairDataset, batch: Batch, config: KinshipConfig):
    _require_mix(batch, batch.m_pos, batch.m_pos)
    x, y = batch.features(dataset)
    scale = 1.0 / (2 * batch.m_pos)

    def fn(p):
        probs = kinship_graph(p, x, y, config)
        return tsum(bce_graph(probs, batch.labels)) * scale

    return fn


def _focal_loss_fn(dataset: PairDataset, batch: Batch, focal_gamma: float, config: KinshipConfig):
    n_neg = int(np.sum(batch.labels == 0))
    _require_mix(batch, batch.m_pos, n_neg)
    x, y = batch.features(dataset)
    labels = np.asarray(batch.labels, dtype=np.float64).reshape(-1, 1)
    scale = 1.0 / (batch.m_pos + n_neg)

    def fn(p):
        probs = kinship_graph(p, x, y, config)
        pt = mul(Tensor(labels), probs) + mul(Tensor(1.0 - labels), 1.0 - probs)
        focal = mul(powc(1.0 - pt, focal_gamma), -logc(pt))
        return tsum(focal) * scale

    return fn


def weighted_train_loss(
    dataset: PairDataset, batch: Batch, theta: KinshipParams, weights: np.ndarray
) -> float:
    """Weighted BCE over an unbalanced batch, scaled by 1/(m*(1+C))."""
    fn = _weighted_loss_fn(dataset, batch, weights, theta.config)
    return float(fn({k: Tensor(v) for k, v in theta.params.items()}).data)


def meta_loss(dataset: PairDataset, meta_batch: Batch, theta: KinshipParams) -> float:
    """Unweighted balanced BCE with 1/(2m) scaling."""
    fn = _balanced_loss_fn(dataset, meta_batch, theta.config)
    return float(fn({k: Tensor(v) for k, v in theta.params.items()}).data)


def baseline_loss(
    dataset: PairDataset,
    batch: Batch,
    theta: KinshipParams,
    strategy: str,
    config: TrainConfig,
) -> float:
    """Loss value for one of the non-meta strategies on a matching batch."""
    fn = _baseline_loss_fn(dataset, batch, strategy, config, theta.config)
    return float(fn({k: Tensor(v) for k, v in theta.params.items()}).data)


def _baseline_loss_fn(
    dataset: PairDataset,
    batch: Batch,
    strategy: str,
    config: TrainConfig,
    kconfig: KinshipConfig,
):
    if strategy in ("balance_batch", "fixed_dataset"):
        return _balanced_loss_fn(dataset, batch, kconfig)
    if strategy == "unbalance_const":
        weights = np.where(batch.labels == 1, 1.0, 1.0 / batch.c_ratio)
        return _weighted_loss_fn(dataset, batch, weights, kconfig)
    if strategy in ("focal_balance", "focal_unbalance"):
        return _focal_loss_fn(dataset, batch, config.focal_gamma, kconfig)
    raise ContractError(f"unknown strategy '{strategy}'")


# the four DSMM steps


def _per_sample_stats(
    dataset: PairDataset, batch: Batch, theta: KinshipParams, with_grads: bool
) -> tuple[np.ndarray, np.ndarray, list[GradSet] | None]:
    """Predictions and BCE losses for each sample at theta, optionally with
    the per-sample parameter gradients (one backward pass per sample)."""
    x, y = batch.features(dataset)
    n = len(batch)
    probs = np.empty(n)
    losses = np.empty(n)
    grads: list[GradSet] | None = [] if with_grads else None
    if not with_grads:
        probs[:] = kinship_batch(x, y, theta)
        p_t = Tensor(probs.reshape(-1, 1))
        losses[:] = bce_graph(p_t, batch.labels).data[:, 0]
        return probs, losses, None
    for s in range(n):
        leaves = {k: Tensor(v) for k, v in theta.params.items()}
        prob = kinship_graph(leaves, x[s : s + 1], y[s : s + 1], theta.config)
        loss = tsum(bce_graph(prob, batch.labels[s : s + 1]))
        loss.backward()
        probs[s] = prob.data[0, 0]
        losses[s] = float(loss.data)
        grads.append(
            ParamSet(
                {
                    k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                    for k, t in leaves.items()
                }
            )
        )
    return probs, losses, grads


def _raw_weights(
    labels: np.ndarray,
    probs: np.ndarray,
    losses: np.ndarray,
    phi: MinerParams,
) -> np.ndarray:
    return miner_batch(miner_inputs(labels, probs, losses, phi.config), phi)


def virtual_step(
    dataset: PairDataset,
    batch: Batch,
    theta: KinshipParams,
    phi: MinerParams,
    alpha: float,
) -> KinshipParams:
    """Speculative SGD update of theta under the raw miner weights.

    The miner inputs are computed at theta and detached; theta itself is
    never mutated, the caller receives a fresh parameter set.
    """
    probs, losses, _ = _per_sample_stats(dataset, batch, theta, with_grads=False)
    raw = _raw_weights(batch.labels, probs, losses, phi)
    fn = _weighted_loss_fn(dataset, batch, raw, theta.config)
    _, grad = value_and_grad(fn, theta.params)
    return KinshipParams(theta.config, sgd_step(theta.params, grad, alpha))


@dataclass
class _MetaStepDetail:
    grad_phi: GradSet
    theta_hat: KinshipParams
    probs: np.ndarray
    losses: np.ndarray
    raw_weights: np.ndarray
    meta_loss_value: float


def _miner_grad_from_dots(
    inputs: np.ndarray, d: np.ndarray, phi: MinerParams, alpha: float, m_total: int
) -> GradSet:
    coef = (-(alpha / m_total) * d).reshape(-1, 1)

    def miner_loss(p):
        return tsum(mul(Tensor(coef), miner_graph(p, inputs, phi.config)))

    _, grad_phi = value_and_grad(miner_loss, phi.params)
    return grad_phi


def _meta_gradient_detail(
    dataset: PairDataset,
    train_batch: Batch,
    meta_batch: Batch,
    theta: KinshipParams,
    phi: MinerParams,
    alpha: float,
) -> _MetaStepDetail:
    m_total = train_batch.m_pos * (1 + train_batch.c_ratio)
    probs, losses, _ = _per_sample_stats(dataset, train_batch, theta, with_grads=False)
    inputs = miner_inputs(train_batch.labels, probs, losses, phi.config)
    raw = miner_batch(inputs, phi)

    vfn = _weighted_loss_fn(dataset, train_batch, raw, theta.config)
    _, virtual_grad = value_and_grad(vfn, theta.params)
    theta_hat = KinshipParams(
        theta.config, sgd_step(theta.params, virtual_grad, alpha)
    )

    meta_fn = _balanced_loss_fn(dataset, meta_batch, theta.config)
    meta_value, meta_grad = value_and_grad(meta_fn, theta_hat.params)

    # d_s = <grad_theta of sample s's loss, meta gradient at the virtual
    # point>; one forward-tangent pass along the meta gradient gives every
    # sample's inner product at once
    x, y = train_batch.features(dataset)

    def loss_vec(p):
        return bce_graph(
            kinship_graph(p, x, y, theta.config), train_batch.labels
        )

    _, d_col = jvp(loss_vec, theta.params, meta_grad)
    grad_phi = _miner_grad_from_dots(inputs, d_col[:, 0], phi, alpha, m_total)
    return _MetaStepDetail(grad_phi, theta_hat, probs, losses, raw, meta_value)


def _meta_gradient_per_sample(
    dataset: PairDataset,
    train_batch: Batch,
    meta_batch: Batch,
    theta: KinshipParams,
    phi: MinerParams,
    alpha: float,
) -> GradSet:
    """Reference route: explicit per-sample backward passes for the train
    gradients. Kept as an independent implementation of the same formula;
    the fast path above must agree with it to float precision."""
    m_total = train_batch.m_pos * (1 + train_batch.c_ratio)
    probs, losses, per_grads = _per_sample_stats(
        dataset, train_batch, theta, with_grads=True
    )
    inputs = miner_inputs(train_batch.labels, probs, losses, phi.config)
    raw = miner_batch(inputs, phi)

    acc = {k: np.zeros_like(v) for k, v in theta.params.items()}
    for w, g in zip(raw, per_grads):
        for k in acc:
            acc[k] += w * g[k]
    virtual_grad = ParamSet({k: v / m_total for k, v in acc.items()})
    theta_hat = KinshipParams(
        theta.config, sgd_step(theta.params, virtual_grad, alpha)
    )
    meta_fn = _balanced_loss_fn(dataset, meta_batch, theta.config)
    _, meta_grad = value_and_grad(meta_fn, theta_hat.params)
    d = np.array([g.dot(meta_grad) for g in per_grads])
    return _miner_grad_from_dots(inputs, d, phi, alpha, m_total)


def meta_gradient(
    dataset: PairDataset,
    train_batch: Batch,
    meta_batch: Batch,
    theta: KinshipParams,
    phi: MinerParams,
    alpha: float,
) -> GradSet:
    """Exact gradient of the balanced meta loss at the virtual parameters
    w.r.t. the miner, computed without second-order autodiff."""
    return _meta_gradient_detail(
        dataset, train_batch, meta_batch, theta, phi, alpha
    ).grad_phi


def meta_step(phi: MinerParams, grad: GradSet, beta: float) -> MinerParams:
    """Plain gradient descent on the miner parameters."""
    return MinerParams(phi.config, sgd_step(phi.params, grad, beta))


def actual_step(
    dataset: PairDataset,
    batch: Batch,
    theta: KinshipParams,
    weights: np.ndarray,
    lr: float,
    opt: OptState,
) -> tuple[KinshipParams, OptState, float]:
    """One real update of theta on the weighted loss; weights are constants
    (already normalized, computed from the updated miner at the old theta)."""
    fn = _weighted_loss_fn(dataset, batch, weights, theta.config)
    value, grad = value_and_grad(fn, theta.params)
    new_params, new_opt = opt.step(theta.params, grad, lr)
    return KinshipParams(theta.config, new_params), new_opt, value


def _materialize_fixed_pool(
    families: np.ndarray, rng: Rng
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-time balanced pool: every positive plus as many sampled negatives."""
    from .pairdata import _sample_negatives

    n = len(families)
    negatives = _sample_negatives(families, n, rng)
    parent = np.concatenate([families, np.array([p for p, _ in negatives], dtype=np.int64)])
    child = np.concatenate([families, np.array([q for _, q in negatives], dtype=np.int64)])
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return parent, child, labels


def _fixed_pool_batch(
    pool: tuple[np.ndarray, np.ndarray, np.ndarray], m_pos: int, rng: Rng
) -> Batch:
    parent, child, labels = pool
    n = len(labels) // 2
    pos_take = rng.choice_without_replacement(n, m_pos)
    neg_take = rng.choice_without_replacement(n, m_pos) + n
    take = np.concatenate([pos_take, neg_take])
    take = take[rng.permutation(len(take))]
    return Batch(parent[take], child[take], labels[take], m_pos, 1)


def train(
    dataset: PairDataset,
    families: Sequence[int],
    config: TrainConfig,
    kinship_config: KinshipConfig | None = None,
    miner_config: MinerConfig | None = None,
    init_theta: KinshipParams | None = None,
    init_phi: MinerParams | None = None,
) -> TrainState:
    """Run the configured strategy over the split; an epoch is
    ceil(len(families) / m_pos) iterations.

    Returns the final state with one history record per completed epoch.
    Numeric failures propagate with the epoch and iteration attached.
    """
    config.validate()
    families = np.asarray(families, dtype=np.int64)
    if len(families) < 2:
        raise ContractError("training split needs at least 2 families")
    kconfig = kinship_config or KinshipConfig(input_dim=dataset.dim)
    if kconfig.input_dim != dataset.dim:
        raise ContractError(
            f"model input_dim {kconfig.input_dim} != dataset dim {dataset.dim}"
        )
    mconfig = miner_config or MinerConfig()
    rng = Rng(config.seed, "train")
    theta = init_theta or init_kinship(kconfig, rng.split("init_theta"))
    is_dsmm = config.strategy == "dsmm"
    phi = (init_phi or init_miner(mconfig, rng.split("init_phi"))) if is_dsmm else None
    opt = OptState.create(config.optimizer, theta.params)
    batch_rng = rng.split("train_batch")
    meta_rng = rng.split("meta_batch")
    sampler = SamplerConfig(config.m_pos, config.c_ratio)
    sampler.validate(len(families))
    fixed_pool = None
    if config.strategy == "fixed_dataset":
        fixed_pool = _materialize_fixed_pool(families, rng.split("fixed_negatives"))

    iters_per_epoch = ceil_div(len(families), config.m_pos)
    history: list[EpochRecord] = []
    fallbacks = 0

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        sums = np.zeros(4)  # train loss, meta loss, ratio, accuracy
        ratio_count = 0
        for it in range(iters_per_epoch):
            try:
                if is_dsmm:
                    batch = sample_unbalanced_batch(families, sampler, batch_rng)
                    meta_batch = sample_balanced_batch(
                        families, config.m_pos, meta_rng
                    )
                    detail = _meta_gradient_detail(
                        dataset, batch, meta_batch, theta, phi, config.alpha
                    )
                    phi = meta_step(phi, detail.grad_phi, config.beta)
                    raw = _raw_weights(batch.labels, detail.probs, detail.losses, phi)
                    wv = normalize_weights(raw)
                    fallbacks += int(wv.used_fallback)
                    theta, opt, loss_value = actual_step(
                        dataset, batch, theta, wv.normalized, lr, opt
                    )
                    sums[0] += loss_value
                    sums[1] += detail.meta_loss_value
                    sums[2] += positive_weight_ratio(batch.labels, wv.normalized)
                    ratio_count += 1
                    sums[3] += accuracy_metric(detail.probs, batch.labels)
                else:
                    if config.strategy in ("balance_batch", "focal_balance"):
                        batch = sample_balanced_batch(
                            families, config.m_pos, batch_rng
                        )
                    elif config.strategy == "fixed_dataset":
                        batch = _fixed_pool_batch(fixed_pool, config.m_pos, batch_rng)
                    else:
                        batch = sample_unbalanced_batch(families, sampler, batch_rng)
                    fn = _baseline_loss_fn(
                        dataset, batch, config.strategy, config, kconfig
                    )
                    loss_value, grad = value_and_grad(fn, theta.params)
                    new_params, opt = opt.step(theta.params, grad, lr)
                    x, y = batch.features(dataset)
                    probs = kinship_batch(x, y, theta)
                    theta = KinshipParams(kconfig, new_params)
                    sums[0] += loss_value
                    sums[3] += accuracy_metric(probs, batch.labels)
            except NumericError as err:
                raise NumericError(
                    f"epoch {epoch} iteration {it}: {err}"
                ) from err
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=sums[0] / iters_per_epoch,
                meta_loss=sums[1] / iters_per_epoch if is_dsmm else float("nan"),
                pos_weight_ratio=sums[2] / ratio_count if ratio_count else float("nan"),
                accuracy=sums[3] / iters_per_epoch,
                lr=lr,
            )
        )
    return TrainState(theta, phi, opt, config.epochs, history, fallbacks)


def meta_gradient_fd(
    dataset: PairDataset,
    train_batch: Batch,
    meta_batch: Batch,
    theta: KinshipParams,
    phi: MinerParams,
    alpha: float,
    step: float = 1e-4,
) -> GradSet:
    """Central-difference oracle for the analytic meta-gradient: perturbs one
    miner scalar at a time and re-runs virtual step plus meta loss."""
    if step <= 0.0:
        raise ContractError("finite-difference step must be positive")

    def objective(params: ParamSet) -> float:
        candidate = MinerParams(phi.config, params)
        theta_hat = virtual_step(dataset, train_batch, theta, candidate, alpha)
        return meta_loss(dataset, meta_batch, theta_hat)

    arrays = {k: v.copy() for k, v in phi.params.items()}
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            hi = objective(ParamSet(arrays))
            flat[i] = original - step
            lo = objective(ParamSet(arrays))
            flat[i] = original
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return ParamSet(grads)


@dataclass
class GradcheckCase:
    embed_dim: int
    miner_hidden: int
    m_pos: int
    c_ratio: int
    alpha: float
    seed: int

    @property
    def label(self) -> str:
        return (
            f"D={self.embed_dim} H={self.miner_hidden} m={self.m_pos} "
            f"C={self.c_ratio} alpha={self.alpha:g} seed={self.seed}"
        )


@dataclass
class GradcheckRow:
    case: GradcheckCase
    gap: float
    analytic_max: float
    passed: bool


GRADCHECK_TOLERANCE = 1e-4


def default_gradcheck_grid() -> list[GradcheckCase]:
    cases = [
        GradcheckCase(4, 4, 2, 1, 0.25, 0),
        GradcheckCase(6, 8, 2, 3, 0.25, 1),
        GradcheckCase(8, 4, 2, 3, 0.5, 2),
        GradcheckCase(8, 8, 2, 1, 0.1, 3),
        GradcheckCase(4, 8, 2, 3, 0.25, 4),
        GradcheckCase(6, 4, 2, 1, 0.5, 5),
        GradcheckCase(8, 8, 2, 3, 0.0, 6),  # alpha=0: gradient must vanish
    ]
    return cases


def _gradcheck_fixture(case: GradcheckCase):
    rng = Rng(case.seed, "gradcheck")
    n_families = 12
    dataset = generate_synthetic(
        n_families=n_families, dim=6, rho=0.7, sigma=0.3, seed=case.seed + 17
    )
    kconfig = KinshipConfig(
        input_dim=6,
        encoder_hidden=5,
        embed_dim=case.embed_dim,
        relation_hidden=4,
        relation_out=2,
        agg_hidden=6,
    )
    theta = init_kinship(kconfig, rng.split("theta"))
    phi = init_miner(MinerConfig(hidden=case.miner_hidden), rng.split("phi"))
    train_batch = sample_unbalanced_batch(
        range(n_families), SamplerConfig(case.m_pos, case.c_ratio), rng.split("trn")
    )
    meta_batch = sample_balanced_batch(
        range(n_families), case.m_pos, rng.split("meta")
    )
    return dataset, train_batch, meta_batch, theta, phi


def run_gradcheck(
    cases: Sequence[GradcheckCase] | None = None, step: float = 1e-4
) -> list[GradcheckRow]:
    """Analytic meta-gradient vs the finite-difference oracle per case; the
    gap is the infinity-norm difference over the oracle's infinity norm."""
    from .numerics import grad_gap

    rows = []
    for case in cases or default_gradcheck_grid():
        dataset, train_batch, meta_batch, theta, phi = _gradcheck_fixture(case)
        analytic = meta_gradient(
            dataset, train_batch, meta_batch, theta, phi, case.alpha
        )
        if case.alpha == 0.0:
            # the virtual point does not depend on the miner at alpha=0
            gap = analytic.max_abs()
            rows.append(GradcheckRow(case, gap, analytic.max_abs(), gap == 0.0))
            continue
        oracle = meta_gradient_fd(
            dataset, train_batch, meta_batch, theta, phi, case.alpha, step
        )
        gap = grad_gap(analytic, oracle)
        rows.append(
            GradcheckRow(case, gap, analytic.max_abs(), gap <= GRADCHECK_TOLERANCE)
        )
    return rows


@dataclass
class FoldResult:
    fold: int
    state: TrainState
    parent_idx: np.ndarray
    child_idx: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    accuracy: float
    auc: float
    bayes_accuracy: float | None
    bayes_auc: float | None


def run_fold(
    dataset: PairDataset,
    folds,
    fold: int,
    config: TrainConfig,
    kinship_config: KinshipConfig | None = None,
    miner_config: MinerConfig | None = None,
) -> FoldResult:
    """Train on all other folds, evaluate on this fold's balanced pair set.

    Evaluation pairs depend only on (seed, fold), so every strategy sees the
    same test set and the Bayes oracle scores the identical pairs.
    """
    state = train(
        dataset, folds.train_families(fold), config, kinship_config, miner_config
    )
    eval_rng = Rng(config.seed, f"eval/fold{fold}")
    pairs = balanced_eval_pairs(dataset, folds.test_families(fold), eval_rng)
    x, y = pairs.features(dataset)
    scores = kinship_batch(x, y, state.theta)
    acc = accuracy_metric(scores, pairs.labels)
    _, auc = roc_auc(scores, pairs.labels)
    bayes_acc = bayes_auc = None
    if dataset.meta is not None and not dataset.meta.nonlinear:
        oracle = bayes_scores(dataset, pairs.parent_idx, pairs.child_idx)
        bayes_acc = accuracy_metric(oracle, pairs.labels)
        _, bayes_auc = roc_auc(oracle, pairs.labels)
    return FoldResult(
        fold,
        state,
        pairs.parent_idx,
        pairs.child_idx,
        scores,
        pairs.labels,
        acc,
        auc,
        bayes_acc,
        bayes_auc,
    )


def cross_validate(
    dataset: PairDataset,
    folds,
    config: TrainConfig,
    kinship_config: KinshipConfig | None = None,
    miner_config: MinerConfig | None = None,
) -> list[FoldResult]:
    return [
        run_fold(dataset, folds, i, config, kinship_config, miner_config)
        for i in range(folds.k)
    ]
