"""Spectral-domain Admix attack with a learnable mix metric and path selection.

A clean cloud P with GFT basis Q and spectral feature S = QᵀP is attacked
through a spectral perturbation Δ: the adversarial cloud is P + QΔ. Each step
mixes S + Δ with candidate clouds of other classes (expressed in the same
basis), averages the loss gradient over the mixtures, and updates Δ and the
diagonal mix metric M with Adam. A short warmup over the whole candidate pool
decides which augmentation paths the main phase keeps.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .adam import Adam, AdamState
from .classifier import MiniPointNet, forward, input_gradient, predict
from .errors import AttackError
from .geometry import LabeledDataset, PointCloud, as_points
from .graph_spectral import (
    GftBasis,
    SpectralCloud,
    SpectralMask,
    compute_basis,
    default_low_band,
    gft,
    make_mask,
    pairwise_sq_dists,
)
from .metrics import (
    MixMetric,
    calibrate_metric,
    chamfer,
    cosine_similarity,
    grad_mix_weight_wrt_M,
    hausdorff,
    init_metric,
    l2_norm_dist,
    mix_weight,
)
from .saao_config import AttackConfig
from .saao_state import AttackMethod, AttackMode

logger = logging.getLogger(__name__)

BUDGET_TOLERANCE = 1e-12
MATCH_BISECTIONS = 200

CloudLike = Union[PointCloud, np.ndarray]


@dataclass(frozen=True, eq=False)
class AttackTarget:
    """A clean labelled cloud with its frozen GFT basis and spectral feature."""

    cloud: PointCloud
    basis: GftBasis
    spectral: SpectralCloud

    @classmethod
    def from_cloud(cls, cloud: PointCloud, k: int = 10) -> "AttackTarget":
        if cloud.label is None:
            raise AttackError("the attacked cloud needs a label")
        basis = compute_basis(cloud, k)
        return cls(cloud=cloud, basis=basis, spectral=gft(cloud, basis))

    @property
    def label(self) -> int:
        return int(self.cloud.label)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    def displace(self, delta: np.ndarray) -> PointCloud:
        """P + QΔ, exactly P when Δ is zero."""

        return self.cloud.with_points(self.points + self.basis.q @ delta)


@dataclass(frozen=True, eq=False)
class AttackState:
    """Everything one cloud's attack carries from step to step and across phases."""

    delta: np.ndarray
    delta_moments: AdamState
    metric: MixMetric
    metric_moments: AdamState
    candidate_ids: Tuple[int, ...]
    candidate_coeffs: np.ndarray
    path_gradients: Optional[np.ndarray] = None
    adv_gradient: Optional[np.ndarray] = None
    step: int = 0
    loss_history: Tuple[float, ...] = field(default_factory=tuple)


@dataclass(frozen=True, eq=False)
class AdmixResult:
    adversarial: PointCloud
    metric: MixMetric
    path_gradients: np.ndarray
    adv_gradient: np.ndarray
    state: AttackState


@dataclass(frozen=True)
class AttackReport:
    cloud_id: str
    true_label: int
    surrogate_pred: int
    success: bool
    d_hausdorff: float
    d_chamfer: float
    d_norm: float
    steps_used: int
    selected_path_ids: Tuple[int, ...] = ()
    variant: str = AttackMethod.SAAO.value
    skipped: bool = False


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    report: AttackReport
    adversarial: PointCloud
    metric: Optional[MixMetric] = None


@dataclass(frozen=True, eq=False)
class BatchAttackResult:
    adversarial: List[PointCloud]
    reports: List[AttackReport]
    metric: Optional[MixMetric] = None


# ======================
# LOSSES
# ======================


def margin_loss(logits: np.ndarray, y: int, kappa: float = 0.0) -> float:
    """max(F_y − max_{y'≠y} F_y' + κ, 0)."""

    logits = np.asarray(logits, dtype=np.float64)
    losses, _ = _margin_terms(logits[None, :], y, kappa)
    return float(losses[0])


def total_loss(
    clean: CloudLike,
    adversarial: CloudLike,
    y: int,
    model: MiniPointNet,
    lambda_mse: float,
    lambda_chamfer: float,
    lambda_hausdorff: float,
    kappa: float = 0.0,
) -> Tuple[float, np.ndarray]:
    """Margin loss plus weighted MSE, Chamfer and Hausdorff distortion.

    Returns the scalar loss and its gradient with respect to the adversarial
    points. Nearest-neighbour and farthest-point selections are held fixed
    within one evaluation.
    """

    clean_points = as_points(clean)
    adv_points = as_points(adversarial)
    if clean_points.shape != adv_points.shape:
        raise AttackError(f"clouds must have the same shape, got {clean_points.shape} and {adv_points.shape}")
    losses, grads = _batched_total_loss(
        clean_points, adv_points[None], y, model, (lambda_mse, lambda_chamfer, lambda_hausdorff), kappa
    )
    return float(losses[0]), grads[0]


def _margin_terms(logits: np.ndarray, y: int, kappa: float) -> Tuple[np.ndarray, np.ndarray]:
    batch, classes = logits.shape
    if classes < 2:
        raise AttackError(f"margin loss needs at least 2 classes, got {classes}")
    if not 0 <= y < classes:
        raise AttackError(f"label {y} outside [0, {classes})")

    others = logits.copy()
    others[:, y] = -np.inf
    runner_up = np.argmax(others, axis=1)
    rows = np.arange(batch)
    margin = logits[:, y] - others[rows, runner_up] + kappa
    active = margin > 0.0

    grad = np.zeros_like(logits)
    grad[rows[active], y] = 1.0
    grad[rows[active], runner_up[active]] = -1.0
    return np.where(active, margin, 0.0), grad


def _batched_total_loss(
    clean: np.ndarray,
    samples: np.ndarray,
    y: int,
    model: MiniPointNet,
    weights: Tuple[float, float, float],
    kappa: float,
) -> Tuple[np.ndarray, np.ndarray]:
    lambda_mse, lambda_chamfer, lambda_hausdorff = weights
    batch, n, _ = samples.shape

    losses, grad_logits = _margin_terms(forward(model, samples), y, kappa)
    grads = input_gradient(model, samples, grad_logits) if np.any(grad_logits) else np.zeros_like(samples)

    if lambda_mse:
        displacement = samples - clean
        losses = losses + lambda_mse * np.sum(displacement ** 2, axis=(1, 2)) / n
        grads = grads + lambda_mse * 2.0 * displacement / n

    if lambda_chamfer or lambda_hausdorff:
        distances = np.stack([pairwise_sq_dists(sample, clean) for sample in samples])
        rows = np.arange(batch)[:, None]
        forward_index = np.argmin(distances, axis=2)
        forward_min = np.take_along_axis(distances, forward_index[:, :, None], axis=2)[:, :, 0]
        backward_index = np.argmin(distances, axis=1)
        backward_min = np.take_along_axis(distances, backward_index[:, None, :], axis=1)[:, 0, :]

        if lambda_chamfer:
            m = clean.shape[0]
            losses = losses + lambda_chamfer * (forward_min.mean(axis=1) + backward_min.mean(axis=1))
            chamfer_grad = 2.0 * (samples - clean[forward_index]) / n
            backward_pull = 2.0 * (samples[rows, backward_index] - clean[None, :, :]) / m
            np.add.at(chamfer_grad, (np.broadcast_to(rows, backward_index.shape), backward_index), backward_pull)
            grads = grads + lambda_chamfer * chamfer_grad

        if lambda_hausdorff:
            hausdorff_grad = np.zeros_like(samples)
            values = np.zeros(batch)
            for b in range(batch):
                far_adv = int(np.argmax(forward_min[b]))
                far_clean = int(np.argmax(backward_min[b]))
                if forward_min[b, far_adv] >= backward_min[b, far_clean]:
                    adv_index, clean_index = far_adv, int(forward_index[b, far_adv])
                else:
                    adv_index, clean_index = int(backward_index[b, far_clean]), far_clean
                value = float(np.sqrt(distances[b, adv_index, clean_index]))
                values[b] = value
                if value > 0.0:
                    hausdorff_grad[b, adv_index] = (samples[b, adv_index] - clean[clean_index]) / value
            losses = losses + lambda_hausdorff * values
            grads = grads + lambda_hausdorff * hausdorff_grad

    return losses, grads


# ======================
# SPECTRAL ADMIX
# ======================


def admix_betas(b_low: float, b_up: float, m: int) -> np.ndarray:
    """β_i = b_l + (i/(m−1))·(b_u − b_l), with exact endpoints."""

    if m < 2:
        raise AttackError(f"need at least 2 samples per path, got {m}")
    betas = b_low + (np.arange(m) / (m - 1)) * (b_up - b_low)
    betas[0], betas[-1] = b_low, b_up
    return betas


def admix_step_samples(
    adv_spectral: SpectralCloud,
    candidate_spectral: SpectralCloud,
    metric: MixMetric,
    mask: SpectralMask,
    b_low: float,
    b_up: float,
    m: int,
    reference: Optional[SpectralCloud] = None,
) -> List[SpectralCloud]:
    """Mixed samples β_i·M_s·S_adv + (1−β_i)·(I−M_s)·w·S_j for i = 0..m−1.

    The mix weight w = exp(−Dist(reference, S_j)) uses the clean feature when
    given and the adversarial feature otherwise.
    """

    if adv_spectral.basis_id != candidate_spectral.basis_id:
        raise AttackError("adversarial and candidate features use different bases")
    weight = mix_weight(reference if reference is not None else adv_spectral, candidate_spectral, metric)
    mixed = _mix(
        adv_spectral.coeffs,
        candidate_spectral.coeffs[None],
        np.array([weight]),
        mask.diag,
        admix_betas(b_low, b_up, m),
    )
    return [SpectralCloud(coeffs=mixed[i, 0], basis_id=adv_spectral.basis_id) for i in range(m)]


def _mix(
    adv_coeffs: np.ndarray,
    candidate_coeffs: np.ndarray,
    weights: np.ndarray,
    mask_diag: np.ndarray,
    betas: np.ndarray,
) -> np.ndarray:
    """Return the (m, n_c, n, 3) array of mixed spectral samples."""

    adv_part = mask_diag[:, None] * adv_coeffs
    candidate_part = (1.0 - mask_diag)[None, :, None] * weights[:, None, None] * candidate_coeffs
    return (
        betas[:, None, None, None] * adv_part[None, None]
        + (1.0 - betas)[:, None, None, None] * candidate_part[None]
    )


def init_attack_state(
    target: AttackTarget,
    candidates: Sequence[PointCloud],
    candidate_ids: Sequence[int],
    metric: MixMetric,
) -> AttackState:
    """Zero perturbation, fresh optimizer moments, candidates in the clean basis."""

    if not candidates:
        raise AttackError("the attack needs at least one candidate cloud")
    if len(candidates) != len(candidate_ids):
        raise AttackError("candidate ids and clouds differ in length")
    for candidate in candidates:
        if candidate.label is not None and candidate.label == target.label:
            raise AttackError(f"candidate shares the attacked label {target.label}")
        if candidate.n != target.cloud.n:
            raise AttackError(f"candidate has {candidate.n} points, expected {target.cloud.n}")

    coeffs = np.stack([gft(candidate, target.basis).coeffs for candidate in candidates])
    delta = np.zeros_like(target.spectral.coeffs)
    return AttackState(
        delta=delta,
        delta_moments=Adam(lr=1.0).init((delta,)),
        metric=metric,
        metric_moments=Adam(lr=1.0).init((metric.m_diag,)),
        candidate_ids=tuple(int(index) for index in candidate_ids),
        candidate_coeffs=coeffs,
    )


def admix_inner(
    target: AttackTarget,
    state: AttackState,
    steps: int,
    mask: SpectralMask,
    model: MiniPointNet,
    cfg: AttackConfig,
    paths: Optional[Sequence[int]] = None,
) -> AdmixResult:
    """Run `steps` spectral Admix iterations over the chosen candidate paths.

    Each iteration averages w_j·∂Loss/∂Δ over the m·n_c mixed samples, Adam
    updates Δ, clips it to ±eps_spec and caps the per-point displacement at
    eps_xyz, then Adam updates M with the loss gradient that flows through the
    mix weights. On exit the per-path gradients ḡʲ (averaged over the β
    schedule) and the gradient at the unmixed adversarial sample are returned.
    """

    if steps < 0:
        raise AttackError(f"steps must be non-negative, got {steps}")
    paths = list(range(len(state.candidate_ids))) if paths is None else [int(index) for index in paths]
    if not paths:
        raise AttackError("admix_inner needs at least one candidate path")

    optimizer = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    betas = admix_betas(cfg.b_low, cfg.b_up, cfg.samples_per_path)
    candidate_coeffs = state.candidate_coeffs[paths]
    loss_weights = (cfg.lambda_mse, cfg.lambda_chamfer, cfg.lambda_hausdorff)
    q = target.basis.q
    clean = target.points
    history = list(state.loss_history)

    for _ in range(steps):
        weights = _path_weights(target, candidate_coeffs, state.metric)
        mixed_grads = _mixed_spectral_gradients(target, state.delta, candidate_coeffs, weights, mask, betas, model, cfg)
        scale = 1.0 / (betas.size * len(paths))

        # Δ enters every mixed sample as β_i·M_s·Δ
        grad_delta = scale * np.einsum("j,i,ijnc->nc", weights, betas, mixed_grads) * mask.diag[:, None]

        candidate_part = (1.0 - mask.diag)[None, :, None] * candidate_coeffs
        grad_weights = np.einsum("i,ijnc,jnc->j", 1.0 - betas, mixed_grads, candidate_part)
        grad_metric = scale * sum(
            grad_weights[j] * grad_mix_weight_wrt_M(target.spectral.coeffs, candidate_coeffs[j], state.metric)
            for j in range(len(paths))
        )

        if not (np.all(np.isfinite(grad_delta)) and np.all(np.isfinite(grad_metric))):
            raise AttackError(f"non-finite gradient at step {state.step + 1}")

        (delta,), delta_moments = optimizer.update((state.delta,), (grad_delta,), state.delta_moments)
        delta = _project(delta, q, cfg)
        (m_diag,), metric_moments = optimizer.update((state.metric.m_diag,), (grad_metric,), state.metric_moments)
        metric = state.metric.with_diag(m_diag)

        _check_budget(delta, q, metric, cfg, state.step + 1)
        loss, _ = _batched_total_loss(clean, (clean + q @ delta)[None], target.label, model, loss_weights, cfg.margin_kappa)
        if not np.isfinite(loss[0]):
            raise AttackError(f"non-finite loss at step {state.step + 1}")
        history.append(float(loss[0]))
        logger.debug("step %d loss %.6f", state.step + 1, loss[0])

        state = replace(
            state,
            delta=delta,
            delta_moments=delta_moments,
            metric=metric,
            metric_moments=metric_moments,
            step=state.step + 1,
        )

    weights = _path_weights(target, candidate_coeffs, state.metric)
    mixed_grads = _mixed_spectral_gradients(target, state.delta, candidate_coeffs, weights, mask, betas, model, cfg)
    path_gradients = np.einsum("i,ijnc->jnc", betas, mixed_grads) * mask.diag[None, :, None] / betas.size

    adversarial = target.displace(state.delta)
    _, grad_points = _batched_total_loss(
        clean, adversarial.points[None], target.label, model, loss_weights, cfg.margin_kappa
    )
    adv_gradient = q.T @ grad_points[0]

    state = replace(
        state,
        path_gradients=path_gradients,
        adv_gradient=adv_gradient,
        loss_history=tuple(history),
    )
    return AdmixResult(
        adversarial=adversarial,
        metric=state.metric,
        path_gradients=path_gradients,
        adv_gradient=adv_gradient,
        state=state,
    )


def _path_weights(target: AttackTarget, candidate_coeffs: np.ndarray, metric: MixMetric) -> np.ndarray:
    return np.array([mix_weight(target.spectral.coeffs, coeffs, metric) for coeffs in candidate_coeffs])


def _mixed_spectral_gradients(
    target: AttackTarget,
    delta: np.ndarray,
    candidate_coeffs: np.ndarray,
    weights: np.ndarray,
    mask: SpectralMask,
    betas: np.ndarray,
    model: MiniPointNet,
    cfg: AttackConfig,
) -> np.ndarray:
    """Qᵀ·∂Loss/∂P for every mixed sample, shaped (m, n_c, n, 3)."""

    q = target.basis.q
    mixed = _mix(target.spectral.coeffs + delta, candidate_coeffs, weights, mask.diag, betas)
    m, paths, n, _ = mixed.shape
    samples = np.einsum("ab,ijbc->ijac", q, mixed).reshape(m * paths, n, 3)
    _, grads = _batched_total_loss(
        target.points,
        samples,
        target.label,
        model,
        (cfg.lambda_mse, cfg.lambda_chamfer, cfg.lambda_hausdorff),
        cfg.margin_kappa,
    )
    return np.einsum("ba,ijbc->ijac", q, grads.reshape(m, paths, n, 3))


def _project(delta: np.ndarray, q: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    delta = np.clip(delta, -cfg.eps_spec, cfg.eps_spec)
    largest = float(np.max(np.linalg.norm(q @ delta, axis=1)))
    if largest > cfg.eps_xyz:
        delta = delta * (cfg.eps_xyz / largest)
    return delta


def _check_budget(delta: np.ndarray, q: np.ndarray, metric: MixMetric, cfg: AttackConfig, step: int) -> None:
    if float(np.max(np.abs(delta))) > cfg.eps_spec * (1.0 + BUDGET_TOLERANCE):
        raise AttackError(f"spectral perturbation left the ±{cfg.eps_spec} box at step {step}")
    if float(np.max(np.linalg.norm(q @ delta, axis=1))) > cfg.eps_xyz * (1.0 + BUDGET_TOLERANCE):
        raise AttackError(f"per-point displacement exceeded {cfg.eps_xyz} at step {step}")
    if np.any(metric.m_diag < metric.m_min) or np.any(metric.m_diag > metric.m_max):
        raise AttackError(f"mix metric left its bounds at step {step}")


def select_paths(path_gradients: Sequence[np.ndarray], adv_gradient: np.ndarray, n_sel: int) -> List[int]:
    """Indices of the n_sel paths most aligned with g_adv; ties go to the lower index."""

    if not 1 <= n_sel <= len(path_gradients):
        raise AttackError(f"cannot select {n_sel} of {len(path_gradients)} paths")
    similarities = [cosine_similarity(adv_gradient, gradient) for gradient in path_gradients]
    return sorted(range(len(similarities)), key=lambda index: (-similarities[index], index))[:n_sel]


# ======================
# OUTER LOOP
# ======================


def attack_single(
    target: AttackTarget,
    cloud_id: str,
    candidates: Sequence[PointCloud],
    candidate_ids: Sequence[int],
    metric: MixMetric,
    mask: SpectralMask,
    surrogate: MiniPointNet,
    cfg: AttackConfig,
) -> AttackOutcome:
    """Warmup over every candidate, pick paths, then run the main phase.

    The perturbation and its optimizer moments carry over from the warmup;
    the metric's optimizer moments start fresh for each cloud.
    """

    variant = (AttackMethod.SAAO if cfg.path_selection else AttackMethod.SAAO_NO_PATH).value
    prediction = int(predict(surrogate, target.cloud))
    if prediction != target.label:
        logger.info("%s skipped: surrogate predicts %d, label is %d", cloud_id, prediction, target.label)
        return AttackOutcome(
            report=_skipped_report(cloud_id, target.label, prediction, variant),
            adversarial=target.cloud,
            metric=metric,
        )

    state = init_attack_state(target, candidates, candidate_ids, metric)
    warmup = admix_inner(target, state, cfg.warmup_steps, mask, surrogate, cfg)

    n_sel = min(cfg.selected_paths, len(candidates))
    if cfg.path_selection:
        chosen = sorted(select_paths(warmup.path_gradients, warmup.adv_gradient, n_sel))
    else:
        chosen = list(range(n_sel))
    logger.debug("%s paths %s", cloud_id, [state.candidate_ids[index] for index in chosen])

    result = admix_inner(target, warmup.state, cfg.steps, mask, surrogate, cfg, paths=chosen)
    adversarial = result.adversarial
    adv_prediction = int(predict(surrogate, adversarial))
    report = AttackReport(
        cloud_id=cloud_id,
        true_label=target.label,
        surrogate_pred=adv_prediction,
        success=adv_prediction != target.label,
        d_hausdorff=hausdorff(target.cloud, adversarial),
        d_chamfer=chamfer(target.cloud, adversarial),
        d_norm=l2_norm_dist(target.cloud, adversarial),
        steps_used=cfg.total_steps,
        selected_path_ids=tuple(state.candidate_ids[index] for index in chosen),
        variant=variant,
    )
    logger.info(
        "%s %s: success=%s D_norm=%.4f paths=%s",
        variant,
        cloud_id,
        report.success,
        report.d_norm,
        list(report.selected_path_ids),
    )
    return AttackOutcome(report=report, adversarial=adversarial, metric=result.metric)


def draw_candidates(labels: Sequence[int], y: int, count: int, seed: Sequence[int]) -> List[int]:
    """Uniformly draw up to count indices whose label differs from y, in draw order."""

    eligible = [index for index, label in enumerate(labels) if label != y]
    if not eligible:
        raise AttackError(f"no candidate with a label other than {y} is available")
    rng = np.random.default_rng(list(seed))
    drawn = rng.choice(len(eligible), size=min(count, len(eligible)), replace=False)
    return [eligible[int(position)] for position in drawn]


def attack_batch(
    batch: Union[LabeledDataset, Sequence[PointCloud]],
    surrogate: MiniPointNet,
    cfg: AttackConfig,
    mode: AttackMode = AttackMode.SEQUENTIAL_SHARED_M,
    workers: int = 1,
    candidate_source: Optional[LabeledDataset] = None,
    cloud_ids: Optional[Sequence[str]] = None,
) -> BatchAttackResult:
    """Attack every cloud of a batch, initializing M₀ and M_s from the batch.

    Sequential mode carries one metric from cloud to cloud; parallel mode gives
    each cloud the initial metric and fans out to a process pool.
    """

    clouds = list(batch.clouds if isinstance(batch, LabeledDataset) else batch)
    if not clouds:
        raise AttackError("cannot attack an empty batch")
    source = list(candidate_source.clouds) if candidate_source is not None else clouds
    source_labels = [cloud.label for cloud in source]
    if len({label for label in source_labels if label is not None}) < 2:
        raise AttackError("the candidate source holds a single class: no cross-class candidates")
    cloud_ids = list(cloud_ids) if cloud_ids is not None else [f"{index:05d}" for index in range(len(clouds))]
    if len(cloud_ids) != len(clouds):
        raise AttackError("cloud_ids and batch differ in length")

    targets = [AttackTarget.from_cloud(cloud, cfg.knn_k) for cloud in clouds]
    candidate_lists = [
        draw_candidates(source_labels, target.label, cfg.candidate_pool, (cfg.seed, index))
        for index, target in enumerate(targets)
    ]

    n = clouds[0].n
    mask = make_mask(n, cfg.low_band or default_low_band(n), cfg.alpha_low, cfg.alpha_high)
    metric = _initial_metric(targets, source, candidate_lists, cfg)

    jobs = [
        (target, cloud_id, [source[index] for index in picked], picked, mask, surrogate, cfg)
        for target, cloud_id, picked in zip(targets, cloud_ids, candidate_lists)
    ]

    outcomes: List[AttackOutcome] = []
    if AttackMode(mode) is AttackMode.SEQUENTIAL_SHARED_M or len(jobs) == 1:
        for target, cloud_id, candidates, picked, mask_, model, config in tqdm(jobs, desc="attack", disable=None):
            outcome = attack_single(target, cloud_id, candidates, picked, metric, mask_, model, config)
            metric = outcome.metric
            outcomes.append(outcome)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(attack_single, job[0], job[1], job[2], job[3], metric, *job[4:]) for job in jobs]
            outcomes = [future.result() for future in tqdm(futures, desc="attack", disable=None)]

    return BatchAttackResult(
        adversarial=[outcome.adversarial for outcome in outcomes],
        reports=[outcome.report for outcome in outcomes],
        metric=metric,
    )


def _initial_metric(
    targets: Sequence[AttackTarget],
    source: Sequence[PointCloud],
    candidate_lists: Sequence[Sequence[int]],
    cfg: AttackConfig,
) -> MixMetric:
    """M₀ from the batch variance, optionally rescaled to unit median distance.

    A one-cloud batch has no variance, so it starts from the identity.
    """

    n = targets[0].cloud.n
    if len(targets) >= 2:
        metric = init_metric([target.spectral.coeffs for target in targets], epsilon=cfg.metric_epsilon)
    else:
        metric = MixMetric(m_diag=np.ones(n), epsilon=cfg.metric_epsilon)
    if cfg.metric_calibration:
        pairs = [
            (target.spectral.coeffs, gft(source[index], target.basis).coeffs)
            for target, picked in zip(targets, candidate_lists)
            for index in picked
        ]
        metric = calibrate_metric(metric, pairs)
    return metric


def _skipped_report(cloud_id: str, label: int, prediction: int, variant: str) -> AttackReport:
    return AttackReport(
        cloud_id=cloud_id,
        true_label=label,
        surrogate_pred=prediction,
        success=False,
        d_hausdorff=0.0,
        d_chamfer=0.0,
        d_norm=0.0,
        steps_used=0,
        variant=variant,
        skipped=True,
    )


# ======================
# BASELINE
# ======================


def baseline_ifgsm(
    cloud: PointCloud,
    y: int,
    surrogate: MiniPointNet,
    steps: int,
    step_size: float,
    eps_xyz: float,
    kappa: float = 0.0,
    norm_target: Optional[float] = None,
) -> PointCloud:
    """Iterative signed-gradient descent on the margin loss.

    Every step clips to the L∞ box of radius ``eps_xyz`` and then caps each
    point's L2 displacement at ``eps_xyz``, the budget the spectral attack
    obeys. With ``norm_target`` the final displacement is rescaled to that
    Frobenius norm, as far as the per-point cap allows.
    """

    points, _ = _ifgsm(cloud, y, surrogate, steps, step_size, eps_xyz, kappa)
    if norm_target is not None:
        points = cloud.points + match_norm(points - cloud.points, norm_target, eps_xyz)
    return cloud.with_points(points)


def cap_point_norms(displacement: np.ndarray, eps_xyz: float) -> np.ndarray:
    """Shrink every row longer than eps_xyz onto the eps_xyz sphere."""

    norms = np.linalg.norm(displacement, axis=1, keepdims=True)
    return displacement * np.minimum(1.0, eps_xyz / np.maximum(norms, np.finfo(float).tiny))


def match_norm(displacement: np.ndarray, target: float, eps_xyz: float) -> np.ndarray:
    """Scale a displacement to Frobenius norm ``target`` under the per-point cap.

    Rows that hit the cap stay there while the rest keep growing. When every
    moving row is capped and the norm is still short, the capped displacement
    is returned.
    """

    if target < 0.0:
        raise AttackError(f"norm target must be non-negative, got {target}")
    norms = np.linalg.norm(displacement, axis=1)
    moving = norms > 0.0
    if target == 0.0 or not np.any(moving):
        return np.zeros_like(displacement)

    def reached(scale: float) -> float:
        return float(np.linalg.norm(cap_point_norms(displacement * scale, eps_xyz)))

    low, high = 0.0, eps_xyz / float(np.min(norms[moving]))
    if reached(high) <= target:
        return cap_point_norms(displacement * high, eps_xyz)
    for _ in range(MATCH_BISECTIONS):
        middle = 0.5 * (low + high)
        if reached(middle) < target:
            low = middle
        else:
            high = middle
    return cap_point_norms(displacement * high, eps_xyz)


def _ifgsm(
    cloud: PointCloud,
    y: int,
    surrogate: MiniPointNet,
    steps: int,
    step_size: float,
    eps_xyz: float,
    kappa: float,
) -> Tuple[np.ndarray, int]:
    clean = cloud.points
    points = clean.copy()
    for step in range(steps):
        losses, grad_logits = _margin_terms(forward(surrogate, points)[None], y, kappa)
        if losses[0] <= 0.0:
            return points, step
        gradient = input_gradient(surrogate, points, grad_logits[0])
        stepped = np.clip(points - step_size * np.sign(gradient), clean - eps_xyz, clean + eps_xyz)
        points = clean + cap_point_norms(stepped - clean, eps_xyz)
    return points, steps


def ifgsm_single(
    cloud: PointCloud,
    cloud_id: str,
    surrogate: MiniPointNet,
    cfg: AttackConfig,
    norm_target: Optional[float] = None,
) -> AttackOutcome:
    """Baseline attack with the same step budget as the spectral attack."""

    prediction = int(predict(surrogate, cloud))
    if prediction != cloud.label:
        return AttackOutcome(
            report=_skipped_report(cloud_id, cloud.label, prediction, AttackMethod.IFGSM.value),
            adversarial=cloud,
        )
    points, steps_used = _ifgsm(
        cloud, cloud.label, surrogate, cfg.total_steps, cfg.ifgsm_step_size, cfg.eps_xyz, cfg.margin_kappa
    )
    if norm_target is not None:
        points = cloud.points + match_norm(points - cloud.points, norm_target, cfg.eps_xyz)
    adversarial = cloud.with_points(points)
    adv_prediction = int(predict(surrogate, adversarial))
    return AttackOutcome(
        report=AttackReport(
            cloud_id=cloud_id,
            true_label=int(cloud.label),
            surrogate_pred=adv_prediction,
            success=adv_prediction != cloud.label,
            d_hausdorff=hausdorff(cloud, adversarial),
            d_chamfer=chamfer(cloud, adversarial),
            d_norm=l2_norm_dist(cloud, adversarial),
            steps_used=steps_used,
            variant=AttackMethod.IFGSM.value,
        ),
        adversarial=adversarial,
    )


def run_attack(
    method: AttackMethod,
    batch: LabeledDataset,
    surrogate: MiniPointNet,
    cfg: AttackConfig,
    mode: AttackMode = AttackMode.SEQUENTIAL_SHARED_M,
    workers: int = 1,
    candidate_source: Optional[LabeledDataset] = None,
    cloud_ids: Optional[Sequence[str]] = None,
    norm_targets: Optional[Sequence[float]] = None,
) -> BatchAttackResult:
    """Dispatch one attack method over a batch.

    ``norm_targets`` applies to the baseline only: one Frobenius norm per cloud.
    """

    method = AttackMethod(method)
    if method is AttackMethod.IFGSM:
        cloud_ids = list(cloud_ids) if cloud_ids is not None else list(batch.cloud_ids)
        targets: List[Optional[float]] = list(norm_targets) if norm_targets is not None else [None] * len(batch)
        if len(targets) != len(batch):
            raise AttackError(f"got {len(targets)} norm targets for {len(batch)} clouds")
        outcomes = [
            ifgsm_single(cloud, cloud_id, surrogate, cfg, target)
            for cloud, cloud_id, target in tqdm(list(zip(batch.clouds, cloud_ids, targets)), desc="ifgsm", disable=None)
        ]
        return BatchAttackResult(
            adversarial=[outcome.adversarial for outcome in outcomes],
            reports=[outcome.report for outcome in outcomes],
        )

    cfg = cfg.model_copy(update={"path_selection": method is AttackMethod.SAAO})
    return attack_batch(batch, surrogate, cfg, mode, workers, candidate_source, cloud_ids)
