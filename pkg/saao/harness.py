"""Experiment orchestration: data, training, attacks, transfer matrix, defenses.

`ExperimentRunner` coordinates the domain modules without owning their
algorithms. Every entrypoint takes validated `ExperimentSettings`, writes its
tables through a `ReportRepository`, and returns the numbers it wrote.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attack import AttackReport, BatchAttackResult, run_attack
from .classifier import MiniPointNet, evaluate, load_model, predict, save_model, train
from .defense import apply_defense
from .errors import ConfigError, SaaoError
from .geometry import (
    LabeledDataset,
    PointCloud,
    generate_dataset,
    load_cloud,
    load_dataset,
    manifest_path,
    save_cloud,
    save_dataset,
    stratified_subset,
)
from .graph_spectral import compute_basis, gft, spectral_energy
from .pipeline_logger import PipelineLogger
from .report_repository import ReportRepository, write_csv
from .saao_config import ExperimentSettings
from .saao_state import AttackMethod, DatasetSplit

logger = logging.getLogger(__name__)

UNDEFENDED = "none"


@dataclass(frozen=True)
class TransferCell:
    method: str
    surrogate: str
    victim: str
    asr: float
    evaluated: int
    fooled: int

    @property
    def white_box(self) -> bool:
        return self.surrogate == self.victim


@dataclass(frozen=True)
class DistanceSummary:
    method: str
    surrogate: str
    mean_hausdorff: float
    mean_chamfer: float
    mean_norm: float
    attacked: int


@dataclass(frozen=True)
class TransferMatrix:
    """ASR per (method, surrogate, victim) plus mean distortion per surrogate."""

    cells: List[TransferCell] = field(default_factory=list)
    distances: List[DistanceSummary] = field(default_factory=list)
    seed: int = 0
    sample_count: int = 0

    def asr(self, method: str, surrogate: str, victim: str) -> float:
        for cell in self.cells:
            if (cell.method, cell.surrogate, cell.victim) == (method, surrogate, victim):
                return cell.asr
        raise KeyError((method, surrogate, victim))


@dataclass(frozen=True)
class DefenseRow:
    method: str
    surrogate: str
    victim: str
    defense: str
    asr: float
    evaluated: int
    fooled: int


@dataclass(frozen=True)
class AblationRow:
    seed: int
    victim: str
    with_selection: float
    without_selection: float

    @property
    def delta(self) -> float:
        return self.with_selection - self.without_selection


@dataclass(frozen=True)
class AblationResult:
    rows: List[AblationRow] = field(default_factory=list)

    @property
    def mean_delta(self) -> float:
        return float(np.mean([row.delta for row in self.rows])) if self.rows else 0.0


class ExperimentRunner:
    """Run CLI commands against injected loaders and an output repository."""

    def __init__(
        self,
        repository_factory: Optional[Callable[[str], ReportRepository]] = None,
        model_loader: Optional[Callable[[str], MiniPointNet]] = None,
        dataset_loader: Optional[Callable[..., LabeledDataset]] = None,
        pipeline_logger: Optional[PipelineLogger] = None,
    ) -> None:
        self.repository_factory = repository_factory or ReportRepository
        self.model_loader = model_loader or load_model
        self.dataset_loader = dataset_loader or load_dataset
        self.pipeline_logger = pipeline_logger

    # ======================
    # DATA AND MODELS
    # ======================

    def generate_data(self, settings: ExperimentSettings) -> Dict[str, int]:
        """Write train and test splits under data_dir."""

        counts = {}
        for split, per_class in (
            (DatasetSplit.TRAIN, settings.per_class_train),
            (DatasetSplit.TEST, settings.per_class_test),
        ):
            self._start(f"generate {split.value}")
            dataset = generate_dataset(
                per_class=per_class,
                n=settings.points,
                seed=settings.seed,
                jitter=settings.jitter,
                split=split,
                class_count=settings.class_count,
            )
            save_dataset(dataset, settings.data_dir)
            counts[split.value] = len(dataset)
            self._end(f"generate {split.value}", clouds=len(dataset))
        return counts

    def train_model(self, settings: ExperimentSettings) -> Dict[str, float]:
        self._start("train", arch=settings.arch.value)
        dataset = self.dataset_loader(settings.data_dir, DatasetSplit.TRAIN, settings.class_count)
        model = train(dataset, settings.arch, settings.train_config())
        path = Path(settings.model_out or Path(settings.data_dir) / f"model_{settings.arch.value}.mdl")
        save_model(path, model)
        result = {"train_accuracy": evaluate(model, dataset)}
        if manifest_path(settings.data_dir, DatasetSplit.TEST).exists():
            test = self.dataset_loader(settings.data_dir, DatasetSplit.TEST, settings.class_count)
            result["test_accuracy"] = evaluate(model, test)
        self._end("train", model=str(path), **result)
        return result

    # ======================
    # ATTACKS
    # ======================

    def attack(self, settings: ExperimentSettings) -> Dict[str, List[AttackReport]]:
        """Attack the evaluation set with every configured method against one surrogate."""

        if not settings.surrogate:
            raise ConfigError("attack needs --surrogate <model file>")
        surrogate_name, surrogate = self._load_models([settings.surrogate])[0]
        evaluation, cloud_ids = self._evaluation_set(settings, settings.seed)
        repository = self.repository_factory(settings.out_dir)

        reports: Dict[str, List[AttackReport]] = {}
        rows: List[Tuple[str, str, AttackReport]] = []
        summaries: List[DistanceSummary] = []
        matched: Dict[str, List[float]] = {}
        for method in _ordered_methods(settings):
            result = self._attack_set(
                method, evaluation, cloud_ids, surrogate, surrogate_name, settings, repository, matched.get(surrogate_name)
            )
            _remember_norms(matched, method, surrogate_name, result)
            reports[method.value] = result.reports
            rows.extend((method.value, surrogate_name, report) for report in result.reports)
            summaries.append(_distance_summary(method.value, surrogate_name, result.reports))

        repository.write_attack_reports("attack_reports", rows)
        _write_distances(repository, summaries)
        repository.write_summary({"command": "attack", "settings": settings, "distances": summaries, **self._timings()})
        return reports

    def run_transfer_matrix(self, settings: ExperimentSettings) -> TransferMatrix:
        """Attack with each model as surrogate, then classify with every model."""

        models = self._load_models(settings.model_paths() or ([settings.surrogate] if settings.surrogate else []))
        evaluation, cloud_ids = self._evaluation_set(settings, settings.seed)
        repository = self.repository_factory(settings.out_dir)

        cells: List[TransferCell] = []
        summaries: List[DistanceSummary] = []
        rows: List[Tuple[str, str, AttackReport]] = []
        matched: Dict[str, List[float]] = {}
        for method in _ordered_methods(settings):
            for surrogate_name, surrogate in models:
                result = self._attack_set(
                    method, evaluation, cloud_ids, surrogate, surrogate_name, settings, repository, matched.get(surrogate_name)
                )
                _remember_norms(matched, method, surrogate_name, result)
                rows.extend((method.value, surrogate_name, report) for report in result.reports)
                summaries.append(_distance_summary(method.value, surrogate_name, result.reports))
                for victim_name, victim in models:
                    evaluated, fooled = success_counts(victim, evaluation.clouds, result.adversarial)
                    cells.append(TransferCell(method.value, surrogate_name, victim_name, _rate(fooled, evaluated), evaluated, fooled))

        matrix = TransferMatrix(cells=cells, distances=summaries, seed=settings.seed, sample_count=len(evaluation))
        repository.write_attack_reports("attack_reports", rows)
        repository.write_table(
            "transfer_matrix",
            ["method", "surrogate", "victim", "asr", "evaluated", "fooled", "white_box"],
            (
                {
                    "method": cell.method,
                    "surrogate": cell.surrogate,
                    "victim": cell.victim,
                    "asr": cell.asr,
                    "evaluated": cell.evaluated,
                    "fooled": cell.fooled,
                    "white_box": cell.white_box,
                }
                for cell in cells
            ),
        )
        _write_distances(repository, summaries)
        logger.info("transfer matrix\n%s", format_matrix(matrix))
        repository.write_summary({"command": "transfer-matrix", "settings": settings, "matrix": matrix, **self._timings()})
        return matrix

    def run_defense_eval(self, settings: ExperimentSettings) -> List[DefenseRow]:
        """ASR against each victim with no defense and with every configured defense."""

        if not settings.surrogate:
            raise ConfigError("defense-eval needs --surrogate <model file>")
        surrogate_name, surrogate = self._load_models([settings.surrogate])[0]
        victims = self._load_models(settings.victim_paths()) if settings.victim_paths() else [(surrogate_name, surrogate)]
        evaluation, cloud_ids = self._evaluation_set(settings, settings.seed)
        repository = self.repository_factory(settings.out_dir)
        defenses = [(UNDEFENDED, None)] + [(kind.value, settings.defense_config(kind)) for kind in settings.defense_kinds()]

        rows: List[DefenseRow] = []
        matched: Dict[str, List[float]] = {}
        for method in _ordered_methods(settings):
            result = self._attack_set(
                method, evaluation, cloud_ids, surrogate, surrogate_name, settings, repository, matched.get(surrogate_name)
            )
            _remember_norms(matched, method, surrogate_name, result)
            for victim_name, victim in victims:
                for defense_name, defense_cfg in defenses:
                    defended = (
                        result.adversarial
                        if defense_cfg is None
                        else [apply_defense(cloud, defense_cfg, index) for index, cloud in enumerate(result.adversarial)]
                    )
                    evaluated, fooled = success_counts(victim, evaluation.clouds, defended)
                    rows.append(
                        DefenseRow(method.value, surrogate_name, victim_name, defense_name, _rate(fooled, evaluated), evaluated, fooled)
                    )

        repository.write_table(
            "defense_eval",
            ["method", "surrogate", "victim", "defense", "asr", "evaluated", "fooled"],
            (row.__dict__ for row in rows),
        )
        repository.write_summary({"command": "defense-eval", "settings": settings, "rows": rows, **self._timings()})
        return rows

    def run_ablation(self, settings: ExperimentSettings) -> AblationResult:
        """Transfer ASR with and without path selection over consecutive seeds."""

        if not settings.surrogate:
            raise ConfigError("ablation needs --surrogate <model file>")
        if not settings.victim_paths():
            raise ConfigError("ablation needs --victims <model files>")
        surrogate_name, surrogate = self._load_models([settings.surrogate])[0]
        victims = self._load_models(settings.victim_paths())
        repository = self.repository_factory(settings.out_dir)

        rows: List[AblationRow] = []
        for seed in range(settings.seed, settings.seed + settings.ablation_seeds):
            evaluation, cloud_ids = self._evaluation_set(settings, seed)
            rates: Dict[AttackMethod, Dict[str, float]] = {}
            for method in (AttackMethod.SAAO, AttackMethod.SAAO_NO_PATH):
                result = run_attack(
                    method,
                    evaluation,
                    surrogate,
                    settings.attack_config(method, seed=seed),
                    settings.mode,
                    settings.workers,
                    cloud_ids=cloud_ids,
                )
                rates[method] = {}
                for victim_name, victim in victims:
                    evaluated, fooled = success_counts(victim, evaluation.clouds, result.adversarial)
                    rates[method][victim_name] = _rate(fooled, evaluated)
            for victim_name, _ in victims:
                rows.append(
                    AblationRow(seed, victim_name, rates[AttackMethod.SAAO][victim_name], rates[AttackMethod.SAAO_NO_PATH][victim_name])
                )

        ablation = AblationResult(rows=rows)
        repository.write_table(
            "ablation",
            ["seed", "surrogate", "victim", "asr_with_selection", "asr_without_selection", "delta"],
            (
                {
                    "seed": row.seed,
                    "surrogate": surrogate_name,
                    "victim": row.victim,
                    "asr_with_selection": row.with_selection,
                    "asr_without_selection": row.without_selection,
                    "delta": row.delta,
                }
                for row in rows
            ),
        )
        logger.info("path selection mean ASR gain %.4f over %d runs", ablation.mean_delta, len(rows))
        repository.write_summary(
            {"command": "ablation", "settings": settings, "rows": rows, "mean_delta": ablation.mean_delta, **self._timings()}
        )
        return ablation

    # ======================
    # SINGLE FILES
    # ======================

    def defend_file(self, settings: ExperimentSettings) -> PointCloud:
        if not settings.input or not settings.output:
            raise ConfigError("defend needs --in <cloud file> and --out <cloud file>")
        cloud = load_cloud(settings.input)
        defended = apply_defense(cloud, settings.defense_config(settings.kind))
        save_cloud(settings.output, defended)
        logger.info("%s kept %d of %d points", settings.kind.value, defended.n, cloud.n)
        return defended

    def spectrum(self, settings: ExperimentSettings) -> Path:
        """Write row_index, eigenvalue and energy of one cloud's spectrum."""

        if not settings.input:
            raise ConfigError("gft needs --in <cloud file>")
        cloud = load_cloud(settings.input)
        basis = compute_basis(cloud, settings.knn_k)
        energy = spectral_energy(gft(cloud, basis))
        output = settings.output or str(Path(settings.out_dir) / "spectrum.csv")
        return write_csv(
            output,
            "spectrum",
            ["row_index", "eigenvalue", "energy"],
            (
                {"row_index": index, "eigenvalue": float(value), "energy": float(row_energy)}
                for index, (value, row_energy) in enumerate(zip(basis.eigenvalues, energy))
            ),
        )

    # ======================
    # HELPERS
    # ======================

    def _attack_set(
        self,
        method: AttackMethod,
        evaluation: LabeledDataset,
        cloud_ids: Sequence[str],
        surrogate: MiniPointNet,
        surrogate_name: str,
        settings: ExperimentSettings,
        repository: ReportRepository,
        saao_norms: Optional[Sequence[float]] = None,
    ) -> BatchAttackResult:
        phase = f"{method.value} on {surrogate_name}"
        norm_targets = _norm_targets(method, settings, saao_norms)
        self._start(phase, clouds=len(evaluation))
        result = run_attack(
            method,
            evaluation,
            surrogate,
            settings.attack_config(method),
            settings.mode,
            settings.workers,
            cloud_ids=cloud_ids,
            norm_targets=norm_targets,
        )
        for cloud_id, adversarial in zip(cloud_ids, result.adversarial):
            repository.save_adversarial(method.value, surrogate_name, cloud_id, adversarial)
        successes = sum(report.success for report in result.reports)
        self._end(phase, successes=successes)
        return result

    def _load_models(self, paths: Sequence[str]) -> List[Tuple[str, MiniPointNet]]:
        if not paths:
            raise ConfigError("no model files given (use --models or --surrogate)")
        models = []
        for path in paths:
            if not Path(path).exists():
                raise ConfigError(f"model file {path} does not exist")
            models.append((Path(path).stem, self.model_loader(path)))
        return models

    def _evaluation_set(self, settings: ExperimentSettings, seed: int) -> Tuple[LabeledDataset, List[str]]:
        test = self.dataset_loader(settings.data_dir, DatasetSplit.TEST, settings.class_count)
        if len(test) == 0:
            raise SaaoError(f"the test split under {settings.data_dir} is empty")
        evaluation = stratified_subset(test, settings.eval_count, seed)
        return evaluation, list(evaluation.cloud_ids)

    def _start(self, phase: str, **counters) -> None:
        if self.pipeline_logger is not None:
            self.pipeline_logger.start(phase, **counters)

    def _end(self, phase: str, **counters) -> None:
        if self.pipeline_logger is not None:
            self.pipeline_logger.end(phase, **counters)

    def _timings(self) -> Dict[str, object]:
        if self.pipeline_logger is None:
            return {}
        return {"timings": self.pipeline_logger.snapshot()}


def _ordered_methods(settings: ExperimentSettings) -> List[AttackMethod]:
    """Configured methods; with matching on, the baseline runs after the spectral attacks."""

    methods = settings.method_list()
    if settings.match_distortion:
        methods.sort(key=lambda method: method is AttackMethod.IFGSM)
    return methods


def _remember_norms(
    matched: Dict[str, List[float]], method: AttackMethod, surrogate_name: str, result: BatchAttackResult
) -> None:
    if method is AttackMethod.SAAO:
        matched[surrogate_name] = [report.d_norm for report in result.reports]


def _norm_targets(
    method: AttackMethod, settings: ExperimentSettings, saao_norms: Optional[Sequence[float]]
) -> Optional[List[float]]:
    if method is not AttackMethod.IFGSM or not settings.match_distortion:
        return None
    if saao_norms is None:
        logger.warning("match_distortion is on but saao is not among the methods; ifgsm keeps its own D_norm")
        return None
    return list(saao_norms)


def success_counts(
    victim: MiniPointNet,
    clean: Sequence[PointCloud],
    adversarial: Sequence[PointCloud],
) -> Tuple[int, int]:
    """(clouds the victim classifies correctly when clean, how many of those it gets wrong after the attack)."""

    evaluated = fooled = 0
    for clean_cloud, adv_cloud in zip(clean, adversarial):
        if int(predict(victim, clean_cloud)) != clean_cloud.label:
            continue
        evaluated += 1
        fooled += int(predict(victim, adv_cloud)) != clean_cloud.label
    return evaluated, fooled


def format_matrix(matrix: TransferMatrix) -> str:
    """Plain-text table: one row per (method, surrogate), one column per victim; '*' marks white box."""

    victims = sorted({cell.victim for cell in matrix.cells})
    rows = sorted({(cell.method, cell.surrogate) for cell in matrix.cells})
    lines = ["method/surrogate".ljust(24) + "".join(victim.rjust(12) for victim in victims)]
    for method, surrogate in rows:
        line = f"{method}/{surrogate}".ljust(24)
        for victim in victims:
            asr = matrix.asr(method, surrogate, victim)
            line += (f"{100 * asr:.1f}%" + ("*" if victim == surrogate else " ")).rjust(12)
        lines.append(line)
    return "\n".join(lines)


def _distance_summary(method: str, surrogate: str, reports: Sequence[AttackReport]) -> DistanceSummary:
    attacked = [report for report in reports if not report.skipped]
    if not attacked:
        return DistanceSummary(method, surrogate, 0.0, 0.0, 0.0, 0)
    return DistanceSummary(
        method=method,
        surrogate=surrogate,
        mean_hausdorff=float(np.mean([report.d_hausdorff for report in attacked])),
        mean_chamfer=float(np.mean([report.d_chamfer for report in attacked])),
        mean_norm=float(np.mean([report.d_norm for report in attacked])),
        attacked=len(attacked),
    )


def _write_distances(repository: ReportRepository, summaries: Sequence[DistanceSummary]) -> Path:
    return repository.write_table(
        "distances",
        ["method", "surrogate", "mean_D_h", "mean_D_c", "mean_D_norm", "attacked"],
        (
            {
                "method": summary.method,
                "surrogate": summary.surrogate,
                "mean_D_h": summary.mean_hausdorff,
                "mean_D_c": summary.mean_chamfer,
                "mean_D_norm": summary.mean_norm,
                "attacked": summary.attacked,
            }
            for summary in summaries
        ),
    )


def _rate(fooled: int, evaluated: int) -> float:
    return fooled / evaluated if evaluated else 0.0


def run_transfer_matrix(cfg: ExperimentSettings) -> TransferMatrix:
    return ExperimentRunner().run_transfer_matrix(cfg)


def run_defense_eval(cfg: ExperimentSettings) -> List[DefenseRow]:
    return ExperimentRunner().run_defense_eval(cfg)


def run_ablation(cfg: ExperimentSettings) -> AblationResult:
    return ExperimentRunner().run_ablation(cfg)
