import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from saao.attack import AttackReport, BatchAttackResult
from saao.classifier import init_model
from saao.defense import apply_defense
from saao.errors import ConfigError
from saao.geometry import LabeledDataset, as_points, generate_shape, load_cloud, save_cloud
from saao.harness import (
    ExperimentRunner,
    TransferCell,
    TransferMatrix,
    format_matrix,
    success_counts,
)
from saao.pipeline_logger import PipelineLogger
from saao.report_repository import ATTACK_REPORT_COLUMNS, ReportRepository
from saao.saao_config import ExperimentSettings
from saao.saao_state import ArchId, DatasetSplit, ShapeClass


class ExperimentRunnerTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.root = Path(tempfile.mkdtemp())
        cls.base = dict(
            data_dir=str(cls.root / "data"),
            per_class_train=4,
            per_class_test=3,
            points=32,
            class_count=4,
            epochs=2,
            batch_size=8,
            eval_count=8,
            steps=2,
            warmup_steps=1,
            samples_per_path=2,
            selected_paths=2,
            candidate_pool=3,
            methods="saao,ifgsm",
            seed=0,
        )
        runner = ExperimentRunner()
        runner.generate_data(ExperimentSettings(**cls.base))
        cls.accuracy = {}
        for arch in ArchId:
            cls.accuracy[arch] = runner.train_model(ExperimentSettings(**cls.base, arch=arch))
        cls.model_a = str(cls.root / "data" / "model_A.mdl")
        cls.model_b = str(cls.root / "data" / "model_B.mdl")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    def setUp(self):
        self.out = tempfile.TemporaryDirectory()
        self.addCleanup(self.out.cleanup)
        self.runner = ExperimentRunner(pipeline_logger=PipelineLogger("test"))

    def _settings(self, **overrides):
        values = dict(self.base, out_dir=self.out.name)
        values.update(overrides)
        return ExperimentSettings(**values)

    def _first_line(self, name):
        with (Path(self.out.name) / name).open(encoding="utf-8") as handle:
            return handle.readline().rstrip("\n")

    def test_data_generation_is_reproducible(self):
        manifest = Path(self.base["data_dir"]) / "test.manifest"
        before = manifest.read_bytes()
        cloud_before = (Path(self.base["data_dir"]) / "test" / "cloud_00000.xyz").read_bytes()

        counts = self.runner.generate_data(self._settings())

        self.assertEqual(counts, {"train": 16, "test": 12})
        self.assertEqual(manifest.read_bytes(), before)
        self.assertEqual((Path(self.base["data_dir"]) / "test" / "cloud_00000.xyz").read_bytes(), cloud_before)

    def test_training_reports_accuracies(self):
        for result in self.accuracy.values():
            self.assertTrue(0.0 <= result["train_accuracy"] <= 1.0)
            self.assertIn("test_accuracy", result)
        self.assertTrue(Path(self.model_a).exists())

    def test_attack_needs_a_surrogate(self):
        with self.assertRaises(ConfigError):
            self.runner.attack(self._settings())

    def test_missing_model_file_is_a_config_error(self):
        with self.assertRaises(ConfigError):
            self.runner.attack(self._settings(surrogate=str(self.root / "absent.mdl")))

    def test_attack_writes_reports_and_clouds(self):
        reports = self.runner.attack(self._settings(surrogate=self.model_a))

        self.assertEqual(set(reports), {"saao", "ifgsm"})
        self.assertEqual(len(reports["saao"]), 8)
        self.assertEqual(self._first_line("attack_reports.csv"), "# schema: attack_reports v1")
        rows = ReportRepository(self.out.name).read_table("attack_reports")
        self.assertEqual(len(rows), 16)
        self.assertEqual(list(rows[0].keys()), ATTACK_REPORT_COLUMNS)
        self.assertIn(rows[0]["success"], ("true", "false"))
        for report in reports["saao"]:
            path = ReportRepository(self.out.name).adversarial_path("saao", "model_A", report.cloud_id)
            self.assertEqual(load_cloud(path).n, 32)
        summary = json.loads((Path(self.out.name) / "summary.json").read_text(encoding="utf-8"))
        self.assertEqual(summary["command"], "attack")
        self.assertIn("timings", summary)

    def test_matched_distortion_pins_the_baseline_to_saao_norms(self):
        settings = self._settings(surrogate=self.model_b, methods="ifgsm,saao", match_distortion=True)

        reports = self.runner.attack(settings)

        attacked = [
            (saao, ifgsm) for saao, ifgsm in zip(reports["saao"], reports["ifgsm"]) if not saao.skipped
        ]
        self.assertTrue(attacked)
        for saao, ifgsm in attacked:
            self.assertEqual(saao.cloud_id, ifgsm.cloud_id)
            self.assertAlmostEqual(ifgsm.d_norm, saao.d_norm, delta=1e-9)

    def test_matching_without_saao_warns_and_runs_unmatched(self):
        settings = self._settings(surrogate=self.model_b, methods="ifgsm", match_distortion=True)

        with self.assertLogs("saao.harness", level="WARNING") as captured:
            reports = self.runner.attack(settings)

        self.assertEqual(len(reports["ifgsm"]), 8)
        self.assertTrue(any("match_distortion" in line for line in captured.output))

    def test_evaluation_ids_follow_the_source_clouds(self):
        reports = self.runner.attack(self._settings(surrogate=self.model_a, methods="ifgsm"))

        ids = [report.cloud_id for report in reports["ifgsm"]]
        self.assertEqual(len(set(ids)), 8)
        for cloud_id in ids:
            self.assertTrue((Path(self.base["data_dir"]) / "test" / f"cloud_{cloud_id}.xyz").exists())

    def test_zero_step_budget_fools_nobody(self):
        settings = self._settings(models=f"{self.model_a},{self.model_b}", steps=0, warmup_steps=0)

        matrix = self.runner.run_transfer_matrix(settings)

        self.assertEqual(len(matrix.cells), 2 * 2 * 2)
        for cell in matrix.cells:
            self.assertEqual(cell.asr, 0.0)
            self.assertEqual(cell.fooled, 0)
        self.assertTrue(matrix.cells[0].white_box)
        self.assertEqual(self._first_line("transfer_matrix.csv"), "# schema: transfer_matrix v1")
        self.assertEqual(self._first_line("distances.csv"), "# schema: distances v1")

    def test_transfer_matrix_counts_only_clean_hits(self):
        matrix = self.runner.run_transfer_matrix(self._settings(models=f"{self.model_a},{self.model_b}"))

        for cell in matrix.cells:
            self.assertLessEqual(cell.fooled, cell.evaluated)
            self.assertLessEqual(cell.evaluated, 8)
            if cell.evaluated:
                self.assertAlmostEqual(cell.asr, cell.fooled / cell.evaluated)
        self.assertEqual(matrix.sample_count, 8)
        self.assertIn("*", format_matrix(matrix))

    def test_identity_defense_matches_the_undefended_row(self):
        settings = self._settings(surrogate=self.model_a, victims=self.model_b, defenses="srs", srs_keep_ratio=1.0)

        rows = self.runner.run_defense_eval(settings)

        by_key = {(row.method, row.defense): row for row in rows}
        for method in ("saao", "ifgsm"):
            self.assertEqual(by_key[(method, "srs")].asr, by_key[(method, "none")].asr)
        self.assertEqual(self._first_line("defense_eval.csv"), "# schema: defense_eval v1")

    def test_ablation_rows_per_seed_and_victim(self):
        settings = self._settings(surrogate=self.model_a, victims=self.model_b, ablation_seeds=2)

        result = self.runner.run_ablation(settings)

        self.assertEqual([(row.seed, row.victim) for row in result.rows], [(0, "model_B"), (1, "model_B")])
        for row in result.rows:
            self.assertAlmostEqual(row.delta, row.with_selection - row.without_selection)
        rows = ReportRepository(self.out.name).read_table("ablation")
        self.assertEqual(len(rows), 2)

    def test_ablation_needs_victims(self):
        with self.assertRaises(ConfigError):
            self.runner.run_ablation(self._settings(surrogate=self.model_a))

    def test_defend_and_spectrum_on_single_files(self):
        source = Path(self.out.name) / "cloud.xyz"
        save_cloud(source, generate_shape(ShapeClass.PYRAMID, 64, seed=1, jitter=0.02))
        defended_path = Path(self.out.name) / "defended.xyz"

        defended = self.runner.defend_file(
            self._settings(input=str(source), output=str(defended_path), kind="srs", srs_keep_ratio=0.5)
        )
        spectrum = self.runner.spectrum(self._settings(input=str(source)))

        self.assertEqual(defended.n, 32)
        self.assertEqual(load_cloud(defended_path).n, 32)
        self.assertEqual(self._first_line("spectrum.csv"), "# schema: spectrum v1")
        lines = spectrum.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[1], "row_index,eigenvalue,energy")
        self.assertEqual(len(lines), 2 + 64)


def has_far_point(model, cloud):
    """Stand-in victim: class 0 when any point sits outside radius 2, else class 1."""

    return 0 if float(np.max(np.linalg.norm(as_points(cloud), axis=1))) > 2.0 else 1


class DefenseEvalTests(unittest.TestCase):
    def setUp(self):
        self.out = tempfile.TemporaryDirectory()
        self.addCleanup(self.out.cleanup)
        model_path = Path(self.out.name) / "detector.mdl"
        model_path.touch()
        self.dataset = LabeledDataset(
            clouds=[generate_shape(ShapeClass.SPHERE, 32, seed=seed, jitter=0.02).with_label(1) for seed in range(6)],
            class_count=4,
            split=DatasetSplit.TEST,
        )
        self.runner = ExperimentRunner(model_loader=lambda path: object(), dataset_loader=lambda *args: self.dataset)
        self.settings = ExperimentSettings(
            out_dir=self.out.name,
            surrogate=str(model_path),
            methods="ifgsm",
            defenses="srs,sor",
            eval_count=6,
            points=32,
            class_count=4,
        )

    def _with_outlier(self, method, batch, *args, **kwargs):
        adversarial, reports = [], []
        for cloud, cloud_id in zip(batch.clouds, batch.cloud_ids):
            points = cloud.points.copy()
            points[0] = [5.0, 0.0, 0.0]
            adversarial.append(cloud.with_points(points))
            reports.append(
                AttackReport(cloud_id, 1, 0, True, 0.0, 0.0, float(np.linalg.norm(points - cloud.points)), 1, variant=method.value)
            )
        return BatchAttackResult(adversarial=adversarial, reports=reports)

    def test_sor_strips_a_lone_outlier(self):
        with patch("saao.harness.run_attack", side_effect=self._with_outlier), patch(
            "saao.harness.predict", side_effect=has_far_point
        ):
            rows = self.runner.run_defense_eval(self.settings)

        by_defense = {row.defense: row for row in rows}
        self.assertEqual(by_defense["none"].evaluated, 6)
        self.assertEqual(by_defense["none"].asr, 1.0)
        self.assertEqual(by_defense["sor"].asr, 0.0)
        self.assertLess(by_defense["sor"].asr, by_defense["none"].asr)

    def test_each_cloud_gets_its_own_defense_draw(self):
        with patch("saao.harness.run_attack", side_effect=self._with_outlier), patch(
            "saao.harness.predict", side_effect=has_far_point
        ), patch("saao.harness.apply_defense", wraps=apply_defense) as defense:
            self.runner.run_defense_eval(self.settings)

        self.assertEqual([call.args[2] for call in defense.call_args_list], list(range(6)) * 2)


class SuccessCountTests(unittest.TestCase):
    def test_unchanged_clouds_are_never_counted_as_fooled(self):
        model = init_model(ArchId.A, 4, seed=0)
        clouds = [generate_shape(shape, 32, seed=2, jitter=0.02) for shape in (0, 1, 2, 3)]

        evaluated, fooled = success_counts(model, clouds, clouds)

        self.assertEqual(fooled, 0)
        self.assertLessEqual(evaluated, 4)

    def test_format_matrix_marks_the_diagonal(self):
        matrix = TransferMatrix(
            cells=[
                TransferCell("saao", "a", "a", 0.5, 4, 2),
                TransferCell("saao", "a", "b", 0.25, 4, 1),
            ]
        )

        text = format_matrix(matrix)

        self.assertIn("50.0%*", text)
        self.assertIn("25.0% ", text)
        self.assertEqual(matrix.asr("saao", "a", "b"), 0.25)
        with self.assertRaises(KeyError):
            matrix.asr("ifgsm", "a", "b")


if __name__ == "__main__":
    unittest.main()
