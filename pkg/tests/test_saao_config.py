import tempfile
import unittest
from pathlib import Path

from pydantic import ValidationError

from saao.errors import ConfigError
from saao.saao_config import (
    AttackConfig,
    AttackParameters,
    ExperimentSettings,
    build_settings,
    load_config_file,
    parse_overrides,
    valid_keys,
)
from saao.saao_state import AttackMethod, AttackMode, DefenseKind

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class AttackConfigTests(unittest.TestCase):
    def test_defaults(self):
        cfg = AttackConfig()

        self.assertEqual(cfg.total_steps, 110)
        self.assertEqual((cfg.b_low, cfg.b_up), (0.1, 0.9))
        self.assertTrue(cfg.path_selection)

    def test_admix_bounds_checked(self):
        with self.assertRaises(ValidationError):
            AttackConfig(b_low=0.9, b_up=0.1)

    def test_mask_weights_checked(self):
        with self.assertRaises(ValidationError):
            AttackConfig(alpha_low=0.2, alpha_high=0.5)

    def test_selection_cannot_exceed_pool(self):
        with self.assertRaises(ValidationError):
            AttackConfig(selected_paths=5, candidate_pool=4)

    def test_warmup_must_be_shorter_than_the_main_phase(self):
        with self.assertRaises(ValidationError):
            AttackConfig(steps=5, warmup_steps=5)
        self.assertEqual(AttackConfig(steps=0, warmup_steps=0).total_steps, 0)

    def test_unknown_field_rejected(self):
        with self.assertRaises(ValidationError):
            AttackConfig(step=3)


class ConfigFileTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "run.conf"

    def test_comments_and_blank_lines(self):
        self.path.write_text("# profile\n\nsteps = 7   # short\nout-dir = out/x\n", encoding="utf-8")

        self.assertEqual(load_config_file(self.path), {"steps": "7", "out_dir": "out/x"})

    def test_duplicate_key_names_both_lines(self):
        self.path.write_text("steps = 7\nseed = 1\nsteps = 8\n", encoding="utf-8")

        with self.assertRaises(ConfigError) as context:
            load_config_file(self.path)

        self.assertIn(":3:", str(context.exception))
        self.assertIn("line 1", str(context.exception))

    def test_line_without_separator_rejected(self):
        self.path.write_text("steps 7\n", encoding="utf-8")

        with self.assertRaises(ConfigError):
            load_config_file(self.path)

    def test_missing_file_is_a_config_error(self):
        with self.assertRaises(ConfigError):
            load_config_file(Path(self.tmp.name) / "absent.conf")

    def test_shipped_profiles_validate(self):
        desk = build_settings(load_config_file(CONFIG_DIR / "desk.conf"))
        full = build_settings(load_config_file(CONFIG_DIR / "full.conf"))

        self.assertIsNone(desk.low_band)
        self.assertEqual(desk.attack_config().total_steps, 110)
        self.assertGreater(full.steps, desk.steps)
        self.assertEqual(desk.defense_kinds(), [DefenseKind.SRS, DefenseKind.SOR])


class OverrideTests(unittest.TestCase):
    def test_pairs_and_inline_values(self):
        values = parse_overrides(["--steps", "5", "--eps-xyz=0.05"])

        self.assertEqual(values, {"steps": "5", "eps_xyz": "0.05"})

    def test_missing_value_rejected(self):
        with self.assertRaises(ConfigError):
            parse_overrides(["--steps"])

    def test_positional_token_rejected(self):
        with self.assertRaises(ConfigError):
            parse_overrides(["steps", "5"])

    def test_later_sources_win(self):
        settings = build_settings({"steps": "9", "seed": "1"}, {"steps": "12"})

        self.assertEqual(settings.steps, 12)
        self.assertEqual(settings.seed, 1)


class SettingsTests(unittest.TestCase):
    def test_unknown_key_lists_valid_keys(self):
        with self.assertRaises(ConfigError) as context:
            build_settings({"stepz": "3"})

        message = str(context.exception)
        self.assertIn("stepz", message)
        self.assertIn("eps_xyz", message)

    def test_invalid_value_is_a_config_error(self):
        with self.assertRaises(ConfigError):
            build_settings({"steps": "many"})

    def test_cross_field_checks_apply(self):
        with self.assertRaises(ConfigError):
            build_settings({"b_low": "0.8", "b_up": "0.2"})

    def test_unknown_method_rejected(self):
        with self.assertRaises(ConfigError):
            build_settings({"methods": "saao,pgd"})

    def test_none_token_clears_optional_keys(self):
        settings = build_settings({"low_band": "none", "surrogate": "null"})

        self.assertIsNone(settings.low_band)
        self.assertIsNone(settings.surrogate)

    def test_attack_keys_share_defaults_and_bounds_with_attack_config(self):
        settings = ExperimentSettings()

        for name, field in AttackParameters.model_fields.items():
            self.assertEqual(ExperimentSettings.model_fields[name].annotation, field.annotation, name)
            self.assertEqual(getattr(settings, name), AttackConfig.model_fields[name].default, name)
        self.assertEqual(
            settings.attack_config().model_dump(exclude={"path_selection", "seed"}),
            AttackConfig().model_dump(exclude={"path_selection", "seed"}),
        )

    def test_bounds_reported_on_the_settings_key(self):
        with self.assertRaises(ConfigError) as context:
            build_settings({"eps_xyz": "-0.1"})

        self.assertIn("eps_xyz", str(context.exception))
        with self.assertRaises(ConfigError):
            build_settings({"sor_k": "0"})
        with self.assertRaises(ConfigError):
            build_settings({"epochs": "0"})

    def test_attack_config_follows_method(self):
        settings = ExperimentSettings(steps=20, warmup_steps=4, seed=3)

        selected = settings.attack_config(AttackMethod.SAAO)
        unselected = settings.attack_config(AttackMethod.SAAO_NO_PATH, seed=11)

        self.assertTrue(selected.path_selection)
        self.assertFalse(unselected.path_selection)
        self.assertEqual((selected.seed, unselected.seed), (3, 11))
        self.assertEqual(selected.steps, 20)

    def test_lists_are_split(self):
        settings = ExperimentSettings(models="a.mdl, b.mdl", victims="", methods="saao-nopath")

        self.assertEqual(settings.model_paths(), ["a.mdl", "b.mdl"])
        self.assertEqual(settings.victim_paths(), [])
        self.assertEqual(settings.method_list(), [AttackMethod.SAAO_NO_PATH])

    def test_mode_parsed_from_string(self):
        self.assertEqual(build_settings({"mode": "parallel-per-worker-M"}).mode, AttackMode.PARALLEL_PER_WORKER_M)

    def test_valid_keys_sorted(self):
        keys = valid_keys()

        self.assertEqual(keys, sorted(keys))
        self.assertIn("srs_keep_ratio", keys)


if __name__ == "__main__":
    unittest.main()
