import os
import tempfile
import unittest

from modules.config import (
    REAL_PROMPT,
    DiffusionConfig,
    Stage1Config,
    Stage2Config,
    SynthConfig,
    build_run_config,
    load_config_file,
)
from modules.errors import ConfigError, EmptyTextPool, InvalidRange


class TestConfig(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmpdir.cleanup()

    def write_config(self, text):
        """Helper function to write a key=value config file."""
        path = os.path.join(self.tmpdir.name, "seal2real.env")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_defaults_validate(self):
        """Test every default section passes validation."""
        cfg = build_run_config("synth")
        self.assertEqual(cfg.stage1.real_prompt, REAL_PROMPT)
        self.assertEqual(cfg.diffusion.steps, 200)
        self.assertEqual(cfg.stage2.alpha, (0.2, 0.2, 0.2, 0.2, 0.2))

    def test_file_values_are_typed(self):
        """Test file values are converted to the field types."""
        path = self.write_config(
            "stage1.max_steps=25\nstage2.w=0.5\nstage2.identity_features=true\n"
            "synth.text_pool=ACME,BANK\neval.seeds=1,2\n"
        )
        cfg = build_run_config("train-stage1", config_path=path)
        self.assertEqual(cfg.stage1.max_steps, 25)
        self.assertEqual(cfg.stage2.w, 0.5)
        self.assertTrue(cfg.stage2.identity_features)
        self.assertEqual(cfg.synth.text_pool, ("ACME", "BANK"))
        self.assertEqual(cfg.eval.seeds, (1, 2))

    def test_flags_override_file(self):
        """Test flag overrides win over the file and None leaves the file value."""
        path = self.write_config("stage1.max_steps=25\nstage1.k_p=7\n")
        cfg = build_run_config("train-stage1", config_path=path,
                               overrides={"stage1": {"max_steps": 3, "k_p": None}})
        self.assertEqual(cfg.stage1.max_steps, 3)
        self.assertEqual(cfg.stage1.k_p, 7)

    def test_unknown_keys_rejected(self):
        """Test unknown sections, fields and bare keys are configuration errors."""
        for text in ("stage1.nonsense=1\n", "physics.g=9.8\n", "max_steps=3\n"):
            with self.assertRaises(ConfigError):
                build_run_config("synth", config_path=self.write_config(text))

    def test_unparseable_value(self):
        """Test a non-numeric value for an integer field is rejected."""
        path = self.write_config("stage1.max_steps=many\n")
        with self.assertRaises(ConfigError):
            build_run_config("synth", config_path=path)

    def test_missing_file(self):
        """Test a missing config file is reported."""
        with self.assertRaises(ConfigError):
            load_config_file(os.path.join(self.tmpdir.name, "absent.env"))

    def test_section_validation(self):
        """Test invalid section values raise the matching errors."""
        with self.assertRaises(EmptyTextPool):
            SynthConfig(text_pool=()).validate()
        with self.assertRaises(InvalidRange):
            SynthConfig(radius_range=(40.0, 60.0)).validate()
        with self.assertRaises(InvalidRange):
            DiffusionConfig(beta_max=1.0).validate()
        with self.assertRaises(ConfigError):
            Stage1Config(max_steps=-5).validate()
        with self.assertRaises(ConfigError):
            Stage2Config(alpha=(0.0,) * 5).validate()

    def test_as_dict_covers_sections(self):
        """Test the resolved configuration serializes every section."""
        record = build_run_config("synth", seed=4).as_dict()
        self.assertEqual(record["seed"], 4)
        self.assertEqual(set(record) - {"command", "seed", "out_root", "reproducible"},
                         {"synth", "diffusion", "stage1", "stage2", "eval"})


if __name__ == "__main__":
    unittest.main()
