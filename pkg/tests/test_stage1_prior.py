import copy
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from modules.config import Stage1Config
from modules.diffusion_core import (
    Autoencoder,
    DiffusionMeta,
    DiffusionModel,
    make_schedule,
    q_sample,
    sample,
)
from modules.errors import BadDims, EmptyBatch, EmptyDataset, EmptyString, PhaseViolation
from modules.stage1_prior import (
    PHASES,
    STEP_LOG,
    draw_pair,
    init_prompts,
    load_stage1,
    new_stage1_state,
    paired_loss_terms,
    phase_for_step,
    prompt_step,
    read_step_log,
    run_stage1,
    unet_step,
)
from modules.toy_data import class_match_rate, two_class_toy

SLOW = os.environ.get("SEAL2REAL_SLOW_TESTS") == "1"


def tiny_state(cfg=None, seed=0, image_size=8, T=10):
    torch.manual_seed(seed)
    meta = DiffusionMeta(latent_channels=3, latent_size=image_size, prompt_dim=8, T=T, channels=4)
    model = DiffusionModel(meta)
    cfg = cfg or Stage1Config(max_steps=10, k_p=2, k_u=3, batch_size=2, lr_prompt=1e-2,
                              lr_unet=1e-3)
    return new_stage1_state(model, Autoencoder(factor=1), make_schedule(T, 1e-4, 0.02), cfg,
                            prompt_len=3, seed=seed)


class TestInitPrompts(unittest.TestCase):
    def test_deterministic(self):
        """Test the same strings and seed give bit-identical matrices."""
        a_real, a_fake = init_prompts("real seal", "fake seal", 4, 8, seed=3)
        b_real, b_fake = init_prompts("real seal", "fake seal", 4, 8, seed=3)
        self.assertTrue(torch.equal(a_real.matrix, b_real.matrix))
        self.assertTrue(torch.equal(a_fake.matrix, b_fake.matrix))

    def test_distinct_strings_distinct_prompts(self):
        """Test different strings give different matrices and fixed roles."""
        real, fake = init_prompts("real seal", "fake seal", 4, 8, seed=3)
        self.assertFalse(torch.equal(real.matrix, fake.matrix))
        self.assertEqual((real.role, fake.role), ("real", "forgery"))
        self.assertEqual(tuple(real.matrix.shape), (4, 8))

    def test_bad_inputs(self):
        """Test zero dims raise BadDims and empty strings raise EmptyString."""
        with self.assertRaises(BadDims):
            init_prompts("a", "b", 0, 8, seed=0)
        with self.assertRaises(EmptyString):
            init_prompts("", "b", 4, 8, seed=0)


class TestPhaseSteps(unittest.TestCase):
    def setUp(self):
        self.state = tiny_state()
        self.real, self.synth = two_class_toy(n=4, size=8)

    def test_prompt_step_freezes_unet(self):
        """Test a prompt step leaves theta bit-identical and moves the prompts."""
        theta = self.state.theta_checksum()
        prompts = self.state.prompt_checksums()
        prompt_step(self.state, self.real, self.synth)
        self.assertEqual(self.state.theta_checksum(), theta)
        self.assertNotEqual(self.state.prompt_checksums(), prompts)
        self.assertEqual(self.state.step, 1)

    def test_unet_step_freezes_prompts(self):
        """Test a UNet step leaves both prompts bit-identical and moves theta."""
        self.state.phase = PHASES[1]
        theta = self.state.theta_checksum()
        prompts = self.state.prompt_checksums()
        unet_step(self.state, self.real, self.synth)
        self.assertEqual(self.state.prompt_checksums(), prompts)
        self.assertNotEqual(self.state.theta_checksum(), theta)

    def test_zero_conditioning_gives_zero_prompt_gradient(self):
        """Test prompts do not move when every key/value projection is zero."""
        self.state.model.zero_conditioning()
        before_real = self.state.real.matrix.detach().clone()
        before_fake = self.state.forgery.matrix.detach().clone()
        prompt_step(self.state, self.real, self.synth)
        self.assertEqual(float(self.state.real.matrix.grad.abs().max()), 0.0)
        self.assertTrue(torch.equal(self.state.real.matrix.detach(), before_real))
        self.assertTrue(torch.equal(self.state.forgery.matrix.detach(), before_fake))

    def test_logged_loss_matches_recomputation(self):
        """Test the logged loss equals both terms recomputed from pre-step parameters and draws."""
        model = copy.deepcopy(self.state.model)
        real = self.state.real.matrix.detach().clone()
        fake = self.state.forgery.matrix.detach().clone()
        prompt_step(self.state, self.real, self.synth)
        record = self.state.log[-1]
        draws = draw_pair(self.state.step_generator(1), model, self.real, self.synth)
        with torch.no_grad():
            term_r, term_f = paired_loss_terms(model, self.state.ae, self.state.schedule,
                                               self.real, self.synth, real, fake, draws)
        self.assertAlmostEqual(record["loss_real"], term_r.item(), places=6)
        self.assertAlmostEqual(record["loss_forgery"], term_f.item(), places=6)
        self.assertAlmostEqual(record["loss"], term_r.item() + term_f.item(), places=5)
        self.assertEqual(record["t_real"], draws[0][0].tolist())

    def test_phase_violation_and_empty_batch(self):
        """Test calling the wrong step for the phase or an empty batch is rejected."""
        with self.assertRaises(PhaseViolation):
            unet_step(self.state, self.real, self.synth)
        with self.assertRaises(EmptyBatch):
            prompt_step(self.state, self.real[:0], self.synth)
        self.assertEqual(self.state.step, 0)


class TestPairedLossGradients(unittest.TestCase):
    def test_gradients_match_finite_differences(self):
        """Test prompt and weight gradients of the paired objective match central differences."""
        torch.manual_seed(0)
        meta = DiffusionMeta(latent_channels=3, latent_size=4, prompt_dim=4, T=10, channels=4)
        model = DiffusionModel(meta).double()
        ae = Autoencoder(factor=1)
        sched = make_schedule(10, 1e-4, 0.02)
        br = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        bs = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        draws = draw_pair(torch.Generator().manual_seed(1), model, br, bs)
        pr = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        pf = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)

        def loss_prompts(p_real, p_fake):
            term_r, term_f = paired_loss_terms(model, ae, sched, br, bs, p_real, p_fake, draws)
            return term_r + term_f

        self.assertTrue(gradcheck(loss_prompts, (pr, pf), eps=1e-6, atol=1e-6, rtol=1e-4))

        (t_r, eps_r), _ = draws

        def loss_weight(w):
            z_t = q_sample(br * 2 - 1, t_r, eps_r, sched)
            out = functional_call(model, {"attn2.to_v.weight": w}, (z_t, t_r, pr.detach()))
            return ((out - eps_r) ** 2).mean()

        w0 = model.attn2.to_v.weight.detach().clone().requires_grad_(True)
        self.assertTrue(gradcheck(loss_weight, (w0,), eps=1e-6, atol=1e-6, rtol=1e-4))


class TestRunStage1(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.data = two_class_toy(n=6, size=8)
        self.cfg = Stage1Config(max_steps=10, k_p=2, k_u=3, batch_size=2, lr_prompt=1e-2,
                                lr_unet=1e-3, checkpoint_every=5)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_alternating_schedule(self):
        """Test k_p=2, k_u=3 alternates PPUUU twice over ten steps."""
        state = run_stage1(self.cfg, self.data, tiny_state(self.cfg), progress=False)
        phases = ["P" if r["phase"] == PHASES[0] else "U" for r in state.log]
        self.assertEqual("".join(phases), "PPUUUPPUUU")
        self.assertEqual([phase_for_step(s, 2, 3) for s in (1, 3, 6, 8)],
                         [PHASES[0], PHASES[1], PHASES[0], PHASES[1]])

    def test_resume_matches_uninterrupted_run(self):
        """Test stopping at step 5 and resuming gives the same losses as one run."""
        full = run_stage1(self.cfg, self.data, tiny_state(self.cfg), progress=False)

        first = replace(self.cfg, max_steps=5)
        run_stage1(first, self.data, tiny_state(first), out_dir=self.tmpdir, progress=False)
        resumed = load_stage1(os.path.join(self.tmpdir, "stage1.pt"), self.cfg)
        self.assertEqual(resumed.step, 5)
        resumed = run_stage1(self.cfg, self.data, resumed, out_dir=self.tmpdir, progress=False)

        self.assertEqual([r["loss"] for r in resumed.log], [r["loss"] for r in full.log[5:]])
        log = read_step_log(os.path.join(self.tmpdir, STEP_LOG))
        self.assertEqual(log["step"].tolist(), list(range(1, 11)))
        self.assertTrue(os.path.exists(os.path.join(self.tmpdir, "stage1_step000005.pt")))

    def test_empty_dataset(self):
        """Test an empty synthetic set raises EmptyDataset."""
        real, synth = self.data
        with self.assertRaises(EmptyDataset):
            run_stage1(self.cfg, (real, synth[:0]), tiny_state(self.cfg), progress=False)

    @unittest.skipUnless(SLOW, "set SEAL2REAL_SLOW_TESTS=1 to run training checks")
    def test_overfits_small_set(self):
        """Test 200 steps on a tiny set cut the loss on fixed draws by at least half."""
        cfg = Stage1Config(max_steps=200, k_p=10, k_u=10, batch_size=6, lr_prompt=1e-2,
                           lr_unet=2e-3)
        state = tiny_state(cfg)
        real, synth = self.data

        def fixed_loss():
            total = 0.0
            with torch.no_grad():
                for k in range(8):
                    draws = draw_pair(torch.Generator().manual_seed(100 + k), state.model, real, synth)
                    term_r, term_f = paired_loss_terms(state.model, state.ae, state.schedule, real,
                                                       synth, state.real, state.forgery, draws)
                    total += (term_r + term_f).item()
            return total

        before = fixed_loss()
        run_stage1(cfg, self.data, state, progress=False)
        self.assertLessEqual(fixed_loss(), 0.5 * before)

    @unittest.skipUnless(SLOW, "set SEAL2REAL_SLOW_TESTS=1 to run training checks")
    def test_prompts_select_toy_class(self):
        """Test sampling with each learned prompt lands on its own toy class."""
        cfg = Stage1Config(max_steps=1500, k_p=50, k_u=50, batch_size=8, lr_prompt=5e-3,
                           lr_unet=2e-3, patience=5000)
        state = tiny_state(cfg, image_size=16, T=50)
        state = run_stage1(cfg, two_class_toy(n=32, size=16), state, progress=False)
        gen = torch.Generator().manual_seed(0)
        as_real = sample(state.model, state.ae, state.real, state.schedule, 50, gen, n=100)
        as_fake = sample(state.model, state.ae, state.forgery, state.schedule, 50, gen, n=100)
        self.assertGreaterEqual(class_match_rate(as_real, 0), 0.9)
        self.assertGreaterEqual(class_match_rate(as_fake, 1), 0.9)


if __name__ == "__main__":
    unittest.main()
