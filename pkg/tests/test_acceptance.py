"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -s`` to see
them inline).  Tolerances are fixed here and nowhere else.
"""

import math
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from defectgen import (
    AnomalyExemplar,
    ArchConfig,
    FeatureSet,
    GppConfig,
    InpaintCondition,
    MgniConfig,
    SamplerState,
    align,
    analytic_gaussian_backend,
    constrained_center,
    ddim_step,
    extract_keypoints,
    identity_codec,
    init_embedding,
    kid,
    make_linear_schedule,
    mgni_step,
    perturb,
    sample_inpaint,
    split_train_test,
    trainable_backend,
)
from defectgen.cama import rasterize_line, translate_mask
from defectgen.sampler import forward_diffuse
from defectgen.synthetic import build_toy_dataset, make_anomaly_scene, make_texture
from defectgen.trainer import (
    AdamW,
    draw_training_batch,
    gpp_loss,
    loss_and_grads_from_draws,
    train,
)
from defectgen.trainer import TrainConfig


@contextmanager
def criterion(num, text):
    try:
        yield
    except BaseException:
        print(f"FAIL criterion {num}: {text}")
        raise
    print(f"PASS criterion {num}: {text}")


def full_cond(z):
    return InpaintCondition(z_t=z, background=np.zeros_like(z), mask=np.ones(z.shape[1:]))


def test_criterion_1_sampler_oracle_convergence():
    with criterion(1, "analytic-backend DDIM converges to its target Gaussian"):
        t0 = time.perf_counter()
        T = 100
        s = make_linear_schedule(T, 1e-4, 0.02)
        pred = analytic_gaussian_backend(0.0, 1.0, s)
        finals = np.empty((2000, 16))
        for i in range(2000):
            rng = np.random.default_rng(10_000 + i)
            state = SamplerState(z=rng.standard_normal((1, 4, 4)), step_index=T - 1,
                                 schedule=s)
            for t in range(T - 1, 0, -1):
                state.step_index = t
                state.z = ddim_step(state, full_cond(state.z), np.zeros(2), pred)
            finals[i] = state.z.ravel()
        elapsed = time.perf_counter() - t0
        assert abs(finals.mean()) < 0.05
        assert abs(finals.var() - 1.0) < 0.05
        assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_criterion_2_mgni_degeneracy_and_variance():
    with criterion(2, "masked-noise step degenerates to the plain step; "
                      "injected variance is (1 - abar_prev) * lambda"):
        # bit-identity on 100 random instances
        for trial in range(100):
            r = np.random.default_rng(trial)
            T = int(r.integers(4, 30))
            s = make_linear_schedule(T, 1e-4, float(r.uniform(0.05, 0.3)))
            t = int(r.integers(1, T))
            z = r.standard_normal((1, 5, 5))
            mask = (r.random((5, 5)) < 0.5).astype(float)
            cond = InpaintCondition(z, r.standard_normal(z.shape), mask)
            pred = analytic_gaussian_backend(float(r.uniform(-1, 1)),
                                             float(r.uniform(0.2, 2.0)), s)
            dd = ddim_step(SamplerState(z=z, step_index=t, schedule=s),
                           cond, np.zeros(2), pred)
            mg_a0 = mgni_step(
                SamplerState(z=z, step_index=t, schedule=s, rng=np.random.default_rng(0)),
                cond, np.zeros(2), pred, MgniConfig(a=0.0, t_min=0.6), mask)
            assert mg_a0.tobytes() == dd.tobytes()
            cond0 = InpaintCondition(z, cond.background, np.zeros((5, 5)))
            dd0 = ddim_step(SamplerState(z=z, step_index=t, schedule=s),
                            cond0, np.zeros(2), pred)
            mg_m0 = mgni_step(
                SamplerState(z=z, step_index=t, schedule=s, rng=np.random.default_rng(0)),
                cond0, np.zeros(2), pred, MgniConfig(a=0.6, t_min=0.6), np.zeros((5, 5)))
            assert mg_m0.tobytes() == dd0.tobytes()

        # injected-term variance over 1e4 trials
        T = 10
        s = make_linear_schedule(T, 1e-3, 0.2)
        t = 8  # normalized time 8/9 > 0.6
        cfg = MgniConfig(a=0.5, t_min=0.6)
        rng = np.random.default_rng(7)
        z = rng.standard_normal((1, 4, 4))
        mask = np.zeros((4, 4))
        mask[:2] = 1.0
        cond = InpaintCondition(z, np.zeros_like(z), mask)
        pred = analytic_gaussian_backend(0.0, 1.0, s)
        base = ddim_step(SamplerState(z=z, step_index=t, schedule=s), cond, np.zeros(2), pred)
        gen = np.random.default_rng(123)
        samples = []
        for _ in range(10_000):
            out = mgni_step(SamplerState(z=z, step_index=t, schedule=s, rng=gen),
                            cond, np.zeros(2), pred, cfg, mask)
            diff = out - base
            assert (diff[0][mask == 0] == 0.0).all()
            samples.append(diff[0][mask == 1])
        expected = (1.0 - s.alpha_bars[t - 1]) * cfg.a
        observed = np.var(np.array(samples))
        assert abs(observed - expected) / expected < 0.05


def test_criterion_3_background_exactness():
    with criterion(3, "background pixels are exact copies for 50 random pairs"):
        T = 12
        s = make_linear_schedule(T, 1e-3, 0.2)
        net = trainable_backend(
            ArchConfig(latent_channels=1, hidden=6, blocks=2, embed_dim=6, num_steps=T),
            seed=0)
        r = np.random.default_rng(0)
        net.params["head.W"] += 0.1 * r.standard_normal(net.params["head.W"].shape)
        emb = init_embedding(6, 0)
        for trial in range(50):
            rng = np.random.default_rng(trial)
            img = rng.uniform(0, 1, (1, 10, 10))
            mask = (rng.random((10, 10)) < rng.uniform(0.1, 0.9)).astype(float)
            out = sample_inpaint(img, mask, net, s, emb, GppConfig(1.0),
                                 None, identity_codec(), rng)
            assert np.array_equal(out[:, mask == 0], img[:, mask == 0])


def test_criterion_4_gpp_degeneracy_and_statistics():
    with criterion(4, "sigma 0 is exact; sigma 1 statistics pass at 3 sigma"):
        emb = init_embedding(4, 2)
        rng = np.random.default_rng(0)
        out = perturb(emb, GppConfig(0.0), rng)
        assert out.tobytes() == emb.base.tobytes()

        n = 100_000
        r = np.random.default_rng(1)
        deltas = np.array([perturb(emb, GppConfig(1.0), r) - emb.base for _ in range(n)])
        assert (np.abs(deltas.mean(axis=0)) < 3.0 / math.sqrt(n)).all()
        assert (np.abs(deltas.var(axis=0) - 1.0) < 0.05).all()


def test_criterion_5_loss_and_gradients():
    with criterion(5, "sigma-0 loss equals the plain loss; gradients match "
                      "finite differences; toy training reduces the loss"):
        schedule = make_linear_schedule(8, 1e-3, 0.3)
        emb = init_embedding(4, 0)
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (1, 4, 4))
        mask = np.zeros((4, 4))
        mask[1:3, 1:3] = 1.0
        ex = AnomalyExemplar(image=img, mask=mask)
        pred = analytic_gaussian_backend(0.1, 0.8, schedule)

        # sigma = 0 equals the hand-stepped plain reconstruction loss
        loss = gpp_loss([ex, ex], pred, schedule, emb, GppConfig(0.0),
                        np.random.default_rng(11))
        rr = np.random.default_rng(11)
        total = 0.0
        for e in (ex, ex):
            t = int(rr.integers(schedule.num_steps))
            eps = rr.standard_normal(e.image.shape)
            rr.standard_normal(emb.dim)  # the perturbation draw, scaled by 0
            z_t = forward_diffuse(e.image, t, eps, schedule)
            cond = InpaintCondition(z_t, (1 - e.mask) * e.image, e.mask)
            total += np.sum((eps - pred.predict(cond, t, emb.base)) ** 2)
        assert abs(loss - total / 2) <= 1e-12 * abs(total / 2)

        # finite differences on a 1x4x4 instance, 1e-3 relative
        arch = ArchConfig(latent_channels=1, hidden=5, blocks=2, embed_dim=4,
                          time_freqs=2, num_steps=8)
        net = trainable_backend(arch, seed=2)
        net.params["head.W"] += 0.05 * rng.standard_normal(net.params["head.W"].shape)
        draws = draw_training_batch([ex], schedule, emb, GppConfig(0.5),
                                    np.random.default_rng(3))
        _, grads = loss_and_grads_from_draws(net, draws)

        def loss_only():
            return np.mean([
                np.sum((eps - net.forward(cond.stacked(), t, c_p)) ** 2)
                for cond, t, c_p, eps in draws
            ])

        h = 1e-4
        for name, p in net.params.items():
            flat = p.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_only()
                flat[i] = orig - h
                lm = loss_only()
                flat[i] = orig
                num = (lp - lm) / (2 * h)
                if abs(num) > 1e-6:
                    assert abs(grads[name].reshape(-1)[i] - num) / abs(num) < 1e-3

        # 200 training steps on 8x8 synthetic blob anomalies
        exemplars = [
            AnomalyExemplar(*make_anomaly_scene(np.random.default_rng(100 + i), 8, radius=1))
            for i in range(4)
        ]
        tnet = trainable_backend(
            ArchConfig(latent_channels=1, hidden=8, blocks=2, embed_dim=8, num_steps=20),
            seed=0)
        tc = TrainConfig(steps=200, batch=4, lr=1e-3, gpp=GppConfig(1.0),
                         schedule=make_linear_schedule(20, 1e-4, 0.1), seed=0)
        res = train(exemplars, tnet, init_embedding(8, 0), tc)
        assert res.losses[-1] < res.losses[0]


def test_criterion_6_cama_correctness():
    with criterion(6, "self-alignment, exact shift recovery, brute-force "
                      "center search, and foreground containment"):
        # self-alignment returns mask AND foreground
        rng = np.random.default_rng(0)
        img = make_texture(rng, 24, smooth=0.6)[None]
        mask = np.zeros((24, 24))
        mask[8:13, 9:12] = 1.0
        ex = AnomalyExemplar(image=img, mask=mask)
        fg = np.zeros((24, 24))
        fg[4:20, 4:20] = 1.0
        res = align(mask, ex, img, foreground=fg)
        assert np.array_equal(res.mask, mask * fg)
        assert (res.mask <= fg).all()

        # 20 random shifts recovered exactly on non-repeating textures
        for trial in range(20):
            r = np.random.default_rng(200 + trial)
            dx = int(r.integers(-5, 6))
            dy = int(r.integers(-5, 6))
            big = make_texture(r, 48, smooth=0.6)
            a_img = big[12:36, 12:36][None]
            n_img = big[12 - dy:36 - dy, 12 - dx:36 - dx][None]
            m = np.zeros((24, 24))
            m[9:14, 10:13] = 1.0
            exm = AnomalyExemplar(image=a_img, mask=m)
            full = np.ones((24, 24))
            got = align(m, exm, n_img, foreground=full)
            assert np.array_equal(got.mask, translate_mask(m, (dx, dy)))
            assert (got.mask <= full).all()

        # constrained center equals brute force on 200 random 64x64 maps
        for trial in range(200):
            r = np.random.default_rng(300 + trial)
            scores = r.standard_normal((64, 64))
            fg64 = (r.random((64, 64)) < 0.5).astype(float)
            fg64[0, 0] = 1.0
            q_u = tuple(int(v) for v in r.integers(0, 64, size=2))
            q_l = tuple(int(v) for v in r.integers(0, 64, size=2))
            got = constrained_center(scores, q_u, q_l, fg64)
            cands = [(x, y) for x, y in rasterize_line(q_u, q_l) if fg64[y, x] == 1.0]
            if not cands:
                cands = [(x, y) for y, x in zip(*np.nonzero(fg64 == 1.0))]
                assert got.fallback
            else:
                assert not got.fallback
            best = sorted(cands, key=lambda p: (-scores[p[1], p[0]], p[1], p[0]))[0]
            assert got.point == best
            assert fg64[got.point[1], got.point[0]] == 1.0


def test_criterion_7_kid_estimator():
    with criterion(7, "kid matches hand sums, vanishes on identical sets, "
                      "is symmetric, and shrinks with n"):
        x = [[1.0, 2.0], [0.5, -1.0], [2.0, 0.0]]
        y = [[0.0, 1.0], [1.5, 1.5], [-1.0, 0.5]]

        def k(a, b):
            return (sum(u * w for u, w in zip(a, b)) / 2 + 1.0) ** 3

        s_xx = sum(k(x[i], x[j]) for i in range(3) for j in range(3) if i != j) / 6
        s_yy = sum(k(y[i], y[j]) for i in range(3) for j in range(3) if i != j) / 6
        s_xy = sum(k(a, b) for a in x for b in y) / 9
        expected = s_xx + s_yy - 2 * s_xy
        got = kid(FeatureSet(np.array(x)), FeatureSet(np.array(y)))
        assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))

        r = np.random.default_rng(0)
        rows = r.standard_normal((50, 6))
        assert kid(FeatureSet(rows), FeatureSet(rows.copy())) <= 1e-9

        a = FeatureSet(r.standard_normal((20, 5)))
        b = FeatureSet(r.standard_normal((30, 5)) + 0.5)
        assert abs(kid(a, b) - kid(b, a)) <= 1e-12

        sizes = (10, 100, 1000)
        vals = []
        for n in sizes:
            u = FeatureSet(r.standard_normal((n, 8)))
            w = FeatureSet(r.standard_normal((n, 8)))
            vals.append(abs(kid(u, w)))
        assert vals[0] > vals[1] > vals[2]


def test_criterion_8_split_rule():
    with criterion(8, "train split takes floor(n/3) items"):
        for n, expected in ((2, 0), (3, 1), (10, 3), (31, 10)):
            items = list(range(n))
            if expected == 0:
                with pytest.warns(UserWarning):
                    tr, te = split_train_test(items)
            else:
                tr, te = split_train_test(items)
            assert len(tr) == expected
            assert len(te) == n - expected
            assert tr == items[:expected] and te == items[expected:]


def test_criterion_9_end_to_end_determinism(tmp_path):
    with criterion(9, "the CLI reproduces byte-identical images and manifests"):
        root = build_toy_dataset(tmp_path / "data", n_normal=3, n_anomaly=6,
                                 size=16, seed=1)
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "ddim_steps = 10\ntrain_steps = 10\nhidden = 6\nblocks = 1\nembed_dim = 6\n"
        )
        ckpt = tmp_path / "widget.ckpt"

        def cli(*argv):
            proc = subprocess.run(
                [sys.executable, "-m", "defectgen", *argv],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
            return proc.stdout

        cli("train", "--data", str(root), "--class", "widget",
            "--config", str(cfg), "--out", str(ckpt))
        for run in ("r1", "r2"):
            cli("generate", "--data", str(root), "--class", "widget",
                "--config", str(cfg), "--ckpt", str(ckpt),
                "--n", "4", "--seed", "21", "--out", str(tmp_path / run))
        files1 = sorted(p.name for p in (tmp_path / "r1").iterdir())
        files2 = sorted(p.name for p in (tmp_path / "r2").iterdir())
        assert files1 == files2 and len(files1) == 9  # 4 pairs + manifest
        for name in files1:
            b1 = (tmp_path / "r1" / name).read_bytes()
            b2 = (tmp_path / "r2" / name).read_bytes()
            assert b1 == b2, f"{name} differs between runs"
