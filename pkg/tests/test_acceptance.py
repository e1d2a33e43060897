"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed in the pytest
terminal summary (and directly when this file is run as a script).
"""
import contextlib
import itertools
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from silt.config import toy_config
from silt.data import ToySceneSpec, enumerate_pairs, generate_toy_dataset
from silt.evaluation import evaluate, loss_ablation_grid, output_similarity_grid, run_ablation
from silt.imaging import load_image
from silt.losses import build_extractor, vgg19_extractor
from silt.networks import ModelBundle, ModelConfig, count_params, estimate_gflops
from silt.training import Trainer, infer, infer_maps, load_model, train_loop

from helpers import run_style_audit
from test_data import fake_scenes
from test_networks import decomposition_oracle, discriminator_oracle, generator_oracle, vgg_trunk_oracle

TESTS = Path(__file__).parent
RESULTS = {}


@contextlib.contextmanager
def criterion(n, title):
    notes = []
    try:
        yield notes
    except BaseException as exc:
        RESULTS[n] = f"criterion {n} FAIL  {title}: {'; '.join(notes + [str(exc).splitlines()[0] if str(exc) else type(exc).__name__])}"
        raise
    RESULTS[n] = f"criterion {n} PASS  {title}: {'; '.join(notes)}"


def run_pytest(*args):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
                          cwd=TESTS.parent, capture_output=True, text=True)
    return proc, time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    train, test = generate_toy_dataset(root / "data", ToySceneSpec(seed=0), n_train=16, n_test=4, n_dirs=4)
    return root, train, test


def test_1_loss_suite():
    with criterion(1, "loss unit suite") as notes:
        proc, secs = run_pytest(str(TESTS / "test_losses.py"))
        notes.append(proc.stdout.strip().splitlines()[-1])
        notes.append(f"{secs:.1f} s wall")
        assert proc.returncode == 0, proc.stdout[-2000:]
        assert secs < 10


def test_2_gradient_suite():
    with criterion(2, "finite-difference gradient suite") as notes:
        proc, secs = run_pytest(str(TESTS / "test_losses.py"), str(TESTS / "test_networks.py"), "-k", "gradients")
        summary = proc.stdout.strip().splitlines()[-1]
        notes.append(summary)
        notes.append(f"{secs:.1f} s wall")
        assert proc.returncode == 0, proc.stdout[-2000:]
        # five loss terms, l_d, the corruption sanity check, three networks
        assert summary.startswith("10 passed")
        assert secs < 120


def test_3_any_resolution(tmp_path):
    with criterion(3, "infer keeps the input shape") as notes:
        t0 = time.perf_counter()
        ckpt = Trainer(toy_config()).save(tmp_path / "untrained.pt")
        model = load_model(ckpt)
        rng = np.random.default_rng(0)
        for w, h in [(64, 64), (256, 192), (768, 512), (1536, 1024)]:
            img = rng.random((h, w, 3)).astype(np.float32)
            out = infer(model, img)
            assert out.shape == img.shape, (out.shape, img.shape)
            assert np.isfinite(out).all()
        secs = time.perf_counter() - t0
        notes.append(f"4 sizes up to 1536x1024 in {secs:.1f} s")
        assert secs < 120


def test_4_pairing_and_style_isolation(toy):
    _, train, _ = toy
    with criterion(4, "pairing and style isolation") as notes:
        scenes, tags = fake_scenes(4, 9)
        pairs = enumerate_pairs(scenes, tags, seed=0)
        assert set(Counter(p.scene_id for p in pairs).values()) == {36}
        keys = [(p.scene_id, frozenset((p.tag_a, p.tag_b))) for p in pairs]
        assert set(keys) == {(s.scene_id, frozenset(c)) for s in scenes for c in itertools.combinations(tags, 2)}
        assert len(keys) == len(set(keys))
        notes.append("36 pairs per 9-tag scene, exact partition")
        sightings, leaked = run_style_audit(train, 100, toy_config(max_iterations=100))
        notes.append(f"style sightings {sightings}, style images in pairs {len(leaked)}")
        assert leaked == set()
        assert sightings == {"l_d": 100}


def test_5_toy_end_to_end(toy):
    root, train, test = toy
    with criterion(5, "toy end-to-end") as notes:
        cfg = toy_config()
        assert cfg.decomposition_mode == "learnt" and cfg.extractor.kind == "random"
        assert all(cfg.weights.weight_for(t) > 0 for t in ("l_g", "l_os", "l_cp", "l_r", "l_dcp"))
        t0 = time.perf_counter()
        res = train_loop(cfg, train, root / "run5")
        secs = time.perf_counter() - t0
        notes.append(f"{len(res.history)} it in {secs:.0f} s")
        ext = build_extractor("random")
        model = evaluate(res.final_checkpoint, test, ext)
        ident = evaluate(None, test, ext)
        dcp = float(np.median([r.l_dcp for r in res.history[-100:]]))
        l_r = [r.l_r for r in res.history]
        ratio = float(np.mean(l_r[-100:]) / np.mean(l_r[:100]))
        bundle = load_model(res.final_checkpoint)
        unified = 0
        for scene in test.scenes:
            maps = {t: infer_maps(bundle, load_image(scene.images[t])) for t in test.input_tags}
            d_hat = np.mean([np.abs(maps[a][3] - maps[b][3]).mean() for a, b in itertools.combinations(test.input_tags, 2)])
            d_s = np.mean([np.abs(maps[a][2] - maps[b][2]).mean() for a, b in itertools.combinations(test.input_tags, 2)])
            unified += d_hat < d_s
        notes.append(f"(a) SSIM {model.ssim:.3f} vs identity {ident.ssim:.3f}")
        notes.append(f"(b) median L_dcp {dcp:.4f}")
        notes.append(f"(c) L_r last/first {ratio:.3f}")
        notes.append(f"(d) unified shading in {unified}/{len(test.scenes)} scenes")
        failed = [k for k, ok in [("a", model.ssim - ident.ssim >= 0.05), ("b", dcp <= 0.05), ("c", ratio <= 0.5),
                                  ("d", unified == len(test.scenes)), ("time", secs <= 1800)] if not ok]
        assert not failed, f"failed parts {failed}"


def test_6_ablation_machinery(toy, tmp_path):
    _, train, test = toy
    with criterion(6, "ablation grids") as notes:
        base = toy_config(max_iterations=200, checkpoint_interval=1000)
        loss_rows = run_ablation(loss_ablation_grid(base), train, test, tmp_path / "loss")
        os_rows = run_ablation(output_similarity_grid(base), train, test, tmp_path / "os")
        notes.append(f"{len(loss_rows)} loss rows, {len(os_rows)} output-similarity rows")
        assert len(loss_rows) == 5 and len(os_rows) == 3
        for row in loss_rows + os_rows:
            assert row.error is None, f"{row.name}: {row.error}"
            assert np.isfinite([row.report.ssim, row.report.vgg]).all()
        core = next(r for r in loss_rows if r.name == "core")
        ckpt = torch.load(core.checkpoint, map_location="cpu", weights_only=False)
        assert ckpt["iteration"] == 200
        notes.append(f"core row SSIM {core.report.ssim:.3f}")


def test_7_determinism_and_resume(toy, tmp_path):
    _, train, _ = toy
    with criterion(7, "determinism and resume") as notes:
        cfg = toy_config(max_iterations=110, checkpoint_interval=100)
        a = train_loop(cfg, train, tmp_path / "a")
        b = train_loop(cfg, train, tmp_path / "b")
        assert a.metrics_log.read_bytes() == b.metrics_log.read_bytes()
        notes.append("identical metrics logs")
        t = Trainer.from_checkpoint(tmp_path / "a" / "checkpoints" / "iter_0000100.pt", train)
        assert t.step().as_dict() == a.history[100].as_dict()
        notes.append("iteration 101 matches after resume")


def test_8_complexity():
    with criterion(8, "complexity reporting") as notes:
        bundle = ModelBundle(ModelConfig(), extractor=vgg19_extractor(pretrained=False))
        total, trainable = count_params(bundle)
        oracle = generator_oracle() + decomposition_oracle() + discriminator_oracle()
        assert (total, trainable) == (oracle + vgg_trunk_oracle(), oracle)
        square, wide = estimate_gflops(bundle, 512, 512), estimate_gflops(bundle, 512, 768)
        assert count_params(bundle) == (total, trainable)
        assert (square < wide) == (1862.846 < 2792.768)
        notes.append(f"{total:,} params ({trainable:,} trainable); {square:.1f} < {wide:.1f} GFLOPs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
