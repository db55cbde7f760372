import numpy as np
import pytest

from plausible_shapes.shapedata import AugmentationSweep, box_family, build_dataset, mug_family
from plausible_shapes.voxelcore import VoxelGrid


def brute_chamfer(a_pts, b_pts):
    """Pairwise-distance Chamfer, independent of the k-d tree path."""
    d = np.linalg.norm(a_pts[:, None, :] - b_pts[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def random_grid(rng, R=8, p=0.2, interior=0, voxel_size=0.01):
    vals = (rng.random((R, R, R)) < p).astype(np.uint8)
    if interior:
        m = np.zeros_like(vals)
        s = slice(interior, R - interior)
        m[s, s, s] = 1
        vals *= m
    if vals.sum() == 0:
        vals[R // 2, R // 2, R // 2] = 1
    return VoxelGrid(vals, voxel_size)


@pytest.fixture(scope="session")
def mug_data():
    return build_dataset(mug_family(), AugmentationSweep(), test_fraction=0.25, seed=0)


@pytest.fixture(scope="session")
def box_data():
    return build_dataset(box_family(), AugmentationSweep(slit_width=3), test_fraction=0.25, seed=0)


@pytest.fixture(scope="session")
def mug_models(mug_data):
    """Flow, PSSNet and plain-VAE baseline trained on the mug set with the
    bundled toy-mugs settings (identical seed, data and budget)."""
    from plausible_shapes.boxflow import BoxFlow
    from plausible_shapes.config import load_config
    from plausible_shapes.pssnet import PSSNet

    cfg = load_config("toy-mugs")
    tr = mug_data["train"]
    f, p = cfg.flow, cfg.pssnet
    flow = BoxFlow(n_layers=f.n_layers, hidden=f.hidden, epochs=f.epochs, standardize=f.standardize, seed=cfg.seed).fit(tr.boxes())
    common = dict(n_features=p.n_features, hidden=tuple(p.hidden), lambda_vae=p.lambda_vae, lambda_flow=p.lambda_flow,
                  epochs=p.epochs, batch_size=p.batch_size, learning_rate=p.learning_rate, seed=cfg.seed)
    pss = PSSNet(mode="pssnet", flow=flow, **common).fit(tr.observations(), tr.shapes(), tr.boxes())
    base = PSSNet(mode="plain_vae", **common).fit(tr.observations(), tr.shapes())
    return {"flow": flow, "pssnet": pss, "plain_vae": base, "n": cfg.sampling.n}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
