import numpy as np
import pytest

from ratpad import baselines as B, datasets, features
from ratpad.cmarmax import EmbeddingNetwork, TrainConfig
from ratpad.density import batch_loglik


def test_bce_gradient_finite_differences(rng):
    net = EmbeddingNetwork.init([4, 5, 5, 1], seed=1, weight_decay=1e-2, normalize=False)
    net.biases = [rng.normal(0, 0.2, b.shape) for b in net.biases]
    x = rng.normal(size=(8, 4))
    lab = np.array([0, 0, 0, 0, 1, 1, 2, 2])
    masks = net.dropout_masks(8, rng)
    _, gw, _ = B.bce_objective_and_grad(net, x, lab, masks)
    eps = 1e-6
    w = net.weights[0].reshape(-1)
    for i in range(w.size):
        old = w[i]
        w[i] = old + eps
        lp = B.bce_objective_and_grad(net, x, lab, masks)[0]
        w[i] = old - eps
        lm = B.bce_objective_and_grad(net, x, lab, masks)[0]
        w[i] = old
        assert (lp - lm) / (2 * eps) == pytest.approx(gw[0].reshape(-1)[i], rel=1e-5, abs=1e-8)


def test_separable_near_zero_loss_and_deterministic(rng):
    x = np.vstack([rng.normal(0, 1, (30, 4)), rng.normal(0, 1, (30, 4)) + [8, 0, 0, 0]])
    y = np.array([0] * 30 + [1] * 30)
    cfg = TrainConfig(epochs=80, batch_size=32, hidden=16, dropout=0.0, seed=2)
    a = B.train_baseline_ce(x, y, cfg)
    assert a.loss_trace[-1] < 0.05
    b = B.train_baseline_ce(x, y, cfg)
    assert a.net.to_bytes() == b.net.to_bytes()
    assert np.all((a.train_scores > 0.5) == (y == 1))


def test_loglik_maps(density_fit, tmp_path):
    ds, model = density_fit

    def avg(v):
        return np.mean([t.grid for t in batch_loglik(model, v)], axis=0)

    train = [avg(ds.videos[i]) for i in ds.ids(species=datasets.BF, split="train")]
    pix = features.fit_pixel_standardizer(train)
    rng = np.random.default_rng(1)
    smooth = datasets.SpeciesSpec("smooth", "smoothing", [4, 12, 4, 12], 1.0)
    noisy = datasets.SpeciesSpec("noisy", "noise", [0, 6, 2, 14], 2.5)
    grids, labels = [], []
    for vid in ds.ids(species=datasets.BF, split="train"):
        v = ds.videos[vid]
        grids.append(avg(v))
        labels.append("bf")
        for spec in (smooth, noisy):
            pv = np.stack([np.clip(np.rint(datasets.perturb(f.astype(float), spec, rng)), 0, 255)
                           .astype(np.uint8) for f in v])
            grids.append(avg(pv))
            labels.append(spec.name)
    held = [i for i in ds.ids(species=datasets.BF) if ds.record(i)["split"] != "train"]
    grids += [avg(ds.videos[i]) for i in held]
    labels += ["bf_held_out"] * len(held)
    maps = B.species_mean_loglik_map(grids, labels, pix, model.k)
    assert np.all(np.abs(maps["bf_held_out"]) < 3 / np.sqrt(len(held)))
    assert maps["smooth"][4:12, 4:12].mean() > 0
    assert maps["noisy"][0:6, 2:14].mean() < 0
    path = tmp_path / "map.tsv"
    B.write_map_tsv(path, maps["smooth"])
    back = np.loadtxt(path, delimiter="\t")
    np.testing.assert_allclose(back, maps["smooth"], rtol=1e-5, atol=1e-6)
