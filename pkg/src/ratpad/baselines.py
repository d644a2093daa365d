"""Reference baseline and figure-data emitters.

The baseline shares the C-marmax network body, sampler, optimiser and
budget; only the head (one sigmoid unit) and the loss (mean binary
cross-entropy) differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmarmax import BF, EmbeddingNetwork, TrainConfig, balanced_epoch, batches
from .optim import Adam


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def bce_objective_and_grad(net, x, labels, masks=None):
    z, cache = net.raw_forward(x, masks)
    z = z[:, 0]
    t = (np.asarray(labels) != BF).astype(np.float64)
    # log(1 + e^z) - t z, the stable form of binary cross-entropy on logits
    loss = float(np.mean(np.logaddexp(0.0, z) - t * z)) + net.decay_penalty()
    gz = ((_sigmoid(z) - t) / len(t))[:, None]
    gw, gb = net.backward(cache, gz)
    gw = [g + 2.0 * net.weight_decay * w for g, w in zip(gw, net.weights)]
    return loss, gw, gb


@dataclass
class BaselineResult:
    net: EmbeddingNetwork
    loss_trace: list
    train_scores: np.ndarray


def train_baseline_ce(features, labels, config=None):
    config = config or TrainConfig()
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.any(labels != BF):
        raise ValueError("no attack species in training data")
    rng = np.random.default_rng(config.seed)
    sizes = [x.shape[1]] + [config.hidden] * config.n_hidden + [1]
    net = EmbeddingNetwork.init(sizes, seed=config.seed, dropout=config.dropout,
                                weight_decay=config.weight_decay, normalize=False)
    params = net.params()
    opt = Adam(lr=config.learning_rate)
    trace = []
    for _ in range(config.epochs):
        bf_part, att_part = balanced_epoch(labels, rng)
        losses = []
        for b in batches(bf_part, att_part, config.batch_size):
            masks = net.dropout_masks(len(b), rng)
            loss, gw, gb = bce_objective_and_grad(net, x[b], labels[b], masks)
            grads = {f"W{i}": v for i, v in enumerate(gw)}
            grads.update({f"b{i}": v for i, v in enumerate(gb)})
            opt.step(params, grads)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return BaselineResult(net, trace, baseline_score(net, x))


def baseline_score(net, features):
    z = net.forward(np.atleast_2d(features))[:, 0]
    return _sigmoid(z)


def species_mean_loglik_map(averaged_grids, species, pixel_standardizer, k):
    """Per-species mean of standardised temporal-average maps, ``(H, W)``.

    The ``3K`` per-component channels are standardised with the training
    bona fide statistics and then averaged into a single map per species.
    """
    z = pixel_standardizer.transform(np.asarray(averaged_grids, dtype=np.float64))
    species = np.asarray(species)
    maps = {}
    for name in sorted(set(species.tolist())):
        maps[name] = z[species == name].mean(axis=(0, 3))
    return maps


def write_map_tsv(path, grid):
    with open(path, "w") as fh:
        for row in np.asarray(grid):
            fh.write("\t".join(f"{v:.6g}" for v in row) + "\n")
