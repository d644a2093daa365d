"""Categorical margin maximisation (C-marmax) on the unit hypersphere.

A ReLU MLP maps standardised anomaly features to unit-norm embeddings.
Per batch, each class's worst positive distance is weighed against its
best negative distance, and the ratio is raised to the power ``g`` so the
hardest class dominates the gradient. Probes are scored by their distance
to the mean development bona fide embedding, halved.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .optim import Adam

BF = 0
SQRT2 = float(np.sqrt(2.0))
CENTER_WEIGHT = 0.1
MAGIC = b"RPNET001"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    g: float = 2.0
    seed: int = 0
    hidden: int = 64
    embedding: int = 6
    n_hidden: int = 4
    dropout: float = 0.5
    weight_decay: float = 1e-6

    def __post_init__(self):
        if self.g < 1:
            raise ValueError("exaggeration exponent g must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# network ------------------------------------------------------------------

@dataclass
class EmbeddingNetwork:
    """Fully connected ReLU network; weights ``W[l]`` are ``(in, out)``."""

    weights: list
    biases: list
    dropout: float = 0.5
    weight_decay: float = 1e-6
    normalize: bool = True

    @classmethod
    def init(cls, sizes, seed=0, dropout=0.5, weight_decay=1e-6, normalize=True):
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, dropout, weight_decay, normalize)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def n_params(self):
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def params(self):
        d = {f"W{i}": w for i, w in enumerate(self.weights)}
        d.update({f"b{i}": b for i, b in enumerate(self.biases)})
        return d

    def dropout_masks(self, n, rng):
        keep = 1.0 - self.dropout
        return [(rng.random((n, w.shape[1])) < keep) / keep for w in self.weights[:-1]]

    def raw_forward(self, x, masks=None):
        """Pre-normalisation outputs and the activation cache."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"feature length {x.shape[1]} != network input {self.sizes[0]}")
        acts, pre = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            pre.append(a)
            if i < last:
                h = np.maximum(a, 0.0)
                if masks is not None:
                    h = h * masks[i]
                acts.append(h)
            else:
                h = a
        return h, (acts, pre, masks)

    def forward(self, x, training=False, rng=None):
        masks = self.dropout_masks(len(np.atleast_2d(x)), rng) if training else None
        z, _ = self.raw_forward(x, masks)
        return _unit(z) if self.normalize else z

    def backward(self, cache, g_out):
        """Parameter gradients given dLoss/d(raw output)."""
        acts, pre, masks = cache
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        g = g_out
        for i in reversed(range(len(self.weights))):
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(0)
            if i:
                g = g @ self.weights[i].T
                if masks is not None:
                    g = g * masks[i - 1]
                g = g * (pre[i - 1] > 0)
        return gw, gb

    def decay_penalty(self):
        return self.weight_decay * sum(float(np.sum(w * w)) for w in self.weights)

    # persistence
    def to_bytes(self, extra=None):
        header = {"format": "ratpad.network", "version": FORMAT_VERSION,
                  "sizes": self.sizes, "dropout": self.dropout,
                  "weight_decay": self.weight_decay, "normalize": self.normalize,
                  "extra": extra or {}}
        hbytes = json.dumps(header, sort_keys=True).encode()
        body = b"".join(np.asarray(a, "<f8").tobytes()
                        for pair in zip(self.weights, self.biases) for a in pair)
        return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MAGIC:
            raise ValueError("not a network file (bad magic)")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported network version {header['version']}")
        off = 12 + hlen
        weights, biases = [], []
        sizes = header["sizes"]
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(data, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out)
            off += 8 * w.size
            b = np.frombuffer(data, "<f8", fan_out, off)
            off += 8 * b.size
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        if off != len(data):
            raise ValueError("network file has trailing or missing bytes")
        net = cls(weights, biases, header["dropout"], header["weight_decay"], header["normalize"])
        return net, header["extra"]


def _unit(z):
    """Row-normalise; an exactly zero row maps to the first axis."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    dead = norms == 0
    y = z / np.where(dead, 1.0, norms)
    if np.any(dead):
        e0 = np.zeros(z.shape[-1])
        e0[0] = 1.0
        y = np.where(dead, e0, y)
    return y


def forward(net, feature, training_mode=False, rng=None):
    return net.forward(feature, training=training_mode, rng=rng)


# loss -----------------------------------------------------------------------

@dataclass
class Centers:
    classes: list
    centers: np.ndarray
    degenerate: list = field(default_factory=list)


def batch_centroids(embeddings, labels):
    """Per-class mean embedding renormalised to the unit sphere.

    A zero mean falls back to the first sample's direction and the class is
    listed in ``degenerate``.
    """
    y = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if not classes:
        raise ValueError("no classes in batch")
    centers, degenerate = [], []
    for c in classes:
        members = y[labels == c]
        mean = members.mean(0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            degenerate.append(c)
            centers.append(members[0] / np.linalg.norm(members[0]))
        else:
            centers.append(mean / norm)
    return Centers(classes, np.array(centers), degenerate)


def _dist(u):
    return np.linalg.norm(u, axis=-1)


def _ddist(u, d):
    # subgradient 0 at the origin
    safe = np.where(d > 0, d, 1.0)
    return np.where((d > 0)[..., None], u / safe[..., None], 0.0)


@dataclass
class LossParts:
    total: float
    margin: float
    center: float
    class_terms: dict


def cmarmax_loss(embeddings, labels, g=2.0, with_grad=False):
    """C-marmax loss of a batch of unit embeddings.

    Label 0 is bona fide; every other label is an attack species. Returns
    :class:`LossParts` and, with ``with_grad``, dLoss/d(embeddings).
    """
    y = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels)
    cen = batch_centroids(y, labels)
    if BF not in cen.classes:
        raise ValueError("batch has no bona fide samples")
    attacks = [c for c in cen.classes if c != BF]
    if not attacks:
        raise ValueError("batch has no attack samples")
    C = cen.centers
    ci = {c: i for i, c in enumerate(cen.classes)}
    gy = np.zeros_like(y)
    gC = np.zeros_like(C)
    n_cls = len(cen.classes)

    terms = {}
    for c in cen.classes:
        idx = np.flatnonzero(labels == c)
        up = y[idx] - C[ci[c]]
        dp = _dist(up)
        jp = int(np.argmax(dp))
        P = dp[jp]
        if c == BF:
            att_idx = [ci[s] for s in attacks]
            un = y[idx][:, None, :] - C[att_idx][None, :, :]
            dn = _dist(un)
            flat = int(np.argmin(dn))
            a_n, s_n = divmod(flat, len(attacks))
            N = dn[a_n, s_n]
            un_star, cn_star = un[a_n, s_n], att_idx[s_n]
        else:
            un_all = y[idx] - C[ci[BF]]
            dn = _dist(un_all)
            a_n = int(np.argmin(dn))
            N = dn[a_n]
            un_star, cn_star = un_all[a_n], ci[BF]
        denom = P + N
        if denom <= 0:
            terms[c] = 0.0
            continue
        r = P / denom
        t = r ** g
        terms[c] = float(t)
        if with_grad:
            dr = g * r ** (g - 1) if g != 1 else 1.0
            dP = dr * N / denom ** 2 / n_cls
            dN = -dr * P / denom ** 2 / n_cls
            vp = _ddist(up[jp], np.float64(P)) * dP
            gy[idx[jp]] += vp
            gC[ci[c]] -= vp
            vn = _ddist(un_star, np.float64(N)) * dN
            gy[idx[a_n]] += vn
            gC[cn_star] -= vn
    margin = float(np.mean(list(terms.values())))

    hinge = []
    for s in attacks:
        u = C[ci[s]] - C[ci[BF]]
        d = float(_dist(u))
        h = SQRT2 - d
        hinge.append(max(h, 0.0))
        if with_grad and h > 0:
            v = -_ddist(u, np.float64(d)) * CENTER_WEIGHT / len(attacks)
            gC[ci[s]] += v
            gC[ci[BF]] -= v
    center = float(np.mean(hinge))
    parts = LossParts(margin + CENTER_WEIGHT * center, margin, center, terms)
    if not with_grad:
        return parts

    # back through centroid normalisation
    for c in cen.classes:
        idx = np.flatnonzero(labels == c)
        if c in cen.degenerate:
            first = y[idx[0]]
            nf = np.linalg.norm(first)
            gy[idx[0]] += (gC[ci[c]] - first * (first @ gC[ci[c]]) / nf ** 2) / nf
            continue
        mean = y[idx].mean(0)
        norm = np.linalg.norm(mean)
        u = C[ci[c]]
        gm = (gC[ci[c]] - u * (u @ gC[ci[c]])) / norm
        gy[idx] += gm / len(idx)
    return parts, gy


def objective_and_grad(net, x, labels, g=2.0, masks=None):
    """C-marmax loss plus weight decay, with gradients for every parameter."""
    z, cache = net.raw_forward(x, masks)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    dead = norms == 0  # every unit dropped: no gradient through this row
    y = _unit(z)
    parts, gy = cmarmax_loss(y, labels, g, with_grad=True)
    gz = (gy - y * np.sum(gy * y, axis=1, keepdims=True)) / np.where(dead, 1.0, norms)
    gz = np.where(dead, 0.0, gz)
    gw, gb = net.backward(cache, gz)
    gw = [gwi + 2.0 * net.weight_decay * w for gwi, w in zip(gw, net.weights)]
    loss = parts.total + net.decay_penalty()
    return loss, gw, gb, parts


def analytic_gradients(net, x, labels, g=2.0, masks=None):
    _, gw, gb, _ = objective_and_grad(net, x, labels, g, masks)
    return {"weights": gw, "biases": gb}


# sampling and training -------------------------------------------------------

def balanced_epoch(labels, rng):
    """Indices re-balanced by repetition: half bona fide, half split
    evenly over the attack species."""
    labels = np.asarray(labels)
    bf = np.flatnonzero(labels == BF)
    species = sorted(set(labels[labels != BF].tolist()))
    if len(bf) == 0 or not species:
        raise ValueError("training data needs bona fide and attack samples")
    per_species = max(int(np.ceil(len(bf) / len(species))),
                      max(int(np.sum(labels == s)) for s in species))
    half = per_species * len(species)

    def repeat(idx, count):
        reps = np.tile(idx, count // len(idx))
        extra = rng.choice(idx, count - len(reps), replace=False)
        return np.concatenate([reps, extra])

    bf_part = rng.permutation(repeat(bf, half))
    att_part = rng.permutation(np.concatenate(
        [repeat(np.flatnonzero(labels == s), per_species) for s in species]))
    return bf_part, att_part


def batches(bf_part, att_part, batch_size):
    """Stratified batches; every batch carries both bona fide and attacks."""
    n_batches = max(1, int(np.ceil((len(bf_part) + len(att_part)) / batch_size)))
    bf_split = np.array_split(bf_part, n_batches)
    att_split = np.array_split(att_part, n_batches)
    return [np.concatenate([b, a]) for b, a in zip(bf_split, att_split)]


@dataclass
class BFReference:
    centroid: np.ndarray


@dataclass
class TrainResult:
    net: EmbeddingNetwork
    reference: BFReference
    loss_trace: list
    class_loss_trace: list


def train(features, labels, config=None, dev_bf=None):
    """Train an embedding network with C-marmax and Adam.

    ``dev_bf`` (development bona fide features) defines the scoring
    centroid; it defaults to the bona fide rows of ``features``.
    """
    config = config or TrainConfig()
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2 or not np.any(labels != BF):
        raise ValueError("no attack species in training data")
    rng = np.random.default_rng(config.seed)
    sizes = [x.shape[1]] + [config.hidden] * config.n_hidden + [config.embedding]
    net = EmbeddingNetwork.init(sizes, seed=config.seed, dropout=config.dropout,
                                weight_decay=config.weight_decay)
    params = net.params()
    opt = Adam(lr=config.learning_rate)
    trace, class_trace = [], []
    for _ in range(config.epochs):
        bf_part, att_part = balanced_epoch(labels, rng)
        epoch_loss, epoch_terms = [], {}
        for b in batches(bf_part, att_part, config.batch_size):
            masks = net.dropout_masks(len(b), rng)
            loss, gw, gb, parts = objective_and_grad(net, x[b], labels[b], config.g, masks)
            grads = {f"W{i}": v for i, v in enumerate(gw)}
            grads.update({f"b{i}": v for i, v in enumerate(gb)})
            opt.step(params, grads)
            epoch_loss.append(loss)
            for c, t in parts.class_terms.items():
                epoch_terms.setdefault(c, []).append(t)
        trace.append(float(np.mean(epoch_loss)))
        class_trace.append({int(c): float(np.mean(v)) for c, v in sorted(epoch_terms.items())})
    ref_x = x[labels == BF] if dev_bf is None else np.asarray(dev_bf, dtype=np.float64)
    if len(ref_x) == 0:
        raise ValueError("validation bona fide set is empty")
    return TrainResult(net, BFReference(net.forward(ref_x).mean(0)), trace, class_trace)


def score(net, reference, feature):
    """Attack probability: half the distance to the bona fide centroid."""
    y = net.forward(feature)
    d = np.linalg.norm(y - reference.centroid, axis=-1) / 2.0
    d = np.clip(d, 0.0, 1.0)
    return float(d[0]) if np.ndim(feature) == 1 else d
