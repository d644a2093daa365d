"""Anomaly features from pixel log-likelihood grids.

Temporal average -> per-cell standardisation -> PCA -> residual
augmentation -> standardisation on development bona fide data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-8
MAGIC = b"RPFEAT01"
FORMAT_VERSION = 1


def temporal_average(tensors):
    """Element-wise mean of a sequence of grids (or PixelLogLikTensors)."""
    grids = [getattr(t, "grid", t) for t in tensors]
    if not grids:
        raise ValueError("empty tensor sequence")
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"tensors have differing shapes: {sorted(shapes)}")
    return np.mean(np.stack(grids).astype(np.float64), axis=0)


@dataclass
class Standardizer:
    """Per-dimension zero-mean unit-variance map with floored std.

    Dimensions whose std falls below the floor map to 0.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data):
        data = np.asarray(data, dtype=np.float64)
        if data.shape[0] < 2:
            raise ValueError("insufficient data for variance")
        mean = data.mean(axis=0)
        std = np.sqrt(((data - mean) ** 2).mean(axis=0))
        return cls(mean, np.maximum(std, STD_FLOOR))

    @property
    def degenerate(self):
        return self.std <= STD_FLOOR

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-self.mean.ndim:] != self.mean.shape:
            raise ValueError(f"expected trailing shape {self.mean.shape}, got {x.shape}")
        z = (x - self.mean) / self.std
        return np.where(self.degenerate, 0.0, z)


# Named aliases for the two roles the standardiser plays in the pipeline.
PixelStandardizer = Standardizer
FeatureStandardizer = Standardizer


def fit_pixel_standardizer(averaged_grids):
    return Standardizer.fit(np.stack([np.asarray(g) for g in averaged_grids]))


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (m, D), orthonormal rows
    explained_variance: np.ndarray

    @property
    def m(self):
        return self.components.shape[0]

    @property
    def dim(self):
        return self.mean.shape[0]


def _fix_signs(components):
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def _complete_basis(basis, count, dim):
    """Extend orthonormal rows ``basis`` to ``count`` rows via Gram-Schmidt."""
    rows = list(basis)
    for e in range(dim):
        if len(rows) >= count:
            break
        v = np.zeros(dim)
        v[e] = 1.0
        for r in rows:
            v -= (r @ v) * r
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            rows.append(v / norm)
    return np.array(rows).reshape(-1, dim)


def fit_pca(vectors, m=None):
    """PCA on ``(n, D)`` data; components sorted by explained variance.

    Variances use the ``n - 1`` normalisation. When ``D`` exceeds ``n`` the
    eigenproblem is solved on the ``n x n`` Gram matrix, which shares its
    non-zero spectrum with the covariance.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_pca needs at least 2 samples of shape (n, D)")
    n, dim = x.shape
    if m is None:
        m = min(n - 1, dim)
    if not 1 <= m <= min(n, dim):
        raise ValueError(f"component count m={m} exceeds min(samples, dim)={min(n, dim)}")
    mean = x.mean(axis=0)
    xc = x - mean
    if dim <= n:
        evals, evecs = np.linalg.eigh(xc.T @ xc / (n - 1))
        order = np.argsort(evals)[::-1][:m]
        evals, comps = evals[order], evecs[:, order].T
    else:
        evals, u = np.linalg.eigh(xc @ xc.T / (n - 1))
        order = np.argsort(evals)[::-1]
        evals, u = evals[order], u[:, order]
        scale = evals.max(initial=0.0)
        keep = evals > max(scale, 1.0) * 1e-12
        comps = (xc.T @ u[:, keep]) / np.sqrt(evals[keep] * (n - 1))
        comps = comps.T[:m]
        # re-orthonormalise against round-off, then pad degenerate directions
        if len(comps):
            q, _ = np.linalg.qr(comps.T)
            comps = np.sign(np.sum(q.T * comps, axis=1))[:, None] * q.T
        comps = _complete_basis(comps, m, dim)
        evals = np.concatenate([evals[keep][:m], np.zeros(m - min(m, keep.sum()))])
    evals = np.clip(evals, 0.0, None)
    return PCAModel(mean, _fix_signs(comps), evals)


@dataclass
class AnomalyFeature:
    coords: np.ndarray
    residual: float
    standardized: bool = False

    def vector(self):
        return np.append(self.coords, self.residual)

    def __len__(self):
        return len(self.coords) + 1


def project(pca, vector):
    """Coordinates in the PCA basis plus the distance to the PCA hyperplane."""
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape[0] != pca.dim:
        raise ValueError(f"vector length {v.shape[0]} != PCA dimension {pca.dim}")
    centred = v - pca.mean
    coords = pca.components @ centred
    residual = float(np.linalg.norm(centred - pca.components.T @ coords))
    return AnomalyFeature(coords, residual)


def project_many(pca, vectors):
    """Vectorised :func:`project`; returns ``(n, m + 1)`` augmented rows."""
    v = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    if v.shape[1] != pca.dim:
        raise ValueError(f"vector length {v.shape[1]} != PCA dimension {pca.dim}")
    centred = v - pca.mean
    coords = centred @ pca.components.T
    residual = np.linalg.norm(centred - coords @ pca.components, axis=1)
    return np.column_stack([coords, residual])


def fit_feature_standardizer(features):
    rows = [f.vector() if isinstance(f, AnomalyFeature) else np.asarray(f) for f in features]
    return Standardizer.fit(np.stack(rows))


def standardize(fs, feature):
    if feature.standardized:
        raise ValueError("feature is already standardized")
    z = fs.transform(feature.vector())
    return AnomalyFeature(z[:-1], float(z[-1]), standardized=True)


@dataclass
class FeaturePipeline:
    """Fitted pixel standardiser, PCA and feature standardiser."""

    pixel: Standardizer
    pca: PCAModel
    feature: Standardizer
    grid_shape: tuple

    def transform(self, averaged_grids):
        """Standardised ``(n, m + 1)`` rows for temporally averaged grids."""
        g = np.asarray(averaged_grids, dtype=np.float64)
        z = self.pixel.transform(g).reshape(len(g), -1)
        return self.feature.transform(project_many(self.pca, z))


def fit_pipeline(train_grids, dev_grids, m=None, max_components=64):
    """Fit standardiser and PCA on training grids, feature scaling on dev grids."""
    train = np.asarray(train_grids, dtype=np.float64)
    dev = np.asarray(dev_grids, dtype=np.float64)
    pixel = fit_pixel_standardizer(train)
    z = pixel.transform(train).reshape(len(train), -1)
    if m is None:
        m = min(len(train) - 1, z.shape[1], max_components)
    pca = fit_pca(z, m)
    dev_rows = project_many(pca, pixel.transform(dev).reshape(len(dev), -1))
    return FeaturePipeline(pixel, pca, Standardizer.fit(dev_rows), tuple(train.shape[1:]))


# persistence --------------------------------------------------------------

def pack_arrays(kind, meta, arrays):
    """Binary blob: magic, JSON header, little-endian float64 blocks."""
    names = list(arrays)
    header = dict(meta, format=kind, version=FORMAT_VERSION,
                  arrays=[[n, list(np.shape(arrays[n]))] for n in names])
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.asarray(arrays[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body


def unpack_arrays(data, kind):
    if data[:8] != MAGIC:
        raise ValueError("bad magic: not a ratpad array file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header.get("format") != kind:
        raise ValueError(f"expected {kind} file, found {header.get('format')}")
    offset = 12 + hlen
    arrays = {}
    for name, shape in header.pop("arrays"):
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, "<f8", size, offset).astype(np.float64).reshape(shape)
        offset += 8 * size
    if offset != len(data):
        raise ValueError("array file has trailing or missing bytes")
    return header, arrays


def pipeline_arrays(fp):
    return {
        "pixel_mean": fp.pixel.mean, "pixel_std": fp.pixel.std,
        "pca_mean": fp.pca.mean, "pca_components": fp.pca.components,
        "pca_variance": fp.pca.explained_variance,
        "feature_mean": fp.feature.mean, "feature_std": fp.feature.std,
    }


def pipeline_from_arrays(header, a):
    return FeaturePipeline(
        Standardizer(a["pixel_mean"], a["pixel_std"]),
        PCAModel(a["pca_mean"], a["pca_components"], a["pca_variance"]),
        Standardizer(a["feature_mean"], a["feature_std"]),
        tuple(header["grid_shape"]),
    )
