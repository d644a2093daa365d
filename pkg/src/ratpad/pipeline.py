"""End-to-end orchestration with data-role bookkeeping.

Data roles:

* training bona fide -> density model, pixel standardiser, PCA
* development bona fide -> feature standardiser, one-class Gaussians,
  classifier scoring centroid
* training + development bona fide and known attacks -> classifier
* test bona fide -> never fitted on
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import baselines, cmarmax, datasets, features, metrics, oneclass
from .density import DensityConfig, batch_loglik, fit_density
from .fusion import fuse_prob

log = logging.getLogger(__name__)

PROTOCOLS = ("known", "loo", "fewshot1", "fewshot5")
DETECTORS = ("cmarmax", "baseline_ce")

DEFAULT_ROLES = {
    "density": ["train"],
    "pca": ["train"],
    "standardizer": ["dev"],
    "one_class": ["dev"],
    "reference": ["dev"],
    "classifier": ["train", "dev"],
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class RoleViolation(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "data": None,
    "synth": {},
    "out": None,
    "density": {"k": 3, "channels": 16, "epochs": 60, "batch_size": 8,
                "learning_rate": 3e-3},
    "features": {"m": None, "max_components": 64, "tail_fraction": 0.10,
                 "n_augment": 3},
    "classifier": {"learning_rate": 1e-3, "batch_size": 128, "epochs": 300, "g": 2.0,
                   "hidden": 128, "embedding": 6, "n_hidden": 4, "dropout": 0.5,
                   "weight_decay": 1e-6},
    "detector": "cmarmax",
    "protocols": ["known", "loo"],
    "known_fraction": 0.5,
    "roles": DEFAULT_ROLES,
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(user=None):
    """Fill defaults and validate; raises :class:`ConfigError`."""
    cfg = _merge(DEFAULT_CONFIG, user)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    for stage, splits in cfg["roles"].items():
        if stage not in DEFAULT_ROLES:
            raise ConfigError(f"unknown fit stage {stage!r} in roles")
        bad = [s for s in splits if s not in ("train", "dev")]
        if bad:
            raise ConfigError(f"fit stage {stage!r} may not consume split(s) {bad}; "
                              "test bona fide data is reserved for evaluation")
    for p in cfg["protocols"]:
        if p not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {p!r}; choose from {PROTOCOLS}")
    if cfg["detector"] not in DETECTORS:
        raise ConfigError(f"unknown detector {cfg['detector']!r}")
    if cfg["data"] is not None and not os.path.isdir(cfg["data"]):
        raise ConfigError(f"data directory {cfg['data']!r} does not exist")
    if not 0.0 < cfg["known_fraction"] < 1.0:
        raise ConfigError("known_fraction must lie in (0, 1)")
    try:
        datasets.SynthConfig.from_dict(dict(cfg["synth"], seed=cfg["synth"].get("seed", cfg["seed"])))
        DensityConfig(**cfg["density"])
        cmarmax.TrainConfig.from_dict(cfg["classifier"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def fingerprint(data):
    return hashlib.sha256(data).hexdigest()[:16]


def _sub_seed(seed, *keys):
    # stable across processes, unlike hash()
    digest = hashlib.sha256(repr((seed,) + keys).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# feature bank ----------------------------------------------------------------

@dataclass
class FeatureBank:
    """Everything downstream of the generator, keyed by video id."""

    ids: list
    species: dict
    split: dict
    rows: dict  # whole-video standardised features
    loglik: dict  # aggregated video log-likelihoods
    variants: dict  # id -> (n_aug, m+1) augmented training rows
    pipeline: features.FeaturePipeline
    one_class: oneclass.OneClassModel
    fingerprints: dict
    roles: dict  # fit stage -> sorted consumed ids
    species_names: list
    manifest_roles: dict = field(default_factory=dict)

    def bf_ids(self, split):
        return [i for i in self.ids if self.species[i] == datasets.BF and self.split[i] in split]

    def attack_ids(self, name):
        return [i for i in self.ids if self.species[i] == name]


def extract(dataset, density_model, n_augment=3, seed=0):
    """Per-video averaged grids, video log-likelihoods and augmented grids."""
    avg, ll, variants = {}, {}, {}
    for vid in sorted(dataset.videos):
        video = dataset.videos[vid]
        rec = dataset.record(vid)
        tensors = batch_loglik(density_model, video)
        grids = np.stack([t.grid for t in tensors])
        avg[vid] = grids.mean(0)
        ll[vid] = float(np.mean([t.aggregate for t in tensors]))
        if n_augment and not (rec["species"] == datasets.BF and rec["split"] == "test"):
            flipped = np.stack([t.grid for t in batch_loglik(density_model,
                                                             datasets.hflip(video))])
            rng = np.random.default_rng(_sub_seed(seed, "augment", vid))
            rows = []
            for _ in range(n_augment):
                plan = datasets.augment_plan(len(video), rng)
                src = flipped if plan.flip else grids
                rows.append(src[plan.start:plan.stop].mean(0))
            variants[vid] = np.stack(rows)
    return avg, ll, variants


def _role_ids(dataset, splits):
    return sorted(i for i in dataset.ids(species=datasets.BF) if dataset.record(i)["split"] in splits)


def build_bank(dataset, cfg, stats=None):
    """Fit density, features and the one-class model; return a FeatureBank."""
    seed = cfg["seed"]
    roles = cfg["roles"]
    fp, consumed = {}, {}

    with _stage("train-density"):
        ids = _role_ids(dataset, roles["density"])
        dcfg = DensityConfig(**dict(cfg["density"], seed=_sub_seed(seed, "density") % 2**31))
        model = fit_density([dataset.videos[i] for i in ids], dcfg)
        consumed["density"] = ids
        fp["density"] = fingerprint(model.to_bytes())
        log.info("density model fitted on %d videos (%d params)", len(ids), model.n_params())

    with _stage("extract"):
        avg, ll, var = extract(dataset, model, cfg["features"]["n_augment"], seed)

    with _stage("fit-features"):
        tr = _role_ids(dataset, roles["pca"])
        dv = _role_ids(dataset, roles["standardizer"])
        fitted = features.fit_pipeline([avg[i] for i in tr], [avg[i] for i in dv],
                                       m=cfg["features"]["m"],
                                       max_components=cfg["features"]["max_components"])
        consumed["pca"] = tr
        consumed["standardizer"] = dv
        all_ids = sorted(avg)
        rows_arr = fitted.transform(np.stack([avg[i] for i in all_ids]))
        rows = dict(zip(all_ids, rows_arr))
        variants = {i: fitted.transform(v) for i, v in var.items()}
        fp["features"] = fingerprint(features.pack_arrays(
            "ratpad.features", {"grid_shape": list(fitted.grid_shape)},
            features.pipeline_arrays(fitted)))

    with _stage("fit-one-class"):
        oc_ids = _role_ids(dataset, roles["one_class"])
        oc = oneclass.fit_one_class(np.stack([rows[i] for i in oc_ids]),
                                    [ll[i] for i in oc_ids], cfg["features"]["tail_fraction"])
        consumed["one_class"] = oc_ids
        fp["one_class"] = fingerprint(json.dumps(oc.as_dict(), sort_keys=True).encode())

    if stats is not None:
        stats.update(avg=avg, density=model, pipeline=fitted)
    return FeatureBank(
        ids=all_ids,
        species={i: dataset.record(i)["species"] for i in all_ids},
        split={i: dataset.record(i)["split"] for i in all_ids},
        rows=rows, loglik=ll, variants=variants, pipeline=fitted, one_class=oc,
        fingerprints=fp, roles=consumed, species_names=dataset.species_names(),
        manifest_roles={k: list(v) for k, v in roles.items()},
    )


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, RoleViolation, ConfigError)):
            raise StageError(self.name, exc) from exc
        return False


def check_roles(bank, consumed):
    """Fail if any fit stage consumed ids outside its assigned role."""
    for stage, ids in consumed.items():
        if stage.startswith("classifier"):
            allowed_bf = set(bank.bf_ids(bank.manifest_roles["classifier"]))
            bad = [i for i in ids if bank.species[i] == datasets.BF and i not in allowed_bf]
        else:
            splits = bank.manifest_roles[stage.split(":")[0]]
            bad = [i for i in ids if bank.species[i] != datasets.BF or bank.split[i] not in splits]
        if bad:
            raise RoleViolation(f"fit stage {stage!r} consumed ids outside its role: {bad[:5]}")


# protocols -----------------------------------------------------------------

@dataclass
class Split:
    name: str
    train_attacks: list
    test_attacks: dict  # species -> ids


def protocol_splits(bank, protocol, seed, known_fraction=0.5, species=None):
    """Classifier training/test partitions for one protocol."""
    names = bank.species_names
    targets = names if species is None else list(species)
    for s in targets:
        if s not in names:
            raise ValueError(f"unknown species {s!r}")
    if protocol == "known":
        rng = np.random.default_rng(_sub_seed(seed, "known"))
        train, test = [], {}
        for s in names:
            ids = bank.attack_ids(s)
            if len(ids) < 2:
                raise ValueError(f"known protocol needs >= 2 videos of {s!r}")
            perm = [ids[k] for k in rng.permutation(len(ids))]
            n_train = max(1, min(len(ids) - 1, int(round(known_fraction * len(ids)))))
            train += perm[:n_train]
            if s in targets:
                test[s] = sorted(perm[n_train:])
        return [Split("known", sorted(train), test)]
    if protocol == "loo" or protocol.startswith("fewshot"):
        if len(names) < 2:
            raise ValueError(f"{protocol} protocol needs >= 2 attack species")
        k = 0 if protocol == "loo" else int(protocol[len("fewshot"):])
        out = []
        for s in targets:
            held = bank.attack_ids(s)
            if len(held) < k + 1:
                raise ValueError(f"{protocol} needs > {k} videos of held-out species {s!r}")
            rng = np.random.default_rng(_sub_seed(seed, protocol, s))
            shots = sorted(held[j] for j in rng.choice(len(held), k, replace=False)) if k else []
            train = sorted(i for o in names if o != s for i in bank.attack_ids(o)) + shots
            out.append(Split(f"{protocol}:{s}", sorted(train),
                             {s: sorted(set(held) - set(shots))}))
        return out
    raise ValueError(f"unknown protocol {protocol!r}")


def training_set(bank, split):
    """Whole-video plus augmented rows and integer labels (0 = bona fide)."""
    code = {s: i + 1 for i, s in enumerate(bank.species_names)}
    bf = bank.bf_ids(bank.manifest_roles["classifier"])
    xs, ys, used = [], [], []
    for vid in bf + split.train_attacks:
        lab = 0 if bank.species[vid] == datasets.BF else code[bank.species[vid]]
        block = [bank.rows[vid][None]]
        if vid in bank.variants:
            block.append(bank.variants[vid])
        block = np.concatenate(block)
        xs.append(block)
        ys += [lab] * len(block)
        used.append(vid)
    return np.concatenate(xs), np.array(ys), used


def train_detector(x, y, dev_rows, tcfg, detector):
    """Train one classifier; returns ``(score_fn, model_bytes, trace)``."""
    if detector == "cmarmax":
        res = cmarmax.train(x, y, tcfg, dev_bf=dev_rows)
        blob = res.net.to_bytes({"centroid": res.reference.centroid.tolist()})
        return (lambda rows: cmarmax.score(res.net, res.reference, rows)), blob, res.loss_trace
    res = baselines.train_baseline_ce(x, y, tcfg)
    return (lambda rows: baselines.baseline_score(res.net, rows)), res.net.to_bytes(), res.loss_trace


def _species_metrics(bf_scores, att_scores):
    e = metrics.eer(bf_scores, att_scores)
    acer, bpcer = metrics.acer_at_apcer(bf_scores, att_scores)
    det = metrics.det_curve(bf_scores, att_scores)
    return {"eer": e, "acer": acer, "bpcer": bpcer,
            "det": [[_num(t), a, b] for t, a, b in det.rows()]}


def _num(t):
    return t if np.isfinite(t) else ("inf" if t > 0 else "-inf")


def run_protocol(bank, protocol, seed=0, train_config=None, detector="cmarmax",
                 known_fraction=0.5, species=None):
    """Train the protocol's classifiers and assemble an evaluation report."""
    tcfg = train_config or cmarmax.TrainConfig()
    splits = protocol_splits(bank, protocol, seed, known_fraction, species)
    test_bf = bank.bf_ids(["test"])
    if not test_bf:
        raise ValueError("no test bona fide videos")
    dev_ids = bank.bf_ids(bank.manifest_roles["reference"])
    dev_rows = np.stack([bank.rows[i] for i in dev_ids])
    oc_rows = np.stack([bank.rows[i] for i in bank.ids])
    _, _, p_oc = oneclass.one_class_scores(bank.one_class, oc_rows,
                                           np.array([bank.loglik[i] for i in bank.ids]))
    oc_score = dict(zip(bank.ids, p_oc))

    per = {"classifier": {}, "one_class": {}, "fused": {}}
    models, consumed, traces = {}, {"reference": dev_ids}, {}
    scores = {}
    for sp in splits:
        x, y, used = training_set(bank, sp)
        consumed[f"classifier:{sp.name}"] = used
        cfg_seed = cmarmax.TrainConfig(**dict(vars(tcfg), seed=_sub_seed(seed, "clf", sp.name) % 2**31))
        score_fn, blob, trace = train_detector(x, y, dev_rows, cfg_seed, detector)
        models[sp.name] = fingerprint(blob)
        traces[sp.name] = trace[-1]
        probe = test_bf + [i for ids in sp.test_attacks.values() for i in ids]
        p_d = dict(zip(probe, np.atleast_1d(score_fn(np.stack([bank.rows[i] for i in probe])))))
        for s, ids in sp.test_attacks.items():
            for name, src in (("classifier", p_d), ("one_class", oc_score)):
                per[name][s] = _species_metrics([src[i] for i in test_bf], [src[i] for i in ids])
            fused = {i: fuse_prob(p_d[i], oc_score[i]) for i in probe}
            per["fused"][s] = _species_metrics([fused[i] for i in test_bf], [fused[i] for i in ids])
            for i in test_bf + ids:
                scores.setdefault(sp.name, {})[i] = [float(p_d[i]), float(oc_score[i]),
                                                     float(fused[i])]
    check_roles(bank, dict(bank.roles, **consumed))
    detectors = {}
    for name, sp_metrics in per.items():
        detectors[name] = {
            "species": sp_metrics,
            "mpa_eer": metrics.mpa_eer({s: m["eer"] for s, m in sp_metrics.items()}),
            "mpa_species": max(sp_metrics, key=lambda s: (sp_metrics[s]["eer"], s)),
            "mean_eer": float(np.mean([m["eer"] for m in sp_metrics.values()])),
        }
    return {
        "protocol": protocol,
        "seed": seed,
        "detector": detector,
        "n_classifiers": len(splits),
        "detectors": detectors,
        "fingerprints": dict(bank.fingerprints, classifiers=models),
        "final_train_loss": traces,
        "roles": {k: {"count": len(v), "digest": fingerprint(json.dumps(sorted(v)).encode())}
                  for k, v in sorted(dict(bank.roles, **consumed).items())},
        "scores": scores,
    }


# whole run -------------------------------------------------------------------

def load_or_synth(cfg, out_dir=None):
    if cfg["data"]:
        return datasets.load(cfg["data"])
    scfg = datasets.SynthConfig.from_dict(dict(cfg["synth"], seed=cfg["synth"].get("seed", cfg["seed"])))
    if out_dir:
        data_dir = os.path.join(out_dir, "data")
        datasets.generate(scfg, data_dir)
        return datasets.load(data_dir)
    return datasets.from_arrays(datasets.generate_arrays(scfg), scfg)


def dumps_report(report):
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=False)


def write_report(report, out_dir, name):
    os.makedirs(os.path.join(out_dir, "det"), exist_ok=True)
    path = os.path.join(out_dir, f"report_{name}.json")
    with open(path, "w") as fh:
        fh.write(dumps_report(report))
    for det_name, det in report["detectors"].items():
        for s, m in det["species"].items():
            with open(os.path.join(out_dir, "det", f"{name}_{det_name}_{s}.tsv"), "w") as fh:
                fh.write("threshold\tapcer\tbpcer\n")
                for t, a, b in m["det"]:
                    fh.write(f"{t}\t{a!r}\t{b!r}\n")
    return path


def run_pipeline(user_config=None, out_dir=None):
    """Run the configured protocols; returns ``{protocol: report}``.

    With ``out_dir`` every artifact is written there, beside a snapshot of
    the resolved configuration. A failure leaves a ``.partial`` marker.
    """
    cfg = resolve_config(user_config)
    out_dir = out_dir or cfg["out"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
            json.dump(cfg, fh, indent=1, sort_keys=True)
        marker = os.path.join(out_dir, ".partial")
        open(marker, "w").close()
    with _stage("synth"):
        dataset = load_or_synth(cfg, out_dir)
    bank = build_bank(dataset, cfg)
    tcfg = cmarmax.TrainConfig.from_dict(cfg["classifier"])
    reports = {}
    for protocol in cfg["protocols"]:
        with _stage(f"eval:{protocol}"):
            reports[protocol] = run_protocol(bank, protocol, cfg["seed"], tcfg, cfg["detector"],
                                             cfg["known_fraction"])
        if out_dir:
            write_report(reports[protocol], out_dir, protocol)
    if out_dir:
        summary = {p: {d: r["detectors"][d]["mpa_eer"] for d in r["detectors"]}
                   for p, r in reports.items()}
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
        os.remove(marker)
    return reports
