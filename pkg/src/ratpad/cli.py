"""Command-line entry point.

Every subcommand accepts ``--config <json>``, ``--seed`` and ``--out``; the
JSON config is defaulted exactly like :func:`ratpad.pipeline.resolve_config`.
Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__, cmarmax, datasets, features, game, oneclass, pipeline
from .baselines import baseline_score
from .density import DensityConfig, MaskedConvDensity, fit_density
from .fusion import fuse_prob

log = logging.getLogger("ratpad")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

EXTRACT_FILE = "extract.npz"
FEATURES_FILE = "features.npz"
FEATURES_KIND = "ratpad.features"


class CLIError(pipeline.ConfigError):
    pass


# helpers ----------------------------------------------------------------------

def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise CLIError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed JSON in {path}: {exc}") from exc


def _config(args, **extra):
    user = _read_json(getattr(args, "config", None))
    if not isinstance(user, dict):
        raise CLIError("config must be a JSON object")
    if getattr(args, "seed", None) is not None:
        user["seed"] = args.seed
    for k, v in extra.items():
        if v is not None:
            user[k] = v
    return pipeline.resolve_config(user)


def _need(path, what):
    if not os.path.exists(path):
        raise CLIError(f"{what} not found: {path}")
    return path


@contextlib.contextmanager
def _artifact(path):
    """Leave ``<path>.partial`` behind if the block fails."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    marker = path + ".partial"
    open(marker, "w").close()
    yield
    os.remove(marker)


def _load_dataset(root):
    try:
        return datasets.load(_need(root, "data directory"))
    except datasets.ManifestError as exc:
        raise CLIError(str(exc)) from exc


def _role_ids(ids, species, split, splits):
    return [i for i in ids if species[i] == datasets.BF and split[i] in splits]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_csv(path, required):
    with open(_need(path, "score file"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not set(required) <= set(rows[0]):
        raise CLIError(f"{path} lacks columns {sorted(set(required) - set(rows[0]))}")
    return rows


# intermediate files ------------------------------------------------------------

def _save_extract(path, dataset, avg, ll, variants, seed):
    ids = sorted(avg)
    meta = {
        "seed": seed, "data": os.path.abspath(dataset.root),
        "species_names": dataset.species_names(),
        "videos": [{"id": i, "species": dataset.record(i)["species"],
                    "split": dataset.record(i)["split"]} for i in ids],
        "variants": sorted(variants),
    }
    arrays = {"avg": np.stack([avg[i] for i in ids]), "loglik": np.array([ll[i] for i in ids])}
    for n, vid in enumerate(sorted(variants)):
        arrays[f"var{n}"] = variants[vid]
    np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
             **arrays)


def _load_npz(path):
    with np.load(_need(path, "intermediate file")) as z:
        meta = json.loads(z["meta"].tobytes())
        arrays = {k: z[k] for k in z.files if k != "meta"}
    return meta, arrays


def _variant_dict(meta, arrays):
    return {vid: arrays[f"var{n}"] for n, vid in enumerate(meta["variants"])}


def _bank_from_files(feat_dir, model_path=None):
    """Rebuild a :class:`pipeline.FeatureBank` from ``fit-features`` outputs."""
    meta, arrays = _load_npz(os.path.join(feat_dir, FEATURES_FILE))
    ids = [v["id"] for v in meta["videos"]]
    one_class, fitted = None, None
    if model_path:
        header, a = features.unpack_arrays(open(_need(model_path, "features file"), "rb").read(),
                                           FEATURES_KIND)
        fitted = features.pipeline_from_arrays(header, a)
        one_class = oneclass.OneClassModel.from_dict(header["one_class"])
    return pipeline.FeatureBank(
        ids=ids,
        species={v["id"]: v["species"] for v in meta["videos"]},
        split={v["id"]: v["split"] for v in meta["videos"]},
        rows=dict(zip(ids, arrays["rows"])),
        loglik=dict(zip(ids, arrays["loglik"])),
        variants=_variant_dict(meta, arrays),
        pipeline=fitted, one_class=one_class,
        fingerprints=meta.get("fingerprints", {}),
        roles={k: v for k, v in meta["roles"].items()},
        species_names=meta["species_names"],
        manifest_roles=meta["role_splits"],
    )


# subcommands ---------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    out = args.out or cfg["out"]
    if not out:
        raise CLIError("synth needs --out")
    scfg = datasets.SynthConfig.from_dict(dict(cfg["synth"], seed=cfg["synth"].get("seed", cfg["seed"])))
    with _artifact(os.path.join(out, "manifest.json")):
        manifest = datasets.generate(scfg, out)
    log.info("wrote %d videos to %s", len(manifest["videos"]), out)


def cmd_train_density(args):
    cfg = _config(args)
    if args.k is not None:
        cfg["density"]["k"] = args.k
    if not args.out:
        raise CLIError("train-density needs --out")
    dataset = _load_dataset(args.data)
    ids = sorted(i for i in dataset.ids(species=datasets.BF)
                 if dataset.record(i)["split"] in cfg["roles"]["density"])
    with _artifact(args.out), pipeline._stage("train-density"):
        # same seed derivation as the full pipeline, so the artifacts agree
        dcfg = DensityConfig(**dict(cfg["density"],
                                    seed=pipeline._sub_seed(cfg["seed"], "density") % 2**31))
        model = fit_density([dataset.videos[i] for i in ids], dcfg)
        model.save(args.out)
    log.info("density model (%d params) fitted on %d videos", model.n_params(), len(ids))


def cmd_extract(args):
    cfg = _config(args)
    if not args.out:
        raise CLIError("extract needs --out")
    model = MaskedConvDensity.load(_need(args.density, "density model"))
    dataset = _load_dataset(args.data)
    path = os.path.join(args.out, EXTRACT_FILE)
    with _artifact(path), pipeline._stage("extract"):
        avg, ll, var = pipeline.extract(dataset, model, cfg["features"]["n_augment"], cfg["seed"])
        _save_extract(path, dataset, avg, ll, var, cfg["seed"])
    log.info("extracted %d videos", len(avg))


def cmd_fit_features(args):
    cfg = _config(args)
    if args.m is not None:
        cfg["features"]["m"] = args.m
    if not args.out:
        raise CLIError("fit-features needs --out")
    meta, arrays = _load_npz(os.path.join(args.in_dir, EXTRACT_FILE))
    vids = meta["videos"]
    ids = [v["id"] for v in vids]
    species = {v["id"]: v["species"] for v in vids}
    split = {v["id"]: v["split"] for v in vids}
    avg = dict(zip(ids, arrays["avg"]))
    ll = dict(zip(ids, arrays["loglik"]))
    roles = cfg["roles"]
    tr = _role_ids(ids, species, split, roles["pca"])
    dv = _role_ids(ids, species, split, roles["standardizer"])
    oc_ids = _role_ids(ids, species, split, roles["one_class"])
    with _artifact(args.out), pipeline._stage("fit-features"):
        fitted = features.fit_pipeline([avg[i] for i in tr], [avg[i] for i in dv],
                                       m=cfg["features"]["m"],
                                       max_components=cfg["features"]["max_components"])
        rows = fitted.transform(arrays["avg"])
        row_of = dict(zip(ids, rows))
        oc = oneclass.fit_one_class(np.stack([row_of[i] for i in oc_ids]),
                                    [ll[i] for i in oc_ids], cfg["features"]["tail_fraction"])
        blob = features.pack_arrays(
            FEATURES_KIND,
            {"grid_shape": list(fitted.grid_shape), "seed": cfg["seed"],
             "one_class": oc.as_dict(), "dim": int(rows.shape[1]), "m": fitted.pca.m},
            features.pipeline_arrays(fitted))
        with open(args.out, "wb") as fh:
            fh.write(blob)
        variants = {vid: fitted.transform(v) for vid, v in _variant_dict(meta, arrays).items()}
        out_meta = dict(meta, roles={"pca": tr, "standardizer": dv, "one_class": oc_ids},
                        role_splits=roles,
                        fingerprints={"features": pipeline.fingerprint(blob)})
        np.savez(os.path.join(args.in_dir, FEATURES_FILE),
                 meta=np.frombuffer(json.dumps(out_meta, sort_keys=True).encode(), np.uint8),
                 rows=rows, loglik=arrays["loglik"],
                 **{f"var{n}": variants[v] for n, v in enumerate(meta["variants"])})
    log.info("features: m=%d, D=%d", fitted.pca.m, fitted.pca.dim)


def cmd_score_oneclass(args):
    bank = _bank_from_files(args.features, args.model)
    rows = np.stack([bank.rows[i] for i in bank.ids])
    ll = np.array([bank.loglik[i] for i in bank.ids])
    p_ll, p_en, p_pa = oneclass.one_class_scores(bank.one_class, rows, ll)
    with _artifact(args.out):
        _write_csv(args.out, ["video_id", "species", "p_ll", "p_energy", "p_pa"],
                   [(i, bank.species[i], a, b, c) for i, a, b, c in zip(bank.ids, p_ll, p_en, p_pa)])


def cmd_train_clf(args):
    cfg = _config(args)
    if not args.out:
        raise CLIError("train-clf needs --out")
    user = _read_json(args.config)
    protocol = user.get("protocol", cfg["protocols"][0])
    bank = _bank_from_files(args.features)
    held = user.get("held_out")
    splits = pipeline.protocol_splits(bank, protocol, cfg["seed"], cfg["known_fraction"],
                                      [held] if held else None)
    split = splits[0]
    x, y, used = pipeline.training_set(bank, split)
    pipeline.check_roles(bank, {"classifier:" + split.name: used})
    dev = np.stack([bank.rows[i] for i in bank.bf_ids(cfg["roles"]["reference"])])
    tcfg = cmarmax.TrainConfig.from_dict(dict(cfg["classifier"], seed=cfg["seed"]))
    with _artifact(args.out), pipeline._stage("train-clf"):
        if cfg["detector"] == "cmarmax":
            res = cmarmax.train(x, y, tcfg, dev_bf=dev)
            extra = {"centroid": res.reference.centroid.tolist()}
            net = res.net
        else:
            from .baselines import train_baseline_ce
            net = train_baseline_ce(x, y, tcfg).net
            extra = {}
        extra.update(detector=cfg["detector"], seed=cfg["seed"], split=split.name,
                     test_ids=sorted(i for ids in split.test_attacks.values() for i in ids))
        with open(args.out, "wb") as fh:
            fh.write(net.to_bytes(extra))
    log.info("trained %s on %d rows (%s)", cfg["detector"], len(y), split.name)


def cmd_score_clf(args):
    net, extra = cmarmax.EmbeddingNetwork.from_bytes(open(_need(args.model, "network"), "rb").read())
    bank = _bank_from_files(args.features)
    rows = np.stack([bank.rows[i] for i in bank.ids])
    if extra.get("detector", "cmarmax") == "cmarmax":
        p = cmarmax.score(net, cmarmax.BFReference(np.asarray(extra["centroid"])), rows)
    else:
        p = baseline_score(net, rows)
    with _artifact(args.out):
        _write_csv(args.out, ["video_id", "species", "p_d"],
                   [(i, bank.species[i], float(v)) for i, v in zip(bank.ids, np.atleast_1d(p))])


def cmd_fuse(args):
    clf = {r["video_id"]: r for r in _read_csv(args.clf, ["video_id", "species", "p_d"])}
    oc = {r["video_id"]: r for r in _read_csv(args.oneclass, ["video_id", "species", "p_pa"])}
    missing = sorted(set(clf) ^ set(oc))
    if missing:
        raise CLIError(f"score files disagree on video ids, e.g. {missing[:3]}")
    rows = []
    for vid in sorted(clf):
        p_d, p_o = float(clf[vid]["p_d"]), float(oc[vid]["p_pa"])
        rows.append((vid, clf[vid]["species"], p_d, p_o, fuse_prob(p_d, p_o)))
    with _artifact(args.out):
        _write_csv(args.out, ["video_id", "species", "p_d", "p_o", "p_fused"], rows)


def cmd_eval(args):
    cfg = _config(args, data=args.data)
    if args.protocol:
        cfg["protocols"] = [args.protocol]
        pipeline.resolve_config(cfg)
    out = args.out or cfg["out"]
    if not out:
        raise CLIError("eval needs --out")
    reports = pipeline.run_pipeline(cfg, out)
    for p, r in reports.items():
        log.info("%s: fused MPA-EER %.4f", p, r["detectors"]["fused"]["mpa_eer"])


def cmd_game(args):
    spec = _read_json(_need(args.params, "game parameters"))
    try:
        result = game.analyse(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise CLIError(f"invalid game parameters: {exc}") from exc
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        with _artifact(args.out):
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
    else:
        print(text)


def cmd_run(args):
    cfg = _config(args)
    out = args.out or cfg["out"]
    if not out:
        raise CLIError("run needs --out (or 'out' in the config)")
    reports = pipeline.run_pipeline(cfg, out)
    for p, r in reports.items():
        d = r["detectors"]
        log.info("%s: classifier %.4f  one-class %.4f  fused %.4f", p,
                 d["classifier"]["mpa_eer"], d["one_class"]["mpa_eer"], d["fused"]["mpa_eer"])


# parser ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ratpad", description="Face presentation attack detection toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.set_defaults(func=fn)
        return sp

    add("synth", cmd_synth, "generate a synthetic dataset")
    sp = add("train-density", cmd_train_density, "fit the pixel density model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int)
    sp = add("extract", cmd_extract, "per-video log-likelihood tensors")
    sp.add_argument("--density", required=True)
    sp.add_argument("--data", required=True)
    sp = add("fit-features", cmd_fit_features, "fit standardisers, PCA and one-class model")
    sp.add_argument("--in", dest="in_dir", required=True)
    sp.add_argument("--m", type=int)
    sp = add("score-oneclass", cmd_score_oneclass, "one-class attack probabilities")
    sp.add_argument("--features", required=True)
    sp.add_argument("--model", required=True)
    sp = add("train-clf", cmd_train_clf, "train the discriminative classifier")
    sp.add_argument("--features", required=True)
    sp = add("score-clf", cmd_score_clf, "discriminative attack probabilities")
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp = add("fuse", cmd_fuse, "fuse classifier and one-class scores")
    sp.add_argument("--clf", required=True)
    sp.add_argument("--oneclass", required=True)
    sp = add("eval", cmd_eval, "evaluate one protocol end to end")
    sp.add_argument("--protocol", choices=pipeline.PROTOCOLS)
    sp.add_argument("--data")
    sp = add("game", cmd_game, "attacker/defender payoff analysis")
    sp.add_argument("--params", required=True)
    add("run", cmd_run, "full pipeline")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        args.func(args)
    except pipeline.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        log.error("stage %s failed: %s", exc.stage, exc.cause)
        return EXIT_STAGE
    except (pipeline.RoleViolation, ValueError, OSError) as exc:
        log.error("failed: %s", exc)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
