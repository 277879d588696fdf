"""Command-line pipeline driver.

Subcommands: phantom-gen, score, extract, eval-froc, train-mil, eval-roc,
experiment-coupling. Configuration comes from an optional JSON file
(--config) whose keys are overridden by CLI flags; every stochastic command
requires a seed (flag or config) so runs are reproducible. Output artifacts
are written atomically (temp file + rename) and each error class maps to a
distinct exit code.
"""

import argparse
import contextlib
import json
import math
import os
import shutil
import sys
import tempfile

import numpy as np

from . import candidates as cand_mod
from . import metrics, mil, phantom
from .errors import (
    ConfigurationError,
    EmptyBagError,
    FormatError,
    GenerationError,
    LungCadError,
    ValidationError,
)
from .inference import TilingConfig, reference_blob_scorer, score_volume
from .volume import (
    CtVolume,
    ProbMap,
    load_annotations_csv,
    load_metaimage,
    save_metaimage,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_VALIDATION = 5
EXIT_GENERATION = 6
EXIT_EMPTY_BAG = 7
EXIT_OTHER = 8

COUPLING_FP_RATES = (0.125, 1.0, 8.0)


# ---------------------------------------------------------------------------
# Plumbing

@contextlib.contextmanager
def atomic_outputs(paths):
    """Yield temp paths that are renamed onto ``paths`` only on success."""
    paths = list(paths)
    out_dir = os.path.dirname(os.path.abspath(paths[0]))
    tmpdir = tempfile.mkdtemp(dir=out_dir, prefix=".tmp-")
    try:
        tmp_paths = [os.path.join(tmpdir, os.path.basename(p)) for p in paths]
        yield tmp_paths if len(tmp_paths) > 1 else tmp_paths[0]
        for tmp, final in zip(tmp_paths, paths):
            os.replace(tmp, final)
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)


def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return cfg


def resolve_seed(args, config, required=True):
    seed = args.seed if args.seed is not None else config.get("seed")
    if seed is None and required:
        raise ConfigurationError(
            "no seed given: pass --seed or set \"seed\" in the config"
        )
    return seed


def phantom_config(config):
    section = dict(config.get("phantom", {}))
    for key in ("shape", "spacing", "nodule_count_range", "diameter_range",
                "vessel_count_range", "vessel_radius_range", "diameter_beta"):
        if key in section:
            section[key] = tuple(section[key])
    return phantom.PhantomConfig(**section)


def build_scorer(args, config):
    section = dict(config.get("scorer", {}))
    name = args.scorer or section.pop("name", "reference")
    if name != "reference":
        raise ConfigurationError(f"unknown scorer {name!r}")
    if "radii_mm" in section:
        section["radii_mm"] = tuple(section["radii_mm"])
    threshold = section.get("threshold")
    if threshold is not None and not 0.0 <= threshold <= 10.0:
        raise ConfigurationError(f"scorer threshold {threshold} out of range")
    return reference_blob_scorer(**section)


def tiling_config(config):
    section = config.get("tiling", {})
    kwargs = {}
    if "block" in section:
        kwargs["block"] = tuple(section["block"])
    if "margin" in section:
        kwargs["margin"] = int(section["margin"])
    return TilingConfig(**kwargs)


def write_json(payload, path):
    with atomic_outputs([path]) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if "patients" not in manifest:
        raise FormatError(f"{path}: manifest has no \"patients\" list")
    return manifest


def load_patient(manifest_path, record):
    base = os.path.dirname(os.path.abspath(manifest_path))
    vol_path = os.path.join(base, record["volume"])
    ann_path = os.path.join(base, record["annotations"])
    for p in (vol_path, ann_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    return load_metaimage(vol_path), load_annotations_csv(ann_path)


def _bag_rng(config, index):
    # bag construction has its own fixed seed so that training and later
    # evaluation reconstruct identical bags regardless of the command seed
    bag_seed = int(config.get("mil", {}).get("bag_seed", 1234))
    return np.random.default_rng(np.random.SeedSequence([bag_seed, index]))


# ---------------------------------------------------------------------------
# Commands

def cmd_phantom_gen(args):
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    cfg = phantom_config(config)
    n = args.n if args.n is not None else int(config.get("n_patients", 20))
    manifest = phantom.generate_dataset(n, cfg, seed=seed, out_dir=args.out)
    print(f"wrote {n} phantoms to {args.out} "
          f"(malignant prevalence {manifest['malignant_prevalence']:.2f})")
    return EXIT_OK


def cmd_score(args):
    config = load_config(args.config)
    scorer = build_scorer(args, config)
    tiling = tiling_config(config)
    volumes = args.volume
    multi = len(volumes) > 1
    if multi:
        os.makedirs(args.out, exist_ok=True)
    for vol_path in volumes:
        if not os.path.exists(vol_path):
            raise FileNotFoundError(vol_path)
        vol = load_metaimage(vol_path)
        pm = score_volume(vol, scorer, tiling)
        if multi:
            stem = os.path.splitext(os.path.basename(vol_path))[0]
            out = os.path.join(args.out, f"{stem}_prob.mhd")
        else:
            out = args.out
        raw = os.path.splitext(out)[0] + ".raw"
        with atomic_outputs([out, raw]) as (tmp_mhd, _):
            save_metaimage(
                CtVolume(data=pm.data, spacing=pm.spacing, origin=pm.origin),
                tmp_mhd,
            )
        print(f"scored {vol_path} -> {out}")
    return EXIT_OK


def cmd_extract(args):
    config = load_config(args.config)
    t = args.threshold if args.threshold is not None else config.get(
        "candidate_threshold", 0.5
    )
    if not 0.0 <= t <= 1.0:
        raise ConfigurationError(f"candidate threshold {t} outside [0, 1]")
    if not os.path.exists(args.probmap):
        raise FileNotFoundError(args.probmap)
    vol = load_metaimage(args.probmap)
    pm = ProbMap(data=np.clip(vol.data, 0.0, 1.0), spacing=vol.spacing,
                 origin=vol.origin)
    cands = cand_mod.extract_candidates(pm, t, patient_id=args.patient_id)
    with atomic_outputs([args.out]) as tmp:
        cand_mod.save_candidates_csv(cands, tmp)
    print(f"extracted {len(cands)} candidates at threshold {t} -> {args.out}")
    return EXIT_OK


def _froc_patients(args, manifest):
    base = os.path.dirname(os.path.abspath(args.manifest))
    patients = []
    for record in manifest["patients"]:
        ann_path = os.path.join(base, record["annotations"])
        if not os.path.exists(ann_path):
            raise FileNotFoundError(ann_path)
        anns = load_annotations_csv(ann_path)
        cand_path = os.path.join(args.candidates_dir,
                                 f"{record['id']}_candidates.csv")
        if not os.path.exists(cand_path):
            raise FileNotFoundError(cand_path)
        cands = cand_mod.load_candidates_csv(cand_path)
        patients.append((cands, anns))
    return patients


def cmd_eval_froc(args):
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    manifest = load_manifest(args.manifest)
    patients = _froc_patients(args, manifest)
    curve = metrics.froc(patients)
    value = metrics.cpm(curve)
    eval_cfg = config.get("eval", {})
    B = int(eval_cfg.get("bootstrap_B", 200))
    lo, hi = metrics.bootstrap_ci(
        lambda pts: metrics.cpm(metrics.froc(pts)), patients, B=B,
        level=float(eval_cfg.get("level", 0.95)),
        rng=np.random.default_rng(seed),
    )
    with atomic_outputs([args.out]) as tmp:
        metrics.save_froc_csv(curve, tmp)
    fp = np.array([p[1] for p in curve.points])
    sens = np.array([p[2] for p in curve.points])
    order = np.argsort(fp, kind="stable")
    summary = {
        "cpm": value, "cpm_ci": [lo, hi], "bootstrap_B": B,
        "n_patients": curve.n_patients, "n_nodules": curve.n_nodules,
        "sensitivity_at": {
            str(p): float(np.interp(p, fp[order], sens[order]))
            for p in metrics.CPM_OPERATING_POINTS
        },
    }
    write_json(summary, os.path.splitext(args.out)[0] + "_summary.json")
    print(f"cpm {value:.4f} (95% CI {lo:.4f}-{hi:.4f}) -> {args.out}")
    return EXIT_OK


def _manifest_bags(args, manifest, config):
    cfg = phantom_config(config)
    bags, labels = [], []
    for i, record in enumerate(manifest["patients"]):
        vol, anns = load_patient(args.manifest, record)
        bag, _ = phantom.build_mil_bags(vol, anns, cfg, _bag_rng(config, i),
                                        patient_id=record["id"])
        bags.append(bag)
        labels.append(1.0 if record["label"] == "malignant" else 0.0)
    return bags, labels


def _train_config(config, attention_dim=16):
    section = config.get("mil", {})
    return mil.MilTrainConfig(
        lr=float(section.get("lr", 0.01)),
        momentum=float(section.get("momentum", 0.9)),
        lr_halving_epochs=int(section.get("lr_halving_epochs", 50)),
        batch_size=int(section.get("batch_size", 32)),
        epochs=int(section.get("epochs", 100)),
        attention_dim=int(section.get("attention_dim", attention_dim)),
    )


def cmd_train_mil(args):
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    manifest = load_manifest(args.manifest)
    bags, labels = _manifest_bags(args, manifest, config)
    cfg = _train_config(config)
    params, trace = mil.train_mil(bags, labels, cfg, np.random.default_rng(seed))
    with atomic_outputs([args.out]) as tmp:
        mil.save_mil_params(params, tmp)
    print(f"trained on {len(bags)} patients, final loss {trace[-1]:.4f} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_eval_roc(args):
    config = load_config(args.config)
    seed = resolve_seed(args, config)
    if not os.path.exists(args.model):
        raise FileNotFoundError(args.model)
    params = mil.load_mil_params(args.model)
    manifest = load_manifest(args.manifest)
    bags, labels = _manifest_bags(args, manifest, config)
    probs = [mil.predict(params, b) for b in bags]
    points, auc = metrics.roc_auc(probs, labels)
    eval_cfg = config.get("eval", {})
    B = int(eval_cfg.get("bootstrap_B", 200))
    pairs = list(zip(probs, labels))

    def auc_metric(sample):
        s, l = zip(*sample)
        return metrics.roc_auc(list(s), list(l))[1]

    lo, hi = metrics.bootstrap_ci(auc_metric, pairs, B=B,
                                  level=float(eval_cfg.get("level", 0.95)),
                                  rng=np.random.default_rng(seed))
    calib = metrics.calibration(probs, labels)
    with atomic_outputs([args.out]) as tmp:
        metrics.save_roc_csv(points, tmp)
    summary = {
        "auc": auc, "auc_ci": [lo, hi], "bootstrap_B": B,
        "ece": calib["ece"], "n_patients": len(bags),
    }
    write_json(summary, os.path.splitext(args.out)[0] + "_summary.json")
    print(f"auc {auc:.4f} (95% CI {lo:.4f}-{hi:.4f}), ece {calib['ece']:.4f} "
          f"-> {args.out}")
    return EXIT_OK


def _is_fp(candidate, annotations):
    return not any(cand_mod.hit_test(candidate, a) for a in annotations)


def _threshold_for_fp_rate(per_patient, fp_rate):
    """Score cutoff at which the surviving false positives average the
    requested count per scan; above every FP score, the cutoff is just past
    the top score."""
    fp_scores = sorted(
        (c.max_score for cands, anns in per_patient for c in cands
         if _is_fp(c, anns)),
        reverse=True,
    )
    budget = int(round(fp_rate * len(per_patient)))
    if budget == 0 or not fp_scores:
        # stricter than every false positive's score
        return math.nextafter(fp_scores[0], math.inf) if fp_scores else 1.0
    return fp_scores[min(budget, len(fp_scores)) - 1]


def _filtered_bag(cands, threshold, volume, coarse, cfg, patient_id):
    surviving = [c for c in cands if c.max_score >= threshold]
    if not surviving:
        surviving = [max(cands, key=lambda c: c.max_score)]
    proxy = lambda c: c.equivalent_diameter_mm * c.max_score
    from dataclasses import replace as _replace

    from .volume import world_to_voxel
    ranked_1mm = mil.rank_candidates(surviving, proxy)
    ranked_2mm = mil.rank_candidates(
        [_replace(c, resolution_tag="2mm") for c in surviving], proxy
    )
    picked = mil.select_topk_dual(ranked_1mm, ranked_2mm, k_each=2)
    feats = []
    for c in picked:
        src = volume if c.resolution_tag == "1mm" else coarse
        local = _replace(c, center_voxel=tuple(
            world_to_voxel(c.center_world, src.origin, src.spacing)
        ))
        feats.append(mil.handcrafted_features(local, src))
    return mil.Bag(features=np.asarray(feats), candidates=tuple(picked),
                   patient_id=patient_id)


def cmd_experiment_coupling(args):
    from .volume import resample

    config = load_config(args.config)
    seed = resolve_seed(args, config)
    manifest = load_manifest(args.manifest)
    cfg = phantom_config(config)
    fp_rates = tuple(config.get("coupling", {}).get("fp_rates",
                                                    COUPLING_FP_RATES))

    per_patient = []
    for i, record in enumerate(manifest["patients"]):
        vol, anns = load_patient(args.manifest, record)
        cands = phantom.phantom_candidates(vol, anns, cfg, _bag_rng(config, i),
                                           patient_id=record["id"])
        label = 1.0 if record["label"] == "malignant" else 0.0
        per_patient.append((cands, anns, vol, resample(vol, (2.0,) * 3), label,
                            record["id"]))

    if config.get("coupling", {}).get("holdout", True):
        train_idx = [i for i in range(len(per_patient)) if i % 2 == 0]
        test_idx = [i for i in range(len(per_patient)) if i % 2 == 1]
    else:
        train_idx = test_idx = list(range(len(per_patient)))
    if not train_idx or not test_idx:
        raise ValidationError("coupling needs at least two patients")

    def bags_at(indices, threshold):
        out = []
        for i in indices:
            cands, anns, vol, coarse, label, pid = per_patient[i]
            out.append((_filtered_bag(cands, threshold, vol, coarse, cfg, pid),
                        label))
        return out

    ca_pairs = [(c, a) for c, a, *_ in per_patient]
    thresholds = {f: _threshold_for_fp_rate(ca_pairs, f) for f in fp_rates}
    train_cfg = _train_config(config)
    matrix = {}
    for f_train in fp_rates:
        train_data = bags_at(train_idx, thresholds[f_train])
        params, _ = mil.train_mil(
            [b for b, _ in train_data], [l for _, l in train_data],
            train_cfg, np.random.default_rng(seed),
        )
        for f_test in fp_rates:
            test_data = bags_at(test_idx, thresholds[f_test])
            probs = [mil.predict(params, b) for b, _ in test_data]
            labels = [l for _, l in test_data]
            _, auc = metrics.roc_auc(probs, labels)
            matrix[(f_train, f_test)] = auc

    with atomic_outputs([args.out]) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write("train_fp\\test_fp," +
                     ",".join(repr(float(f)) for f in fp_rates) + "\n")
            for f_train in fp_rates:
                row = [repr(float(f_train))] + [
                    repr(float(matrix[(f_train, f_test)]))
                    for f_test in fp_rates
                ]
                fh.write(",".join(row) + "\n")
    print(f"coupling matrix over {fp_rates} FP/scan -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="lungcad",
        description="Volumetric nodule detection/diagnosis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, help="root random seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker count (accepted for compatibility)")

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    common(p)
    p.add_argument("--n", type=int, help="number of patients")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("score", help="score volumes into probability maps")
    common(p, seed=False)
    p.add_argument("--volume", nargs="+", required=True)
    p.add_argument("--scorer", help="scorer name (reference)")
    p.add_argument("--out", required=True,
                   help="output .mhd (single volume) or directory")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("extract", help="extract candidates from a probability map")
    common(p, seed=False)
    p.add_argument("--probmap", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--patient-id", default="")
    p.add_argument("--out", required=True, help="candidates CSV")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval-froc", help="FROC / CPM evaluation")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidates-dir", required=True)
    p.add_argument("--out", required=True, help="FROC curve CSV")
    p.set_defaults(func=cmd_eval_froc)

    p = sub.add_parser("train-mil", help="train the malignancy classifier")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model parameter blob")
    p.set_defaults(func=cmd_train_mil)

    p = sub.add_parser("eval-roc", help="ROC / AUC / calibration evaluation")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="ROC curve CSV")
    p.set_defaults(func=cmd_eval_roc)

    p = sub.add_parser("experiment-coupling",
                       help="train/test candidate-threshold AUC matrix")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="AUC matrix CSV")
    p.set_defaults(func=cmd_experiment_coupling)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: MissingFile: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigurationError as exc:
        print(f"error: ConfigurationError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except GenerationError as exc:
        print(f"error: GenerationError: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except EmptyBagError as exc:
        print(f"error: EmptyBagError: {exc}", file=sys.stderr)
        return EXIT_EMPTY_BAG
    except ValidationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LungCadError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
