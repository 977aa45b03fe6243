"""Command-line pipeline: encode, cluster, estimate-k, evaluate, report,
and the end-to-end pipeline command.

Stages hand off through files (embedding cache, assignment JSONL, report
JSON) so the expensive encoding step is computed once and clustering
experiments stay cheap.  Every stage file embeds a hash of the encoding
configuration; stages refuse to combine files with mismatched hashes
unless --force is given.  All outputs are deterministic given (config,
seed, inputs): no timestamps, sorted keys, atomic writes.
"""

import argparse
import json
import sys
from hashlib import sha256
from pathlib import Path

from . import analysis, clustering, corpus, encoder, evalmetrics, figures
from .backends import make_backend
from .errors import InputError, PromptRelError, UsageError, ValidationError
from .fsio import atomic_write_text
from .prompt import get_template, render_all

STAGE_VERSION = 1

DEFAULTS = {
    "format": "fewrel",
    "template": "p",
    "backend": "stub",
    "mode": "elbow",
    "seed": 0,
    "min_samples": 5,
    "normalize": False,
    "stub_mode": "hash",
    "stub_dim": 768,
    "noise_scale": 0.05,
    "max_length": 512,
    "batch_size": 32,
}

# Keys that determine the embedding cache contents.
_HASH_KEYS = (
    "dataset", "format", "template", "backend", "model_path", "max_length",
    "normalize", "stub_mode", "stub_dim", "noise_scale", "embeddings", "seed",
)

_FORMATS = ("fewrel", "unlabeled")
_BACKENDS = ("stub", "file", "inference")
_MODES = ("known-k", "elbow", "optics")

# Flags merged over config-file values when given.
_FLAG_KEYS = (
    "dataset", "format", "template", "backend", "mode", "k", "seed", "out",
    "cache", "assignment", "min_samples", "normalize", "model_path",
    "max_length", "batch_size", "embeddings", "stub_mode", "stub_dim",
    "noise_scale", "name_clusters", "elbow",
)


def _coerce(value):
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    low = value.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


def parse_config_file(path):
    """Flat key = value format; '#' starts a comment line."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = _coerce(value.strip())
    return out


def resolve_config(args, require=()):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("format") not in _FORMATS:
        raise UsageError(f"format must be one of {_FORMATS}")
    if cfg.get("backend") not in _BACKENDS:
        raise UsageError(f"backend must be one of {_BACKENDS}")
    if cfg.get("mode") not in _MODES:
        raise UsageError(f"mode must be one of {_MODES}")
    for key in require:
        if not cfg.get(key):
            raise UsageError(f"missing required option '{key}'")
    return cfg


def config_hash(cfg):
    subset = {k: cfg.get(k) for k in _HASH_KEYS}
    blob = json.dumps(subset, sort_keys=True, default=str).encode("utf-8")
    return sha256(blob).hexdigest()[:16]


def _load_dataset(cfg):
    path = Path(cfg["dataset"])
    if not path.is_file():
        raise InputError(f"dataset file not found: {path}")
    if cfg["format"] == "fewrel":
        return corpus.load_fewrel(path)
    return corpus.load_unlabeled(path)


def _build_backend(cfg):
    return make_backend(
        cfg["backend"],
        dim=cfg["stub_dim"],
        stub_mode=cfg["stub_mode"],
        noise_scale=cfg["noise_scale"],
        embeddings_path=cfg.get("embeddings"),
        model_path=cfg.get("model_path"),
        max_length=cfg["max_length"],
        batch_size=cfg["batch_size"],
    )


def _parse_grid(cfg):
    raw = cfg.get("k_grid")
    if raw in (None, ""):
        return None
    if isinstance(raw, int):
        raise UsageError("k_grid must list several values, e.g. 2,3,4,5")
    try:
        return [int(v) for v in str(raw).split(",")]
    except ValueError:
        raise UsageError(f"cannot parse k_grid '{raw}'") from None


def _check_hash(found, expected, what, force):
    if found and expected and found != expected:
        if force:
            print(f"warning: proceeding despite {what} config hash mismatch")
        else:
            raise ValidationError(
                f"{what} was produced under a different configuration "
                f"(hash {found} vs {expected}); pass --force to combine anyway"
            )


def _encode_matrix(cfg, dataset):
    # Encoding never sees gold labels; the layering is enforced here.
    work = corpus.strip_labels(dataset)
    template = get_template(cfg["template"])
    prompts = render_all(template, work)
    backend = _build_backend(cfg)
    matrix, failed = encoder.encode_partial(
        backend, prompts, normalize=bool(cfg["normalize"])
    )
    for iid in failed:
        print(f"excluded over-length instance: {iid}")
    return backend, matrix, failed


def cmd_encode(args):
    cfg = resolve_config(args, require=("dataset", "out"))
    print(f"seed: {cfg['seed']}")
    dataset = _load_dataset(cfg)
    print(f"loaded {len(dataset)} instance(s) from {cfg['dataset']}")
    _, matrix, failed = _encode_matrix(cfg, dataset)
    encoder.save_cache(
        matrix, cfg["out"],
        extra={"config_hash": config_hash(cfg), "seed": cfg["seed"]},
    )
    print(
        f"encoded {matrix.rows} instance(s) at dim {matrix.dim}, "
        f"{len(failed)} excluded -> {cfg['out']}"
    )
    return 0


def _cluster_matrix(cfg, matrix):
    mode = cfg["mode"]
    seed = int(cfg["seed"])
    if mode == "known-k":
        if not cfg.get("k"):
            raise UsageError("mode known-k requires --k")
        return None, clustering.kmeans(matrix, int(cfg["k"]), seed)
    if mode == "optics":
        return None, clustering.optics(matrix, int(cfg["min_samples"]))
    curve, assignment = clustering.cluster_auto(
        matrix, seed, k_grid=_parse_grid(cfg)
    )
    return curve, assignment


def _elbow_csv_path(out_path):
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".elbow.csv")


def cmd_cluster(args):
    cfg = resolve_config(args, require=("cache", "out"))
    print(f"seed: {cfg['seed']}")
    matrix = encoder.load_cache(cfg["cache"])
    cache_hash = matrix.extra.get("config_hash")
    if getattr(args, "config", None):
        _check_hash(cache_hash, config_hash(cfg), "embedding cache", args.force)
    curve, assignment = _cluster_matrix(cfg, matrix)
    clustering.save_assignment(
        assignment, cfg["out"],
        extra_meta={"config_hash": cache_hash, "version": STAGE_VERSION},
    )
    print(
        f"clustered {len(assignment.labels)} instance(s) into "
        f"{assignment.k} cluster(s) [{assignment.method.value}] -> {cfg['out']}"
    )
    if curve is not None:
        path = _elbow_csv_path(cfg["out"])
        clustering.elbow_to_csv(curve, path)
        print(f"estimated k: {curve.k_hat} (elbow curve -> {path})")
    return 0


def cmd_estimate_k(args):
    cfg = resolve_config(args, require=("cache", "out"))
    print(f"seed: {cfg['seed']}")
    matrix = encoder.load_cache(cfg["cache"])
    grid = _parse_grid(cfg) or clustering.default_k_grid(matrix.rows)
    curve = clustering.estimate_k_elbow(matrix, grid, int(cfg["seed"]))
    clustering.elbow_to_csv(curve, cfg["out"])
    print(f"estimated k: {curve.k_hat} ({curve.params['selection_rule']} rule)")
    print(f"elbow curve -> {cfg['out']}")
    return 0


def _print_report(report):
    rows = [
        ("B3 precision", f"{100 * report.b3_precision:.1f}"),
        ("B3 recall", f"{100 * report.b3_recall:.1f}"),
        ("B3 F1", f"{100 * report.b3_f1:.1f}"),
        ("V homogeneity", f"{100 * report.v_homogeneity:.1f}"),
        ("V completeness", f"{100 * report.v_completeness:.1f}"),
        ("V F1", f"{100 * report.v_f1:.1f}"),
        ("ARI", f"{100 * report.ari:.1f}"),
        ("instances", str(report.n)),
        ("gold relations", str(report.k_gold)),
        ("clusters", str(report.k_pred)),
    ]
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"  {name:<{width}}  {value:>7}")


def _write_report_json(report, path, extra):
    payload = {"version": STAGE_VERSION, **extra, **report.to_dict()}
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def cmd_evaluate(args):
    cfg = resolve_config(args, require=("dataset", "assignment"))
    dataset = _load_dataset(cfg)
    assignment, meta = clustering.load_assignment(cfg["assignment"])
    report = evalmetrics.evaluate(dataset, assignment)
    print(f"evaluation of {cfg['assignment']} against {cfg['dataset']}:")
    _print_report(report)
    if cfg.get("out"):
        _write_report_json(
            report, cfg["out"], {"config_hash": meta.get("config_hash")}
        )
        print(f"report -> {cfg['out']}")
    return 0


def _load_curve_for_figure(csv_path, assignment):
    k_values, raw, smoothed = clustering.load_elbow_csv(csv_path)
    k_hat = assignment.params.get("k_hat")
    if k_hat not in k_values:
        k_hat = k_values[max(range(len(smoothed)), key=smoothed.__getitem__)]
    return clustering.ElbowCurve(
        k_values=tuple(k_values),
        silhouette_raw=tuple(raw),
        silhouette_smoothed=tuple(smoothed),
        k_hat=int(k_hat),
    )


def _emit_report_artifacts(cfg, dataset, assignment, out_dir, backend=None,
                           curve=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if dataset.relation_inventory:
        diag = analysis.diagonalize(analysis.confusion(dataset, assignment))
        analysis.confusion_to_csv(diag, out_dir / "confusion.csv")
        analysis.confusion_to_pgm(diag, out_dir / "confusion.pgm")
        figures.confusion_figure(diag, out_dir / "confusion.png")
        written += ["confusion.csv", "confusion.pgm", "confusion.png"]
        reports = [
            analysis.cluster_composition(dataset, assignment, c)
            for c in range(assignment.k)
        ]
        analysis.reports_to_json(reports, out_dir / "clusters.json")
        written.append("clusters.json")
    else:
        print("dataset is unlabeled; skipping confusion and composition outputs")

    if curve is not None:
        figures.elbow_figure(curve, out_dir / "elbow.png")
        written.append("elbow.png")

    m = cfg.get("name_clusters")
    if m:
        if backend is None:
            backend = _build_backend(cfg)
        if not backend.supports_mlm_head:
            print(
                f"backend '{backend.name}' has no MLM head; skipping cluster naming"
            )
        else:
            work = corpus.strip_labels(dataset)
            by_id = {i.instance_id: i for i in work.instances}
            template = get_template(cfg["template"])
            aligned = []
            for iid in assignment.instance_ids:
                inst = by_id.get(iid)
                if inst is None:
                    raise ValidationError(
                        f"assignment instance '{iid}' is not in the dataset"
                    )
                aligned.append(render_all(template, corpus.Dataset((inst,), "", ()))[0])
            named = analysis.name_clusters(backend, aligned, assignment, int(m))
            analysis.reports_to_json(named, out_dir / "naming.json")
            written.append("naming.json")

    for name in written:
        print(f"wrote {out_dir / name}")
    return written


def cmd_report(args):
    cfg = resolve_config(args, require=("dataset", "assignment", "out"))
    dataset = _load_dataset(cfg)
    assignment, meta = clustering.load_assignment(cfg["assignment"])
    if cfg.get("cache"):
        matrix = encoder.load_cache(cfg["cache"])
        _check_hash(
            meta.get("config_hash"), matrix.extra.get("config_hash"),
            "assignment", args.force,
        )
    curve = None
    if cfg.get("elbow"):
        curve = _load_curve_for_figure(cfg["elbow"], assignment)
    _emit_report_artifacts(cfg, dataset, assignment, cfg["out"], curve=curve)
    return 0


def cmd_pipeline(args):
    cfg = resolve_config(args, require=("dataset", "out"))
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"seed: {cfg['seed']}")
    run_hash = config_hash(cfg)

    dataset = _load_dataset(cfg)
    print(f"loaded {len(dataset)} instance(s) from {cfg['dataset']}")

    backend = None
    cache_path = out_dir / "embeddings.pore"
    if cache_path.is_file():
        matrix = encoder.load_cache(cache_path)
        _check_hash(matrix.extra.get("config_hash"), run_hash,
                    "existing embedding cache", args.force)
        print(f"reusing existing embedding cache {cache_path}")
    else:
        backend, matrix, _ = _encode_matrix(cfg, dataset)
        encoder.save_cache(
            matrix, cache_path,
            extra={"config_hash": run_hash, "seed": cfg["seed"]},
        )
        print(f"encoded {matrix.rows} instance(s) -> {cache_path}")

    curve, assignment = _cluster_matrix(cfg, matrix)
    assignment_path = out_dir / "assignment.jsonl"
    clustering.save_assignment(
        assignment, assignment_path,
        extra_meta={"config_hash": run_hash, "version": STAGE_VERSION},
    )
    print(
        f"clustered into {assignment.k} cluster(s) "
        f"[{assignment.method.value}] -> {assignment_path}"
    )
    if curve is not None:
        clustering.elbow_to_csv(curve, out_dir / "elbow.csv")
        print(f"estimated k: {curve.k_hat} (elbow curve -> {out_dir / 'elbow.csv'})")

    if dataset.relation_inventory:
        report = evalmetrics.evaluate(dataset, assignment)
        _write_report_json(
            report, out_dir / "report.json", {"config_hash": run_hash}
        )
        print("scores:")
        _print_report(report)
        print(f"report -> {out_dir / 'report.json'}")
    else:
        print("dataset is unlabeled; skipping evaluation")

    _emit_report_artifacts(
        cfg, dataset, assignment, out_dir, backend=backend, curve=curve
    )
    return 0


def _add_common(sub, *extras):
    sub.add_argument("--config", help="key = value configuration file")
    sub.add_argument("--seed", type=int, help="RNG seed (default 0)")
    sub.add_argument("--force", action="store_true",
                     help="combine stage files despite config hash mismatch")
    if "dataset" in extras:
        sub.add_argument("--dataset", help="input dataset path")
        sub.add_argument("--format", choices=_FORMATS, help="dataset layout")
    if "encode" in extras:
        sub.add_argument("--template", help="prompt template (p, p-empty, p1, p2, p3)")
        sub.add_argument("--backend", choices=_BACKENDS)
        sub.add_argument("--model-path", help="model directory for the inference backend")
        sub.add_argument("--max-length", type=int)
        sub.add_argument("--batch-size", type=int)
        sub.add_argument("--embeddings", help="cache file backing the file backend")
        sub.add_argument("--stub-mode", choices=("hash", "gold"))
        sub.add_argument("--stub-dim", type=int)
        sub.add_argument("--noise-scale", type=float)
        sub.add_argument("--normalize", action=argparse.BooleanOptionalAction,
                         default=None, help="L2-normalize embedding rows")
    if "cluster" in extras:
        sub.add_argument("--mode", choices=_MODES)
        sub.add_argument("--k", type=int, help="cluster count for mode known-k")
        sub.add_argument("--min-samples", type=int, help="OPTICS density threshold")
    if "cache" in extras:
        sub.add_argument("--cache", help="embedding cache path")
    if "assignment" in extras:
        sub.add_argument("--assignment", help="assignment JSONL path")
    if "out" in extras:
        sub.add_argument("--out", help="output path")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="promptrel",
        description="Unsupervised relation extraction via masked-prompt "
                    "embeddings and clustering.",
    )
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("encode", help="render prompts and write the embedding cache")
    _add_common(p, "dataset", "encode", "out")
    p.set_defaults(func=cmd_encode)

    p = subs.add_parser("cluster", help="cluster a cached embedding matrix")
    _add_common(p, "cache", "cluster", "out")
    p.set_defaults(func=cmd_cluster)

    p = subs.add_parser("estimate-k", help="run the elbow sweep only")
    _add_common(p, "cache", "cluster", "out")
    p.set_defaults(func=cmd_estimate_k)

    p = subs.add_parser("evaluate", help="score an assignment against gold labels")
    _add_common(p, "dataset", "assignment", "out")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("report", help="emit confusion matrix, compositions, figures")
    _add_common(p, "dataset", "assignment", "cache", "encode", "out")
    p.add_argument("--elbow", help="elbow CSV to render as a figure")
    p.add_argument("--name-clusters", type=int,
                   help="name clusters with this many top mask tokens")
    p.set_defaults(func=cmd_report)

    p = subs.add_parser("pipeline", help="encode, cluster, evaluate, report")
    _add_common(p, "dataset", "encode", "cluster", "out")
    p.add_argument("--name-clusters", type=int,
                   help="name clusters with this many top mask tokens")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args) or 0
    except PromptRelError as e:
        print(
            json.dumps({"error": {"kind": e.kind, "message": str(e)}}),
            file=sys.stderr,
        )
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
