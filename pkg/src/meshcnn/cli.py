"""``meshcnn`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 a check failed (validation, gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from threadpoolctl import threadpool_limits

from . import data as data_mod
from .hierarchy import HierarchyError, icosphere, load_hierarchy, save_hierarchy
from .mesh import MeshError, ParseError, load_off, validate
from .nn import checkpoint
from .nn.gradcheck import gradcheck, injected_fault, small_spec
from .nn.model import CHEBYSHEV, VERTEX, BlockSpec, ModelSpec, build_operators
from .nn.train import TrainConfig, evaluate, train, write_history
from .ordering import OrderingError, build_gather_table

logger = logging.getLogger("meshcnn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# -- configuration ---------------------------------------------------------

DEFAULTS = {
    "mesh": {"level": 4, "hierarchy": ""},
    "model": {
        "kind": VERTEX,
        "filters": [8, 16, 32, 64],
        "k": 1,
        "pool": "mean",
        "pool_stride": 2,
        "fc_nodes": 512,
        "fc_relu": True,
        # comparator used by `compare`
        "baseline_filters": [8, 16, 32],
        "baseline_order": 3,
        "baseline_fc_nodes": 128,
    },
    "train": {**{f.name: f.default for f in dataclasses.fields(TrainConfig)}, "folds": 10},
    "data": {
        **{f.name: f.default for f in dataclasses.fields(data_mod.TaskSpec)},
        "n_per_class": 100,
        "seed": 0,
        "manifest": "",
    },
    "output": {"dir": "run", "checkpoints": True},
}


def _same_kind(default, val):
    if isinstance(default, bool) or isinstance(val, bool):
        return isinstance(default, bool) and isinstance(val, bool)
    if isinstance(default, float):
        return isinstance(val, (int, float))
    if isinstance(default, int):
        return isinstance(val, int)
    if isinstance(default, list):
        return isinstance(val, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in val)
    return isinstance(val, type(default))


def load_config(path=None, overrides=None):
    """Merge a TOML file over :data:`DEFAULTS`; unknown sections or keys raise UsageError."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    for sec, vals in doc.items():
        if sec not in cfg:
            raise UsageError(f"unknown config section [{sec}]")
        if not isinstance(vals, dict):
            raise UsageError(f"[{sec}] must be a table")
        for key, val in vals.items():
            if key not in cfg[sec]:
                raise UsageError(f"unknown config key '{sec}.{key}'")
            default = cfg[sec][key]
            if not _same_kind(default, val):
                raise UsageError(f"config key '{sec}.{key}' has the wrong type")
            if isinstance(default, float) and isinstance(val, int):
                val = float(val)
            cfg[sec][key] = val
    for (sec, key), val in (overrides or {}).items():
        cfg[sec][key] = val
    return cfg


def model_spec_from(cfg, kind=None):
    m = cfg["model"]
    kind = kind or m["kind"]
    level = int(cfg["mesh"]["level"])
    if kind == CHEBYSHEV:
        blocks = [BlockSpec(f, k=m["baseline_order"], pool=m["pool"], pool_stride=m["pool_stride"])
                  for f in m["baseline_filters"]]
        fc = m["baseline_fc_nodes"]
    else:
        blocks = [BlockSpec(f, k=m["k"], pool=m["pool"], pool_stride=m["pool_stride"]) for f in m["filters"]]
        fc = m["fc_nodes"]
    try:
        return ModelSpec(blocks=tuple(blocks), fc_nodes=fc, n_classes=2, input_level=level,
                         fc_relu=m["fc_relu"], kind=kind)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None


def train_config_from(cfg):
    t = {k: v for k, v in cfg["train"].items() if k != "folds"}
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train configuration: {exc}") from None


def task_from(cfg):
    d = cfg["data"]
    return data_mod.TaskSpec(**{f.name: d[f.name] for f in dataclasses.fields(data_mod.TaskSpec)})


def hierarchy_from(cfg):
    path = cfg["mesh"]["hierarchy"]
    level = int(cfg["mesh"]["level"])
    if level < 0:
        raise UsageError("mesh.level must be non-negative")
    hier = load_hierarchy(path) if path else icosphere(level)
    if hier.depth < level:
        raise UsageError(f"hierarchy has depth {hier.depth}, mesh.level is {level}")
    return hier


def dataset_from(cfg, hier):
    d = cfg["data"]
    level = int(cfg["mesh"]["level"])
    if d["manifest"]:
        ds = data_mod.load_dataset(d["manifest"], level)
        n = hier.levels[level].n_vertices
        if ds.signals.shape[1] != n:
            raise UsageError(f"signals have {ds.signals.shape[1]} vertices, level {level} has {n}")
        return ds
    return data_mod.gen_synthetic(hier, level, d["n_per_class"], task_from(cfg), seed=d["seed"])


# -- commands ----------------------------------------------------------------


def cmd_icosphere(args):
    if args.level < 0:
        raise UsageError("--level must be non-negative")
    hier = icosphere(args.level)
    save_hierarchy(hier, args.out)
    print(f"wrote {hier.depth + 1} levels to {args.out}; vertex counts {hier.vertex_counts()}")


def cmd_validate(args):
    mesh = load_off(args.mesh)
    rep = validate(mesh)
    print(f"vertices {mesh.n_vertices}  faces {mesh.n_faces}  edges {mesh.n_edges}")
    print(f"manifold {rep.is_manifold}  consistently oriented {rep.is_consistently_oriented}")
    print(f"boundary edges {rep.boundary_edge_count}  euler characteristic {rep.euler_characteristic}")
    print("valence histogram " + " ".join(f"{k}:{v}" for k, v in sorted(rep.valence_histogram.items())))
    if not (rep.is_manifold and rep.is_consistently_oriented):
        raise CheckFailed("mesh failed validation")


def cmd_order(args):
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    hier = load_hierarchy(args.hier)
    if not 0 <= args.level <= hier.depth:
        raise UsageError(f"--level {args.level} outside 0..{hier.depth}")
    table = build_gather_table(hier.levels[args.level], args.k)
    table.save(args.out)
    print(f"wrote gather table: {table.n_vertices} rows x {table.support_size} slots to {args.out}")


def cmd_gen_data(args):
    cfg = load_config(args.config, _overrides(args))
    hier = hierarchy_from(cfg)
    ds = dataset_from(cfg, hier)
    manifest = data_mod.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples from {len(set(ds.subject_ids))} subjects to {manifest}")


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out[("train", "seed")] = args.seed
        out[("data", "seed")] = args.seed
    if getattr(args, "out_dir", None):
        out[("output", "dir")] = args.out_dir
    for name, sec, key in (("level", "mesh", "level"), ("n_per_class", "data", "n_per_class"),
                           ("scans", "data", "scans_per_subject"), ("epochs", "train", "epochs")):
        if getattr(args, name, None) is not None:
            out[(sec, key)] = getattr(args, name)
    return out


def _prepare(cfg):
    hier = hierarchy_from(cfg)
    ds = dataset_from(cfg, hier)
    folds = data_mod.grouped_kfold(ds.subject_ids, int(cfg["train"]["folds"]), seed=cfg["train"]["seed"])
    return hier, ds, folds


def _run(cfg, spec, hier, ds, folds):
    tcfg = train_config_from(cfg)
    ops = build_operators(spec, hier)
    results, summary = train(spec, tcfg, ops, hier, ds, folds)
    return results, summary


def _write_folds(path, folds):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fold\tdigest\tn_test\tsubjects\n")
        for k, f in enumerate(folds):
            fh.write(f"{k}\t{f.digest()}\t{f.test.size}\t{','.join(f.test_subjects)}\n")


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args))
    spec = model_spec_from(cfg)
    hier, ds, folds = _prepare(cfg)
    results, summary = _run(cfg, spec, hier, ds, folds)
    out = cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    write_history(os.path.join(out, "history.csv"), results)
    _write_folds(os.path.join(out, "folds.tsv"), folds)
    final = data_mod.summarize([r.final_metrics for r in results])
    report = data_mod.format_report({f"{spec.kind} (selected)": summary, f"{spec.kind} (final)": final})
    with open(os.path.join(out, "metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report)
    if cfg["output"]["checkpoints"]:
        for r, f in zip(results, folds):
            checkpoint.save_checkpoint(
                os.path.join(out, f"fold_{r.fold:02d}.mcnn"), spec, r.params,
                extra={"fold": r.fold, "selected_epoch": r.selected_epoch, "fold_digest": f.digest(),
                       "seed": cfg["train"]["seed"]},
            )
    sec = np.mean([s for r in results for s in r.epoch_seconds]) if results[0].epoch_seconds else 0.0
    print(report, end="")
    print(f"mean seconds per epoch: {sec:.3f}")


def cmd_eval(args):
    spec, params, _ = checkpoint.load_checkpoint(args.checkpoint)
    hier = load_hierarchy(args.hier) if args.hier else icosphere(spec.input_level)
    ds = data_mod.load_dataset(args.manifest, spec.input_level)
    ops = build_operators(spec, hier)
    m = evaluate(spec, params, ops, ds.signals, ds.labels)
    print("ACC\tSEN\tSPE\tGMean")
    print(f"{m.acc:.4f}\t{m.sen:.4f}\t{m.spe:.4f}\t{m.gmean:.4f}")
    (tn, fp), (fn, tp) = m.confusion
    print(f"confusion TN {tn} FP {fp} FN {fn} TP {tp}")


def cmd_compare(args):
    cfg = load_config(args.config, _overrides(args))
    hier, ds, folds = _prepare(cfg)
    out = cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    rows, secs, digests = {}, {}, {}
    timing = ["model\tfold\tepoch\tseconds"]
    for kind in (VERTEX, CHEBYSHEV):
        spec = model_spec_from(cfg, kind)
        # both models see the very same folds; recompute and compare digests
        fk = data_mod.grouped_kfold(ds.subject_ids, int(cfg["train"]["folds"]), seed=cfg["train"]["seed"])
        digests[kind] = [f.digest() for f in fk]
        results, summary = _run(cfg, spec, hier, ds, fk)
        rows[kind] = summary
        per_epoch = [s for r in results for s in r.epoch_seconds]
        secs[kind] = float(np.mean(per_epoch)) if per_epoch else float("nan")
        for r in results:
            timing += [f"{kind}\t{r.fold}\t{e + 1}\t{s:.6f}" for e, s in enumerate(r.epoch_seconds)]
        write_history(os.path.join(out, f"history_{kind}.csv"), results)
    if digests[VERTEX] != digests[CHEBYSHEV] or digests[VERTEX] != [f.digest() for f in folds]:
        raise CheckFailed("fold digests differ between models")
    ratio = secs[CHEBYSHEV] / secs[VERTEX] if secs[VERTEX] > 0 else float("nan")
    lines = ["model\tACC\tSEN\tSPE\tGMean\tsec_per_epoch"]
    for kind in (VERTEX, CHEBYSHEV):
        s = rows[kind]
        cells = [f"{100 * s[k][0]:.1f} ± {100 * s[k][1]:.1f}" for k in ("acc", "sen", "spe", "gmean")]
        lines.append("\t".join([kind] + cells + [f"{secs[kind]:.4f}"]))
    lines.append(f"time ratio (chebyshev / vertex)\t{ratio:.3f}")
    lines.append("fold digests\t" + ",".join(digests[VERTEX]))
    lines.append("note\tthe chebyshev model shares the hierarchy pooling of the vertex model")
    report = "\n".join(lines) + "\n"
    with open(os.path.join(out, "compare.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report)
    with open(os.path.join(out, "epoch_times.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(timing) + "\n")
    print(report, end="")


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    spec = small_spec(args.kind)
    if args.inject_fault:
        with injected_fault():
            rep = gradcheck(spec=spec, seed=seed, precision=args.precision)
    else:
        rep = gradcheck(spec=spec, seed=seed, precision=args.precision)
    print(rep.format())
    if not rep.passed:
        raise CheckFailed("gradient check failed for " + ", ".join(rep.failed_groups))


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="meshcnn", description="Convolutional networks on semi-regular triangulated meshes.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (env MESHCNN_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    sp = sub.add_parser("icosphere", help="write an icosphere hierarchy")
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_icosphere)

    sp = sub.add_parser("validate", help="validate an OFF mesh")
    sp.add_argument("mesh")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("order", help="build a gather table for one hierarchy level")
    sp.add_argument("--hier", required=True)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_order)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--config")
    sp.add_argument("--level", type=int)
    sp.add_argument("--n-per-class", type=int)
    sp.add_argument("--scans", type=int)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "cross-validated training"),
                             ("compare", cmd_compare, "vertex CNN against the Chebyshev comparator")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", dest="out_dir")
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--hier")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--precision", choices=("single", "double"), default="double")
    sp.add_argument("--kind", choices=(VERTEX, CHEBYSHEV), default=VERTEX)
    sp.add_argument("--inject-fault", action="store_true", help="scale the conv weight gradient by 2")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _threads(args):
    env = os.environ.get("MESHCNN_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"MESHCNN_THREADS must be an integer, got {env!r}") from None
    else:
        n = args.threads
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads(args)):
            t0 = time.perf_counter()
            args.func(args)
            logger.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    except UsageError as exc:
        print(f"meshcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as exc:
        print(f"meshcnn: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (OSError, ParseError, HierarchyError, json.JSONDecodeError, KeyError) as exc:
        print(f"meshcnn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MeshError, OrderingError) as exc:
        print(f"meshcnn: invalid mesh: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"meshcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
