"""Command-line entry point: ``anchorudf <subcommand> [flags]``.

Subcommands::

    synth           synthetic mesh -> normalized OBJ
    sample          mesh -> binary training-set file
    fit             training set(s) or mesh -> checkpoint directory
    extract         checkpoint -> PLY point cloud
    eval            PLY + reference OBJ -> Chamfer / P2S
    ablate-anchors  fit + extract + eval over several anchor counts -> CSV

Every flag can also come from a key-value config file given with
``--config``. Keys in an ``[anchorudf]`` section apply to all subcommands,
keys in a section named after the subcommand (``[fit]``, ``[extract]``, ...)
override them, and explicit command-line flags override both. Keys use the
flag names with or without dashes (``lambda2``, ``grid-res``, ``grid_res``);
keys a subcommand does not know are ignored so one file can drive a whole
``fit -> extract -> eval`` pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .extraction import ExtractConfig, extract_dense_cloud, load_ply, save_ply
from .geometry import SYNTHETIC_KINDS, build_index, load_obj, make_synthetic, normalize_mesh, sample_surface, save_obj
from .metrics import chamfer_eval, p2s
from .model import CONDITIONING_MODES, ModelConfig
from .sampling import DEFAULT_MIXTURE, SamplingMixture, generate_training_set, load_training_set, save_training_set
from .training import ANCHOR_SOURCES, Checkpoint, TrainConfig, fit, inference_anchors, prepare_shape, \
    shape_from_training_set

log = logging.getLogger("anchorudf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 42
GLOBAL_SECTION = "anchorudf"
EVAL_SCALE = 1e3  # metrics are reported x 10^3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _mixture_text(m: SamplingMixture) -> str:
    return ",".join(f"{f:g}:{s:g}" for f, s in m.components)


# --------------------------------------------------------------------------
# argument groups shared by several subcommands


def _add_model_args(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("model")
    g.add_argument("--anchors", type=int, default=d.k_anchors, help="number of anchor points k")
    g.add_argument("--grid-res", type=int, default=d.grid_res, help="anchor voxel grid resolution")
    g.add_argument("--conv-layers", type=int, default=d.conv_layers)
    g.add_argument("--c-pos", type=int, default=d.c_pos, help="position feature width")
    g.add_argument("--conditioning", choices=CONDITIONING_MODES, default=d.conditioning)
    g.add_argument("--code-dim", type=int, default=d.code_dim)
    g.add_argument("--decoder-layers", type=int, default=d.decoder_layers)
    g.add_argument("--decoder-hidden", type=int, default=d.decoder_hidden)
    g.add_argument("--skip-layer", type=int, default=d.skip_layer)
    g.add_argument("--anchor-hidden", type=int, default=d.anchor_hidden)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--batch-size", type=int, default=d.batch_size, help="points per shape per step")
    g.add_argument("--shapes-per-step", type=int, default=d.shapes_per_step)
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--lr-decay", type=float, default=d.lr_decay)
    g.add_argument("--lr-decay-epoch", type=int, default=None)
    g.add_argument("--lambda1", type=float, default=d.lambda1, help="anchor loss weight")
    g.add_argument("--lambda2", type=float, default=d.lambda2, help="gradient-direction loss weight")
    g.add_argument("--delta", type=float, default=d.delta, help="distance clamp")
    g.add_argument("--gda-start-epoch", type=int, default=None, help="default: the last 10 epochs")
    g.add_argument("--gda-fd-step", type=float, default=d.gda_fd_step)
    g.add_argument("--gda-max-distance", type=float, default=None, help="default: delta")
    g.add_argument("--no-freeze", action="store_true", help="keep training the encoders during phase 2")
    g.add_argument("--anchor-source", choices=ANCHOR_SOURCES, default=d.anchor_source,
                   help="anchors voxelized during training")
    g.add_argument("--samples", type=int, default=5000, help="training samples per mesh (mesh input only)")


def _add_extract_args(p: argparse.ArgumentParser) -> None:
    d = ExtractConfig()
    g = p.add_argument_group("extraction")
    g.add_argument("--steps", type=int, default=d.steps, help="projection steps")
    g.add_argument("--valid", type=float, default=d.valid_distance, help="valid distance to the surface")
    g.add_argument("--n-init", type=int, default=d.n_init)
    g.add_argument("--target", type=int, default=d.target_points, help="number of output points")
    g.add_argument("--jitter", type=float, default=d.jitter_sigma)
    g.add_argument("--max-rounds", type=int, default=d.max_rounds)
    g.add_argument("--anchor-mode", choices=("predicted", "target"), default="predicted",
                   help="anchors used at inference")


def _add_eval_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--gt-samples", type=int, default=100_000, help="reference surface samples for Chamfer")


def _model_config(a, n_shapes: int = 1) -> ModelConfig:
    return ModelConfig(k_anchors=a.anchors, grid_res=a.grid_res, conv_layers=a.conv_layers, c_pos=a.c_pos,
                       conditioning=a.conditioning, code_dim=a.code_dim, decoder_layers=a.decoder_layers,
                       decoder_hidden=a.decoder_hidden, skip_layer=a.skip_layer, anchor_hidden=a.anchor_hidden,
                       delta=a.delta, n_shapes=n_shapes)


def _train_config(a) -> TrainConfig:
    return TrainConfig(lr=a.lr, batch_size=a.batch_size, shapes_per_step=a.shapes_per_step, epochs=a.epochs,
                       lr_decay=a.lr_decay, lr_decay_epoch=a.lr_decay_epoch, lambda1=a.lambda1,
                       lambda2=a.lambda2, delta=a.delta, gda_start_epoch=a.gda_start_epoch,
                       gda_fd_step=a.gda_fd_step, gda_max_distance=a.gda_max_distance,
                       freeze_encoders_during_gda=not a.no_freeze, anchor_source=a.anchor_source, seed=a.seed)


def _extract_config(a) -> ExtractConfig:
    return ExtractConfig(n_init=a.n_init, steps=a.steps, valid_distance=a.valid, target_points=a.target,
                         jitter_sigma=a.jitter, max_rounds=a.max_rounds)


def _load_mesh(path, normalize: bool = True):
    mesh = load_obj(path)
    if mesh.n_triangles == 0:
        raise DataError(f"{path}: mesh has no triangles")
    return normalize_mesh(mesh)[0] if normalize else mesh


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(a) -> int:
    mesh, _ = normalize_mesh(make_synthetic(a.kind, a.res))
    save_obj(mesh, a.out)
    print(f"wrote {a.out}: {len(mesh.vertices)} vertices, {mesh.n_triangles} triangles, "
          f"{len(mesh.boundary_edges())} boundary edges")
    return EXIT_OK


def cmd_sample(a) -> int:
    mesh = _load_mesh(a.mesh, not a.no_normalize)
    mixture = SamplingMixture.parse(a.mixture)
    ts = generate_training_set(build_index(mesh), mesh, a.n, mixture, a.delta, a.seed,
                               a.mesh_id or Path(a.mesh).stem)
    save_training_set(ts, a.out)
    print(f"wrote {a.out}: {len(ts)} samples, delta={ts.delta:g}, seed={ts.seed}")
    return EXIT_OK


def _shapes_for_fit(a):
    if bool(a.data) == bool(a.mesh):
        raise UsageError("give either --data (training-set files) or --mesh (OBJ files)")
    if a.data:
        return [shape_from_training_set(load_training_set(p), a.anchors, seed=a.seed) for p in a.data]
    shapes = []
    for i, p in enumerate(a.mesh):
        mesh = _load_mesh(p, not a.no_normalize)
        shapes.append(prepare_shape(mesh, a.anchors, n_samples=a.samples, delta=a.delta, seed=a.seed + 1000 * i,
                                    mesh_id=Path(p).stem))
    return shapes


def cmd_fit(a) -> int:
    resume = Checkpoint.load(a.resume) if a.resume else None
    shapes = _shapes_for_fit(a)
    if resume is not None:
        mc, tc = resume.model_config, resume.train_config
        if a.epochs != tc.epochs:
            tc = replace(tc, epochs=a.epochs)
    else:
        mc, tc = _model_config(a, len(shapes)), _train_config(a)
    t0 = time.perf_counter()
    ck = fit(shapes, mc, tc, out_dir=a.out, resume=resume, keep_epoch_checkpoints=a.keep_epoch_checkpoints)
    last = ck.history[-1] if ck.history else {}
    print(f"trained {ck.epoch} epochs in {time.perf_counter() - t0:.1f}s -> {Path(a.out) / 'final.ckpt'}"
          + (f"  L_UDF={last['L_UDF']:.5f} mean_cos={last['mean_cos']:.4f}" if last else ""))
    return EXIT_OK


def _extract(ck: Checkpoint, cfg: ExtractConfig, anchor_mode: str, seed: int, shape: int = 0):
    model = ck.model().frozen()
    anchors = inference_anchors(ck, model, shape, anchor_mode)
    udf_fn, grad_fn = model.field_fns(shape, anchors)
    return extract_dense_cloud(udf_fn, grad_fn, cfg, seed=seed, return_report=True)


def cmd_extract(a) -> int:
    ck = Checkpoint.load(a.ckpt)
    cloud, report = _extract(ck, _extract_config(a), a.anchor_mode, a.seed, a.shape)
    save_ply(cloud, a.out)
    print(f"wrote {a.out}: {len(cloud)} points in {report.rounds} rounds")
    return EXIT_OK


def _evaluate(cloud, mesh, gt_samples: int, seed: int) -> tuple[float, float]:
    gt, _ = sample_surface(mesh, gt_samples, seed)
    return chamfer_eval(cloud, gt), p2s(cloud, build_index(mesh))


def cmd_eval(a) -> int:
    cloud = load_ply(a.pred)
    mesh = _load_mesh(a.gt, not a.no_normalize)
    cd, ps = _evaluate(cloud, mesh, a.gt_samples, a.seed)
    print(f"{'metric':<10}{'value (x1e3)':>14}")
    print(f"{'chamfer':<10}{cd * EVAL_SCALE:>14.6f}")
    print(f"{'p2s':<10}{ps * EVAL_SCALE:>14.6f}")
    if a.csv:
        with open(a.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pred", "gt", "n_points", "chamfer_x1e3", "p2s_x1e3"])
            w.writerow([a.pred, a.gt, len(cloud), repr(cd * EVAL_SCALE), repr(ps * EVAL_SCALE)])
    return EXIT_OK


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --k-list {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"bad --k-list {text!r}")
    return ks


def cmd_ablate(a) -> int:
    ks = _parse_k_list(a.k_list)
    mesh = _load_mesh(a.mesh, not a.no_normalize)
    index = build_index(mesh)
    work = Path(a.workdir) if a.workdir else Path(a.out).with_suffix("")
    rows = []
    for k in ks:
        t0 = time.perf_counter()
        shape = prepare_shape(mesh, k, n_samples=a.samples, delta=a.delta, seed=a.seed,
                              mesh_id=Path(a.mesh).stem, index=index)
        ak = argparse.Namespace(**{**vars(a), "anchors": k})
        ck = fit([shape], _model_config(ak), _train_config(ak), out_dir=work / f"k{k}")
        fit_s = time.perf_counter() - t0
        row = {"k": k, "status": "ok", "n_points": 0, "chamfer_x1e3": float("nan"), "p2s_x1e3": float("nan"),
               "fit_seconds": round(fit_s, 3)}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cloud, report = _extract(ck, _extract_config(a), a.anchor_mode, a.seed)
            save_ply(cloud, work / f"k{k}" / "cloud.ply")
            cd, ps = _evaluate(cloud, mesh, a.gt_samples, a.seed)
            row.update(n_points=len(cloud), chamfer_x1e3=cd * EVAL_SCALE, p2s_x1e3=ps * EVAL_SCALE)
            if report.degenerate:
                row["status"] = "degenerate"
        except NumericError as exc:
            log.warning("k=%d: %s", k, exc)
            row["status"] = "extraction_failed"
        rows.append(row)
        print(f"k={k:<5} chamfer_x1e3={row['chamfer_x1e3']:.6f}  p2s_x1e3={row['p2s_x1e3']:.6f}  "
              f"[{row['status']}]", flush=True)
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"wrote {a.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser and config file


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorudf", description="Anchored unsigned distance fields for open surfaces.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", type=Path, help="key-value config file")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = sub.add_parser("synth", help="write a normalized synthetic mesh")
    common(p)
    p.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    p.add_argument("--res", type=int, default=32, help="tessellation resolution")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="draw a training set around a mesh")
    common(p)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--mixture", default=_mixture_text(DEFAULT_MIXTURE), help="fraction:sigma pairs")
    p.add_argument("--mesh-id", default="")
    p.add_argument("--no-normalize", action="store_true", help="mesh is already in the unit cube")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="train a field")
    common(p)
    p.add_argument("--data", type=Path, nargs="+", help="training-set files")
    p.add_argument("--mesh", type=Path, nargs="+", help="OBJ files (sampled on the fly)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--keep-epoch-checkpoints", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", help="extract a dense point cloud")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--shape", type=int, default=0)
    _add_extract_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="Chamfer and P2S of a point cloud against a mesh")
    common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--csv", type=Path)
    p.add_argument("--no-normalize", action="store_true")
    _add_eval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-anchors", help="anchor-count sweep")
    common(p)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--k-list", default="100,300,600,900")
    p.add_argument("--out", type=Path, required=True, help="CSV file")
    p.add_argument("--workdir", type=Path, help="per-k checkpoints and clouds (default: next to --out)")
    p.add_argument("--no-normalize", action="store_true")
    _add_model_args(p)
    _add_train_args(p)
    _add_extract_args(p)
    _add_eval_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def config_defaults(path, command: str, sub: argparse.ArgumentParser) -> dict:
    """Defaults for ``sub`` read from a config file (strings; argparse converts them)."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise UsageError(f"bad config file {path}: {exc}") from None
    raw: dict[str, str] = {}
    for section in (GLOBAL_SECTION, command):
        if cp.has_section(section):
            raw.update(cp.items(section))
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, value in raw.items():
        dest = key.strip().lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            continue
        if isinstance(action, argparse._StoreTrueAction):
            try:
                out[dest] = cp.BOOLEAN_STATES[value.strip().lower()]
            except KeyError:
                raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}") from None
        elif action.nargs in ("+", "*"):
            out[dest] = [action.type(v) if action.type else v for v in value.split()]
        else:
            out[dest] = value
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.command)
        try:
            sub.set_defaults(**config_defaults(args.config, args.command, sub))
        except UsageError as exc:
            parser.exit(EXIT_USAGE, f"anchorudf: error: {exc}\n")
        except DataError as exc:
            parser.exit(EXIT_DATA, f"anchorudf: data error: {exc}\n")
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"anchorudf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"anchorudf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"anchorudf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
