"""Command line interface: gen-data, train, eval, reconstruct.

Every option can also come from a JSON file given with ``--config``; explicit
flags override the file, which overrides built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .geometry import (
    DEFAULT_NOISE_SIGMA,
    LabeledShape,
    make_dataset,
    nearest_vertex_label,
    parse_family_spec,
    parts_per_family,
    sample_batch,
)
from .geometry.io import FormatError, read_manifest, write_manifest, write_occs, write_off
from .geometry.shapes import DEFAULT_VERTICES
from .models import ModelConfig, load_checkpoint, read_checkpoint_arrays, save_checkpoint
from .training import NumericalAbort, TrainConfig, history_csv, train

log = logging.getLogger("multitask_inr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
ORACLE = "oracle"


class ConfigError(ValueError):
    pass


# -- option tables: name -> (type, default, help) ------------------------------

_COMMON = {
    "seed": (int, 0, "random seed"),
    "verbose": (bool, False, "log progress"),
}
GEN_OPTS = {
    "families": (str, None, "family spec, e.g. 'dumbbell,table,cross' or 'dumbbell:10,table:5'"),
    "count": (int, None, "number of shapes, round-robin over families (needed unless --families gives counts)"),
    "out": (str, None, "output directory"),
    "n_query": (int, 2048, "query points stored per shape sample file"),
    "n_vertices": (int, DEFAULT_VERTICES, "labeled surface vertices per shape"),
    "noise_sigma": (float, DEFAULT_NOISE_SIGMA, "input cloud noise std"),
    "mesh_res": (int, 64, "grid resolution of the ground-truth OFF meshes"),
}
MODEL_OPTS = {
    "latent_dim": (int, 128, "shape encoding size"),
    "enc_hidden": (int, 128, "encoder hidden width"),
    "enc_blocks": (int, 2, "encoder residual blocks"),
    "dec_hidden": (int, 256, "decoder hidden width"),
    "dec_blocks": (int, 5, "decoder residual blocks"),
    "cls_hidden": (int, 128, "classifier hidden width"),
}
TRAIN_OPTS = {
    "data": (str, None, "dataset directory written by gen-data"),
    "tasks": (str, "rec", "comma list from rec,cls,seg"),
    "topology": (str, "parallel", "decoder topology: parallel or joint"),
    "freeze_encoder": (bool, False, "keep encoder weights from --from fixed"),
    "init_from": (str, None, "checkpoint to initialise from"),
    "steps": (int, 1000, "optimizer steps"),
    "out": (str, None, "checkpoint path to write"),
    "loss_csv": (str, None, "loss history CSV (default: <out>.loss.csv)"),
    "lr": (float, 1e-4, "ADAM learning rate"),
    "batch_size": (int, 16, "shapes per step"),
    "n_query": (int, 1024, "query points per shape per step"),
    "noise_sigma": (float, DEFAULT_NOISE_SIGMA, "input cloud noise std"),
    "lambda_cls": (float, 1.0, "classification loss weight"),
    "lambda_seg": (float, 1.0, "segmentation loss weight"),
    **MODEL_OPTS,
}
EVAL_OPTS = {
    "data": (str, None, "dataset directory written by gen-data"),
    "ckpt": (str, None, "checkpoint path, or 'oracle' for the ground-truth debug model"),
    "metrics": (str, "iou,chamfer,acc,miou", "comma list from iou,chamfer,acc,miou"),
    "out": (str, None, "report JSON path"),
    "noise_sigma": (float, DEFAULT_NOISE_SIGMA, "input cloud noise std"),
    "iou_samples": (int, 100_000, "Monte-Carlo samples per shape for IOU"),
    "chamfer_samples": (int, 10_000, "surface samples per mesh for Chamfer-L1"),
    "interior_samples": (int, 10_000, "interior points per shape for part mIOU"),
    "res": (int, 64, "grid resolution for mesh extraction"),
    "tau": (float, 0.2, "probability level for mesh extraction"),
}
RECON_OPTS = {
    "ckpt": (str, None, "checkpoint path, or 'oracle'"),
    "data": (str, None, "dataset directory (default: the one recorded in the checkpoint)"),
    "shape": (str, None, "shape id from the manifest"),
    "res": (int, 64, "grid resolution"),
    "tau": (float, 0.2, "probability level"),
    "out": (str, None, "OFF mesh path"),
    "segment": (bool, False, "also write per-vertex part labels"),
    "noise_sigma": (float, DEFAULT_NOISE_SIGMA, "input cloud noise std"),
}
COMMANDS = {
    "gen-data": (GEN_OPTS, ("families", "out")),
    "train": (TRAIN_OPTS, ("data", "out")),
    "eval": (EVAL_OPTS, ("data", "ckpt", "out")),
    "reconstruct": (RECON_OPTS, ("ckpt", "shape", "out")),
}
_FLAG_NAMES = {"init_from": "--from"}


def _flag(name: str) -> str:
    return _FLAG_NAMES.get(name, "--" + name.replace("_", "-"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multitask-inr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, (opts, required) in COMMANDS.items():
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values (flags take precedence)")
        for name, (typ, default, help_) in {**opts, **_COMMON}.items():
            text = f"{help_} (default: {default})" if default is not None else help_
            if name in required:
                text += " [required]"
            if typ is bool:
                p.add_argument(_flag(name), dest=name, action="store_true", help=text)
            else:
                p.add_argument(_flag(name), dest=name, type=typ, help=text)
    return parser


def resolve_options(command: str, flags: dict) -> dict:
    """Merge defaults < config file < flags; reject unknown keys and missing required ones."""
    opts, required = COMMANDS[command]
    table = {**opts, **_COMMON}
    merged = {k: v[1] for k, v in table.items()}
    cfg_path = flags.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path) as f:
                file_opts = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {cfg_path}: invalid JSON ({e})") from None
        if not isinstance(file_opts, dict):
            raise ConfigError(f"config file {cfg_path}: top level must be an object")
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        if "from" in file_opts:
            file_opts["init_from"] = file_opts.pop("from")
        unknown = sorted(set(file_opts) - set(table))
        if unknown:
            raise ConfigError(f"config file {cfg_path}: unknown keys {unknown} for '{command}'")
        for k, v in file_opts.items():
            typ = table[k][0]
            if v is not None and typ is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            if v is not None and not isinstance(v, typ) or (typ is int and isinstance(v, bool)):
                raise ConfigError(f"config file {cfg_path}: {k!r} must be {typ.__name__}")
            merged[k] = v
    merged.update(flags)
    missing = [_flag(k) for k in required if merged.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {', '.join(missing)}")
    return merged


# -- dataset directories ---------------------------------------------------------


def load_dataset(data_dir) -> tuple[dict, list[LabeledShape]]:
    """Regenerate the analytic shapes recorded in a gen-data manifest."""
    path = Path(data_dir) / "manifest.json"
    manifest = read_manifest(path)
    entries = manifest["shapes"]
    shapes = make_dataset(manifest["families"], len(entries), int(manifest["seed"]),
                          int(manifest.get("n_vertices", DEFAULT_VERTICES)))
    for entry, shape in zip(entries, shapes):
        if int(entry["class_label"]) != shape.class_label:
            raise FormatError(f"{path}: shape {entry['id']} does not match its family schedule")
    return manifest, shapes


def dataset_schema(manifest: dict) -> tuple[int, int]:
    fams = parse_family_spec(manifest["families"])
    return len(fams), max(parts_per_family(n) for n, _ in fams)


def cmd_gen_data(o: dict) -> int:
    from .evaluation import OraclePredictor, extract_mesh

    fams = parse_family_spec(o["families"])
    shapes = make_dataset(fams, o["count"], o["seed"], o["n_vertices"])
    out = Path(o["out"])
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    oracle = OraclePredictor(len(fams), max(parts_per_family(n) for n, _ in fams))
    entries = []
    for i, shape in enumerate(shapes):
        sid = f"{i:05d}"
        batch = sample_batch(shape, o["n_query"], None, o["noise_sigma"], rng_seed=[o["seed"], i, 11])
        write_occs(out / "samples" / f"{sid}.occs", batch)
        view = oracle.bind(shape, i)
        mesh = extract_mesh(view.occ_prob, shape.padded_bbox(), o["mesh_res"], 0.5)
        labels = nearest_vertex_label(shape, mesh.vertices)
        write_off(out / "meshes" / f"{sid}.off", mesh.vertices, mesh.triangles, labels)
        entries.append({
            "id": sid,
            "class_label": int(shape.class_label),
            "family": fams[shape.class_label][0],
            "sample_file": f"samples/{sid}.occs",
            "mesh_file": f"meshes/{sid}.off",
        })
        log.info("shape %s (%s) written", sid, fams[shape.class_label][0])
    write_manifest(out / "manifest.json", [[n, c] for n, c in fams], o["seed"], entries,
                   count=o["count"], n_vertices=o["n_vertices"], n_query=o["n_query"],
                   noise_sigma=o["noise_sigma"])
    return EXIT_OK


def _model_config(o: dict, tasks, n_classes: int, n_parts: int, base: dict | None) -> ModelConfig:
    d = {k: o[k] for k in MODEL_OPTS}
    if base is not None and o["freeze_encoder"]:
        # the frozen encoder dictates its own sizes
        for k in ("latent_dim", "enc_hidden", "enc_blocks", "n_input_points"):
            d[k] = base[k]
    return ModelConfig(n_classes=n_classes, n_parts=n_parts, tasks=tasks, topology=o["topology"], **d)


def cmd_train(o: dict) -> int:
    manifest, shapes = load_dataset(o["data"])
    n_classes, n_parts = dataset_schema(manifest)
    tasks = tuple(t.strip() for t in o["tasks"].split(",") if t.strip())
    init = base = None
    if o["init_from"] is not None:
        header, init = read_checkpoint_arrays(o["init_from"])
        base = header["config"]
    tc = TrainConfig(
        tasks=tasks, topology=o["topology"], freeze_encoder=o["freeze_encoder"], lr=o["lr"],
        batch_size=o["batch_size"], n_query=o["n_query"], steps=o["steps"], seed=o["seed"],
        noise_sigma=o["noise_sigma"], lambda_cls=o["lambda_cls"], lambda_seg=o["lambda_seg"],
    )
    mc = _model_config(o, tasks, n_classes, n_parts, base)
    result = train(shapes, tc, mc, init=init, log_every=100 if o["verbose"] else 0)
    result.model.meta["data"] = os.path.abspath(o["data"])
    save_checkpoint(result.model, o["out"])
    csv_path = o["loss_csv"] or o["out"] + ".loss.csv"
    with open(csv_path, "w", newline="") as f:
        f.write(history_csv(result.history))
    if result.seg_empty_batches:
        log.warning("%d batch(es) had no interior points for the segmentation loss",
                    result.seg_empty_batches)
    return EXIT_OK


def _predictor(ckpt: str, manifest: dict, seed: int, noise_sigma: float):
    from .evaluation import NetworkPredictor, OraclePredictor

    if ckpt == ORACLE:
        return OraclePredictor(*dataset_schema(manifest))
    return NetworkPredictor(load_checkpoint(ckpt), seed, noise_sigma)


def cmd_eval(o: dict) -> int:
    from .evaluation import EvalSettings, evaluate

    manifest, shapes = load_dataset(o["data"])
    settings = EvalSettings(iou_samples=o["iou_samples"], chamfer_samples=o["chamfer_samples"],
                            interior_samples=o["interior_samples"], mesh_resolution=o["res"],
                            mesh_tau=o["tau"])
    pred = _predictor(o["ckpt"], manifest, o["seed"], o["noise_sigma"])
    ids = [e["id"] for e in manifest["shapes"]]
    report = evaluate(pred, shapes, ids, o["metrics"], o["seed"], settings)
    with open(o["out"], "w") as f:
        f.write(report.to_json())
    return EXIT_OK


def cmd_reconstruct(o: dict) -> int:
    from .evaluation import extract_mesh, segment_mesh

    data = o["data"]
    if data is None and o["ckpt"] != ORACLE:
        header, _ = read_checkpoint_arrays(o["ckpt"])
        data = header.get("meta", {}).get("data")
    if data is None:
        raise ConfigError("reconstruct: --data is required (checkpoint records no dataset)")
    manifest, shapes = load_dataset(data)
    ids = [e["id"] for e in manifest["shapes"]]
    if o["shape"] not in ids:
        raise ConfigError(f"reconstruct: unknown shape id {o['shape']!r} in {data}")
    idx = ids.index(o["shape"])
    shape = shapes[idx]
    view = _predictor(o["ckpt"], manifest, o["seed"], o["noise_sigma"]).bind(shape, idx)
    bbox = shape.padded_bbox()
    mesh = extract_mesh(view.occ_prob, bbox, o["res"], o["tau"])
    labels = None
    if o["segment"]:
        labels = segment_mesh(view, mesh, bbox) if not mesh.empty else np.zeros(0, dtype=np.int64)
    write_off(o["out"], mesh.vertices, mesh.triangles, labels)
    if mesh.empty:
        log.warning("level set is empty; wrote an empty mesh")
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "reconstruct": cmd_reconstruct}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(command, args)
        return HANDLERS[command](opts)
    except NumericalAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:  # ConfigError, bad family spec, shape mismatches, ...
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
