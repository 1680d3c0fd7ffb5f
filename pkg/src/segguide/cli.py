"""Command-line entry point.

Subcommands: gen-data, train-backbone, train-guide, eval, guide-bp,
export-gamma, serve.  Flags override values from --config (a JSON file
whose keys mirror the flags).  Every run that writes outputs also
writes a resolved-config JSON next to them so results can be
regenerated from the emitted file alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch


def _write_resolved(out: Path, name: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.resolved.json").write_text(json.dumps(resolved, indent=2))


def _fail(code: str, message: str, hint: str | None = None) -> int:
    payload = {"error": {"code": code, "message": message}}
    if hint:
        payload["error"]["hint"] = hint
    print(json.dumps(payload), file=sys.stderr)
    return 1


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Precedence: flag given on the command line > config file > default.

    Parser flags carry no argparse defaults, so a non-None attribute
    always means the user passed it.
    """
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_values = json.loads(Path(args.config).read_text())
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _load_dataset(path: str):
    from .dataset import read_dataset

    data_dir = Path(path)
    if not (data_dir / "manifest.json").exists():
        raise FileNotFoundError(
            f"no dataset at {data_dir}; generate one with "
            f"`segguide gen-data --out {data_dir}`")
    return read_dataset(data_dir)


def _load_backbone(path: str):
    from .backbone import load_checkpoint

    ckpt = Path(path)
    if not ckpt.exists():
        raise FileNotFoundError(
            f"no backbone checkpoint at {ckpt}; train one with "
            f"`segguide train-backbone --data <dir> --out {ckpt}`")
    return load_checkpoint(ckpt)


def _load_guide_and_table(guide_path: str, embedding_source: str | None = None,
                          embedding_dim: int | None = None):
    """Load a guide plus its embedding table; the sidecar supplies the
    embedding settings unless flags override them."""
    from .language import load_embeddings, load_guide

    ckpt = Path(guide_path)
    if not ckpt.exists():
        raise FileNotFoundError(
            f"no guide checkpoint at {ckpt}; train one with "
            f"`segguide train-guide --data <dir> --backbone <ckpt> "
            f"--out {ckpt}`")
    sidecar = json.loads(ckpt.with_suffix(".json").read_text())
    source = embedding_source or sidecar.get("embedding_source", "hashed")
    dim = embedding_dim or sidecar["embedding_dim"]
    table = load_embeddings(source, dim)
    return load_guide(ckpt, table), table


def cmd_gen_data(args) -> int:
    from .dataset import SceneConfig, write_dataset

    defaults = {"out": None, "n_train": 2000, "n_test": 200, "seed": 0,
                "height": 64, "width": 64, "num_classes": 10}
    r = _resolve(args, defaults)
    if not r["out"]:
        return _fail("missing_arg", "--out is required")
    cfg = SceneConfig(image_size=(r["height"], r["width"]),
                      num_classes=r["num_classes"], seed=r["seed"])
    out = Path(r["out"])
    write_dataset(cfg, r["n_train"], r["n_test"], out)
    _write_resolved(out, "gen-data", r)
    print(json.dumps({"out": str(out), "n_train": r["n_train"],
                      "n_test": r["n_test"]}))
    return 0


def cmd_train_backbone(args) -> int:
    from .backbone import ModelConfig, save_checkpoint
    from .training import train_backbone

    defaults = {"data": None, "out": None, "half": "A", "epochs": 30,
                "batch_size": 16, "lr": 1e-3, "seed": 0,
                "height": 64, "width": 64,
                "channel_widths": "32,64,128,128",
                "decoder_widths": "64,32,16,16",
                "splits": "s1,s2,s3,s4"}
    r = _resolve(args, defaults)
    if not r["data"] or not r["out"]:
        return _fail("missing_arg", "--data and --out are required")
    data = _load_dataset(r["data"])
    config = ModelConfig(
        input_size=(r["height"], r["width"]),
        num_classes=len(data.class_names),
        channel_widths=tuple(int(v) for v in r["channel_widths"].split(",")),
        decoder_widths=tuple(int(v) for v in r["decoder_widths"].split(",")),
        split_points=tuple(r["splits"].split(",")))
    out = Path(r["out"])
    model = train_backbone(data, config, half=r["half"], epochs=r["epochs"],
                           batch_size=r["batch_size"], lr=r["lr"],
                           seed=r["seed"],
                           log_path=out.with_suffix(".log.jsonl"))
    save_checkpoint(model, out)
    _write_resolved(out.parent, "train-backbone", r)
    print(json.dumps({"out": str(out), "train_miou": model.train_miou}))
    return 0


def cmd_train_guide(args) -> int:
    from .training import TrainConfig, train_guide

    defaults = {"data": None, "backbone": None, "out": None,
                "regime": "find", "split": "s4", "variant": "spatio_semantic",
                "wrapping": "direct", "gru_hidden": 128,
                "embedding_source": "hashed", "embedding_dim": 50,
                "epochs": 15, "batch_size": 16, "lr": 1e-3, "seed": 0,
                "half": "B", "grid_n": 3}
    r = _resolve(args, defaults)
    if not r["data"] or not r["backbone"] or not r["out"]:
        return _fail("missing_arg", "--data, --backbone and --out are required")
    from .guiding import GuideMode

    data = _load_dataset(r["data"])
    backbone = _load_backbone(r["backbone"])
    cfg = TrainConfig(
        hint_regime=r["regime"], split=r["split"],
        mode=GuideMode(variant=r["variant"], wrapping=r["wrapping"]),
        gru_hidden=r["gru_hidden"], embedding_source=r["embedding_source"],
        embedding_dim=r["embedding_dim"], epochs=r["epochs"],
        batch_size=r["batch_size"], learning_rate=r["lr"], seed=r["seed"],
        dataset_half=r["half"], grid_n=r["grid_n"])
    out = Path(r["out"])
    _, _, log = train_guide(backbone, data, cfg, out_path=out,
                            log_path=out.with_suffix(".log.jsonl"))
    _write_resolved(out.parent, "train-guide", r)
    print(json.dumps({"out": str(out), "final_loss": log[-1]["loss"]}))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_unguided, run_ablation
    from .queries import QueryGenConfig

    defaults = {"data": None, "backbone": None, "guides": None,
                "axis": None, "seeds": 5, "out": None,
                "embedding_source": None, "embedding_dim": None,
                "regime": "find", "grid_n": 3}
    r = _resolve(args, defaults)
    if not r["data"] or not r["backbone"]:
        return _fail("missing_arg", "--data and --backbone are required")
    data = _load_dataset(r["data"])
    backbone = _load_backbone(r["backbone"])
    images, labels = data.tensors("test")
    if not r["axis"]:
        result = evaluate_unguided(backbone, images, labels)
        report = result.to_json()
        if r["out"]:
            out = Path(r["out"])
            out.mkdir(parents=True, exist_ok=True)
            (out / "eval.json").write_text(json.dumps(report, indent=2))
            _write_resolved(out, "eval", r)
        print(json.dumps({"miou": result.miou,
                          "pixel_accuracy": result.pixel_accuracy}))
        return 0
    if not r["guides"]:
        return _fail("missing_arg", "--guides is required for an ablation",
                     "pass name=path pairs, comma separated")
    qcfg = QueryGenConfig(grid_n=r["grid_n"],
                          class_names=tuple(data.class_names))
    settings = []
    table = None
    for item in r["guides"].split(","):
        name, _, path = item.partition("=")
        if not path:
            return _fail("bad_arg", f"guide setting {item!r} is not name=path")
        guide, guide_table = _load_guide_and_table(
            path, r["embedding_source"], r["embedding_dim"])
        if table is None:
            table = guide_table
        elif table.checksum() != guide_table.checksum():
            return _fail("bad_arg",
                         "guides were trained with different embeddings")
        setting = {"name": name, "guide": guide, "regime": r["regime"]}
        if r["axis"] == "hint_regime":
            setting["regime"] = name
        if r["axis"] == "num_hints":
            setting["num_hints"] = int(name)
            setting["regime"] = "find_or_remove"
        settings.append(setting)
    report = run_ablation(r["axis"], settings, backbone, table, images,
                          labels, qcfg, num_seeds=r["seeds"])
    if r["out"]:
        out = Path(r["out"])
        report.write(out / f"ablation_{r['axis']}")
        _write_resolved(out, "eval", r)
    print(json.dumps(report.to_json()))
    return 0


def cmd_guide_bp(args) -> int:
    from .backprop import GuideOptConfig, run_question_protocol
    from .evaluation import MIOU_CONVENTION

    opt = GuideOptConfig()
    defaults = {"data": None, "backbone": None, "out": None, "split": None,
                "questions": 20, "images": 0, "lr": opt.lr,
                "momentum": opt.momentum,
                "max_iterations": opt.max_iterations,
                "stop_loss": opt.stop_loss,
                "iterations_growth": opt.iterations_growth}
    r = _resolve(args, defaults)
    if not r["data"] or not r["backbone"]:
        return _fail("missing_arg", "--data and --backbone are required")
    data = _load_dataset(r["data"])
    backbone = _load_backbone(r["backbone"])
    split = r["split"] or backbone.config.split_points[-1]
    opt_cfg = GuideOptConfig(lr=r["lr"], momentum=r["momentum"],
                             max_iterations=r["max_iterations"],
                             stop_loss=r["stop_loss"],
                             iterations_growth=r["iterations_growth"])
    images, labels = data.tensors("test")
    count = r["images"] or images.shape[0]
    curves = []
    for i in range(min(count, images.shape[0])):
        trace = run_question_protocol(backbone, split, images[i],
                                      labels[i].numpy(), r["questions"],
                                      opt_cfg)
        curves.append(trace.mious())
    curve = np.mean(np.array(curves), axis=0).tolist()
    result = {"split": split, "questions": r["questions"],
              "images": len(curves), "mean_miou_per_question": curve,
              "miou_convention": MIOU_CONVENTION}
    if r["out"]:
        out = Path(r["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w") as f:
            for i, c in enumerate(curves):
                f.write(json.dumps({"image": i, "mious": c}) + "\n")
        _write_resolved(out.parent, "guide-bp", r)
    print(json.dumps(result))
    return 0


def cmd_export_gamma(args) -> int:
    from .evaluation import export_gamma_vectors

    defaults = {"backbone": None, "guide": None, "out": None,
                "embedding_source": None, "embedding_dim": None}
    r = _resolve(args, defaults)
    if not r["guide"] or not r["out"] or not r["backbone"]:
        return _fail("missing_arg", "--backbone, --guide and --out are required")
    guide, table = _load_guide_and_table(r["guide"], r["embedding_source"],
                                         r["embedding_dim"])
    class_names = _load_backbone(r["backbone"]).class_names
    out = Path(r["out"])
    export_gamma_vectors(guide, table, class_names, out)
    _write_resolved(out.parent, "export-gamma", r)
    print(json.dumps({"out": str(out), "classes": len(class_names)}))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .backprop import GuideOptConfig
    from .service import create_app

    opt = GuideOptConfig()
    defaults = {"backbone": None, "guide": None, "port": 8000,
                "host": "127.0.0.1", "cors_origin": None,
                "persist_dir": None, "embedding_source": None,
                "embedding_dim": None, "lr": opt.lr,
                "momentum": opt.momentum,
                "max_iterations": opt.max_iterations,
                "stop_loss": opt.stop_loss,
                "iterations_growth": opt.iterations_growth}
    r = _resolve(args, defaults)
    if not r["backbone"]:
        return _fail("missing_arg", "--backbone is required")
    backbone = _load_backbone(r["backbone"])
    guide = table = None
    if r["guide"]:
        guide, table = _load_guide_and_table(r["guide"], r["embedding_source"],
                                             r["embedding_dim"])
    opt_cfg = GuideOptConfig(lr=r["lr"], momentum=r["momentum"],
                             max_iterations=r["max_iterations"],
                             stop_loss=r["stop_loss"],
                             iterations_growth=r["iterations_growth"])
    app = create_app(backbone, guide, table, opt_cfg,
                     persist_dir=r["persist_dir"],
                     cors_origin=r["cors_origin"])
    if r["persist_dir"]:
        _write_resolved(Path(r["persist_dir"]), "serve", r)
    uvicorn.run(app, host=r["host"], port=r["port"], log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segguide",
        description="interactive guidance for a frozen segmentation network")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, func, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file; flags override it")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, {
        "--out": {}, "--n-train": {"type": int, "dest": "n_train"},
        "--n-test": {"type": int, "dest": "n_test"},
        "--seed": {"type": int}, "--height": {"type": int},
        "--width": {"type": int},
        "--num-classes": {"type": int, "dest": "num_classes"}})
    add("train-backbone", cmd_train_backbone, {
        "--data": {}, "--out": {}, "--half": {},
        "--epochs": {"type": int},
        "--batch-size": {"type": int, "dest": "batch_size"},
        "--lr": {"type": float}, "--seed": {"type": int},
        "--height": {"type": int}, "--width": {"type": int},
        "--channel-widths": {"dest": "channel_widths"},
        "--decoder-widths": {"dest": "decoder_widths"},
        "--splits": {}})
    add("train-guide", cmd_train_guide, {
        "--data": {}, "--backbone": {}, "--out": {}, "--regime": {},
        "--split": {}, "--variant": {}, "--wrapping": {},
        "--gru-hidden": {"type": int, "dest": "gru_hidden"},
        "--embedding-source": {"dest": "embedding_source"},
        "--embedding-dim": {"type": int, "dest": "embedding_dim"},
        "--epochs": {"type": int},
        "--batch-size": {"type": int, "dest": "batch_size"},
        "--lr": {"type": float}, "--seed": {"type": int}, "--half": {},
        "--grid-n": {"type": int, "dest": "grid_n"}})
    add("eval", cmd_eval, {
        "--data": {}, "--backbone": {}, "--guides": {}, "--axis": {},
        "--seeds": {"type": int}, "--out": {},
        "--embedding-source": {"dest": "embedding_source"},
        "--embedding-dim": {"type": int, "dest": "embedding_dim"},
        "--regime": {}, "--grid-n": {"type": int, "dest": "grid_n"}})
    add("guide-bp", cmd_guide_bp, {
        "--data": {}, "--backbone": {}, "--out": {}, "--split": {},
        "--questions": {"type": int}, "--images": {"type": int},
        "--lr": {"type": float}, "--momentum": {"type": float},
        "--max-iterations": {"type": int, "dest": "max_iterations"},
        "--stop-loss": {"type": float, "dest": "stop_loss"},
        "--iterations-growth": {"type": float, "dest": "iterations_growth"}})
    add("export-gamma", cmd_export_gamma, {
        "--backbone": {}, "--guide": {}, "--out": {},
        "--embedding-source": {"dest": "embedding_source"},
        "--embedding-dim": {"type": int, "dest": "embedding_dim"}})
    add("serve", cmd_serve, {
        "--backbone": {}, "--guide": {}, "--port": {"type": int},
        "--host": {}, "--cors-origin": {"dest": "cors_origin"},
        "--persist-dir": {"dest": "persist_dir"},
        "--embedding-source": {"dest": "embedding_source"},
        "--embedding-dim": {"type": int, "dest": "embedding_dim"},
        "--lr": {"type": float}, "--momentum": {"type": float},
        "--max-iterations": {"type": int, "dest": "max_iterations"},
        "--stop-loss": {"type": float, "dest": "stop_loss"},
        "--iterations-growth": {"type": float, "dest": "iterations_growth"}})
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as e:
        return _fail(type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
