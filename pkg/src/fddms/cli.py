"""Command-line entry point: one subcommand per pipeline stage.

Every command reads its inputs from explicit paths or the output directory,
writes only into the output directory, and leaves a resolved-config snapshot
next to its results. Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .can_codec import (LAYOUTS, ContractError, TraceParseError, decode_frame, default_catalog, load_catalog,
                        read_records, read_trace, serialize_trace, write_records)
from .config import ConfigError, PipelineConfig, resolve
from .container import ContainerError

log = logging.getLogger("fddms")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- helpers -------------------------------------------------------------------

def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str | Path, stage: str | None = None) -> Path:
    p = Path(path)
    if not p.is_file():
        hint = f" (produced by the '{stage}' stage)" if stage else ""
        raise UserError(f"missing {p}{hint}")
    return p


def _input(given: str | None, cfg: PipelineConfig, default: str, stage: str) -> Path:
    return _require(given or Path(cfg.out) / default, stage)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _catalog(cfg: PipelineConfig):
    if cfg.catalog:
        return load_catalog(_require(cfg.catalog))
    return default_catalog(cfg.byte_order)


def _snapshot(cfg: PipelineConfig, command: str) -> None:
    (_out(cfg) / f"config.{command}.txt").write_text(cfg.to_text())


def _attack_spec(name: str, cfg: PipelineConfig):
    from .adversarial import AttackSpec

    name = name.lower()
    if name in ("none", ""):
        return None
    if name.startswith(("fgsm-", "bim-")):
        method, norm = name.split("-", 1)
        if method == "fgsm":
            return AttackSpec.fgsm(norm, cfg.epsilon)
        return AttackSpec.bim(norm, cfg.epsilon, cfg.bim_iterations)
    if name == "deepfool":
        return AttackSpec.deepfool(cfg.deepfool_iterations, cfg.overshoot)
    if name == "deepfool_variant":
        return AttackSpec.deepfool_variant(cfg.deepfool_iterations, cfg.overshoot, cfg.kappa, cfg.alpha_clip)
    raise UserError(f"unknown attack {name!r}")


def _split(cfg: PipelineConfig, inst, normalizer=None):
    """Deterministic split of a stored instance set, normalized on train statistics."""
    from .dataset import SplitSet, normalize, split

    s = split(inst, cfg.ratios, cfg.seed)
    if normalizer is None:
        return normalize(s)
    return SplitSet(s.train.with_X(normalizer.transform(s.train.X)),
                    s.validation.with_X(normalizer.transform(s.validation.X)),
                    s.test.with_X(normalizer.transform(s.test.X)), s.seed, s.indices, normalizer)


def _load_attacked(args, cfg):
    from .dataset import load_instances

    inst, meta = load_instances(_input(args.instances, cfg, "attacked.bin", "inject"))
    if not np.any(inst.y == 1):
        raise UserError("instance store holds no attacked instances; run 'inject' first")
    return inst, meta


def _load_model(args, cfg, default: str = "model.ckpt"):
    from .nn import load_checkpoint

    model, _, extra = load_checkpoint(_input(args.model, cfg, default, "train"))
    return model, extra


# --- commands --------------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig) -> int:
    from .synth import synth_frames

    frames = synth_frames(args.duration, _catalog(cfg), seed=cfg.seed)
    path = _out(cfg) / "trace.log"
    path.write_text(serialize_trace(frames))
    print(f"wrote {len(frames)} frames to {path}")
    return 0


def cmd_decode(args, cfg: PipelineConfig) -> int:
    catalog = _catalog(cfg)
    trace = _require(args.trace or cfg.trace)
    if cfg.layout not in LAYOUTS:
        raise UserError(f"unknown layout {cfg.layout!r}; choose from {sorted(LAYOUTS)}")
    frames = read_trace(trace, LAYOUTS[cfg.layout])
    known = set(catalog.cids)
    unknown = sum(1 for f in frames if f.can_id not in known)
    out = _out(cfg)
    with open(out / "records.csv", "w", newline="") as fh:
        n = write_records((r for f in frames for r in decode_frame(f, catalog)), fh)
    summary = {"frames": len(frames), "unknown_id_frames": unknown, "records": n, "trace": str(trace)}
    _write_json(out / "decode_summary.json", summary)
    _snapshot(cfg, "decode")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_build(args, cfg: PipelineConfig) -> int:
    from .dataset import build_instances, correlation_matrix, records_to_series, resample_series, save_instances
    from .dataset import write_correlation

    catalog = _catalog(cfg)
    with open(_input(args.records, cfg, "records.csv", "decode")) as fh:
        records = read_records(fh)
    table = resample_series(records_to_series(records), catalog.labels, cfg.rate)
    inst = build_instances(table, cfg.window, cfg.stride)
    out = _out(cfg)
    save_instances(inst, out / "instances.bin", {"duration": table.duration})
    corr = correlation_matrix(table)
    write_correlation(corr, out / "correlation.csv")
    summary = {"instances": len(inst), "duration_seconds": table.duration, "features": list(table.columns)}
    _write_json(out / "build_summary.json", summary)
    _snapshot(cfg, "build")
    print(f"{len(inst)} instances from {table.duration:.1f} s")
    return 0


def cmd_inject(args, cfg: PipelineConfig) -> int:
    from .dataset import load_instances, save_instances
    from .fdia import AttackConfig, build_attacked_dataset, write_manifest

    inst, _ = load_instances(_input(args.instances, cfg, "instances.bin", "build"))
    acfg = AttackConfig.from_catalog(_catalog(cfg), fraction_attacked=cfg.fraction_attacked, seed=cfg.seed)
    attacked, records = build_attacked_dataset(inst, acfg)
    out = _out(cfg)
    save_instances(attacked, out / "attacked.bin", {"seed": cfg.seed, "fraction_attacked": cfg.fraction_attacked})
    write_manifest(records, attacked, out / "manifest.csv")
    summary = {"instances": len(attacked), "attacked": int(attacked.y.sum()), "seed": cfg.seed}
    _write_json(out / "inject_summary.json", summary)
    _snapshot(cfg, "inject")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .nn import LstmDetector, OptimizerState, evaluate, save_checkpoint, train

    inst, _ = _load_attacked(args, cfg)
    s = _split(cfg, inst)
    model = LstmDetector.create(len(inst.features), cfg.hidden, cfg.seed, normalizer=s.normalizer,
                                features=tuple(inst.features))
    opt = OptimizerState(cfg.optimizer, lr=cfg.lr or None)
    model, history = train(model, s.train, cfg.epochs, cfg.batch_size, opt, cfg.seed, s.validation)
    metrics = {k: evaluate(model, getattr(s, k)).as_dict() for k in ("train", "validation", "test")}
    out = _out(cfg)
    save_checkpoint(out / "model.ckpt", model, opt, {"seed": cfg.seed, "split": cfg.split})
    doc = {"optimizer": opt.variant, "lr": opt.lr, "epochs": cfg.epochs, "seed": cfg.seed,
           "history": [h.__dict__ for h in history], "metrics": metrics}
    _write_json(out / f"train_{opt.variant}.json", doc)
    _snapshot(cfg, "train")
    print(f"{opt.variant}: test accuracy {100 * metrics['test']['accuracy']:.2f}%")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    from .nn import evaluate

    inst, _ = _load_attacked(args, cfg)
    model, _ = _load_model(args, cfg)
    s = _split(cfg, inst, model.normalizer)
    doc = {"seed": cfg.seed, "metrics": {k: evaluate(model, getattr(s, k)).as_dict()
                                         for k in ("train", "validation", "test")}}
    _write_json(_out(cfg) / "evaluate.json", doc)
    _snapshot(cfg, "evaluate")
    print(f"test accuracy {100 * doc['metrics']['test']['accuracy']:.2f}%")
    return 0


def cmd_attack(args, cfg: PipelineConfig) -> int:
    from .adversarial import report

    inst, _ = _load_attacked(args, cfg)
    model, _ = _load_model(args, cfg)
    s = _split(cfg, inst, model.normalizer)
    scale = model.normalizer.unit_scale() if cfg.physical_units and model.normalizer is not None else None
    rows = []
    for name in cfg.attack_list:
        rep, _ = report(model, s.test.X, s.test.y, _attack_spec(name, cfg), cfg.distortion_subset, scale)
        rows.append({"method": rep.method, "asr": rep.asr, "mean_l0": rep.mean_l0, "mean_l2": rep.mean_l2,
                     "mean_linf": rep.mean_linf, "count": rep.count, "subset": rep.subset, "units": rep.units,
                     "empty": rep.empty, **rep.extra})
        print(" ".join(rep.row()))
    out = _out(cfg)
    _write_json(out / "attacks.json", {"seed": cfg.seed, "epsilon": cfg.epsilon, "rows": rows})
    _write_table(out / "attack_distortion.csv", ["method", "asr", "l0", "l2", "linf"],
                 [[r["method"], r["asr"], r["mean_l0"], r["mean_l2"], r["mean_linf"]] for r in rows])
    _snapshot(cfg, "attack")
    return 0


def cmd_advtrain(args, cfg: PipelineConfig) -> int:
    from .advtrain import EVAL_ATTACKS, AdvTrainConfig, adversarial_retrain, robustness
    from .nn import save_checkpoint

    inst, _ = _load_attacked(args, cfg)
    model, _ = _load_model(args, cfg)
    s = _split(cfg, inst, model.normalizer)
    attack = _attack_spec(cfg.adv_attack, cfg)
    if attack is None:
        raise UserError("adv_attack must name an attack")
    defense = _attack_spec(cfg.defense, cfg)
    acfg = AdvTrainConfig(cfg.adv_iterations, cfg.adv_draw_size, cfg.adv_epochs, cfg.adv_threshold, attack,
                          cfg.adv_selective, patience=cfg.adv_patience, seed=cfg.seed, defense=defense)
    result = adversarial_retrain(model, s, acfg)
    out = _out(cfg)
    result.write(out / "advtrain.json")
    save_checkpoint(out / "model_robust.ckpt", result.model, None, {"seed": cfg.seed, "split": cfg.split})
    regime = ("challenging-" if cfg.adv_selective else "") + attack.name
    doc = {"seed": cfg.seed, "regime": regime,
           "before": robustness(model, s.test.X, s.test.y, EVAL_ATTACKS, defense),
           "after": robustness(result.model, s.test.X, s.test.y, EVAL_ATTACKS, defense)}
    _write_json(out / "advtrain_test.json", doc)
    _snapshot(cfg, "advtrain")
    print(f"best iteration {result.best_iteration}, accepted={result.accepted}")
    return 0


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    from .nn import load_checkpoint
    from .sdn.controller import model_detector
    from .sdn.scenario import load_scenario, parse_scenario
    from .sdn.sim import run_simulation

    scen_path = args.scenario or cfg.scenario
    overrides = dict(kv.split("=", 1) for kv in args.scenario_set or [])
    scn = load_scenario(_require(scen_path), overrides) if scen_path else parse_scenario("", overrides)
    model_path = scn.model or args.model or str(Path(cfg.out) / "model.ckpt")
    model, _, _ = load_checkpoint(_require(model_path, "train"))
    result = run_simulation(scn, model_detector(model), _catalog(cfg))
    out = _out(cfg)
    result.write_events(out / "events.csv")
    result.write_storage(out / "storage.csv")
    result.latency.write(out / "latency.csv")
    (out / "scenario.resolved.txt").write_text(scn.to_text())
    doc = {"frames_emitted": result.frames_emitted, "frames_forwarded": result.frames_forwarded,
           "stored": len(result.storage), "first_attack_verdict": result.first_attack_time(),
           "attack_verdicts": sum(v.attack for v in result.verdicts), "transport": scn.transport,
           "mitigations": result.latency.mitigations,
           "average_overall_ms": result.latency.average.overall_ms}
    _write_json(out / "simulate.json", doc)
    _snapshot(cfg, "simulate")
    print(json.dumps(doc, sort_keys=True))
    return 0


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    path.write_text("\n".join(",".join(fmt(v) for v in r) for r in [header] + rows) + "\n")


def cmd_report(args, cfg: PipelineConfig) -> int:
    """Collect stored metrics into table-shaped CSV files."""
    out = Path(cfg.out)
    if not out.is_dir():
        raise UserError(f"output directory {out} does not exist")
    made = []
    trains = sorted(out.glob("train_*.json"))
    if trains:
        rows = []
        for p in trains:
            d = json.loads(p.read_text())
            m = d["metrics"]["test"]
            rows.append([d["optimizer"], 100 * m["accuracy"], 100 * m["precision"], 100 * m["recall"], 100 * m["f1"]])
        _write_table(out / "optimizer_accuracy.csv", ["optimizer", "accuracy", "precision", "recall", "f1"], rows)
        made.append("optimizer_accuracy.csv")
    if (out / "advtrain_test.json").is_file():
        d = json.loads((out / "advtrain_test.json").read_text())
        rows = []
        for label, key in (("FDIA", "before"), (d["regime"], "after")):
            r = d[key]
            rows.append([label, "off", r["normal_accuracy"], *r["robust_accuracy"].values()])
            if "defended" in r:
                rows.append([label, "on", r["defended"]["normal_accuracy"], *r["defended"]["robust_accuracy"].values()])
        names = list(d["before"]["robust_accuracy"])
        _write_table(out / "robustness.csv", ["model", "defense", "normal", *names], rows)
        made.append("robustness.csv")
    if (out / "attacks.json").is_file():
        d = json.loads((out / "attacks.json").read_text())
        _write_table(out / "attack_distortion.csv", ["method", "asr", "l0", "l2", "linf"],
                     [[r["method"], r["asr"], r["mean_l0"], r["mean_l2"], r["mean_linf"]] for r in d["rows"]])
        made.append("attack_distortion.csv")
    if (out / "latency.csv").is_file():
        (out / "latency_summary.csv").write_text((out / "latency.csv").read_text())
        made.append("latency_summary.csv")
    if not made:
        raise UserError(f"no stored metrics in {out}; run the pipeline stages first")
    print("wrote " + ", ".join(made))
    return 0


COMMANDS = {
    "synth": cmd_synth, "decode": cmd_decode, "build": cmd_build, "inject": cmd_inject, "train": cmd_train,
    "evaluate": cmd_evaluate, "attack": cmd_attack, "advtrain": cmd_advtrain, "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fddms", description="CAN false-data detection pipeline", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic CAN trace")
    s.add_argument("--duration", type=float, default=60.0)
    s = sub.add_parser("decode", parents=[common], help="decode a CAN trace into signal records")
    s.add_argument("--trace")
    s = sub.add_parser("build", parents=[common], help="resample records into windowed instances")
    s.add_argument("--records")
    s = sub.add_parser("inject", parents=[common], help="inject false data into half the instances")
    s.add_argument("--instances")
    for name, help_ in (("train", "train the LSTM detector"), ("evaluate", "score a trained detector"),
                        ("attack", "run evasion attacks on the test split"),
                        ("advtrain", "adversarially retrain the detector")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--instances")
        if name != "train":
            s.add_argument("--model")
    s = sub.add_parser("simulate", parents=[common], help="run the SDN network simulation")
    s.add_argument("--scenario")
    s.add_argument("--model")
    s.add_argument("--scenario-set", action="append", metavar="KEY=VALUE", help="override one scenario key")
    sub.add_parser("report", parents=[common], help="aggregate stored metrics into tables")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for kv in args.set or []:
            key, sep, val = kv.partition("=")
            if not sep:
                raise UserError(f"--set expects KEY=VALUE, got {kv!r}")
            overrides[key.strip()] = val
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["out"] = args.out
        cfg = resolve(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (UserError, ConfigError, ContractError, TraceParseError, ContainerError,
            FileNotFoundError) as exc:
        print(f"fddms {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"fddms {args.command}: internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
