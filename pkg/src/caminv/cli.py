"""Command-line entry points.

Configuration is flat ``key = value`` text; any setting can be overridden on
the command line as ``--key=value`` (dotted keys reach nested groups, e.g.
``--hp.gamma=2``). The last writer wins, and the effective configuration is
echoed into every output directory so runs can be reproduced from their
artifacts alone.

Exit codes: 0 success, 2 bad usage or configuration, 3 missing or unreadable
artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import re
import sys
import types
import typing
from dataclasses import fields, is_dataclass, replace
from pathlib import Path

from .errors import (
    CalibrationError,
    CheckpointError,
    ConfigError,
    DataError,
    MissingArtifactError,
    NumericError,
)
from .inference import (
    FusionWeights,
    calibrate_tau,
    collect_camera_probs,
    image_to_tensor,
    load_calibration,
    save_calibration,
    score_manifest,
)
from .metrics import (
    compute_report,
    eer,
    hter_at,
    records_from_rows,
    write_report,
    write_score_csv,
)
from .synthdata import (
    GenConfig,
    ImageStore,
    generate_dataset,
    manifest_sha256,
    read_manifest,
)
from .trainer import (
    TrainConfig,
    checkpoint_content_hash,
    desk_config,
    file_sha256,
    load_checkpoint,
    model_from_checkpoint,
    scaled_schedule,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

_OVERRIDE_RE = re.compile(r"^--([A-Za-z_][A-Za-z0-9_.]*)=(.*)$", re.S)


# ---------------------------------------------------------------- config IO


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read flat ``key = value`` lines; '#' starts a comment."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}")
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for tok in tokens:
        m = _OVERRIDE_RE.match(tok)
        if not m:
            raise ConfigError(f"unrecognized argument: {tok!r} (overrides are --key=value)")
        mapping[m.group(1)] = m.group(2)
    return mapping


def _coerce(raw: str, tp) -> object:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if type(None) in args and raw.lower() in ("none", "null", ""):
            return None
        for arg in args:
            if arg is type(None):
                continue
            return _coerce(raw, arg)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw
    if origin is tuple:
        args = typing.get_args(tp)
        elem = args[0] if args else str
        parts = [x.strip() for x in raw.split(",") if x.strip() != ""]
        return tuple(_coerce(x, elem) for x in parts)
    raise ConfigError(f"cannot parse a value of type {tp!r} from {raw!r}")


def _set_key(cfg, dotted: str, raw: str):
    head, _, rest = dotted.partition(".")
    hints = typing.get_type_hints(type(cfg))
    by_name = {f.name: f for f in fields(cfg)}
    if head not in by_name:
        raise ConfigError(f"unknown config key: {dotted!r}")
    if rest:
        sub = getattr(cfg, head)
        if not is_dataclass(sub):
            raise ConfigError(f"config key {head!r} has no sub-keys")
        return replace(cfg, **{head: _set_key(sub, rest, raw)})
    try:
        value = _coerce(raw, hints[head])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {dotted!r}: {raw!r} ({exc})") from exc
    try:
        return replace(cfg, **{head: value})
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"rejected value for {dotted!r}: {exc}") from exc


def build_config(base, mapping: dict[str, str]):
    cfg = base
    for key, raw in mapping.items():
        cfg = _set_key(cfg, key, raw)
    return cfg


def _flatten(cfg, prefix: str = "") -> list[tuple[str, str]]:
    items: list[tuple[str, str]] = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            items.extend(_flatten(value, prefix=f"{key}."))
        elif isinstance(value, tuple):
            items.append((key, ",".join(str(v) for v in value)))
        elif value is None:
            items.append((key, "none"))
        elif isinstance(value, float):
            items.append((key, repr(value)))
        else:
            items.append((key, str(value)))
    return items


def echo_config(cfg, out_dir: str | Path, command: str) -> Path:
    """Write the effective config where the command writes its outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"config.{command}.txt"
    lines = [f"{k} = {v}" for k, v in _flatten(cfg)]
    path.write_text("\n".join(lines) + "\n")
    return path


def _gather(ns, extras: list[str], seed_key: str = "seed") -> dict[str, str]:
    mapping: dict[str, str] = {}
    if getattr(ns, "config", None):
        mapping.update(parse_config_file(ns.config))
    if getattr(ns, "seed", None) is not None:
        mapping[seed_key] = str(ns.seed)
    mapping.update(parse_overrides(extras))
    return mapping


def _train_config(ns, extras: list[str]) -> TrainConfig:
    mapping = _gather(ns, extras)
    base = desk_config() if getattr(ns, "profile", "paper") == "desk" else TrainConfig()
    cfg = build_config(base, mapping)
    if getattr(ns, "profile", "paper") == "desk" and not (
        "decay_start" in mapping or "decay_every" in mapping
    ):
        start, every = scaled_schedule(cfg.total_steps)
        cfg = replace(cfg, decay_start=start, decay_every=every)
    return cfg


def _fusion_weights(ckpt) -> FusionWeights:
    lam4 = 0.7
    tc = ckpt.train_config or {}
    hp = tc.get("hp") or {}
    if "lambda4" in hp:
        lam4 = float(hp["lambda4"])
    return FusionWeights(w_inv=1.0, w_aug=lam4, w_aug_unknown=0.7 * lam4)


# ---------------------------------------------------------------- commands


def _cmd_gen_data(ns, extras) -> int:
    mapping = _gather(ns, extras, seed_key="master_seed")
    mapping["out_dir"] = ns.out_dir
    cfg = build_config(GenConfig(out_dir=ns.out_dir), mapping)
    records = generate_dataset(cfg)
    echo_config(cfg, cfg.out_dir, "gen-data")
    print(f"rows={len(records)} manifest_sha256={manifest_sha256(cfg.out_dir)}")
    return EXIT_OK


def _cmd_train(ns, extras) -> int:
    cfg = _train_config(ns, extras)
    echo_config(cfg, ns.out_dir, "train")
    result = train(cfg, ns.data, ns.out_dir)
    print(
        f"checkpoint={result.checkpoint_path} "
        f"hash={checkpoint_content_hash(result.checkpoint_path)} "
        f"final_total={result.final_total:.6f}"
    )
    return EXIT_OK


def _calibration_inputs(ckpt, data_dir):
    records = read_manifest(data_dir)
    cam_set = set(ckpt.camera_ids)
    rows = sorted(
        (r for r in records if r.split == "train" and r.camera_id in cam_set),
        key=lambda r: r.relative_path,
    )
    if not rows:
        raise DataError("no training rows for the checkpoint's cameras")
    store = ImageStore(data_dir)
    return (image_to_tensor(store.load(r.relative_path)) for r in rows)


def _cmd_calibrate_tau(ns, extras) -> int:
    if extras:
        raise ConfigError(f"calibrate-tau takes no overrides, got {extras}")
    ckpt = load_checkpoint(ns.checkpoint)
    model = model_from_checkpoint(ckpt)
    probs = collect_camera_probs(model, _calibration_inputs(ckpt, ns.data))
    cal = calibrate_tau(probs, floor=ns.floor)
    out = Path(ns.out) if ns.out else Path(ns.checkpoint).parent / "calibration.txt"
    save_calibration(cal, out)
    print(f"calibration={out} tau={cal.tau!r} floor={cal.floor!r} n_cameras={cal.n_cameras}")
    return EXIT_OK


def _score_and_report(
    model, ckpt, store, dev_rows, test_rows, out_dir: Path, unknown_mode: bool,
    calibration, suffix: str = "",
):
    weights = _fusion_weights(ckpt)
    dev_scores = score_manifest(
        model, store, dev_rows, weights=weights,
        calibration=calibration, unknown_mode=unknown_mode,
    )
    test_scores = score_manifest(
        model, store, test_rows, weights=weights,
        calibration=calibration, unknown_mode=unknown_mode,
    )
    write_score_csv(dev_scores, out_dir / f"scores_dev{suffix}.csv")
    write_score_csv(test_scores, out_dir / f"scores_test{suffix}.csv")
    report = compute_report(
        records_from_rows(dev_scores), records_from_rows(test_scores)
    )
    write_report(report, out_dir / f"report{suffix}.txt", out_dir / f"report{suffix}.csv")
    return report, dev_scores, test_scores


def _cmd_eval(ns, extras) -> int:
    if extras:
        raise ConfigError(f"eval takes no overrides, got {extras}")
    ckpt = load_checkpoint(ns.checkpoint)
    model = model_from_checkpoint(ckpt)
    records = read_manifest(ns.data)
    store = ImageStore(ns.data)
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    calibration = load_calibration(ns.calibration) if ns.calibration else None
    if ns.unknown_mode and calibration is None:
        raise MissingArtifactError(
            "unknown-camera mode needs --calibration (run calibrate-tau first)"
        )
    dev_rows = [r for r in records if r.split == "dev"]
    test_rows = [r for r in records if r.split == "test"]
    report, _, _ = _score_and_report(
        model, ckpt, store, dev_rows, test_rows, out_dir,
        unknown_mode=ns.unknown_mode, calibration=calibration,
    )
    sys.stdout.write(
        f"eer_dev={report.eer:.4f} threshold={report.threshold:.6f} "
        f"hter_test={report.hter:.4f} apcer={report.apcer:.4f} "
        f"bpcer={report.bpcer:.4f} acer={report.acer:.4f}\n"
    )
    return EXIT_OK


def _column_hter(dev_rows, test_rows, column: str) -> tuple[float, float]:
    """EER threshold on the dev column, HTER on the test column."""
    dev = records_from_rows(dev_rows, column)
    test = records_from_rows(test_rows, column)
    dev_eer, threshold = eer(dev)
    return dev_eer, hter_at(test, threshold)


def _cmd_cross_eval(ns, extras) -> int:
    try:
        train_cams = tuple(int(x) for x in ns.train_cameras.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --train-cameras value {ns.train_cameras!r}: {exc}") from exc
    cfg = _train_config(ns, extras)
    cfg = replace(cfg, train_cameras=train_cams)
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir, "cross-eval")

    result = train(cfg, ns.data, out_dir / "train")
    ckpt = load_checkpoint(result.checkpoint_path)
    model = model_from_checkpoint(ckpt)
    records = read_manifest(ns.data)
    store = ImageStore(ns.data)
    weights = _fusion_weights(ckpt)

    dev_rows = [r for r in records if r.split == "dev" and r.camera_id in train_cams]
    test_rows = [r for r in records if r.split == "test" and r.camera_id == ns.test_camera]
    if not test_rows:
        raise DataError(f"no test rows for camera {ns.test_camera}")

    dev_scores = score_manifest(model, store, dev_rows, weights=weights)
    test_scores = score_manifest(model, store, test_rows, weights=weights)
    write_score_csv(dev_scores, out_dir / "scores_dev.csv")
    write_score_csv(test_scores, out_dir / "scores_test.csv")

    header = ["train_cameras", "test_camera", "seed", "column", "eer_dev", "hter_test"]
    table: list[list[str]] = []
    columns = ["p_fused"]
    if model.config.with_invariant_branch:
        columns.append("p_spf")
    if model.config.with_augment_branch:
        columns.append("p_aug")
    for column in columns:
        dev_eer, h = _column_hter(dev_scores, test_scores, column)
        table.append(
            [ns.train_cameras, str(ns.test_camera), str(cfg.seed), column,
             repr(dev_eer), repr(h)]
        )

    if model.config.with_camera_path:
        probs = collect_camera_probs(model, _calibration_inputs(ckpt, ns.data))
        cal = calibrate_tau(probs, floor=ns.floor)
        save_calibration(cal, out_dir / "calibration.txt")
        dev_unknown = score_manifest(
            model, store, dev_rows, weights=weights, calibration=cal, unknown_mode=True
        )
        test_unknown = score_manifest(
            model, store, test_rows, weights=weights, calibration=cal, unknown_mode=True
        )
        known_test_rows = [
            r for r in records if r.split == "test" and r.camera_id in train_cams
        ]
        known_unknown = score_manifest(
            model, store, known_test_rows, weights=weights, calibration=cal,
            unknown_mode=True,
        )
        write_score_csv(dev_unknown, out_dir / "scores_dev_unknown.csv")
        write_score_csv(test_unknown, out_dir / "scores_test_unknown.csv")
        write_score_csv(known_unknown, out_dir / "scores_test_known_unknown.csv")
        dev_eer, h = _column_hter(dev_unknown, test_unknown, "p_fused")
        table.append(
            [ns.train_cameras, str(ns.test_camera), str(cfg.seed), "p_fused_unknown",
             repr(dev_eer), repr(h)]
        )

    report_path = out_dir / "cross_report.csv"
    with open(report_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(row) + "\n")
    for row in table:
        print(f"column={row[3]} eer_dev={float(row[4]):.4f} hter_test={float(row[5]):.4f}")
    return EXIT_OK


ABLATION_GRID = (
    ("invariant", {"branches": "invariant"}),
    ("invariant_no_eddf", {"branches": "invariant", "no_eddf_branch1": True}),
    ("augmentation", {"branches": "augmentation"}),
    ("augmentation_no_eddf", {"branches": "augmentation", "no_eddf_branch2": True}),
    ("fusion_no_camid", {"branches": "both", "no_cam_id": True}),
    ("fusion", {"branches": "both"}),
)


def _cmd_ablate(ns, extras) -> int:
    base = _train_config(ns, extras)
    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(base, out_dir, "ablate")
    records = read_manifest(ns.data)
    store = ImageStore(ns.data)
    dev_rows = [r for r in records if r.split == "dev"]
    test_rows = [r for r in records if r.split == "test"]

    lines = ["config,eer_dev,hter_test"]
    for name, flags in ABLATION_GRID:
        cfg = replace(base, **flags)
        result = train(cfg, ns.data, out_dir / name)
        ckpt = load_checkpoint(result.checkpoint_path)
        model = model_from_checkpoint(ckpt)
        weights = _fusion_weights(ckpt)
        dev_scores = score_manifest(model, store, dev_rows, weights=weights)
        test_scores = score_manifest(model, store, test_rows, weights=weights)
        dev_eer, h = _column_hter(dev_scores, test_scores, "p_fused")
        lines.append(f"{name},{dev_eer!r},{h!r}")
        print(f"{name:24s} eer_dev={dev_eer:.4f} hter_test={h:.4f}")
    (out_dir / "ablation_table.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_export_scores(ns, extras) -> int:
    if extras:
        raise ConfigError(f"export-scores takes no overrides, got {extras}")
    ckpt = load_checkpoint(ns.checkpoint)
    model = model_from_checkpoint(ckpt)
    records = read_manifest(ns.data)
    rows = [r for r in records if r.split == ns.split]
    if not rows:
        raise DataError(f"no rows in split {ns.split!r}")
    store = ImageStore(ns.data)
    calibration = load_calibration(ns.calibration) if ns.calibration else None
    if ns.unknown_mode and calibration is None:
        raise MissingArtifactError("unknown-camera mode needs --calibration")
    scores = score_manifest(
        model, store, rows, weights=_fusion_weights(ckpt),
        calibration=calibration, unknown_mode=ns.unknown_mode,
    )
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_score_csv(scores, out)
    print(f"scores={out} rows={len(scores)} sha256={file_sha256(out)}")
    return EXIT_OK


# ---------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caminv",
        description="Camera-invariant anti-spoofing: data generation, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="master seed (alias for master_seed)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("paper", "desk"), default="paper")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate-tau", help="fit the unknown-camera gap threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--floor", type=float, default=0.6)
    p.set_defaults(func=_cmd_calibrate_tau)

    p = sub.add_parser("eval", help="score dev/test splits and report error rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--calibration")
    p.add_argument("--unknown-mode", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cross-eval", help="train on some cameras, test on another")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-cameras", required=True, help="e.g. 0,1")
    p.add_argument("--test-camera", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("paper", "desk"), default="desk")
    p.add_argument("--floor", type=float, default=0.6,
                   help="confidence floor for the tau calibration")
    p.set_defaults(func=_cmd_cross_eval)

    p = sub.add_parser("ablate", help="run the branch/filter/camera ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("paper", "desk"), default="desk")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("export-scores", help="write one split's scores to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calibration")
    p.add_argument("--unknown-mode", action="store_true")
    p.set_defaults(func=_cmd_export_scores)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns, extras = parser.parse_known_args(argv)
    try:
        return ns.func(ns, extras)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
