"""Command-line pipeline: generate / analyze / select / train / eval /
crossval / migrate / explain.

Every subcommand writes a `run.json` echoing the fully resolved
configuration (defaults included, no timestamps), so identical inputs and
seeds reproduce byte-identical output trees.

Exit codes: 0 success; 2 usage or configuration error (bad flags, bad
config values, checkpoint/request shape mismatch, missing checkpoint);
3 data or format error (unreadable cohorts, corrupted files); 4 numerical
failure (non-finite loss abort).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    SelectionConfig,
    SelectionResult,
    rank_by_pearson,
    select_indicators,
    stage1_augmented_names,
    summarize,
)
from .cohort import (
    SHIFT_PRESETS,
    GenerationConfig,
    IndicatorSpec,
    RenderConfig,
    generate_cohort,
    read_cohort,
    shift_cohort,
    write_cohort,
    write_ppm,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    NumericalError,
    ParameterError,
)
from .network import Model, ModelConfig, load_model, save_model
from .train import (
    Hyperparams,
    crossval,
    evaluate,
    migrate_eval,
    occlusion_saliency,
    roc_points,
    train,
)

DEFAULT_PANEL_8 = ("BMI", "TG", "HPT", "HLP", "HDL", "WEIGHT", "DRINK", "MALE")
DEFAULT_PANEL_3 = ("BMI", "WEIGHT", "MALE")

MODE_CHOICES = ("metadata3", "metadata8", "image", "multimodal3", "multimodal8",
                "metadata", "multimodal", "indicator")

HYPER_KEYS = ("lr", "batch_size", "epochs", "optimizer", "beta1", "beta2", "eps", "momentum")
MODEL_KEYS = ("dropout", "image_size")
GENERATE_KEYS = ("n", "image_size", "with_images", "label_noise_sd",
                 "target_prevalence", "year_tag", "render", "indicators")
SELECT_KEYS = ("top_pearson", "final_top", "shap_samples", "shap_n_perm")


# ---- shared plumbing -------------------------------------------------------


def _load_config(path: str | None, allowed: tuple[str, ...]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON config ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(
            f"{p}: unknown config keys {unknown}; allowed: {sorted(allowed)}"
        )
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_run(out: Path, command: str, resolved: dict) -> None:
    _write_json(out / "run.json", {"command": command, "config": resolved})


def _hyper_from(cfg: dict, seed: int) -> Hyperparams:
    fields = {k: cfg[k] for k in HYPER_KEYS if k in cfg}
    return Hyperparams(seed=seed, **fields)


def _load_selection(path: str | None) -> SelectionResult | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"selection file not found: {p}")
    try:
        return SelectionResult.from_dict(json.loads(p.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{p}: invalid selection file ({exc})") from exc


def _resolve_panel(mode_flag: str, selection: SelectionResult | None,
                   indicators_flag: str | None, cohort=None) -> tuple[str, tuple[str, ...]]:
    """Map a CLI mode string to (model mode, indicator panel)."""
    if mode_flag in ("metadata", "multimodal"):
        mode_flag = mode_flag + "8"
    if mode_flag == "indicator":
        if indicators_flag is None:
            raise ConfigError("--mode indicator requires --indicators (a comma list or 'auto23')")
        if indicators_flag == "auto23":
            if cohort is None:
                raise ConfigError("--indicators auto23 needs a cohort")
            return "indicator", tuple(stage1_augmented_names(cohort))
        return "indicator", tuple(s.strip() for s in indicators_flag.split(",") if s.strip())
    table = {
        "metadata3": ("metadata", DEFAULT_PANEL_3),
        "metadata8": ("metadata", DEFAULT_PANEL_8),
        "image": ("image", ()),
        "multimodal3": ("multimodal", DEFAULT_PANEL_3),
        "multimodal8": ("multimodal", DEFAULT_PANEL_8),
    }
    mode, panel = table[mode_flag]
    if indicators_flag is not None:
        if mode == "image":
            raise ConfigError("--indicators has no effect in image mode")
        panel = tuple(s.strip() for s in indicators_flag.split(",") if s.strip())
    elif selection is not None and mode != "image":
        panel = tuple(selection.final3 if mode_flag.endswith("3") else selection.final8)
    return mode, panel


def _model_config(args, mode: str, panel: tuple[str, ...], cfg: dict) -> ModelConfig:
    fields = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    return ModelConfig(
        mode=mode,
        indicators=panel,
        alpha=args.alpha,
        use_aux=not args.no_aux,
        **fields,
    )


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _find_participant(cohort, pid: str | None) -> int:
    if pid is None:
        return 0
    for i, p in enumerate(cohort.participants):
        if p.pid == pid:
            return i
    raise DataError(f"participant id {pid!r} not in cohort")


# ---- subcommands -----------------------------------------------------------


def cmd_generate(args) -> None:
    cfg = _load_config(args.config, GENERATE_KEYS)
    out = _out_dir(args)
    fields = dict(cfg)
    if args.n is not None:
        fields["n"] = args.n
    if "render" in fields:
        fields["render"] = RenderConfig.from_dict(fields["render"])
    if "indicators" in fields:
        fields["indicators"] = tuple(IndicatorSpec.from_dict(d) for d in fields["indicators"])
    gen = GenerationConfig(**fields)
    cohort = generate_cohort(gen, seed=args.seed)
    shift = SHIFT_PRESETS[args.shift_preset]
    if args.shift_preset != "none":
        cohort = shift_cohort(cohort, shift, year_tag=args.shift_preset)
    write_cohort(cohort, out)
    _write_run(out, "generate", {
        "generation": gen.to_dict(),
        "seed": args.seed,
        "shift_preset": args.shift_preset,
        "out": str(out),
    })


def cmd_analyze(args) -> None:
    _load_config(args.config, ())
    out = _out_dir(args)
    cohort = read_cohort(args.cohort)
    table = summarize(cohort)
    table.to_csv(out / "summary.csv")
    ranking = rank_by_pearson(cohort, "label")
    ranking.to_csv(out / "pearson_ranking.csv")
    _write_run(out, "analyze", {
        "cohort": str(args.cohort),
        "seed": args.seed,
        "out": str(out),
        "warnings": sorted(set(table.warnings) | set(ranking.warnings)),
    })


def cmd_select(args) -> None:
    cfg = _load_config(args.config, SELECT_KEYS)
    out = _out_dir(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cohort = read_cohort(args.cohort)
    model = load_model(ckpt)
    sel_cfg = SelectionConfig(seed=args.seed, **{k: cfg[k] for k in SELECT_KEYS if k in cfg})
    result = select_indicators(cohort, model, sel_cfg)
    result.write_json(out / "selection.json")
    _write_run(out, "select", {
        "cohort": str(args.cohort),
        "checkpoint": str(ckpt),
        "seed": args.seed,
        "out": str(out),
        "top_pearson": sel_cfg.top_pearson,
        "final_top": sel_cfg.final_top,
        "shap_samples": sel_cfg.shap_samples,
        "shap_n_perm": sel_cfg.shap_n_perm,
    })


def cmd_train(args) -> None:
    cfg = _load_config(args.config, HYPER_KEYS + MODEL_KEYS)
    out = _out_dir(args)
    cohort = read_cohort(args.cohort)
    selection = _load_selection(args.selection)
    mode, panel = _resolve_panel(args.mode, selection, args.indicators, cohort)
    model_cfg = _model_config(args, mode, panel, cfg)
    hyper = _hyper_from(cfg, args.seed)
    model, history = train(cohort, model_cfg, hyper)

    ckpt = out / "model.bin"
    save_model(model, ckpt)
    sidecar_path = Path(f"{ckpt}.json")
    sidecar = json.loads(sidecar_path.read_text())
    sidecar["train_cohort"] = {"year_tag": cohort.year_tag, "n": cohort.n}
    _write_json(sidecar_path, sidecar)

    with open(out / "history.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(history):
            fh.write(f"{i},{loss!r}\n")
    _write_run(out, "train", {
        "cohort": str(args.cohort),
        "seed": args.seed,
        "out": str(out),
        "mode": args.mode,
        "model": model_cfg.to_dict(),
        "hyper": hyper.to_dict(),
        "selection": args.selection,
        "indicators": args.indicators,
    })


def cmd_eval(args) -> None:
    _load_config(args.config, ())
    out = _out_dir(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cohort = read_cohort(args.cohort)
    model = load_model(ckpt)
    report = evaluate(model, cohort, threshold=args.threshold)
    _write_json(out / "metrics.json", report.to_dict())
    _write_run(out, "eval", {
        "cohort": str(args.cohort),
        "checkpoint": str(ckpt),
        "seed": args.seed,
        "out": str(out),
        "threshold": args.threshold,
    })


def cmd_crossval(args) -> None:
    cfg = _load_config(args.config, HYPER_KEYS + MODEL_KEYS)
    out = _out_dir(args)
    cohort = read_cohort(args.cohort)
    selection = _load_selection(args.selection)
    mode, panel = _resolve_panel(args.mode, selection, args.indicators, cohort)
    model_cfg = _model_config(args, mode, panel, cfg)
    hyper = _hyper_from(cfg, args.seed)
    result = crossval(cohort, model_cfg, hyper, k=args.k,
                      threshold=args.threshold, repeats=args.repeats)
    _write_json(out / "crossval.json", result.to_dict())
    for i, roc in enumerate(result.fold_rocs):
        with open(out / f"roc_fold_{i}.csv", "w") as fh:
            fh.write("fpr,tpr\n")
            for fpr, tpr in roc:
                fh.write(f"{float(fpr)!r},{float(tpr)!r}\n")
    _write_run(out, "crossval", {
        "cohort": str(args.cohort),
        "seed": args.seed,
        "out": str(out),
        "mode": args.mode,
        "model": model_cfg.to_dict(),
        "hyper": hyper.to_dict(),
        "k": args.k,
        "repeats": args.repeats,
        "threshold": args.threshold,
        "selection": args.selection,
        "indicators": args.indicators,
    })


def cmd_migrate(args) -> None:
    _load_config(args.config, ())
    out = _out_dir(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cohort_b = read_cohort(args.cohort)
    model = load_model(ckpt)
    sidecar = json.loads(Path(f"{ckpt}.json").read_text())
    year_tag_model = sidecar.get("train_cohort", {}).get("year_tag", "unknown")
    report = migrate_eval(model, cohort_b, threshold=args.threshold)
    payload = report.to_dict()
    payload["year_tag_model"] = year_tag_model
    payload["year_tag_cohort"] = cohort_b.year_tag
    _write_json(out / "metrics.json", payload)
    _write_run(out, "migrate", {
        "cohort": str(args.cohort),
        "checkpoint": str(ckpt),
        "seed": args.seed,
        "out": str(out),
        "threshold": args.threshold,
    })


def cmd_explain(args) -> None:
    _load_config(args.config, ())
    out = _out_dir(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cohort = read_cohort(args.cohort)
    model = load_model(ckpt)
    idx = _find_participant(cohort, args.pid)
    participant = cohort.participants[idx]
    if participant.image is None:
        raise DataError(f"participant {participant.pid} has no image")
    meta_row = None
    if model.config.c_mc:
        meta_row = cohort.feature_matrix(model.config.indicators)[idx]
    heat = occlusion_saliency(model, participant.image, meta_row=meta_row,
                              patch=args.patch, stride=args.stride)

    with open(out / "heatmap.csv", "w") as fh:
        fh.write(",".join(f"c{j}" for j in range(heat.shape[1])) + "\n")
        for row in heat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    span = heat.max() - heat.min()
    norm = (heat - heat.min()) / span if span > 0 else np.full_like(heat, 0.5)
    scale = max(1, model.config.image_size // heat.shape[0])
    gray = np.repeat(np.repeat(norm, scale, axis=0), scale, axis=1)
    write_ppm(out / "heatmap.ppm", np.repeat(gray[:, :, None], 3, axis=2))
    _write_run(out, "explain", {
        "cohort": str(args.cohort),
        "checkpoint": str(ckpt),
        "seed": args.seed,
        "out": str(out),
        "pid": participant.pid,
        "patch": args.patch,
        "stride": args.stride,
    })


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fldkit",
        description="Multi-modal disease-prediction toolkit: synthetic cohorts, "
                    "indicator selection, fusion-network training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cohort=True, checkpoint=False, mode=False, threshold=False):
        p.add_argument("--seed", type=int, default=0, help="master random seed")
        p.add_argument("--config", default=None, help="JSON config overrides")
        p.add_argument("--out", required=True, help="output directory")
        if cohort:
            p.add_argument("--cohort", required=True, help="cohort directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint path")
        if mode:
            p.add_argument("--mode", required=True, choices=MODE_CHOICES)
            p.add_argument("--indicators", default=None,
                           help="comma-separated indicator names, or 'auto23'")
            p.add_argument("--selection", default=None,
                           help="selection.json to supply the indicator panels")
            p.add_argument("--alpha", type=float, default=0.7,
                           help="joint-loss blend weight")
            p.add_argument("--no-aux", action="store_true",
                           help="disable the auxiliary regression head")
        if threshold:
            p.add_argument("--threshold", type=float, default=0.5,
                           help="decision threshold on the predicted score")

    p = sub.add_parser("generate", help="synthesize a cohort directory")
    common(p, cohort=False)
    p.add_argument("--n", type=int, default=None, help="number of participants")
    p.add_argument("--shift-preset", default="none", choices=tuple(SHIFT_PRESETS),
                   help="photometric shift applied to the rendered images")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="summary table and correlation ranking")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("select", help="two-stage indicator selection")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, mode=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort")
    common(p, checkpoint=True, threshold=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    common(p, mode=True, threshold=True)
    p.add_argument("--k", type=int, default=7, help="number of folds")
    p.add_argument("--repeats", type=int, default=1,
                   help="re-run the whole k-fold with fresh partitions")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("migrate", help="evaluate a frozen model on another cohort")
    common(p, checkpoint=True, threshold=True)
    p.set_defaults(func=cmd_migrate)

    p = sub.add_parser("explain", help="occlusion saliency map for one participant")
    common(p, checkpoint=True)
    p.add_argument("--pid", default=None, help="participant id (default: first row)")
    p.add_argument("--patch", type=int, default=8, help="occlusion patch side, px")
    p.add_argument("--stride", type=int, default=8, help="occlusion stride, px")
    p.set_defaults(func=cmd_explain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ParameterError, DimensionError) as exc:
        print(f"fldkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError) as exc:
        print(f"fldkit {args.command}: error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"fldkit {args.command}: error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
