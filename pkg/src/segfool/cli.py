"""segfool command line: gen-data, train-victim, craft, eval, report.

Exit codes: 0 success, 1 computation failure or missing artifact, 2 usage/config error.
Progress goes to stderr; results only to the files named by --out.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from typing import List, Optional, Sequence

from . import config as C
from .attack import PROMPT_TYPES, craft_uap, load_uap, save_uap
from .baselines import METHODS, craft_baseline
from .datagen import load_dataset, save_dataset
from .errors import AttackDiverged, ContractError, FormatError
from .evaluation import (CONTRAST_FACTORS, MODES, EvalReport, corrupt, cross_prompt_eval, emit_report,
                         evaluate, load_report)
from .minisam import load_weights, save_weights, train_victim

log = logging.getLogger("segfool")

ABLATION_LETTERS = {"a": "fe", "b": "bm", "c": "hfc", "d": "lfc"}
LOSS_TERMS = ("fe", "bm", "hfc", "lfc")


class MissingArtifact(Exception):
    pass


def _need(path: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"missing input: {path}")
    return path


def _path(args, name: str, cfg: C.RunConfig) -> str:
    given = getattr(args, name, None)
    return given if given else cfg.section("paths")[name]


def _load_split(data_dir: str, split: str):
    samples, _ = load_dataset(_need(os.path.join(data_dir, f"{split}_manifest.json")))
    return samples


def parse_ablation(text: Optional[str]) -> List[str]:
    """'fe,bm' or 'A,B' -> loss terms to disable."""
    if not text:
        return []
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        tok = ABLATION_LETTERS.get(tok, tok)
        if tok not in LOSS_TERMS:
            raise ContractError(f"unknown ablation term {tok!r}; expected {LOSS_TERMS} or A-D")
        if tok not in out:
            out.append(tok)
    return out


def _write(path: str, writer) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    writer(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: C.RunConfig) -> None:
    spec = cfg.scene_spec()
    train = C.train_split(cfg)
    log.info("generated %d train samples", len(train))
    save_dataset(train, args.out, spec, "train")
    test = C.test_split(cfg)
    log.info("generated %d test samples", len(test))
    save_dataset(test, args.out, spec, "test")


def cmd_train_victim(args, cfg: C.RunConfig) -> None:
    train = _load_split(_path(args, "data", cfg), "train")
    v = cfg.section("victim")
    model = train_victim(train, epochs=int(v["epochs"]), lr=float(v["lr"]), seed=cfg.seed,
                         prompts_per_step=int(v["prompts_per_step"]), optimizer=v["optimizer"],
                         jitter=float(v["jitter"]))
    out = args.out or _path(args, "victim", cfg)
    _write(out, lambda p: save_weights(model, p))
    log.info("wrote %s", out)


def cmd_craft(args, cfg: C.RunConfig) -> None:
    disabled = parse_ablation(args.ablate)
    overrides = {f"use_{t}": False for t in disabled}
    if args.prompt_type:
        overrides["prompt_type"] = args.prompt_type
    attack_cfg = cfg.attack_config(**overrides)
    if args.method == "darksam" and not attack_cfg.any_loss_enabled():
        raise ContractError("at least one loss term is required; --ablate disabled fe, bm, hfc and lfc")
    train = _load_split(_path(args, "data", cfg), "train")
    model = load_weights(_need(_path(args, "victim", cfg)))

    def progress(epoch, loss):
        log.info("%s epoch %d/%d loss %.5f", args.method, epoch + 1, attack_cfg.epochs, loss)

    if args.method == "darksam":
        uap = craft_uap(model, train, attack_cfg, progress)
    else:
        uap = craft_baseline(args.method, model, train, attack_cfg, progress)
    out = args.out or _path(args, "uap", cfg)
    _write(out, lambda p: save_uap(uap, p))
    log.info("wrote %s", out)


def cmd_eval(args, cfg: C.RunConfig) -> None:
    ev = cfg.section("eval")
    workers = args.workers or int(ev["workers"])
    if args.severity is not None and args.defense is None:
        raise ContractError("--severity needs --defense")
    if args.defense is not None and args.severity not in CONTRAST_FACTORS:
        raise ContractError("--defense needs --severity in 1..5")
    data_dir = _path(args, "data", cfg)
    samples = _load_split(data_dir, args.split)
    model = load_weights(_need(_path(args, "victim", cfg)))
    delta, uap_meta = None, {}
    if not args.clean:
        uap = load_uap(_need(args.uap or _path(args, "uap", cfg)))
        delta = uap.delta
        uap_meta = {"method": uap.method, "config": uap.config}
    transform = None
    split = args.split
    if args.defense:
        kind, sev = args.defense, args.severity
        transform = lambda x: corrupt(x, kind, sev)  # noqa: E731
        split = f"{args.split}+{kind}{sev}"
    kw = dict(seed=cfg.seed, n_points=int(ev["n_points"]), grid=int(ev["grid"]), transform=transform,
              workers=workers)
    start = time.perf_counter()
    cells = []
    if args.cross_prompt:
        if delta is None:
            raise ContractError("--cross-prompt needs a UAP")
        craft_mode = uap_meta["config"].get("prompt_type", "point")
        for test_mode in ("point", "box"):
            cell = cross_prompt_eval(model, samples, delta, craft_mode, test_mode, **kw)
            log.info("%s: clean %.4f adv %.4f asr %.2f", cell.split, cell.clean_miou, cell.adv_miou, cell.asr)
            cells.append(cell)
    else:
        modes = MODES if args.mode == "all" else (args.mode,)
        for mode in modes:
            cell = evaluate(model, samples, delta, mode, split=split, **kw)
            log.info("%s/%s: clean %.4f adv %.4f asr %.2f", split, mode, cell.clean_miou, cell.adv_miou, cell.asr)
            cells.append(cell)
    report = EvalReport(cells=cells, seed=cfg.seed,
                        config={"run": cfg.to_dict(), "uap": uap_meta,
                                "defense": None if not args.defense else [args.defense, args.severity]},
                        wall_clock=time.perf_counter() - start if args.timing else None)
    out = args.out or os.path.join(cfg.section("paths")["reports"], "eval.json")
    emit_report(report, "json", out)
    log.info("wrote %s", out)


def cmd_report(args, cfg: C.RunConfig) -> None:
    reports = [load_report(_need(p)) for p in args.inputs]
    merged = EvalReport(cells=[c for r in reports for c in r.cells], seed=reports[0].seed,
                        config={"sources": [r.config for r in reports]})
    emit_report(merged, args.format, args.out)
    log.info("wrote %s", args.out)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segfool", description="Universal adversarial perturbations "
                                "against a prompt-guided segmenter.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config JSON (defaults apply when omitted)")

    sp = sub.add_parser("gen-data", help="write train/test scenes as PPM/PGM plus manifests")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-victim", help="train the segmentation victim")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_train_victim)

    sp = sub.add_parser("craft", help="craft a universal perturbation")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--victim")
    sp.add_argument("--method", choices=METHODS, default="darksam")
    sp.add_argument("--ablate", help="comma list of loss terms to disable: fe,bm,hfc,lfc (or A,B,C,D)")
    sp.add_argument("--prompt-type", choices=PROMPT_TYPES)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_craft)

    sp = sub.add_parser("eval", help="clean vs adversarial mIoU")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--victim")
    sp.add_argument("--uap")
    sp.add_argument("--clean", action="store_true", help="evaluate without a perturbation")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--mode", choices=MODES + ("all",), default="point")
    sp.add_argument("--cross-prompt", action="store_true")
    sp.add_argument("--defense", choices=("contrast", "brightness"))
    sp.add_argument("--severity", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--timing", action="store_true", help="record wall-clock time in the report")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("report", help="merge eval reports and render json/csv/svg")
    common(sp)
    sp.add_argument("--in", dest="inputs", nargs="+", required=True)
    sp.add_argument("--format", choices=("json", "csv", "svg"), default="json")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config)
    except (ContractError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        args.fn(args, cfg)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifact, FormatError, AttackDiverged, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
