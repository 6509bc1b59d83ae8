"""``prosanon`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
Diagnostics are a single line on stderr.  No output file contains paths,
timestamps or anything else that would differ between identical runs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .adversarial import (DESK_SCALE, AdvConfig, ModelError, load_checkpoint, save_checkpoint,
                          train, transform)
from .anonymize import PlanError, build_shuffle_plan, apply_shuffle
from .config import ADV_PRESETS, ConfigError, PipelineConfig, config_from_dict, load_config
from .core import (PROSODY_FEATURES, EmbeddingTable, ProsodyTable, TableFormatError,
                   load_embedding_table, load_prosody_table, save_embedding_table,
                   save_prosody_table)
from .evaluation import EvalError, EvalReport, evaluate, format_table
from .mi import (MiConfig, MiError, SelectionRule, SelectionSet, rank_dimensions, ranking_csv,
                 select_dimensions, summary)
from .prosody import AudioFormatError, extract_table, save_wav
from .synth import ATTRIBUTE_FEATURES, SynthSpecError, gen_audio, gen_embeddings, script_from_dicts

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_ERRORS = (TableFormatError, AudioFormatError, MiError, PlanError, ModelError, EvalError,
               SynthSpecError, OSError, json.JSONDecodeError, tomllib.TOMLDecodeError)

SHUFFLE_MODES = {"random": "random", "mi-ad": "mi_attribute", "mi-pros": "mi_prosody"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(value, flag: str, key: str):
    if value is None:
        raise UsageError(f"{flag} is required (or set {key} in the config)")
    return value


def _training_prosody(prosody: ProsodyTable, train_ids: Sequence[str]) -> ProsodyTable:
    """Normalize with bounds taken from the training rows only."""
    return prosody.aligned_to(train_ids).normalized()


# --- subcommands --------------------------------------------------------------


def cmd_prosody_extract(args, cfg: PipelineConfig) -> None:
    table = extract_table(args.wavs, cfg.prosody)
    if args.bounds:
        raw = json.loads(Path(args.bounds).read_text(encoding="utf-8"))
        try:
            bounds = {f: (float(raw[f][0]), float(raw[f][1])) for f in PROSODY_FEATURES}
        except (KeyError, TypeError, ValueError, IndexError):
            raise TableFormatError(f"{args.bounds}: malformed bounds file") from None
        table = table.normalized(bounds)
    elif args.normalize:
        table = table.normalized()
    save_prosody_table(table, args.out)


def _mi_config(cfg: PipelineConfig, seed: Optional[int]) -> MiConfig:
    return MiConfig(cfg.mi.k_neighbors, cfg.mi.noise_scale, cfg.mi.seed if seed is None else seed)


def _expand_targets(targets: Sequence[str]) -> List[str]:
    out = []
    for t in targets:
        for part in t.split(","):
            part = part.strip()
            if part == "pros":
                out.extend(ATTRIBUTE_FEATURES)
            elif part:
                out.append(part)
    unknown = [t for t in out if t not in ("attribute", "speaker", *PROSODY_FEATURES)]
    if unknown:
        raise UsageError(f"unknown MI target {unknown[0]!r}")
    return list(dict.fromkeys(out))


def _rule(kind: str, top_n: int, quantile: float) -> SelectionRule:
    if kind == "top_n":
        return SelectionRule.top_n(top_n)
    if kind == "top_quantile":
        return SelectionRule.top_quantile(quantile)
    raise UsageError(f"unknown selection rule {kind!r}")


def _rank(table: EmbeddingTable, targets: Sequence[str], prosody: Optional[ProsodyTable], mcfg: MiConfig):
    if prosody is not None:
        prosody = _training_prosody(prosody, table.sample_ids)
    return [rank_dimensions(table, t, mcfg, prosody) for t in targets]


def cmd_mi_rank(args, cfg: PipelineConfig) -> None:
    table = load_embedding_table(args.table)
    targets = _expand_targets(args.target or cfg.mi.targets)
    prosody = load_prosody_table(args.prosody) if args.prosody else None
    if prosody is None and any(t in PROSODY_FEATURES for t in targets):
        raise UsageError("prosody targets need --prosody")
    mcfg = _mi_config(cfg, args.seed)
    if args.k is not None:
        mcfg = replace(mcfg, k_neighbors=args.k)
    rankings = _rank(table, targets, prosody, mcfg)
    rule = _rule(args.rule or cfg.mi.rule, args.top_n if args.top_n is not None else cfg.mi.top_n,
                 args.quantile if args.quantile is not None else cfg.mi.quantile)
    selection = select_dimensions(rankings, rule)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in rankings:
        (out / f"ranking_{r.target_name}.csv").write_text(ranking_csv(r), encoding="utf-8", newline="\n")
    _dump_json(summary(rankings, selection), out / "selection.json")


def _load_selection(path) -> SelectionSet:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    data = data.get("selection", data)
    try:
        selected = tuple(int(d) for d in data["selected"])
    except (KeyError, TypeError, ValueError):
        raise PlanError(f"{path}: no 'selected' list in selection file") from None
    return SelectionSet(selected, None, tuple(data.get("provenance", ())))


def cmd_anon_shuffle(args, cfg: PipelineConfig) -> None:
    table = load_embedding_table(args.table)
    mode = SHUFFLE_MODES.get(args.mode, args.mode) if args.mode else cfg.shuffle.mode
    if mode not in SHUFFLE_MODES.values():
        raise UsageError(f"unknown shuffle mode {mode!r}")
    top_n = args.top_n if args.top_n is not None else cfg.shuffle.top_n
    seed = cfg.shuffle.seed if args.seed is None else args.seed
    if args.selection:
        selection = _load_selection(args.selection)
    elif mode == "random":
        selection = f"random:{top_n}"
    else:
        basis = load_embedding_table(args.rank_on) if args.rank_on else table
        if mode == "mi_attribute":
            targets, prosody = ["attribute"], None
        else:
            if not args.prosody:
                raise UsageError("--mode mi-pros needs --prosody")
            targets, prosody = list(ATTRIBUTE_FEATURES), load_prosody_table(args.prosody)
        rankings = _rank(basis, targets, prosody, _mi_config(cfg, args.seed))
        selection = select_dimensions(rankings, SelectionRule.top_n(top_n))
    plan = build_shuffle_plan(table, selection, seed, mode)
    save_embedding_table(apply_shuffle(table, plan), args.out)
    if args.plan:
        plan.save(args.plan)


def _adv_config(args, cfg: PipelineConfig):
    adv = cfg.adversarial
    if args.preset:
        # a preset flag resets every knob a preset controls, then applies its own values
        base = AdvConfig()
        adv = replace(adv, **{**{k: getattr(base, k) for k in DESK_SCALE}, **ADV_PRESETS[args.preset]})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.lambdas:
        over["lambdas"] = tuple(args.lambdas)
    if args.spk_features:
        over["spk_features"] = tuple(f for f in args.spk_features.split(",") if f)
    if args.max_epochs is not None:
        over["max_epochs"] = args.max_epochs
    try:
        return replace(adv, **over)
    except ModelError as exc:
        raise UsageError(str(exc)) from None


def cmd_anon_train_adv(args, cfg: PipelineConfig) -> None:
    adv = _adv_config(args, cfg)
    train_path = _need(args.train or cfg.data.train, "--train", "data.train")
    val_path = _need(args.val or cfg.data.val, "--val", "data.val")
    pros_path = _need(args.prosody or cfg.data.prosody, "--prosody", "data.prosody")
    tr, va = load_embedding_table(train_path), load_embedding_table(val_path)
    prosody = load_prosody_table(pros_path)
    ptr = _training_prosody(prosody, tr.sample_ids)
    pva = prosody.aligned_to(va.sample_ids).normalized(ptr.bounds)
    model, log = train(tr, ptr, va, pva, adv)
    save_checkpoint(model, adv, log, args.out)
    if args.log:
        _dump_json(log, args.log)


def cmd_anon_apply(args, cfg: PipelineConfig) -> None:
    model, _ = load_checkpoint(args.model)
    save_embedding_table(transform(model, load_embedding_table(args.table)), args.out)


def cmd_eval(args, cfg: PipelineConfig) -> None:
    sec = cfg.eval
    if args.seed is not None:
        sec = replace(sec, seed=args.seed)
    if args.resamples is not None:
        sec = replace(sec, resamples=args.resamples)
    train_path = _need(args.train or cfg.data.train, "--train", "data.train")
    test_path = _need(args.test or cfg.data.test, "--test", "data.test")
    report = evaluate(load_embedding_table(train_path), load_embedding_table(test_path),
                      args.system or sec.system, args.dataset or sec.dataset, sec.to_eval_config())
    report.save(args.report)
    print(format_table([report]), end="")


def _synth_spec(args, cfg: PipelineConfig):
    spec = cfg.synth
    if args.spec:
        raw = tomllib.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = config_from_dict({"synth": raw.get("synth", raw)}).synth
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    return spec


def cmd_synth_embeddings(args, cfg: PipelineConfig) -> None:
    corpus = gen_embeddings(_synth_spec(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        table, _ = corpus.split(name)
        save_embedding_table(table, out / f"{name}.csv")
    save_prosody_table(corpus.prosody, out / "prosody.csv")
    _dump_json(corpus.truth, out / "truth.json")


def cmd_synth_audio(args, cfg: PipelineConfig) -> None:
    raw = tomllib.loads(Path(args.script).read_text(encoding="utf-8"))
    segments = raw.get("segment")
    if not isinstance(segments, list):
        raise SynthSpecError("audio script needs [[segment]] entries")
    clip, truth = gen_audio(script_from_dicts(segments), args.sample_rate)
    save_wav(clip, args.out)
    if args.truth:
        _dump_json(truth, args.truth)


def _load_report(path) -> EvalReport:
    try:
        return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, TypeError) as exc:
        raise EvalError(f"{path}: not an evaluation report ({exc})") from None


def cmd_report(args, cfg: PipelineConfig) -> None:
    reports = [_load_report(p) for p in args.reports]
    print(format_table(reports), end="")
    if args.json:
        grouped = {}
        for r in reports:
            grouped.setdefault(r.dataset, []).append(r.to_json())
        _dump_json({"datasets": grouped}, args.json)


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline TOML; flags override its values")

    seeded = _Parser(add_help=False)
    seeded.add_argument("--seed", type=int, help="overrides the seed of this stage")

    p = _Parser(prog="prosanon", description="Anonymize speaker-embedding tables and measure the result.")
    p.add_argument("--version", action="version", version=f"prosanon {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    pros = sub.add_parser("prosody", help="prosody feature extraction").add_subparsers(
        dest="action", metavar="ACTION", parser_class=_Parser)
    pros.required = True
    x = pros.add_parser("extract", parents=[common], help="extract prosody features from WAV files")
    x.add_argument("wavs", nargs="+", help="mono 16-bit WAV files; sample ids are the file stems")
    x.add_argument("--out", required=True, help="prosody CSV to write")
    x.add_argument("--normalize", action="store_true", help="add [0,1] columns using bounds from these files")
    x.add_argument("--bounds", help="bounds JSON from a training split to normalize with")
    x.set_defaults(func=cmd_prosody_extract)

    mi = sub.add_parser("mi", help="mutual-information ranking").add_subparsers(
        dest="action", metavar="ACTION", parser_class=_Parser)
    mi.required = True
    r = mi.add_parser("rank", parents=[common, seeded], help="rank embedding dims by MI with targets")
    r.add_argument("--table", required=True, help="embedding CSV")
    r.add_argument("--prosody", help="prosody CSV (needed for prosody targets)")
    r.add_argument("--target", action="append",
                   help="attribute, speaker, a prosody feature, or 'pros' for spr,nsyll,pnum,plength; repeatable")
    r.add_argument("--rule", choices=("top_n", "top_quantile"))
    r.add_argument("--top-n", type=int)
    r.add_argument("--quantile", type=float)
    r.add_argument("--k", type=int, help="nearest neighbours")
    r.add_argument("--out-dir", required=True, help="directory for ranking_<target>.csv and selection.json")
    r.set_defaults(func=cmd_mi_rank)

    anon = sub.add_parser("anon", help="anonymization").add_subparsers(
        dest="action", metavar="ACTION", parser_class=_Parser)
    anon.required = True
    s = anon.add_parser("shuffle", parents=[common, seeded], help="shuffle non-selected dims across rows")
    s.add_argument("--table", required=True, help="embedding CSV to anonymize")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=sorted(SHUFFLE_MODES))
    s.add_argument("--top-n", type=int, help="dims kept per ranking (default 50)")
    s.add_argument("--selection", help="selection.json from 'mi rank'; skips ranking")
    s.add_argument("--rank-on", help="embedding CSV to rank on (default: the input table)")
    s.add_argument("--prosody", help="prosody CSV for --mode mi-pros")
    s.add_argument("--plan", help="write the shuffle plan JSON here")
    s.set_defaults(func=cmd_anon_shuffle)

    t = anon.add_parser("train-adv", parents=[common, seeded], help="train the adversarial residual map")
    t.add_argument("--train")
    t.add_argument("--val")
    t.add_argument("--prosody", help="prosody CSV covering the train and val rows")
    t.add_argument("--out", required=True, help="checkpoint JSON")
    t.add_argument("--log", help="write the full per-epoch log here")
    t.add_argument("--preset", choices=sorted(ADV_PRESETS))
    t.add_argument("--lambda", dest="lambdas", type=float, action="append", help="repeat once per speaker feature")
    t.add_argument("--spk-features", help="comma-separated speaker prosody features")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_anon_train_adv)

    a = anon.add_parser("apply", parents=[common], help="map a table through a trained checkpoint")
    a.add_argument("--model", required=True)
    a.add_argument("--table", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_anon_apply)

    e = sub.add_parser("eval", parents=[common, seeded], help="attribute F1, speaker F1 and EER")
    e.add_argument("--train")
    e.add_argument("--test")
    e.add_argument("--report", required=True, help="report JSON to write")
    e.add_argument("--system")
    e.add_argument("--dataset")
    e.add_argument("--resamples", type=int, help="bootstrap resamples")
    e.set_defaults(func=cmd_eval)

    syn = sub.add_parser("synth", help="synthetic data").add_subparsers(
        dest="action", metavar="ACTION", parser_class=_Parser)
    syn.required = True
    se = syn.add_parser("embeddings", parents=[common, seeded], help="planted-structure embedding corpus")
    se.add_argument("--spec", help="TOML with SynthSpec keys (top level or under [synth])")
    se.add_argument("--out", required=True, help="output directory")
    se.set_defaults(func=cmd_synth_embeddings)
    sa = syn.add_parser("audio", parents=[common], help="clip with known pitch, syllables and pauses")
    sa.add_argument("--script", required=True, help="TOML with [[segment]] entries")
    sa.add_argument("--out", required=True, help="WAV to write")
    sa.add_argument("--sample-rate", type=int, default=16000)
    sa.add_argument("--truth", help="write the construction truth JSON here")
    sa.set_defaults(func=cmd_synth_audio)

    rep = sub.add_parser("report", parents=[common], help="comparison table from report JSONs")
    rep.add_argument("reports", nargs="+")
    rep.add_argument("--json", help="merged machine-readable output")
    rep.set_defaults(func=cmd_report)
    return p


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        args.func(args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"prosanon: error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"prosanon: error: {_one_line(exc)}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
