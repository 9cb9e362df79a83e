"""Command-line entry point: dataset generation, training, evaluation.

Single binary, subcommand style. Every run is driven by a JSON config
(--config PATH) or the built-in scaled-size preset (--desk); --seed
restricts a run to one seed, --out redirects the artifact directory, and
--workers fans sweep jobs across processes. All randomness flows from the
seeds in the config; wall-clock never reaches an artifact, so rerunning a
command with the same config rewrites identical bytes.

Exit code 0 means every requested artifact was written. Any failure prints
one structured JSON object on stderr, for example:

    {"error": {"type": "ConfigError", "message": "...", "pointer": "/seeds"}}
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from .cohort import label as cohort_label
from .evaluation import (
    OUTCOME_NAMES,
    all_profiles,
    classify_outcomes,
    expected_auc,
    idealized_incomplete_scorer,
)
from .kernelscore import read_pgm, select_softest, softness_score
from .runs import (
    ConfigError,
    MissingArtifactError,
    config_from_dict,
    desk_config_dict,
    load_config,
    run_eval,
    run_finetune,
    run_gen,
    run_pretrain_jepa,
    run_pretrain_sup,
    run_sweep,
)


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "out", None):
        out["out_dir"] = str(Path(args.out).resolve())
    if getattr(args, "seed", None) is not None:
        out["seeds"] = [args.seed]
    return out


def _resolve_config(args) -> tuple:
    """(RunConfig, config_dict, base_dir) from --config or --desk."""
    if args.desk:
        obj = desk_config_dict()
        obj.update(_overrides(args))
        base = Path.cwd()
        return config_from_dict(obj, base_dir=base), obj, base
    if not args.config:
        raise ConfigError("", "either --config PATH or --desk is required")
    path = Path(args.config)
    if not path.exists():
        raise MissingArtifactError(path)
    obj = json.loads(path.read_text())
    if not isinstance(obj, dict):
        raise ConfigError("", "config root must be an object")
    obj.update(_overrides(args))
    base = path.parent
    return config_from_dict(obj, base_dir=base), obj, base


def cmd_gen(args) -> int:
    cfg, _obj, _base = _resolve_config(args)
    checksums = run_gen(cfg)
    for name in cfg.datasets:
        print(f"{name}: n={cfg.datasets[name].n} mixing_checksum={checksums[name]}")
    return 0


def cmd_pretrain_jepa(args) -> int:
    cfg, _obj, _base = _resolve_config(args)
    for path in run_pretrain_jepa(cfg):
        print(path)
    return 0


def cmd_pretrain_sup(args) -> int:
    cfg, _obj, _base = _resolve_config(args)
    for path in run_pretrain_sup(cfg):
        print(path)
    return 0


def cmd_finetune(args) -> int:
    cfg, _obj, _base = _resolve_config(args)
    for path in run_finetune(cfg):
        print(path)
    return 0


def cmd_eval(args) -> int:
    cfg, _obj, _base = _resolve_config(args)
    report = run_eval(cfg)
    print("strategy,f_size,median_auc_s_test,median_auc_t")
    for row in report["medians"]:
        print(f"{row['strategy']},{row['f_size']},"
              f"{row['median_auc_s_test']:.4f},{row['median_auc_t']:.4f}")
    print(f"written: {cfg.out_dir / 'eval' / 'table.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg, obj, base = _resolve_config(args)
    report = run_sweep(cfg, obj, base, workers=args.workers)
    wil = report.wilcoxon
    print(f"wilcoxon: W={wil.w} p_two_sided={wil.p_two_sided:.6f} "
          f"n_effective={wil.n_effective} method={wil.method}")
    for kind, rho in sorted(report.spearman_by_strategy.items()):
        print(f"spearman[{kind}] = {rho:.4f}")
    print(f"written: {cfg.out_dir / 'sweep' / 'curves.csv'}")
    return 0


def _truth_table_scorer(path: str):
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(p)
    table = json.loads(p.read_text())
    if not isinstance(table, list) or len(table) != 16 or any(
            not isinstance(v, (int, float)) for v in table):
        raise ConfigError("", "scorer file must be a JSON list of 16 numbers "
                              "(profile order: index = g1*8 + g2*4 + d1*2 + d2)")

    def scorer(profile):
        i = profile.g1 * 8 + profile.g2 * 4 + profile.d1 * 2 + profile.d2
        return table[i]

    return scorer


def cmd_oracle(args) -> int:
    scorer = _truth_table_scorer(args.scorer) if args.scorer else idealized_incomplete_scorer
    frac = Fraction(expected_auc(scorer, cohort_label))
    print(f"{frac.numerator}/{frac.denominator} = {float(frac):.6f}")
    table = classify_outcomes(all_profiles(), scorer, cohort_label)
    counts = table.counts
    print("outcomes: " + " ".join(f"{name}={counts[name]}" for name in OUTCOME_NAMES))
    for name in OUTCOME_NAMES:
        profiles = table.profiles_with(name)
        if profiles:
            listed = " ".join(str(p) for p in profiles)
            print(f"  {name}: {listed}")
    return 0


def cmd_kernel_score(args) -> int:
    scores = {}
    images = []
    for path in args.images:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(p)
        img = read_pgm(p)
        images.append(img)
        scores[str(p)] = softness_score(img).value
    for path, value in scores.items():
        print(f"{path}: {value:.6f}")
    if len(images) > 1:
        softest = select_softest(images)
        print(f"softest: {args.images[softest]}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"scores": scores}
        if len(images) > 1:
            payload["softest"] = str(args.images[select_softest(images)])
        (out / "kernel_scores.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _add_config_flags(sub):
    sub.add_argument("--config", metavar="PATH", help="JSON run config")
    sub.add_argument("--desk", action="store_true",
                     help="use the built-in scaled-size preset")
    sub.add_argument("--out", metavar="DIR", help="override the output directory")
    sub.add_argument("--seed", type=int, metavar="N",
                     help="restrict the run to a single seed")
    sub.add_argument("--workers", type=int, default=1, metavar="N",
                     help="process count for sweep jobs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmjepa",
        description="Multimodal masked-latent pretraining benchmark harness.")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, handler, desc in [
        ("gen", cmd_gen, "generate the configured datasets"),
        ("pretrain-jepa", cmd_pretrain_jepa, "masked latent pretraining on U"),
        ("pretrain-sup", cmd_pretrain_sup, "supervised training on S"),
        ("finetune", cmd_finetune, "train every configured strategy on F"),
        ("eval", cmd_eval, "score trained arms on S-test and T"),
        ("sweep", cmd_sweep, "paired finetune-size sweep with Wilcoxon test"),
    ]:
        sub = subs.add_parser(name, help=desc)
        _add_config_flags(sub)
        sub.set_defaults(handler=handler)

    oracle = subs.add_parser("oracle", help="exact expected-AUC for a truth-table scorer")
    oracle.add_argument("--scorer", metavar="PATH",
                        help="JSON list of 16 scores (defaults to the size+expression rule)")
    oracle.set_defaults(handler=cmd_oracle)

    kernel = subs.add_parser("kernel-score", help="spectral softness of PGM images")
    kernel.add_argument("images", nargs="+", metavar="PGM")
    kernel.add_argument("--out", metavar="DIR", help="also write kernel_scores.json here")
    kernel.set_defaults(handler=cmd_kernel_score)
    return parser


_ERROR_EXTRAS = {
    ConfigError: lambda e: {"pointer": e.pointer},
    MissingArtifactError: lambda e: {"path": e.path},
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        payload = {"type": type(exc).__name__, "message": str(exc)}
        for cls, extra in _ERROR_EXTRAS.items():
            if isinstance(exc, cls):
                payload.update(extra(exc))
        print(json.dumps({"error": payload}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
