"""Experiment orchestration: configs, artifact layout, and run stages.

A run directory is laid out as

    out/
      datasets/<name>/manifest.json + subjects.bin
      pretrain/jepa/seed<k>/checkpoint_*.mjpk + train_log.csv
      pretrain/sup/seed<k>/model.mjpk + train_log.csv + metrics.json
      finetune/<strategy>/f<size>/seed<k>/model.mjpk + train_log.csv
      eval/table.csv + report.json
      sweep/curves.csv + report.json

Every stage is a pure function of (config, artifacts on disk); no artifact
ever contains wall-clock data, so reruns with the same config and seeds are
byte-identical. Stages raise MissingArtifactError naming the exact path
when a prerequisite has not been produced yet, and ConfigError with a JSON
pointer when the config file is malformed.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cohort import (
    Dataset,
    DatasetSpec,
    MixingMatrix,
    generate_dataset,
    load_dataset,
    save_dataset,
    usable_mixing_matrix,
)
from .evaluation import EvalReport, auc, sweep_compare
from .finetune import (
    JEPA_U_THEN_F,
    STRATEGY_KINDS,
    SUPERVISED_S_THEN_F,
    Strategy,
    SupervisedConfig,
    finetune_from,
    score_dataset,
    supervised_train,
)
from .jepa import JepaConfig, load_pretrain_checkpoint, pretrain
from .model import Model, ModelConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Config schema violation; carries a JSON pointer to the bad spot."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing required artifact: {self.path}")


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    experiment: str
    seeds: list[int]
    out_dir: Path
    mixing_seed: int
    datasets: dict[str, DatasetSpec]
    model: ModelConfig
    jepa: JepaConfig
    pretrain_sup: SupervisedConfig
    finetune: SupervisedConfig
    strategies: list[Strategy]
    sweep_f_sizes: list[int]
    sweep_strategies: tuple[str, str]
    sweep_steps: int


def _expect(obj, key, types, pointer, required=True, default=None):
    if key not in obj:
        if required:
            raise ConfigError(f"{pointer}/{key}", "required field missing")
        return default
    val = obj[key]
    if not isinstance(val, types) or isinstance(val, bool) and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        if isinstance(types, tuple):
            tname = "/".join(t.__name__ for t in types)
        else:
            tname = types.__name__
        raise ConfigError(f"{pointer}/{key}", f"expected {tname}, got {type(val).__name__}")
    return val


def _int_list(obj, key, pointer, required=True, default=None):
    val = _expect(obj, key, list, pointer, required, default)
    if val is default and not required:
        return default
    for i, v in enumerate(val):
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConfigError(f"{pointer}/{key}/{i}", f"expected int, got {type(v).__name__}")
    return list(val)


_DATASET_FIELDS = {
    "kind": str,
    "n": int,
    "complete": bool,
    "labeled": bool,
    "beta": (int, float),
    "m": int,
    "image_size": int,
    "cohort_seed": int,
    "n_frames": int,
    "t_max": (int, float),
    "p_snp": (int, float),
    "noise_sigma": (int, float),
    "expr_missing_rate": (int, float),
    "background": str,
}

_REQUIRED_DATASET_FIELDS = ("kind", "n", "complete", "labeled", "cohort_seed")


def _dataset_spec(name: str, obj: dict, pointer: str) -> DatasetSpec:
    if not isinstance(obj, dict):
        raise ConfigError(pointer, f"expected object, got {type(obj).__name__}")
    for key in obj:
        if key not in _DATASET_FIELDS:
            raise ConfigError(f"{pointer}/{key}", "unknown field")
    for key in _REQUIRED_DATASET_FIELDS:
        _expect(obj, key, _DATASET_FIELDS[key], pointer)
    for key, types in _DATASET_FIELDS.items():
        if key in obj:
            _expect(obj, key, types, pointer)
    try:
        return DatasetSpec(name=name, **obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(pointer, str(exc)) from exc


def _sub_config(obj, key, pointer, builder):
    sub = _expect(obj, key, dict, pointer, required=False, default={})
    try:
        return builder(sub)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{pointer}/{key}", str(exc)) from exc


def _strategy(obj: dict, pointer: str) -> Strategy:
    if not isinstance(obj, dict):
        raise ConfigError(pointer, f"expected object, got {type(obj).__name__}")
    kind = _expect(obj, "kind", str, pointer)
    if kind not in STRATEGY_KINDS:
        raise ConfigError(f"{pointer}/kind", f"unknown strategy kind {kind!r}")
    f_size = _expect(obj, "f_size", int, pointer)
    enc_lr = float(_expect(obj, "encoder_lr", (int, float), pointer, required=False, default=1e-3))
    head_lr = float(_expect(obj, "head_lr", (int, float), pointer, required=False, default=1e-3))
    extra = set(obj) - {"kind", "f_size", "encoder_lr", "head_lr"}
    if extra:
        raise ConfigError(f"{pointer}/{sorted(extra)[0]}", "unknown field")
    try:
        # init_checkpoint paths are resolved per seed at run time
        placeholder = "<resolved at run time>" if kind == JEPA_U_THEN_F else None
        return Strategy(kind=kind, f_size=f_size, init_checkpoint=placeholder,
                        encoder_lr=enc_lr, head_lr=head_lr)
    except ValueError as exc:
        raise ConfigError(pointer, str(exc)) from exc


def config_from_dict(obj: dict, base_dir: Path | str = ".") -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("", f"config root must be an object, got {type(obj).__name__}")
    version = _expect(obj, "schema_version", int, "")
    if version != SCHEMA_VERSION:
        raise ConfigError("/schema_version", f"unsupported version {version}; this build reads {SCHEMA_VERSION}")
    experiment = _expect(obj, "experiment", str, "")
    seeds = _int_list(obj, "seeds", "")
    if not seeds:
        raise ConfigError("/seeds", "at least one seed required")
    out_dir = Path(base_dir) / _expect(obj, "out_dir", str, "")
    mixing_seed = _expect(obj, "mixing_seed", int, "", required=False, default=5)

    ds_obj = _expect(obj, "datasets", dict, "")
    datasets = {name: _dataset_spec(name, sub, f"/datasets/{name}") for name, sub in ds_obj.items()}
    seen: dict[int, str] = {}
    for name, spec in datasets.items():
        if spec.cohort_seed in seen:
            raise ConfigError(
                f"/datasets/{name}/cohort_seed",
                f"cohort_seed {spec.cohort_seed} collides with dataset {seen[spec.cohort_seed]!r}",
            )
        seen[spec.cohort_seed] = name

    model = _sub_config(obj, "model", "", ModelConfig.from_dict)
    jepa = _sub_config(obj, "jepa", "", lambda d: JepaConfig(**d))
    pre_sup = _sub_config(obj, "pretrain_sup", "", lambda d: SupervisedConfig(**d))
    fine = _sub_config(obj, "finetune", "", lambda d: SupervisedConfig(**d))

    strat_list = _expect(obj, "strategies", list, "", required=False, default=[])
    strategies = [_strategy(s, f"/strategies/{i}") for i, s in enumerate(strat_list)]

    sweep = _expect(obj, "sweep", dict, "", required=False, default={})
    sweep_sizes = _int_list(sweep, "f_sizes", "/sweep", required=False,
                            default=[50, 100, 250, 500, 1000, 2000, 4000])
    sweep_strats = sweep.get("strategies", [SUPERVISED_S_THEN_F, JEPA_U_THEN_F])
    if (not isinstance(sweep_strats, list) or len(sweep_strats) != 2
            or any(s not in STRATEGY_KINDS for s in sweep_strats)):
        raise ConfigError("/sweep/strategies", "expected a list of exactly two known strategy kinds")
    sweep_steps = _expect(sweep, "total_steps", int, "/sweep", required=False, default=800)

    known = {"schema_version", "experiment", "seeds", "out_dir", "mixing_seed",
             "datasets", "model", "jepa", "pretrain_sup", "finetune",
             "strategies", "sweep"}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"/{sorted(extra)[0]}", "unknown field")

    return RunConfig(
        experiment=experiment,
        seeds=seeds,
        out_dir=out_dir,
        mixing_seed=mixing_seed,
        datasets=datasets,
        model=model,
        jepa=jepa,
        pretrain_sup=pre_sup,
        finetune=fine,
        strategies=strategies,
        sweep_f_sizes=sweep_sizes,
        sweep_strategies=(sweep_strats[0], sweep_strats[1]),
        sweep_steps=sweep_steps,
    )


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON in {path}: {exc}") from exc
    if overrides:
        obj = {**obj, **overrides}
    return config_from_dict(obj, base_dir=path.parent)


def desk_config_dict(out_dir: str = "desk_run") -> dict:
    """Scaled-size preset: everything the desk tables and sweep need."""
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": "desk",
        "seeds": [0, 1, 2],
        "out_dir": out_dir,
        "mixing_seed": 5,
        "datasets": {
            "U": {"kind": "U", "n": 8000, "complete": True, "labeled": False,
                  "beta": 0.99, "cohort_seed": 101},
            "S": {"kind": "S", "n": 8000, "complete": False, "labeled": True,
                  "beta": 0.99, "cohort_seed": 102},
            "S-test": {"kind": "S", "n": 1000, "complete": False, "labeled": True,
                       "beta": 0.99, "cohort_seed": 103},
            "F": {"kind": "F", "n": 4000, "complete": True, "labeled": True,
                  "beta": 0.99, "cohort_seed": 104},
            "T": {"kind": "T", "n": 2000, "complete": True, "labeled": True,
                  "beta": 0.99, "cohort_seed": 105},
        },
        "model": {"d_model": 64},
        "jepa": {"batch_size": 128, "total_steps": 1500, "lr_max": 1e-3,
                 "checkpoint_every": 500},
        "pretrain_sup": {"total_steps": 800, "batch_size": 128,
                         "encoder_lr": 3e-3, "head_lr": 3e-3},
        "finetune": {"total_steps": 2000, "batch_size": 128},
        "strategies": [
            {"kind": "SUPERVISED_S_THEN_F", "f_size": 4000,
             "encoder_lr": 1e-3, "head_lr": 3e-3},
            {"kind": "JEPA_U_THEN_F", "f_size": 4000,
             "encoder_lr": 3e-3, "head_lr": 3e-3},
            {"kind": "SUPERVISED_F_ONLY", "f_size": 4000,
             "encoder_lr": 3e-3, "head_lr": 3e-3},
            {"kind": "IMAGING_ONLY", "f_size": 4000,
             "encoder_lr": 3e-3, "head_lr": 3e-3},
            {"kind": "EXPRESSION_ONLY", "f_size": 4000,
             "encoder_lr": 3e-3, "head_lr": 3e-3},
        ],
        "sweep": {"f_sizes": [50, 100, 250, 500, 1000, 2000, 4000],
                  "strategies": ["SUPERVISED_S_THEN_F", "JEPA_U_THEN_F"],
                  "total_steps": 800},
    }


# ---------------------------------------------------------------------------
# artifact paths
# ---------------------------------------------------------------------------

def dataset_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.out_dir / "datasets" / name


def jepa_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out_dir / "pretrain" / "jepa" / f"seed{seed}"


def jepa_checkpoint_path(cfg: RunConfig, seed: int) -> Path:
    return jepa_dir(cfg, seed) / f"checkpoint_{cfg.jepa.total_steps:07d}.mjpk"


def sup_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.out_dir / "pretrain" / "sup" / f"seed{seed}"


def finetune_dir(cfg: RunConfig, kind: str, f_size: int, seed: int) -> Path:
    return cfg.out_dir / "finetune" / kind / f"f{f_size}" / f"seed{seed}"


def _load_dataset_checked(cfg: RunConfig, name: str) -> Dataset:
    if name not in cfg.datasets:
        raise ConfigError(f"/datasets/{name}", "dataset not defined in config")
    path = dataset_dir(cfg, name)
    if not (path / "manifest.json").exists():
        raise MissingArtifactError(path / "manifest.json")
    return load_dataset(path)


def subset_dataset(ds: Dataset, k: int) -> Dataset:
    """First k subjects (subjects are iid by construction, so a prefix is
    an unbiased subsample); keeps the mixing checksum."""
    if k > len(ds):
        raise ValueError(f"requested subset of {k} from dataset of {len(ds)}")
    if k == len(ds):
        return ds
    spec = replace(ds.spec, n=k)
    return Dataset(spec, ds.subjects[:k], ds.mixing_checksum)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_gen(cfg: RunConfig) -> dict[str, str]:
    """Generate every configured dataset with one shared mixing matrix.

    Returns {name: manifest checksum}; rerunning writes identical bytes.
    """
    m = max((spec.m for spec in cfg.datasets.values()), default=128)
    mixing = usable_mixing_matrix(m, cfg.mixing_seed)
    checksums = {}
    for name, spec in cfg.datasets.items():
        ds = generate_dataset(spec, mixing)
        save_dataset(ds, dataset_dir(cfg, name))
        checksums[name] = ds.mixing_checksum
    return checksums


def run_pretrain_jepa(cfg: RunConfig, seeds: list[int] | None = None) -> list[Path]:
    ds_u = _load_dataset_checked(cfg, "U")
    written = []
    for seed in seeds if seeds is not None else cfg.seeds:
        model = Model(cfg.model, seed=seed)
        jcfg = replace(cfg.jepa, seed=seed)
        out = jepa_dir(cfg, seed)
        pretrain(ds_u, model, jcfg, out_dir=out)
        written.append(jepa_checkpoint_path(cfg, seed))
    return written


def run_pretrain_sup(cfg: RunConfig, seeds: list[int] | None = None) -> list[Path]:
    """Supervised training on the incomplete set S, one model per seed."""
    ds_s = _load_dataset_checked(cfg, "S")
    written = []
    for seed in seeds if seeds is not None else cfg.seeds:
        model = Model(cfg.model, seed=seed)
        scfg = replace(cfg.pretrain_sup, seed=seed)
        fit = supervised_train(ds_s, model, scfg)
        out = sup_dir(cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
        meta = {
            "kind": "supervised_fit",
            "seed": seed,
            "config": {k: getattr(scfg, k) for k in scfg.__dataclass_fields__},
            "model_config": cfg.model.to_dict(),
            "best_val_auc": fit.best_val_auc,
            "selected_step": fit.selected_step,
        }
        path = out / "model.mjpk"
        save_checkpoint(path, arrays, meta)
        (out / "train_log.csv").write_text(
            "step,loss,encoder_lr,head_lr\n"
            + "".join(f"{r.step},{r.loss!r},{r.encoder_lr!r},{r.head_lr!r}\n" for r in fit.train_log)
        )
        (out / "metrics.json").write_text(json.dumps(
            {"best_val_auc": fit.best_val_auc, "selected_step": fit.selected_step},
            sort_keys=True, indent=2) + "\n")
        written.append(path)
    return written


def load_sup_state(cfg: RunConfig, seed: int) -> dict[str, np.ndarray]:
    path = sup_dir(cfg, seed) / "model.mjpk"
    if not path.exists():
        raise MissingArtifactError(path)
    arrays, _meta = load_checkpoint(path)
    return {name[len("param/"):]: arr for name, arr in arrays.items() if name.startswith("param/")}


def load_jepa_state(cfg: RunConfig, seed: int) -> dict[str, np.ndarray]:
    path = jepa_checkpoint_path(cfg, seed)
    if not path.exists():
        raise MissingArtifactError(path)
    model, _target, _jcfg, _step = load_pretrain_checkpoint(path)
    return model.state_arrays()


def _resolve_init(cfg: RunConfig, kind: str, seed: int):
    if kind == SUPERVISED_S_THEN_F:
        return load_sup_state(cfg, seed)
    if kind == JEPA_U_THEN_F:
        return load_jepa_state(cfg, seed)
    return None


def _run_one_finetune(cfg: RunConfig, strat: Strategy, seed: int, total_steps: int | None = None) -> tuple[Model, Path]:
    ds_f = _load_dataset_checked(cfg, "F")
    ds = subset_dataset(ds_f, strat.f_size)
    init = _resolve_init(cfg, strat.kind, seed)
    fcfg = replace(cfg.finetune, seed=seed,
                   **({"total_steps": total_steps} if total_steps else {}))
    if strat.kind == JEPA_U_THEN_F:
        strat = replace(strat, init_checkpoint=str(jepa_checkpoint_path(cfg, seed)))
    model, fit = finetune_from(init, cfg.model, ds, strat, fcfg)
    out = finetune_dir(cfg, strat.kind, strat.f_size, seed)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    meta = {
        "kind": "finetuned_fit",
        "strategy": strat.kind,
        "f_size": strat.f_size,
        "seed": seed,
        "best_val_auc": fit.best_val_auc,
        "selected_step": fit.selected_step,
        "model_config": cfg.model.to_dict(),
    }
    path = out / "model.mjpk"
    save_checkpoint(path, arrays, meta)
    (out / "train_log.csv").write_text(fit.log_csv())
    return model, path


def run_finetune(cfg: RunConfig, seeds: list[int] | None = None) -> list[Path]:
    written = []
    for seed in seeds if seeds is not None else cfg.seeds:
        for strat in cfg.strategies:
            _model, path = _run_one_finetune(cfg, strat, seed)
            written.append(path)
    return written


def _load_finetuned(cfg: RunConfig, kind: str, f_size: int, seed: int) -> Model:
    path = finetune_dir(cfg, kind, f_size, seed) / "model.mjpk"
    if not path.exists():
        raise MissingArtifactError(path)
    arrays, meta = load_checkpoint(path)
    model = Model(ModelConfig.from_dict(meta["model_config"]), seed=0)
    model.load_state_arrays({name[len("param/"):]: arr for name, arr in arrays.items()})
    return model


SUP_ON_S = "SUP_ON_S"


def run_eval(cfg: RunConfig) -> dict:
    """Score every trained arm on S-test and T; emit the results table.

    Rows cover the supervised-on-S model plus every configured finetune
    strategy, one row per seed, with per-strategy medians alongside.
    """
    ds_stest = _load_dataset_checked(cfg, "S-test")
    ds_t = _load_dataset_checked(cfg, "T")
    rows = []

    for seed in cfg.seeds:
        state = load_sup_state(cfg, seed)
        model = Model(cfg.model, seed=0)
        model.load_state_arrays(state)
        filt = None
        rows.append({
            "strategy": SUP_ON_S, "f_size": 0, "seed": seed,
            "auc_s_test": auc(score_dataset(model, ds_stest, filt)),
            "auc_t": auc(score_dataset(model, ds_t, filt)),
        })

    for strat in cfg.strategies:
        for seed in cfg.seeds:
            model = _load_finetuned(cfg, strat.kind, strat.f_size, seed)
            filt = strat.modality_filter
            rows.append({
                "strategy": strat.kind, "f_size": strat.f_size, "seed": seed,
                "auc_s_test": auc(score_dataset(model, ds_stest, filt)),
                "auc_t": auc(score_dataset(model, ds_t, filt)),
            })

    medians = {}
    for row in rows:
        medians.setdefault((row["strategy"], row["f_size"]), []).append(row)
    median_rows = []
    for (kind, f_size), group in sorted(medians.items()):
        median_rows.append({
            "strategy": kind,
            "f_size": f_size,
            "median_auc_s_test": float(np.median([r["auc_s_test"] for r in group])),
            "median_auc_t": float(np.median([r["auc_t"] for r in group])),
        })

    out = cfg.out_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = ["strategy,f_size,seed,auc_s_test,auc_t"]
    for r in sorted(rows, key=lambda r: (r["strategy"], r["f_size"], r["seed"])):
        csv_lines.append(f"{r['strategy']},{r['f_size']},{r['seed']},{r['auc_s_test']!r},{r['auc_t']!r}")
    (out / "table.csv").write_text("\n".join(csv_lines) + "\n")
    report = {"experiment": cfg.experiment, "rows": rows, "medians": median_rows}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_job(payload: dict) -> tuple[tuple[str, int, int], float]:
    """One (strategy, f_size, seed) training job; safe to run in a worker."""
    cfg = config_from_dict(payload["config"], base_dir=payload["base_dir"])
    kind = payload["kind"]
    f_size = payload["f_size"]
    seed = payload["seed"]
    base = next((s for s in cfg.strategies if s.kind == kind), None)
    strat = Strategy(
        kind=kind, f_size=f_size,
        init_checkpoint="<resolved at run time>" if kind == JEPA_U_THEN_F else None,
        encoder_lr=base.encoder_lr if base else 1e-3,
        head_lr=base.head_lr if base else 1e-3,
    )
    model, _path = _run_one_finetune(cfg, strat, seed, total_steps=cfg.sweep_steps)
    ds_t = _load_dataset_checked(cfg, "T")
    return (kind, f_size, seed), auc(score_dataset(model, ds_t, strat.modality_filter))


def run_sweep(cfg: RunConfig, config_dict: dict, base_dir, workers: int = 1) -> EvalReport:
    """Paired finetune-size sweep over the two configured strategies.

    Jobs fan out over `workers` processes; aggregation is keyed by
    (strategy, f_size, seed) so the schedule cannot affect the report.
    """
    kind_a, kind_b = cfg.sweep_strategies
    jobs = [
        {"config": config_dict, "base_dir": str(base_dir), "kind": kind,
         "f_size": f, "seed": seed}
        for kind in (kind_a, kind_b)
        for f in cfg.sweep_f_sizes
        for seed in cfg.seeds
    ]
    results: dict[tuple[str, int, int], float] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for key, value in pool.map(_sweep_job, jobs):
                results[key] = value
    else:
        for job in jobs:
            key, value = _sweep_job(job)
            results[key] = value

    report = sweep_compare(
        lambda kind, f_size, seed: results[(kind, f_size, seed)],
        kind_a, kind_b, cfg.sweep_f_sizes, cfg.seeds,
        meta={"experiment": cfg.experiment},
    )
    out = cfg.out_dir / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    return report
