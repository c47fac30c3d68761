"""Batch command-line surface: gen-synth, split, train, predict, rank,
enrich, report.

Every command validates its flags before touching files, writes all outputs
under --out together with a run manifest, and fails with a single-line
``ERROR <CLASS>: message`` on stderr. Config precedence is flags > config
file > built-in defaults. The ``TDTI_LOG`` environment variable controls
verbosity (debug | info | quiet).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import pipeline, screening, synthetic, training
from . import model as model_mod
from ._util import sha256_bytes, sha256_file, splitmix64
from .embeddings import (
    load_embeddings,
    load_interactions,
    load_smiles,
    save_interactions,
)
from .errors import DataError, FormatError, MissingColumnError, TdtiError, UsageError
from .model import ModelConfig
from .pipeline import SplitSpec
from .screening import ScoreRow, load_actives, load_scores
from .training import DatasetBundle, TrainConfig

log = logging.getLogger("tensordti")

RANKING_ALIASES = {
    "docking": "docking_score_asc",
    "affinity": "affinity_asc",
    "two_key": "two_key_label_then_confidence",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_config_file(path: str | Path) -> dict:
    """TOML-style key = value lines; strings, numbers, booleans and
    comma-separated tuples."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _parse_value(value: str):
    if value.startswith('"') and value.endswith('"') and len(value) >= 2:
        return value[1:-1]
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    if "," in value:
        return tuple(_parse_value(v.strip()) for v in value.split(","))
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _split_fields(config: dict, cls) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in config.items() if k in names}


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list[int]
    inputs: dict[str, str]
    artifacts: list[str]
    wall_time_s: float

    def write(self, outdir: Path) -> None:
        payload = dataclasses.asdict(self)
        (outdir / "manifest.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


class _Run:
    """Collects inputs/outputs for the manifest while a command executes."""

    def __init__(self, command: str, outdir: str, config: dict, seeds: list[int]):
        self.command = command
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.seeds = seeds
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        self.t0 = time.monotonic()

    def track_input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FormatError(f"unreadable input file: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def artifact(self, name: str) -> Path:
        path = self.outdir / name
        self.artifacts.append(str(path))
        return path

    def finish(self) -> None:
        cfg = json.dumps(self.config, sort_keys=True, default=str)
        RunManifest(
            command=self.command,
            config_hash=sha256_bytes(cfg.encode("utf-8")),
            seeds=self.seeds,
            inputs=self.inputs,
            artifacts=sorted(self.artifacts),
            wall_time_s=round(time.monotonic() - self.t0, 3),
        ).write(self.outdir)


def _load_bundle(
    run: _Run, data_dir: str, interactions: str | None = None, embeddings_dir: str | None = None
) -> DatasetBundle:
    d = Path(data_dir)
    e = Path(embeddings_dir) if embeddings_dir else d
    drugs = load_embeddings(run.track_input(e / "drugs.jsonl"), "drug")
    proteins = load_embeddings(run.track_input(e / "proteins.jsonl"), "protein")
    pockets = None
    if (e / "pockets.jsonl").is_file():
        pockets = load_embeddings(run.track_input(e / "pockets.jsonl"), "pocket")
    smiles = None
    if (d / "smiles.tsv").is_file():
        smiles = load_smiles(run.track_input(d / "smiles.tsv"))
    inter_path = Path(interactions) if interactions else d / "interactions.tsv"
    records = load_interactions(run.track_input(inter_path))
    return DatasetBundle(drugs=drugs, proteins=proteins, pockets=pockets, smiles=smiles, interactions=records)


# -- commands ---------------------------------------------------------------


def cmd_gen_synth(args, config: dict) -> int:
    fields = _split_fields(config, synthetic.SyntheticConfig)
    fields["seed"] = args.seed
    cfg = synthetic.SyntheticConfig(**fields)
    run = _Run("gen-synth", args.out, {**fields, "seed": args.seed}, [args.seed])
    data = synthetic.gen_synthetic(cfg)
    for path in data.write(run.outdir):
        run.artifacts.append(str(path))
    run.finish()
    log.info("wrote synthetic fixture to %s", run.outdir)
    return 0


def cmd_split(args, config: dict) -> int:
    fields = _split_fields(config, SplitSpec)
    fields["strategy"] = args.strategy
    fields["seed"] = args.seed
    spec = SplitSpec(**fields)
    run = _Run("split", args.out, {**fields}, [args.seed])
    records = load_interactions(run.track_input(Path(args.data) / "interactions.tsv"))
    tagged = pipeline.split(records, spec)
    if spec.balance_train:
        tagged = pipeline.balance_train(tagged, seed=splitmix64(spec.seed, 7))
    save_interactions(tagged, run.artifact("interactions.tsv"))
    run.finish()
    return 0


def cmd_train(args, config: dict) -> int:
    mode = "classification" if args.mode == "dti" else "regression"
    run = _Run("train", args.out, {**config, "mode": args.mode}, [args.seed])
    data = _load_bundle(run, args.data, args.interactions, args.embeddings)

    model_fields = _split_fields(config, ModelConfig)
    model_fields.setdefault("drug_dim", data.drugs.width)
    model_fields.setdefault("protein_dim", data.proteins.width)
    if data.pockets is not None and any(r.pocket_id for r in data.interactions):
        model_fields.setdefault("pocket_dim", data.pockets.width)
    model_fields["mode"] = mode
    if data.smiles is None:
        model_fields["alpha_recon"] = 0.0
    model_config = ModelConfig(**model_fields)

    train_fields = _split_fields(config, TrainConfig)
    train_fields["mode"] = mode
    train_fields.setdefault("lr", 5e-5 if mode == "classification" else 1e-4)
    train_fields.setdefault("eval_metric", "aupr" if mode == "classification" else "pcc")
    n_seeds = int(config.get("n_seeds", 1))
    train_fields["seeds"] = tuple(splitmix64(args.seed, i) % (2**31) for i in range(n_seeds))
    train_config = TrainConfig(**train_fields)

    state, report = training.train(model_config, data, train_config)
    model_mod.save_checkpoint(state, run.artifact("model.tdti"))
    run.artifacts.append(str(run.outdir / "model.tdti.json"))
    run.artifact("train_report.json").write_text(report.to_json(), encoding="utf-8")
    run.finish()
    log.info("test metrics: %s", report.test_mean)
    return 0


def cmd_predict(args, config: dict) -> int:
    run = _Run("predict", args.out, dict(config), [args.seed])
    state = model_mod.load_checkpoint(run.track_input(args.model))
    data = _load_bundle(run, args.data, args.interactions, args.embeddings)
    which = config.get("predict_split", "test")
    records = data.subset(which) if which != "all" else data.interactions
    if not records:
        raise DataError(f"no records in split {which!r} to predict")
    _, preds = training.evaluate(state, data, records)
    training.save_predictions(preds, run.artifact("predictions.tsv"))
    run.finish()
    return 0


def cmd_rank(args, config: dict) -> int:
    criterion = RANKING_ALIASES[args.ranking]
    run = _Run("rank", args.out, {**config, "ranking": args.ranking}, [args.seed])
    preds = training.load_predictions(run.track_input(args.predictions))
    targets = sorted({p.target_id for p in preds})
    if args.target:
        preds = [p for p in preds if p.target_id == args.target]
        if not preds:
            raise DataError(f"no predictions for target {args.target!r}")
    elif len(targets) > 1:
        raise DataError(f"predictions cover {len(targets)} targets; pick one with --target")
    rows = []
    for p in preds:
        # ascending = better for all criteria: negate our higher-is-stronger outputs
        if p.affinity_pred is not None:
            score = -p.affinity_pred
        elif p.prob is not None:
            score = -p.prob
        else:
            score = -p.logit
        rows.append(
            ScoreRow(
                compound_id=p.drug_id,
                method="tensordti",
                score=score,
                label=p.pred_label,
                confidence=p.confidence,
                unfamiliarity=p.unfamiliarity,
            )
        )
    if args.unf_threshold is not None:
        rows, census = screening.filter_unfamiliar(rows, args.unf_threshold)
        run.artifact("filter_census.json").write_text(
            json.dumps(census, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        if not rows:
            raise DataError("no compounds below the unfamiliarity threshold")
    ranked = screening.rank(rows, criterion)
    out = run.artifact("ranked.tsv")
    with open(out, "w", encoding="utf-8") as f:
        f.write("rank\tcompound_id\n")
        for i, cid in enumerate(ranked.ids, 1):
            f.write(f"{i}\t{cid}\n")
    run.finish()
    return 0


def _load_ranked(path: Path, criterion: str) -> screening.RankedLibrary:
    ids = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != ["rank", "compound_id"]:
            raise FormatError(f"{path}: header {header} != ['rank', 'compound_id']")
        for line in f:
            if line.strip():
                ids.append(line.rstrip("\n").split("\t")[1])
    return screening.RankedLibrary(criterion=criterion, ids=ids)


def cmd_enrich(args, config: dict) -> int:
    run = _Run("enrich", args.out, {**config, "k_grid": args.k_grid}, [args.seed])
    k_grid = tuple(float(k) for k in args.k_grid.split(","))
    actives = load_actives(run.track_input(args.actives))

    rankings: dict[str, screening.RankedLibrary] = {}
    if args.ranked:
        for spec in args.ranked:
            if "=" not in spec:
                raise UsageError(f"--ranked expects name=path, got {spec!r}")
            name, path = spec.split("=", 1)
            rankings[name] = _load_ranked(run.track_input(path), "external")
    if args.scores:
        rows = load_scores(run.track_input(args.scores))
        criterion = RANKING_ALIASES[args.ranking]
        for method in sorted({r.method for r in rows}):
            rankings[method] = screening.rank([r for r in rows if r.method == method], criterion)
    if not rankings:
        raise UsageError("provide --ranked name=path and/or --scores")

    report = screening.enrichment_report(
        rankings,
        actives,
        k_grid=k_grid,
        baseline_trials=int(config.get("baseline_trials", 2000)),
        seed=args.seed,
        include_topk_fraction=bool(config.get("topk_fraction", False)),
    )
    if args.format in ("json", "both"):
        run.artifact("enrichment.json").write_text(report.to_json(), encoding="utf-8")
    if args.format in ("tsv", "both"):
        run.artifact("enrichment.tsv").write_text(report.to_tsv(), encoding="utf-8")
    run.finish()
    return 0


def cmd_report(args, config: dict) -> int:
    from .metrics import aupr, confusion_confidence, f1, pcc, rmse

    run = _Run("report", args.out, dict(config), [args.seed])
    preds = training.load_predictions(run.track_input(args.predictions))
    truth = {
        (r.drug_id, r.target_id): r
        for r in load_interactions(run.track_input(args.interactions))
    }
    missing = [(p.drug_id, p.target_id) for p in preds if (p.drug_id, p.target_id) not in truth]
    if missing:
        raise DataError(f"{len(missing)} predictions lack ground truth, e.g. {missing[:3]}")

    payload: dict = {"n": len(preds)}
    if args.mode == "dti":
        y = [truth[(p.drug_id, p.target_id)].label for p in preds]
        if any(v is None for v in y):
            raise MissingColumnError("ground-truth labels required for dti report")
        probs = [p.prob for p in preds]
        confs = [p.confidence for p in preds]
        payload["aupr"] = aupr(probs, y)
        payload["f1"] = f1(probs, y)
        if all(c is not None for c in confs):
            payload["confusion_confidence"] = confusion_confidence(y, probs, confs).as_dict()
    else:
        t = [truth[(p.drug_id, p.target_id)].affinity for p in preds]
        if any(v is None for v in t):
            raise MissingColumnError("ground-truth affinities required for dta report")
        predicted = [p.affinity_pred for p in preds]
        payload["rmse"] = rmse(predicted, t)
        try:
            payload["pcc"] = pcc(predicted, t)
        except DataError as exc:
            payload["pcc"] = None
            payload["pcc_error"] = str(exc)
    if args.unf_threshold is not None:
        rows = [
            ScoreRow(
                compound_id=f"{p.drug_id}|{p.target_id}",
                method="tensordti",
                score=p.logit,
                label=p.pred_label,
                unfamiliarity=p.unfamiliarity,
            )
            for p in preds
        ]
        _, payload["filter_census"] = screening.filter_unfamiliar(rows, args.unf_threshold)
    run.artifact("metrics.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    run.finish()
    return 0


# -- wiring -----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="tensordti", description="interaction model + screening analytics")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--threads", type=int, default=1, help="worker cap (desk-scale paths are serial)")
        p.add_argument("--format", choices=("tsv", "json", "both"), default="both")

    p = sub.add_parser("gen-synth", help="write a synthetic planted-structure fixture")
    common(p)

    p = sub.add_parser("split", help="tag interactions with train/valid/test")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=pipeline.STRATEGIES, default="random")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--interactions", help="override DATA/interactions.tsv")
    p.add_argument("--embeddings", help="directory of embedding stores (default: DATA)")
    p.add_argument("--mode", choices=("dti", "dta"), default="dti")

    p = sub.add_parser("predict", help="score records with a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--interactions")
    p.add_argument("--embeddings", help="directory of embedding stores (default: DATA)")
    p.add_argument("--model", required=True)

    p = sub.add_parser("rank", help="rank compounds for one target")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--ranking", choices=tuple(RANKING_ALIASES), default="two_key")
    p.add_argument("--target")
    p.add_argument("--unf-threshold", type=float, default=None)

    p = sub.add_parser("enrich", help="enrichment report over ranked libraries")
    common(p)
    p.add_argument("--ranked", action="append", help="name=path of a ranked.tsv (repeatable)")
    p.add_argument("--scores", help="score table TSV (compound_id method score ...)")
    p.add_argument("--ranking", choices=tuple(RANKING_ALIASES), default="two_key")
    p.add_argument("--actives", required=True)
    p.add_argument("--k-grid", default="1,5,20,50,100")

    p = sub.add_parser("report", help="metric bundle from predictions + ground truth")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--mode", choices=("dti", "dta"), default="dti")
    p.add_argument("--unf-threshold", type=float, default=None)
    return parser


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "rank": cmd_rank,
    "enrich": cmd_enrich,
    "report": cmd_report,
}


def _setup_logging() -> None:
    level = os.environ.get("TDTI_LOG", "info").lower()
    logging.basicConfig(
        level={"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        config = _parse_config_file(args.config) if args.config else {}
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 2
    except TdtiError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR IO: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
