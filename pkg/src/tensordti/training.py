"""Training loop with early stopping, multi-seed orchestration,
checkpointing hooks, and evaluation to prediction records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, model as model_mod
from ._util import splitmix64
from .embeddings import EmbeddingStore, InteractionRecord, validate_interactions
from .errors import ConfigError, DataError
from .metrics import aupr, f1, pcc, rmse
from .model import ModelConfig, ModelState
from .nn import AdamState, Tape, adam_step, stable_sigmoid
from .tokenizer import SmilesTokenizer

EVAL_METRICS = ("aupr", "pcc")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-5
    max_epochs: int = 100
    patience: int = 20
    batch_size: int = 256
    seeds: tuple[int, ...] = (0,)
    eval_metric: str = "aupr"
    mode: str = "classification"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if self.eval_metric not in EVAL_METRICS:
            raise ConfigError(f"eval_metric must be one of {EVAL_METRICS}")


@dataclass
class DatasetBundle:
    drugs: EmbeddingStore
    proteins: EmbeddingStore
    interactions: list[InteractionRecord]
    pockets: EmbeddingStore | None = None
    smiles: dict[str, str] | None = None

    def subset(self, split: str) -> list[InteractionRecord]:
        return [r for r in self.interactions if r.split == split]


@dataclass
class EpochStats:
    epoch: int
    l_bce: float
    l_con: float
    l_conf: float
    l_recon: float
    l_total: float
    val_metric: float
    l_mse: float | None = None


@dataclass
class SeedRun:
    seed: int
    best_epoch: int
    best_val_metric: float
    epochs: list[EpochStats]
    test_metrics: dict


@dataclass
class TrainReport:
    mode: str
    eval_metric: str
    runs: list[SeedRun] = field(default_factory=list)
    test_mean: dict = field(default_factory=dict)
    test_sd: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def run_dict(run: SeedRun):
            return {
                "seed": run.seed,
                "best_epoch": run.best_epoch,
                "best_val_metric": run.best_val_metric,
                "epochs": [vars(e) for e in run.epochs],
                "test_metrics": run.test_metrics,
            }

        payload = {
            "mode": self.mode,
            "eval_metric": self.eval_metric,
            "runs": [run_dict(r) for r in self.runs],
            "test_mean": self.test_mean,
            "test_sd": self.test_sd,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


@dataclass
class PredictionRecord:
    drug_id: str
    target_id: str
    logit: float
    prob: float | None = None
    pred_label: int | None = None
    affinity_pred: float | None = None
    confidence: float | None = None
    unfamiliarity: float | None = None


PREDICTION_COLUMNS = (
    "drug_id",
    "target_id",
    "logit",
    "prob",
    "pred_label",
    "affinity_pred",
    "confidence",
    "unfamiliarity",
)


def save_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(PREDICTION_COLUMNS) + "\n")
        for r in records:
            f.write("\t".join(fmt(getattr(r, c)) for c in PREDICTION_COLUMNS) + "\n")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    from .errors import FormatError

    path = Path(path)
    out = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if tuple(header) != PREDICTION_COLUMNS:
            raise FormatError(f"{path}: header {header} != {list(PREDICTION_COLUMNS)}")
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(PREDICTION_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(PREDICTION_COLUMNS)} fields")
            d, t, logit, prob, pred, aff, conf, unf = parts
            out.append(
                PredictionRecord(
                    drug_id=d,
                    target_id=t,
                    logit=float(logit),
                    prob=float(prob) if prob else None,
                    pred_label=int(pred) if pred else None,
                    affinity_pred=float(aff) if aff else None,
                    confidence=float(conf) if conf else None,
                    unfamiliarity=float(unf) if unf else None,
                )
            )
    return out


# -- batch preparation ------------------------------------------------------


class _Arrays:
    """Column-matrix views of one record list, gathered once."""

    def __init__(self, data: DatasetBundle, records: list[InteractionRecord], config: ModelConfig, need_tokens: bool):
        if not records:
            raise DataError("empty record list")
        self.records = records
        drug_ids = [r.drug_id for r in records]
        target_ids = [r.target_id for r in records]
        self.x_drug = data.drugs.matrix(drug_ids)
        self.x_protein = data.proteins.matrix(target_ids)
        self.x_pocket = None
        if config.pocket_dim is not None:
            if any(r.pocket_id is None for r in records):
                raise DataError("model expects pockets but some records have no pocket_id")
            if data.pockets is None:
                raise DataError("model expects pockets but the dataset has no pocket store")
            self.x_pocket = data.pockets.matrix([r.pocket_id for r in records])
        self.labels = np.array([-1 if r.label is None else r.label for r in records], dtype=np.float64)
        self.affinity = np.array(
            [np.nan if r.affinity is None else r.affinity for r in records], dtype=np.float64
        )
        self.token_ids = None
        self.pad_mask = None
        if need_tokens:
            if data.smiles is None:
                raise ConfigError("reconstruction loss is weighted but the dataset has no SMILES")
            ids = np.zeros((config.max_len, len(records)), dtype=np.int64)
            mask = np.zeros((config.max_len, len(records)), dtype=np.float64)
            tokenizer = SmilesTokenizer(config.vocab, config.max_len)
            cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
            for j, r in enumerate(records):
                if r.drug_id not in cache:
                    s = data.smiles.get(r.drug_id)
                    if s is None:
                        raise DataError(f"no SMILES for drug {r.drug_id!r}")
                    seq = tokenizer.tokenize(s)
                    cache[r.drug_id] = (seq.ids, tokenizer.pad_mask(seq))
                ids[:, j], mask[:, j] = cache[r.drug_id]
            self.token_ids = ids
            self.pad_mask = mask

    def __len__(self):
        return len(self.records)


def _forward_losses(state: ModelState, arr: _Arrays, idx: np.ndarray, tape: Tape, trip_rng: np.random.Generator | None):
    c = state.config
    e_d = model_mod.encode_drug(state, arr.x_drug[:, idx], tape)
    pocket = None if arr.x_pocket is None else arr.x_pocket[:, idx]
    e_p = model_mod.encode_protein_with_pocket(state, arr.x_protein[:, idx], pocket, tape)
    logit = model_mod.interaction_logit(state, e_d, e_p, tape)
    conf = model_mod.confidence(state, e_d, e_p, logit, tape)

    terms = losses.LossTerms()
    if c.mode == "classification":
        y = arr.labels[idx]
        probs = stable_sigmoid(logit.value).reshape(-1)
        terms.bce = losses.bce_with_logits(tape, logit, y)
        terms.conf = losses.confidence_loss(tape, conf, y, probs)
        if c.alpha_con > 0:
            if c.contrastive == "cosine_margin":
                terms.con = losses.contrastive_cosine(tape, e_d, e_p, y, c.margin)
            else:
                pos = np.where(y == 1)[0]
                if pos.size == 0:
                    terms.con = tape.affine(tape.constant(0.0), 1.0)
                else:
                    perm = trip_rng.permutation(idx.size) if trip_rng is not None else np.roll(np.arange(idx.size), 1)
                    terms.con = losses.contrastive_triplet(
                        tape,
                        tape.take_cols(e_d, pos),
                        tape.take_cols(e_p, pos),
                        tape.take_cols(e_p, perm[pos]),
                        c.triplet_margin,
                    )
    else:
        target = arr.affinity[idx]
        if np.any(np.isnan(target)):
            raise DataError("regression mode requires an affinity on every record")
        terms.mse = losses.mse_loss(tape, logit, tape.constant(target.reshape(1, -1)))
        err = np.minimum(1.0, np.abs(target - logit.value.reshape(-1)) / c.error_scale)
        diff = tape.sub(conf, tape.constant(err.reshape(1, -1)))
        terms.conf = tape.mean_all(tape.mul(diff, diff))

    if c.alpha_recon > 0:
        recon_logits = model_mod.reconstruct(state, arr.x_drug[:, idx], tape)
        terms.recon = losses.reconstruction_loss(
            tape, recon_logits, arr.token_ids[:, idx], arr.pad_mask[:, idx], c.max_len, c.vocab_size
        )
    return terms, logit, conf


def _scores(state: ModelState, arr: _Arrays, chunk: int = 2048):
    """Inference pass: logits, probabilities and confidences for all records."""
    n = len(arr)
    logits = np.empty(n)
    confs = np.empty(n)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        tape = Tape()
        e_d = model_mod.encode_drug(state, arr.x_drug[:, idx], tape)
        pocket = None if arr.x_pocket is None else arr.x_pocket[:, idx]
        e_p = model_mod.encode_protein_with_pocket(state, arr.x_protein[:, idx], pocket, tape)
        logit = model_mod.interaction_logit(state, e_d, e_p, tape)
        conf = model_mod.confidence(state, e_d, e_p, logit, tape)
        logits[idx] = logit.value.reshape(-1)
        confs[idx] = conf.value.reshape(-1)
        tape.clear()
    return logits, stable_sigmoid(logits.reshape(1, -1)).reshape(-1), confs


def _validation_metric(state: ModelState, arr: _Arrays, metric: str) -> float:
    logits, probs, _ = _scores(state, arr)
    try:
        if metric == "aupr":
            return aupr(probs, arr.labels)
        return pcc(logits, arr.affinity)
    except DataError:
        return float("-inf")


def _train_single(model_config: ModelConfig, data: DatasetBundle, config: TrainConfig, seed: int):
    need_tokens = model_config.alpha_recon > 0
    train_recs = data.subset("train")
    valid_recs = data.subset("valid")
    test_recs = data.subset("test")
    for name, recs in (("train", train_recs), ("valid", valid_recs), ("test", test_recs)):
        if not recs:
            raise DataError(f"empty {name} split")
    validate_interactions(data.interactions, data.drugs, data.proteins, data.pockets, model_config.mode)

    train = _Arrays(data, train_recs, model_config, need_tokens)
    valid = _Arrays(data, valid_recs, model_config, need_tokens=False)

    state = model_mod.init_model(model_config, seed=splitmix64(seed, 0))
    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    params = state.parameters()

    best_metric = float("-inf")
    best_epoch = -1
    best_values = state.snapshot()
    stats: list[EpochStats] = []
    n = len(train)

    for epoch in range(config.max_epochs):
        shuffle_rng = np.random.default_rng(splitmix64(seed, 1000 + epoch))
        trip_rng = np.random.default_rng(splitmix64(seed, 500_000 + epoch))
        order = shuffle_rng.permutation(n)
        sums = np.zeros(5)  # bce, con, conf, recon, total
        mse_sum = 0.0
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            tape = Tape()
            terms, _, _ = _forward_losses(state, train, idx, tape, trip_rng)
            total, bd = losses.composite_loss(tape, terms, model_config)
            if not np.isfinite(bd.l_total):
                raise DataError(
                    f"non-finite training loss {bd.l_total} at epoch {epoch}, "
                    f"batch {n_batches} (seed {seed})"
                )
            grads = tape.backward(total)
            adam_step(adam, params, grads)
            sums += (bd.l_bce, bd.l_con, bd.l_conf, bd.l_recon, bd.l_total)
            mse_sum += bd.l_mse or 0.0
            n_batches += 1

        val_metric = _validation_metric(state, valid, config.eval_metric)
        stats.append(
            EpochStats(
                epoch=epoch,
                l_bce=sums[0] / n_batches,
                l_con=sums[1] / n_batches,
                l_conf=sums[2] / n_batches,
                l_recon=sums[3] / n_batches,
                l_total=sums[4] / n_batches,
                l_mse=(mse_sum / n_batches) if model_config.mode == "regression" else None,
                val_metric=val_metric,
            )
        )
        if val_metric > best_metric:
            best_metric = val_metric
            best_epoch = epoch
            best_values = state.snapshot()
        elif epoch - best_epoch >= config.patience:
            break

    state.restore(best_values)
    test_metrics, _ = evaluate(state, data, test_recs)
    return state, SeedRun(
        seed=seed,
        best_epoch=best_epoch,
        best_val_metric=best_metric,
        epochs=stats,
        test_metrics=test_metrics,
    )


def train(model_config: ModelConfig, data: DatasetBundle, config: TrainConfig) -> tuple[ModelState, TrainReport]:
    """Train one model per seed; report test metrics as mean +- sd across
    seeds. The returned state is the first seed's best-validation model."""
    if config.mode != model_config.mode:
        raise ConfigError(
            f"train mode {config.mode!r} != model mode {model_config.mode!r}"
        )
    report = TrainReport(mode=config.mode, eval_metric=config.eval_metric)
    first_state: ModelState | None = None
    for seed in config.seeds:
        state, run = _train_single(model_config, data, config, seed)
        if first_state is None:
            first_state = state
        report.runs.append(run)

    keys = sorted({k for run in report.runs for k, v in run.test_metrics.items() if isinstance(v, (int, float))})
    for k in keys:
        vals = [run.test_metrics[k] for run in report.runs if isinstance(run.test_metrics.get(k), (int, float))]
        report.test_mean[k] = float(np.mean(vals))
        report.test_sd[k] = float(np.std(vals))
    return first_state, report


def evaluate(state: ModelState, data: DatasetBundle, records: list[InteractionRecord], mode: str | None = None):
    """Score records with the frozen model.

    Returns (metric bundle, PredictionRecords). Unfamiliarity is filled in
    whenever a SMILES string is available for the drug.
    """
    mode = mode or state.config.mode
    validate_interactions(records, data.drugs, data.proteins, data.pockets, mode)
    arr = _Arrays(data, records, state.config, need_tokens=False)
    logits, probs, confs = _scores(state, arr)

    unf_by_drug: dict[str, float] = {}
    if data.smiles:
        tokenizer = state.tokenizer
        unique = sorted({r.drug_id for r in records if r.drug_id in data.smiles})
        if unique:
            mat = data.drugs.matrix(unique)
            ids = np.zeros((state.config.max_len, len(unique)), dtype=np.int64)
            mask = np.zeros((state.config.max_len, len(unique)), dtype=np.float64)
            for j, d in enumerate(unique):
                seq = tokenizer.tokenize(data.smiles[d])
                ids[:, j] = seq.ids
                mask[:, j] = tokenizer.pad_mask(seq)
            u = model_mod.unfamiliarity_many(state, mat, ids, mask)
            unf_by_drug = dict(zip(unique, u.tolist()))

    preds = []
    classification = mode == "classification"
    for i, r in enumerate(records):
        preds.append(
            PredictionRecord(
                drug_id=r.drug_id,
                target_id=r.target_id,
                logit=float(logits[i]),
                prob=float(probs[i]) if classification else None,
                pred_label=int(probs[i] >= 0.5) if classification else None,
                affinity_pred=None if classification else float(logits[i]),
                confidence=float(confs[i]),
                unfamiliarity=unf_by_drug.get(r.drug_id),
            )
        )

    metrics: dict = {}
    if classification:
        metrics["aupr"] = aupr(probs, arr.labels)
        metrics["f1"] = f1(probs, arr.labels)
    else:
        metrics["rmse"] = rmse(logits, arr.affinity)
        try:
            metrics["pcc"] = pcc(logits, arr.affinity)
        except DataError as exc:
            metrics["pcc"] = None
            metrics["pcc_error"] = str(exc)
    return metrics, preds
