"""Virtual-screening analytics: ranking criteria, active-set alignment,
recall/EF, screening-budget metrics, random baselines, unfamiliarity
filtering, and the combined enrichment report.

Budget metrics answer "what fraction of the ranked library must be screened
to recover ...". Target counts use ceil with a small tolerance so that e.g.
20% of 375 actives is 75, not 76.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import splitmix64
from .errors import ConfigError, DataError, FormatError, MissingColumnError, UsageError

CRITERIA = ("docking_score_asc", "affinity_asc", "two_key_label_then_confidence")

DEFAULT_K_GRID = (1.0, 5.0, 20.0, 50.0, 100.0)


def ceil_count(x: float) -> int:
    """ceil(x) that forgives float noise just below an integer."""
    r = round(x)
    if abs(x - r) < 1e-9:
        return int(r)
    return int(math.ceil(x))


@dataclass
class ScoreRow:
    compound_id: str
    method: str
    score: float | None = None
    label: int | None = None
    confidence: float | None = None
    unfamiliarity: float | None = None
    potency: float | None = None


SCORE_COLUMNS = ("compound_id", "method", "score", "label", "confidence", "unfamiliarity", "potency")


def load_scores(path: str | Path) -> list[ScoreRow]:
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        required = ("compound_id", "method", "score")
        for col in required:
            if col not in header:
                raise MissingColumnError(f"{path}: missing column {col!r}")
        unknown = [c for c in header if c not in SCORE_COLUMNS]
        if unknown:
            raise FormatError(f"{path}: unknown columns {unknown}")
        pos = {c: header.index(c) for c in header}
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields")

            def get(col, cast):
                if col not in pos:
                    return None
                raw = parts[pos[col]]
                return cast(raw) if raw else None

            rows.append(
                ScoreRow(
                    compound_id=parts[pos["compound_id"]],
                    method=parts[pos["method"]],
                    score=get("score", float),
                    label=get("label", int),
                    confidence=get("confidence", float),
                    unfamiliarity=get("unfamiliarity", float),
                    potency=get("potency", float),
                )
            )
    return rows


@dataclass
class RankedLibrary:
    criterion: str
    ids: list[str]

    @property
    def n(self) -> int:
        return len(self.ids)

    def position(self, compound_id: str) -> int:
        """1-based rank."""
        return self.ids.index(compound_id) + 1


@dataclass
class ActiveSet:
    ids: frozenset[str]
    potency: dict[str, float] | None = None  # higher = better

    def __post_init__(self):
        if len(self.ids) < 1:
            raise DataError("active set is empty")
        if self.potency is not None:
            missing = self.ids - set(self.potency)
            if missing:
                raise DataError(f"potency missing for actives {sorted(missing)[:5]}")


def rank(rows: list[ScoreRow], criterion: str) -> RankedLibrary:
    """Total order under the chosen criterion; ties break by id ascending.

    docking_score_asc / affinity_asc: most favorable (lowest) score first.
    two_key: predicted positives first, then confidence ascending within
    each label (lower confidence = more certain).
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown ranking criterion {criterion!r}")
    if not rows:
        raise DataError("nothing to rank")
    seen = set()
    for r in rows:
        if r.compound_id in seen:
            raise DataError(f"duplicate compound id {r.compound_id!r} in ranking input")
        seen.add(r.compound_id)

    if criterion == "two_key_label_then_confidence":
        for r in rows:
            if r.label is None:
                raise MissingColumnError(f"two_key ranking needs a label for {r.compound_id!r}")
            if r.confidence is None:
                raise MissingColumnError(f"two_key ranking needs a confidence for {r.compound_id!r}")
        ordered = sorted(rows, key=lambda r: (0 if r.label == 1 else 1, r.confidence, r.compound_id))
    else:
        for r in rows:
            if r.score is None:
                raise MissingColumnError(f"{criterion} needs a score for {r.compound_id!r}")
        ordered = sorted(rows, key=lambda r: (r.score, r.compound_id))
    return RankedLibrary(criterion=criterion, ids=[r.compound_id for r in ordered])


def align_actives(active_sets: list[ActiveSet]) -> ActiveSet:
    """Intersection of per-method active sets, so recall is comparable."""
    if not active_sets:
        raise UsageError("need at least one active set")
    common = frozenset.intersection(*(s.ids for s in active_sets))
    if not common:
        raise DataError("aligned active set is empty; methods share no validated binders")
    potency = None
    for s in active_sets:
        if s.potency is not None:
            potency = {cid: s.potency[cid] for cid in common}
            break
    return ActiveSet(ids=common, potency=potency)


def _active_positions(ranked: RankedLibrary, actives: ActiveSet) -> list[int]:
    return [i + 1 for i, cid in enumerate(ranked.ids) if cid in actives.ids]


def recall_at_k(ranked: RankedLibrary, actives: ActiveSet, k: int) -> float:
    """TP@k / A with k a compound count."""
    if not 1 <= k <= ranked.n:
        raise UsageError(f"k must be in [1, {ranked.n}], got {k}")
    top = set(ranked.ids[:k])
    return len(top & actives.ids) / len(actives.ids)


def ef_at_k(ranked: RankedLibrary, actives: ActiveSet, k: int) -> float:
    """Enrichment factor via the identity EF@k = Recall@k * N / k."""
    return recall_at_k(ranked, actives, k) * ranked.n / k


def kpct_actives_budget(ranked: RankedLibrary, actives: ActiveSet, k_percent: float) -> float:
    """Smallest library percentage whose prefix holds >= ceil(k% of A)
    actives, regardless of potency."""
    if not 0 < k_percent <= 100:
        raise UsageError(f"k_percent must be in (0, 100], got {k_percent}")
    target = max(1, ceil_count(k_percent * len(actives.ids) / 100.0))
    positions = _active_positions(ranked, actives)
    if target > len(positions):
        raise DataError(
            f"cannot recover {target} actives: only {len(positions)} of "
            f"{len(actives.ids)} are present in the ranked library"
        )
    return 100.0 * positions[target - 1] / ranked.n


def topk_potency_budget(ranked: RankedLibrary, actives: ActiveSet, k_percent: float) -> float:
    """Smallest library percentage whose prefix contains ALL of the
    ceil(k% of A) most potent actives (higher potency preferred, ties by id)."""
    if not 0 < k_percent <= 100:
        raise UsageError(f"k_percent must be in (0, 100], got {k_percent}")
    if actives.potency is None:
        raise MissingColumnError("top-k budget needs potencies on the active set")
    m = max(1, ceil_count(k_percent * len(actives.ids) / 100.0))
    by_potency = sorted(actives.ids, key=lambda cid: (-actives.potency[cid], cid))
    subset = set(by_potency[:m])
    positions = [i + 1 for i, cid in enumerate(ranked.ids) if cid in subset]
    if len(positions) < m:
        raise DataError(f"{m - len(positions)} of the top-potency actives are missing from the library")
    return 100.0 * positions[-1] / ranked.n


def topk_hit_fraction(ranked: RankedLibrary, actives: ActiveSet, k_percent: float) -> float:
    """Alternative semantics: fraction of actives inside the top k% slice."""
    if not 0 < k_percent <= 100:
        raise UsageError(f"k_percent must be in (0, 100], got {k_percent}")
    cutoff = max(1, ceil_count(k_percent * ranked.n / 100.0))
    return recall_at_k(ranked, actives, min(cutoff, ranked.n))


def random_baseline(n: int, a: int, k_percent: float, trials: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo k% AR budget under a uniformly random ranking."""
    if trials < 1:
        raise UsageError("trials must be >= 1")
    if not 1 <= a <= n:
        raise UsageError(f"need 1 <= A <= N, got A={a}, N={n}")
    target = max(1, ceil_count(k_percent * a / 100.0))
    rng = np.random.default_rng(seed)
    budgets = np.empty(trials)
    for t in range(trials):
        positions = rng.permutation(n)[:a] + 1
        budgets[t] = 100.0 * np.partition(positions, target - 1)[target - 1] / n
    return float(budgets.mean()), float(budgets.std())


def random_topk_baseline(n: int, a: int, m: int, trials: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo budget to cover all of m specific actives under a random
    ranking (the top-potency subset is a uniform m-subset by symmetry)."""
    if trials < 1:
        raise UsageError("trials must be >= 1")
    if not 1 <= m <= a <= n:
        raise UsageError(f"need 1 <= m <= A <= N, got m={m}, A={a}, N={n}")
    rng = np.random.default_rng(seed)
    budgets = np.empty(trials)
    for t in range(trials):
        positions = rng.permutation(n)[:m] + 1
        budgets[t] = 100.0 * positions.max() / n
    return float(budgets.mean()), float(budgets.std())


def filter_unfamiliar(rows: list[ScoreRow], threshold: float) -> tuple[list[ScoreRow], list[dict]]:
    """Keep rows with unfamiliarity strictly below the threshold.

    The census mirrors the reliability-filter table: one row per population
    (predicted positives / negatives by label, else 'all') with the total,
    the docked count (rows with a score) and the retained count.
    """
    for r in rows:
        if r.unfamiliarity is None:
            raise MissingColumnError(f"unfamiliarity missing for {r.compound_id!r}")
    kept = [r for r in rows if r.unfamiliarity < threshold]

    def population(r: ScoreRow) -> str:
        if r.label == 1:
            return "predicted_positive"
        if r.label == 0:
            return "predicted_negative"
        return "all"

    census = []
    for pop in sorted({population(r) for r in rows}):
        members = [r for r in rows if population(r) == pop]
        census.append(
            {
                "population": pop,
                "total": len(members),
                "docked": sum(1 for r in members if r.score is not None),
                "unfamiliar_below": sum(1 for r in members if r.unfamiliarity < threshold),
            }
        )
    return kept, census


@dataclass
class EnrichmentReport:
    n_library: int
    n_actives: int
    k_grid: tuple[float, ...]
    target_counts: dict[float, int]
    ar_budget: dict[str, dict[float, float]]
    recall: dict[str, dict[float, float]]
    ef: dict[str, dict[float, float]]
    topk_budget: dict[str, dict[float, float]] | None = None
    topk_fraction: dict[str, dict[float, float]] | None = None
    random_sd: dict[str, dict[float, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        def keyed(d):
            if d is None:
                return None
            return {m: {str(k): v for k, v in row.items()} for m, row in d.items()}

        payload = {
            "n_library": self.n_library,
            "n_actives": self.n_actives,
            "k_grid": list(self.k_grid),
            "target_counts": {str(k): v for k, v in self.target_counts.items()},
            "ar_budget": keyed(self.ar_budget),
            "recall": keyed(self.recall),
            "ef": keyed(self.ef),
            "topk_budget": keyed(self.topk_budget),
            "topk_fraction": keyed(self.topk_fraction),
            "random_sd": keyed(self.random_sd),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_tsv(self) -> str:
        lines = [f"# library N={self.n_library} actives A={self.n_actives}"]

        def section(title, table):
            methods = list(table)
            lines.append(f"## {title}")
            lines.append("\t".join(["k_percent", "n_actives_at_k"] + methods))
            for k in self.k_grid:
                row = [f"{k:g}", str(self.target_counts[k])]
                row += [f"{table[m][k]:.2f}" for m in methods]
                lines.append("\t".join(row))

        section("kpct_actives_budget", self.ar_budget)
        if self.topk_budget is not None:
            section("topk_potency_budget", self.topk_budget)
        if self.topk_fraction is not None:
            section("topk_hit_fraction", self.topk_fraction)
        section("recall_at_fraction", self.recall)
        section("ef_at_fraction", self.ef)
        return "\n".join(lines) + "\n"


def enrichment_report(
    rankings: dict[str, RankedLibrary],
    actives: ActiveSet,
    k_grid: tuple[float, ...] = DEFAULT_K_GRID,
    baseline_trials: int = 2000,
    seed: int = 0,
    include_topk_fraction: bool = False,
) -> EnrichmentReport:
    """Budget/recall/EF tables for every method over the k grid, plus a
    simulated random-ranking column."""
    if not rankings:
        raise UsageError("no rankings supplied")
    sizes = {m: r.n for m, r in rankings.items()}
    if len(set(sizes.values())) != 1:
        raise DataError(f"library sizes differ across methods: {sizes}; align libraries first")
    n = next(iter(sizes.values()))
    for m, r in rankings.items():
        missing = actives.ids - set(r.ids)
        if missing:
            raise DataError(f"method {m!r}: actives missing from library: {sorted(missing)[:5]}")
    a = len(actives.ids)

    target_counts = {k: max(1, ceil_count(k * a / 100.0)) for k in k_grid}
    ar: dict[str, dict[float, float]] = {}
    recall: dict[str, dict[float, float]] = {}
    ef: dict[str, dict[float, float]] = {}
    topk: dict[str, dict[float, float]] = {}
    topk_frac: dict[str, dict[float, float]] = {}
    has_potency = actives.potency is not None

    for mname, ranked in rankings.items():
        ar[mname] = {k: kpct_actives_budget(ranked, actives, k) for k in k_grid}
        cutoffs = {k: min(n, max(1, ceil_count(k * n / 100.0))) for k in k_grid}
        recall[mname] = {k: recall_at_k(ranked, actives, cutoffs[k]) for k in k_grid}
        ef[mname] = {k: ef_at_k(ranked, actives, cutoffs[k]) for k in k_grid}
        if has_potency:
            topk[mname] = {k: topk_potency_budget(ranked, actives, k) for k in k_grid}
        if include_topk_fraction:
            topk_frac[mname] = {k: topk_hit_fraction(ranked, actives, k) for k in k_grid}

    ar["random"] = {}
    random_sd: dict[str, dict[float, float]] = {"ar_budget": {}}
    for i, k in enumerate(k_grid):
        mean, sd = random_baseline(n, a, k, baseline_trials, splitmix64(seed, i))
        ar["random"][k] = mean
        random_sd["ar_budget"][k] = sd
    if has_potency:
        topk["random"] = {}
        random_sd["topk_budget"] = {}
        for i, k in enumerate(k_grid):
            mean, sd = random_topk_baseline(n, a, target_counts[k], baseline_trials, splitmix64(seed, 100 + i))
            topk["random"][k] = mean
            random_sd["topk_budget"][k] = sd

    return EnrichmentReport(
        n_library=n,
        n_actives=a,
        k_grid=tuple(k_grid),
        target_counts=target_counts,
        ar_budget=ar,
        recall=recall,
        ef=ef,
        topk_budget=topk if has_potency else None,
        topk_fraction=topk_frac if include_topk_fraction else None,
        random_sd=random_sd,
    )


def load_actives(path: str | Path) -> ActiveSet:
    """TSV `compound_id [potency]`."""
    path = Path(path)
    ids = []
    potency: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header not in (["compound_id"], ["compound_id", "potency"]):
            raise FormatError(f"{path}: header {header} != ['compound_id'[, 'potency']]")
        has_potency = len(header) == 2
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields")
            ids.append(parts[0])
            if has_potency:
                if not parts[1]:
                    raise FormatError(f"{path}:{lineno}: empty potency")
                potency[parts[0]] = float(parts[1])
    return ActiveSet(ids=frozenset(ids), potency=potency if potency else None)
