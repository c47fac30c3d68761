"""Embedding stores, interaction tables, and their on-disk formats.

Two embedding formats are supported and sniffed by magic:
  * JSON Lines, one ``{"id":…, "kind":…, "vec":[…]}`` object per line;
  * binary, magic ``TDTIEMB1`` + u32-LE width + records of
    (u16-LE id length, UTF-8 id, width x f32-LE).

Interactions travel as TSV with header
``drug_id target_id pocket_id label affinity split`` (empty field = absent).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError

EMBEDDING_MAGIC = b"TDTIEMB1"
MODALITIES = ("drug", "protein", "pocket", "peptide", "rna")
SPLITS = ("train", "valid", "test", "unassigned")

INTERACTION_COLUMNS = ("drug_id", "target_id", "pocket_id", "label", "affinity", "split")


class EmbeddingStore:
    """Immutable after load: id -> fixed-width float64 vector, one modality."""

    def __init__(self, modality: str):
        if modality not in MODALITIES:
            raise DataError(f"unknown modality {modality!r}")
        self.modality = modality
        self.width: int | None = None
        self._vecs: dict[str, np.ndarray] = {}

    def add(self, rec_id: str, vec) -> None:
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise FormatError(f"embedding {rec_id!r}: non-finite entry")
        if self.width is None:
            self.width = v.size
        elif v.size != self.width:
            raise FormatError(
                f"embedding {rec_id!r}: width {v.size} != store width {self.width}"
            )
        if rec_id in self._vecs:
            raise FormatError(f"duplicate embedding id {rec_id!r}")
        self._vecs[rec_id] = v

    def __len__(self):
        return len(self._vecs)

    def __contains__(self, rec_id):
        return rec_id in self._vecs

    def ids(self) -> list[str]:
        return list(self._vecs)

    def get(self, rec_id: str) -> np.ndarray:
        try:
            return self._vecs[rec_id]
        except KeyError:
            raise DataError(f"unknown {self.modality} id {rec_id!r}") from None

    def matrix(self, ids: list[str]) -> np.ndarray:
        """Column matrix (width, len(ids)) in the given order."""
        return np.stack([self.get(i) for i in ids], axis=1)


def load_embeddings(path: str | Path, modality: str) -> EmbeddingStore:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(len(EMBEDDING_MAGIC))
    if head == EMBEDDING_MAGIC:
        return _load_binary(path, modality)
    return _load_jsonl(path, modality)


def _load_jsonl(path: Path, modality: str) -> EmbeddingStore:
    store = EmbeddingStore(modality)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            for key in ("id", "kind", "vec"):
                if key not in rec:
                    raise FormatError(f"{path}:{lineno}: missing field {key!r}")
            if rec["kind"] != modality:
                raise FormatError(
                    f"{path}:{lineno}: record {rec['id']!r} has kind {rec['kind']!r}, "
                    f"expected {modality!r}"
                )
            store.add(rec["id"], rec["vec"])
    return store


def _load_binary(path: Path, modality: str) -> EmbeddingStore:
    data = path.read_bytes()
    if data[:8] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (width,) = struct.unpack_from("<I", data, 8)
    store = EmbeddingStore(modality)
    off = 12
    while off < len(data):
        if off + 2 > len(data):
            raise FormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + id_len + 4 * width > len(data):
            raise FormatError(f"{path}: truncated record body")
        rec_id = data[off : off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(data[off : off + 4 * width], dtype="<f4").astype(np.float64)
        off += 4 * width
        store.add(rec_id, vec)
    return store


def save_embeddings_jsonl(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec_id in store.ids():
            vec = store.get(rec_id)
            f.write(json.dumps({"id": rec_id, "kind": store.modality, "vec": vec.tolist()}) + "\n")


def save_embeddings_binary(store: EmbeddingStore, path: str | Path) -> None:
    """f32 on disk; values created by this package are f32-quantized, so the
    round trip is bit-exact."""
    if store.width is None:
        raise DataError("cannot write an empty store")
    chunks = [EMBEDDING_MAGIC, struct.pack("<I", store.width)]
    for rec_id in store.ids():
        raw = rec_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(store.get(rec_id).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


# -- interaction records --------------------------------------------------


@dataclass(frozen=True)
class InteractionRecord:
    drug_id: str
    target_id: str
    pocket_id: str | None = None
    label: int | None = None
    affinity: float | None = None
    split: str = "unassigned"

    def __post_init__(self):
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"label must be 0/1, got {self.label!r}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split tag {self.split!r}")

    def with_split(self, split: str) -> "InteractionRecord":
        return replace(self, split=split)


def load_interactions(path: str | Path) -> list[InteractionRecord]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if tuple(header) != INTERACTION_COLUMNS:
            raise FormatError(
                f"{path}: header {header} != expected {list(INTERACTION_COLUMNS)}"
            )
        records = []
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(INTERACTION_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(INTERACTION_COLUMNS)} fields")
            drug_id, target_id, pocket_id, label, affinity, split = parts
            try:
                records.append(
                    InteractionRecord(
                        drug_id=drug_id,
                        target_id=target_id,
                        pocket_id=pocket_id or None,
                        label=int(label) if label else None,
                        affinity=float(affinity) if affinity else None,
                        split=split or "unassigned",
                    )
                )
            except (ValueError, DataError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def save_interactions(records: list[InteractionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(INTERACTION_COLUMNS) + "\n")
        for r in records:
            f.write(
                "\t".join(
                    [
                        r.drug_id,
                        r.target_id,
                        r.pocket_id or "",
                        "" if r.label is None else str(r.label),
                        "" if r.affinity is None else repr(r.affinity),
                        r.split,
                    ]
                )
                + "\n"
            )


def validate_interactions(
    records: list[InteractionRecord],
    drugs: EmbeddingStore,
    targets: EmbeddingStore,
    pockets: EmbeddingStore | None = None,
    mode: str | None = None,
) -> None:
    """Every referenced id must resolve; no silent drops. In a given mode the
    corresponding supervision field must be present."""
    missing = []
    for r in records:
        if r.drug_id not in drugs:
            missing.append(f"drug {r.drug_id!r}")
        if r.target_id not in targets:
            missing.append(f"target {r.target_id!r}")
        if r.pocket_id is not None:
            if pockets is None or r.pocket_id not in pockets:
                missing.append(f"pocket {r.pocket_id!r}")
    if missing:
        raise DataError(f"unresolvable ids: {sorted(set(missing))[:10]} ({len(missing)} total)")
    if mode == "classification" and any(r.label is None for r in records):
        raise DataError("classification mode requires a label on every record")
    if mode == "regression" and any(r.affinity is None for r in records):
        raise DataError("regression mode requires an affinity on every record")


# -- SMILES records ---------------------------------------------------------


@dataclass(frozen=True)
class SmilesRecord:
    drug_id: str
    smiles: str


def load_smiles(path: str | Path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != ["drug_id", "smiles"]:
            raise FormatError(f"{path}: header {header} != ['drug_id', 'smiles']")
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields")
            out[parts[0]] = parts[1]
    return out


def save_smiles(smiles: dict[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("drug_id\tsmiles\n")
        for drug_id, s in smiles.items():
            f.write(f"{drug_id}\t{s}\n")


# -- projection export ------------------------------------------------------


def export_projections(state, store: EmbeddingStore, path: str | Path) -> None:
    """TSV of id + encoder-branch output for every record in the store.

    Drugs go through the drug branch; protein/peptide/rna through the
    protein branch; pockets through the pocket branch.
    """
    from . import model as model_mod

    c = state.config
    if store.modality == "drug":
        width = c.drug_dim
        encoder = state.encoder_drug
    elif store.modality == "pocket":
        if state.encoder_pocket is None:
            raise ShapeError("model has no pocket branch to project pockets through")
        width = c.pocket_dim
        encoder = state.encoder_pocket
    else:
        width = c.protein_dim
        encoder = state.encoder_protein
    if store.width != width:
        raise ShapeError(
            f"store width {store.width} != encoder input width {width} "
            f"for modality {store.modality!r}"
        )
    ids = store.ids()
    projected = model_mod.run_encoder(encoder, store.matrix(ids)) if ids else np.zeros((c.output_dim, 0))
    with open(path, "w", encoding="utf-8") as f:
        f.write("id\t" + "\t".join(f"z{i}" for i in range(c.output_dim)) + "\n")
        for col, rec_id in enumerate(ids):
            vals = "\t".join(repr(float(v)) for v in projected[:, col])
            f.write(f"{rec_id}\t{vals}\n")
