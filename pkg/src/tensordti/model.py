"""The interaction network: drug/protein projection encoders, weighted
pocket aggregation, interaction head, confidence head, and the drug
autoencoder behind the unfamiliarity score.

All functions take column-vector batches (dim, batch). Passing tape=None
runs pure inference on a throwaway tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError
from .nn import DenseLayer, Node, Param, Tape, dense_forward, init_dense
from .tokenizer import DEFAULT_ALPHABET, N_SPECIALS, PAD, SmilesTokenizer, TokenSeq

CHECKPOINT_MAGIC = b"TDTICKPT"
CHECKPOINT_VERSION = 1

MODES = ("classification", "regression")
CONTRASTIVE_VARIANTS = ("cosine_margin", "triplet_l2")


@dataclass
class ModelConfig:
    drug_dim: int
    protein_dim: int
    pocket_dim: int | None = None
    hidden_dim: int = 512
    output_dim: int = 256
    lambda_protein: float = 1.0
    lambda_pocket: float = 2.0
    mode: str = "classification"
    max_len: int = 128
    vocab: str = DEFAULT_ALPHABET
    latent_dim: int = 64
    alpha_cls: float = 0.4
    alpha_con: float = 0.2
    alpha_conf: float = 0.2
    alpha_recon: float = 0.2
    contrastive: str = "cosine_margin"
    margin: float = 1.0
    triplet_margin: float = 1.0
    unfamiliarity_eps: float = 1e-8
    error_scale: float = 1.0  # regression confidence target: min(1, |t-pred|/scale)

    def __post_init__(self):
        dims = [self.drug_dim, self.protein_dim, self.hidden_dim, self.output_dim, self.latent_dim]
        if self.pocket_dim is not None:
            dims.append(self.pocket_dim)
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all dimensions must be > 0, got {dims}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.contrastive not in CONTRASTIVE_VARIANTS:
            raise ConfigError(f"contrastive must be one of {CONTRASTIVE_VARIANTS}")
        if min(self.alpha_cls, self.alpha_con, self.alpha_conf, self.alpha_recon) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.margin <= 0 or self.triplet_margin <= 0:
            raise ConfigError("margins must be > 0")
        if self.unfamiliarity_eps <= 0:
            raise ConfigError("unfamiliarity eps must be > 0")

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + len(self.vocab)


def _two_layer(rng, in_dim, hidden, out_dim, name, final_act="identity") -> list[DenseLayer]:
    return [
        init_dense(rng, in_dim, hidden, "relu", f"{name}.0"),
        init_dense(rng, hidden, out_dim, final_act, f"{name}.1"),
    ]


@dataclass
class ModelState:
    config: ModelConfig
    encoder_drug: list[DenseLayer]
    encoder_protein: list[DenseLayer]
    encoder_pocket: list[DenseLayer] | None
    classifier: list[DenseLayer]
    conf_head: list[DenseLayer]
    ae_encoder: DenseLayer
    ae_decoder: DenseLayer
    tokenizer: SmilesTokenizer = field(init=False)

    def __post_init__(self):
        self.tokenizer = SmilesTokenizer(self.config.vocab, self.config.max_len)

    def parameters(self) -> list[Param]:
        layers: list[DenseLayer] = []
        layers += self.encoder_drug + self.encoder_protein
        if self.encoder_pocket is not None:
            layers += self.encoder_pocket
        layers += self.classifier + self.conf_head + [self.ae_encoder, self.ae_decoder]
        params: list[Param] = []
        for layer in layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def snapshot(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def restore(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            if p.value.shape != v.shape:
                raise ShapeError(f"snapshot shape {v.shape} != {p.name} shape {p.value.shape}")
            p.value = v.copy()


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    c = config
    return ModelState(
        config=c,
        encoder_drug=_two_layer(rng, c.drug_dim, c.hidden_dim, c.output_dim, "encoder_drug"),
        encoder_protein=_two_layer(rng, c.protein_dim, c.hidden_dim, c.output_dim, "encoder_protein"),
        encoder_pocket=(
            _two_layer(rng, c.pocket_dim, c.hidden_dim, c.output_dim, "encoder_pocket")
            if c.pocket_dim is not None
            else None
        ),
        classifier=_two_layer(rng, 2 * c.output_dim, c.hidden_dim, 1, "classifier"),
        conf_head=_two_layer(rng, 2 * c.output_dim + 1, c.hidden_dim, 1, "conf_head", final_act="sigmoid"),
        ae_encoder=init_dense(rng, c.drug_dim, c.latent_dim, "tanh", "ae_encoder"),
        ae_decoder=init_dense(rng, c.latent_dim, c.max_len * c.vocab_size, "identity", "ae_decoder"),
    )


def _run(layers: list[DenseLayer], x: Node, tape: Tape) -> Node:
    for layer in layers:
        x = dense_forward(layer, x, tape)
    return x


def _prep(x, tape: Tape, width: int, what: str) -> Node:
    if isinstance(x, Node):
        node = x
    else:
        node = tape.constant(x)
    if node.value.shape[0] != width:
        raise ShapeError(f"{what}: expected width {width}, got {node.value.shape[0]}")
    return node


def encode_drug(state: ModelState, vec, tape: Tape | None = None) -> Node:
    tape = tape or Tape()
    return _run(state.encoder_drug, _prep(vec, tape, state.config.drug_dim, "drug vector"), tape)


def run_encoder(layers: list[DenseLayer], x: np.ndarray) -> np.ndarray:
    """Inference-only pass of a column batch through an encoder branch."""
    tape = Tape()
    return _run(layers, tape.constant(x), tape).value


def encode_protein_with_pocket(state: ModelState, protein_vec, pocket_vec=None, tape: Tape | None = None) -> Node:
    """lambda_protein * E(protein) + lambda_pocket * K(pocket) when a pocket
    is given; plain E(protein) on the pocketless path."""
    tape = tape or Tape()
    c = state.config
    if pocket_vec is not None and state.encoder_pocket is None:
        raise ConfigError("pocket embedding supplied to a pocketless model")
    if pocket_vec is None and state.encoder_pocket is not None:
        raise ConfigError("model was built with a pocket branch; pocket embedding required")
    hp = _run(state.encoder_protein, _prep(protein_vec, tape, c.protein_dim, "protein vector"), tape)
    if pocket_vec is None:
        return hp
    if c.lambda_pocket == 0.0:
        # degenerate weight: identical (bit-for-bit) to the pocketless path
        return hp if c.lambda_protein == 1.0 else tape.affine(hp, c.lambda_protein)
    hk = _run(state.encoder_pocket, _prep(pocket_vec, tape, c.pocket_dim, "pocket vector"), tape)
    return tape.add(tape.affine(hp, c.lambda_protein), tape.affine(hk, c.lambda_pocket))


def interaction_logit(state: ModelState, e_d: Node, e_p: Node, tape: Tape | None = None) -> Node:
    """Classifier over the concatenated pair [e_d || e_p]; (1, batch) logits
    (raw affinity values in regression mode)."""
    tape = tape or Tape()
    out = state.config.output_dim
    if e_d.value.shape[0] != out or e_p.value.shape[0] != out:
        raise ShapeError(
            f"pair embeddings must have width {out}, got "
            f"{e_d.value.shape[0]} and {e_p.value.shape[0]}"
        )
    return _run(state.classifier, tape.concat_rows(e_d, e_p), tape)


def confidence(state: ModelState, e_d: Node, e_p: Node, logit: Node, tape: Tape | None = None) -> Node:
    """Sigmoid-bounded self-estimated error in (0,1); lower = more certain.

    Inputs are detached: the confidence loss trains this head only and can
    never reshape the encoders or the classifier that produce its inputs.
    """
    tape = tape or Tape()
    x = tape.concat_rows(tape.detach(e_d), tape.detach(e_p), tape.detach(logit))
    return _run(state.conf_head, x, tape)


def reconstruct(state: ModelState, drug_vec, tape: Tape | None = None) -> Node:
    """Token logits from the drug autoencoder, (max_len * vocab_size, batch),
    position-major."""
    tape = tape or Tape()
    z = dense_forward(state.ae_encoder, _prep(drug_vec, tape, state.config.drug_dim, "drug vector"), tape)
    return dense_forward(state.ae_decoder, z, tape)


def reconstruction_logit_matrix(state: ModelState, drug_vec) -> np.ndarray:
    """Single-drug convenience: logits reshaped to (max_len, vocab_size)."""
    out = reconstruct(state, np.asarray(drug_vec).reshape(-1, 1))
    return out.value.reshape(state.config.max_len, state.config.vocab_size)


def token_nll(logits: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> float:
    """Mean -log softmax(logits)[token] over scorable positions.

    logits: (n_positions, vocab); mask: 1.0 where the position counts.
    """
    if not np.any(mask > 0):
        raise DataError("no scorable tokens")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = logp[np.arange(logits.shape[0]), np.asarray(ids, dtype=np.intp)]
    return float(-(picked * mask).sum() / mask.sum())


def unfamiliarity(state: ModelState, drug_vec, tokens: TokenSeq, eps: float | None = None) -> float:
    """U = log(NLL + eps), natural log; monotone in the reconstruction NLL.

    Under this convention the U < 1.0 reliability boundary corresponds to
    NLL < e - eps.
    """
    eps = state.config.unfamiliarity_eps if eps is None else eps
    if eps <= 0:
        raise ConfigError("unfamiliarity eps must be > 0")
    logits = reconstruction_logit_matrix(state, drug_vec)
    mask = (tokens.ids != PAD).astype(np.float64)
    nll = token_nll(logits, tokens.ids, mask)
    return float(np.log(nll + eps))


def unfamiliarity_many(state: ModelState, drug_matrix, token_ids, pad_mask, eps: float | None = None) -> np.ndarray:
    """Vectorized unfamiliarity for a drug column batch.

    token_ids/pad_mask: (max_len, batch). Returns (batch,) U scores.
    """
    eps = state.config.unfamiliarity_eps if eps is None else eps
    n_pos, vocab = state.config.max_len, state.config.vocab_size
    batch = np.asarray(drug_matrix).shape[1]
    mask = np.asarray(pad_mask, dtype=np.float64).reshape(n_pos, batch)
    t_eff = mask.sum(axis=0)
    if np.any(t_eff == 0):
        raise DataError("no scorable tokens")
    cube = reconstruct(state, drug_matrix).value.reshape(n_pos, vocab, batch)
    shifted = cube - cube.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ids = np.asarray(token_ids, dtype=np.intp).reshape(n_pos, batch)
    picked = logp[np.arange(n_pos)[:, None], ids, np.arange(batch)[None, :]]
    nll = -(picked * mask).sum(axis=0) / t_eff
    return np.log(nll + eps)


# -- checkpoint I/O -------------------------------------------------------


def _config_json(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode("utf-8")


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Versioned binary: magic, version, config block, then parameter
    tensors in declaration order as little-endian f64. A JSON sidecar of the
    config is written next to it for human inspection."""
    path = Path(path)
    cfg = _config_json(state.config)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for p in state.parameters():
        rows, cols = p.value.shape
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(
        json.dumps(asdict(state.config), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:8]!r}")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, 12)
    off = 16
    try:
        raw = json.loads(data[off : off + cfg_len].decode("utf-8"))
        config = ModelConfig(**raw)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable config block: {exc}") from exc
    off += cfg_len
    state = init_model(config, seed=0)
    for p in state.parameters():
        if off + 8 > len(data):
            raise FormatError(f"{path}: truncated before parameter {p.name!r}")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        if (rows, cols) != p.value.shape:
            raise FormatError(
                f"{path}: parameter {p.name!r} declared ({rows}, {cols}), "
                f"config implies {p.value.shape}"
            )
        nbytes = rows * cols * 8
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated data for parameter {p.name!r}")
        p.value = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(rows, cols).astype(np.float64)
        off += nbytes
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after parameters")
    return state
