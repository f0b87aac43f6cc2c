"""
Tiny GRU-decoder attention model for desk-scale translation experiments
Forward pass with an explicit tape, hand-written reverse pass, Adam training,
beam search, GSCK checkpoint files and per-example gradient extraction
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from errors import (
    CheckpointFormatError,
    InvalidExampleError,
    InvalidMaskError,
    NumericOverflowError,
    TrainingDivergedError,
)

log = structlog.get_logger()

PAD, BOS, EOS, UNK = '<pad>', '<s>', '</s>', '<unk>'
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

COMPONENTS = ('srcEmb', 'trgEmb', 'encoder', 'decoder', 'output')

CHECKPOINT_MAGIC = b'GSCK'
CHECKPOINT_VERSION = 1

INIT_SCALE = 0.08
MASK_FILL = -1e9


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Ordered token list; line index is the id, specials occupy ids 0-3"""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"Vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            dupes = sorted({t for t in tokens if tokens.count(t) > 1})
            raise ValueError(f"Duplicate tokens in vocabulary: {dupes[:10]}")
        self.tokens = tokens
        self.index = {token: i for i, token in enumerate(tokens)}
        self.pad_id = PAD_ID
        self.bos_id = BOS_ID
        self.eos_id = EOS_ID
        self.unk_id = UNK_ID

    @classmethod
    def build(cls, words: Iterable[str]) -> 'Vocabulary':
        """Specials followed by the words in first-seen order"""
        seen = list(SPECIAL_TOKENS)
        known = set(seen)
        for word in words:
            if word not in known:
                known.add(word)
                seen.append(word)
        return cls(seen)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.index.get(t, self.unk_id) for t in tokens)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] if 0 <= i < len(self.tokens) else UNK for i in ids]

    def content_hash(self) -> str:
        return hashlib.sha256('\n'.join(self.tokens).encode('utf-8')).hexdigest()

    def save(self, path: Union[str, Path]):
        Path(path).write_text('\n'.join(self.tokens) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocabulary':
        lines = Path(path).read_text(encoding='utf-8').split('\n')
        if lines and lines[-1] == '':
            lines = lines[:-1]
        return cls(lines)


def save_vocabulary(vocab: Vocabulary, path: Union[str, Path]):
    vocab.save(path)


def load_vocabulary(path: Union[str, Path]) -> Vocabulary:
    return Vocabulary.load(path)


# ---------------------------------------------------------------------------
# Configuration and parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    hidden_dim: int = 16
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    tie_trg_embedding_and_output: bool = False
    src_vocab_size: int = 0
    trg_vocab_size: int = 0
    max_positions: int = 32
    dtype: str = 'float32'

    def validate(self) -> Tuple[bool, List[str]]:
        """
        Check dimensions and tying constraints

        Returns:
            (is_valid, errors)
        """
        errors = []
        for name in ('embed_dim', 'hidden_dim', 'num_encoder_layers', 'num_decoder_layers',
                     'src_vocab_size', 'trg_vocab_size', 'max_positions'):
            if getattr(self, name) <= 0:
                errors.append(f"model.{name} must be > 0")
        for name in ('src_vocab_size', 'trg_vocab_size'):
            if 0 < getattr(self, name) <= len(SPECIAL_TOKENS):
                errors.append(f"model.{name} must exceed the {len(SPECIAL_TOKENS)} special tokens")
        if self.tie_trg_embedding_and_output and self.embed_dim != self.hidden_dim:
            errors.append("model.tie_trg_embedding_and_output requires embed_dim == hidden_dim")
        if self.dtype not in ('float32', 'float64'):
            errors.append("model.dtype must be 'float32' or 'float64'")
        return len(errors) == 0, errors

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == 'float64' else np.float32

    def to_dict(self) -> Dict:
        return asdict(self)


def tensor_specs(config: ModelConfig) -> List[Tuple[str, str, Tuple[int, ...]]]:
    """(tensor name, component, shape) in flat-vector order"""
    E, H, P = config.embed_dim, config.hidden_dim, config.max_positions
    Vs, Vt = config.src_vocab_size, config.trg_vocab_size

    specs = [
        ('src_embedding', 'srcEmb', (Vs, E)),
        ('trg_embedding', 'trgEmb', (Vt, E)),
        ('enc_pos', 'encoder', (P, E)),
    ]
    in_dim = E
    for layer in range(config.num_encoder_layers):
        specs.append((f'enc_w{layer}', 'encoder', (in_dim, H)))
        specs.append((f'enc_b{layer}', 'encoder', (H,)))
        in_dim = H

    # GRU gate blocks are laid out [update | reset | candidate]
    specs += [
        ('dec_gru_w', 'decoder', (E, 3 * H)),
        ('dec_gru_u', 'decoder', (H, 3 * H)),
        ('dec_gru_b', 'decoder', (3 * H,)),
    ]
    for layer in range(1, config.num_decoder_layers):
        specs.append((f'dec_w{layer}', 'decoder', (H, H)))
        specs.append((f'dec_b{layer}', 'decoder', (H,)))
    specs += [
        ('dec_w_att', 'decoder', (H, H)),
        ('dec_w_comb', 'decoder', (2 * H, H)),
        ('dec_b_comb', 'decoder', (H,)),
        ('dec_b_out', 'decoder', (Vt,)),
    ]
    if not config.tie_trg_embedding_and_output:
        specs.append(('out_w', 'output', (Vt, H)))
    return specs


@dataclass(frozen=True)
class Layout:
    """Component and tensor offsets into the flat parameter vector"""
    components: Tuple[Tuple[str, int, int], ...]
    tensors: Tuple[Tuple[str, int, Tuple[int, ...]], ...]
    size: int
    aliases: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def for_config(cls, config: ModelConfig) -> 'Layout':
        offset = 0
        tensors = []
        spans: Dict[str, List[int]] = {}
        for name, component, shape in tensor_specs(config):
            length = int(np.prod(shape))
            tensors.append((name, offset, tuple(shape)))
            span = spans.setdefault(component, [offset, 0])
            span[1] += length
            offset += length

        components = [(name, spans[name][0], spans[name][1]) for name in COMPONENTS if name in spans]
        aliases = ()
        if config.tie_trg_embedding_and_output:
            _, trg_offset, trg_length = next(c for c in components if c[0] == 'trgEmb')
            components.append(('output', trg_offset, trg_length))
            trg_tensor = next(t for t in tensors if t[0] == 'trg_embedding')
            tensors.append(('out_w', trg_tensor[1], trg_tensor[2]))
            aliases = (('output', 'trgEmb'),)
        return cls(tuple(components), tuple(tensors), offset, aliases)

    def component_slice(self, name: str) -> slice:
        for comp, offset, length in self.components:
            if comp == name:
                return slice(offset, offset + length)
        raise KeyError(f"Unknown component '{name}'")

    def tensor_slot(self, name: str) -> Tuple[int, Tuple[int, ...]]:
        for tensor, offset, shape in self.tensors:
            if tensor == name:
                return offset, shape
        raise KeyError(f"Unknown tensor '{name}'")

    def primary_components(self) -> List[Tuple[str, int, int]]:
        """Components excluding aliases (these partition the flat vector)"""
        aliased = {alias for alias, _ in self.aliases}
        return [c for c in self.components if c[0] not in aliased]

    def partitions(self) -> bool:
        offset = 0
        for _, start, length in self.primary_components():
            if start != offset:
                return False
            offset += length
        return offset == self.size

    def to_table(self) -> List[List]:
        return [[name, offset, length] for name, offset, length in self.components]

    def to_dict(self) -> Dict:
        return {
            'components': self.to_table(),
            'tensors': [[name, offset, list(shape)] for name, offset, shape in self.tensors],
            'size': self.size,
            'aliases': [list(a) for a in self.aliases],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'Layout':
        return cls(
            components=tuple((c[0], int(c[1]), int(c[2])) for c in data['components']),
            tensors=tuple((t[0], int(t[1]), tuple(int(d) for d in t[2])) for t in data['tensors']),
            size=int(data['size']),
            aliases=tuple((a[0], a[1]) for a in data.get('aliases', [])),
        )


class _TensorViews:
    """Named reshaped views into a flat vector"""

    layout: Layout
    values: np.ndarray

    def tensor(self, name: str) -> np.ndarray:
        offset, shape = self.layout.tensor_slot(name)
        length = int(np.prod(shape))
        return self.values[offset:offset + length].reshape(shape)

    def component(self, name: str) -> np.ndarray:
        return self.values[self.layout.component_slice(name)]


class ParameterSet(_TensorViews):
    """Flat parameter vector with named component and tensor views"""

    def __init__(self, config: ModelConfig, values: Optional[np.ndarray] = None):
        self.config = config
        self.layout = Layout.for_config(config)
        if values is None:
            self.values = np.zeros(self.layout.size, dtype=config.np_dtype)
        else:
            values = np.ascontiguousarray(values)
            if values.shape != (self.layout.size,):
                raise ValueError(f"Expected {self.layout.size} parameters, got {values.shape}")
            self.values = values

    def copy(self) -> 'ParameterSet':
        return ParameterSet(self.config, self.values.copy())

    def astype(self, dtype) -> 'ParameterSet':
        return ParameterSet(self.config, self.values.astype(dtype))

    def __len__(self) -> int:
        return self.layout.size


class GradientVector(_TensorViews):
    """Per-example loss gradient laid out like the ParameterSet"""

    def __init__(
        self,
        layout: Layout,
        values: np.ndarray,
        example_id: Optional[int] = None,
        epoch: Optional[int] = None,
        mask_id: Optional[str] = None,
    ):
        if values.shape != (layout.size,):
            raise ValueError(f"Gradient length {values.shape} does not match layout size {layout.size}")
        self.layout = layout
        self.values = values
        self.example_id = example_id
        self.epoch = epoch
        self.mask_id = mask_id
        self._norms: Dict[Tuple, float] = {}

    def cached_norm(self, key: Tuple, compute) -> float:
        """Memoise a restricted norm; vectors are treated as immutable once built"""
        if key not in self._norms:
            self._norms[key] = compute()
        return self._norms[key]

    def __sub__(self, other: 'GradientVector') -> 'GradientVector':
        return GradientVector(self.layout, self.values - other.values, self.example_id, self.epoch, self.mask_id)

    def __neg__(self) -> 'GradientVector':
        return GradientVector(self.layout, -self.values, self.example_id, self.epoch, self.mask_id)

    def scaled(self, alpha: float) -> 'GradientVector':
        return GradientVector(self.layout, (self.values * alpha).astype(self.values.dtype),
                              self.example_id, self.epoch, self.mask_id)

    def __len__(self) -> int:
        return self.layout.size


@dataclass
class CheckpointSnapshot:
    epoch: int
    params: ParameterSet
    validation_loss: float


@dataclass(frozen=True)
class TokenPair:
    """Id-encoded source/target pair as consumed by the model"""
    src: Tuple[int, ...]
    trg: Tuple[int, ...]
    example_id: Optional[int] = None


def encode_pair(example, src_vocab: Vocabulary, trg_vocab: Vocabulary) -> TokenPair:
    """Encode anything with .src/.trg token lists (and optional .id)"""
    return TokenPair(src_vocab.encode(example.src), trg_vocab.encode(example.trg), getattr(example, 'id', None))


def init_params(config: ModelConfig, seed: int, scale: float = INIT_SCALE) -> ParameterSet:
    ok, errors = config.validate()
    if not ok:
        raise ValueError("; ".join(errors))
    rng = np.random.default_rng(seed)
    layout = Layout.for_config(config)
    values = rng.uniform(-scale, scale, size=layout.size).astype(config.np_dtype)
    return ParameterSet(config, values)


# ---------------------------------------------------------------------------
# Forward pass with tape
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Everything the reverse pass needs"""
    src: np.ndarray
    src_mask: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    weights: np.ndarray
    src_pos: np.ndarray
    enc_layers: List[Tuple[np.ndarray, np.ndarray]]
    dec_emb: np.ndarray
    gru_prev: np.ndarray
    gru_z: np.ndarray
    gru_r: np.ndarray
    gru_n: np.ndarray
    dec_layers: List[Tuple[np.ndarray, np.ndarray]]
    enc_out: np.ndarray
    query: np.ndarray
    keys: np.ndarray
    attention: np.ndarray
    combined_in: np.ndarray
    combined: np.ndarray
    log_probs: np.ndarray


def _check_pair(pair: TokenPair, config: ModelConfig):
    if len(pair.src) == 0 or len(pair.trg) == 0:
        raise InvalidExampleError(f"Example {pair.example_id} has an empty side")
    if min(pair.src) < 0 or max(pair.src) >= config.src_vocab_size:
        raise InvalidExampleError(f"Example {pair.example_id} has source ids outside the vocabulary")
    if min(pair.trg) < 0 or max(pair.trg) >= config.trg_vocab_size:
        raise InvalidExampleError(f"Example {pair.example_id} has target ids outside the vocabulary")


def _token_weights(pair: TokenPair, mask: Optional[Sequence[float]], reduction: str) -> np.ndarray:
    """
    Loss weights over target tokens plus the EOS prediction

    The EOS position inherits the mask value of the final target token.
    """
    n = len(pair.trg)
    if mask is None:
        weights = np.ones(n + 1, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 1 or mask.shape[0] != n:
            raise InvalidMaskError(f"Mask length {mask.shape} does not match target length {n}")
        if not np.all((mask == 0) | (mask == 1)):
            raise InvalidMaskError("Mask entries must be 0 or 1")
        weights = np.append(mask, mask[-1])
    if reduction == 'mean':
        total = weights.sum()
        weights = weights / total if total > 0 else np.zeros_like(weights)
    elif reduction != 'sum':
        raise ValueError(f"Unknown reduction '{reduction}'")
    return weights


def _make_batch(pairs: Sequence[TokenPair], masks: Optional[Sequence], reduction: str, dtype):
    B = len(pairs)
    S = max(len(p.src) for p in pairs) + 1
    T = max(len(p.trg) for p in pairs) + 1
    src = np.full((B, S), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=bool)
    dec_in = np.full((B, T), PAD_ID, dtype=np.int64)
    dec_out = np.full((B, T), PAD_ID, dtype=np.int64)
    weights = np.zeros((B, T), dtype=dtype)
    for i, pair in enumerate(pairs):
        s = list(pair.src) + [EOS_ID]
        src[i, :len(s)] = s
        src_mask[i, :len(s)] = True
        t = list(pair.trg)
        dec_in[i, :len(t) + 1] = [BOS_ID] + t
        dec_out[i, :len(t) + 1] = t + [EOS_ID]
        mask = masks[i] if masks is not None else None
        weights[i, :len(t) + 1] = _token_weights(pair, mask, reduction) / B
    return src, src_mask, dec_in, dec_out, weights


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _encode_source(params: ParameterSet, src: np.ndarray):
    config = params.config
    src_pos = np.minimum(np.arange(src.shape[1]), config.max_positions - 1)
    h = params.tensor('src_embedding')[src] + params.tensor('enc_pos')[src_pos]
    layers = []
    for layer in range(config.num_encoder_layers):
        h_in = h
        h = np.tanh(h_in @ params.tensor(f'enc_w{layer}') + params.tensor(f'enc_b{layer}'))
        layers.append((h_in, h))
    return h, layers, src_pos


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * x))


def _gru_step(params: ParameterSet, x: np.ndarray, s_prev: np.ndarray):
    """One GRU transition; returns the new state and the update, reset and candidate activations"""
    H = params.config.hidden_dim
    u = params.tensor('dec_gru_u')
    gx = x @ params.tensor('dec_gru_w') + params.tensor('dec_gru_b')
    gh = s_prev @ u[:, :2 * H]
    z = _sigmoid(gx[..., :H] + gh[..., :H])
    r = _sigmoid(gx[..., H:2 * H] + gh[..., H:])
    n = np.tanh(gx[..., 2 * H:] + (r * s_prev) @ u[:, 2 * H:])
    return (1 - z) * n + z * s_prev, z, r, n


def _initial_state(params: ParameterSet, k: int) -> np.ndarray:
    return np.zeros((k, params.config.hidden_dim), dtype=params.values.dtype)


def _decoder_states(params: ParameterSet, dec_in: np.ndarray):
    """Teacher-forced GRU states over the whole decoder input, plus what the reverse pass needs"""
    emb = params.tensor('trg_embedding')[dec_in]
    B, T = dec_in.shape
    shape = (B, T, params.config.hidden_dim)
    states, prev, zs, rs, ns = (np.zeros(shape, dtype=emb.dtype) for _ in range(5))
    s = _initial_state(params, B)
    for t in range(T):
        prev[:, t] = s
        s, zs[:, t], rs[:, t], ns[:, t] = _gru_step(params, emb[:, t], s)
        states[:, t] = s
    return states, emb, (prev, zs, rs, ns)


def _query_stack(params: ParameterSet, states: np.ndarray):
    """Extra tanh layers on top of the GRU state"""
    q = states
    layers = []
    for layer in range(1, params.config.num_decoder_layers):
        q_in = q
        q = np.tanh(q_in @ params.tensor(f'dec_w{layer}') + params.tensor(f'dec_b{layer}'))
        layers.append((q_in, q))
    return q, layers


def _attend_and_project(params: ParameterSet, q: np.ndarray, enc_out: np.ndarray, src_mask: np.ndarray):
    keys = q @ params.tensor('dec_w_att')
    scores = keys @ np.swapaxes(enc_out, -1, -2)
    scores = np.where(src_mask[..., None, :], scores, np.asarray(MASK_FILL, dtype=scores.dtype))
    attention = _softmax(scores)
    context = attention @ enc_out
    combined_in = np.concatenate([q, context], axis=-1)
    combined = np.tanh(combined_in @ params.tensor('dec_w_comb') + params.tensor('dec_b_comb'))
    logits = combined @ params.tensor('out_w').T + params.tensor('dec_b_out')
    return keys, attention, combined_in, combined, _log_softmax(logits)


def _forward(params: ParameterSet, pairs: Sequence[TokenPair], masks, reduction: str) -> Tuple[np.floating, Tape]:
    config = params.config
    for pair in pairs:
        _check_pair(pair, config)
    dtype = params.values.dtype
    src, src_mask, dec_in, dec_out, weights = _make_batch(pairs, masks, reduction, dtype)

    enc_out, enc_layers, src_pos = _encode_source(params, src)
    states, dec_emb, (gru_prev, gru_z, gru_r, gru_n) = _decoder_states(params, dec_in)
    q, dec_layers = _query_stack(params, states)
    keys, attention, combined_in, combined, log_probs = _attend_and_project(params, q, enc_out, src_mask)

    picked = np.take_along_axis(log_probs, dec_out[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum()
    tape = Tape(src, src_mask, dec_in, dec_out, weights, src_pos, enc_layers, dec_emb,
                gru_prev, gru_z, gru_r, gru_n, dec_layers, enc_out, q, keys, attention,
                combined_in, combined, log_probs)
    return loss, tape


def forward_loss(
    params: ParameterSet,
    example: TokenPair,
    mask: Optional[Sequence[float]] = None,
    reduction: str = 'mean',
) -> Tuple[float, Tape]:
    """
    Loss of one example and the tape for an exact backward pass

    Args:
        params: Model parameters
        example: Id-encoded pair
        mask: Optional 0/1 mask over target tokens
        reduction: 'mean' over unmasked tokens (default) or un-normalized 'sum'

    Returns:
        (loss, tape)
    """
    loss, tape = _forward(params, [example], None if mask is None else [mask], reduction)
    return float(loss), tape


def batch_loss(params: ParameterSet, pairs: Sequence[TokenPair], reduction: str = 'mean') -> Tuple[float, Tape]:
    """Average per-sentence loss over a batch"""
    loss, tape = _forward(params, pairs, None, reduction)
    return float(loss), tape


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(params: ParameterSet, tape: Tape) -> GradientVector:
    """Exact gradient of the taped loss w.r.t. every parameter"""
    config = params.config
    grads = GradientVector(params.layout, np.zeros_like(params.values))
    H = config.hidden_dim

    # output projection
    d_logits = np.exp(tape.log_probs)
    B, T, V = d_logits.shape
    np.put_along_axis(
        d_logits, tape.dec_out[..., None],
        np.take_along_axis(d_logits, tape.dec_out[..., None], axis=-1) - 1, axis=-1,
    )
    d_logits *= tape.weights[..., None]
    flat_logits = d_logits.reshape(-1, V)
    grads.tensor('dec_b_out')[...] += flat_logits.sum(axis=0)
    grads.tensor('out_w')[...] += flat_logits.T @ tape.combined.reshape(-1, H)
    d_combined = d_logits @ params.tensor('out_w')

    d_pre = d_combined * (1 - tape.combined ** 2)
    grads.tensor('dec_w_comb')[...] += tape.combined_in.reshape(-1, 2 * H).T @ d_pre.reshape(-1, H)
    grads.tensor('dec_b_comb')[...] += d_pre.reshape(-1, H).sum(axis=0)
    d_combined_in = d_pre @ params.tensor('dec_w_comb').T
    d_query = d_combined_in[..., :H].copy()
    d_context = d_combined_in[..., H:]

    # attention
    enc_out_t = np.swapaxes(tape.enc_out, -1, -2)
    d_attention = d_context @ enc_out_t
    d_enc_out = np.swapaxes(tape.attention, -1, -2) @ d_context
    d_scores = tape.attention * (d_attention - (d_attention * tape.attention).sum(axis=-1, keepdims=True))
    d_keys = d_scores @ tape.enc_out
    d_enc_out += np.swapaxes(d_scores, -1, -2) @ tape.keys
    grads.tensor('dec_w_att')[...] += tape.query.reshape(-1, H).T @ d_keys.reshape(-1, H)
    d_query += d_keys @ params.tensor('dec_w_att').T

    # decoder query stack; tape.dec_layers[i] belongs to layer i + 1
    for layer in range(config.num_decoder_layers - 1, 0, -1):
        q_in, q_out = tape.dec_layers[layer - 1]
        d_pre = d_query * (1 - q_out ** 2)
        grads.tensor(f'dec_w{layer}')[...] += q_in.reshape(-1, H).T @ d_pre.reshape(-1, H)
        grads.tensor(f'dec_b{layer}')[...] += d_pre.reshape(-1, H).sum(axis=0)
        d_query = d_pre @ params.tensor(f'dec_w{layer}').T

    # GRU, back through time
    w, u = params.tensor('dec_gru_w'), params.tensor('dec_gru_u')
    g_w, g_u, g_b = grads.tensor('dec_gru_w'), grads.tensor('dec_gru_u'), grads.tensor('dec_gru_b')
    d_emb = np.zeros_like(tape.dec_emb)
    d_next = np.zeros_like(d_query[:, 0])
    for t in range(T - 1, -1, -1):
        ds = d_query[:, t] + d_next
        s_prev, z, r, n = tape.gru_prev[:, t], tape.gru_z[:, t], tape.gru_r[:, t], tape.gru_n[:, t]
        d_n_pre = ds * (1 - z) * (1 - n ** 2)
        d_z_pre = ds * (s_prev - n) * z * (1 - z)
        d_reset_state = d_n_pre @ u[:, 2 * H:].T
        d_r_pre = d_reset_state * s_prev * r * (1 - r)
        d_gates = np.concatenate([d_z_pre, d_r_pre, d_n_pre], axis=-1)
        g_w += tape.dec_emb[:, t].T @ d_gates
        g_b += d_gates.sum(axis=0)
        g_u[:, :2 * H] += s_prev.T @ d_gates[:, :2 * H]
        g_u[:, 2 * H:] += (r * s_prev).T @ d_n_pre
        d_emb[:, t] = d_gates @ w.T
        d_next = ds * z + d_reset_state * r + d_gates[:, :2 * H] @ u[:, :2 * H].T
    np.add.at(grads.tensor('trg_embedding'), tape.dec_in, d_emb)

    # encoder
    d_h = d_enc_out
    for layer in range(config.num_encoder_layers - 1, -1, -1):
        h_in, h_out = tape.enc_layers[layer]
        d_pre = d_h * (1 - h_out ** 2)
        in_dim = h_in.shape[-1]
        grads.tensor(f'enc_w{layer}')[...] += h_in.reshape(-1, in_dim).T @ d_pre.reshape(-1, H)
        grads.tensor(f'enc_b{layer}')[...] += d_pre.reshape(-1, H).sum(axis=0)
        d_h = d_pre @ params.tensor(f'enc_w{layer}').T
    np.add.at(grads.tensor('enc_pos'), tape.src_pos, d_h.sum(axis=0))
    np.add.at(grads.tensor('src_embedding'), tape.src, d_h)
    return grads


def per_example_gradient(
    snapshot: Union[CheckpointSnapshot, ParameterSet],
    example: TokenPair,
    mask: Optional[Sequence[float]] = None,
    reduction: str = 'mean',
    mask_id: Optional[str] = None,
) -> GradientVector:
    """
    Gradient of one example's loss at one checkpoint (batch size 1)

    Pure with respect to the snapshot; safe to call from several threads.
    """
    params = snapshot.params if isinstance(snapshot, CheckpointSnapshot) else snapshot
    epoch = snapshot.epoch if isinstance(snapshot, CheckpointSnapshot) else None
    _, tape = forward_loss(params, example, mask, reduction)
    grads = backward(params, tape)
    for name, offset, length in grads.layout.components:
        if not np.all(np.isfinite(grads.values[offset:offset + length])):
            raise NumericOverflowError(name)
    grads.example_id = example.example_id
    grads.epoch = epoch
    grads.mask_id = mask_id
    return grads


def sequence_log_prob(params: ParameterSet, src: Sequence[int], trg: Sequence[int]) -> float:
    """log p(trg + EOS | src) under the model; empty trg scores EOS alone"""
    if len(trg) == 0:
        enc_out, _, _ = _encode_source(params, np.asarray([list(src) + [EOS_ID]]))
        log_probs, _ = _step_log_probs(params, enc_out, np.ones((1, enc_out.shape[1]), dtype=bool),
                                       np.asarray([BOS_ID]), _initial_state(params, 1))
        return float(log_probs[0, EOS_ID])
    loss, _ = forward_loss(params, TokenPair(tuple(src), tuple(trg)), reduction='sum')
    return -loss


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _step_log_probs(params: ParameterSet, enc_out: np.ndarray, src_mask: np.ndarray,
                    prev: np.ndarray, state: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Advance k decoder states by one token; returns next-token log probs and the new states"""
    state, *_ = _gru_step(params, params.tensor('trg_embedding')[prev], state)
    q, _ = _query_stack(params, state[:, None, :])
    k = len(prev)
    enc = np.broadcast_to(enc_out, (k,) + enc_out.shape[1:])
    mask = np.broadcast_to(src_mask, (k,) + src_mask.shape[1:])
    *_, log_probs = _attend_and_project(params, q, enc, mask)
    return log_probs[:, 0, :], state


def _greedy(params, enc_out, src_mask, max_len) -> List[int]:
    out: List[int] = []
    prev = BOS_ID
    state = _initial_state(params, 1)
    for _ in range(max_len):
        log_probs, state = _step_log_probs(params, enc_out, src_mask, np.asarray([prev]), state)
        log_probs = log_probs[0]
        log_probs[[PAD_ID, BOS_ID]] = -np.inf
        token = int(np.argmax(log_probs))
        if token == EOS_ID:
            break
        out.append(token)
        prev = token
    return out


def decode(params: ParameterSet, src: Sequence[int], beam: int = 5, max_len: Optional[int] = None) -> List[int]:
    """
    Beam search; beam=1 is greedy argmax decoding

    Output stops at EOS or at 2*len(src)+5 tokens.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if len(src) == 0:
        raise ValueError("source must be nonempty")
    max_len = max_len or 2 * len(src) + 5
    src_ids = np.asarray([list(src) + [EOS_ID]])
    src_mask = np.ones_like(src_ids, dtype=bool)
    enc_out, _, _ = _encode_source(params, src_ids)

    greedy = _greedy(params, enc_out, src_mask, max_len)
    if beam == 1:
        return greedy

    beams = [((), 0.0, _initial_state(params, 1)[0])]
    finished: List[Tuple[Tuple[int, ...], float]] = []
    for _ in range(max_len):
        prev = np.asarray([toks[-1] if toks else BOS_ID for toks, _, _ in beams])
        states = np.stack([state for _, _, state in beams])
        log_probs, new_states = _step_log_probs(params, enc_out, src_mask, prev, states)
        log_probs = log_probs.astype(np.float64)
        log_probs[:, [PAD_ID, BOS_ID]] = -np.inf
        totals = np.asarray([score for _, score, _ in beams])[:, None] + log_probs
        flat = totals.ravel()
        order = np.argsort(-flat, kind='stable')[:beam]
        next_beams = []
        V = log_probs.shape[1]
        for idx in order:
            b, token = divmod(int(idx), V)
            score = float(flat[idx])
            if not np.isfinite(score):
                continue
            toks = beams[b][0]
            if token == EOS_ID:
                finished.append((toks, score))
            else:
                next_beams.append((toks + (token,), score, new_states[b]))
        beams = next_beams
        if not beams:
            break
        best_active = max(score for _, score, _ in beams)
        if len(finished) >= beam and max(score for _, score in finished) >= best_active:
            break
    finished.extend((toks, score) for toks, score, _ in beams)

    # the greedy path is always a candidate, so widening the beam never scores below it
    candidates = [list(toks) for toks, _ in sorted(finished, key=lambda x: -x[1])] + [greedy]
    scored = [(sequence_log_prob(params, src, cand), -i, cand) for i, cand in enumerate(candidates)]
    return max(scored)[2]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainOptions:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 5e-3
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    optimizer: str = 'adam'
    seed: int = 1234
    checkpoint_epochs: List[int] = field(default_factory=list)

    def validate(self) -> Tuple[bool, List[str]]:
        errors = []
        if self.epochs < 0:
            errors.append("train.epochs must be >= 0")
        if self.batch_size < 1:
            errors.append("train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            errors.append("train.learning_rate must be > 0")
        if self.optimizer != 'adam':
            errors.append("train.optimizer must be 'adam'")
        bad = [e for e in self.checkpoint_epochs if not 1 <= e <= self.epochs]
        if bad:
            errors.append(f"train.checkpoint_epochs outside [1, {self.epochs}]: {bad}")
        return len(errors) == 0, errors


@dataclass
class TrainingHistory:
    initial_validation_loss: float
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def validation_losses(self) -> List[float]:
        return [val for _, _, val in self.rows]

    def to_csv(self) -> str:
        lines = ['epoch,train_loss,val_loss']
        lines += [f"{epoch},{train!r},{val!r}" for epoch, train, val in self.rows]
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_csv(cls, text: str, initial_validation_loss: float = float('nan')) -> 'TrainingHistory':
        rows = []
        for line in text.strip().split('\n')[1:]:
            epoch, train, val = line.split(',')
            rows.append((int(epoch), float(train), float(val)))
        return cls(initial_validation_loss, rows)


@dataclass
class TrainingResult:
    snapshots: List[CheckpointSnapshot]
    history: TrainingHistory
    params: ParameterSet


class Adam:
    """Adam over the flat parameter vector"""

    def __init__(self, size: int, dtype, lr: float, betas: Tuple[float, float], eps: float):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params: ParameterSet, grads: GradientVector):
        self.t += 1
        g = grads.values
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.values -= update.astype(params.values.dtype)


def evaluate_loss(params: ParameterSet, pairs: Sequence[TokenPair], batch_size: int = 256) -> float:
    """Mean per-sentence loss over a corpus"""
    if not pairs:
        return float('nan')
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        loss, _ = batch_loss(params, chunk)
        total += loss * len(chunk)
    return total / len(pairs)


def train(
    config: ModelConfig,
    corpus: Sequence[TokenPair],
    opts: TrainOptions,
    validation: Optional[Sequence[TokenPair]] = None,
) -> TrainingResult:
    """
    Train with Adam and snapshot the requested epochs

    Single-threaded with a fixed batch order so a seed fixes every checkpoint.

    Args:
        config: Model configuration
        corpus: Training pairs (nonempty)
        opts: Epochs, batch size, learning rate, seed, checkpoint epochs
        validation: Held-out pairs; defaults to the training corpus

    Returns:
        TrainingResult with snapshots, loss history and final parameters
    """
    if not corpus:
        raise ValueError("Training corpus is empty")
    ok, errors = opts.validate()
    if not ok:
        raise ValueError("; ".join(errors))
    validation = list(validation) if validation else list(corpus)
    wanted = set(opts.checkpoint_epochs) if opts.checkpoint_epochs else set(range(1, opts.epochs + 1))

    rng = np.random.default_rng(opts.seed)
    params = init_params(config, int(rng.integers(0, 2 ** 31 - 1)))
    optimizer = Adam(params.layout.size, params.values.dtype, opts.learning_rate, opts.betas, opts.eps)
    history = TrainingHistory(evaluate_loss(params, validation))
    snapshots: List[CheckpointSnapshot] = []

    log.info("Training started", examples=len(corpus), params=params.layout.size,
             epochs=opts.epochs, batch_size=opts.batch_size)
    corpus = list(corpus)
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(corpus))
        train_total = 0.0
        for start in range(0, len(order), opts.batch_size):
            batch = [corpus[i] for i in order[start:start + opts.batch_size]]
            loss, tape = batch_loss(params, batch)
            grads = backward(params, tape)
            optimizer.step(params, grads)
            train_total += loss * len(batch)

        val_loss = evaluate_loss(params, validation)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        history.rows.append((epoch, train_total / len(corpus), val_loss))
        log.info("Epoch finished", epoch=epoch, train_loss=round(train_total / len(corpus), 5),
                 val_loss=round(val_loss, 5))
        if epoch in wanted:
            snapshots.append(CheckpointSnapshot(epoch, params.copy(), val_loss))

    return TrainingResult(snapshots, history, params)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(
    config: ModelConfig,
    seed: int,
    step: float = 1e-6,
    mask: Optional[Sequence[float]] = None,
    src_len: int = 3,
    trg_len: int = 3,
) -> float:
    """
    Compare the analytic gradient with central differences

    Runs in 64-bit mode; the perturbed losses are evaluated in extended
    precision where the platform has it, so round-off stays far below the step.

    Returns:
        max over parameters of |analytic - numeric| / (|analytic| + 1e-12)
    """
    config = replace(config, dtype='float64')
    if Layout.for_config(config).size > 500:
        raise ValueError("Gradient check expects a model with at most 500 parameters")
    if mask is not None and len(mask) != trg_len:
        raise InvalidMaskError(f"Mask length {len(mask)} does not match target length {trg_len}")

    rng = np.random.default_rng(seed)
    params = init_params(config, int(rng.integers(0, 2 ** 31 - 1)), scale=0.5)
    first = len(SPECIAL_TOKENS)
    example = TokenPair(
        tuple(int(x) for x in rng.integers(first, config.src_vocab_size, size=src_len)),
        tuple(int(x) for x in rng.integers(first, config.trg_vocab_size, size=trg_len)),
    )
    analytic = per_example_gradient(params, example, mask).values

    wide = params.astype(np.longdouble)
    numeric = np.zeros_like(analytic)
    h = np.longdouble(step)
    for i in range(wide.values.shape[0]):
        original = wide.values[i]
        wide.values[i] = original + h
        plus, _ = _forward(wide, [example], None if mask is None else [mask], 'mean')
        wide.values[i] = original - h
        minus, _ = _forward(wide, [example], None if mask is None else [mask], 'mean')
        wide.values[i] = original
        numeric[i] = float((np.longdouble(plus) - np.longdouble(minus)) / (2 * h))

    errors = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    worst = float(errors.max()) if errors.size else 0.0
    log.info("Finite-difference check", seed=seed, params=len(analytic), max_relative_error=worst)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

def save_checkpoint(snapshot: CheckpointSnapshot, path: Union[str, Path], extra: Optional[Dict] = None):
    """Write a GSCK file: magic, version, JSON header, f32 LE payload"""
    header = {
        'config': snapshot.params.config.to_dict(),
        'epoch': snapshot.epoch,
        'validation_loss': snapshot.validation_loss,
        'layout': snapshot.params.layout.to_table(),
    }
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    payload = snapshot.params.values.astype('<f4').tobytes()
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', CHECKPOINT_VERSION))
        f.write(struct.pack('<I', len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    log.info("Checkpoint written", epoch=snapshot.epoch, path=str(path))


def load_checkpoint(path: Union[str, Path]) -> Tuple[CheckpointSnapshot, Dict]:
    """Read a GSCK file; returns the snapshot and the raw header"""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    version, header_len = struct.unpack('<II', data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    header = json.loads(data[12:12 + header_len].decode('utf-8'))
    config_data = dict(header['config'])
    config = ModelConfig(**config_data)
    layout = Layout.for_config(config)
    if layout.to_table() != header['layout']:
        raise CheckpointFormatError(f"{path}: layout table does not match the model config")
    payload = np.frombuffer(data[12 + header_len:], dtype='<f4')
    if payload.shape[0] != layout.size:
        raise CheckpointFormatError(f"{path}: expected {layout.size} parameters, found {payload.shape[0]}")
    params = ParameterSet(config, payload.astype(config.np_dtype))
    return CheckpointSnapshot(int(header['epoch']), params, float(header['validation_loss'])), header
