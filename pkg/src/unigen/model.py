"""Shared-encoder network with retrieval and answer decoders, plus training.

One encoder (parameters called theta throughout) feeds two decoder stacks:
a retrieval decoder (phi) that emits document-identifier tokens and an
answer decoder (mu) that emits answer tokens. Both are trained with
teacher-forced cross-entropy; the joint objective mixes the two losses with
a weight lambda in [0, 1].

Everything runs in float64 on CPU. That is a deliberate trade: the models
are desk-scale, and double precision makes the finite-difference gradient
check in grad_check meaningful.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .corpus import BOS_ID, EOS_ID, PAD_ID, Vocabulary

log = logging.getLogger(__name__)

DTYPE = torch.float64

RETRIEVAL_HEAD = "retrieval"
QA_HEAD = "qa"
_HEADS = (RETRIEVAL_HEAD, QA_HEAD)

_CKPT_MAGIC = b"UGENCKPT"
_CKPT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when a training step cannot proceed (non-finite loss)."""


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    """Checkpoint bytes do not match their recorded digest or are truncated."""


class VersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    max_input_len: int = 64
    max_output_len: int = 48
    share_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ModelError("vocab_size must cover the 4 reserved ids plus content")
        for name in ("embed_dim", "hidden_dim", "encoder_layers", "decoder_layers", "num_heads"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.max_input_len < 2 or self.max_output_len < 2:
            raise ModelError("max_input_len and max_output_len must be >= 2")
        if self.embed_dim % self.num_heads != 0:
            raise ModelError("embed_dim must be divisible by num_heads")


@dataclass(frozen=True)
class TrainConfig:
    lambda_weight: float = 0.6
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 3
    grad_clip: float | None = 1.0
    warmup_steps: int = 100

    def __post_init__(self):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ModelError("lambda_weight must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ModelError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ModelError("grad_clip must be positive or None")
        if self.warmup_steps < 0:
            raise ModelError("warmup_steps must be >= 0")


def _sinusoidal_positions(length: int, dim: int) -> Tensor:
    pos = torch.arange(length, dtype=DTYPE).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=DTYPE)
    angle = pos / torch.pow(10000.0, idx / dim)
    table = torch.zeros(length, dim, dtype=DTYPE)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : table[:, 1::2].shape[1]])
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.k_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.v_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.out_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)

    def forward(self, query, key, value, key_mask=None, causal=False):
        # key_mask: [B, Tk] bool, True at real positions. Every row must keep
        # at least one unmasked key or softmax degenerates; callers guarantee
        # position 0 is always real (BOS or first input token).
        bsz, tq, dim = query.shape
        tk = key.shape[1]
        q = self.q_proj(query).view(bsz, tq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(bsz, tk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(bsz, tk, self.num_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.triu(torch.ones(tq, tk, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, tq, dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.lin1 = nn.Linear(embed_dim, hidden_dim, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden_dim, embed_dim, dtype=DTYPE)
        self.act = nn.GELU()

    def forward(self, x):
        return self.lin2(self.act(self.lin1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm: residual branches see layer-normed inputs."""

    def __init__(self, embed_dim, hidden_dim, num_heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        self.attn = MultiHeadAttention(embed_dim, num_heads)
        self.ln2 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        self.ff = FeedForward(embed_dim, hidden_dim)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, key_mask=mask)
        x = x + self.ff(self.ln2(x))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, embed_dim, hidden_dim, num_heads):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(embed_dim, num_heads)
        self.ln2 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        self.cross_attn = MultiHeadAttention(embed_dim, num_heads)
        self.ln3 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        self.ff = FeedForward(embed_dim, hidden_dim)

    def forward(self, x, memory, tgt_mask, src_mask):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, h, key_mask=tgt_mask, causal=True)
        h = self.ln2(x)
        x = x + self.cross_attn(h, memory, memory, key_mask=src_mask)
        x = x + self.ff(self.ln3(x))
        return x


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(config.vocab_size, config.embed_dim, dtype=DTYPE)
        self.scale = math.sqrt(config.embed_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(config.embed_dim, config.hidden_dim, config.num_heads)
            for _ in range(config.encoder_layers)
        )
        self.ln_final = nn.LayerNorm(config.embed_dim, dtype=DTYPE)
        max_pos = max(config.max_input_len, config.max_output_len + 1)
        self.register_buffer("pos", _sinusoidal_positions(max_pos, config.embed_dim), persistent=False)

    def forward(self, tokens, mask):
        x = self.embed(tokens) * self.scale + self.pos[: tokens.shape[1]]
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_final(x)


class Decoder(nn.Module):
    """Causal decoder with its own target embedding and vocabulary projection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(config.vocab_size, config.embed_dim, dtype=DTYPE)
        self.scale = math.sqrt(config.embed_dim)
        self.layers = nn.ModuleList(
            DecoderLayer(config.embed_dim, config.hidden_dim, config.num_heads)
            for _ in range(config.decoder_layers)
        )
        self.ln_final = nn.LayerNorm(config.embed_dim, dtype=DTYPE)
        self.out_proj = nn.Linear(config.embed_dim, config.vocab_size, dtype=DTYPE)
        max_pos = max(config.max_input_len, config.max_output_len + 1)
        self.register_buffer("pos", _sinusoidal_positions(max_pos, config.embed_dim), persistent=False)

    def forward(self, tokens, memory, tgt_mask, src_mask):
        x = self.embed(tokens) * self.scale + self.pos[: tokens.shape[1]]
        for layer in self.layers:
            x = layer(x, memory, tgt_mask, src_mask)
        return self.out_proj(self.ln_final(x))


class UniGenModel(nn.Module):
    """Encoder (theta) + retrieval decoder (phi) + answer decoder (mu).

    With share_encoder=False a second, independently initialized encoder
    serves the answer route and the two tasks share no parameters at all.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.qa_encoder = None if config.share_encoder else Encoder(config)
        self.retr_decoder = Decoder(config)
        self.qa_decoder = Decoder(config)
        self.vocab_hash: str | None = None

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Named parameters split the way the losses see them.

        theta: encoder feeding the retrieval route (and the answer route when
        shared); theta_qa: the separate answer encoder, empty when shared;
        phi / mu: the two decoders.
        """
        groups: dict[str, list[tuple[str, Tensor]]] = {
            "theta": list(self.encoder.named_parameters(prefix="encoder")),
            "theta_qa": [],
            "phi": list(self.retr_decoder.named_parameters(prefix="retr_decoder")),
            "mu": list(self.qa_decoder.named_parameters(prefix="qa_decoder")),
        }
        if self.qa_encoder is not None:
            groups["theta_qa"] = list(self.qa_encoder.named_parameters(prefix="qa_encoder"))
        return groups

    def encoder_for(self, head: str) -> Encoder:
        if head == QA_HEAD and self.qa_encoder is not None:
            return self.qa_encoder
        return self.encoder

    def decoder_for(self, head: str) -> Decoder:
        if head == RETRIEVAL_HEAD:
            return self.retr_decoder
        if head == QA_HEAD:
            return self.qa_decoder
        raise ModelError(f"unknown head {head!r}; expected one of {_HEADS}")


def _seeded_init(model: UniGenModel, seed: int) -> None:
    # Output projections get a deliberately small scale so initial logits sit
    # near zero and the untrained per-token loss lands at ~ln(vocab_size).
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "ln" in name.split(".")[-2]:
                p.fill_(1.0)
            elif p.dim() == 2:
                fan_in = p.shape[1]
                std = (0.1 if "out_proj" in name else 1.0) / math.sqrt(fan_in)
                p.copy_(torch.normal(0.0, std, p.shape, generator=gen, dtype=DTYPE))
            else:
                p.copy_(torch.normal(0.0, 0.02, p.shape, generator=gen, dtype=DTYPE))


def init_model(config: ModelConfig) -> UniGenModel:
    """Fresh model with parameters fully determined by config.seed."""
    model = UniGenModel(config)
    _seeded_init(model, config.seed)
    return model


@dataclass
class EncoderState:
    """Encoded input: one memory per route (same tensor when the encoder is shared)."""

    tokens: tuple[int, ...]
    retr_memory: Tensor  # [1, S, D]
    qa_memory: Tensor
    mask: Tensor  # [1, S] bool


def _check_token_range(tokens: Sequence[int], vocab_size: int, what: str) -> list[int]:
    out = [int(t) for t in tokens]
    for t in out:
        if not 0 <= t < vocab_size:
            raise ModelError(f"{what} token id {t} outside vocabulary of size {vocab_size}")
    return out


def _clip_input(model: UniGenModel, input_tokens: Sequence[int]) -> list[int]:
    toks = _check_token_range(input_tokens, model.config.vocab_size, "input")
    if not toks:
        raise ModelError("empty input")
    if len(toks) > model.config.max_input_len:
        log.warning("input of %d tokens truncated to max_input_len=%d", len(toks), model.config.max_input_len)
        toks = toks[: model.config.max_input_len]
    return toks


def encode_input(model: UniGenModel, input_tokens: Sequence[int]) -> EncoderState:
    """Run the encoder(s) over one input sequence. Read-only on the model."""
    toks = _clip_input(model, input_tokens)
    ids = torch.tensor([toks], dtype=torch.long)
    mask = torch.ones(1, len(toks), dtype=torch.bool)
    with torch.no_grad():
        retr_mem = model.encoder(ids, mask)
        qa_mem = retr_mem if model.qa_encoder is None else model.qa_encoder(ids, mask)
    return EncoderState(tokens=tuple(toks), retr_memory=retr_mem, qa_memory=qa_mem, mask=mask)


def _memory_for(state: EncoderState, head: str) -> Tensor:
    if head == RETRIEVAL_HEAD:
        return state.retr_memory
    if head == QA_HEAD:
        return state.qa_memory
    raise ModelError(f"unknown head {head!r}; expected one of {_HEADS}")


def decode_step_batch(model: UniGenModel, head: str, state: EncoderState, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token log-probabilities for several BOS-rooted prefixes at once.

    Returns [len(prefixes), vocab_size] float64; row i conditions on prefixes[i].
    """
    if not prefixes:
        return np.zeros((0, model.config.vocab_size))
    memory = _memory_for(state, head)
    decoder = model.decoder_for(head)
    rows = []
    for p in prefixes:
        toks = _check_token_range(p, model.config.vocab_size, "prefix")
        if not toks or toks[0] != BOS_ID:
            raise ModelError("decoder prefix must begin with BOS")
        if len(toks) > model.config.max_output_len + 1:
            raise ModelError(f"prefix of {len(toks)} tokens exceeds max_output_len={model.config.max_output_len}")
        rows.append(toks)
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros(len(rows), width, dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        mask[i, : len(r)] = True
    with torch.no_grad():
        logits = decoder(
            ids,
            memory.expand(len(rows), -1, -1),
            tgt_mask=mask,
            src_mask=state.mask.expand(len(rows), -1),
        )
        last = torch.tensor([len(r) - 1 for r in rows])
        picked = logits[torch.arange(len(rows)), last]
        logp = torch.log_softmax(picked, dim=-1)
    return logp.numpy()


def decode_step(model: UniGenModel, head: str, state: EncoderState, prefix_tokens: Sequence[int]) -> np.ndarray:
    """Log-distribution over the next token given a BOS-rooted prefix."""
    return decode_step_batch(model, head, state, [prefix_tokens])[0]


def _encode_batch(model: UniGenModel, inputs: Sequence[Sequence[int]], head: str):
    """Differentiable batched encoding used by the losses."""
    rows = [_clip_input(model, toks) for toks in inputs]
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros(len(rows), width, dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        mask[i, : len(r)] = True
    return model.encoder_for(head)(ids, mask), mask


def _teacher_forced_nll(model: UniGenModel, head: str, memory, src_mask, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean-per-token NLL for each target, averaged over the batch.

    Target t is scored as p(t_1|BOS) p(t_2|BOS,t_1) ... with the decoder fed
    BOS + t[:-1]; each item contributes its per-token mean so short answers
    and long identifier sequences weigh equally.
    """
    checked = []
    for t in targets:
        toks = _check_token_range(t, model.config.vocab_size, "target")
        if not toks:
            raise ModelError("empty target")
        if toks[-1] != EOS_ID:
            raise ModelError("target must be EOS-terminated")
        if len(toks) > model.config.max_output_len:
            raise ModelError(f"target of {len(toks)} tokens exceeds max_output_len={model.config.max_output_len}")
        checked.append(toks)
    width = max(len(t) for t in checked)
    dec_in = torch.full((len(checked), width), PAD_ID, dtype=torch.long)
    tgt = torch.full((len(checked), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros(len(checked), width, dtype=torch.bool)
    for i, t in enumerate(checked):
        dec_in[i, : len(t)] = torch.tensor([BOS_ID] + t[:-1], dtype=torch.long)
        tgt[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        mask[i, : len(t)] = True
    logits = model.decoder_for(head)(dec_in, memory, tgt_mask=mask, src_mask=src_mask)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
    per_item = (nll * mask).sum(dim=1) / mask.sum(dim=1)
    return per_item.mean()


def loss_retrieval(model: UniGenModel, input_tokens: Sequence[int], target_docid_tokens: Sequence[int]) -> Tensor:
    """Teacher-forced cross-entropy of one identifier sequence (scalar tensor)."""
    memory, mask = _encode_batch(model, [input_tokens], RETRIEVAL_HEAD)
    return _teacher_forced_nll(model, RETRIEVAL_HEAD, memory, mask, [target_docid_tokens])


def loss_qa(model: UniGenModel, input_tokens: Sequence[int], target_answer_tokens: Sequence[int]) -> Tensor:
    """Teacher-forced cross-entropy of one answer sequence (scalar tensor)."""
    memory, mask = _encode_batch(model, [input_tokens], QA_HEAD)
    return _teacher_forced_nll(model, QA_HEAD, memory, mask, [target_answer_tokens])


def loss_joint(lr, lq, lambda_weight: float):
    """lambda*lr + (1-lambda)*lq, one multiply each; works on floats and tensors."""
    if not 0.0 <= lambda_weight <= 1.0:
        raise ModelError("lambda_weight must lie in [0, 1]")
    return lambda_weight * lr + (1.0 - lambda_weight) * lq


Batch = Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]]


def _batch_losses(model: UniGenModel, batch: Batch) -> tuple[Tensor, Tensor]:
    """(retrieval loss, answer loss) for a batch of (input, docid, answer) triples."""
    if not batch:
        raise ModelError("empty batch")
    inputs = [item[0] for item in batch]
    memory, mask = _encode_batch(model, inputs, RETRIEVAL_HEAD)
    lr = _teacher_forced_nll(model, RETRIEVAL_HEAD, memory, mask, [item[1] for item in batch])
    if model.qa_encoder is None:
        qa_memory, qa_mask = memory, mask
    else:
        qa_memory, qa_mask = _encode_batch(model, inputs, QA_HEAD)
    lq = _teacher_forced_nll(model, QA_HEAD, qa_memory, qa_mask, [item[2] for item in batch])
    return lr, lq


class Trainer:
    """Adam with linear learning-rate warmup over a fixed model.

    Owns the optimizer state; one Trainer per training run. The module-level
    train_step creates a throwaway Trainer for callers that want exactly one
    update without managing state.
    """

    def __init__(self, model: UniGenModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        self.steps_done = 0

    def _warmed_lr(self) -> float:
        warmup = max(1, self.config.warmup_steps)
        return self.config.learning_rate * min(1.0, (self.steps_done + 1) / warmup)

    def step(self, batch: Batch) -> tuple[float, float, float]:
        """One joint-loss update; returns pre-update (loss_retr, loss_qa, loss_joint)."""
        lr_t, lq_t = _batch_losses(self.model, batch)
        joint = loss_joint(lr_t, lq_t, self.config.lambda_weight)
        retr_val, qa_val, joint_val = lr_t.item(), lq_t.item(), joint.item()
        if not (math.isfinite(retr_val) and math.isfinite(qa_val)):
            raise TrainingError(
                f"non-finite loss at step {self.steps_done}: retrieval={retr_val} qa={qa_val}; "
                "step aborted, parameters unchanged"
            )
        for group in self.opt.param_groups:
            group["lr"] = self._warmed_lr()
        self.opt.zero_grad()
        joint.backward()
        if self.config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.opt.step()
        self.steps_done += 1
        return retr_val, qa_val, joint_val


def train_step(model: UniGenModel, batch: Batch, config: TrainConfig, trainer: Trainer | None = None):
    """Single update on the joint loss. Pass a Trainer to keep optimizer state."""
    if trainer is None:
        trainer = Trainer(model, config)
    return trainer.step(batch)


def grad_check(
    model: UniGenModel,
    batch: Batch,
    lambda_weight: float = 0.6,
    epsilon: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least num_coords coordinates spread over every parameter group
    so all of theta, phi and mu get exercised. The relative-error denominator
    is floored at 1e-3: below that scale the finite-difference estimate's own
    rounding error dominates and the comparison stops being informative.
    """
    lr_t, lq_t = _batch_losses(model, batch)
    joint = loss_joint(lr_t, lq_t, lambda_weight)
    model.zero_grad()
    joint.backward()
    analytic = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for name, p in model.named_parameters()}

    def loss_at() -> float:
        with torch.no_grad():
            lr_v, lq_v = _batch_losses(model, batch)
            return float(loss_joint(lr_v, lq_v, lambda_weight))

    rng = random.Random(seed)
    groups = [g for g in model.parameter_groups().values() if g]
    per_group = -(-num_coords // len(groups))
    worst = 0.0
    for group in groups:
        sized = [(name, p, p.numel()) for name, p in group]
        total = sum(n for _, _, n in sized)
        for _ in range(per_group):
            flat = rng.randrange(total)
            for name, p, n in sized:
                if flat < n:
                    break
                flat -= n
            with torch.no_grad():
                orig = float(p.view(-1)[flat])
                p.view(-1)[flat] = orig + epsilon
                plus = loss_at()
                p.view(-1)[flat] = orig - epsilon
                minus = loss_at()
                p.view(-1)[flat] = orig
            fd = (plus - minus) / (2.0 * epsilon)
            an = float(analytic[name].view(-1)[flat])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            worst = max(worst, rel)
    return worst


def _config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def vocab_fingerprint(vocab: Vocabulary) -> str:
    """Stable digest of the token->id map, stored in checkpoints."""
    canon = json.dumps(sorted(vocab.token_to_id.items()), separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_model(model: UniGenModel, path: str | Path, vocab_hash: str | None = None) -> None:
    """Self-describing checkpoint: magic, JSON header, float64 parameter blob."""
    names, blobs = [], []
    for name, p in model.named_parameters():
        arr = p.detach().numpy().astype("<f8")
        names.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    blob = b"".join(blobs)
    header = {
        "format_version": _CKPT_VERSION,
        "config": _config_to_dict(model.config),
        "vocab_hash": vocab_hash if vocab_hash is not None else model.vocab_hash,
        "params": names,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)


def _read_checkpoint(path: str | Path) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise IntegrityError(f"{path}: not a model checkpoint (bad magic)")
        raw_len = f.read(8)
        if len(raw_len) < 8:
            raise IntegrityError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise IntegrityError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes)
        except json.JSONDecodeError as e:
            raise IntegrityError(f"{path}: corrupt header") from e
        return header, f.read()


def read_checkpoint_header(path: str | Path) -> dict:
    return _read_checkpoint(path)[0]


def load_model(path: str | Path) -> UniGenModel:
    header, blob = _read_checkpoint(path)
    version = header.get("format_version")
    if version != _CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version!r}, expected {_CKPT_VERSION}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise IntegrityError(f"{path}: parameter blob does not match recorded digest")
    model = UniGenModel(_config_from_dict(header["config"]))
    model.vocab_hash = header.get("vocab_hash")
    expected = [(name, tuple(p.shape)) for name, p in model.named_parameters()]
    recorded = [(entry["name"], tuple(entry["shape"])) for entry in header["params"]]
    if expected != recorded:
        raise IntegrityError(f"{path}: parameter inventory does not match the configured architecture")
    pos = 0
    with torch.no_grad():
        for (name, p), entry in zip(model.named_parameters(), header["params"]):
            n = p.numel() * 8
            chunk = blob[pos : pos + n]
            if len(chunk) < n:
                raise IntegrityError(f"{path}: blob truncated inside parameter {name!r}")
            arr = np.frombuffer(chunk, dtype="<f8").reshape(tuple(entry["shape"]))
            p.copy_(torch.from_numpy(arr.copy()))
            pos += n
    if pos != len(blob):
        raise IntegrityError(f"{path}: {len(blob) - pos} trailing bytes after parameters")
    return model
