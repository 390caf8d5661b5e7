"""Synthetic next-token tasks.

Each example is an input sequence of ``seq_len`` tokens with targets shifted by
one. Positions whose next token is not determined by the task carry the
``IGNORE_INDEX`` target and do not enter the loss.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from shared.schemas.config import TaskConfig, TaskKind
from shared.utils.errors import ConfigError, DomainError
from shared.utils.numkernel import make_rng

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
DEFAULT_CORPUS = Path(__file__).resolve().parents[2] / "shared" / "data" / "corpus.txt"


@dataclass
class TokenDataset:
    kind: TaskKind
    inputs: torch.Tensor  # (size, seq_len) int64
    targets: torch.Tensor  # (size, seq_len) int64

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    def batch(self, idx) -> Tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return self.inputs[idx], self.targets[idx]

    def head(self, count: int) -> "TokenDataset":
        return TokenDataset(self.kind, self.inputs[:count], self.targets[:count])

    def tail(self, start: int) -> "TokenDataset":
        return TokenDataset(self.kind, self.inputs[start:], self.targets[start:])


def load_corpus(text_path: Optional[str] = None) -> Tuple[str, str]:
    """Normalised text and its sorted alphabet."""
    path = Path(text_path) if text_path else DEFAULT_CORPUS
    if not path.exists():
        raise ConfigError(f"Corpus file not found: {path}")
    text = " ".join(path.read_text(encoding="utf-8").lower().split())
    return text, "".join(sorted(set(text)))


def _half_task(kind: TaskKind, rng: np.random.Generator, size: int, seq_len: int, vocab: int):
    if seq_len % 2 != 0:
        raise DomainError(f"{kind.value} task needs an even seq_len, got {seq_len}")
    half = seq_len // 2
    first = rng.integers(0, vocab, size=(size, half))
    second = first if kind == TaskKind.COPY else np.sort(first, axis=1)
    seq = np.concatenate([first, second], axis=1)
    targets = np.full_like(seq, IGNORE_INDEX)
    targets[:, half - 1:seq_len - 1] = seq[:, half:]
    return seq, targets


def _char_lm(rng: np.random.Generator, size: int, seq_len: int, vocab: int, text_path: Optional[str]):
    text, alphabet = load_corpus(text_path)
    if len(alphabet) > vocab:
        raise DomainError(f"corpus has {len(alphabet)} distinct characters but vocab is {vocab}")
    if len(text) < seq_len + 2:
        raise DomainError(f"corpus of {len(text)} characters is too short for seq_len={seq_len}")
    lookup = {c: i for i, c in enumerate(alphabet)}
    ids = np.array([lookup[c] for c in text], dtype=np.int64)
    starts = rng.integers(0, len(ids) - seq_len - 1, size=size)
    window = np.arange(seq_len)
    seq = ids[starts[:, None] + window]
    targets = ids[starts[:, None] + window + 1]
    return seq, targets


def make_dataset(
    kind,
    seed: int,
    size: int,
    seq_len: int,
    vocab: int,
    text_path: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
) -> TokenDataset:
    """Deterministic dataset for ``kind`` in {copy, sort, char_lm}."""
    try:
        kind = TaskKind(kind)
    except ValueError:
        raise DomainError(f"unknown dataset kind: {kind!r}")
    if rng is None:
        rng = make_rng(seed)
    if kind == TaskKind.CHAR_LM:
        seq, targets = _char_lm(rng, size, seq_len, vocab, text_path)
    else:
        seq, targets = _half_task(kind, rng, size, seq_len, vocab)
    return TokenDataset(
        kind=kind,
        inputs=torch.from_numpy(np.ascontiguousarray(seq, dtype=np.int64)),
        targets=torch.from_numpy(np.ascontiguousarray(targets, dtype=np.int64)),
    )


def make_task_data(task: TaskConfig, vocab: int) -> Tuple[TokenDataset, TokenDataset]:
    """Training and validation splits drawn from one stream seeded by ``task.seed``."""
    full = make_dataset(task.kind, task.seed, task.size + task.val_size, task.seq_len, vocab, task.text_path)
    logger.info(f"Built {task.kind.value} task: {task.size} train / {task.val_size} val sequences of {task.seq_len}")
    return full.head(task.size), full.tail(task.size)
