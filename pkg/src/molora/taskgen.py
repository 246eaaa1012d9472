"""Deterministic synthetic multi-task corpus over a closed character vocabulary.

Four tasks with deliberately different I/O formats: copy, reverse, sort
(ascending symbols), and two-number decimal addition. Every prompt starts
with a task-tag token; the tag is there for per-task analytics, the model
routes on hidden states and never sees task labels at inference beyond the
text itself. Targets are recomputable from the prompt by a pure function,
so the corpus is self-labeling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import ConfigurationError

TASKS = ("copy", "reverse", "sort", "add")

LETTERS = "abcdefghijklmnop"
DIGITS = "0123456789"
SEP = "="
PLUS = "+"
EOS = "</s>"


class Vocabulary:
    """Fixed token table: task tags, end-of-sequence, then single characters."""

    def __init__(self):
        self.tokens: list[str] = [f"<{t}>" for t in TASKS]
        self.tokens.append(EOS)
        self.tokens.extend(SEP + PLUS + LETTERS + DIGITS)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.eos_id = self.ids[EOS]
        self.sep_id = self.ids[SEP]

    def __len__(self) -> int:
        return len(self.tokens)

    def tag_id(self, task: str) -> int:
        return self.ids[f"<{task}>"]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.ids[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary")

    def encode_text(self, text: str) -> list[int]:
        """Like encode, but recognizes multi-character special tokens
        (task tags, end-of-sequence) inside the string."""
        specials = sorted((t for t in self.tokens if len(t) > 1),
                          key=len, reverse=True)
        out: list[int] = []
        i = 0
        while i < len(text):
            for sp in specials:
                if text.startswith(sp, i):
                    out.append(self.ids[sp])
                    i += len(sp)
                    break
            else:
                if text[i] not in self.ids:
                    raise ValueError(
                        f"character {text[i]!r} is not in the vocabulary")
                out.append(self.ids[text[i]])
                i += 1
        return out

    def decode(self, ids: list[int]) -> str:
        return "".join(self.tokens[i] for i in ids)


VOCAB = Vocabulary()


@dataclass
class TaskSample:
    task_id: str
    prompt: list[int]   # tag + body + separator
    target: list[int]   # answer characters + end-of-sequence
    loss_mask: list[bool]

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.target

    def prompt_string(self, vocab: Vocabulary = VOCAB) -> str:
        return vocab.decode(self.prompt)

    def target_string(self, vocab: Vocabulary = VOCAB) -> str:
        return vocab.decode([t for t in self.target if t != vocab.eos_id])


def task_function(task_id: str, body: str) -> str:
    """The pure function each task realizes; targets are recomputable."""
    if task_id == "copy":
        return body
    if task_id == "reverse":
        return body[::-1]
    if task_id == "sort":
        return "".join(sorted(body))
    if task_id == "add":
        a, b = body.split(PLUS)
        return str(int(a) + int(b))
    raise ConfigurationError(f"unknown task {task_id!r}")


def _make_sample(task_id: str, body: str, vocab: Vocabulary) -> TaskSample:
    prompt = [vocab.tag_id(task_id)] + vocab.encode(body) + [vocab.sep_id]
    answer = task_function(task_id, body)
    target = vocab.encode(answer) + [vocab.eos_id]
    mask = [False] * len(prompt) + [True] * len(target)
    return TaskSample(task_id, prompt, target, mask)


def generate(task_id: str, n: int, length_range: tuple[int, int] = (4, 8),
             seed: int = 0, vocab: Vocabulary = VOCAB) -> list[TaskSample]:
    """n distinct samples of one task, deterministic per seed.

    Distinctness is by prompt string (rejection sampling), which keeps any
    train/held-out split of a mixed corpus overlap-free.
    """
    if task_id not in TASKS:
        raise ConfigurationError(f"unknown task {task_id!r}")
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {n}")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"invalid length range {length_range}")
    gen = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[TaskSample] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ConfigurationError(
                f"cannot draw {n} distinct {task_id!r} samples in "
                f"length range {length_range}")
        if task_id == "add":
            a, b = gen.integers(10, 100, size=2)
            body = f"{a}{PLUS}{b}"
        else:
            length = int(gen.integers(lo, hi + 1))
            body = "".join(LETTERS[i] for i in
                           gen.integers(0, len(LETTERS), size=length))
        if body in seen:
            continue
        seen.add(body)
        out.append(_make_sample(task_id, body, vocab))
    return out


def mixture(counts: dict[str, int], seed: int = 0,
            length_range: tuple[int, int] = (4, 8),
            vocab: Vocabulary = VOCAB
            ) -> tuple[list[TaskSample], list[TaskSample]]:
    """Shuffled multi-task corpus split 90/10 into (train, held_out).

    Deterministic per seed. Per-task samples are distinct and tasks are
    tag-disjoint, so no held-out sample is string-identical to a train
    sample.
    """
    total = sum(counts.values())
    if total <= 0:
        raise ConfigurationError("mixture needs at least one sample")
    samples: list[TaskSample] = []
    for i, task_id in enumerate(TASKS):
        n = counts.get(task_id, 0)
        if n < 0:
            raise ConfigurationError(f"negative count for {task_id!r}")
        if n:
            samples.extend(generate(task_id, n, length_range,
                                    seed=seed * 7919 + i, vocab=vocab))
    gen = np.random.default_rng(seed)
    order = gen.permutation(len(samples))
    samples = [samples[i] for i in order]
    n_held = len(samples) // 10
    held = samples[:n_held]
    train = samples[n_held:]
    return train, held


def export_corpus(samples: list[TaskSample], path,
                  vocab: Vocabulary = VOCAB) -> None:
    """Write line-delimited records: task_id, prompt string, target string."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(f"{s.task_id}\t{s.prompt_string(vocab)}\t"
                     f"{s.target_string(vocab)}\n")
