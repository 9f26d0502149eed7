"""Dialogue corpus ingestion and sequence formatting.

Corpora arrive as CSV files (one row per utterance, grouped by conversation)
plus an optional plain-text manifest listing the emotion label set. Formatting
turns a conversation and a target listener turn into a token-id sequence for
one of two conditioning regimes: "emo_prepend" inserts a dedicated emotion
token after <|bos|>, "fine_tuned" is the identical sequence without it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .tokenizer import Vocabulary, encode

# Emotion label set of the public empathetic-dialogue corpus (32 labels).
ED_EMOTIONS = (
    "afraid", "angry", "annoyed", "anticipating", "anxious", "apprehensive",
    "ashamed", "caring", "confident", "content", "devastated", "disappointed",
    "disgusted", "embarrassed", "excited", "faithful", "furious", "grateful",
    "guilty", "hopeful", "impressed", "jealous", "joyful", "lonely",
    "nostalgic", "prepared", "proud", "sad", "sentimental", "surprised",
    "terrified", "trusting",
)

BOS, EOS, SIT, SPK, LST = "<|bos|>", "<|eos|>", "<|sit|>", "<|spk|>", "<|lst|>"
STRUCTURAL_SPECIALS = (BOS, EOS, SIT, SPK, LST)

REQUIRED_COLUMNS = ("conv_id", "utterance_idx", "context", "prompt", "speaker_idx", "utterance")

MODES = ("fine_tuned", "emo_prepend")


def emotion_token(label: str) -> str:
    return f"<|emo_{label}|>"


def special_tokens_for(labels=ED_EMOTIONS) -> list[str]:
    """Full special-token inventory: structural tokens plus one per label."""
    return list(STRUCTURAL_SPECIALS) + [emotion_token(lab) for lab in sorted(labels)]


@dataclass(frozen=True)
class Conversation:
    conv_id: str
    emotion: str
    situation: str
    turns: tuple[tuple[str, str], ...]  # (role, utterance), roles alternate from "speaker"

    def listener_turns(self) -> list[int]:
        return [i for i, (role, _) in enumerate(self.turns) if role == "listener"]


@dataclass
class CorpusSplit:
    name: str
    conversations: list[Conversation]
    skipped_rows: int = 0


@dataclass
class FormattedExample:
    input_ids: list[int]
    loss_mask: list[bool]
    mode: str
    conv_id: str = ""
    turn: int = -1

    def prefix_ids(self) -> list[int]:
        """Everything before the supervised span (ends with the <|lst|> marker)."""
        return self.input_ids[: self.loss_mask.index(True)]


def _unescape(text: str) -> str:
    return text.replace("_comma_", ",")


def load_manifest(path: str) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    labels = tuple(line.strip() for line in lines if line.strip())
    if not labels:
        raise ValueError(f"empty emotion manifest: {path}")
    return labels


def _infer_split_name(path: str) -> str:
    stem = Path(path).stem.lower()
    for name in ("train", "valid", "test"):
        if name in stem:
            return name
    return stem


def parse_corpus(path: str, labels=None, split_name: str | None = None) -> CorpusSplit:
    """Read a CSV split into conversations.

    Rows are grouped by conv_id and ordered by utterance_idx; roles alternate
    beginning with the speaker. Rows that break index contiguity are skipped
    and counted in the returned split's skipped_rows, as are conversations
    whose context label is outside the registry.
    """
    registry = set(labels) if labels is not None else set(ED_EMOTIONS)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if any(col not in header for col in REQUIRED_COLUMNS):
            raise ValueError(f"malformed header: {path}")
        grouped: dict[str, list[dict]] = {}
        for row in reader:
            grouped.setdefault(row["conv_id"], []).append(row)

    conversations: list[Conversation] = []
    skipped = 0
    for conv_id, rows in grouped.items():
        rows.sort(key=lambda r: int(r["utterance_idx"]))
        kept: list[dict] = []
        for row in rows:
            expected = int(kept[-1]["utterance_idx"]) + 1 if kept else int(row["utterance_idx"])
            if int(row["utterance_idx"]) != expected:
                skipped += 1  # gap in conversation
                continue
            kept.append(row)
        if not kept:
            continue
        emotion = kept[0]["context"].strip()
        if emotion not in registry:
            skipped += len(kept)
            continue
        turns = tuple(
            ("speaker" if i % 2 == 0 else "listener", _unescape(row["utterance"]))
            for i, row in enumerate(kept)
        )
        conversations.append(
            Conversation(
                conv_id=conv_id,
                emotion=emotion,
                situation=_unescape(kept[0]["prompt"]),
                turns=turns,
            )
        )
    return CorpusSplit(
        name=split_name or _infer_split_name(path),
        conversations=conversations,
        skipped_rows=skipped,
    )


def corpus_stats(split: CorpusSplit) -> tuple[int, int, float]:
    """(conversations, utterances, utterances-per-conversation to 2 decimals)."""
    n_conv = len(split.conversations)
    n_utt = sum(len(c.turns) for c in split.conversations)
    avg = round(n_utt / n_conv, 2) if n_conv else 0.0
    return n_conv, n_utt, avg


def format_example(
    conv: Conversation,
    upto_turn: int,
    mode: str,
    vocab: Vocabulary,
    max_len: int | None = None,
    full_sequence_loss: bool = False,
) -> FormattedExample:
    """Build one training/eval sequence targeting the listener turn upto_turn.

    Layout: <|bos|> [<|emo_label|>] <|sit|> situation <|spk|> t0 <|lst|> t1 ...
    <|lst|> target <|eos|>, with the loss mask true exactly on the target
    utterance ids plus the closing <|eos|> (or on every position past the
    first when full_sequence_loss is set). When max_len is given, context is
    dropped from the oldest end; the leading control tokens and the target
    span are preserved.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode: {mode}")
    if upto_turn >= len(conv.turns) or conv.turns[upto_turn][0] != "listener":
        raise ValueError(f"turn {upto_turn} is not a listener turn")
    emo_name = emotion_token(conv.emotion)
    if mode == "emo_prepend" and emo_name not in vocab.specials:
        raise ValueError(f"label not in registry: {conv.emotion}")

    control = [vocab.special_id(BOS)]
    if mode == "emo_prepend":
        control.append(vocab.special_id(emo_name))
    context: list[int] = [vocab.special_id(SIT)] + encode(vocab, conv.situation)
    for role, utterance in conv.turns[:upto_turn]:
        marker = SPK if role == "speaker" else LST
        context += [vocab.special_id(marker)] + encode(vocab, utterance)
    target = encode(vocab, conv.turns[upto_turn][1])
    tail = [vocab.special_id(LST)] + target + [vocab.special_id(EOS)]

    if max_len is not None:
        budget = max_len - len(control) - len(tail)
        if budget < 0:
            raise ValueError("target does not fit in the context window")
        context = context[len(context) - budget :] if budget else []

    ids = control + context + tail
    mask = [False] * len(ids)
    for i in range(len(ids) - len(target) - 1, len(ids)):
        mask[i] = True
    if full_sequence_loss:
        mask = [False] + [True] * (len(ids) - 1)
    return FormattedExample(ids, mask, mode, conv_id=conv.conv_id, turn=upto_turn)


def examples_for_split(
    split: CorpusSplit,
    mode: str,
    vocab: Vocabulary,
    max_len: int | None = None,
    full_sequence_loss: bool = False,
) -> list[FormattedExample]:
    """One example per listener turn per conversation (multi-target expansion)."""
    out = []
    for conv in split.conversations:
        for t in conv.listener_turns():
            out.append(format_example(conv, t, mode, vocab, max_len, full_sequence_loss))
    return out


def lm_examples(lines: list[str], vocab: Vocabulary, context_len: int) -> list[FormattedExample]:
    """Chunk plain text into next-token-prediction examples for pretraining."""
    stream: list[int] = []
    for line in lines:
        stream.extend(encode(vocab, line))
        stream.append(vocab.special_id(EOS))
    out = []
    for start in range(0, len(stream), context_len):
        chunk = stream[start : start + context_len]
        if len(chunk) < 2:
            continue
        out.append(FormattedExample(chunk, [False] + [True] * (len(chunk) - 1), "pretrain"))
    return out


def write_examples_jsonl(examples: list[FormattedExample], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "ids": ex.input_ids,
                        "mask": [int(b) for b in ex.loss_mask],
                        "mode": ex.mode,
                        "conv_id": ex.conv_id,
                        "turn": ex.turn,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_examples_jsonl(path: str) -> list[FormattedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(
                FormattedExample(
                    rec["ids"],
                    [bool(b) for b in rec["mask"]],
                    rec["mode"],
                    rec.get("conv_id", ""),
                    rec.get("turn", -1),
                )
            )
    return out
