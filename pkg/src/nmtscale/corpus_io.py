"""Reading and writing corpus, vocabulary and measurement files."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from .batching import SentencePair

PAD_TOKEN = "<pad>"
MEASUREMENT_HEADER = ["num_sentences", "max_src_len", "max_tgt_len", "seconds"]


class DataError(ValueError):
    """Unreadable or malformed input data."""


def parse_corpus_line(line: str, lineno: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    line = line.rstrip("\n").rstrip("\r")
    if line.count("\t") != 1:
        raise DataError(f"line {lineno}: expected exactly one tab separating source and target")
    src, tgt = line.split("\t")
    s, t = tuple(src.split(" ")), tuple(tgt.split(" "))
    if not src or not tgt or "" in s or "" in t:
        raise DataError(f"line {lineno}: empty side or repeated space")
    return s, t


def read_corpus(path) -> list[SentencePair]:
    """One pair per line; the pair id is the 0-based line number."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    out = []
    for i, line in enumerate(lines):
        s, t = parse_corpus_line(line, i + 1)
        out.append(SentencePair(i, s, t))
    return out


def format_pair(p: SentencePair) -> str:
    return " ".join(map(str, p.src)) + "\t" + " ".join(map(str, p.tgt))


def write_corpus(pairs: Iterable[SentencePair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            f.write(format_pair(p) + "\n")


def read_vocab(path) -> dict[str, int]:
    try:
        tokens = Path(path).read_text(encoding="utf-8").split("\n")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read vocabulary {path}: {e}") from e
    if tokens and tokens[-1] == "":
        tokens.pop()
    if not tokens:
        raise DataError(f"{path}: empty vocabulary")
    vocab = {}
    for i, tok in enumerate(tokens):
        if tok in vocab:
            raise DataError(f"{path}: duplicate token {tok!r} on line {i + 1}")
        vocab[tok] = i
    return vocab


def write_vocab(tokens: Sequence[str], path) -> None:
    """``tokens`` excludes the pad symbol, which is written as line 0."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(PAD_TOKEN + "\n")
        for t in tokens:
            f.write(t + "\n")


def encode(pairs: Iterable[SentencePair], vocab: dict[str, int]) -> list[SentencePair]:
    out = []
    for p in pairs:
        try:
            src = tuple(vocab[t] for t in p.src)
            tgt = tuple(vocab[t] for t in p.tgt)
        except KeyError as e:
            raise DataError(f"pair {p.id}: token {e.args[0]!r} not in vocabulary") from None
        if 0 in src or 0 in tgt:
            raise DataError(f"pair {p.id}: the pad symbol cannot appear in text")
        out.append(SentencePair(p.id, src, tgt))
    return out


def decode(pairs: Iterable[SentencePair], vocab: dict[str, int]) -> list[SentencePair]:
    inv = {i: t for t, i in vocab.items()}
    return [SentencePair(p.id, tuple(inv[i] for i in p.src), tuple(inv[i] for i in p.tgt)) for p in pairs]


def read_measurements(path):
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != MEASUREMENT_HEADER:
                raise DataError(f"{path}: header must be {','.join(MEASUREMENT_HEADER)}")
            rows = []
            for r in reader:
                shape = (int(r["num_sentences"]), int(r["max_src_len"]), int(r["max_tgt_len"]))
                rows.append((shape, float(r["seconds"])))
    except OSError as e:
        raise DataError(f"cannot read measurements {path}: {e}") from e
    except (KeyError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{path}: malformed measurement row ({e})") from e
    return rows


def write_measurements(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MEASUREMENT_HEADER)
        for (n, s, t), secs in rows:
            w.writerow([n, s, t, repr(float(secs))])


def write_histogram(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in rows:
            w.writerow([repr(lo), repr(hi), c])


def write_scores(scored, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pair_id", "avg_token_loglik"])
        for s in scored:
            w.writerow([s.id, repr(float(s.avg_token_loglik))])


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
