"""CSV / FASTA loaders and alignment-free corpus assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .core import UNK_ID, SourceId, TimeSeries, TokenSequence, make_series
from .errors import (
    DuplicateCell,
    DuplicateSourceName,
    DuplicateTimestamp,
    EmptyCorpus,
    EmptyFile,
    EmptyRecord,
    HeaderMissing,
    MalformedRow,
    NoRecords,
)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"

SourceData = Union[TimeSeries, Sequence[TokenSequence]]


def default_protein_vocabulary() -> dict[str, int]:
    vocab = {"<pad>": 0, "<unk>": 1}
    vocab.update({aa: i + 2 for i, aa in enumerate(AMINO_ACIDS)})
    return vocab


def _lines(text: str) -> list[str]:
    if text.startswith("﻿"):
        text = text[1:]
    return [ln.rstrip("\r") for ln in text.split("\n")]


def _parse_cell(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return float("nan")


def _parse_tick(cell: str, lineno: int) -> int:
    try:
        return int(cell.strip())
    except ValueError:
        raise MalformedRow(f"line {lineno}: timestamp {cell!r} is not an integer tick") from None


def _rows(text: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    lines = _lines(text)
    if not lines or not lines[0].strip():
        raise HeaderMissing("file has no header line")
    header = [h.strip() for h in lines[0].split(",")]
    body = [(i + 1, ln.split(",")) for i, ln in enumerate(lines[1:], start=1) if ln.strip()]
    return header, body


def load_csv_wide(text: str, source_name: str) -> TimeSeries:
    """Parse ``timestamp,<ch1>,<ch2>,...``; blank or non-numeric cells are missing."""
    header, body = _rows(text)
    if header[0] != "timestamp" or len(header) < 2:
        raise HeaderMissing("wide CSV header must be 'timestamp,<channel>,...'")
    if not body:
        raise EmptyFile(f"{source_name}: no data rows")
    n_ch = len(header) - 1
    ticks = []
    values = np.empty((len(body), n_ch))
    for r, (lineno, cells) in enumerate(body):
        if len(cells) != n_ch + 1:
            raise MalformedRow(f"line {lineno}: expected {n_ch + 1} cells, got {len(cells)}")
        ticks.append(_parse_tick(cells[0], lineno))
        values[r] = [_parse_cell(c) for c in cells[1:]]
    ticks = np.asarray(ticks, dtype=np.int64)
    order = np.argsort(ticks, kind="stable")
    ticks = ticks[order]
    if np.any(np.diff(ticks) == 0):
        dup = ticks[np.flatnonzero(np.diff(ticks) == 0)[0]]
        raise DuplicateTimestamp(f"{source_name}: timestamp {dup} appears twice")
    return make_series(SourceId(source_name), ticks, values[order], channels=header[1:])


def load_csv_long(text: str, source_name: str) -> TimeSeries:
    """Parse ``timestamp,channel,value`` and pivot to a wide grid.

    Channels are ordered lexicographically; the tick axis is the sorted set
    of timestamps present in the file.
    """
    header, body = _rows(text)
    if header != ["timestamp", "channel", "value"]:
        raise HeaderMissing("long CSV header must be exactly 'timestamp,channel,value'")
    if not body:
        raise EmptyFile(f"{source_name}: no data rows")
    cells: dict[tuple[int, str], float] = {}
    for lineno, row in body:
        if len(row) != 3:
            raise MalformedRow(f"line {lineno}: expected 3 cells, got {len(row)}")
        key = (_parse_tick(row[0], lineno), row[1].strip())
        if key in cells:
            raise DuplicateCell(f"{source_name}: duplicate cell at timestamp {key[0]}, channel {key[1]!r}")
        cells[key] = _parse_cell(row[2])
    ticks = sorted({t for t, _ in cells})
    channels = sorted({c for _, c in cells})
    t_index = {t: i for i, t in enumerate(ticks)}
    c_index = {c: j for j, c in enumerate(channels)}
    values = np.full((len(ticks), len(channels)), np.nan)
    for (t, c), v in cells.items():
        values[t_index[t], c_index[c]] = v
    return make_series(SourceId(source_name), ticks, values, channels=channels)


def _format_value(v: float) -> str:
    return repr(float(v))


def to_csv_wide(series: TimeSeries) -> str:
    """Serialize to the wide layout; missing cells are written empty."""
    out = [",".join(["timestamp", *series.channels])]
    for t, row, obs in zip(series.timestamps, series.values, series.observed):
        cells = [_format_value(v) if o else "" for v, o in zip(row, obs)]
        out.append(",".join([str(int(t)), *cells]))
    return "\n".join(out) + "\n"


def to_csv_long(series: TimeSeries) -> str:
    out = ["timestamp,channel,value"]
    for t, row, obs in zip(series.timestamps, series.values, series.observed):
        for name, v, o in zip(series.channels, row, obs):
            if o:
                out.append(f"{int(t)},{name},{_format_value(v)}")
    return "\n".join(out) + "\n"


def load_csv(text: str, source_name: str) -> TimeSeries:
    """Dispatch on the header: exact long header means long layout, otherwise wide."""
    first = _lines(text)[0].strip() if text else ""
    if [h.strip() for h in first.split(",")] == ["timestamp", "channel", "value"]:
        return load_csv_long(text, source_name)
    return load_csv_wide(text, source_name)


def load_fasta(
    text: str, source_name: str, vocabulary: Mapping[str, int] | None = None
) -> list[TokenSequence]:
    if vocabulary is None:
        vocabulary = default_protein_vocabulary()
    source = SourceId(source_name)
    records: list[tuple[str, list[str]]] = []
    for lineno, line in enumerate(_lines(text), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            records.append((line[1:].strip(), []))
        elif not records:
            raise NoRecords(f"line {lineno}: sequence data before the first '>' header")
        else:
            records[-1][1].append(line)
    if not records:
        raise NoRecords(f"{source_name}: no FASTA records")
    out = []
    for name, chunks in records:
        residues = "".join(chunks)
        if not residues:
            raise EmptyRecord(f"record {name!r} has no sequence")
        tokens = np.array([vocabulary.get(ch, UNK_ID) for ch in residues], dtype=np.int64)
        out.append(TokenSequence(source, tokens, vocabulary, name))
    return out


@dataclass(frozen=True)
class Corpus:
    """Sources keyed by SourceId, in index order. Nothing is resampled or aligned."""

    sources: tuple[tuple[SourceId, SourceData], ...]
    channel_names: tuple[tuple[str, ...], ...]

    def __len__(self) -> int:
        return len(self.sources)

    @property
    def names(self) -> list[str]:
        return [sid.name for sid, _ in self.sources]

    def __getitem__(self, name: str) -> SourceData:
        for sid, data in self.sources:
            if sid.name == name:
                return data
        raise KeyError(name)

    def source_id(self, name: str) -> SourceId:
        for sid, _ in self.sources:
            if sid.name == name:
                return sid
        raise KeyError(name)


def build_corpus(named_sources: Mapping[str, SourceData] | Sequence[tuple[str, SourceData]]) -> Corpus:
    items = list(named_sources.items()) if isinstance(named_sources, Mapping) else list(named_sources)
    if not items:
        raise EmptyCorpus("corpus needs at least one source")
    names = [n for n, _ in items]
    seen = set()
    for n in names:
        if n in seen:
            raise DuplicateSourceName(f"source name {n!r} used twice")
        seen.add(n)

    sources = []
    channel_names = []
    for index, (name, data) in enumerate(sorted(items, key=lambda kv: kv[0])):
        sid = SourceId(name, index)
        if isinstance(data, TimeSeries):
            sources.append((sid, data.with_source(sid)))
            channel_names.append(data.channels)
        else:
            seqs = tuple(TokenSequence(sid, s.tokens, s.vocabulary, s.name) for s in data)
            sources.append((sid, seqs))
            channel_names.append(("token",))
    return Corpus(tuple(sources), tuple(channel_names))
