"""Turn raw study records (report sections + pathology labels + image) into
the packed training corpus.

Pipeline per study: concatenate the impression and findings sections (skip
the study when both are empty), normalize to lowercase alphanumeric tokens
with sentence periods kept as standalone tokens, expand abbreviations, and
prepend one short sentence per pathology label. Images are bilinearly resized
and scaled into [0, 1]. Records persist in a single flat binary container.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import BinaryFormatError, ByteReader, ByteWriter
from .pgm import read_pgm

logger = logging.getLogger(__name__)

POLARITIES = ("present", "absent", "uncertain")
_POLARITY_CODE = {name: i for i, name in enumerate(POLARITIES)}

CONTAINER_MAGIC = b"CSDS"
CONTAINER_VERSION = 1


class ContainerError(BinaryFormatError):
    pass


class CorpusRecordError(ValueError):
    """A raw corpus line that cannot be parsed; carries the line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class RawStudy:
    study_id: str
    impression: str
    findings: str
    labels: list[tuple[str, str]]
    image: np.ndarray  # integer intensities, (H, W)
    max_intensity: int


@dataclass
class ProcessedReport:
    tokens: list[str]
    study_id: str


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    ratios: tuple[float, float, float]


@dataclass
class PackedRecord:
    study_id: str
    labels: list[tuple[str, str]]
    tokens: list[str]
    image: np.ndarray  # float64 in [0, 1], (side, side)


def build_report(impression: str, findings: str) -> str | None:
    """Join the two sections with a space; None when both are empty."""
    parts = [s for s in (impression, findings) if s]
    if not parts:
        return None
    return " ".join(parts)


def normalize_text(text: str) -> list[str]:
    """Lowercase alphanumeric tokens; periods become standalone tokens.

    Non-alphanumeric characters are stripped from mixed tokens and tokens
    with nothing left are dropped, so the output alphabet is exactly
    lowercase alphanumerics plus '.'.
    """
    out: list[str] = []
    for raw in text.replace(".", " . ").split():
        if raw == ".":
            out.append(".")
            continue
        tok = "".join(ch for ch in raw.lower() if ch.isalnum())
        if tok:
            out.append(tok)
    return out


def load_lexicon(path) -> dict[str, list[str]]:
    """Abbreviation file: one 'abbr<TAB>expansion' per line, # comments."""
    lex: dict[str, list[str]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        abbr, _, expansion = line.partition("\t")
        abbr = abbr.strip().lower()
        tokens = normalize_text(expansion)
        if not abbr or not tokens:
            raise ValueError(f"{path}:{n}: malformed lexicon entry")
        lex[abbr] = tokens
    return lex


def expand_abbreviations(tokens: list[str], lexicon: dict[str, list[str]]) -> list[str]:
    """Single left-to-right pass; produced tokens are never re-expanded."""
    out: list[str] = []
    for tok in tokens:
        out.extend(lexicon.get(tok, [tok]))
    return out


def prepend_labels(labels: list[tuple[str, str]], body: list[str]) -> list[str]:
    """One short sentence per label, in input order, ahead of the body:
    '<pathology> present .', 'no <pathology> .', 'uncertain <pathology> .'."""
    prefix: list[str] = []
    for name, polarity in labels:
        name_tokens = normalize_text(name)
        if polarity == "present":
            prefix += name_tokens + ["present", "."]
        elif polarity == "absent":
            prefix += ["no"] + name_tokens + ["."]
        elif polarity == "uncertain":
            prefix += ["uncertain"] + name_tokens + ["."]
        else:
            raise ValueError(f"unknown label polarity {polarity!r}, want one of {POLARITIES}")
    return prefix + body


def process_study(study: RawStudy, lexicon: dict[str, list[str]] | None,
                  image_side: int) -> PackedRecord | None:
    """Full preprocessing for one study; None when the report is excluded."""
    report = build_report(study.impression, study.findings)
    if report is None:
        return None
    tokens = normalize_text(report)
    if lexicon:
        tokens = expand_abbreviations(tokens, lexicon)
    tokens = prepend_labels(study.labels, tokens)
    image = preprocess_image(study.image, study.max_intensity, image_side)
    return PackedRecord(study.study_id, list(study.labels), tokens, image)


def split_dataset(ids: list[str], ratios, seed: int) -> DatasetSplit:
    """Deterministic shuffled split; floor allocation, remainder to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError(f"expected 3 split ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    if any(r < 0 for r in ratios):
        raise ValueError("split ratios must be non-negative")
    if len(ids) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} ids to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    sizes = [int(r * n) for r in ratios]
    sizes[0] += n - sum(sizes)
    train = shuffled[: sizes[0]]
    validation = shuffled[sizes[0]: sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1]:]
    return DatasetSplit(train, validation, test, ratios)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling; constant images stay constant."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bottom = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def preprocess_image(pixels: np.ndarray, max_intensity: int, side: int) -> np.ndarray:
    """Resize to side x side and scale intensities into [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D pixel grid, got shape {arr.shape}")
    if max_intensity <= 0:
        raise ValueError(f"max intensity must be positive, got {max_intensity}")
    return bilinear_resize(arr, side, side) / float(max_intensity)


# ---------------------------------------------------------------------------
# packed container


def pack_dataset(records: list[PackedRecord], path) -> None:
    """Single-file container: magic CSDS, version, record count, then per
    record the id, label block, token block, and raw float64 image."""
    extents = {r.image.shape for r in records}
    if len(extents) > 1:
        raise ValueError(f"all images must share extents, found {sorted(extents)}")
    w = ByteWriter()
    w.raw(CONTAINER_MAGIC)
    w.u32(CONTAINER_VERSION)
    w.u64(len(records))
    for rec in records:
        w.utf8(rec.study_id)
        w.u32(len(rec.labels))
        for name, polarity in rec.labels:
            w.utf8(name)
            w.u8(_POLARITY_CODE[polarity])
        w.u32(len(rec.tokens))
        for tok in rec.tokens:
            w.utf8(tok)
        w.u32(rec.image.shape[0])
        w.u32(rec.image.shape[1])
        w.f64_array(rec.image)
    Path(path).write_bytes(w.getvalue())


def load_dataset(path) -> list[PackedRecord]:
    payload = Path(path).read_bytes()
    r = ByteReader(payload, str(path))
    magic = r.take(4)
    if magic != CONTAINER_MAGIC:
        raise ContainerError(
            f"{path}: bad magic {magic!r}, expected {CONTAINER_MAGIC!r} at byte offset 0"
        )
    version = r.u32()
    if version != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    count = r.u64()
    records: list[PackedRecord] = []
    for _ in range(count):
        study_id = r.utf8()
        n_labels = r.u32()
        labels = []
        for _ in range(n_labels):
            name = r.utf8()
            code = r.u8()
            if code >= len(POLARITIES):
                r.fail(f"unknown polarity code {code}")
            labels.append((name, POLARITIES[code]))
        n_tokens = r.u32()
        tokens = [r.utf8() for _ in range(n_tokens)]
        h, w_ = r.u32(), r.u32()
        image = r.f64_array(h * w_, (h, w_))
        records.append(PackedRecord(study_id, labels, tokens, image))
    if not r.exhausted():
        r.fail(f"{len(payload) - r.offset} trailing bytes after last record")
    return records


# ---------------------------------------------------------------------------
# raw corpus input (line-delimited JSON records)


def read_raw_corpus(path) -> tuple[list[RawStudy], list[tuple[int, str]]]:
    """Parse a JSONL corpus; image paths resolve relative to the corpus file.

    Returns (studies, skipped) where skipped holds (line number, reason) for
    records that could not be parsed.
    """
    base = Path(path).parent
    studies: list[RawStudy] = []
    skipped: list[tuple[int, str]] = []
    seen_ids: set[str] = set()
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            studies.append(_parse_record(line, n, base, seen_ids))
        except CorpusRecordError as exc:
            logger.warning("skipping corpus record: %s", exc)
            skipped.append((n, str(exc)))
    return studies, skipped


def _parse_record(line: str, lineno: int, base: Path, seen_ids: set[str]) -> RawStudy:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusRecordError(lineno, f"invalid JSON ({exc.msg})")
    if not isinstance(obj, dict):
        raise CorpusRecordError(lineno, "record is not an object")
    try:
        study_id = str(obj["id"])
        image_path = obj["image"]
    except KeyError as exc:
        raise CorpusRecordError(lineno, f"missing field {exc.args[0]!r}")
    if study_id in seen_ids:
        raise CorpusRecordError(lineno, f"duplicate study id {study_id!r}")
    labels = []
    for entry in obj.get("labels", []):
        if (not isinstance(entry, (list, tuple))) or len(entry) != 2:
            raise CorpusRecordError(lineno, "label entries must be [name, polarity] pairs")
        name, polarity = str(entry[0]), str(entry[1])
        if polarity not in POLARITIES:
            raise CorpusRecordError(lineno, f"unknown polarity {polarity!r}")
        labels.append((name, polarity))
    try:
        image, maxval = read_pgm(base / image_path)
    except (OSError, ValueError) as exc:
        raise CorpusRecordError(lineno, f"cannot read image {image_path!r}: {exc}")
    seen_ids.add(study_id)
    return RawStudy(
        study_id=study_id,
        impression=str(obj.get("impression", "")),
        findings=str(obj.get("findings", "")),
        labels=labels,
        image=image,
        max_intensity=maxval,
    )
