"""Heterogeneous label ingest and batch assembly.

Four label regimes coexist: strong events (onset/offset), weak clip tags,
unlabeled clips, and 1-s soft probabilities. A ClassMap merges the two
source vocabularies into one ordered class list with per-source visibility
masks, which later zero out losses on classes a source cannot see.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip
from .errors import ConfigError, LabelError, ParameterError, ShapeError, VocabularyError

SOURCES = ("weak", "unlabeled", "synth_strong", "real_strong", "maestro_soft")
STRONG_SOURCES = ("synth_strong", "real_strong")

OUTPUT_FRAMES = 250
OUTPUT_FRAME_S = 0.04
SEGMENT_S = 1.0

DEFAULT_DESED_CLASSES = (
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
)

# Only the two merges the challenge names explicitly; further pairs come
# from a class-map file.
DEFAULT_MERGES = (
    ("Speech", "people_talking"),
    ("Dishes", "cutlery_and_dishes"),
)


@dataclass(frozen=True)
class ClassMap:
    """Unified class ordering with per-source aliases and visibility."""

    unified_classes: tuple
    desed_aliases: tuple    # per class: source name or None
    maestro_aliases: tuple  # per class: source name or None

    def __post_init__(self):
        if len(set(self.unified_classes)) != len(self.unified_classes):
            raise VocabularyError("class names are not unique after merging")

    @property
    def n_classes(self):
        return len(self.unified_classes)

    @property
    def desed_visible(self):
        return np.array([a is not None for a in self.desed_aliases])

    @property
    def maestro_visible(self):
        return np.array([a is not None for a in self.maestro_aliases])

    @property
    def merge_pairs(self):
        return tuple(
            (d, m)
            for d, m in zip(self.desed_aliases, self.maestro_aliases)
            if d is not None and m is not None
        )

    def _alias_index(self, aliases, name, source):
        for idx, alias in enumerate(aliases):
            if alias == name:
                return idx
        raise VocabularyError(f"unknown {source} class name: {name!r}")

    def desed_index(self, name):
        return self._alias_index(self.desed_aliases, name, "DESED")

    def maestro_index(self, name):
        return self._alias_index(self.maestro_aliases, name, "MAESTRO")

    def mask_for_source(self, source):
        if source == "maestro_soft":
            return self.maestro_visible
        if source in SOURCES:
            return self.desed_visible
        raise ParameterError(f"unknown source {source!r}")


def build_class_map(desed_names, maestro_names, merges=DEFAULT_MERGES) -> ClassMap:
    """Merge vocabularies: DESED names first (alphabetical), then unmerged
    MAESTRO names (alphabetical). Merged classes keep the DESED name."""
    desed_names = list(desed_names)
    maestro_names = list(maestro_names)
    merge_by_desed = {}
    for desed_name, maestro_name in merges:
        if desed_name not in desed_names:
            raise VocabularyError(f"merge references unknown DESED class {desed_name!r}")
        if maestro_name not in maestro_names:
            raise VocabularyError(f"merge references unknown MAESTRO class {maestro_name!r}")
        merge_by_desed[desed_name] = maestro_name

    merged_maestro = set(merge_by_desed.values())
    unified, desed_aliases, maestro_aliases = [], [], []
    for name in sorted(desed_names):
        unified.append(name)
        desed_aliases.append(name)
        maestro_aliases.append(merge_by_desed.get(name))
    for name in sorted(maestro_names):
        if name in merged_maestro:
            continue
        unified.append(name)
        desed_aliases.append(None)
        maestro_aliases.append(name)
    return ClassMap(tuple(unified), tuple(desed_aliases), tuple(maestro_aliases))


def parse_class_map(path) -> ClassMap:
    """Read ``unified = desed | maestro`` lines (either alias may be empty)."""
    unified, desed_aliases, maestro_aliases = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'name = desed | maestro'")
            name, _, rhs = line.partition("=")
            if "|" not in rhs:
                raise ConfigError(f"{path}:{lineno}: missing '|' separator")
            desed, _, maestro = rhs.partition("|")
            name, desed, maestro = name.strip(), desed.strip(), maestro.strip()
            if not name:
                raise ConfigError(f"{path}:{lineno}: empty unified class name")
            if not desed and not maestro:
                raise ConfigError(f"{path}:{lineno}: class {name!r} visible to no source")
            unified.append(name)
            desed_aliases.append(desed or None)
            maestro_aliases.append(maestro or None)
    if not unified:
        raise ConfigError(f"{path}: class map is empty")
    return ClassMap(tuple(unified), tuple(desed_aliases), tuple(maestro_aliases))


def serialize_class_map(class_map: ClassMap, path):
    with open(path, "w", encoding="utf-8") as fh:
        for name, desed, maestro in zip(class_map.unified_classes,
                                        class_map.desed_aliases,
                                        class_map.maestro_aliases):
            fh.write(f"{name} = {desed or ''} | {maestro or ''}\n")


# ------------------------------------------------------------------ labels

@dataclass
class StrongLabelSet:
    events: list  # (class_id, onset_s, offset_s)


@dataclass
class WeakLabelSet:
    present_classes: set


@dataclass
class SoftLabelSet:
    segments: np.ndarray  # (n_segments, n_classes) in [0, 1]
    mask: np.ndarray      # maestro visibility


def _tsv_rows(path, expected_header):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise LabelError(f"{path}: empty file, expected header "
                             f"{' '.join(expected_header)}") from None
        if [h.strip() for h in header] != list(expected_header):
            raise LabelError(
                f"{path}: bad header {header!r}, expected {list(expected_header)!r}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(expected_header):
                raise LabelError(f"{path}:{lineno}: expected "
                                 f"{len(expected_header)} columns, got {len(row)}")
            rows.append((lineno, row))
    return rows


def _parse_float(path, lineno, text, what):
    try:
        return float(text)
    except ValueError:
        raise LabelError(f"{path}:{lineno}: {what} is not a number: {text!r}") from None


def parse_strong_tsv(path, class_map: ClassMap):
    """filename/onset/offset/event_label rows, grouped per filename."""
    out = {}
    for lineno, (fname, onset, offset, label) in _tsv_rows(
            path, ("filename", "onset", "offset", "event_label")):
        onset = _parse_float(path, lineno, onset, "onset")
        offset = _parse_float(path, lineno, offset, "offset")
        if onset < 0 or onset >= offset:
            raise LabelError(f"{path}:{lineno}: need 0 <= onset < offset, "
                             f"got [{onset}, {offset}]")
        class_id = class_map.desed_index(label.strip())
        out.setdefault(fname, StrongLabelSet(events=[])).events.append(
            (class_id, onset, offset))
    return out


def parse_weak_tsv(path, class_map: ClassMap):
    """filename/event_labels rows; comma-separated tags collapse to a set."""
    out = {}
    for _, (fname, labels) in _tsv_rows(path, ("filename", "event_labels")):
        ids = {class_map.desed_index(tag.strip())
               for tag in labels.split(",") if tag.strip()}
        entry = out.setdefault(fname, WeakLabelSet(present_classes=set()))
        entry.present_classes |= ids
    return out


def parse_soft_tsv(path, class_map: ClassMap, n_segments=None):
    """filename/onset/offset/event_label/confidence rows on whole seconds.

    Duplicate rows for one (segment, class) cell keep the maximum. Rows per
    clip are sized by the largest offset unless ``n_segments`` pins it.
    """
    cells = {}
    max_seg = {}
    for lineno, (fname, onset, offset, label, conf) in _tsv_rows(
            path, ("filename", "onset", "offset", "event_label", "confidence")):
        onset_f = _parse_float(path, lineno, onset, "onset")
        offset_f = _parse_float(path, lineno, offset, "offset")
        if onset_f != int(onset_f) or offset_f != int(offset_f):
            raise LabelError(f"{path}:{lineno}: segment boundaries must be "
                             f"whole seconds, got [{onset}, {offset}]")
        onset_i, offset_i = int(onset_f), int(offset_f)
        if onset_i < 0 or onset_i >= offset_i:
            raise LabelError(f"{path}:{lineno}: need 0 <= onset < offset, "
                             f"got [{onset_i}, {offset_i}]")
        conf_f = _parse_float(path, lineno, conf, "confidence")
        if not 0.0 <= conf_f <= 1.0:
            raise LabelError(f"{path}:{lineno}: confidence outside [0, 1]: {conf_f}")
        class_id = class_map.maestro_index(label.strip())
        clip_cells = cells.setdefault(fname, {})
        for seg in range(onset_i, offset_i):
            key = (seg, class_id)
            clip_cells[key] = max(clip_cells.get(key, 0.0), conf_f)
        max_seg[fname] = max(max_seg.get(fname, 0), offset_i)

    out = {}
    mask = class_map.maestro_visible
    for fname, clip_cells in cells.items():
        rows = n_segments if n_segments is not None else max_seg[fname]
        segments = np.zeros((rows, class_map.n_classes), dtype=np.float64)
        for (seg, class_id), value in clip_cells.items():
            if seg < rows:
                segments[seg, class_id] = value
        out[fname] = SoftLabelSet(segments=segments, mask=mask.copy())
    return out


def empty_soft_labels(class_map: ClassMap, n_segments=10) -> SoftLabelSet:
    return SoftLabelSet(
        segments=np.zeros((n_segments, class_map.n_classes), dtype=np.float64),
        mask=class_map.maestro_visible,
    )


# ---------------------------------------------------------------- encoding

def encode_strong(labels: StrongLabelSet, n_classes, frames=OUTPUT_FRAMES,
                  frame_s=OUTPUT_FRAME_S):
    """Binary grid: frame f is active iff [f*dt, (f+1)*dt) overlaps the event."""
    grid = np.zeros((frames, n_classes), dtype=np.float32)
    for class_id, onset, offset in labels.events:
        first = int(math.floor(onset / frame_s + 1e-9))
        last = int(math.ceil(offset / frame_s - 1e-9))
        first = max(first, 0)
        last = min(last, frames)
        if first < last:
            grid[first:last, class_id] = 1.0
    return grid


def crop_clip(clip: AudioClip, labels: SoftLabelSet, win_s=10, hop_s=1):
    """Slice a long clip into overlapping windows starting at whole seconds.

    A clip shorter than the window yields one zero-padded crop carrying
    whatever label rows exist.
    """
    if hop_s < 1 or win_s < 1:
        raise ParameterError("win_s and hop_s must be >= 1 second")
    sr = clip.sample_rate
    n_win = int(win_s * sr)
    n_classes = labels.segments.shape[1]

    duration = len(clip.samples) / sr
    if duration < win_s:
        samples = np.zeros(n_win, dtype=np.float64)
        samples[:len(clip.samples)] = clip.samples
        segments = np.zeros((win_s, n_classes), dtype=np.float64)
        rows = min(win_s, labels.segments.shape[0])
        segments[:rows] = labels.segments[:rows]
        return [(AudioClip(samples, sr, clip.source_path),
                 SoftLabelSet(segments, labels.mask.copy()))]

    n_starts = int(math.floor((duration - win_s) / hop_s)) + 1
    crops = []
    for k in range(n_starts):
        start = k * hop_s
        samples = clip.samples[start * sr:(start + win_s) * sr].copy()
        segments = np.zeros((win_s, n_classes), dtype=np.float64)
        avail = labels.segments[start:start + win_s]
        segments[:avail.shape[0]] = avail
        crops.append((AudioClip(samples, sr, clip.source_path),
                      SoftLabelSet(segments, labels.mask.copy())))
    return crops


# ---------------------------------------------------------------- examples

@dataclass
class TrainingExample:
    """One clip with exactly the label fields its source implies."""

    clip_id: str
    features: object  # FeatureTensor
    source: str
    class_mask: np.ndarray
    strong_grid: np.ndarray = None
    weak_vector: np.ndarray = None
    soft_grid: np.ndarray = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ParameterError(f"unknown source {self.source!r}")
        wants = {
            "weak": ("weak_vector",),
            "unlabeled": (),
            "synth_strong": ("strong_grid",),
            "real_strong": ("strong_grid",),
            "maestro_soft": ("soft_grid",),
        }[self.source]
        for name in ("strong_grid", "weak_vector", "soft_grid"):
            have = getattr(self, name) is not None
            if have != (name in wants):
                state = "missing" if not have else "unexpected"
                raise ParameterError(f"{state} {name} for source {self.source!r}")


def make_example(clip_id, features, source, class_map: ClassMap,
                 strong=None, weak=None, soft=None) -> TrainingExample:
    """Encode parsed labels onto model grids for one clip."""
    mask = class_map.mask_for_source(source)
    kwargs = {}
    if source in STRONG_SOURCES:
        events = strong if strong is not None else StrongLabelSet(events=[])
        kwargs["strong_grid"] = encode_strong(events, class_map.n_classes)
    elif source == "weak":
        vec = np.zeros(class_map.n_classes, dtype=np.float32)
        if weak is not None:
            for class_id in weak.present_classes:
                vec[class_id] = 1.0
        kwargs["weak_vector"] = vec
    elif source == "maestro_soft":
        labels = soft if soft is not None else empty_soft_labels(class_map)
        kwargs["soft_grid"] = labels.segments.astype(np.float32)
    return TrainingExample(clip_id=clip_id, features=features, source=source,
                           class_mask=mask.copy(), **kwargs)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    source: str


def parse_manifest(path):
    """clip_id/path/source rows; paths resolve relative to the manifest."""
    import os

    base = os.path.dirname(os.path.abspath(str(path)))
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if [c.strip() for c in row] == ["clip_id", "path", "source"]:
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            clip_id, rel, source = (c.strip() for c in row)
            if source not in SOURCES:
                raise ConfigError(
                    f"{path}:{lineno}: unknown source {source!r}; "
                    f"expected one of {', '.join(SOURCES)}"
                )
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            entries.append(ManifestEntry(clip_id=clip_id, path=full, source=source))
    if not entries:
        raise ConfigError(f"{path}: manifest is empty")
    return entries


# ----------------------------------------------------------------- batches

DEFAULT_COMPOSITION = {"weak": 4, "unlabeled": 4, "strong": 4, "soft": 4}

_STREAM_OF_SOURCE = {
    "weak": "weak",
    "unlabeled": "unlabeled",
    "synth_strong": "strong",
    "real_strong": "strong",
    "maestro_soft": "soft",
}


def make_batches(examples, batch_composition=None, seed=0):
    """Yield one epoch of batches with a fixed per-stream quota.

    Streams shuffle independently and re-shuffle when exhausted; the epoch
    ends when the largest quota-bearing stream has been consumed once.
    """
    composition = dict(DEFAULT_COMPOSITION if batch_composition is None
                       else batch_composition)
    pools = {stream: [] for stream in composition}
    for ex in examples:
        stream = _STREAM_OF_SOURCE[ex.source]
        if stream in pools:
            pools[stream].append(ex)

    active = [s for s, quota in composition.items() if quota > 0]
    for stream in active:
        if not pools[stream]:
            raise ParameterError(
                f"batch composition requests {composition[stream]} examples "
                f"from empty stream {stream!r}"
            )
    if not active:
        raise ParameterError("batch composition is all zeros")

    n_batches = max(
        -(-len(pools[s]) // composition[s]) for s in active
    )

    seed_seq = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    cursors = {}
    for idx, stream in enumerate(sorted(active)):
        rng = np.random.default_rng([*seed_seq, idx])
        order = rng.permutation(len(pools[stream]))
        cursors[stream] = [rng, order, 0]

    for _ in range(n_batches):
        batch = []
        for stream in sorted(active):
            rng, order, pos = cursors[stream]
            pool = pools[stream]
            for _ in range(composition[stream]):
                if pos >= len(order):
                    order = rng.permutation(len(pool))
                    pos = 0
                batch.append(pool[order[pos]])
                pos += 1
            cursors[stream] = [rng, order, pos]
        yield batch
