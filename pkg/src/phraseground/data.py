"""Datasets: vocabulary, manifest serialization, ground-truth attention
assignment, supervision masking, and the synthetic grounding world.

Manifest format (documented also in the README): a line-delimited JSON file
whose first line is a header record and whose remaining lines are one sample
each.  Feature rows live in a sidecar flat binary file of little-endian
float64 values, row-major; each sample references its block by row offset.
Serialization is canonical (sorted keys, no whitespace), so save(load(x))
is byte-identical to x.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import Box, Phrase, ProposalSet
from .errors import ConfigError, DataError
from .evaluate import IOU_THRESHOLD, iou

UNK, SOS, EOS = "<unk>", "<sos>", "<eos>"
UNK_ID, SOS_ID, EOS_ID = 0, 1, 2
RESERVED = (UNK, SOS, EOS)

MANIFEST_FORMAT = "phrase-grounding-manifest"
MANIFEST_VERSION = 1
VOCAB_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# vocabulary

@dataclass
class Vocabulary:
    """Token-string <-> id map with reserved unk/sos/eos ids 0/1/2."""

    tokens: list                      # non-reserved tokens in id order (id = 3 + index)
    counts: dict = field(default_factory=dict)
    min_freq: int = 1

    def __post_init__(self):
        self._ids = {t: i + len(RESERVED) for i, t in enumerate(self.tokens)}
        for i, t in enumerate(RESERVED):
            self._ids[t] = i
        if len(self._ids) != len(self.tokens) + len(RESERVED):
            raise DataError("duplicate or reserved token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens) + len(RESERVED)

    def encode(self, token: str) -> int:
        """Id of a token string; unknown tokens map to the unk id."""
        return self._ids.get(token, UNK_ID)

    def encode_phrase(self, tokens) -> tuple:
        return tuple(self.encode(t) for t in tokens)

    def decode(self, token_id: int) -> str:
        token_id = int(token_id)
        if 0 <= token_id < len(RESERVED):
            return RESERVED[token_id]
        if len(RESERVED) <= token_id < self.size:
            return self.tokens[token_id - len(RESERVED)]
        raise IndexError(f"token id {token_id} out of range for vocab of {self.size}")


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    """Vocabulary over an iterable of token-string sequences.

    Tokens with frequency below min_freq are dropped; ordering is frequency
    descending, then lexicographic, so ids are deterministic."""
    counts: dict = {}
    for seq in corpus:
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept}, min_freq)


def save_vocab(vocab: Vocabulary, path) -> None:
    payload = {"min_freq": vocab.min_freq,
               "tokens": [[t, vocab.counts.get(t, 0)] for t in vocab.tokens],
               "version": VOCAB_VERSION}
    Path(path).write_text(_dumps(payload) + "\n")


def load_vocab(path) -> Vocabulary:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        if payload["version"] != VOCAB_VERSION:
            raise DataError(f"{path}: unsupported vocabulary version {payload['version']}")
        tokens = [t for t, _ in payload["tokens"]]
        counts = {t: int(c) for t, c in payload["tokens"]}
        return Vocabulary(tokens, counts, int(payload["min_freq"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}:1: malformed vocabulary file ({exc})") from exc


# ---------------------------------------------------------------------------
# samples and manifests

@dataclass
class GroundingSample:
    image_id: str
    proposals: ProposalSet
    phrases: list

    def __post_init__(self):
        n = self.proposals.count
        for ph in self.phrases:
            if ph.gt_attention is not None and not 0 <= ph.gt_attention < n:
                raise DataError(
                    f"sample {self.image_id}: gt_attention {ph.gt_attention} outside {n} proposals")


@dataclass
class DatasetManifest:
    split: str
    feature_dim: int
    samples: list
    vocab_file: Optional[str] = None

    def __post_init__(self):
        for s in self.samples:
            if s.proposals.feature_dim != self.feature_dim:
                raise DataError(
                    f"sample {s.image_id}: feature width {s.proposals.feature_dim} "
                    f"!= manifest width {self.feature_dim}")


def union_box(boxes) -> Box:
    """Smallest box covering all given boxes."""
    boxes = list(boxes)
    if not boxes:
        raise DataError("union of no boxes")
    return Box(min(b.x_min for b in boxes), min(b.y_min for b in boxes),
               max(b.x_max for b in boxes), max(b.y_max for b in boxes))


def assign_gt_attention(sample: GroundingSample) -> GroundingSample:
    """Fill each phrase's gt_attention with the proposal of highest IoU
    against its gt_box, provided that IoU is strictly above the threshold;
    otherwise the target stays absent.  Ties take the lowest index.  Returns
    a new sample; the input is untouched."""
    new_phrases = []
    for ph in sample.phrases:
        target = None
        if ph.gt_box is not None:
            overlaps = [iou(box, ph.gt_box) for box in sample.proposals.boxes]
            best = int(np.argmax(overlaps))
            if overlaps[best] > IOU_THRESHOLD:
                target = best
        new_phrases.append(replace(ph, gt_attention=target))
    return GroundingSample(sample.image_id, sample.proposals, new_phrases)


def mask_supervision(samples, fraction: float, seed: int):
    """Keep gt_attention on a seeded uniform subset of round(fraction * M)
    annotated phrases; strip it elsewhere.  Returns new samples.

    Each annotated phrase draws one priority from the seed in dataset order
    and the lowest round(fraction*M) priorities keep their label, so the
    subsets for growing fractions are nested for a fixed seed."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"supervision fraction must be in [0, 1], got {fraction}")
    samples = list(samples)
    annotated = [(i, j) for i, s in enumerate(samples)
                 for j, ph in enumerate(s.phrases) if ph.gt_attention is not None]
    rng = np.random.default_rng(seed)
    priorities = rng.random(len(annotated))
    keep_n = int(round(fraction * len(annotated)))
    keep = {annotated[k] for k in np.argsort(priorities, kind="stable")[:keep_n]}
    out = []
    for i, s in enumerate(samples):
        phrases = [ph if (i, j) in keep or ph.gt_attention is None
                   else replace(ph, gt_attention=None)
                   for j, ph in enumerate(s.phrases)]
        out.append(GroundingSample(s.image_id, s.proposals, phrases))
    return out


# --- serialization ----------------------------------------------------------

def _phrase_record(ph: Phrase) -> dict:
    return {"gt_attention": ph.gt_attention,
            "gt_box": ph.gt_box.as_list() if ph.gt_box is not None else None,
            "phrase_type": ph.phrase_type,
            "sentence_id": ph.sentence_id,
            "tokens": list(ph.tokens)}


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write `path` (JSON lines) plus the feature sidecar next to it.

    The sidecar holds every sample's feature block back to back; samples
    reference their block by row offset."""
    path = Path(path)
    feature_file = path.stem + ".f64"
    lines = [_dumps({"feature_dim": manifest.feature_dim, "feature_file": feature_file,
                     "format": MANIFEST_FORMAT, "split": manifest.split,
                     "version": MANIFEST_VERSION, "vocab_file": manifest.vocab_file})]
    blocks = []
    row = 0
    for s in manifest.samples:
        lines.append(_dumps({"boxes": [b.as_list() for b in s.proposals.boxes],
                             "feature_row": row,
                             "image_id": s.image_id,
                             "phrases": [_phrase_record(ph) for ph in s.phrases]}))
        blocks.append(np.ascontiguousarray(s.proposals.features, dtype="<f8"))
        row += s.proposals.count
    path.write_text("\n".join(lines) + "\n")
    with open(path.parent / feature_file, "wb") as fh:
        for b in blocks:
            fh.write(b.tobytes())
    return path


def _parse_sample(record: dict, features: np.ndarray, where: str) -> GroundingSample:
    boxes = [Box(*map(float, b)) for b in record["boxes"]]
    row = int(record["feature_row"])
    if row < 0 or row + len(boxes) > features.shape[0]:
        raise DataError(f"{where}: feature rows [{row}, {row + len(boxes)}) outside sidecar")
    block = features[row:row + len(boxes)].copy()
    phrases = []
    for p in record["phrases"]:
        gt_box = Box(*map(float, p["gt_box"])) if p["gt_box"] is not None else None
        phrases.append(Phrase(tokens=tuple(p["tokens"]), sentence_id=p["sentence_id"],
                              phrase_type=p["phrase_type"], gt_box=gt_box,
                              gt_attention=p["gt_attention"]))
    return GroundingSample(record["image_id"], ProposalSet(boxes, block), phrases)


def load_manifest(path, vocab: Optional[Vocabulary] = None) -> DatasetManifest:
    """Read a manifest and its feature sidecar.

    When a vocabulary is supplied, token ids are validated against its size.
    Malformed content raises DataError naming the offending line."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    if not lines:
        raise DataError(f"{path}:1: empty manifest")
    try:
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}:1: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} file")
        dim = int(header["feature_dim"])
        sidecar = path.parent / header["feature_file"]
        raw = np.frombuffer(sidecar.read_bytes(), dtype="<f8")
        if raw.size % dim:
            raise DataError(f"{sidecar}: byte length is not a whole number of {dim}-wide rows")
        features = raw.reshape(-1, dim)
    except DataError:
        raise
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}:1: malformed manifest header ({exc})") from exc

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{path}:{lineno}"
        try:
            sample = _parse_sample(json.loads(line), features, where)
        except DataError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"{where}: malformed sample record ({exc})") from exc
        if vocab is not None:
            for ph in sample.phrases:
                if any(not 0 <= t < vocab.size for t in ph.tokens):
                    raise DataError(f"{where}: token id outside vocabulary of {vocab.size}")
        samples.append(sample)
    return DatasetManifest(header["split"], dim, samples, header.get("vocab_file"))


# ---------------------------------------------------------------------------
# synthetic world

@dataclass
class SyntheticConfig:
    vocab_size: int = 60              # includes the 3 reserved ids
    concepts: int = 20
    heldout_concepts: int = 4         # names reserved for val/test only
    proposals_per_image: int = 10
    feature_dim: int = 16
    noise_sigma: float = 0.3
    train_count: int = 2000
    val_count: int = 500
    test_count: int = 500
    phrases_per_image: int = 4
    min_name_tokens: int = 1
    max_name_tokens: int = 3
    type_labels: int = 4
    image_size: float = 1000.0
    grid_side: Optional[int] = None   # None: smallest grid that fits
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        pool = self.vocab_size - len(RESERVED)
        if not 1 <= self.min_name_tokens <= self.max_name_tokens <= pool:
            raise ConfigError(
                f"invalid concept-name token range [{self.min_name_tokens}, "
                f"{self.max_name_tokens}] for a pool of {pool} tokens")
        if self.heldout_concepts < 0 or self.heldout_concepts >= self.concepts:
            raise ConfigError("heldout_concepts must be in [0, concepts)")
        if self.concepts < self.proposals_per_image:
            raise ConfigError("need at least as many concepts as proposals per image "
                              "(concepts are unique within an image)")
        if not 1 <= self.phrases_per_image <= self.proposals_per_image:
            raise ConfigError("phrases_per_image must be in [1, proposals_per_image]")
        if min(self.train_count, self.val_count, self.test_count) < 1:
            raise ConfigError("split sizes must be >= 1")
        if self.noise_sigma < 0 or self.feature_dim < 1 or self.image_size <= 0:
            raise ConfigError("invalid feature or geometry settings")
        side = self.grid_side
        if side is None:
            side = int(np.ceil(np.sqrt(self.proposals_per_image)))
        if side * side < self.proposals_per_image:
            raise ConfigError(
                f"grid capacity exceeded: {side}x{side} cells for {self.proposals_per_image} proposals")
        if self.type_labels < 1:
            raise ConfigError("type_labels must be >= 1")
        return self

    @property
    def effective_grid_side(self) -> int:
        return self.grid_side if self.grid_side is not None else int(
            np.ceil(np.sqrt(self.proposals_per_image)))


@dataclass
class SyntheticWorld:
    """Deterministic latent structure shared by all splits of one seed."""

    config: SyntheticConfig
    vocab: Vocabulary
    concept_names: list               # token-id tuples per concept
    prototypes: np.ndarray            # (concepts, feature_dim)
    concept_types: list
    heldout: set                      # concept indices absent from the train split

SPLITS = ("train", "val", "test")
SEED_WORLD = 100
_SPLIT_SEEDS = {"train": 101, "val": 102, "test": 103}


def build_world(config: SyntheticConfig) -> SyntheticWorld:
    """Concept inventory: every concept owns a latent feature prototype and a
    short token name.  Prototypes are the mean of per-token basis vectors, so
    a name's meaning is composed from its tokens; held-out concept names
    reuse only tokens already present in training names, making them novel
    combinations rather than novel words."""
    cfg = config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(SEED_WORLD,)))
    pool = [f"w{i:02d}" for i in range(cfg.vocab_size - len(RESERVED))]
    basis = rng.normal(0.0, 1.0, (len(pool), cfg.feature_dim))

    vocab = Vocabulary(sorted(pool))
    names: list = []
    seen = set()
    n_train_concepts = cfg.concepts - cfg.heldout_concepts
    train_token_pool: list = []
    for c in range(cfg.concepts):
        source = pool if c < n_train_concepts else train_token_pool
        for _ in range(1000):
            length = int(rng.integers(cfg.min_name_tokens, cfg.max_name_tokens + 1))
            if length > len(source):
                length = len(source)
            name = tuple(sorted(rng.choice(len(source), length, replace=False)))
            toks = tuple(source[i] for i in name)
            key = tuple(sorted(toks))
            if key not in seen:
                seen.add(key)
                break
        else:
            raise ConfigError("could not draw distinct concept names; enlarge the vocab")
        names.append(toks)
        if c < n_train_concepts:
            for t in toks:
                if t not in train_token_pool:
                    train_token_pool.append(t)

    pool_index = {t: i for i, t in enumerate(pool)}
    prototypes = np.stack([
        np.mean([basis[pool_index[t]] for t in name], axis=0) for name in names])
    concept_names = [vocab.encode_phrase(name) for name in names]
    types = [f"kind{c % cfg.type_labels}" for c in range(cfg.concepts)]
    heldout = set(range(n_train_concepts, cfg.concepts))
    return SyntheticWorld(cfg, vocab, concept_names, prototypes, types, heldout)


def _grid_boxes(cfg: SyntheticConfig, rng) -> list:
    """One box per distinct grid cell, strictly inside its cell, so all
    pairwise IoUs are 0 (< 0.5 by a wide margin)."""
    side = cfg.effective_grid_side
    cell = cfg.image_size / side
    cells = rng.choice(side * side, cfg.proposals_per_image, replace=False)
    boxes = []
    for c in cells:
        r, col = divmod(int(c), side)
        m = rng.uniform(0.05, 0.2, 4) * cell
        boxes.append(Box(col * cell + m[0], r * cell + m[1],
                         (col + 1) * cell - m[2], (r + 1) * cell - m[3]))
    return boxes


def generate_synthetic(config: SyntheticConfig, split: str,
                       world: Optional[SyntheticWorld] = None) -> DatasetManifest:
    """One split of the synthetic grounding task.

    Every image places N proposals (distinct concepts, disjoint grid boxes)
    with features prototype + N(0, sigma^2) and emits one phrase per chosen
    proposal naming its concept, gt_box equal to that proposal's box.  The
    train split never uses held-out concepts.  Deterministic per (seed,
    split)."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    world = world or build_world(config)
    cfg = world.config
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_SPLIT_SEEDS[split],)))
    count = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}[split]
    universe = np.array([c for c in range(cfg.concepts)
                         if split != "train" or c not in world.heldout])

    samples = []
    for idx in range(count):
        image_id = f"{split}-{idx:06d}"
        concepts = rng.choice(universe, cfg.proposals_per_image, replace=False)
        boxes = _grid_boxes(cfg, rng)
        noise = rng.normal(0.0, 1.0, (cfg.proposals_per_image, cfg.feature_dim))
        features = world.prototypes[concepts] + cfg.noise_sigma * noise
        slots = np.sort(rng.choice(cfg.proposals_per_image, cfg.phrases_per_image, replace=False))
        phrases = [Phrase(tokens=world.concept_names[concepts[s]],
                          sentence_id=image_id,
                          phrase_type=world.concept_types[concepts[s]],
                          gt_box=boxes[s])
                   for s in slots]
        sample = assign_gt_attention(
            GroundingSample(image_id, ProposalSet(boxes, features), phrases))
        samples.append(sample)

    manifest = DatasetManifest(split, cfg.feature_dim, samples, vocab_file="vocab.json")
    _self_check(world, manifest)
    return manifest


def _self_check(world: SyntheticWorld, manifest: DatasetManifest) -> None:
    """Structural guarantees: pairwise IoU of proposals stays under the
    grounding threshold, and with zero noise a nearest-prototype oracle
    grounds every phrase at its annotated proposal."""
    name_to_concept = {name: c for c, name in enumerate(world.concept_names)}
    for s in manifest.samples:
        boxes = s.proposals.boxes
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if iou(boxes[i], boxes[j]) >= IOU_THRESHOLD:
                    raise DataError(f"sample {s.image_id}: proposal boxes {i} and {j} overlap too much")
        if world.config.noise_sigma == 0.0:
            for ph in s.phrases:
                c = name_to_concept[ph.tokens]
                dists = np.linalg.norm(s.proposals.features - world.prototypes[c], axis=1)
                if int(np.argmin(dists)) != ph.gt_attention:
                    raise DataError(
                        f"sample {s.image_id}: nearest-prototype oracle disagrees with gt")
