"""Datasets, vocabulary, embeddings, rationale statistics and the synthetic suite."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
SPLITS = ("train", "dev", "test", "unlabeled", "large")


class DataError(ValueError):
    """Malformed dataset or embedding input."""


class Vocab:
    """Token <-> id table. Id 0 is padding, id 1 is the shared unknown token."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: PAD_ID, UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens, grow=False):
        if grow:
            return tuple(self.add(t) for t in tokens)
        return tuple(self.stoi.get(t, UNK_ID) for t in tokens)

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def digest(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text("\n".join(self.itos[2:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(t for t in lines if t)


@dataclass(frozen=True)
class Example:
    tokens: tuple
    label: object = None
    rationale: tuple | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise DataError("an example needs at least one token")
        if self.rationale is not None:
            if len(self.rationale) != len(self.tokens):
                raise DataError(
                    f"rationale length {len(self.rationale)} != token length {len(self.tokens)}")
            if any(r not in (0, 1) for r in self.rationale):
                raise DataError("rationale entries must be 0 or 1")

    def __len__(self):
        return len(self.tokens)

    def with_rationale(self, rationale):
        return Example(self.tokens, self.label, tuple(int(r) for r in rationale))


@dataclass
class TaskDataset:
    task_id: str
    kind: str = "classification"
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise DataError(f"unknown task kind {self.kind!r}")

    def __getitem__(self, split):
        return self.splits[split]

    @property
    def n_outputs(self):
        return 2 if self.kind == "classification" else 1


# ---------------------------------------------------------------------------
# JSON-lines IO
# ---------------------------------------------------------------------------

def parse_line(line, vocab, grow=False):
    obj = json.loads(line)
    if not isinstance(obj, dict) or not isinstance(obj.get("tokens"), list):
        raise DataError("expected an object with a 'tokens' array")
    label = obj.get("label")
    if label is not None and not isinstance(label, (int, float)):
        raise DataError(f"label must be a number or null, got {label!r}")
    rationale = obj.get("rationale")
    if rationale is not None:
        rationale = tuple(int(r) for r in rationale)
    return Example(vocab.encode(obj["tokens"], grow=grow), label, rationale)


def load_examples(path, vocab, grow=False):
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(parse_line(line, vocab, grow=grow))
            except (json.JSONDecodeError, DataError, TypeError, ValueError) as err:
                raise DataError(f"{path}:{lineno}: {err}") from err
    return examples


def load_dataset(path, vocab, task_id=None, kind="classification", split="train", grow=False):
    """Read one JSON-lines file into a single-split TaskDataset.

    ``grow=True`` extends ``vocab`` with unseen tokens; otherwise they map
    to the unknown id.
    """
    path = Path(path)
    task_id = task_id or path.name.split(".")[0]
    return TaskDataset(task_id, kind, {split: load_examples(path, vocab, grow=grow)})


def load_task(data_dir, task_id, vocab, kind="classification", grow=False):
    """Read every ``{task_id}.{split}.jsonl`` present in ``data_dir``."""
    data_dir = Path(data_dir)
    splits = {}
    for split in SPLITS:
        path = data_dir / f"{task_id}.{split}.jsonl"
        if path.exists():
            splits[split] = load_examples(path, vocab, grow=grow)
    if not splits:
        raise DataError(f"no files for task {task_id!r} in {data_dir}")
    return TaskDataset(task_id, kind, splits)


def dump_example(ex, vocab):
    obj = {"tokens": vocab.decode(ex.tokens), "label": ex.label}
    if ex.rationale is not None:
        obj["rationale"] = list(ex.rationale)
    return json.dumps(obj, separators=(",", ":"))


def write_examples(path, examples, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(dump_example(ex, vocab) + "\n")


def write_attention(path, attentions):
    """JSON-lines of ``{"index": i, "attention": [...]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, att in enumerate(attentions):
            fh.write(json.dumps({"index": i, "attention": [float(a) for a in att]},
                                separators=(",", ":")) + "\n")


def read_attention(path):
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows[int(obj["index"])] = np.asarray(obj["attention"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DataError(f"{path}:{lineno}: {err}") from err
    if sorted(rows) != list(range(len(rows))):
        raise DataError(f"{path}: attention indices are not 0..n-1")
    return [rows[i] for i in range(len(rows))]


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def random_embeddings(vocab_size, dim, seed):
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.1, 0.1, size=(vocab_size, dim))
    emb[PAD_ID] = 0.0
    return emb


def load_embeddings(path, vocab, seed):
    """Text embeddings (``token v1 .. vD`` per line) aligned to ``vocab``.

    Rows for tokens absent from the file are drawn uniformly from
    [-0.1, 0.1] with ``seed``; the padding row is zero.
    """
    found, dim = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            tok, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
            if tok in vocab:
                try:
                    found[vocab.stoi[tok]] = np.array(vals, dtype=np.float64)
                except ValueError as err:
                    raise DataError(f"{path}:{lineno}: {err}") from err
    if dim is None:
        raise DataError(f"{path}: no embedding rows")
    emb = random_embeddings(len(vocab), dim, seed)
    for i, vec in found.items():
        emb[i] = vec
    if not np.isfinite(emb).all():
        raise DataError(f"{path}: non-finite embedding values")
    return emb


def synthetic_embeddings(vocab, dim, seed, spec=None, scale=None, shared=None):
    """Gaussian stand-ins for pretrained vectors (component std ``scale``).

    The +-0.1 fallback is meant for a handful of out-of-file tokens; as the
    only input signal its norm is small enough that the recurrent encoders
    sit on the initial plateau for hundreds of steps.

    With ``spec`` the vectors get the kind of class structure real pretrained
    vectors have: all positive words share one direction, all negative words
    another and all keywords a third, so two words of a class have expected
    cosine ``shared`` whatever their aspect.  Noise words stay unstructured.
    ``vocab`` may be a :class:`Vocab` or a plain size.  ``scale`` and
    ``shared`` default to those of ``spec`` (0.3 and 0.8 when it is None).
    """
    if scale is None:
        scale = spec.embedding_scale if spec is not None else 0.3
    if shared is None:
        shared = spec.embedding_shared if spec is not None else 0.8
    if not 0.0 <= shared < 1.0:
        raise ValueError("shared must lie in [0, 1)")
    size = vocab if isinstance(vocab, int) else len(vocab)
    rng = np.random.default_rng([seed, 7])
    emb = rng.normal(0.0, scale, size=(size, dim))
    if spec is not None:
        if isinstance(vocab, int):
            raise ValueError("class structure needs the Vocab, not just its size")
        aspects, _ = spec.word_sets()
        centers = rng.normal(0.0, scale, size=(3, dim))
        mix_own, mix_class = np.sqrt(1.0 - shared), np.sqrt(shared)
        for words in aspects:
            for c, key in enumerate(("pos", "neg", "keywords")):
                for w in words[key]:
                    if w in vocab:
                        i = vocab.stoi[w]
                        emb[i] = mix_own * emb[i] + mix_class * centers[c]
    emb[PAD_ID] = 0.0
    return emb


def write_embeddings(path, emb, vocab):
    """Text format readable by :func:`load_embeddings` (padding row omitted)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.itos):
            if i == PAD_ID:
                continue
            fh.write(tok + " " + " ".join(repr(float(v)) for v in emb[i]) + "\n")


# ---------------------------------------------------------------------------
# Rationale frequency and vocabulary bins
# ---------------------------------------------------------------------------

class RationaleFreqTable:
    """Per-token fraction of occurrences that were marked as rationale."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def __getitem__(self, token_id):
        return float(self.values[token_id])

    def lookup(self, ids):
        return self.values[np.asarray(ids)]


def rationale_frequency(examples, vocab_size):
    marked = np.zeros(vocab_size)
    seen = np.zeros(vocab_size)
    for i, ex in enumerate(examples):
        if ex.rationale is None:
            raise DataError(f"example {i} has no rationale mask")
        ids = np.asarray(ex.tokens)
        np.add.at(seen, ids, 1.0)
        np.add.at(marked, ids, np.asarray(ex.rationale, dtype=np.float64))
    freq = np.divide(marked, seen, out=np.zeros(vocab_size), where=seen > 0)
    return RationaleFreqTable(freq)


def assign_bins(vocab_size, n_bins, seed):
    """Shuffle the vocabulary and deal it round-robin into ``n_bins`` bins."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if n_bins > vocab_size:
        raise ValueError(f"{n_bins} bins for a vocabulary of {vocab_size}")
    order = np.random.default_rng(seed).permutation(vocab_size)
    bins = np.empty(vocab_size, dtype=np.int64)
    bins[order] = np.arange(vocab_size) % n_bins
    return bins


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None
    rationale: np.ndarray | None = None
    freq: np.ndarray | None = None

    @property
    def size(self):
        return len(self.lengths)


def make_batch(examples, freq=None, require_rationale=False):
    lengths = np.array([len(ex) for ex in examples])
    B, L = len(examples), int(lengths.max())
    ids = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, ex in enumerate(examples):
        ids[i, :len(ex)] = ex.tokens
        mask[i, :len(ex)] = True
    labels = None
    if all(ex.label is not None for ex in examples):
        labels = np.array([ex.label for ex in examples])
    rationale = None
    has_rat = [ex.rationale is not None for ex in examples]
    if all(has_rat):
        rationale = np.zeros((B, L))
        for i, ex in enumerate(examples):
            rationale[i, :len(ex)] = ex.rationale
    elif require_rationale:
        raise DataError("batch contains an example without a rationale")
    f = None if freq is None else freq.lookup(ids) * mask
    return Batch(ids, mask, lengths, labels, rationale, f)


def iterate_batches(examples, batch_size, rng=None):
    """Yield lists of examples; shuffled when ``rng`` is given."""
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def normalize_mask(mask):
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("cannot normalise an all-zero rationale mask")
    return m / total


# ---------------------------------------------------------------------------
# Synthetic suite
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Generator settings for the planted-rationale review suite.

    Each review contains one segment per aspect, ``keyword s1 .. sk``, with
    gaps of noise words in between.  The label of an aspect is the majority
    polarity of its sentiment words.
    """

    vocab_size: int = 300
    n_aspects: int = 3
    keywords_per_aspect: int = 2
    sentiment_per_polarity: int = 6
    sentiment_per_segment: tuple = (1, 4)
    minority_rate: float = 0.8
    noise_gap: tuple = (1, 4)
    keyword_noise_rate: float = 0.15
    aspect_presence: float = 1.0
    domain_shift: bool = True
    target_aspect_in_source: bool = False
    target_aspect: int = -1
    source_train: int = 2000
    source_dev: int = 200
    source_test: int = 200
    target_train: int = 200
    target_dev: int = 200
    target_test: int = 1000
    target_unlabeled: int = 2000
    target_large: int = 2000
    embedding_scale: float = 0.3
    embedding_shared: float = 0.8
    seed: int = 0
    max_retries: int = 100

    def word_sets(self):
        """Keyword / positive / negative word lists per aspect and noise pools."""
        per_aspect = self.keywords_per_aspect + 2 * self.sentiment_per_polarity
        n_noise = self.vocab_size - self.n_aspects * per_aspect
        if n_noise < 2:
            raise ValueError("vocab_size too small for the requested aspect word sets")
        aspects = []
        for a in range(self.n_aspects):
            aspects.append({
                "keywords": [f"a{a}_key{j}" for j in range(self.keywords_per_aspect)],
                "pos": [f"a{a}_pos{j}" for j in range(self.sentiment_per_polarity)],
                "neg": [f"a{a}_neg{j}" for j in range(self.sentiment_per_polarity)],
            })
        noise = [f"w{j}" for j in range(n_noise)]
        if self.domain_shift:
            half = n_noise // 2
            pools = {"source": noise[:half], "target": noise[half:]}
        else:
            pools = {"source": noise, "target": noise}
        return aspects, pools

    def validate(self):
        aspects, _ = self.word_sets()
        seen = set()
        for a in aspects:
            for words in a.values():
                for w in words:
                    if w in seen:
                        raise ValueError(f"word {w} shared between aspect sets")
                    seen.add(w)
        lo, hi = self.sentiment_per_segment
        if not 0 <= lo <= hi:
            raise ValueError("bad sentiment_per_segment range")
        if not -self.n_aspects <= self.target_aspect < self.n_aspects:
            raise ValueError("target_aspect out of range")


@dataclass
class SyntheticSuite:
    vocab: Vocab
    sources: dict
    target: TaskDataset
    oracle: dict
    spec: SyntheticSpec


def _pick(rng, words):
    return words[int(rng.integers(len(words)))]


class _ReviewMaker:
    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng
        self.aspects, self.pools = spec.word_sets()

    def _segment(self, a):
        spec, rng = self.spec, self.rng
        words = self.aspects[a]
        lo, hi = spec.sentiment_per_segment
        k = int(rng.integers(lo, hi + 1))
        if k == 0:
            return None, None
        polarity = int(rng.integers(0, 2))
        n_major = k
        if k >= 3 and rng.random() < spec.minority_rate:
            n_major = k - (k - 1) // 2
        signs = [polarity] * n_major + [1 - polarity] * (k - n_major)
        rng.shuffle(signs)
        senti = [_pick(rng, words["pos"] if s == 1 else words["neg"]) for s in signs]
        seg = [_pick(rng, words["keywords"])] + senti
        return seg, polarity

    def _noise(self, domain):
        spec, rng = self.spec, self.rng
        lo, hi = spec.noise_gap
        out = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            if rng.random() < spec.keyword_noise_rate:
                a = int(rng.integers(0, spec.n_aspects))
                out.append(_pick(rng, self.aspects[a]["keywords"]))
            else:
                out.append(_pick(rng, self.pools[domain]))
        return out

    def review(self, task_aspect, domain, absent=None):
        """Return (words, label, rationale, oracle) for ``task_aspect``.

        ``absent`` names an aspect that never gets a segment.
        """
        spec, rng = self.spec, self.rng
        for _ in range(spec.max_retries):
            order = rng.permutation(spec.n_aspects)
            words, role, label = self._noise(domain), [], None
            role = [0] * len(words)
            for a in order:
                if a == absent:
                    continue
                if rng.random() >= spec.aspect_presence:
                    continue
                seg, pol = self._segment(int(a))
                if seg is None:
                    continue
                if a == task_aspect:
                    label = pol
                    role += [1] + [2] * (len(seg) - 1)
                else:
                    role += [0] * len(seg)
                words += seg
                gap = self._noise(domain)
                words += gap
                role += [0] * len(gap)
            if label is None:
                continue
            role = np.asarray(role)
            rationale = tuple(int(r > 0) for r in role)
            oracle = (role == 2).astype(np.float64)
            return words, label, rationale, oracle / oracle.sum()
        raise RuntimeError(
            f"no review containing aspect {task_aspect} after {spec.max_retries} attempts")


def make_synthetic_suite(spec):
    """Build source tasks, the target task and constructed oracle attention.

    Rationales mark the task aspect's keyword and sentiment words; the
    oracle attention is uniform over the sentiment words only.
    """
    spec.validate()
    aspects, pools = spec.word_sets()
    vocab = Vocab()
    for a in aspects:
        for words in a.values():
            for w in words:
                vocab.add(w)
    for w in sorted(set(pools["source"]) | set(pools["target"]), key=lambda s: int(s[1:])):
        vocab.add(w)

    rng = np.random.default_rng(spec.seed)
    maker = _ReviewMaker(spec, rng)
    target_aspect = spec.target_aspect % spec.n_aspects

    # under domain shift the source domain does not talk about the target aspect,
    # the way beer reviews never mention a hotel's location
    hidden = None
    if spec.domain_shift and not spec.target_aspect_in_source:
        hidden = target_aspect

    def build(aspect, domain, n, keep_labels=True):
        exs, oracles = [], []
        for _ in range(n):
            words, label, rationale, oracle = maker.review(
                aspect, domain, hidden if domain == "source" else None)
            if keep_labels:
                exs.append(Example(vocab.encode(words), label, rationale))
            else:
                exs.append(Example(vocab.encode(words), None, None))
            oracles.append(oracle)
        return exs, oracles

    sources = {}
    for a in range(spec.n_aspects):
        if a == target_aspect:
            continue
        splits = {}
        for split, n in (("train", spec.source_train), ("dev", spec.source_dev),
                         ("test", spec.source_test)):
            splits[split], _ = build(a, "source", n)
        sources[f"aspect{a}"] = TaskDataset(f"aspect{a}", "classification", splits)

    splits, oracle = {}, {}
    for split, n in (("train", spec.target_train), ("dev", spec.target_dev),
                     ("test", spec.target_test), ("large", spec.target_large)):
        splits[split], oracle[split] = build(target_aspect, "target", n)
    splits["unlabeled"], _ = build(target_aspect, "target", spec.target_unlabeled,
                                   keep_labels=False)
    target = TaskDataset(f"aspect{target_aspect}", "classification", splits)
    return SyntheticSuite(vocab, sources, target, oracle, spec)


def write_suite(suite, out_dir):
    """Write datasets, vocabulary and oracle attention files; return paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    suite.vocab.save(out_dir / "vocab.txt")
    written.append(out_dir / "vocab.txt")
    for task in [*suite.sources.values(), suite.target]:
        for split, exs in task.splits.items():
            p = out_dir / f"{task.task_id}.{split}.jsonl"
            write_examples(p, exs, suite.vocab)
            written.append(p)
    for split, atts in suite.oracle.items():
        p = out_dir / f"{suite.target.task_id}.{split}.oracle.jsonl"
        write_attention(p, atts)
        written.append(p)
    return written
