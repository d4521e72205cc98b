"""LETOR/SVMLight ingestion, feature normalization and synthetic datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CACHE_VERSION = 1


class LetorParseError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    features: np.ndarray
    relevance: int


@dataclass(frozen=True, eq=False)
class Query:
    """A query with its preselected candidates stored column-wise."""

    id: str
    features: np.ndarray  # (n_candidates, feature_count)
    labels: np.ndarray  # (n_candidates,) int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"query {self.id}: features {self.features.shape} vs labels {self.labels.shape}")
        if self.features.shape[0] == 0:
            raise ValueError(f"query {self.id} has no candidates")

    @property
    def n_candidates(self) -> int:
        return self.features.shape[0]

    @property
    def candidates(self) -> list[Document]:
        return [Document(f, int(l)) for f, l in zip(self.features, self.labels)]


@dataclass(frozen=True)
class Dataset:
    train: list[Query]
    valid: list[Query]
    test: list[Query]
    feature_count: int
    max_label: int = 4
    normalization: tuple[np.ndarray, np.ndarray] | None = None

    def partition(self, name: str) -> list[Query]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]

    def lookup(self) -> dict[str, Query]:
        return {q.id: q for part in (self.train, self.valid, self.test) for q in part}

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for name in ("train", "valid", "test"):
            for q in self.partition(name):
                if q.id in seen:
                    raise ValueError(f"query id {q.id} appears in {seen[q.id]} and {name}")
                seen[q.id] = name
                if q.features.shape[1] != self.feature_count:
                    raise ValueError(f"query {q.id}: {q.features.shape[1]} features, expected {self.feature_count}")
                if q.labels.min() < 0 or q.labels.max() > self.max_label:
                    raise ValueError(f"query {q.id}: labels outside [0, {self.max_label}]")
                if not np.all(np.isfinite(q.features)):
                    raise ValueError(f"query {q.id}: non-finite feature values")


def parse_letor_line(line: str, feature_count: int) -> tuple[str, int, np.ndarray]:
    body = line.split("#", 1)[0].split()
    if len(body) < 2:
        raise LetorParseError(f"too few tokens: {line!r}")
    try:
        rel = int(body[0])
    except ValueError:
        raise LetorParseError(f"non-integer label in {line!r}") from None
    if not body[1].startswith("qid:") or len(body[1]) == 4:
        raise LetorParseError(f"missing qid in {line!r}")
    qid = body[1][4:]
    features = np.zeros(feature_count)
    seen = set()
    for tok in body[2:]:
        fid_s, sep, val_s = tok.partition(":")
        try:
            fid = int(fid_s)
            val = float(val_s)
        except ValueError:
            raise LetorParseError(f"malformed token {tok!r} in {line!r}") from None
        if not sep or fid < 1 or fid > feature_count:
            raise LetorParseError(f"feature id {fid_s!r} out of range 1..{feature_count} in {line!r}")
        if fid in seen:
            raise LetorParseError(f"duplicate feature id {fid} in {line!r}")
        seen.add(fid)
        features[fid - 1] = val
    return qid, rel, features


def format_letor_line(qid: str, rel: int, features: np.ndarray) -> str:
    toks = [str(int(rel)), f"qid:{qid}"]
    toks += [f"{i + 1}:{float(v)!r}" for i, v in enumerate(features) if v != 0.0]
    return " ".join(toks)


def load_partition(path, feature_count: int) -> list[Query]:
    """Group lines by qid; queries keep first-appearance order, documents file order."""
    groups: dict[str, tuple[list, list]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.split("#", 1)[0].strip():
                continue
            try:
                qid, rel, feats = parse_letor_line(line, feature_count)
            except LetorParseError as e:
                raise LetorParseError(f"{path}:{lineno}: {e}") from None
            feats_list, labels = groups.setdefault(qid, ([], []))
            feats_list.append(feats)
            labels.append(rel)
    return [
        Query(qid, np.vstack(f), np.asarray(l, dtype=np.int64))
        for qid, (f, l) in groups.items()
    ]


def normalize_features(dataset: Dataset) -> Dataset:
    """Min-max scale every partition with statistics fitted on train."""
    if not dataset.train:
        raise ValueError("cannot normalize: empty train partition")
    stacked = np.vstack([q.features for q in dataset.train])
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    span = hi - lo
    scale = np.where(span > 0, span, 1.0)

    def apply(q: Query) -> Query:
        f = np.clip((q.features - lo) / scale, 0.0, 1.0)
        f[:, span == 0] = 0.0
        return Query(q.id, f, q.labels)

    return replace(
        dataset,
        train=[apply(q) for q in dataset.train],
        valid=[apply(q) for q in dataset.valid],
        test=[apply(q) for q in dataset.test],
        normalization=(lo, hi),
    )


def filter_queries(queries: list[Query], k: int) -> list[Query]:
    return [q for q in queries if q.n_candidates >= k]


def sample_query(partition: list[Query], rng: np.random.Generator) -> Query:
    if not partition:
        raise ValueError("cannot sample from an empty partition")
    return partition[int(rng.integers(len(partition)))]


def split_validation(train: list[Query], fraction: float, seed: int) -> tuple[list[Query], list[Query]]:
    """Hold out a seeded random fraction of train queries as a validation set."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n_valid = max(1, int(round(fraction * len(train))))
    chosen = set(rng.choice(len(train), size=n_valid, replace=False).tolist())
    valid = [q for i, q in enumerate(train) if i in chosen]
    rest = [q for i, q in enumerate(train) if i not in chosen]
    return rest, valid


def load_letor_dataset(
    train_path,
    test_path,
    feature_count: int,
    k: int,
    valid_path=None,
    max_label: int = 4,
    valid_fraction: float = 0.1,
    seed: int = 0,
    normalize: bool = True,
) -> Dataset:
    train = load_partition(train_path, feature_count)
    test = load_partition(test_path, feature_count)
    if valid_path is not None:
        valid = load_partition(valid_path, feature_count)
    else:
        train, valid = split_validation(train, valid_fraction, seed)
    ds = Dataset(
        filter_queries(train, k),
        filter_queries(valid, k),
        filter_queries(test, k),
        feature_count,
        max_label,
    )
    for name in ("train", "valid", "test"):
        if not ds.partition(name):
            raise ValueError(f"no {name} query has at least k={k} candidates")
    ds.validate()
    return normalize_features(ds) if normalize else ds


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale stand-in for a LETOR dataset.

    ``label_signal="onehot"`` writes a one-hot of the label into the first
    ``max_label + 1`` features; ``"scalar"`` writes ``label / max_label`` into
    feature 0. Remaining features carry Gaussian noise of scale ``noise_scale``.
    """

    num_train: int = 200
    num_valid: int = 50
    num_test: int = 50
    docs_per_query: int = 20
    feature_count: int = 8
    max_label: int = 4
    label_signal: str = "onehot"
    noise_scale: float = 0.0
    seed: int = 0
    k: int = 5

    def validate(self) -> None:
        if self.docs_per_query < self.k:
            raise ValueError(f"docs_per_query={self.docs_per_query} < k={self.k}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.label_signal not in ("onehot", "scalar"):
            raise ValueError(f"unknown label_signal {self.label_signal!r}")
        needed = self.max_label + 1 if self.label_signal == "onehot" else 1
        if self.feature_count < needed:
            raise ValueError(f"feature_count must be >= {needed} for label_signal={self.label_signal}")
        if min(self.num_train, self.num_valid, self.num_test) < 1:
            raise ValueError("every partition needs at least one query")


def synthesize_dataset(config: SyntheticConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, F, L = config.docs_per_query, config.feature_count, config.max_label

    def make(prefix: str, count: int) -> list[Query]:
        out = []
        for i in range(count):
            labels = rng.integers(0, L + 1, size=n)
            feats = np.zeros((n, F))
            if config.label_signal == "onehot":
                feats[np.arange(n), labels] = 1.0
                start = L + 1
            else:
                feats[:, 0] = labels / L
                start = 1
            feats[:, start:] = config.noise_scale * rng.standard_normal((n, F - start))
            out.append(Query(f"{prefix}{i}", feats, labels.astype(np.int64)))
        return out

    return Dataset(
        make("train-", config.num_train),
        make("valid-", config.num_valid),
        make("test-", config.num_test),
        F,
        L,
    )


def write_letor(path, queries: list[Query]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            for f, l in zip(q.features, q.labels):
                fh.write(format_letor_line(q.id, int(l), f) + "\n")


def save_cache(path, dataset: Dataset) -> None:
    """Store a dataset as ``.npz``: a JSON header plus one array pair per query."""
    header = {
        "format": "doublerank-dataset",
        "version": CACHE_VERSION,
        "feature_count": dataset.feature_count,
        "max_label": dataset.max_label,
        "partitions": {p: [q.id for q in dataset.partition(p)] for p in ("train", "valid", "test")},
    }
    arrays = {}
    for p in ("train", "valid", "test"):
        for i, q in enumerate(dataset.partition(p)):
            arrays[f"{p}/{i}/x"] = q.features
            arrays[f"{p}/{i}/y"] = q.labels
    if dataset.normalization is not None:
        arrays["norm/lo"], arrays["norm/hi"] = dataset.normalization
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_cache(path) -> Dataset:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != "doublerank-dataset" or header.get("version") != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported dataset cache")
        parts = {
            p: [Query(qid, data[f"{p}/{i}/x"], data[f"{p}/{i}/y"]) for i, qid in enumerate(ids)]
            for p, ids in header["partitions"].items()
        }
        norm = (data["norm/lo"], data["norm/hi"]) if "norm/lo" in data.files else None
    return Dataset(parts["train"], parts["valid"], parts["test"], header["feature_count"], header["max_label"], norm)
