"""Cross-domain implicit-feedback data: ingestion, IID/OOD splits,
negative sampling, leave-one-out evaluation candidates, and a synthetic
generator with a known attribute-to-preference causal structure.

All operations are pure functions of (inputs, seed); nothing here keeps
hidden random state.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

N_EVAL_NEGATIVES = 99


class DataError(ValueError):
    """Malformed or unusable input data."""


class SplitError(ValueError):
    """A split request that cannot be honored on the given dataset."""


@dataclass
class RawInteraction:
    """One positive row as read from a domain's export file."""

    user_key: str
    item_key: str
    domain: str
    rating: float | None = None
    attribute: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain tag {self.domain!r}")


@dataclass
class IngestStats:
    source_users_dropped: int = 0
    target_users_dropped: int = 0
    source_rows: int = 0
    target_rows: int = 0


@dataclass
class CrossDomainDataset:
    """Shared-user dataset with dense indices and deduplicated positives."""

    n_users: int
    n_source_items: int
    n_target_items: int
    source_positives: set
    target_positives: set
    user_attribute: np.ndarray | None = None     # per-user label in {0, 1}
    attribute_names: tuple | None = None         # original label strings
    user_keys: list = field(default_factory=list)
    source_item_keys: list = field(default_factory=list)
    target_item_keys: list = field(default_factory=list)
    stats: IngestStats | None = None

    def positives(self, domain: str) -> set:
        self._check_domain(domain)
        return self.source_positives if domain == SOURCE else self.target_positives

    def n_items(self, domain: str) -> int:
        self._check_domain(domain)
        return self.n_source_items if domain == SOURCE else self.n_target_items

    def user_items(self, domain: str) -> dict:
        """Per-user set of positive items in one domain (cached)."""
        key = "_items_" + domain
        cached = getattr(self, key, None)
        if cached is None:
            cached = {}
            for u, i in self.positives(domain):
                cached.setdefault(u, set()).add(i)
            setattr(self, key, cached)
        return cached

    def target_degrees(self) -> np.ndarray:
        degrees = np.zeros(self.n_users, dtype=np.int64)
        for u, _ in self.target_positives:
            degrees[u] += 1
        return degrees

    @staticmethod
    def _check_domain(domain: str) -> None:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")


@dataclass
class CandidateList:
    """One test (or validation) positive plus its 99 sampled negatives.

    `items` holds all 100 candidates in the fixed randomized order used
    for tie-breaking; `positive_position` locates the positive inside it.
    """

    user: int
    positive_item: int
    items: np.ndarray
    positive_position: int


@dataclass
class SplitResult:
    train: dict
    validation: dict
    test: dict
    eval_candidates: list
    val_candidates: list
    seed: int
    tiebreak_seed: int
    forced_train_moves: int = 0

    def part(self, name: str) -> dict:
        return {"train": self.train, "validation": self.validation,
                "test": self.test}[name]


@dataclass
class SplitSpec:
    """Declarative split request, resolved by generate_split()."""

    kind: str = "iid"                      # iid | ood_degree | ood_attribute
    ratios: tuple = (0.8, 0.1, 0.1)
    train_mix: tuple | None = None         # (first-type share, second-type share)
    test_mix: tuple | None = None
    seed: int = 0


# ---------------------------------------------------------------------------
# ingestion

def _sort_key(key: str):
    try:
        return (0, int(key), "")
    except ValueError:
        return (1, 0, key)


def _read_rows(path, domain: str, schema: dict, threshold: float):
    """Yield a RawInteraction per positive row of one domain's file."""
    user_col = schema.get("user", "user")
    item_col = schema.get("item", "item")
    rating_col = schema.get("rating")
    attr_col = schema.get("attribute")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        for col in (user_col, item_col):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing column {col!r}")
        if rating_col is not None and rating_col not in reader.fieldnames:
            raise DataError(f"{path}: missing column {rating_col!r}")
        if attr_col is not None and attr_col not in reader.fieldnames:
            attr_col = None  # attribute is optional per file
        for line_no, row in enumerate(reader, start=2):
            user = row.get(user_col)
            item = row.get(item_col)
            if user is None or item is None or user == "" or item == "":
                raise DataError(f"{path}: malformed row at line {line_no}")
            rating = None
            if rating_col is not None:
                try:
                    rating = float(row[rating_col])
                except (TypeError, ValueError):
                    raise DataError(f"{path}: bad rating at line {line_no}") from None
                if rating < threshold:
                    continue
            attr = row.get(attr_col) if attr_col else None
            yield RawInteraction(user_key=user, item_key=item, domain=domain,
                                 rating=rating, attribute=attr or None)


def ingest_csv(source_path, target_path, schema: dict | None = None,
               positive_threshold: float = 4.0) -> CrossDomainDataset:
    """Build the shared-user dataset from two delimiter-separated files.

    Rows with rating >= positive_threshold become positives (all rows when
    the schema names no rating column). Users are restricted to the
    intersection of the two files' user keys; indices are dense and sorted
    numerically when every key parses as an integer.
    """
    schema = schema or {"user": "user", "item": "item", "rating": "rating",
                        "attribute": "attribute"}
    raw = {}
    attrs: dict[str, str] = {}
    for domain, path in ((SOURCE, source_path), (TARGET, target_path)):
        rows = []
        for record in _read_rows(path, domain, schema, positive_threshold):
            rows.append((record.user_key, record.item_key))
            if record.attribute is not None:
                if attrs.get(record.user_key, record.attribute) != record.attribute:
                    raise DataError(f"user {record.user_key!r} has conflicting "
                                    f"attribute labels")
                attrs[record.user_key] = record.attribute
        raw[domain] = rows

    source_users = {u for u, _ in raw[SOURCE]}
    target_users = {u for u, _ in raw[TARGET]}
    shared = source_users & target_users
    if not shared:
        raise DataError("no users shared between the source and target files")

    user_keys = sorted(shared, key=_sort_key)
    user_index = {u: i for i, u in enumerate(user_keys)}
    stats = IngestStats(
        source_users_dropped=len(source_users - shared),
        target_users_dropped=len(target_users - shared),
        source_rows=len(raw[SOURCE]),
        target_rows=len(raw[TARGET]),
    )

    item_keys = {}
    positives = {}
    for domain in DOMAINS:
        kept = [(u, i) for u, i in raw[domain] if u in shared]
        keys = sorted({i for _, i in kept}, key=_sort_key)
        index = {key: j for j, key in enumerate(keys)}
        item_keys[domain] = keys
        positives[domain] = {(user_index[u], index[i]) for u, i in kept}

    attribute = None
    names = None
    if attrs:
        labels = sorted({attrs[u] for u in user_keys if u in attrs})
        if len(labels) == 2 and all(u in attrs for u in user_keys):
            names = (labels[0], labels[1])
            attribute = np.array([labels.index(attrs[u]) for u in user_keys],
                                 dtype=np.int8)

    return CrossDomainDataset(
        n_users=len(user_keys),
        n_source_items=len(item_keys[SOURCE]),
        n_target_items=len(item_keys[TARGET]),
        source_positives=positives[SOURCE],
        target_positives=positives[TARGET],
        user_attribute=attribute,
        attribute_names=names,
        user_keys=list(user_keys),
        source_item_keys=item_keys[SOURCE],
        target_item_keys=item_keys[TARGET],
        stats=stats,
    )


def save_dataset_csv(dataset: CrossDomainDataset, source_path, target_path) -> None:
    """Canonical on-disk form: user,item,rating[,attribute] with dense
    indices as keys and rating 5 for every positive."""
    has_attr = dataset.user_attribute is not None
    for domain, path in ((SOURCE, source_path), (TARGET, target_path)):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user", "item", "rating"] + (["attribute"] if has_attr else []))
            for u, i in sorted(dataset.positives(domain)):
                row = [u, i, 5]
                if has_attr:
                    label = int(dataset.user_attribute[u])
                    name = dataset.attribute_names[label] if dataset.attribute_names else label
                    row.append(name)
                writer.writerow(row)


# ---------------------------------------------------------------------------
# splitting

def _apportion(n: int, ratios) -> tuple:
    """Largest-remainder integer split of n by the normalized ratios."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or ratios.sum() <= 0:
        raise SplitError(f"ratios must be nonnegative and sum > 0, got {tuple(ratios)}")
    shares = ratios / ratios.sum()
    raw = shares * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for idx in order[: n - counts.sum()]:
        counts[idx] += 1
    return tuple(int(c) for c in counts)


def _stable_key(seed: int, user: int, item: int) -> int:
    digest = hashlib.sha1(f"{seed}:{user}:{item}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _partition_domain(positives, ratios, rng) -> tuple:
    pool = sorted(positives)
    rng.shuffle(pool)
    n_train, n_val, n_test = _apportion(len(pool), ratios)
    train = set(pool[:n_train])
    val = set(pool[n_train:n_train + n_val])
    test = set(pool[n_train + n_val:])
    return train, val, test


def _ensure_test_users_trained(train: set, val: set, test: set, rng,
                               types=None) -> int:
    """Every user with a held-out target positive keeps at least one
    training positive; violators swap with a donor so the part sizes stay
    exact. When a type array is given, donors of the promoted user's type
    are preferred so biased mixtures stay put. Users whose entire history
    landed outside train fall back to train-only when no donor exists.
    """
    moves = 0
    train_per_user = {}
    for u, _ in train:
        train_per_user[u] = train_per_user.get(u, 0) + 1

    for part in (val, test):
        violators = sorted({u for u, _ in part if train_per_user.get(u, 0) == 0})
        for u in violators:
            user_held = sorted(p for p in part if p[0] == u)
            promote = user_held[rng.integers(len(user_held))]
            donors = sorted(p for p in train if train_per_user.get(p[0], 0) >= 2)
            if types is not None:
                same_type = [p for p in donors if types[p[0]] == types[u]]
                donors = same_type or donors
            part.discard(promote)
            train.add(promote)
            train_per_user[u] = train_per_user.get(u, 0) + 1
            moves += 1
            if donors:
                demote = donors[rng.integers(len(donors))]
                train.discard(demote)
                part.add(demote)
                train_per_user[demote[0]] -= 1
    return moves


def _finish_split(dataset, parts, seed, rng, moves) -> SplitResult:
    train, val, test = parts
    tiebreak_seed = int(rng.integers(0, 2**31 - 1))
    eval_candidates = build_eval_candidates(
        dataset, sorted(test[TARGET]), seed=tiebreak_seed)
    val_candidates = build_eval_candidates(
        dataset, sorted(val[TARGET]), seed=tiebreak_seed)
    return SplitResult(train=train, validation=val, test=test,
                       eval_candidates=eval_candidates,
                       val_candidates=val_candidates,
                       seed=seed, tiebreak_seed=tiebreak_seed,
                       forced_train_moves=moves)


def split_iid(dataset: CrossDomainDataset, ratios=(0.8, 0.1, 0.1),
              seed: int = 0) -> SplitResult:
    """Random per-domain partition at the given ratios; target test users
    always retain a training positive."""
    rng = np.random.default_rng(seed)
    train, val, test = {}, {}, {}
    for domain in DOMAINS:
        train[domain], val[domain], test[domain] = _partition_domain(
            dataset.positives(domain), ratios, rng)
    moves = _ensure_test_users_trained(train[TARGET], val[TARGET], test[TARGET], rng)
    return _finish_split(dataset, (train, val, test), seed, rng, moves)


def _user_types_by_degree(dataset: CrossDomainDataset) -> np.ndarray:
    """1 for users strictly above the median target degree, else 0."""
    degrees = dataset.target_degrees()
    median = float(np.median(degrees))
    return (degrees > median).astype(np.int8)


def _split_biased(dataset, types, train_mix, test_mix, ratios, seed) -> SplitResult:
    """Shared machinery for the degree- and attribute-biased splits.

    types[u] in {0, 1}; mix pairs are (type-1 share, type-0 share), i.e.
    (high, low) for degree and (first label, second label) for attributes.
    """
    for name, mix in (("train", train_mix), ("test", test_mix)):
        mix = np.asarray(mix, dtype=np.float64)
        if mix.shape != (2,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
            raise SplitError(f"{name} mix must be a nonnegative pair summing to 1")
    rng = np.random.default_rng(seed)

    pools = {1: sorted(p for p in dataset.target_positives if types[p[0]] == 1),
             0: sorted(p for p in dataset.target_positives if types[p[0]] == 0)}
    for pool in pools.values():
        rng.shuffle(pool)

    r_train, r_val, r_test = np.asarray(ratios, dtype=np.float64) / np.sum(ratios)
    # validation mirrors the training mixture; per-type demand per interaction
    demand = {
        1: (r_train + r_val) * train_mix[0] + r_test * test_mix[0],
        0: (r_train + r_val) * train_mix[1] + r_test * test_mix[1],
    }
    limits = []
    for t in (1, 0):
        if demand[t] == 0:
            continue
        limits.append(len(pools[t]) / demand[t])
        if not pools[t]:
            raise SplitError(
                f"requested mixture needs type-{t} interactions but none exist; "
                f"achievable maximum share for that type is 0")
    n_used = int(min(limits)) if limits else 0
    if n_used == 0:
        raise SplitError("no interactions satisfy the requested mixture")

    def plan(n: int):
        """Per-(part, type) take counts, or None if a pool is overdrawn."""
        sizes = _apportion(n, ratios)
        takes = [_apportion(size, mix) for size, mix in
                 zip(sizes, (train_mix, train_mix, test_mix))]
        for t, idx in ((1, 0), (0, 1)):
            if sum(take[idx] for take in takes) > len(pools[t]):
                return None
        return takes

    # largest-remainder rounding can overdraw a pool by a part or two
    takes = plan(n_used)
    while takes is None and n_used > 0:
        n_used -= 1
        takes = plan(n_used)
    if takes is None:
        raise SplitError("no interactions satisfy the requested mixture")

    train, val, test = set(), set(), set()
    cursor = {1: 0, 0: 0}
    for part, (take_first, take_second) in zip((train, val, test), takes):
        for t, take in ((1, take_first), (0, take_second)):
            part.update(pools[t][cursor[t]:cursor[t] + take])
            cursor[t] += take

    src_train, src_val, src_test = _partition_domain(
        dataset.source_positives, ratios, rng)
    parts = ({SOURCE: src_train, TARGET: train},
             {SOURCE: src_val, TARGET: val},
             {SOURCE: src_test, TARGET: test})
    moves = _ensure_test_users_trained(parts[0][TARGET], parts[1][TARGET],
                                       parts[2][TARGET], rng, types=types)
    return _finish_split(dataset, parts, seed, rng, moves)


def split_ood_degree(dataset: CrossDomainDataset, train_ratio, test_ratio,
                     ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitResult:
    """Bias the target split by user activity: users above the median
    target degree are the high type. Ratio pairs are (high, low) shares of
    interactions; the corpus is subsampled to the largest size at which
    both mixtures are feasible."""
    types = _user_types_by_degree(dataset)
    return _split_biased(dataset, types, tuple(train_ratio), tuple(test_ratio),
                         ratios, seed)


def split_ood_attribute(dataset: CrossDomainDataset, train_ratio, test_ratio,
                        ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitResult:
    """Bias the target split by the binary user attribute; ratio pairs are
    (first label, second label) shares in sorted label order."""
    if dataset.user_attribute is None:
        raise SplitError("dataset has no user attribute column")
    labels = np.unique(dataset.user_attribute)
    if len(labels) != 2:
        raise SplitError(f"attribute must be binary, found {len(labels)} labels")
    # type 1 = first label so the pair order matches the documented reading
    types = (dataset.user_attribute == labels[0]).astype(np.int8)
    return _split_biased(dataset, types, tuple(train_ratio), tuple(test_ratio),
                         ratios, seed)


def generate_split(dataset: CrossDomainDataset, spec: SplitSpec) -> SplitResult:
    if spec.kind == "iid":
        return split_iid(dataset, spec.ratios, spec.seed)
    if spec.kind == "ood_degree":
        return split_ood_degree(dataset, spec.train_mix, spec.test_mix,
                                spec.ratios, spec.seed)
    if spec.kind == "ood_attribute":
        return split_ood_attribute(dataset, spec.train_mix, spec.test_mix,
                                   spec.ratios, spec.seed)
    raise SplitError(f"unknown split kind {spec.kind!r}")


def realized_mixture(positives, types) -> float:
    """Share of interactions whose user is type 1."""
    if not positives:
        return 0.0
    return sum(1 for u, _ in positives if types[u] == 1) / len(positives)


# ---------------------------------------------------------------------------
# sampling

@dataclass
class TrainingExamples:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    skipped_saturated_users: int = 0

    def __len__(self):
        return len(self.users)


def sample_train_negatives(dataset: CrossDomainDataset, split: SplitResult,
                           domain: str, n_neg_per_positive: int,
                           seed: int) -> TrainingExamples:
    """Pair every training positive with n uniform negatives the user has
    never interacted with in that domain."""
    if n_neg_per_positive < 1:
        raise ValueError("n_neg_per_positive must be >= 1")
    rng = np.random.default_rng(seed)
    n_items = dataset.n_items(domain)
    user_items = dataset.user_items(domain)
    users, items, labels = [], [], []
    skipped = 0
    for u, i in sorted(split.train[domain]):
        users.append(u)
        items.append(i)
        labels.append(1.0)
        known = user_items.get(u, set())
        if len(known) >= n_items:
            skipped += 1
            continue
        drawn = 0
        while drawn < n_neg_per_positive:
            j = int(rng.integers(n_items))
            if j in known:
                continue
            users.append(u)
            items.append(j)
            labels.append(0.0)
            drawn += 1
    return TrainingExamples(np.array(users, dtype=np.intp),
                            np.array(items, dtype=np.intp),
                            np.array(labels, dtype=np.float64),
                            skipped_saturated_users=skipped)


def build_eval_candidates(dataset: CrossDomainDataset, test_positives,
                          seed: int) -> list:
    """99 uniform never-interacted negatives per test positive, ordered by
    a per-(user, item) hash of the seed. That order is the tie-break order
    of the ranking metrics and survives serialization byte for byte.
    """
    rng = np.random.default_rng(seed)
    user_items = dataset.user_items(TARGET)
    n_items = dataset.n_target_items
    out = []
    for u, pos in sorted(test_positives):
        known = user_items.get(u, set())
        eligible = np.array([j for j in range(n_items) if j not in known],
                            dtype=np.intp)
        if len(eligible) < N_EVAL_NEGATIVES:
            raise SplitError(
                f"user {u} has only {len(eligible)} eligible negatives; "
                f"{N_EVAL_NEGATIVES} required")
        negatives = rng.choice(eligible, size=N_EVAL_NEGATIVES, replace=False)
        items = np.concatenate([[pos], negatives])
        keys = [(_stable_key(seed, u, int(j)), int(j)) for j in items]
        order = np.lexsort(([k[1] for k in keys], [k[0] for k in keys]))
        ordered = items[order]
        position = int(np.nonzero(ordered == pos)[0][0])
        out.append(CandidateList(user=u, positive_item=pos,
                                 items=ordered.astype(np.intp),
                                 positive_position=position))
    return out


# ---------------------------------------------------------------------------
# synthetic data with known causal structure

@dataclass
class SynthConfig:
    n_users: int = 500
    n_source_items: int = 400
    n_target_items: int = 300
    k: int = 4
    target_density: float = 0.02
    source_density: float = 0.04
    n_edges: int = 8
    weight_matrix: np.ndarray | None = None   # overrides n_edges when given
    noise_scale: float = 0.1
    attribute_shift: float = 0.0              # subpopulation mean shift
    source_map_correlation: float = 0.7
    degree_spread: float = 0.4                # exponent tempering activity skew
    seed: int = 0


@dataclass
class GroundTruth:
    weight_matrix: np.ndarray
    edges: set                     # (attribute node, preference node) pairs
    attributes: np.ndarray         # n_users x k
    target_preferences: np.ndarray
    source_preferences: np.ndarray
    labels: np.ndarray

    def samples(self, domain: str = TARGET) -> np.ndarray:
        """2k x n_users column batch of attribute || preference vectors."""
        prefs = self.target_preferences if domain == TARGET else self.source_preferences
        return np.vstack([self.attributes.T, prefs.T])


def _random_weight_matrix(k: int, n_edges: int, rng) -> np.ndarray:
    """Sparse attribute->preference map. Every preference dimension gets at
    least one parent (a parentless preference would contradict the model's
    not-a-root prior and turn that dimension into pure noise)."""
    if not (k <= n_edges <= k * k):
        raise DataError(f"n_edges must lie in [{k}, {k * k}], got {n_edges}")
    b = np.zeros((k, k))
    cells = [int(rng.integers(k)) * k + j for j in range(k)]  # one per column
    remaining = sorted(set(range(k * k)) - set(cells))
    extra = rng.choice(remaining, size=n_edges - k, replace=False)
    cells = np.array(cells + [int(c) for c in extra])
    magnitudes = rng.uniform(0.7, 1.5, size=n_edges)
    signs = rng.choice([-1.0, 1.0], size=n_edges)
    b.flat[cells] = magnitudes * signs
    return b


def _temper_norms(prefs: np.ndarray, spread: float) -> np.ndarray:
    """Rescale rows so their norms become norm**spread: keeps per-user
    activity monotone in preference strength while softening the tail so
    low-activity users still hold a usable share of interactions."""
    if spread <= 0:
        raise DataError(f"degree_spread must be positive, got {spread}")
    norms = np.linalg.norm(prefs, axis=1, keepdims=True)
    safe = np.where(norms > 1e-12, norms, 1.0)
    return prefs * safe ** (spread - 1.0)


def _positives_from_affinity(affinity: np.ndarray, density: float) -> set:
    n_total = affinity.size
    count = int(round(density * n_total))
    if count < 1 or count >= n_total:
        raise DataError(f"density {density} infeasible for {n_total} cells")
    top = np.argsort(-affinity.ravel(), kind="stable")[:count]
    rows, cols = np.unravel_index(top, affinity.shape)
    return {(int(u), int(i)) for u, i in zip(rows, cols)}


def synth_generate(config: SynthConfig) -> tuple[CrossDomainDataset, GroundTruth]:
    """Draw attributes, generate preferences through a sparse linear map,
    and emit positives where preference-item affinity clears the global
    quantile implied by the requested density.

    The ground truth records the map's support as directed edges from
    attribute node i to preference node k + j.
    """
    rng = np.random.default_rng(config.seed)
    m, k = config.n_users, config.k

    labels = rng.integers(0, 2, size=m).astype(np.int8)
    attributes = rng.normal(size=(m, k))
    if config.attribute_shift:
        attributes[labels == 1, 0] += config.attribute_shift

    if config.weight_matrix is not None:
        b = np.asarray(config.weight_matrix, dtype=np.float64)
        if b.shape != (k, k):
            raise DataError(f"weight matrix must be {k}x{k}, got {b.shape}")
    else:
        b = _random_weight_matrix(k, config.n_edges, rng)

    noise_t = rng.normal(size=(m, k)) * config.noise_scale
    target_prefs = attributes @ b + noise_t

    corr = config.source_map_correlation
    c = corr * b + (1.0 - corr) * _random_weight_matrix(k, config.n_edges, rng)
    noise_s = rng.normal(size=(m, k)) * config.noise_scale
    source_prefs = attributes @ c + noise_s

    target_items = rng.normal(size=(config.n_target_items, k))
    source_items = rng.normal(size=(config.n_source_items, k))
    spread = config.degree_spread
    target_positives = _positives_from_affinity(
        _temper_norms(target_prefs, spread) @ target_items.T, config.target_density)
    source_positives = _positives_from_affinity(
        _temper_norms(source_prefs, spread) @ source_items.T, config.source_density)

    dataset = CrossDomainDataset(
        n_users=m,
        n_source_items=config.n_source_items,
        n_target_items=config.n_target_items,
        source_positives=source_positives,
        target_positives=target_positives,
        user_attribute=labels,
        attribute_names=("0", "1"),
        user_keys=[str(u) for u in range(m)],
        source_item_keys=[str(i) for i in range(config.n_source_items)],
        target_item_keys=[str(i) for i in range(config.n_target_items)],
    )
    truth = GroundTruth(
        weight_matrix=b,
        edges={(int(i), int(k + j)) for i, j in zip(*np.nonzero(b))},
        attributes=attributes,
        target_preferences=target_prefs,
        source_preferences=source_prefs,
        labels=labels,
    )
    return dataset, truth


# ---------------------------------------------------------------------------
# serialization

def save_split(split: SplitResult, directory, extra_meta: str = "") -> None:
    """One file per part with lines domain,user,item,label plus candidate
    files for validation and test."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = f"# seed={split.seed} tiebreak_seed={split.tiebreak_seed}"
    if extra_meta:
        header += f" {extra_meta}"
    for name in ("train", "validation", "test"):
        with open(directory / f"{name}.csv", "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            fh.write("domain,user,item,label\n")
            part = split.part(name)
            for domain in DOMAINS:
                for u, i in sorted(part[domain]):
                    fh.write(f"{domain},{u},{i},1\n")
    for name, candidates in (("candidates_test", split.eval_candidates),
                             ("candidates_validation", split.val_candidates)):
        with open(directory / f"{name}.csv", "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for cand in candidates:
                negatives = [int(j) for j in cand.items if j != cand.positive_item]
                fh.write(",".join(str(x) for x in
                                  [cand.user, cand.positive_item] + negatives) + "\n")


def load_split(directory) -> SplitResult:
    from pathlib import Path

    directory = Path(directory)
    parts = {}
    seed = tiebreak_seed = 0
    for name in ("train", "validation", "test"):
        part = {SOURCE: set(), TARGET: set()}
        with open(directory / f"{name}.csv", "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    fields = dict(kv.split("=") for kv in line[1:].split())
                    seed = int(fields["seed"])
                    tiebreak_seed = int(fields["tiebreak_seed"])
                    continue
                if not line or line.startswith("domain,"):
                    continue
                domain, u, i, _ = line.split(",")
                part[domain].add((int(u), int(i)))
        parts[name] = part

    candidates = {}
    for name in ("candidates_test", "candidates_validation"):
        lists = []
        with open(directory / f"{name}.csv", "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                values = [int(x) for x in line.split(",")]
                user, pos, negatives = values[0], values[1], values[2:]
                pos_key = (_stable_key(tiebreak_seed, user, pos), pos)
                position = sum(
                    1 for j in negatives
                    if (_stable_key(tiebreak_seed, user, j), j) < pos_key)
                items = negatives[:position] + [pos] + negatives[position:]
                lists.append(CandidateList(user=user, positive_item=pos,
                                           items=np.array(items, dtype=np.intp),
                                           positive_position=position))
        candidates[name] = lists

    return SplitResult(train=parts["train"], validation=parts["validation"],
                       test=parts["test"],
                       eval_candidates=candidates["candidates_test"],
                       val_candidates=candidates["candidates_validation"],
                       seed=seed, tiebreak_seed=tiebreak_seed)
