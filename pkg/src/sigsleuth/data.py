"""Event tables: CSV ingestion, preprocessing, weighted sampling and splits."""
import csv
import fnmatch
import math
from dataclasses import dataclass

import numpy as np

from . import streams
from .errors import ConfigError, DataError, ParseError, SchemaError

BACKGROUND = 0
SIGNAL = 1
_LABEL_CODES = {"b": BACKGROUND, "s": SIGNAL}
_LABEL_NAMES = {BACKGROUND: "b", SIGNAL: "s"}

WEIGHT_COLUMN = "Weight"
LABEL_COLUMN = "Label"


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EventTable:
    """An immutable n x d feature matrix with optional weights and labels.

    ``labels`` uses 0 for background and 1 for signal.  ``applied`` records
    preprocessing steps already performed so that re-running a recipe is a
    no-op.
    """

    features: np.ndarray
    column_names: tuple
    weights: np.ndarray = None
    labels: np.ndarray = None
    applied: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {x.shape}")
        n, d = x.shape
        if n < 1 or d < 1:
            raise DataError(f"an event table needs n >= 1 and d >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise DataError(f"non-finite feature value in row {bad}")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != d:
            raise SchemaError(f"{len(names)} column names for {d} feature columns")
        if len(set(names)) != d:
            raise SchemaError("column names must be unique")
        object.__setattr__(self, "features", _frozen(x, float))
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "applied", tuple(self.applied))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (n,):
                raise DataError(f"weights must have length {n}")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise DataError("weights must be finite and non-negative")
            if w.sum() <= 0:
                raise DataError("weights must have a positive sum")
            object.__setattr__(self, "weights", _frozen(w, float))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,) or not np.all(np.isin(lab, (BACKGROUND, SIGNAL))):
                raise DataError("labels must be a length-n vector over {0, 1}")
            object.__setattr__(self, "labels", _frozen(lab, np.int8))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def column_index(self, name):
        try:
            return self.column_names.index(name)
        except ValueError:
            raise SchemaError(f"column {name!r} not in table") from None

    def column(self, name):
        return self.features[:, self.column_index(name)]

    def take(self, rows):
        """Sub-table with the given row indices (repeats allowed)."""
        rows = np.asarray(rows, dtype=np.intp)
        return EventTable(
            self.features[rows],
            self.column_names,
            None if self.weights is None else self.weights[rows],
            None if self.labels is None else self.labels[rows],
            self.applied,
        )

    def replace(self, **changes):
        fields = dict(
            features=self.features,
            column_names=self.column_names,
            weights=self.weights,
            labels=self.labels,
            applied=self.applied,
        )
        fields.update(changes)
        return EventTable(**fields)

    @staticmethod
    def concat(tables):
        """Row-wise concatenation; weights and labels kept only if all carry them."""
        tables = list(tables)
        names = tables[0].column_names
        for t in tables[1:]:
            if t.column_names != names:
                raise SchemaError("cannot concatenate tables with different columns")
        weights = None
        if all(t.weights is not None for t in tables):
            weights = np.concatenate([t.weights for t in tables])
        labels = None
        if all(t.labels is not None for t in tables):
            labels = np.concatenate([t.labels for t in tables])
        return EventTable(
            np.vstack([t.features for t in tables]), names, weights, labels, tables[0].applied
        )


@dataclass(frozen=True)
class PreprocessRecipe:
    """Column filters and transforms applied at load and preprocess time.

    ``drop_columns`` accepts shell-style patterns such as ``DER_*``.  When
    ``phi_columns`` is empty every column whose name ends in ``phi_suffix``
    is rotated.
    """

    jet_filter: int = None
    jet_column: str = "PRI_jet_num"
    drop_columns: tuple = ()
    log_columns: tuple = ()
    phi_rotation_anchor: str = None
    phi_columns: tuple = ()
    phi_suffix: str = "_phi"


def higgs_recipe():
    """The two-jet channel recipe for the Higgs machine-learning challenge CSV."""
    return PreprocessRecipe(
        jet_filter=2,
        drop_columns=("EventId", "DER_*", "KaggleSet", "KaggleWeight", "PRI_jet_num"),
        log_columns=(
            "PRI_tau_pt",
            "PRI_lep_pt",
            "PRI_met",
            "PRI_met_sumet",
            "PRI_jet_leading_pt",
            "PRI_jet_subleading_pt",
            "PRI_jet_all_pt",
        ),
        phi_rotation_anchor="PRI_jet_leading_phi",
    )


def _matches(name, patterns):
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(
            f"row {row}: column {column!r} has non-numeric value {text!r}", row, column
        ) from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}: column {column!r} has non-finite value {text!r}", row, column)
    return value


def load_csv(path, schema=None):
    """Read a headed CSV into an :class:`EventTable`.

    ``Weight`` and ``Label`` (``s``/``b``) columns are optional and are
    split off from the features.  Rows failing the recipe's jet filter and
    columns matched by ``drop_columns`` are discarded before parsing, so
    dropped columns may hold non-numeric values.  Row numbers in errors
    count data rows from 0.
    """
    schema = schema or PreprocessRecipe()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names in header")
        required = list(schema.log_columns)
        if schema.phi_rotation_anchor:
            required.append(schema.phi_rotation_anchor)
        if schema.jet_filter is not None:
            required.append(schema.jet_column)
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required columns {missing}")

        jet_pos = header.index(schema.jet_column) if schema.jet_filter is not None else None
        w_pos = header.index(WEIGHT_COLUMN) if WEIGHT_COLUMN in header else None
        l_pos = header.index(LABEL_COLUMN) if LABEL_COLUMN in header else None
        feat_pos = [
            i
            for i, name in enumerate(header)
            if i not in (w_pos, l_pos) and not _matches(name, schema.drop_columns)
        ]
        if not feat_pos:
            raise SchemaError(f"{path}: no feature columns left after drops")

        rows, weights, labels = [], [], []
        for r, record in enumerate(reader):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(f"row {r}: expected {len(header)} cells, got {len(record)}", r)
            if jet_pos is not None:
                jets = _parse_float(record[jet_pos], r, header[jet_pos])
                if jets != schema.jet_filter:
                    continue
            rows.append([_parse_float(record[i], r, header[i]) for i in feat_pos])
            if w_pos is not None:
                w = _parse_float(record[w_pos], r, WEIGHT_COLUMN)
                if w < 0:
                    raise ParseError(f"row {r}: negative weight", r, WEIGHT_COLUMN)
                weights.append(w)
            if l_pos is not None:
                code = record[l_pos].strip()
                if code not in _LABEL_CODES:
                    raise ParseError(f"row {r}: label must be 's' or 'b', got {code!r}", r, LABEL_COLUMN)
                labels.append(_LABEL_CODES[code])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return EventTable(
        np.array(rows, dtype=float),
        tuple(header[i] for i in feat_pos),
        np.array(weights) if w_pos is not None else None,
        np.array(labels) if l_pos is not None else None,
    )


def write_csv(table, path):
    """Write a table in the same layout :func:`load_csv` reads."""
    header = list(table.column_names)
    if table.weights is not None:
        header.append(WEIGHT_COLUMN)
    if table.labels is not None:
        header.append(LABEL_COLUMN)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i in range(table.n):
            row = [repr(float(v)) for v in table.features[i]]
            if table.weights is not None:
                row.append(repr(float(table.weights[i])))
            if table.labels is not None:
                row.append(_LABEL_NAMES[int(table.labels[i])])
            out.writerow(row)


def wrap_angle(x):
    """Map angles into (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    y = np.mod(x + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def preprocess(table, recipe):
    """Apply log transforms, azimuthal rotation and column drops.

    Every phi column is rotated to ``wrap(phi - phi_anchor)`` and the
    anchor column is removed.  Steps recorded in ``table.applied`` are
    skipped, so the function is idempotent.
    """
    x = np.array(table.features, dtype=float)
    names = list(table.column_names)
    applied = list(table.applied)

    for col in recipe.log_columns:
        step = f"log:{col}"
        if step in applied:
            continue
        if col not in names:
            raise SchemaError(f"log column {col!r} not in table")
        j = names.index(col)
        if np.any(x[:, j] <= 0):
            bad = int(np.argmax(x[:, j] <= 0))
            raise DataError(f"log column {col!r} has non-positive value in row {bad}")
        x[:, j] = np.log(x[:, j])
        applied.append(step)

    anchor = recipe.phi_rotation_anchor
    if anchor and f"rotate:{anchor}" not in applied:
        if anchor not in names:
            raise SchemaError(f"rotation anchor {anchor!r} not in table")
        a = names.index(anchor)
        if recipe.phi_columns:
            phis = list(recipe.phi_columns)
            missing = [c for c in phis if c not in names]
            if missing:
                raise SchemaError(f"phi columns {missing} not in table")
        else:
            phis = [c for c in names if c.endswith(recipe.phi_suffix)]
        ref = x[:, a].copy()
        for col in phis:
            if col == anchor:
                continue
            j = names.index(col)
            x[:, j] = wrap_angle(x[:, j] - ref)
        keep = [j for j in range(len(names)) if j != a]
        x = x[:, keep]
        names = [names[j] for j in keep]
        applied.append(f"rotate:{anchor}")

    keep = [j for j, name in enumerate(names) if not _matches(name, recipe.drop_columns)]
    if not keep:
        raise SchemaError("recipe drops every column")
    return EventTable(
        x[:, keep], tuple(names[j] for j in keep), table.weights, table.labels, tuple(applied)
    )


def weighted_sample(table, k, replace=False, seed=0):
    """Draw ``k`` rows with probability proportional to weight.

    Missing weights mean uniform sampling.
    """
    k = int(k)
    if k < 0:
        raise ConfigError("sample size must be non-negative")
    n = table.n
    gen = seed if isinstance(seed, np.random.Generator) else streams.rng(seed, "weighted_sample")
    if table.weights is None:
        p = None
        support = n
    else:
        p = table.weights / table.weights.sum()
        support = int(np.count_nonzero(p))
    if not replace and k > support:
        raise ConfigError(f"cannot draw {k} rows without replacement from {support} eligible rows")
    rows = gen.choice(n, size=k, replace=replace, p=p)
    return table.take(rows)


@dataclass(frozen=True)
class SplitSpec:
    """Train/test sizes for background (m) and experimental (n) data."""

    train_background: int
    test_background: int
    train_experimental: int
    test_experimental: int
    seed: int = 0

    def __post_init__(self):
        sizes = (
            self.train_background,
            self.test_background,
            self.train_experimental,
            self.test_experimental,
        )
        if any(int(s) != s or s < 1 for s in sizes):
            raise ConfigError(f"split sizes must be positive integers, got {sizes}")
        if self.test_background != self.test_experimental:
            raise ConfigError(
                "test background and test experimental sizes must be equal "
                f"({self.test_background} != {self.test_experimental})"
            )

    @classmethod
    def halves(cls, m_b, n, seed=0, test_size=None):
        """Default split: test halves of equal size, the rest for training."""
        m2 = test_size if test_size is not None else min(m_b, n) // 2
        return cls(m_b - m2, m2, n - m2, m2, seed)

    @property
    def sizes(self):
        return (
            self.train_background,
            self.test_background,
            self.train_experimental,
            self.test_experimental,
        )


def split_indices(m_b, n, spec, gen=None):
    """Row indices (train_b, test_b, train_e, test_e) for a split."""
    m1, m2, n1, n2 = spec.sizes
    if m1 + m2 > m_b:
        raise ConfigError(f"split needs {m1 + m2} background rows, only {m_b} available")
    if n1 + n2 > n:
        raise ConfigError(f"split needs {n1 + n2} experimental rows, only {n} available")
    if gen is None:
        gen = streams.rng(spec.seed, "split")
    pb = gen.permutation(m_b)
    pe = gen.permutation(n)
    return pb[:m1], pb[m1 : m1 + m2], pe[:n1], pe[n1 : n1 + n2]


def split(background, experimental, spec):
    """Disjoint random train/test split of background and experimental tables."""
    ib1, ib2, ie1, ie2 = split_indices(background.n, experimental.n, spec)
    return background.take(ib1), background.take(ib2), experimental.take(ie1), experimental.take(ie2)


def bootstrap_split_indices(m_b, n, spec, gen):
    """Resampled split with no original row shared between train and test.

    The rows are first partitioned at random into train and test pools of
    the split sizes; each pool is then resampled with replacement to its
    own size.
    """
    ib1, ib2, ie1, ie2 = split_indices(m_b, n, spec, gen)
    return (
        ib1[gen.integers(0, ib1.size, ib1.size)],
        ib2[gen.integers(0, ib2.size, ib2.size)],
        ie1[gen.integers(0, ie1.size, ie1.size)],
        ie2[gen.integers(0, ie2.size, ie2.size)],
    )
