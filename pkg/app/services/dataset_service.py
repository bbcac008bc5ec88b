"""
Channel datasets: (GU position, UAV position, distance, gain) rows.

Gain g is the negative loss in dB so that higher is better; the CKM stage
converts back to loss at its boundary.
"""
import json
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import MinMaxScaler

from app.services.channel_service import ground_truth_loss_db
from app.utils.errors import SchemaError, MissingInputError

logger = logging.getLogger(__name__)

FEATURES = ('xG', 'yG', 'zG', 'xU', 'yU', 'zU', 'd', 'g')
GU_COLUMNS = ['xG', 'yG', 'zG']
UAV_COLUMNS = ['xU', 'yU', 'zU']
POSITION_COLUMNS = GU_COLUMNS + UAV_COLUMNS


@dataclass(frozen=True)
class NormStats:
    minimum: Tuple[float, ...]
    maximum: Tuple[float, ...]

    @property
    def degenerate(self):
        """Per-feature flag for constant columns (normalized to 0)."""
        return tuple(hi == lo for lo, hi in zip(self.minimum, self.maximum))

    def scaler(self):
        """A MinMaxScaler fitted to exactly these extrema."""
        return MinMaxScaler().fit(np.array([self.minimum, self.maximum]))

    def column(self, name):
        i = FEATURES.index(name)
        return self.minimum[i], self.maximum[i]

    def to_dict(self):
        return {
            'features': list(FEATURES),
            'minimum': list(self.minimum),
            'maximum': list(self.maximum),
            'degenerate': list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, data):
        if list(data.get('features', [])) != list(FEATURES):
            raise SchemaError(f"norm stats features {data.get('features')} do not match {list(FEATURES)}")
        minimum = tuple(float(v) for v in data['minimum'])
        maximum = tuple(float(v) for v in data['maximum'])
        if any(hi < lo for lo, hi in zip(minimum, maximum)):
            raise SchemaError("norm stats have max < min")
        return cls(minimum, maximum)


@dataclass(frozen=True)
class Dataset:
    frame: pd.DataFrame
    stats: Optional[NormStats] = None
    normalized: bool = False

    def __len__(self):
        return len(self.frame)

    def values(self):
        return self.frame[list(FEATURES)].to_numpy(dtype=float)


def _frame(values):
    return pd.DataFrame(np.asarray(values, dtype=float).reshape(-1, len(FEATURES)), columns=list(FEATURES))


def from_positions(gu, uav, gain):
    """Build a raw dataset from (n, 3) GU and UAV positions and (n,) gains."""
    gu = np.asarray(gu, dtype=float)
    uav = np.asarray(uav, dtype=float)
    d = np.linalg.norm(uav - gu, axis=-1)
    return Dataset(_frame(np.column_stack([gu, uav, d, np.asarray(gain, dtype=float)])))


def generate_dataset(env, params, n, seed):
    """
    Simulate n channel measurements in the scene
    Args:
        env (Environment): scene
        params (ChannelParams): channel constants (shadowing included)
        n (int): number of rows
        seed (int): seed of the draw
    Returns:
        Dataset: raw rows, gain = -ground truth loss
    """
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    uav = np.column_stack([
        rng.uniform(0.0, env.side_x, size=n),
        rng.uniform(0.0, env.side_x, size=n),
        rng.uniform(env.h_min, env.h_max, size=n),
    ])
    gu = env.gu_array[rng.integers(0, env.n_gus, size=n)]
    loss = ground_truth_loss_db(uav, gu, env, params, rng)
    logger.info(f"Generated {n} channel samples (seed={seed})")
    return from_positions(gu, uav, -np.atleast_1d(loss))


def fit_stats(ds):
    scaler = MinMaxScaler().fit(ds.values())
    return NormStats(tuple(scaler.data_min_.tolist()), tuple(scaler.data_max_.tolist()))


def normalize(ds, stats=None):
    """
    Min-max normalize every feature
    Args:
        ds (Dataset): raw dataset
        stats (NormStats): optional stored extrema; fitted on ds when omitted.
            Stored stats applied to new data may map outside [0, 1].
    Returns:
        tuple: (normalized Dataset, NormStats)
    """
    if ds.normalized:
        raise ValueError("dataset is already normalized")
    stats = stats or fit_stats(ds)
    values = stats.scaler().transform(ds.values()) if len(ds) else ds.values()
    return Dataset(_frame(values), stats=stats, normalized=True), stats


def denormalize(ds, stats=None):
    stats = stats or ds.stats
    if stats is None:
        raise ValueError("denormalize needs norm stats")
    values = stats.scaler().inverse_transform(ds.values()) if len(ds) else ds.values()
    return Dataset(_frame(values), stats=None, normalized=False)


def split(ds, train_fraction, seed):
    """Seeded shuffle split into disjoint (train, validation) datasets."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    train, val = train_test_split(ds.frame, train_size=train_fraction, random_state=seed, shuffle=True)
    return (
        replace(ds, frame=train.reset_index(drop=True)),
        replace(ds, frame=val.reset_index(drop=True)),
    )


def concat(first, second):
    if first.normalized != second.normalized:
        raise ValueError("cannot concatenate normalized and raw datasets")
    frame = pd.concat([first.frame, second.frame], ignore_index=True)
    return Dataset(frame, stats=first.stats, normalized=first.normalized)


def write_csv(ds, path):
    ds.frame.to_csv(path, index=False, columns=list(FEATURES), float_format='%.17g')
    if ds.normalized and ds.stats is not None:
        write_stats(ds.stats, stats_path(path))
    return path


def read_csv(path, stats=None):
    """
    Read a dataset CSV; malformed rows raise SchemaError naming the line
    Args:
        path (str): CSV with header xG,yG,zG,xU,yU,zU,d,g
        stats (NormStats): stats for a normalized file; the JSON sidecar is used when present
    Returns:
        Dataset
    """
    try:
        frame = pd.read_csv(path, float_precision='round_trip')
    except FileNotFoundError:
        raise MissingInputError(f"dataset not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path}: {str(e)}")
    if list(frame.columns) != list(FEATURES):
        raise SchemaError(f"{path}: header {list(frame.columns)} does not match {list(FEATURES)}", line=1)

    if frame.empty:
        return Dataset(frame.astype(float), stats=stats, normalized=stats is not None)
    numeric = frame.apply(pd.to_numeric, errors='coerce')
    # short rows come back padded with NaN
    bad = numeric.isna().any(axis=1)
    if bad.any():
        first = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(f"{path}: expected {len(FEATURES)} numeric fields", line=first + 2)

    sidecar = stats_path(path)
    if stats is None:
        try:
            stats = read_stats(sidecar)
        except MissingInputError:
            stats = None
    return Dataset(numeric.astype(float), stats=stats, normalized=stats is not None)


def stats_path(csv_path):
    base = csv_path[:-4] if csv_path.endswith('.csv') else csv_path
    return f"{base}.stats.json"


def write_stats(stats, path):
    with open(path, 'w') as handle:
        json.dump(stats.to_dict(), handle, indent=2)
    return path


def read_stats(path):
    try:
        with open(path, 'r') as handle:
            return NormStats.from_dict(json.load(handle))
    except FileNotFoundError:
        raise MissingInputError(f"norm stats not found: {path}")
