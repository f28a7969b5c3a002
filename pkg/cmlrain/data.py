"""
File formats: RFLD binary fields, CSV fields, topologies, observations and ensembles.
"""

import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .forward import Observation, Topology
from .geometry import LinkSegment, normalize_coordinates

PathLike = Union[str, Path]

RFLD_MAGIC = b"RFLD"
TOPOLOGY_COLUMNS = ["link_id", "x0", "y0", "x1", "y1", "a", "b"]


class FieldFormatError(ValueError):
    """Raised for malformed field files."""
    pass


def save_field(path: PathLike, values: np.ndarray):
    """Write an H x W matrix as magic "RFLD", u32 H, u32 W, f64 row-major (little-endian)."""
    values = np.atleast_2d(np.asarray(values, dtype="<f8"))
    if values.ndim != 2:
        raise ValueError("Fields must be 2-D matrices")
    H, W = values.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(RFLD_MAGIC + struct.pack("<II", H, W) + values.tobytes(order="C"))


def load_field(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != RFLD_MAGIC:
        raise FieldFormatError(f"{path}: not an RFLD file")
    H, W = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 8 * H * W:
        raise FieldFormatError(f"{path}: expected {H}x{W} values, file size does not match")
    return np.frombuffer(data[12:], dtype="<f8").reshape(H, W).astype(float)


def save_field_csv(path: PathLike, values: np.ndarray):
    """Debug format: one `row,col,value` line per cell."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    rows, cols = np.indices(values.shape)
    df = pd.DataFrame({"row": rows.ravel(), "col": cols.ravel(), "value": values.ravel()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)


def load_field_csv(path: PathLike) -> np.ndarray:
    df = pd.read_csv(path)
    missing = [c for c in ("row", "col", "value") if c not in df.columns]
    if missing:
        raise FieldFormatError(f"{path}: missing columns {missing}")
    H, W = int(df["row"].max()) + 1, int(df["col"].max()) + 1
    if len(df) != H * W:
        raise FieldFormatError(f"{path}: expected {H * W} cells, found {len(df)}")
    out = np.full((H, W), np.nan)
    out[df["row"].to_numpy(int), df["col"].to_numpy(int)] = df["value"].to_numpy(float)
    if np.isnan(out).any():
        raise FieldFormatError(f"{path}: duplicate or missing cells")
    return out


def load_topology(path: PathLike, coordinate_frame: Optional[Dict] = None) -> Topology:
    """
    Load a topology CSV with columns link_id,x0,y0,x1,y1,a,b[,sigma].

    Args:
        path: CSV file
        coordinate_frame: Optional {x_ref, y_ref, dx, dy} mapping metric coordinates to grid coordinates
    """
    df = pd.read_csv(path, dtype={"link_id": str})
    missing = [c for c in TOPOLOGY_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing topology columns {missing}")
    if df["link_id"].duplicated().any():
        raise ValueError(f"{path}: duplicate link ids")
    starts = df[["x0", "y0"]].to_numpy(float)
    ends = df[["x1", "y1"]].to_numpy(float)
    if coordinate_frame:
        frame = {k: float(coordinate_frame[k]) for k in ("x_ref", "y_ref", "dx", "dy")}
        starts = normalize_coordinates(starts, **frame)
        ends = normalize_coordinates(ends, **frame)
    segments = [LinkSegment(s, e) for s, e in zip(starts, ends)]
    sigma = df["sigma"].to_numpy(float) if "sigma" in df.columns else None
    return Topology(df["link_id"].tolist(), segments, df["a"].to_numpy(float), df["b"].to_numpy(float), sigma)


def save_topology(path: PathLike, topology: Topology):
    df = pd.DataFrame({
        "link_id": topology.link_ids,
        "x0": [s.start[0] for s in topology.segments],
        "y0": [s.start[1] for s in topology.segments],
        "x1": [s.end[0] for s in topology.segments],
        "y1": [s.end[1] for s in topology.segments],
        "a": topology.a,
        "b": topology.b,
    })
    if topology.sigma is not None:
        df["sigma"] = topology.sigma
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g")


def save_observation(path: PathLike, observation: Observation, link_ids: Sequence[str]):
    if len(link_ids) != observation.y.size:
        raise ValueError("One link id per observation is required")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"link_id": list(link_ids), "y": observation.y}).to_csv(path, index=False, float_format="%.17g")


def load_observation(path: PathLike, link_ids: Optional[Sequence[str]] = None) -> Observation:
    """Load `link_id,y`; with link_ids, rows are reordered to match them."""
    df = pd.read_csv(path, dtype={"link_id": str})
    if "y" not in df.columns or "link_id" not in df.columns:
        raise ValueError(f"{path}: observation files need link_id and y columns")
    if link_ids is not None:
        df = df.set_index("link_id")
        missing = [l for l in link_ids if l not in df.index]
        if missing:
            raise ValueError(f"{path}: no observation for links {missing[:5]}")
        df = df.loc[list(link_ids)].reset_index()
    return Observation(df["y"].to_numpy(float), df["link_id"].tolist())


def save_ensemble(path: PathLike, samples: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(samples, dtype=float))


def load_ensemble(path: PathLike) -> np.ndarray:
    return np.load(path)


def list_fields(directory: PathLike) -> List[Path]:
    return sorted(Path(directory).glob("*.rfld"))
