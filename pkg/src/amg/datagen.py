"""Synthetic Poisson benchmark: source-term generation, an independent
finite-difference oracle, irregular sampling, and the dataset format.

The oracle solves -lap(u) = f on the unit square with zero Dirichlet
boundary on a regular grid (5-point stencil, conjugate gradients run to
a tight residual) and shares no code with the learned model. Samples
discretize (f, u) on uniformly random interior points.

Dataset layout on disk::

    <dir>/manifest          JSON: counts, sizes, seeds, format version
    <dir>/train/*.rec       one record per sample (same for val/, test/)

Record files are binary: 8-byte magic ``AMGREC1\\0``, u32 format version,
a length-prefixed UTF-8 sample id, u32 n_points/d_pos/d_a/d_u, then the
position, input and target buffers as little-endian float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

__all__ = [
    "GaussianField",
    "SampleRecord",
    "Dataset",
    "FormatError",
    "GenerationError",
    "gen_poisson_rhs",
    "solve_poisson_fd",
    "bilinear_interpolate",
    "sample_irregular_mesh",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

RECORD_MAGIC = b"AMGREC1\x00"
FORMAT_VERSION = 1
SIGMA_RANGE = (0.025, 0.1)
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


class FormatError(ValueError):
    """Dataset files that do not match the documented layout."""


class GenerationError(RuntimeError):
    """Oracle failure during sample generation."""


@dataclass
class GaussianField:
    """Superposition of isotropic Gaussians; callable on coordinate arrays."""

    centers: np.ndarray   # (K, 2)
    sigmas: np.ndarray    # (K,)
    amplitudes: np.ndarray  # (K,)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        r2 = (x - self.centers[:, 0]) ** 2 + (y - self.centers[:, 1]) ** 2
        return (self.amplitudes * np.exp(-r2 / (2.0 * self.sigmas**2))).sum(axis=-1)


def gen_poisson_rhs(seed, gaussian_count: int = 4) -> GaussianField:
    """Random source term: centers U(0,1)^2, widths U(0.025, 0.1),
    amplitudes U(-1, 1)."""
    if gaussian_count < 1:
        raise ValueError("need at least one component")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(gaussian_count, 2))
    sigmas = rng.uniform(*SIGMA_RANGE, size=gaussian_count)
    amplitudes = rng.uniform(-1.0, 1.0, size=gaussian_count)
    return GaussianField(centers, sigmas, amplitudes)


def _interior_laplacian(m: int, h: float) -> sparse.csr_matrix:
    main = 2.0 * np.ones(m)
    off = -np.ones(m - 1)
    t = sparse.diags([off, main, off], [-1, 0, 1], format="csr")
    eye = sparse.identity(m, format="csr")
    return (sparse.kron(eye, t) + sparse.kron(t, eye)).tocsr() / (h * h)


def solve_poisson_fd(f, grid_n: int, rtol: float = 1e-10,
                     max_iter: int | None = None) -> np.ndarray:
    """Solve -lap(u) = f with u = 0 on the boundary of the unit square.

    ``grid_n`` counts grid points per axis including the boundary;
    ``f`` is evaluated analytically at interior points. Conjugate
    gradients run until the relative residual clears 1e-8 (with margin);
    failure to converge raises with diagnostics. Returns the full grid
    with u[i, j] = u(i*h, j*h).
    """
    if grid_n < 17:
        raise ValueError("grid_n must be at least 17")
    m = grid_n - 2
    h = 1.0 / (grid_n - 1)
    xi = np.arange(1, grid_n - 1) * h
    gx, gy = np.meshgrid(xi, xi, indexing="ij")
    b = np.asarray(f(gx, gy), dtype=np.float64).reshape(-1)

    u = np.zeros((grid_n, grid_n))
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return u

    a_mat = _interior_laplacian(m, h)
    if max_iter is None:
        max_iter = 50 * grid_n
    sol, info = cg(a_mat, b, rtol=rtol, atol=0.0, maxiter=max_iter)
    residual = float(np.linalg.norm(a_mat @ sol - b)) / b_norm
    if info != 0 or residual >= 1e-8:
        raise GenerationError(
            f"poisson solve did not converge: grid_n={grid_n}, cg info={info}, "
            f"relative residual={residual:.3e}")
    u[1:-1, 1:-1] = sol.reshape(m, m)
    return u


def bilinear_interpolate(grid: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Evaluate a unit-square grid field at arbitrary positions."""
    grid_n = grid.shape[0]
    if grid.shape != (grid_n, grid_n):
        raise ValueError("grid must be square")
    scaled = np.clip(np.asarray(positions, dtype=np.float64), 0.0, 1.0) * (grid_n - 1)
    i0 = np.minimum(scaled[:, 0].astype(np.int64), grid_n - 2)
    j0 = np.minimum(scaled[:, 1].astype(np.int64), grid_n - 2)
    fx = scaled[:, 0] - i0
    fy = scaled[:, 1] - j0
    return ((1 - fx) * (1 - fy) * grid[i0, j0]
            + fx * (1 - fy) * grid[i0 + 1, j0]
            + (1 - fx) * fy * grid[i0, j0 + 1]
            + fx * fy * grid[i0 + 1, j0 + 1])


@dataclass
class SampleRecord:
    """One (source, solution) pair discretized on an irregular point set."""

    sample_id: str
    positions: np.ndarray      # (N, 2) in [0, 1]^2
    input_values: np.ndarray   # (N, d_a)
    target_values: np.ndarray  # (N, d_u)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.input_values = np.asarray(self.input_values, dtype=np.float64)
        self.target_values = np.asarray(self.target_values, dtype=np.float64)
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must be (N, 2)")
        if self.input_values.shape[0] != n or self.target_values.shape[0] != n:
            raise ValueError("value rows must match positions")
        for arr in (self.positions, self.input_values, self.target_values):
            if not np.all(np.isfinite(arr)):
                raise ValueError("record contains non-finite values")


def sample_irregular_mesh(grid_u: np.ndarray, f, n_points: int, seed,
                          sample_id: str = "sample") -> SampleRecord:
    """Scatter the solution onto uniformly random interior positions.

    Inputs come from the analytic source; targets from bilinear
    interpolation of the oracle grid. Identical seeds reproduce the
    record bitwise.
    """
    if n_points < 16:
        raise ValueError("need at least 16 points per sample")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n_points, 2))
    a_vals = np.asarray(f(positions[:, 0], positions[:, 1]))[:, None]
    u_vals = bilinear_interpolate(grid_u, positions)[:, None]
    return SampleRecord(sample_id, positions, a_vals, u_vals)


# ---------------------------------------------------------------------------
# dataset io
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    manifest: dict
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLIT_IDS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _write_record(path: Path, record: SampleRecord) -> None:
    sid = record.sample_id.encode("utf-8")
    n, d_pos = record.positions.shape
    d_a = record.input_values.shape[1]
    d_u = record.target_values.shape[1]
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<4I", n, d_pos, d_a, d_u))
        for arr in (record.positions, record.input_values, record.target_values):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_record(path: Path) -> SampleRecord:
    with open(path, "rb") as fh:
        if fh.read(len(RECORD_MAGIC)) != RECORD_MAGIC:
            raise FormatError(f"{path}: bad record magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported record version {version}")
        (sid_len,) = struct.unpack("<I", fh.read(4))
        sid = fh.read(sid_len).decode("utf-8")
        n, d_pos, d_a, d_u = struct.unpack("<4I", fh.read(16))

        def read_array(rows, cols):
            raw = fh.read(8 * rows * cols)
            if len(raw) != 8 * rows * cols:
                raise FormatError(f"{path}: truncated record")
            return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()

        positions = read_array(n, d_pos)
        inputs = read_array(n, d_a)
        targets = read_array(n, d_u)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return SampleRecord(sid, positions, inputs, targets)


def write_dataset(path, splits: dict[str, list[SampleRecord]], manifest: dict) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    counts = {name: len(records) for name, records in splits.items()}
    manifest = {**manifest, "format_version": FORMAT_VERSION, "counts": counts}
    for name, records in splits.items():
        split_dir = root / name
        split_dir.mkdir(exist_ok=True)
        for record in records:
            _write_record(split_dir / f"{record.sample_id}.rec", record)
    (root / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest"
    if not manifest_path.exists():
        raise FormatError(f"{root}: no manifest found")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported format version")
    splits: dict[str, list[SampleRecord]] = {}
    for name in ("train", "val", "test"):
        split_dir = root / name
        files = sorted(split_dir.glob("*.rec")) if split_dir.exists() else []
        expected = manifest.get("counts", {}).get(name, 0)
        if len(files) != expected:
            raise FormatError(
                f"{root}: split {name!r} has {len(files)} records, manifest says {expected}")
        splits[name] = [_read_record(p) for p in files]
    return Dataset(manifest=manifest, **splits)


def generate_dataset(out_dir, n_train: int = 1000, n_val: int = 100,
                     n_test: int = 100, n_points: int = 512, grid_n: int = 128,
                     gaussian_count: int = 4, seed: int = 0) -> Dataset:
    """Create, solve and write the full benchmark; returns it in memory.

    Per-sample randomness derives from (seed, split index, sample index,
    stream), recorded in the manifest, so any file can be regenerated in
    isolation.
    """
    splits: dict[str, list[SampleRecord]] = {}
    for name, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        records = []
        for idx in range(count):
            records.append(generate_sample(seed, name, idx, n_points, grid_n,
                                           gaussian_count))
        splits[name] = records
    manifest = {
        "n_points": n_points,
        "grid_n": grid_n,
        "gaussian_count": gaussian_count,
        "base_seed": seed,
        "seed_scheme": "default_rng([base_seed, split_id, index, stream]); "
                       "stream 0 draws the source field, stream 1 the mesh; "
                       "split ids train=0 val=1 test=2",
        "channel_names": ["u"],
        "d_pos": 2,
        "d_a": 1,
        "d_u": 1,
    }
    write_dataset(out_dir, splits, manifest)
    return Dataset(manifest=manifest, train=splits["train"], val=splits["val"],
                   test=splits["test"])


def generate_sample(base_seed: int, split: str, index: int, n_points: int,
                    grid_n: int, gaussian_count: int) -> SampleRecord:
    split_id = SPLIT_IDS[split]
    field = gen_poisson_rhs([base_seed, split_id, index, 0], gaussian_count)
    grid_u = solve_poisson_fd(field, grid_n)
    return sample_irregular_mesh(grid_u, field, n_points,
                                 [base_seed, split_id, index, 1],
                                 sample_id=f"{split}-{index:05d}")
