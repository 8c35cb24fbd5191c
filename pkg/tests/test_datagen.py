"""Benchmark generation: oracle accuracy, sampling, format round trips."""

import numpy as np
import pytest

from amg.datagen import (
    Dataset,
    FormatError,
    GaussianField,
    SampleRecord,
    bilinear_interpolate,
    gen_poisson_rhs,
    generate_dataset,
    read_dataset,
    sample_irregular_mesh,
    solve_poisson_fd,
    write_dataset,
    _read_record,
    _write_record,
)


class TestSourceField:
    def test_single_gaussian_peak(self):
        field = GaussianField(centers=np.array([[0.5, 0.5]]),
                              sigmas=np.array([0.05]), amplitudes=np.array([1.0]))
        assert field(0.5, 0.5) == pytest.approx(1.0)
        # radial symmetry
        assert field(0.5 + 0.03, 0.5) == pytest.approx(field(0.5, 0.5 - 0.03))

    def test_gaussian_decay(self):
        field = GaussianField(centers=np.array([[0.2, 0.2]]),
                              sigmas=np.array([0.05]), amplitudes=np.array([1.0]))
        far = field(0.2 + 7 * 0.05, 0.2)
        assert abs(far) < 1e-6

    def test_sigma_always_in_documented_range(self):
        lows, highs = [], []
        for seed in range(10_000):
            field = gen_poisson_rhs(seed, gaussian_count=4)
            lows.append(field.sigmas.min())
            highs.append(field.sigmas.max())
        assert min(lows) >= 0.025
        assert max(highs) <= 0.1

    def test_reproducible(self):
        a = gen_poisson_rhs(123, 4)
        b = gen_poisson_rhs(123, 4)
        assert np.array_equal(a.centers, b.centers)
        assert np.array_equal(a.amplitudes, b.amplitudes)


class TestPoissonOracle:
    def test_zero_source_zero_solution(self):
        u = solve_poisson_fd(lambda x, y: np.zeros_like(x), 33)
        assert np.array_equal(u, np.zeros((33, 33)))

    def test_manufactured_solution(self):
        def f(x, y):
            return 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)

        u = solve_poisson_fd(f, 128)
        xi = np.linspace(0, 1, 128)
        gx, gy = np.meshgrid(xi, xi, indexing="ij")
        exact = np.sin(np.pi * gx) * np.sin(np.pi * gy)
        assert np.max(np.abs(u - exact)) < 1e-3

    def test_second_order_convergence(self):
        def f(x, y):
            return 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)

        errors = {}
        for grid_n in (33, 65, 129):
            u = solve_poisson_fd(f, grid_n)
            xi = np.linspace(0, 1, grid_n)
            gx, gy = np.meshgrid(xi, xi, indexing="ij")
            errors[grid_n] = np.max(np.abs(u - np.sin(np.pi * gx) * np.sin(np.pi * gy)))
        assert 3.0 < errors[33] / errors[65] < 5.0
        assert 3.0 < errors[65] / errors[129] < 5.0

    def test_linearity(self):
        field = gen_poisson_rhs(7, 3)
        u1 = solve_poisson_fd(field, 65)
        u2 = solve_poisson_fd(lambda x, y: 2.0 * field(x, y), 65)
        assert np.max(np.abs(u2 - 2.0 * u1)) < 1e-9

    def test_discrete_maximum_principle(self):
        field = GaussianField(centers=np.array([[0.4, 0.6]]),
                              sigmas=np.array([0.08]), amplitudes=np.array([0.7]))
        u = solve_poisson_fd(field, 65)
        assert u.min() >= -1e-9

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            solve_poisson_fd(lambda x, y: x, 16)


class TestSampling:
    def test_grid_knots_reproduced(self):
        rng = np.random.default_rng(0)
        grid = rng.standard_normal((17, 17))
        idx = rng.integers(0, 17, size=(20, 2))
        positions = idx / 16.0
        got = bilinear_interpolate(grid, positions)
        assert np.allclose(got, grid[idx[:, 0], idx[:, 1]], atol=1e-12)

    def test_same_seed_identical(self):
        field = gen_poisson_rhs(3, 2)
        grid = solve_poisson_fd(field, 33)
        a = sample_irregular_mesh(grid, field, 32, seed=5)
        b = sample_irregular_mesh(grid, field, 32, seed=5)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.target_values, b.target_values)

    def test_refinement_oracle(self):
        field = gen_poisson_rhs(11, 4)
        coarse = solve_poisson_fd(field, 65)
        fine = solve_poisson_fd(field, 129)
        rng = np.random.default_rng(1)
        positions = rng.uniform(0, 1, size=(400, 2))
        u_coarse = bilinear_interpolate(coarse, positions)
        u_fine = bilinear_interpolate(fine, positions)
        assert np.mean(np.abs(u_coarse - u_fine)) < 1e-3

    def test_minimum_points(self):
        field = gen_poisson_rhs(0, 1)
        grid = solve_poisson_fd(field, 33)
        with pytest.raises(ValueError):
            sample_irregular_mesh(grid, field, 8, seed=0)


def tiny_record(i=0):
    # explicit values: the byte-level goldens must not depend on libm/rng
    positions = np.array([[0.25, 0.5], [0.75, 0.125]])
    return SampleRecord(f"t-{i:05d}", positions,
                        np.array([[1.5], [-2.0]]), np.array([[0.0625], [0.5]]))


class TestDatasetIO:
    def test_round_trip_bitwise(self, tmp_path):
        field = gen_poisson_rhs(9, 2)
        grid = solve_poisson_fd(field, 33)
        records = [sample_irregular_mesh(grid, field, 32, seed=i, sample_id=f"train-{i:05d}")
                   for i in range(10)]
        manifest = {"n_points": 32, "grid_n": 33, "gaussian_count": 2,
                    "base_seed": 9, "channel_names": ["u"], "d_pos": 2, "d_a": 1, "d_u": 1}
        write_dataset(tmp_path / "ds", {"train": records, "val": [], "test": []}, manifest)
        loaded = read_dataset(tmp_path / "ds")
        assert len(loaded.train) == 10
        for orig, back in zip(records, loaded.train):
            assert orig.sample_id == back.sample_id
            assert np.array_equal(orig.positions, back.positions)
            assert np.array_equal(orig.input_values, back.input_values)
            assert np.array_equal(orig.target_values, back.target_values)

    def test_empty_dataset_round_trip(self, tmp_path):
        write_dataset(tmp_path / "ds", {"train": [], "val": [], "test": []},
                      {"n_points": 0})
        loaded = read_dataset(tmp_path / "ds")
        assert loaded.train == [] and loaded.val == [] and loaded.test == []

    def test_manifest_count_mismatch_rejected(self, tmp_path):
        write_dataset(tmp_path / "ds", {"train": [tiny_record()], "val": [], "test": []},
                      {"n_points": 2})
        extra = tiny_record(1)
        _write_record(tmp_path / "ds" / "train" / "t-00001.rec", extra)
        with pytest.raises(FormatError, match="train"):
            read_dataset(tmp_path / "ds")

    def test_truncated_record_rejected(self, tmp_path):
        path = tmp_path / "r.rec"
        _write_record(path, tiny_record())
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError, match="truncated"):
            _read_record(path)

    def test_record_golden_bytes(self, tmp_path):
        path = tmp_path / "r.rec"
        _write_record(path, tiny_record())
        raw = path.read_bytes()
        expected = (
            b"AMGREC1\x00"
            + (1).to_bytes(4, "little")
            + (7).to_bytes(4, "little") + b"t-00000"
            + (2).to_bytes(4, "little") + (2).to_bytes(4, "little")
            + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
            + np.array([0.25, 0.5, 0.75, 0.125], dtype="<f8").tobytes()
            + np.array([1.5, -2.0], dtype="<f8").tobytes()
            + np.array([0.0625, 0.5], dtype="<f8").tobytes()
        )
        assert raw == expected


class TestGenerateDataset:
    def test_small_end_to_end(self, tmp_path):
        ds = generate_dataset(tmp_path / "ds", n_train=3, n_val=1, n_test=1,
                              n_points=32, grid_n=33, gaussian_count=2, seed=5)
        assert len(ds.train) == 3 and len(ds.val) == 1 and len(ds.test) == 1
        loaded = read_dataset(tmp_path / "ds")
        assert loaded.manifest["counts"] == {"train": 3, "val": 1, "test": 1}
        # boundary-adjacent targets stay small (zero Dirichlet condition)
        for rec in ds.train:
            near_edge = np.any((rec.positions < 0.02) | (rec.positions > 0.98), axis=1)
            if near_edge.any():
                assert np.max(np.abs(rec.target_values[near_edge])) < 0.05

    def test_replay_is_bitwise(self, tmp_path):
        generate_dataset(tmp_path / "a", n_train=2, n_val=1, n_test=0,
                         n_points=32, grid_n=33, gaussian_count=2, seed=42)
        generate_dataset(tmp_path / "b", n_train=2, n_val=1, n_test=0,
                         n_points=32, grid_n=33, gaussian_count=2, seed=42)
        for rel in ["train/train-00000.rec", "train/train-00001.rec", "val/val-00000.rec"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
