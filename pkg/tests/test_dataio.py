import numpy as np
import pytest

from calibfield.dataio import (
    DataError,
    Dataset,
    NeighbourBank,
    SplitSpec,
    load_triples,
    sample_bank,
    save_triples,
    split,
)


def toy_dataset(n=10, d=2, seed=0, with_field=False, with_groups=False):
    rng = np.random.default_rng(seed)
    return Dataset(
        embeddings=rng.normal(size=(n, d)),
        confidences=rng.uniform(0.05, 0.95, size=n),
        outcomes=(rng.random(n) < 0.5).astype(float),
        true_field=rng.uniform(-0.3, 0.3, size=n) if with_field else None,
        group_labels=rng.integers(0, 3, size=n) if with_groups else None,
        group_names={0: "a", 1: "b", 2: "c"} if with_groups else None,
    )


class TestDataset:
    def test_residuals(self):
        ds = Dataset(
            embeddings=np.zeros((2, 1)),
            confidences=np.array([0.5, 0.25]),
            outcomes=np.array([1.0, 0.0]),
        )
        assert np.array_equal(ds.residuals, [0.5, -0.25])

    def test_rejects_bad_confidence(self):
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            Dataset(
                embeddings=np.zeros((1, 1)),
                confidences=np.array([1.2]),
                outcomes=np.array([1.0]),
            )

    def test_rejects_non_binary_outcome(self):
        with pytest.raises(DataError):
            Dataset(
                embeddings=np.zeros((1, 1)),
                confidences=np.array([0.5]),
                outcomes=np.array([0.7]),
            )

    def test_rejects_nan_embedding(self):
        with pytest.raises(DataError):
            Dataset(
                embeddings=np.array([[np.nan, 0.0]]),
                confidences=np.array([0.5]),
                outcomes=np.array([1.0]),
            )

    def test_rejects_row_mismatch(self):
        with pytest.raises(DataError, match="mismatch"):
            Dataset(
                embeddings=np.zeros((3, 2)),
                confidences=np.array([0.5, 0.5]),
                outcomes=np.array([1.0, 0.0, 1.0]),
            )

    def test_subset_keeps_alignment(self):
        ds = toy_dataset(n=12, with_field=True, with_groups=True)
        sub = ds.subset(np.array([3, 7, 1]))
        assert sub.n == 3
        assert np.array_equal(sub.embeddings, ds.embeddings[[3, 7, 1]])
        assert np.array_equal(sub.true_field, ds.true_field[[3, 7, 1]])
        assert np.array_equal(sub.group_labels, ds.group_labels[[3, 7, 1]])


class TestSplit:
    def test_sizes_small(self):
        ds = toy_dataset(n=10)
        tr, va, te = split(ds, SplitSpec(0.8, 0.1, 0.1, seed=0))
        assert (tr.n, va.n, te.n) == (8, 1, 1)

    def test_sizes_default(self):
        ds = toy_dataset(n=10000)
        tr, va, te = split(ds, SplitSpec(seed=0))
        assert (tr.n, va.n, te.n) == (8000, 1000, 1000)

    def test_remainder_goes_to_train(self):
        ds = toy_dataset(n=107)
        tr, va, te = split(ds, SplitSpec(0.8, 0.1, 0.1, seed=1))
        assert va.n == 10 and te.n == 10 and tr.n == 87

    def test_partition_is_exact(self):
        ds = toy_dataset(n=50, d=1)
        tr, va, te = split(ds, SplitSpec(0.8, 0.1, 0.1, seed=5))
        merged = np.concatenate([tr.embeddings, va.embeddings, te.embeddings])
        assert np.array_equal(np.sort(merged, axis=0), np.sort(ds.embeddings, axis=0))

    def test_deterministic(self):
        ds = toy_dataset(n=40)
        a = split(ds, SplitSpec(seed=9))
        b = split(ds, SplitSpec(seed=9))
        for x, y in zip(a, b):
            assert np.array_equal(x.embeddings, y.embeddings)

    def test_fractions_validated(self):
        with pytest.raises(ValueError):
            SplitSpec(0.5, 0.2, 0.2)
        with pytest.raises(ValueError):
            SplitSpec(1.0, -0.1, 0.1)

    def test_too_small(self):
        with pytest.raises(ValueError):
            split(toy_dataset(n=9), SplitSpec())


class TestBank:
    def test_below_cap_keeps_everything_in_order(self):
        ds = toy_dataset(n=30)
        bank = sample_bank(ds, cap=100, seed=0)
        assert bank.size == 30
        assert np.array_equal(bank.source_indices, np.arange(30))
        assert np.array_equal(bank.embeddings, ds.embeddings)
        assert np.array_equal(bank.residuals, ds.residuals)

    def test_above_cap_subsamples_without_replacement(self):
        ds = toy_dataset(n=500)
        bank = sample_bank(ds, cap=100, seed=3)
        assert bank.size == 100
        assert len(np.unique(bank.source_indices)) == 100
        assert np.array_equal(bank.source_indices, np.sort(bank.source_indices))
        assert np.array_equal(bank.embeddings, ds.embeddings[bank.source_indices])

    def test_residuals_match_source_rows(self):
        ds = toy_dataset(n=200)
        bank = sample_bank(ds, cap=50, seed=1)
        assert np.array_equal(bank.residuals, ds.residuals[bank.source_indices])

    def test_two_seeds_overlap_is_hypergeometric(self):
        # Two independent 20k draws from 70k rows share about 20k^2/70k = 5714
        # indices; 5 sigma of the hypergeometric is about 270.
        ds = toy_dataset(n=70000, d=1)
        a = sample_bank(ds, cap=20000, seed=0)
        b = sample_bank(ds, cap=20000, seed=1)
        overlap = len(np.intersect1d(a.source_indices, b.source_indices))
        assert abs(overlap - 5714) < 270

    def test_cap_invariant(self):
        with pytest.raises(ValueError):
            NeighbourBank(
                embeddings=np.zeros((3, 1)),
                residuals=np.zeros(3),
                source_indices=np.arange(3),
                cap=2,
            )


class TestRoundTrip:
    @pytest.mark.parametrize("fmt", ["csv", "jsonl", "bin"])
    @pytest.mark.parametrize("extras", [(False, False), (True, False), (True, True)])
    def test_round_trip(self, tmp_path, fmt, extras):
        with_field, with_groups = extras
        ds = toy_dataset(n=23, d=3, with_field=with_field, with_groups=with_groups)
        path = tmp_path / f"data.{fmt}"
        save_triples(ds, path, fmt)
        back = load_triples(path, fmt)
        assert back.n == ds.n and back.d == ds.d
        if fmt == "bin":
            assert np.array_equal(back.embeddings, ds.embeddings)
            assert np.array_equal(back.confidences, ds.confidences)
        else:
            np.testing.assert_allclose(back.embeddings, ds.embeddings, rtol=0, atol=0)
            np.testing.assert_allclose(back.confidences, ds.confidences, rtol=0, atol=0)
        assert np.array_equal(back.outcomes, ds.outcomes)
        if with_field:
            assert np.array_equal(back.true_field, ds.true_field)
        else:
            assert back.true_field is None
        if with_groups:
            assert np.array_equal(back.group_labels, ds.group_labels)
            assert back.group_names == ds.group_names
        else:
            assert back.group_labels is None

    def test_bin_bytes_stable(self, tmp_path):
        ds = toy_dataset(n=17, d=4, with_field=True)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_triples(ds, p1, "bin")
        save_triples(load_triples(p1, "bin"), p2, "bin")
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_triples(tmp_path / "nope.csv", "csv")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError, match="format"):
            load_triples(tmp_path / "x.csv", "parquet")


class TestCsvValidation:
    def test_error_names_one_based_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        lines = ["f,y,x0,x1"]
        for i in range(10):
            f = "1.2" if i == 6 else "0.5"   # row 7 carries the bad confidence
            lines.append(f"{f},1.0,0.0,0.0")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="data row 7"):
            load_triples(path, "csv")

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("f,y,x0,x1\n0.5,1.0,0.0,0.0\n0.5,1.0,0.0\n")
        with pytest.raises(DataError, match="data row 2"):
            load_triples(path, "csv")

    def test_unparseable_number(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("f,y,x0\n0.5,1.0,0.0\nabc,0.0,1.0\n")
        with pytest.raises(DataError, match="data row 2"):
            load_triples(path, "csv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("conf,label,x0\n0.5,1,0.0\n")
        with pytest.raises(DataError, match="header"):
            load_triples(path, "csv")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_triples(path, "csv")


class TestJsonlValidation:
    def test_bad_json_names_row(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"f": 0.5, "y": 1.0, "x": [0.0]}\n{oops\n')
        with pytest.raises(DataError, match="data row 2"):
            load_triples(path, "jsonl")

    def test_dim_mismatch_names_row(self, tmp_path):
        path = tmp_path / "dim.jsonl"
        path.write_text(
            '{"f": 0.5, "y": 1.0, "x": [0.0, 1.0]}\n'
            '{"f": 0.5, "y": 0.0, "x": [0.0]}\n'
        )
        with pytest.raises(DataError, match="data row 2"):
            load_triples(path, "jsonl")


class TestBinValidation:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTCF" + b"\x00" * 40)
        with pytest.raises(DataError, match="columnar"):
            load_triples(path, "bin")

    def test_truncated(self, tmp_path):
        ds = toy_dataset(n=5)
        path = tmp_path / "t.bin"
        save_triples(ds, path, "bin")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_triples(path, "bin")
