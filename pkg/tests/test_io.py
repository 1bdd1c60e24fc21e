import numpy as np
import pytest
from numpy.testing import assert_array_equal

from plansmooth.grids import AtomicPlan, AxisGrid, MarginalSet, ProductGrid, gaussian, product_plan, quantile_coupling
from plansmooth.io import read_atoms, read_field, write_atoms, write_certificates, write_field
from plansmooth.smoothing import BoundCertificate


class TestFieldRoundTrip:
    @pytest.mark.parametrize("fmt", ["bin", "csv"])
    def test_axis_field(self, tmp_path, fmt):
        f = gaussian(AxisGrid.covering(-4, 4, 33), 0.3, 0.7)
        back = read_field(write_field(f, tmp_path / "rho", fmt))
        assert back.grid == f.grid
        assert_array_equal(back.values, f.values)
        assert back.probability == f.probability

    @pytest.mark.parametrize("fmt", ["bin", "csv"])
    def test_product_field(self, tmp_path, fmt):
        g = AxisGrid.covering(-5, 6, 24)
        mu = product_plan(MarginalSet((gaussian(g, 0, 1), gaussian(g, 1, 1))))
        back = read_field(write_field(mu, tmp_path / "mu", fmt))
        assert isinstance(back.grid, ProductGrid)
        assert back.grid == mu.grid
        assert_array_equal(back.values, mu.values)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            write_field(gaussian(AxisGrid.covering(0, 1, 8)), tmp_path / "x", "npy")

    def test_binary_is_little_endian_float64(self, tmp_path):
        f = gaussian(AxisGrid.covering(-4, 4, 16))
        write_field(f, tmp_path / "rho")
        raw = (tmp_path / "rho.bin").read_bytes()
        assert len(raw) == 16 * 8
        assert_array_equal(np.frombuffer(raw, dtype="<f8"), f.values)


class TestAtomsRoundTrip:
    def test_quantile_atoms(self, tmp_path):
        g = AxisGrid.covering(-8, 9, 64)
        plan = quantile_coupling(MarginalSet((gaussian(g, 0, 1), gaussian(g, 1, 1))), 50)
        write_atoms(plan, tmp_path / "atoms.csv")
        back = read_atoms(tmp_path / "atoms.csv")
        assert_array_equal(back.locations, plan.locations)
        assert_array_equal(back.weights, plan.weights)

    def test_two_dimensional_factors(self, tmp_path):
        locs = np.arange(12, dtype=float).reshape(2, 3, 2) / 7
        plan = AtomicPlan(locs, [0.25, 0.75])
        write_atoms(plan, tmp_path / "a.csv")
        assert (tmp_path / "a.csv").read_text().startswith("# d=2 N=3\n")
        assert_array_equal(read_atoms(tmp_path / "a.csv").locations, locs)

    def test_missing_header(self, tmp_path):
        (tmp_path / "a.csv").write_text("0.1,0.2,1.0\n")
        with pytest.raises(ValueError):
            read_atoms(tmp_path / "a.csv")

    def test_wrong_column_count(self, tmp_path):
        (tmp_path / "a.csv").write_text("# d=1 N=2\n0.1,1.0\n")
        with pytest.raises(ValueError):
            read_atoms(tmp_path / "a.csv")


class TestCertificates:
    def test_block_layout(self, tmp_path):
        import json
        certs = [BoundCertificate("a", 1.0, 2.0, {"x": np.float64(3.0)}), BoundCertificate("b", 3.0, 2.0)]
        write_certificates(certs, tmp_path / "c.json", {"epsilon": 0.1})
        block = json.loads((tmp_path / "c.json").read_text())
        assert block["config"] == {"epsilon": 0.1}
        assert [c["passed"] for c in block["certificates"]] == [True, False]
        assert block["certificates"][0]["margin"] == 1.0
        assert block["certificates"][0]["details"] == {"x": 3.0}
