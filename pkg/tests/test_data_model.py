import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from data_model import (
    Dataset,
    ModelSpec,
    Schema,
    build_design,
    load_csv,
    parse_term,
    save_csv,
)
from errors import (
    MissingColumn,
    MissingValue,
    NonNumericCell,
    SchemaError,
    TermSyntaxError,
    UnknownArmLevel,
    UnknownTerm,
)


@pytest.fixture
def schema():
    return Schema(("L1", "L2"), "A", "M", "Y")


@pytest.fixture
def csv_path(tmp_path):
    frame = pd.DataFrame({
        "L1": [0.5, -1.0, 2.0, 0.0, 1.5],
        "L2": [1, 0, 1, 1, 0],
        "A": [1, 0, 1, 0, 0],
        "M": [0, 1, 1, 0, 1],
        "Y": [1, 0, 0, 1, 1],
    })
    path = tmp_path / "data.csv"
    frame.to_csv(path, index=False)
    return str(path)


@pytest.fixture
def data():
    return Dataset(
        covariates=np.array([[0.5, 1.0], [-1.0, 0.0], [2.0, 1.0], [0.0, 1.0]]),
        exposure=[1, 0, 1, 0],
        mediator=[0, 1, 1, 0],
        outcome=[1, 0, 0, 1],
        arm_treated=1,
        arm_control=(0,),
        covariate_names=("L1", "L2"),
    )


class TestLoadCsv:
    def test_roles_and_arms(self, csv_path, schema):
        d = load_csv(csv_path, schema, treated=1, control=0)
        assert d.n == 5
        assert d.covariate_names == ("L1", "L2")
        assert d.arm_treated == 1.0
        assert d.arm_control == (0.0,)
        npt.assert_array_equal(d.treated_mask, [True, False, True, False, False])
        npt.assert_array_equal(d.column("L1"), [0.5, -1.0, 2.0, 0.0, 1.5])

    def test_missing_column(self, csv_path):
        with pytest.raises(MissingColumn, match="L3"):
            load_csv(csv_path, Schema(("L1", "L3"), "A", "M", "Y"), treated=1)

    def test_non_numeric_cell_names_row(self, tmp_path, schema):
        path = tmp_path / "bad.csv"
        path.write_text("L1,L2,A,M,Y\n0.1,1,1,0,1\n0.2,yes,0,1,0\n")
        with pytest.raises(NonNumericCell) as info:
            load_csv(str(path), schema, treated=1)
        assert info.value.column == "L2"
        assert info.value.row == 2

    def test_missing_value(self, tmp_path, schema):
        path = tmp_path / "gap.csv"
        path.write_text("L1,L2,A,M,Y\n0.1,1,1,0,1\n0.2,1,0,,0\n")
        with pytest.raises(MissingValue) as info:
            load_csv(str(path), schema, treated=1)
        assert info.value.column == "M"

    def test_undeclared_level(self, tmp_path, schema):
        path = tmp_path / "arms.csv"
        path.write_text("L1,L2,A,M,Y\n0.1,1,1,0,1\n0.2,1,0,1,0\n0.3,0,2,1,0\n")
        with pytest.raises(UnknownArmLevel):
            load_csv(str(path), schema, treated=1, control=0)

    def test_categorical_dummies(self, tmp_path):
        path = tmp_path / "cat.csv"
        path.write_text("race,A,M,Y\nb,1,0,1\na,0,1,0\nc,1,1,0\na,0,0,1\n")
        d = load_csv(str(path), Schema(("race",), "A", "M", "Y", categorical=("race",)), treated=1)
        assert d.covariate_names == ("race[T.b]", "race[T.c]")
        npt.assert_array_equal(d.covariates, [[1, 0], [0, 0], [0, 1], [0, 0]])

    def test_save_then_load_is_identical(self, tmp_path, schema):
        rng = np.random.default_rng(3)
        d = Dataset(rng.normal(size=(20, 2)), rng.integers(0, 2, 20), rng.integers(0, 2, 20),
                    rng.random(20), 1, (0,), ("L1", "L2"), (0.0, 1.0))
        path = str(tmp_path / "round.csv")
        save_csv(d, path)
        assert load_csv(path, schema, treated=1, control=0).equals(d)


class TestDataset:
    def test_arms_default_to_all_other_levels(self):
        d = Dataset(np.empty((4, 0)), [0, 1, 2, 1], [0, 1, 1, 0], [0, 1, 1, 0], 1, ())
        assert d.arm_control == (0.0, 2.0)
        assert not d.has_covariates

    def test_treated_cannot_be_control(self):
        with pytest.raises(SchemaError):
            Dataset(np.empty((2, 0)), [0, 1], [0, 1], [0, 1], 1, (1,))

    def test_nan_rejected(self):
        with pytest.raises(MissingValue):
            Dataset(np.empty((2, 0)), [0, 1], [0, np.nan], [0, 1], 1, (0,))

    def test_take_and_with_arms(self, data):
        resample = data.take([0, 0, 3])
        npt.assert_array_equal(resample.outcome, [1, 1, 1])
        flipped = data.with_arms(0, 1)
        npt.assert_array_equal(flipped.treated_mask, ~data.treated_mask)

    def test_mediator_levels(self, data):
        assert data.mediator_levels == (0.0, 1.0)
        continuous = data.with_outcome([0.1, 0.2, 0.3, 0.4])
        assert continuous.outcome_range == (0.1, 0.4)

    def test_reserved_alias(self):
        with pytest.raises(SchemaError):
            Schema(("A",), "treat", "M", "Y")


class TestModelSpec:
    def test_terms_in_order(self):
        spec = ModelSpec.parse("M + L1 + L1:L2")
        assert [t.label for t in spec.terms] == ["M", "L1", "L1:L2"]
        assert spec.intercept

    def test_intercept_removal(self):
        assert not ModelSpec.parse("A + M - 1").intercept
        assert not ModelSpec.parse("0 + A").intercept

    def test_powers_merge(self):
        assert parse_term("L1:L1").label == "L1^2"
        with pytest.raises(TermSyntaxError):
            ModelSpec.parse("L1^2 + L1:L1")

    def test_complement(self):
        assert ModelSpec.parse("L2:(1-L1)").terms[0].label == "(1-L1):L2"

    def test_bad_syntax(self):
        with pytest.raises(TermSyntaxError):
            ModelSpec.parse("L1 + (L2")
        with pytest.raises(TermSyntaxError):
            ModelSpec.parse("L1 - L2")


class TestBuildDesign:
    def test_columns(self, data):
        design = build_design(ModelSpec.parse("M + L1 + L2:(1-L1)"), data)
        assert design.column_names == ("Intercept", "M", "L1", "(1-L1):L2")
        npt.assert_allclose(design.values[:, 3], data.column("L2") * (1 - data.column("L1")))

    def test_override(self, data):
        design = build_design(ModelSpec.parse("A + M + A:M"), data, {"A": 1.0, "M": 0.0})
        npt.assert_array_equal(design.values[:, 1], 1.0)
        npt.assert_array_equal(design.values[:, 2:], 0.0)

    def test_unknown_term(self, data):
        with pytest.raises(UnknownTerm):
            build_design(ModelSpec.parse("L9"), data)

    def test_multilevel_exposure_dummies(self):
        d = Dataset(np.zeros((3, 1)), [0, 1, 2], [0, 1, 1], [0, 1, 0], 1, (), ("L1",))
        design = build_design(ModelSpec.parse("A"), d)
        assert design.column_names == ("Intercept", "A[T.1]", "A[T.2]")
        npt.assert_array_equal(design.values[:, 1:], [[0, 0], [1, 0], [0, 1]])
