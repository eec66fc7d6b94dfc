import dataclasses
import json
import struct

import numpy as np
import pytest
from scipy import stats

from fuzzyadapt import datagen, nn
from fuzzyadapt.errors import AssumptionViolatedError, InvalidInputError, ParseError, UnsupportedVersionError
from fuzzyadapt.mathcore import make_rng
from fuzzyadapt.noiselab import symmetric_noise


def no_shift(spec):
    return dataclasses.replace(spec, translation=None, shift_norm=0.0, rotation=0.0, imbalance=1.0)


class TestGeneratePair:
    def test_default_sizes(self):
        source, target = datagen.generate_pair(datagen.DomainSpec())
        assert source.n == target.n == 2000
        assert source.dim == target.dim == 8
        counts = np.bincount(target.labels, minlength=8)
        assert counts[0] == pytest.approx(2 * counts[-1], abs=2)
        assert 0 < source.meta["bayes_disagreement"] <= 1

    def test_zero_shift_indistinguishable(self):
        source, target = datagen.generate_pair(no_shift(datagen.DomainSpec(seed=3)))
        _, p = stats.ttest_ind(source.features, target.features, axis=0)
        # Bonferroni over coordinates
        assert np.all(p > 0.01 / source.dim)

    def test_two_class_shift_is_material(self):
        source, target = datagen.generate_pair(datagen.two_class_spec(0))
        m0 = nn.init_model(nn.Architecture(source.dim, (32,), 16, 2), make_rng(1))
        model, _ = nn.train_supervised(m0, source.features, source.labels, nn.TrainConfig())
        assert nn.accuracy(model, source.features, source.labels) >= 0.95
        assert nn.accuracy(model, target.features, target.labels) <= 0.85

    def test_class_means_converge(self):
        spec = no_shift(datagen.DomainSpec(seed=4, samples_per_class=2000))
        means, _, _ = datagen.resolve_geometry(spec)
        source, _ = datagen.generate_pair(spec)
        tol = 4 * spec.cov_scale / np.sqrt(spec.samples_per_class)
        for c in range(spec.n_classes):
            emp = source.features[source.labels == c].mean(axis=0)
            assert np.all(np.abs(emp - means[c]) <= tol)

    def test_inverse_shift_recovers_source_statistics(self):
        spec = datagen.DomainSpec(seed=5, samples_per_class=1000)
        means, t, R = datagen.resolve_geometry(spec)
        _, target = datagen.generate_pair(spec)
        back = datagen.invert_shift(target.features, means, t, R)
        for c in range(spec.n_classes):
            rows = back[target.labels == c]
            tol = 4 * spec.cov_scale / np.sqrt(len(rows))
            assert np.all(np.abs(rows.mean(axis=0) - means[c]) <= tol)
        X = make_rng(6).normal(size=(20, spec.dim))
        np.testing.assert_allclose(datagen.invert_shift(datagen.apply_shift(X, means, t, R), means, t, R), X, atol=1e-12)

    def test_deterministic_bytes(self, tmp_path):
        for run in ("a", "b"):
            source, target = datagen.generate_pair(datagen.DomainSpec(seed=7))
            datagen.save(source, tmp_path / f"s{run}.fads")
            datagen.save(target, tmp_path / f"t{run}.fads")
        assert (tmp_path / "sa.fads").read_bytes() == (tmp_path / "sb.fads").read_bytes()
        assert (tmp_path / "ta.fads").read_bytes() == (tmp_path / "tb.fads").read_bytes()

    def test_seeds_differ(self):
        a, _ = datagen.generate_pair(datagen.DomainSpec(seed=1))
        b, _ = datagen.generate_pair(datagen.DomainSpec(seed=2))
        assert a != b

    def test_coincident_means(self):
        spec = datagen.DomainSpec(n_classes=2, dim=2, means=((1.0, 1.0), (1.0, 1.0)))
        with pytest.raises(InvalidInputError):
            datagen.generate_pair(spec)

    def test_shift_must_move_the_bayes_rule(self):
        # a translation orthogonal to the class axis with no rotation changes nothing
        spec = dataclasses.replace(datagen.two_class_spec(0), translation=(0.0,) * 7 + (1e-9,), rotation=0.0)
        with pytest.raises(InvalidInputError):
            datagen.generate_pair(spec)

    @pytest.mark.parametrize("kw", [{"n_classes": 1}, {"cov_scale": 0.0}, {"imbalance": -1.0}])
    def test_bad_spec(self, kw):
        with pytest.raises(InvalidInputError):
            datagen.DomainSpec(**kw)

    def test_spec_dict_round_trip(self):
        spec = datagen.two_class_spec(9)
        assert datagen.spec_from_dict(json.loads(json.dumps(datagen.spec_to_dict(spec)))) == spec
        with pytest.raises(InvalidInputError):
            datagen.spec_from_dict({"colour": 1})


@pytest.fixture(scope="module")
def target():
    spec = dataclasses.replace(datagen.two_class_spec(10), samples_per_class=5000)
    return datagen.generate_pair(spec)[1]


class TestNoiseInjection:
    def test_identity(self, target):
        out = datagen.inject_pseudo_label_noise(target, np.eye(2), make_rng(0))
        np.testing.assert_array_equal(out.noisy_labels, target.labels)

    def test_disagreement_rate(self, target):
        out = datagen.inject_pseudo_label_noise(target, symmetric_noise(2, 0.3), make_rng(1))
        assert abs(np.mean(out.noisy_labels != out.labels) - 0.3) <= 0.02
        np.testing.assert_array_equal(out.labels, target.labels)
        assert target.noisy_labels is None

    def test_dominance_checked(self, target):
        eta = np.array([[0.45, 0.55], [0.2, 0.8]])
        with pytest.raises(AssumptionViolatedError):
            datagen.inject_pseudo_label_noise(target, eta, make_rng(2))
        out = datagen.inject_pseudo_label_noise(target, eta, make_rng(2), allow_violation=True)
        assert out.noisy_labels is not None

    def test_needs_ground_truth(self, target):
        with pytest.raises(InvalidInputError):
            datagen.inject_pseudo_label_noise(target.unlabeled(), np.eye(2), make_rng(3))

    def test_unlabeled_copy_drops_noise_channel(self, target, tmp_path):
        noisy = datagen.inject_pseudo_label_noise(target, symmetric_noise(2, 0.3), make_rng(4))
        path = tmp_path / "t.fads"
        datagen.save(noisy.unlabeled(), path)
        back = datagen.load(path)
        assert back.labels is None and back.noisy_labels is None
        assert path.stat().st_size == 8 + struct.unpack_from("<I", path.read_bytes(), 4)[0] + 8 * target.n * target.dim

    def test_noisy_without_labels_rejected(self):
        with pytest.raises(InvalidInputError):
            datagen.Dataset(np.zeros((2, 2)), 2, "target", noisy_labels=[0, 1])


class TestFileFormat:
    @pytest.fixture
    def noisy_target(self):
        _, target = datagen.generate_pair(datagen.DomainSpec(seed=11, samples_per_class=30))
        return datagen.inject_pseudo_label_noise(target, symmetric_noise(8, 0.2), make_rng(5))

    def test_round_trip(self, noisy_target, tmp_path):
        path = tmp_path / "d.fads"
        datagen.save(noisy_target, path)
        back = datagen.load(path)
        assert back == noisy_target
        assert back.features.tobytes() == noisy_target.features.tobytes()

    @pytest.mark.parametrize("cut", [3, 10, 200, -1])
    def test_truncated(self, noisy_target, cut):
        data = datagen.to_bytes(noisy_target)
        with pytest.raises(ParseError) as info:
            datagen.from_bytes(data[:cut])
        assert info.value.offset >= 0

    def test_trailing_bytes(self, noisy_target):
        with pytest.raises(ParseError):
            datagen.from_bytes(datagen.to_bytes(noisy_target) + b"\0")

    def test_bad_magic(self, noisy_target):
        with pytest.raises(ParseError) as info:
            datagen.from_bytes(b"XXXX" + datagen.to_bytes(noisy_target)[4:])
        assert info.value.offset == 0

    def rewrite_header(self, data, **changes):
        (hlen,) = struct.unpack_from("<I", data, 4)
        header = json.loads(data[8 : 8 + hlen])
        header.update(changes)
        hdr = json.dumps(header).encode()
        return data[:4] + struct.pack("<I", len(hdr)) + hdr + data[8 + hlen :]

    def test_version_mismatch(self, noisy_target):
        with pytest.raises(UnsupportedVersionError):
            datagen.from_bytes(self.rewrite_header(datagen.to_bytes(noisy_target), version=2))

    def test_noisy_channel_in_unlabeled_file_rejected(self):
        ds = datagen.Dataset(np.zeros((3, 2)), 2, "target")
        data = self.rewrite_header(datagen.to_bytes(ds), has_noisy_labels=True)
        with pytest.raises(ParseError):
            datagen.from_bytes(data + bytes(24))
