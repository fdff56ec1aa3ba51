import numpy as np
import pytest

from src.config import DISTURBANCE_KINDS
from src.data.augment import (DisturbanceSpec, apply_disturbance, augment_dataset, disc_kernel,
                              disturb_frame, disturbed_copies, draw_spec, hides_everything, homography)
from src.data.collector import generate_dataset
from src.data.envs import PendulumState
from src.data.render import RenderSpec, render_pendulum
from src.errors import ValidationError


@pytest.fixture
def frame():
    image, _ = render_pendulum(PendulumState(0.6, 0.0), RenderSpec(64))
    return image


@pytest.fixture(scope='module')
def small_dataset():
    return generate_dataset('pendulum', 2, seed=3, horizon=6)


class TestKinds:
    def test_zero_sigma_noise_is_identity(self, frame):
        out = apply_disturbance(frame, DisturbanceSpec('noise', {'sigma': 0.0}, 1))
        assert np.array_equal(out, frame)

    def test_noise_spread(self):
        grey = np.full((64, 64, 1), 0.5)
        out = apply_disturbance(grey, DisturbanceSpec('noise', {'sigma': 0.1}, 2))
        assert abs(np.std(out) - 0.1) < 0.01

    def test_blur_keeps_constant_image(self):
        grey = np.full((32, 32, 1), 0.3)
        out = apply_disturbance(grey, DisturbanceSpec('blur', {'radius': 2.5}, 0))
        assert np.allclose(out, 0.3)

    def test_disc_kernel_normalized(self):
        k = disc_kernel(2.0)
        assert k.shape == (5, 5) and np.isclose(k.sum(), 1.0)

    def test_zero_jitter_shift_is_identity(self, frame):
        out = apply_disturbance(frame, DisturbanceSpec('shift', {'corners': [[0.0, 0.0]] * 4}, 0))
        assert np.allclose(out, frame, atol=1e-12)

    def test_homography_maps_corners(self):
        src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        dst = src + np.array([[0.1, 0.0], [0.0, 0.05], [-0.1, 0.0], [0.0, -0.05]])
        h = homography(src, dst)
        for s, d in zip(src, dst):
            p = h @ np.append(s, 1.0)
            assert np.allclose(p[:2] / p[2], d)

    def test_blockage_fills_rectangle(self):
        white = np.ones((64, 64, 1))
        params = {'rects': [{'top': 0.25, 'left': 0.5, 'height': 0.25, 'width': 0.25}], 'fill': 0.5}
        out = apply_disturbance(white, DisturbanceSpec('blockages', params, 0))
        assert np.all(out[16:32, 32:48] == 0.5)
        assert np.sum(out != 1.0) == 16 * 16

    def test_fog_lightens(self, frame):
        out = apply_disturbance(frame, draw_spec('fog', 5))
        assert np.all(out >= frame - 1e-12)
        assert out.mean() > frame.mean()

    def test_spatter_only_darkens(self, frame):
        out = apply_disturbance(frame, draw_spec('spatter', 5))
        assert np.all(out <= frame)

    @pytest.mark.parametrize('kind', DISTURBANCE_KINDS)
    def test_every_kind_is_deterministic_and_clamped(self, frame, kind):
        a, spec_a = disturb_frame(frame, kind, 9, 4)
        b, spec_b = disturb_frame(frame, kind, 9, 4)
        assert spec_a == spec_b
        assert np.array_equal(a, b)
        assert a.shape == frame.shape and a.min() >= 0.0 and a.max() <= 1.0

    def test_rejects_colour_image(self):
        with pytest.raises(ValidationError):
            apply_disturbance(np.ones((8, 8, 3)), DisturbanceSpec('blur', {'radius': 1.0}))

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            DisturbanceSpec('rain')


def test_hides_everything():
    image = np.ones((4, 4, 1))
    image[1, 1] = 0.0
    assert hides_everything(image, np.ones_like(image))
    assert not hides_everything(image, image)
    assert not hides_everything(np.ones_like(image), np.ones_like(image))


def test_copies_depend_on_frame_index(frame):
    images = np.stack([frame, frame])
    out = disturbed_copies(images, 'noise', 1, indices=[0, 1])
    assert not np.array_equal(out[0], out[1])
    again = disturbed_copies(images[1:], 'noise', 1, indices=[1])
    assert np.array_equal(again[0], out[1])


class TestAugmentDataset:
    def test_counts_labels_and_splits(self, small_dataset):
        n = len(small_dataset)
        out = augment_dataset(small_dataset, ['fog', 'blur'], seed=4)
        assert len(out) == 3 * n
        assert out.kinds.count('fog') == n and out.kinds.count('blur') == n
        assert np.array_equal(out.labels[n:2 * n], small_dataset.labels)
        assert np.array_equal(out.source_index[2 * n:], np.arange(n))
        for name in ('train', 'val', 'test'):
            base = set(small_dataset.split[name].tolist())
            for i in out.split[name]:
                assert out.source_index[i] in base
        assert out.meta['augment_kinds'] == ['fog', 'blur']
        assert out.meta['augment_seed'] == 4

    def test_repeat_kind_is_skipped(self, small_dataset):
        once = augment_dataset(small_dataset, ['noise'], seed=4)
        twice = augment_dataset(once, ['noise'], seed=4)
        assert len(twice) == len(once)

    def test_unknown_kind(self, small_dataset):
        with pytest.raises(ValidationError):
            augment_dataset(small_dataset, ['rain'], seed=4)
