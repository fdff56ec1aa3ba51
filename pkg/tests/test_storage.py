import os

import numpy as np
import pandas as pd
import pytest

from src.algorithm.cnn import TapPoint, predict
from src.algorithm.safe_occ import DetectorConfig, fit_detector, novelty_scores
from src.core.numeric import make_rng
from src.data.collector import DatasetCollector, generate_dataset
from src.data.storage import (ModelFile, canonical_json, crc64_xz, decode_model_file, directory_sha256,
                              encode_model_file, load_detector, load_manifest, load_model_file,
                              load_sensor, read_csv, read_json, save_detector, save_model_file,
                              save_sensor, update_manifest, validate_manifest, write_csv)
from src.errors import MissingArtifactError, ValidationError


def test_crc64_check_value():
    assert crc64_xz(b'123456789') == 0x995DC9BBDF1939FA
    assert crc64_xz(b'6789', crc64_xz(b'12345')) == crc64_xz(b'123456789')


def test_canonical_json_is_order_free():
    assert canonical_json({'b': 1, 'a': [np.float64(0.5), np.int64(2)]}) == '{"a":[0.5,2],"b":1}'


class TestModelFile:
    def _model_file(self):
        return ModelFile('sensor', {'note': 'x'}, {'w': np.arange(6.0).reshape(2, 3), 'b': np.array([-1.5])})

    def test_encode_decode_is_byte_stable(self):
        data = encode_model_file(self._model_file())
        decoded = decode_model_file(data)
        assert decoded.kind == 'sensor' and decoded.metadata == {'note': 'x'}
        assert np.array_equal(decoded.payloads['w'], np.arange(6.0).reshape(2, 3))
        assert encode_model_file(decoded) == data

    def test_layout(self):
        data = encode_model_file(self._model_file())
        assert data[:4] == b'SFOC'
        assert int.from_bytes(data[4:8], 'little') == 1

    def test_corruption_detected(self):
        data = bytearray(encode_model_file(self._model_file()))
        data[-12] ^= 0x01
        with pytest.raises(ValidationError):
            decode_model_file(bytes(data))

    def test_truncated(self):
        with pytest.raises(ValidationError):
            decode_model_file(b'SFOC')

    def test_kind_checked_on_load(self, tmp_path):
        path = str(tmp_path / 'm.sfoc')
        save_model_file(path, self._model_file())
        with pytest.raises(ValidationError):
            load_model_file(path, kind='detector')
        with pytest.raises(MissingArtifactError):
            load_model_file(str(tmp_path / 'absent.sfoc'))

    def test_non_finite_payload_rejected(self):
        with pytest.raises(ValidationError):
            encode_model_file(ModelFile('sensor', {}, {'w': np.array([np.nan])}))


class TestSensorAndDetectorFiles:
    def test_sensor_round_trip(self, tmp_path, tiny_model, tiny_images):
        path = str(tmp_path / 'A.sfoc')
        save_sensor(path, tiny_model, {'seed': 7})
        model, meta = load_sensor(path)
        assert meta['provenance'] == {'seed': 7}
        assert np.array_equal(predict(model, tiny_images), predict(tiny_model, tiny_images))
        first = open(path, 'rb').read()
        save_sensor(path, model, {'seed': 7})
        assert open(path, 'rb').read() == first

    @pytest.mark.parametrize('scalarizer, pca', [('max', 'off'), ('twod_pca', 2)])
    def test_detector_round_trip(self, tmp_path, tiny_model, tiny_images, scalarizer, pca):
        config = DetectorConfig('d', TapPoint(-1, 'pooled'), scalarizer, 'standard', pca, nu=0.2)
        detector = fit_detector(tiny_model, tiny_images, config)
        path = str(tmp_path / 'd.sfoc')
        save_detector(path, detector, {'sensor_hash': 'abc'})
        loaded, meta = load_detector(path)
        assert loaded.config == config and meta['provenance']['sensor_hash'] == 'abc'
        frames = make_rng(2).uniform(size=(4, 8, 8, 1))
        for a, b in zip(novelty_scores(detector, tiny_model, frames), novelty_scores(loaded, tiny_model, frames)):
            assert np.array_equal(a, b)


class TestTablesAndManifest:
    def test_csv_column_order(self, tmp_path):
        path = str(tmp_path / 't.csv')
        write_csv(pd.DataFrame({'b': [1], 'a': [2]}), path, columns=['a', 'b'])
        assert open(path).read() == 'a,b\n2,1\n'
        assert list(read_csv(path).columns) == ['a', 'b']
        with pytest.raises(ValidationError):
            write_csv(pd.DataFrame({'a': [1]}), path, columns=['a', 'c'])

    def test_read_json_errors(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_json(str(tmp_path / 'none.json'))
        bad = tmp_path / 'bad.json'
        bad.write_text('{oops')
        with pytest.raises(ValidationError):
            read_json(str(bad))

    def test_manifest_update_and_validate(self, tmp_path):
        path = str(tmp_path / 'experiment.json')
        assert load_manifest(path, seed=5)['seed'] == 5
        (tmp_path / 'table.csv').write_text('a\n1\n')
        manifest = update_manifest(path, 'tables', 'acc', {'path': 'table.csv'}, seed=5)
        assert load_manifest(path) == manifest
        assert validate_manifest(manifest, str(tmp_path)) == [os.path.join(str(tmp_path), 'table.csv')]
        update_manifest(path, 'sensors', 'A', {'path': 'gone.sfoc'})
        with pytest.raises(MissingArtifactError):
            validate_manifest(load_manifest(path), str(tmp_path))

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / 'experiment.json'
        path.write_text('{"schema_version": 99}')
        with pytest.raises(ValidationError):
            load_manifest(str(path))


class TestDatasetDirectory:
    def test_save_load_validate(self, tmp_path):
        dataset = generate_dataset('pendulum', 2, seed=1, horizon=5)
        collector = DatasetCollector(str(tmp_path / 'pend'))
        digest = collector.save(dataset)
        assert digest == directory_sha256(str(tmp_path / 'pend'))
        loaded = collector.load()
        assert np.array_equal(loaded.images, dataset.images)
        assert np.array_equal(loaded.labels, dataset.labels)
        assert {k: v.tolist() for k, v in loaded.split.items()} == {k: v.tolist() for k, v in dataset.split.items()}
        summary = collector.validate()
        assert summary['n_frames'] == 10 and summary['env'] == 'pendulum'

    def test_generation_is_deterministic(self):
        a = generate_dataset('cartpole', 1, seed=4, horizon=5)
        b = generate_dataset('cartpole', 1, seed=4, horizon=5)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
        assert a.images.shape[1:] == (128, 128, 1)

    def test_truncated_images_detected(self, tmp_path):
        collector = DatasetCollector(str(tmp_path / 'pend'))
        collector.save(generate_dataset('pendulum', 1, seed=1, horizon=4))
        with open(tmp_path / 'pend' / 'images.bin', 'r+b') as f:
            f.truncate(100)
        with pytest.raises(ValidationError):
            collector.load()

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            DatasetCollector(str(tmp_path / 'absent')).load()
