"""Persistence: model files, CSV tables, hashes and the experiment manifest.

Model file layout (all integers little-endian):

    b'SFOC' | u32 format version | u64 metadata length | metadata JSON (UTF-8)
    | payload arrays as float64, in the order listed by metadata['payloads']
    | u64 CRC-64/XZ of everything before it

Every file is written to a temporary sibling and renamed into place.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import pandas as pd

from src.algorithm.cnn import model_from_payloads, model_payloads
from src.algorithm.occ import OcSvmModel
from src.algorithm.reduction import PcaModel, RefinerModel, TwoDPcaEntry, TwoDPcaModel
from src.algorithm.safe_occ import DetectorConfig, SafeOccDetector
from src.config import SCHEMA_VERSION
from src.errors import MissingArtifactError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b'SFOC'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIQ')
_TRAILER = struct.Struct('<Q')

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected
_CRC64_MASK = 0xFFFFFFFFFFFFFFFF


def _crc64_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64_xz(data, crc=0):
    """CRC-64/XZ; pass the previous result as `crc` to continue a stream"""
    crc ^= _CRC64_MASK
    table = _CRC64_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _CRC64_MASK


def canonical_json(obj):
    """Sorted, compact JSON; identical content gives identical bytes"""
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(',', ':'), allow_nan=False)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path, obj, indent=2):
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=indent, allow_nan=False)
    atomic_write_bytes(path, (text + '\n').encode('utf-8'))


def read_json(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path} is not valid JSON: {e}") from e


def write_csv(frame, path, columns=None):
    """Write a DataFrame with a fixed column order"""
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise ValidationError(f"table for {path} lacks columns {missing}")
        frame = frame[columns]
    atomic_write_bytes(path, frame.to_csv(index=False, lineterminator='\n').encode('utf-8'))
    logger.info(f"Wrote {len(frame)} rows to {path}")


def read_csv(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"file not found: {path}")
    return pd.read_csv(path)


def file_sha256(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"file not found: {path}")
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def directory_sha256(path):
    """Hash over (relative name, content) of every file, in sorted order"""
    if not os.path.isdir(path):
        raise MissingArtifactError(f"directory not found: {path}")
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            digest.update(os.path.relpath(full, path).replace(os.sep, '/').encode('utf-8'))
            digest.update(bytes.fromhex(file_sha256(full)))
    return digest.hexdigest()


@dataclass
class ModelFile:
    kind: str
    metadata: dict
    payloads: Dict[str, np.ndarray] = field(default_factory=dict)


def encode_model_file(mf):
    meta = dict(mf.metadata)
    meta['kind'] = mf.kind
    meta['payloads'] = [{'name': name, 'shape': list(np.shape(arr))} for name, arr in mf.payloads.items()]
    meta_bytes = canonical_json(meta).encode('utf-8')
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    for arr in mf.payloads.values():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("model payloads must be finite")
        parts.append(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    body = b''.join(parts)
    return body + _TRAILER.pack(crc64_xz(body))


def decode_model_file(data, source='<bytes>'):
    if len(data) < _HEADER.size + _TRAILER.size:
        raise ValidationError(f"{source}: truncated model file")
    body, (crc,) = data[:-_TRAILER.size], _TRAILER.unpack(data[-_TRAILER.size:])
    if crc64_xz(body) != crc:
        raise ValidationError(f"{source}: checksum mismatch")
    magic, version, meta_len = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise ValidationError(f"{source}: not a model file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{source}: unsupported format version {version}")
    offset = _HEADER.size
    meta = json.loads(body[offset:offset + meta_len].decode('utf-8'))
    offset += meta_len

    payloads = {}
    for entry in meta.pop('payloads'):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(body):
            raise ValidationError(f"{source}: payload '{entry['name']}' runs past the end of the file")
        payloads[entry['name']] = np.frombuffer(body[offset:end], dtype='<f8').astype(np.float64).reshape(shape)
        offset = end
    if offset != len(body):
        raise ValidationError(f"{source}: {len(body) - offset} trailing bytes after payloads")
    kind = meta.pop('kind')
    return ModelFile(kind, meta, payloads)


def save_model_file(path, mf):
    data = encode_model_file(mf)
    atomic_write_bytes(path, data)
    logger.info(f"Saved {mf.kind} model file {path} ({len(data)} bytes)")
    return path


def load_model_file(path, kind=None):
    if not os.path.exists(path):
        raise MissingArtifactError(f"model file not found: {path}")
    with open(path, 'rb') as f:
        mf = decode_model_file(f.read(), source=path)
    if kind is not None and mf.kind != kind:
        raise ValidationError(f"{path} holds a {mf.kind} model, expected {kind}")
    return mf


def empty_manifest(seed=0):
    return {
        'schema_version': SCHEMA_VERSION,
        'seed': seed,
        'env': {},
        'datasets': {},
        'sensors': {},
        'detectors': {},
        'roster': {},
        'controller': {},
        'scenarios': {},
        'tables': {},
    }


def load_manifest(path, seed=0):
    """The experiment manifest, or a fresh one when the file does not exist yet"""
    if not os.path.exists(path):
        return empty_manifest(seed)
    manifest = read_json(path)
    if manifest.get('schema_version') != SCHEMA_VERSION:
        raise ValidationError(f"{path}: schema version {manifest.get('schema_version')} "
                              f"is not {SCHEMA_VERSION}")
    return manifest


def update_manifest(path, section, key, entry, seed=0):
    """Record `entry` under manifest[section][key] and write the manifest back"""
    manifest = load_manifest(path, seed)
    if section not in manifest or not isinstance(manifest[section], dict):
        manifest[section] = {}
    manifest[section][key] = entry
    write_json(path, manifest)
    return manifest


def validate_manifest(manifest, base_dir='.'):
    """Raise when a referenced artifact is missing. Returns the list of checked paths."""
    if manifest.get('schema_version') != SCHEMA_VERSION:
        raise ValidationError(f"manifest schema version {manifest.get('schema_version')} is not {SCHEMA_VERSION}")
    checked = []
    for section in ('datasets', 'sensors', 'detectors', 'tables'):
        for key, entry in manifest.get(section, {}).items():
            path = entry.get('path') if isinstance(entry, dict) else None
            if path is None:
                raise ValidationError(f"manifest entry {section}/{key} has no path")
            full = path if os.path.isabs(path) else os.path.join(base_dir, path)
            if not os.path.exists(full):
                raise MissingArtifactError(f"manifest entry {section}/{key} points at missing {full}")
            checked.append(full)
    return checked


def sensor_model_file(model, provenance):
    """ModelFile for a CNN sensor; `provenance` holds dataset hash, seed, hyperparameters"""
    meta = {'architecture': model.architecture(), 'provenance': provenance}
    return ModelFile('sensor', meta, model_payloads(model))


def save_sensor(path, model, provenance):
    return save_model_file(path, sensor_model_file(model, provenance))


def load_sensor(path):
    """(CnnModel, metadata) from a sensor model file"""
    mf = load_model_file(path, kind='sensor')
    return model_from_payloads(mf.metadata['architecture'], mf.payloads), mf.metadata


def detector_model_file(detector, provenance):
    payloads = {
        'refiner.v_min': detector.refiner.v_min,
        'refiner.v_max': detector.refiner.v_max,
        'refiner.v_mu': detector.refiner.v_mu,
        'refiner.v_sigma': detector.refiner.v_sigma,
        'occ.support_vectors': detector.occ.support_vectors,
        'occ.alphas': detector.occ.alphas,
    }
    entries = detector.twod.entries if detector.twod is not None else []
    for j, entry in enumerate(entries):
        payloads[f'twod.{j}.w'] = entry.w
        payloads[f'twod.{j}.q'] = entry.q
        payloads[f'twod.{j}.mean_map'] = entry.mean_map
    if detector.pca is not None:
        payloads['pca.mean'] = detector.pca.mean
        payloads['pca.projection'] = detector.pca.projection
        payloads['pca.eigenvalues'] = detector.pca.eigenvalues
    occ = detector.occ
    meta = {
        'config': detector.config.to_dict(),
        'refiner_kind': detector.refiner.kind,
        'occ': {'rho': occ.rho, 'gamma': occ.gamma, 'nu': occ.nu, 'n_train': occ.n_train, 'tol': occ.tol},
        'twod_filters': len(entries),
        'has_pca': detector.pca is not None,
        'provenance': provenance,
    }
    return ModelFile('detector', meta, payloads)


def save_detector(path, detector, provenance):
    return save_model_file(path, detector_model_file(detector, provenance))


def load_detector(path):
    """(SafeOccDetector, metadata) from a detector model file"""
    mf = load_model_file(path, kind='detector')
    meta, p = mf.metadata, mf.payloads
    refiner = RefinerModel(meta['refiner_kind'], p['refiner.v_min'], p['refiner.v_max'],
                           p['refiner.v_mu'], p['refiner.v_sigma'])
    occ_meta = meta['occ']
    occ = OcSvmModel(p['occ.support_vectors'], p['occ.alphas'], occ_meta['rho'], occ_meta['gamma'],
                     occ_meta['nu'], occ_meta['n_train'], occ_meta['tol'])
    twod = None
    if meta['twod_filters']:
        twod = TwoDPcaModel([
            TwoDPcaEntry(p[f'twod.{j}.w'], p[f'twod.{j}.q'], p[f'twod.{j}.mean_map'])
            for j in range(meta['twod_filters'])
        ])
    pca = PcaModel(p['pca.mean'], p['pca.projection'], p['pca.eigenvalues']) if meta['has_pca'] else None
    detector = SafeOccDetector(DetectorConfig.from_dict(meta['config']), refiner, occ, twod, pca)
    return detector, meta
