"""
Scenes, patches and splits.

A scene is a co-registered HSI cube [M x N x B], an auxiliary raster
[M x N x C] (LiDAR, SAR, DSM or multispectral), a label raster [M x N] where 0
is background and 1..classes are land-cover classes, and optionally a pair of
disjoint train/test masks.

Typical use::

    scene = normalize_scene(load_scene('houston/'))
    train, test = split_random(scene, 0.05, Rng(seed, STREAM_SPLIT))
    batch = extract_patches(scene, train, 11)

Coordinates are integer arrays of shape [K x 2] holding (row, column) pairs in
row-major order.

Scene container
---------------

A directory with 'header.json'::

    {"magic": "MFTSCN1", "M": ..., "N": ..., "B": ..., "C": ..., "classes": ...,
     "modality": "lidar|sar|dsm|msi", "has_masks": true|false}

and raw little-endian payloads: 'hsi.f32' (row-major, band fastest),
'aux.f32' (same layout), 'labels.u16' (row-major), and when has_masks is set,
'train_mask.u8' and 'test_mask.u8'.
"""

__author__ = 'MFT fusion developers'


# stdlib imports
import json
import logging
import math
import os

# numpy imports
import numpy as np

# mft imports
from mfttensor import Error, ConfigError


__all__ = ('SceneBundle', 'PatchBatch', 'DataError', 'IngestionError',
           'BoundsError', 'SplitError', 'IntegrityError', 'FormatError',
           'GeneratorError', 'normalize_scene', 'extract_patches',
           'split_random', 'split_from_masks', 'parse_split', 'make_split',
           'synth_scene', 'load_scene', 'save_scene', 'class_histogram',
           'labeled_coords', 'all_coords', 'STREAM_SPLIT', 'STREAM_SCENE',
           'SCENE_MAGIC')


log = logging.getLogger(__name__)


SCENE_MAGIC = 'MFTSCN1'

STREAM_SPLIT = 3
"Rng key of the random split substream."

STREAM_SCENE = 4
"Rng key of the synthetic scene substream."

_MODALITIES = ('lidar', 'sar', 'dsm', 'msi')


class DataError(Error):
    """
    Base class for scene and split errors.
    """

class IngestionError(DataError):
    """
    Non-finite values in scene data.
    """

class BoundsError(DataError):
    """
    A coordinate outside the raster.
    """

class SplitError(DataError):
    """
    A split cannot be made.
    """

class IntegrityError(DataError):
    """
    A scene violates one of its invariants.
    """

class FormatError(DataError):
    """
    A malformed scene container.
    """

class GeneratorError(DataError):
    """
    The synthetic scene generator gave up.
    """



class SceneBundle(object):
    """
    Co-registered HSI, auxiliary and label rasters, with optional masks.
    """

    def __init__(self, hsi, aux, labels, train_mask=None, test_mask=None,
                 modality='lidar', classes=None):
        self.hsi = np.asarray(hsi, dtype=np.float32)
        aux = np.asarray(aux, dtype=np.float32)
        if aux.ndim == 2:
            aux = aux[:, :, None]
        self.aux = aux
        self.labels = np.asarray(labels, dtype=np.uint16)
        self.train_mask = (None if train_mask is None
                           else np.asarray(train_mask, dtype=bool))
        self.test_mask = (None if test_mask is None
                          else np.asarray(test_mask, dtype=bool))
        self.modality = modality
        self.classes = int(self.labels.max()) if classes is None else int(classes)
        self.validate()

    rows = property(lambda self: self.labels.shape[0])
    cols = property(lambda self: self.labels.shape[1])
    bands = property(lambda self: self.hsi.shape[2])
    aux_channels = property(lambda self: self.aux.shape[2])

    @property
    def has_masks(self):
        return self.train_mask is not None and self.test_mask is not None

    def validate(self):
        """
        Check co-registration, mask disjointness and class contiguity.
        """
        if self.hsi.ndim != 3 or self.aux.ndim != 3 or self.labels.ndim != 2:
            raise IntegrityError("Expected [M x N x B], [M x N x C] and [M x N] "
                                 "rasters, got %s, %s, %s." %
                                 (self.hsi.shape, self.aux.shape,
                                  self.labels.shape))
        grid = self.labels.shape
        if self.hsi.shape[:2] != grid or self.aux.shape[:2] != grid:
            raise IntegrityError("Rasters are not co-registered: HSI %s, "
                                 "auxiliary %s, labels %s." %
                                 (self.hsi.shape[:2], self.aux.shape[:2], grid))
        if (self.train_mask is None) != (self.test_mask is None):
            raise IntegrityError("Train and test masks must be given together.")
        if self.has_masks:
            if self.train_mask.shape != grid or self.test_mask.shape != grid:
                raise IntegrityError("Masks do not match the %s label grid." %
                                     (grid,))
            overlap = np.argwhere(self.train_mask & self.test_mask)
            if len(overlap):
                raise IntegrityError(
                    "Train and test masks overlap at %d pixels, first at %s." %
                    (len(overlap), tuple(int(v) for v in overlap[0])))
        if self.modality not in _MODALITIES:
            raise IntegrityError("Unknown modality %r." % self.modality)
        present = np.unique(self.labels)
        present = present[present != 0]
        expected = np.arange(1, self.classes + 1)
        if not np.array_equal(present, expected):
            raise IntegrityError("Class ids must be contiguous 1..%d, found %s." %
                                 (self.classes, present.tolist()))


class PatchBatch(object):
    """
    Patches [N_b x k x k x B] and [N_b x k x k x C] with 0-based labels.
    """

    def __init__(self, hsi_patches, aux_patches, labels, coords):
        self.hsi_patches = hsi_patches
        self.aux_patches = aux_patches
        self.labels = labels
        self.coords = coords

    def __len__(self):
        return len(self.labels)

    def take(self, indices):
        return PatchBatch(self.hsi_patches[indices], self.aux_patches[indices],
                          self.labels[indices], self.coords[indices])


#-------------------------------------------------------------------------------

def _check_finite(name, array):
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(array))[0]
        raise IngestionError("Non-finite %s value at %s." %
                             (name, tuple(int(v) for v in bad)))

def _minmax(array):
    array = array.astype(np.float64)
    lo = array.min(axis=(0, 1), keepdims=True)
    span = array.max(axis=(0, 1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (array - lo) / safe, 0.0).astype(np.float32)

def normalize_scene(scene):
    """
    Per-band min-max scaling to [0, 1], separately for every HSI band and
    auxiliary channel.  Constant bands map to 0.
    """
    _check_finite('HSI', scene.hsi)
    _check_finite('auxiliary', scene.aux)
    return SceneBundle(_minmax(scene.hsi), _minmax(scene.aux), scene.labels,
                       scene.train_mask, scene.test_mask, scene.modality,
                       scene.classes)

def _window(raster, i, j, k):
    "k x k window centered at (i, j), zero outside the raster."
    r = k // 2
    out = np.zeros((k, k, raster.shape[2]), dtype=np.float32)
    i0, i1 = max(i - r, 0), min(i + r + 1, raster.shape[0])
    j0, j1 = max(j - r, 0), min(j + r + 1, raster.shape[1])
    out[i0 - i + r:i1 - i + r, j0 - j + r:j1 - j + r] = raster[i0:i1, j0:j1]
    return out

def extract_patches(scene, coords, k, allow_background=False):
    """
    k x k patches of both modalities centered at 'coords', zero-padded at the
    borders, and the 0-based class labels.  Background pixels are refused
    unless 'allow_background' is set, in which case their label is -1.
    """
    if k < 1 or k % 2 == 0:
        raise ConfigError("Patch size must be odd, got %d." % k)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    count = len(coords)
    hsi = np.zeros((count, k, k, scene.bands), dtype=np.float32)
    aux = np.zeros((count, k, k, scene.aux_channels), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    for n, (i, j) in enumerate(coords):
        if not (0 <= i < scene.rows and 0 <= j < scene.cols):
            raise BoundsError("Coordinate (%d, %d) is outside the %d x %d raster." %
                              (i, j, scene.rows, scene.cols))
        label = int(scene.labels[i, j])
        if label == 0 and not allow_background:
            raise DataError("Coordinate (%d, %d) is background." % (i, j))
        hsi[n] = _window(scene.hsi, i, j, k)
        aux[n] = _window(scene.aux, i, j, k)
        labels[n] = label - 1
    return PatchBatch(hsi, aux, labels, coords)


#-------------------------------------------------------------------------------
# Splits.

def _row_major(coords):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return coords[np.lexsort((coords[:, 1], coords[:, 0]))]

def split_random(scene, fraction, rng):
    """
    Stratified random split: for every class, ceil(fraction * count) pixels go
    to training and the rest to testing.  Within a class, pixels are taken in
    row-major order and shuffled with a per-class substream of 'rng'.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError("Split fraction must be in (0, 1), got %r." % fraction)
    train, test = [], []
    for g in range(1, scene.classes + 1):
        coords = np.argwhere(scene.labels == g)
        if len(coords) < 2:
            raise SplitError("Class %d has %d labeled pixels, need at least 2." %
                             (g, len(coords)))
        # Absorb representation error, e.g. 0.07 * 100 = 7.000000000000001.
        ntrain = min(len(coords), int(math.ceil(fraction * len(coords) - 1e-9)))
        order = rng.spawn(g).permutation(len(coords))
        train.append(coords[order[:ntrain]])
        test.append(coords[order[ntrain:]])
    return _row_major(np.concatenate(train)), _row_major(np.concatenate(test))

def split_from_masks(scene):
    """
    The labeled pixels of the train and test masks, in row-major order.
    """
    if not scene.has_masks:
        raise SplitError("Scene has no train/test masks.")
    if np.any(scene.train_mask & scene.test_mask):
        raise IntegrityError("Train and test masks overlap.")
    labeled = scene.labels > 0
    train = np.argwhere(scene.train_mask & labeled)
    test = np.argwhere(scene.test_mask & labeled)
    if not len(test):
        log.warning("Test mask selects no labeled pixel.")
    return train, test

def parse_split(text):
    """
    Parse 'disjoint' or 'random:<fraction>' into (kind, fraction).
    """
    if text == 'disjoint':
        return 'disjoint', None
    kind, _, value = text.partition(':')
    if kind == 'random' and value:
        try:
            fraction = float(value)
        except ValueError:
            fraction = None
        if fraction is not None and 0.0 < fraction < 1.0:
            return 'random', fraction
    raise ConfigError("Invalid split %r (expected 'disjoint' or "
                      "'random:<fraction in (0,1)>')." % text)

def make_split(scene, text, rng):
    kind, fraction = parse_split(text)
    if kind == 'disjoint':
        return split_from_masks(scene)
    return split_random(scene, fraction, rng)

def class_histogram(scene, coords=None):
    """
    Pixel count per class id, over the whole scene or over 'coords'.
    """
    if coords is None:
        labels = scene.labels[scene.labels > 0]
    else:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        labels = scene.labels[coords[:, 0], coords[:, 1]]
    counts = np.bincount(labels.astype(np.int64), minlength=scene.classes + 1)
    return dict((g, int(counts[g])) for g in range(1, scene.classes + 1))

def labeled_coords(scene):
    return np.argwhere(scene.labels > 0)

def all_coords(scene):
    return np.argwhere(np.ones(scene.labels.shape, dtype=bool))


#-------------------------------------------------------------------------------
# Synthetic scenes.

_NOISE = 0.05
_MAX_ATTEMPTS = 200

def _signature(rng, bands):
    "A smooth spectral signature: a few Gaussian bumps over a flat base."
    b = np.linspace(0.0, 1.0, bands)
    s = np.full(bands, 0.5)
    for _ in range(3):
        amp = rng.uniform(-0.25, 0.25)
        mu = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.1, 0.3)
        s += amp * np.exp(-((b - mu) / width) ** 2)
    return s

def synth_scene(classes, rows, cols, bands, aux_channels, rng,
                aux_informative=True, modality='lidar', blobs_per_class=2,
                confusable=True):
    """
    A synthetic labeled scene.  Every class is a set of elliptical blobs; its
    pixels carry the class signature plus Gaussian noise (sigma 0.05) in the
    HSI, and a class-dependent elevation level plus noise in every auxiliary
    channel when 'aux_informative' (pure noise otherwise).  With 'confusable',
    classes 1 and 2 share one spectral signature, so only the auxiliary
    modality tells them apart.  The upper half of every blob goes to the train
    mask, the lower half to the test mask.
    """
    if classes < 2:
        raise ConfigError("A synthetic scene needs at least 2 classes, got %d." %
                          classes)
    if bands < 1 or aux_channels < 1 or rows < 4 or cols < 4:
        raise ConfigError("Invalid synthetic scene shape %d x %d x %d, %d aux." %
                          (rows, cols, bands, aux_channels))

    labels = np.zeros((rows, cols), dtype=np.uint16)
    train_mask = np.zeros((rows, cols), dtype=bool)
    test_mask = np.zeros((rows, cols), dtype=bool)
    yy, xx = np.mgrid[0:rows, 0:cols]
    blob_rng = rng.spawn(0)
    for g in range(1, classes + 1):
        for blob in range(blobs_per_class):
            for _ in range(_MAX_ATTEMPTS):
                cy = blob_rng.uniform(0, rows)
                cx = blob_rng.uniform(0, cols)
                ry = max(2.0, blob_rng.uniform(0.06, 0.14) * rows)
                rx = max(2.0, blob_rng.uniform(0.06, 0.14) * cols)
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
                free = inside & (labels == 0)
                if free.sum() >= max(4, 0.6 * inside.sum()):
                    break
            else:
                raise GeneratorError(
                    "Could not place blob %d of class %d after %d attempts." %
                    (blob, g, _MAX_ATTEMPTS))
            labels[free] = g
            train_mask |= free & (yy < cy)
            test_mask |= free & (yy >= cy)

    sig_rng = rng.spawn(1)
    signatures = np.stack([_signature(sig_rng, bands)
                           for _ in range(classes + 1)])
    if confusable and classes > 2:
        signatures[2] = signatures[1]
    noise_rng = rng.spawn(2)
    hsi = signatures[labels] + noise_rng.normal(0.0, _NOISE,
                                                (rows, cols, bands))
    aux_rng = rng.spawn(3)
    if aux_informative:
        levels = np.arange(classes + 1) / float(classes)
        aux = (levels[labels][:, :, None] +
               aux_rng.normal(0.0, _NOISE, (rows, cols, aux_channels)))
    else:
        aux = aux_rng.normal(0.5, _NOISE, (rows, cols, aux_channels))

    return SceneBundle(hsi, aux, labels, train_mask, test_mask, modality,
                       classes)


#-------------------------------------------------------------------------------
# Scene container.

_PAYLOADS = (('hsi', 'hsi.f32', '<f4'),
             ('aux', 'aux.f32', '<f4'),
             ('labels', 'labels.u16', '<u2'),
             ('train_mask', 'train_mask.u8', 'u1'),
             ('test_mask', 'test_mask.u8', 'u1'))

def save_scene(scene, path):
    """
    Write 'scene' to the directory 'path' (created if needed).
    """
    os.makedirs(path, exist_ok=True)
    header = {'magic': SCENE_MAGIC,
              'M': scene.rows, 'N': scene.cols,
              'B': scene.bands, 'C': scene.aux_channels,
              'classes': scene.classes,
              'modality': scene.modality,
              'has_masks': scene.has_masks}
    with open(os.path.join(path, 'header.json'), 'w') as f:
        json.dump(header, f, indent=2)
        f.write('\n')
    for attr, fn, dtype in _PAYLOADS:
        array = getattr(scene, attr)
        if array is None:
            continue
        with open(os.path.join(path, fn), 'wb') as f:
            f.write(np.ascontiguousarray(array).astype(dtype).tobytes())
    log.info("Wrote scene %d x %d x %d (+%d aux) to %s",
             scene.rows, scene.cols, scene.bands, scene.aux_channels, path)

def _read_payload(path, fn, dtype, shape):
    fullname = os.path.join(path, fn)
    try:
        with open(fullname, 'rb') as f:
            raw = f.read()
    except IOError as e:
        raise FormatError("Cannot read %s: %s" % (fullname, e))
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise FormatError("%s: expected %d bytes, found %d." %
                          (fn, expected, len(raw)))
    return np.frombuffer(raw, dtype=dtype).reshape(shape)

def load_scene(path):
    """
    Read a scene directory written by save_scene().
    """
    try:
        with open(os.path.join(path, 'header.json')) as f:
            header = json.load(f)
    except (IOError, ValueError) as e:
        raise FormatError("Cannot read scene header in %s: %s" % (path, e))
    if header.get('magic') != SCENE_MAGIC:
        raise FormatError("Bad magic %r in %s (expected %r)." %
                          (header.get('magic'), path, SCENE_MAGIC))
    try:
        m, n, b, c = (int(header[key]) for key in 'MNBC')
        classes = int(header['classes'])
        modality = header['modality']
        has_masks = bool(header['has_masks'])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError("Incomplete scene header in %s: %s" % (path, e))

    shapes = {'hsi': (m, n, b), 'aux': (m, n, c), 'labels': (m, n),
              'train_mask': (m, n), 'test_mask': (m, n)}
    arrays = {}
    for attr, fn, dtype in _PAYLOADS:
        if attr.endswith('_mask') and not has_masks:
            arrays[attr] = None
            continue
        arrays[attr] = _read_payload(path, fn, dtype, shapes[attr])
    for attr in ('train_mask', 'test_mask'):
        if arrays[attr] is not None:
            arrays[attr] = arrays[attr] != 0

    return SceneBundle(arrays['hsi'].astype(np.float32),
                       arrays['aux'].astype(np.float32),
                       arrays['labels'].astype(np.uint16),
                       arrays['train_mask'], arrays['test_mask'],
                       modality, classes)
