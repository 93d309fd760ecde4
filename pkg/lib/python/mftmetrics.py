"""
Evaluation: confusion matrices, overall/average accuracy, Cohen's kappa and
classification maps.

Usage::

    cm = ConfusionMatrix(classes)
    cm.accumulate_many(true_labels, predictions)
    report = compute_metrics(cm)
    open('report.json', 'w').write(report.to_json())

Labels are 0-based class indices.  Rows of the confusion matrix are true
classes, columns predicted classes.

Maps are binary PPM (P6) images with one pixel per raster cell.  Background
and unpredicted pixels are black; class id g (1-based) is painted with
PALETTE[g-1].
"""

__author__ = 'MFT fusion developers'


# stdlib imports
import json
import logging

# numpy imports
import numpy as np

# mft imports
from mfttensor import Error
from mftdata import BoundsError


__all__ = ('ConfusionMatrix', 'EvalReport', 'LabelError',
           'EmptyEvaluationError', 'PaletteError', 'PALETTE', 'accumulate',
           'compute_metrics', 'render_map', 'summarize')


log = logging.getLogger(__name__)


PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    )
"RGB colors of class ids 1..16."


class LabelError(Error):
    """
    A class label out of range.
    """

class EmptyEvaluationError(Error):
    """
    Metrics requested over zero samples.
    """

class PaletteError(Error):
    """
    A class id without a palette color.
    """



class ConfusionMatrix(object):
    """
    Integer counts [C x C], rows = true class, columns = predicted class.
    """

    def __init__(self, classes, counts=None):
        if counts is None:
            counts = np.zeros((classes, classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (classes, classes) or np.any(counts < 0):
            raise LabelError("Invalid %dx%d confusion counts of shape %s." %
                             (classes, classes, counts.shape))
        self.counts = counts

    classes = property(lambda self: self.counts.shape[0])
    total = property(lambda self: int(self.counts.sum()))

    def _check(self, labels, what):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        bad = (labels < 0) | (labels >= self.classes)
        if np.any(bad):
            raise LabelError("%s label %d out of range [0, %d)." %
                             (what, labels[bad][0], self.classes))
        return labels

    def accumulate(self, true_label, predicted):
        t = self._check(true_label, 'True')[0]
        p = self._check(predicted, 'Predicted')[0]
        self.counts[t, p] += 1
        return self

    def accumulate_many(self, true_labels, predicted):
        t = self._check(true_labels, 'True')
        p = self._check(predicted, 'Predicted')
        if len(t) != len(p):
            raise LabelError("Got %d true labels and %d predictions." %
                             (len(t), len(p)))
        np.add.at(self.counts, (t, p), 1)
        return self

    def merge(self, other):
        """
        Elementwise sum with the matrix of another shard.
        """
        if other.classes != self.classes:
            raise LabelError("Cannot merge %d-class and %d-class matrices." %
                             (self.classes, other.classes))
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and
                np.array_equal(self.counts, other.counts))

    def __repr__(self):
        return 'ConfusionMatrix(%d classes, %d samples)' % (self.classes,
                                                            self.total)


def accumulate(cm, true_label, predicted):
    return cm.accumulate(true_label, predicted)


class EvalReport(object):
    """
    Accuracy figures of one evaluation.
    """

    def __init__(self, oa, aa, kappa, per_class, confusion):
        self.oa = oa
        self.aa = aa
        self.kappa = kappa
        self.per_class = per_class
        self.confusion = confusion

    samples = property(lambda self: self.confusion.total)

    def to_dict(self):
        return {'oa': self.oa,
                'aa': self.aa,
                'kappa': self.kappa,
                'per_class': list(self.per_class),
                'confusion': self.confusion.counts.tolist(),
                'samples': self.samples}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + '\n'

    def __repr__(self):
        return 'EvalReport(oa=%.4f, aa=%.4f, kappa=%.4f, samples=%d)' % (
            self.oa, self.aa, self.kappa, self.samples)


def compute_metrics(cm):
    """
    OA, per-class accuracy, AA over the classes present in the evaluation,
    and Cohen's kappa.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise EmptyEvaluationError("No samples in the confusion matrix.")
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    diag = np.diag(counts)

    oa = float(diag.sum() / total)
    nonempty = rows > 0
    per_class = np.where(nonempty, diag / np.where(nonempty, rows, 1.0), 0.0)
    if not np.all(nonempty):
        log.warning("Classes %s have no samples; left out of AA.",
                    np.flatnonzero(~nonempty).tolist())
    aa = float(per_class[nonempty].mean())

    pe = float((rows * cols).sum() / (total * total))
    if pe == 1.0:
        log.warning("Chance agreement is 1; kappa set to 0.")
        kappa = 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)

    return EvalReport(oa, aa, kappa, [float(x) for x in per_class],
                      ConfusionMatrix(cm.classes, cm.counts.copy()))


def render_map(shape, coords, class_ids, palette=PALETTE):
    """
    P6 image bytes of an M x N raster ('shape'), with the 1-based 'class_ids'
    painted at 'coords' and everything else black.
    """
    rows, cols = shape
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    class_ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if len(coords) != len(class_ids):
        raise LabelError("Got %d coordinates and %d classes." %
                         (len(coords), len(class_ids)))
    bad = (class_ids < 1) | (class_ids > len(palette))
    if np.any(bad):
        raise PaletteError("Class id %d has no color (palette holds %d)." %
                           (class_ids[bad][0], len(palette)))
    outside = ((coords[:, 0] < 0) | (coords[:, 0] >= rows) |
               (coords[:, 1] < 0) | (coords[:, 1] >= cols))
    if np.any(outside):
        i, j = coords[outside][0]
        raise BoundsError("Coordinate (%d, %d) is outside the %d x %d raster." %
                          (i, j, rows, cols))

    colors = np.asarray(palette, dtype=np.uint8)
    image = np.zeros((rows, cols, 3), dtype=np.uint8)
    image[coords[:, 0], coords[:, 1]] = colors[class_ids - 1]
    header = ('P6\n%d %d\n255\n' % (cols, rows)).encode('ascii')
    return header + image.tobytes()


def summarize(reports):
    """
    Mean and standard deviation of OA, AA, kappa and per-class accuracy over
    repeated evaluations.
    """
    if not reports:
        raise EmptyEvaluationError("No reports to summarize.")
    summary = {'repeats': len(reports)}
    for name in ('oa', 'aa', 'kappa'):
        values = np.array([getattr(r, name) for r in reports])
        summary[name] = {'mean': float(values.mean()),
                         'std': float(values.std())}
    per_class = np.array([r.per_class for r in reports])
    summary['per_class'] = {'mean': per_class.mean(axis=0).tolist(),
                            'std': per_class.std(axis=0).tolist()}
    return summary
