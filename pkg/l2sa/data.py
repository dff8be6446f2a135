# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Datasets: loading, preprocessing, splitting and synthetic data.

A dataset directory holds one subdirectory per class:

    root/meningioma/*.png
    root/glioma/*.png
    root/pituitary/*.png

Images are collapsed to grayscale, resized bilinearly to a square
input, rescaled from [0,255] to [0,1] and repeated over three
identical channels (pseudo-RGB).
"""

__all__ = ['CANONICAL_CLASSES', 'IMAGE_EXTENSIONS', 'SPLITS', 'ImageRecord',
           'Dataset', 'discover_classes', 'load_directory', 'preprocess', 'split', 'split_counts',
           'write_manifest', 'read_manifest', 'synth_dataset',
           'write_image_tree', 'class_counts', 'summary']

import os
import math
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image, UnidentifiedImageError
from paranoid.decorators import accepts, returns, ensures, paranoidclass, paranoidconfig
from paranoid.types import (Natural0, Natural1, Integer, String, Maybe,
                            Tuple, Set, Unchecked)

from .types import FilePath, Fractions
from .exceptions import DatasetError
from .settings import Settings

logger = logging.getLogger(__name__)

# Label order of the brain tumor corpus
CANONICAL_CLASSES = ("meningioma", "glioma", "pituitary")
IMAGE_EXTENSIONS = (".png", ".bmp", ".jpg", ".jpeg")
SPLITS = ("train", "val", "test")

@paranoidclass
class ImageRecord:
    """A preprocessed image: `pixels` is a (3, size, size) float32 array
    in [0,1] whose three channels are identical."""
    def __init__(self, pixels, label, source):
        self.pixels = pixels
        self.label = label
        self.source = source
    @staticmethod
    def _test(v):
        assert isinstance(v.pixels, np.ndarray) and v.pixels.ndim == 3
        assert v.pixels.shape[0] == 3, "Records are pseudo-RGB"
        assert np.all(v.pixels >= 0) and np.all(v.pixels <= 1), "Pixels must lie in [0,1]"
        assert np.array_equal(v.pixels[0], v.pixels[1]) and np.array_equal(v.pixels[0], v.pixels[2])
        Natural0().test(v.label)
        assert isinstance(v.source, str)
    @staticmethod
    def _generate():
        yield ImageRecord(np.zeros((3, 4, 4), dtype=np.float32), 0, "zeros")
        yield ImageRecord(np.full((3, 8, 8), .5, dtype=np.float32), 2, "half")
    @property
    def size(self):
        return self.pixels.shape[1]

@paranoidclass
class Dataset:
    """Labeled records with class names and an optional split.

    `assignments`, when set, gives "train", "val" or "test" for each
    record; `seed` and `fractions` record how it was drawn.  `root` is
    the directory the records were read from, if any.
    """
    def __init__(self, records, class_names, assignments=None, seed=None,
                 fractions=None, root=None):
        self.records = list(records)
        self.class_names = tuple(class_names)
        self.assignments = list(assignments) if assignments is not None else None
        self.seed = seed
        self.fractions = fractions
        self.root = root
    @staticmethod
    def _test(v):
        assert all(isinstance(r, ImageRecord) for r in v.records)
        assert all(r.label < len(v.class_names) for r in v.records), "Label without a class"
        if v.assignments is not None:
            assert len(v.assignments) == len(v.records), "Every record needs a split"
            assert all(a in SPLITS for a in v.assignments)
    @staticmethod
    def _generate():
        yield synth_dataset(3, 2, 0, 16)
        yield split(synth_dataset(3, 4, 1, 16), (.5, .25, .25), 0)
    def __len__(self):
        return len(self.records)
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)
    def indices(self, name):
        """Record indices in split `name`, in dataset order."""
        if self.assignments is None:
            raise DatasetError("Dataset has not been split")
        return [i for i,a in enumerate(self.assignments) if a == name]
    def subset(self, name):
        """The records of one split as a new, unsplit dataset."""
        return Dataset([self.records[i] for i in self.indices(name)], self.class_names,
                       root=self.root)
    def arrays(self, name=None):
        """(pixels, labels) of split `name`, or of every record, as
        arrays of shape (N, 3, size, size) and (N,)."""
        idx = range(len(self.records)) if name is None else self.indices(name)
        if len(idx) == 0:
            raise DatasetError("Split %s is empty" % (name or "all"))
        x = np.stack([self.records[i].pixels for i in idx]).astype(Settings.dtype())
        y = np.array([self.records[i].label for i in idx], dtype=np.int64)
        return x, y
    def input_shape(self):
        return self.records[0].pixels.shape if self.records else None

def _to_gray(image):
    """A PIL image or uint8 array as a single-channel float ('F') image."""
    if isinstance(image, np.ndarray):
        if image.ndim not in (2, 3) or min(image.shape[:2]) == 0:
            raise DatasetError("Image must be a non-empty HxW or HxWx3 array, got shape %s" % (image.shape,))
        arr = image
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.dtype != np.uint8:
            arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
        image = Image.fromarray(arr)
    if image.width == 0 or image.height == 0:
        raise DatasetError("Zero-sized image")
    if image.mode not in ("L", "F"):
        # ITU-R 601 luma
        image = image.convert("RGB").convert("L")
    return image.convert("F")

@accepts(Unchecked(), Natural1, Natural0, String)
@returns(ImageRecord)
@ensures("return.pixels.shape == (3, size, size)")
@paranoidconfig(unit_test=False)
def preprocess(image, size=256, label=0, source=""):
    """Turn a decoded image into an ImageRecord.

    `image` may be a PIL image, an 8-bit HxW (grayscale) or HxWx3 (RGB)
    array, or an ImageRecord, which is returned unchanged when it is
    already `size` pixels square.
    """
    if isinstance(image, ImageRecord):
        if image.size == size:
            return image
        label, source = image.label, image.source
        image = Image.fromarray((image.pixels[0]*255).astype(np.float32))
    gray = _to_gray(image)
    if gray.size != (size, size):
        gray = gray.resize((size, size), Image.BILINEAR)
    plane = np.clip(np.asarray(gray, dtype=np.float32)/np.float32(255), 0, 1)
    pixels = np.broadcast_to(plane, (3, size, size))
    return ImageRecord(pixels, label, source)

def _read(args):
    path, label, source, size = args
    try:
        with Image.open(path) as im:
            im.load()
            return preprocess(im, size, label, source)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError("Cannot read image %s: %s" % (path, e))

@accepts(FilePath)
@returns(Unchecked(tuple))
@paranoidconfig(unit_test=False)
def discover_classes(root):
    """Class names for the subdirectories of `root`, in label order."""
    if not os.path.isdir(str(root)):
        raise DatasetError("Dataset directory %s does not exist" % root)
    found = sorted(d for d in os.listdir(str(root)) if os.path.isdir(os.path.join(str(root), d)))
    if not found:
        raise DatasetError("No class directories in %s" % root)
    if set(found) & set(CANONICAL_CLASSES):
        extra = [d for d in found if d not in CANONICAL_CLASSES]
        if extra:
            logger.warning("Ignoring directories %s next to the canonical classes in %s" %
                           (", ".join(extra), root))
        return CANONICAL_CLASSES
    return tuple(found)

@accepts(FilePath, Maybe(Unchecked(tuple)), Natural1, Maybe(Natural1))
@returns(Dataset)
@paranoidconfig(unit_test=False)
def load_directory(root, class_names=None, size=256, workers=None):
    """Load every image under root/<class>/.

    By default the class directories are discovered and labelled in
    alphabetical order, except that a corpus using the canonical names
    is labelled meningioma, glioma, pituitary (all three must then be
    present).  An explicit `class_names` fixes the labels instead.
    Records are ordered by relative path whatever the number of loader
    threads (`workers`, default the `workers` setting).
    """
    root = str(root)
    if not os.path.isdir(root):
        raise DatasetError("Dataset directory %s does not exist" % root)
    if class_names is None:
        class_names = discover_classes(root)
    missing = [c for c in class_names if not os.path.isdir(os.path.join(root, c))]
    if missing:
        raise DatasetError("Missing class directories %s in %s; expected %s" %
                           (", ".join(missing), root, ", ".join(class_names)))
    jobs = []
    for label, c in enumerate(class_names):
        files = sorted(f for f in os.listdir(os.path.join(root, c))
                       if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            raise DatasetError("Class directory %s has no images" % os.path.join(root, c))
        jobs += [(os.path.join(root, c, f), label, c + "/" + f, size) for f in files]
    jobs.sort(key=lambda j : j[2])
    with ThreadPoolExecutor(max_workers=workers or Settings.get('workers')) as pool:
        records = list(pool.map(_read, jobs))
    ds = Dataset(records, class_names, root=root)
    logger.info("Loaded %i images from %s: %s" % (len(ds), root, summary(ds)))
    return ds

@accepts(Natural0, Fractions)
@returns(Tuple(Natural0, Natural0, Natural0))
@ensures("sum(return) == n")
def split_counts(n, fractions=(.7, .1, .2)):
    """Train and validation counts rounded half up, the rest to test."""
    n_train = min(int(math.floor(n*fractions[0] + .5)), n)
    n_val = min(int(math.floor(n*fractions[1] + .5)), n - n_train)
    return n_train, n_val, n - n_train - n_val

@accepts(Dataset, Fractions, Integer, Maybe(FilePath))
@returns(Dataset)
@ensures("len(return) == len(dataset)")
@paranoidconfig(unit_test=False)
def split(dataset, fractions=(.7, .1, .2), seed=0, manifest=None):
    """Assign every record to train, val or test by a seeded shuffle.

    If `manifest` is given, the assignment is also written there.
    """
    n = len(dataset)
    if n < 3:
        raise DatasetError("Need at least 3 samples to split, got %i" % n)
    counts = split_counts(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    assignments = [None]*n
    names = np.repeat(SPLITS, counts)
    for i, name in zip(order, names):
        assignments[i] = str(name)
    result = Dataset(dataset.records, dataset.class_names, assignments, seed,
                     tuple(fractions), dataset.root)
    logger.info("Split %i samples into %i/%i/%i" % ((n,) + counts))
    if manifest is not None:
        write_manifest(result, manifest)
    return result

def _class_mapping(class_names):
    return ",".join("%i:%s" % (i, c) for i,c in enumerate(class_names))

def write_manifest(dataset, path):
    """Write one "<relative path>\\t<label>\\t<split>" line per record.

    Three header lines record the seed and fractions, the label of
    every class, and the class counts of each split:

      # seed=0\\tfractions=0.7,0.1,0.2
      # classes=0:meningioma,1:glioma,2:pituitary
      # counts.train=496,998,651\\tcounts.val=71,143,92\\tcounts.test=...
    """
    if dataset.assignments is None:
        raise DatasetError("Cannot write a manifest for an unsplit dataset")
    counts = ["counts.%s=%s" % (s, ",".join(str(c) for c in class_counts(dataset, s).values()))
              for s in SPLITS]
    lines = ["# seed=%s\tfractions=%s" % (dataset.seed, ",".join("%g" % f for f in dataset.fractions)),
             "# classes=%s" % _class_mapping(dataset.class_names),
             "# " + "\t".join(counts)]
    lines += ["%s\t%i\t%s" % (r.source, r.label, a)
              for r,a in zip(dataset.records, dataset.assignments)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")

def read_manifest(path, dataset):
    """Restore the split recorded in manifest `path` onto `dataset`.

    The manifest must label the classes as the dataset does and list
    exactly the dataset's records, with the same labels.
    """
    try:
        with open(path) as f:
            lines = [l.rstrip("\n") for l in f if l.strip()]
    except OSError as e:
        raise DatasetError("Cannot read manifest %s: %s" % (path, e.strerror))
    if not lines or not lines[0].startswith("# seed="):
        raise DatasetError("Manifest %s has no header" % path)
    header = [l for l in lines if l.startswith("#")]
    body = lines[len(header):]
    try:
        head = dict(field.split("=", 1) for l in header for field in l[2:].split("\t"))
        seed = None if head["seed"] == "None" else int(head["seed"])
        fractions = tuple(float(f) for f in head["fractions"].split(","))
        classes = head["classes"]
        entries = {}
        for l in body:
            source, label, name = l.split("\t")
            entries[source] = (int(label), name)
    except (ValueError, KeyError) as e:
        raise DatasetError("Malformed manifest %s: %s" % (path, e))
    if classes != _class_mapping(dataset.class_names):
        raise DatasetError("Manifest %s labels the classes %s, the dataset %s" %
                           (path, classes, _class_mapping(dataset.class_names)))
    sources = [r.source for r in dataset.records]
    if sorted(sources) != sorted(entries):
        raise DatasetError("Manifest %s does not list the dataset's images" % path)
    for r in dataset.records:
        label, name = entries[r.source]
        if label != r.label or name not in SPLITS:
            raise DatasetError("Manifest %s disagrees with the dataset at %s" % (path, r.source))
    return Dataset(dataset.records, dataset.class_names,
                   [entries[s][1] for s in sources], seed, fractions, dataset.root)

@accepts(Natural1, Natural1, Integer, Natural1)
@returns(Dataset)
@ensures("len(return) == classes*per_class")
@paranoidconfig(unit_test=False)
def synth_dataset(classes=3, per_class=12, seed=0, size=64):
    """Grayscale images with a bright blob whose position encodes the class.

    Class k places a Gaussian blob near angle 2*pi*k/classes on a circle
    around the image center, over uniform background noise, with a few
    pixels of positional jitter.  Records are ordered class by class.
    """
    rng = np.random.default_rng(seed)
    names = CANONICAL_CLASSES if classes == len(CANONICAL_CLASSES) else \
        tuple("class%i" % k for k in range(classes))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size/10
    records = []
    for k in range(classes):
        angle = 2*np.pi*k/classes
        for i in range(per_class):
            cy, cx = size/2 + .3*size*np.sin(angle), size/2 + .3*size*np.cos(angle)
            cy, cx = (cy, cx) + rng.uniform(-size/32, size/32, 2)
            blob = 200*np.exp(-((yy - cy)**2 + (xx - cx)**2)/(2*sigma**2))
            image = np.clip(blob + rng.uniform(0, 40, (size, size)), 0, 255).astype(np.uint8)
            records.append(preprocess(image, size, k, "%s/%04i.png" % (names[k], i)))
    return Dataset(records, names)

def write_image_tree(dataset, root):
    """Save every record as an 8-bit grayscale PNG at root/<source>."""
    for r in dataset.records:
        path = os.path.join(str(root), r.source)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        Image.fromarray(np.round(r.pixels[0]*255).astype(np.uint8)).save(path)

@accepts(Dataset, Maybe(Set(list(SPLITS))))
@returns(Unchecked(OrderedDict))
def class_counts(dataset, split_name=None):
    """Number of records of each class, in label order."""
    idx = range(len(dataset)) if split_name is None else dataset.indices(split_name)
    labels = np.array([dataset.records[i].label for i in idx], dtype=np.int64)
    counts = np.bincount(labels, minlength=len(dataset.class_names))
    return OrderedDict(zip(dataset.class_names, (int(c) for c in counts)))

def summary(dataset):
    """One line with class counts and the imbalance ratio."""
    counts = class_counts(dataset)
    text = ", ".join("%s %i" % kv for kv in counts.items())
    if min(counts.values()) > 0:
        text += " (largest/smallest class %.2f)" % (max(counts.values())/min(counts.values()))
    if dataset.assignments is not None:
        text += "; split %s" % "/".join(str(len(dataset.indices(s))) for s in SPLITS)
    return text
