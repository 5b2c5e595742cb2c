"""Image batches, corpus ingestion and PNG output.

Pixels are channels-last float arrays normalized to [-1, 1]. Two corpora
are supported: a directory of images grouped by class subdirectory, and a
procedurally generated class-structured corpus for offline use.
"""
import colorsys
import dataclasses
import logging
import os

from joblib import Parallel, delayed
import numpy as np
from PIL import Image
import torch
import tqdm

from .config import DATA_ENV
from .errors import DataError, InputError, ShapeError

logger = logging.getLogger("hita.data")

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp', '.gif', '.webp')
PALETTE_SIZE = 6
RESAMPLE = dict(nearest=Image.NEAREST, bilinear=Image.BILINEAR,
                bicubic=Image.BICUBIC, lanczos=Image.LANCZOS)


@dataclasses.dataclass(frozen=True)
class ImageBatch:
    '''Normalized pixels, B x H x W x 3, with optional class labels.'''
    pixels: torch.Tensor
    labels: torch.Tensor = None

    def __post_init__(self):
        if self.pixels.dim() != 4 or self.pixels.shape[-1] != 3:
            raise ShapeError('expected B x H x W x 3 pixels, got {}'
                             .format(tuple(self.pixels.shape)))
        if self.labels is not None and self.labels.shape[0] != self.pixels.shape[0]:
            raise ShapeError('{} labels for {} images'.format(
                self.labels.shape[0], self.pixels.shape[0]))

    @property
    def batch_size(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def channels_first(self):
        return self.pixels.permute(0, 3, 1, 2)

    def check(self, config, values=False):
        '''Check geometry (and optionally value range) against a config.'''
        if self.height != config.image_size or self.width != config.image_size:
            raise ShapeError('images are {}x{}, config expects {}x{}'.format(
                self.height, self.width, config.image_size, config.image_size))
        if values:
            if not torch.isfinite(self.pixels).all():
                raise DataError('non-finite pixel values')
            if self.pixels.abs().max() > 1:
                raise DataError('pixel values outside [-1, 1]')
        return self

    def select(self, index):
        labels = None if self.labels is None else self.labels[index]
        return ImageBatch(self.pixels[index], labels)


def palette_color(index):
    hue = (index % PALETTE_SIZE) / float(PALETTE_SIZE)
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95), dtype=np.float32)


def class_center(label, num_classes):
    '''Disk center (row, col) in unit coordinates, on a ring around the middle.'''
    angle = 2 * np.pi * (label + 0.5) / num_classes
    return 0.5 + 0.25 * np.array([np.sin(angle), np.cos(angle)], dtype=np.float32)


def synthetic_image(label, rng, size, num_classes):
    '''Draw one class-structured image.

    The class fixes where a colored disk sits on the canvas. Hue comes from
    a shared palette whatever the class; center jitter, radius and noise
    vary per draw.
    '''
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    cy, cx = class_center(label, num_classes) + rng.uniform(-0.05, 0.05, size=2)
    radius = rng.uniform(0.18, 0.28)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 < radius ** 2

    color = palette_color(rng.randint(PALETTE_SIZE))
    fg = color + rng.normal(0, 0.05, size=3)
    bg = 0.25 * (1.0 - color) + rng.normal(0, 0.05, size=3)
    image = np.where(mask[..., None], fg, bg).astype(np.float32)
    image += rng.normal(0, 0.03, size=image.shape).astype(np.float32)
    return np.clip(image * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)


def load_image(path, size, resize_filter='bilinear', strict=False):
    '''Decode, resize (shortest side), center crop and normalize one image.

    Parameters
    ----------
    path : str
        Image file.

    size : int
        Output side length.

    strict : bool
        If True, raise InputError on a malformed file; otherwise log a
        warning and return None.

    Returns
    -------
    pixels : np.ndarray or None
        size x size x 3 float32 array in [-1, 1].
    '''
    try:
        with Image.open(path) as img:
            img = img.convert('RGB')
            scale = size / float(min(img.size))
            resized = (max(size, int(round(img.size[0] * scale))),
                       max(size, int(round(img.size[1] * scale))))
            img = img.resize(resized, resample=RESAMPLE[resize_filter])
            left = (img.size[0] - size) // 2
            top = (img.size[1] - size) // 2
            img = img.crop((left, top, left + size, top + size))
            array = np.asarray(img, dtype=np.float32)
    except (OSError, ValueError, SyntaxError) as derp:
        if strict:
            raise InputError('{}: unreadable image ({})'.format(path, derp))
        logger.warning('{}: unreadable image, skipping'.format(path))
        return None

    return array / 127.5 - 1.0


def to_uint8(pixels):
    if isinstance(pixels, torch.Tensor):
        pixels = pixels.detach().cpu().float().numpy()
    return np.round((np.clip(pixels, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def save_png(path, pixels):
    '''Write one H x W x 3 array in [-1, 1] as PNG.'''
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path)
    return path


def save_panel(path, *images, gap=2):
    '''Write images side by side, separated by white columns.'''
    arrays = [to_uint8(x) for x in images]
    height = arrays[0].shape[0]
    spacer = np.full((height, gap, 3), 255, dtype=np.uint8)
    parts = []
    for array in arrays:
        parts += [array, spacer]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.concatenate(parts[:-1], axis=1)).save(path)
    return path


class ImageCorpus(object):
    '''In-memory labelled image corpus.

    Iterating yields one shuffled epoch of ImageBatch objects. The order
    depends only on (seed, epoch), so two corpora built with the same seed
    iterate identically.
    '''

    def __init__(self, images, labels, class_names=None, batch_size=8, seed=0,
                 flip=False, num_skipped=0):
        if len(images) == 0:
            raise DataError('empty corpus')
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_names = class_names or [str(x) for x in sorted(set(self.labels.tolist()))]
        self.batch_size = batch_size
        self.seed = seed
        self.flip = flip
        self.num_skipped = num_skipped

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return len(self.class_names)

    def __iter__(self):
        return self.batches()

    def batches(self, batch_size=None, epoch=0, shuffle=True, drop_last=False):
        batch_size = batch_size or self.batch_size
        rng = np.random.RandomState([self.seed, epoch])
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            if drop_last and len(index) < batch_size:
                break
            pixels = self.images[index]
            if self.flip:
                flips = rng.rand(len(index)) < 0.5
                pixels = np.where(flips[:, None, None, None], pixels[:, :, ::-1], pixels)
            yield ImageBatch(torch.from_numpy(np.ascontiguousarray(pixels)),
                             torch.from_numpy(self.labels[index]))

    def forever(self, batch_size=None):
        '''Endless shuffled batches, epoch after epoch.

        Short final batches are dropped unless the corpus holds fewer images
        than one batch, in which case every batch is the whole corpus.
        '''
        batch_size = batch_size or self.batch_size
        drop_last = len(self) >= batch_size
        epoch = 0
        while True:
            for batch in self.batches(batch_size, epoch=epoch, drop_last=drop_last):
                yield batch
            epoch += 1

    def head(self, n):
        '''The first n samples, unshuffled, as one batch.'''
        return ImageBatch(torch.from_numpy(self.images[:n].copy()),
                          torch.from_numpy(self.labels[:n].copy()))

    def stratified(self, n):
        '''n samples taken round-robin over the classes, in stored order
        within each class, as one batch.'''
        per_class = [np.flatnonzero(self.labels == c) for c in np.unique(self.labels)]
        index = []
        for i in range(max(len(rows) for rows in per_class)):
            index += [rows[i] for rows in per_class if i < len(rows)]
        index = np.array(index[:n], dtype=np.int64)
        return ImageBatch(torch.from_numpy(self.images[index].copy()),
                          torch.from_numpy(self.labels[index].copy()))

    def take(self, n):
        '''A corpus of the first n samples.'''
        return ImageCorpus(self.images[:n], self.labels[:n], self.class_names,
                           self.batch_size, self.seed, self.flip)

    def split(self, held_out=0.25):
        '''Deterministic train / held-out split.'''
        rng = np.random.RandomState(self.seed)
        order = rng.permutation(len(self))
        cut = max(1, int(round(len(order) * held_out)))
        parts = []
        for index in (order[cut:], order[:cut]):
            parts.append(ImageCorpus(self.images[index], self.labels[index],
                                     self.class_names, self.batch_size, self.seed,
                                     self.flip))
        return tuple(parts)


def synthetic_corpus(config, num_classes=None, samples_per_class=None, seed=None):
    num_classes = num_classes or config.num_classes
    samples_per_class = samples_per_class or config.samples_per_class
    seed = config.seed if seed is None else seed

    rng = np.random.RandomState(seed)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = np.stack([synthetic_image(int(y), rng, config.image_size, num_classes)
                       for y in labels])
    return ImageCorpus(images, labels, ['class-{}'.format(c) for c in range(num_classes)],
                       batch_size=config.batch_size, seed=seed)


def list_images(root):
    classes = sorted(d for d in os.listdir(root)
                     if os.path.isdir(os.path.join(root, d)))
    items = []
    for label, name in enumerate(classes):
        class_dir = os.path.join(root, name)
        for fname in sorted(os.listdir(class_dir)):
            if fname.lower().endswith(IMAGE_EXTENSIONS):
                items.append((os.path.join(class_dir, fname), label))
    return classes, items


def ingest_dataset(root, config, synthetic=False, flip=False, num_cpus=1, verbose=0):
    '''Build a corpus from a class-structured directory or synthetically.

    Parameters
    ----------
    root : str or None
        Directory with one subdirectory per class. Falls back to the
        HITA_DATA environment variable.

    config : PipelineConfig

    synthetic : bool
        Generate the procedural corpus instead of reading files.

    num_cpus : int
        joblib workers used to decode images.

    Returns
    -------
    corpus : ImageCorpus
        Iterable of ImageBatch; `corpus.num_skipped` counts unreadable files.
    '''
    if synthetic:
        return synthetic_corpus(config)

    root = root or os.environ.get(DATA_ENV)
    if not root or not os.path.isdir(root):
        raise DataError('dataset root {!r} is not a directory (set --data or {})'
                        .format(root, DATA_ENV))

    classes, items = list_images(root)
    if not items:
        raise DataError('no images found under {}'.format(root))

    dfx = delayed(load_image)
    pool = Parallel(n_jobs=num_cpus, verbose=verbose)
    arrays = pool(dfx(path, config.image_size, config.resize_filter)
                  for path, _ in tqdm.tqdm(items, disable=verbose == 0))

    images, labels = [], []
    for array, (_, label) in zip(arrays, items):
        if array is not None:
            images.append(array)
            labels.append(label)

    num_skipped = len(items) - len(images)
    if num_skipped:
        logger.warning('skipped {} unreadable images under {}'.format(num_skipped, root))
    if not images:
        raise DataError('no readable images under {}'.format(root))

    return ImageCorpus(np.stack(images), labels, classes, batch_size=config.batch_size,
                       seed=config.seed, flip=flip, num_skipped=num_skipped)
