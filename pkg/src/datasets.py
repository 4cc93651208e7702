"""
Desk-scale multimodal data: a synthetic latent-variable classification
task, the public/private partitioning of the data across devices, Bernoulli
modality assignment and ingestion of externally extracted features.
"""

import logging
import os
from collections import OrderedDict

import numpy as np
import yaml

LOGGER = logging.getLogger(__name__)

PUBLIC_FRACTION_DIVISOR = 4
TRAIN_TENTHS = 9
FEATURE_DTYPE = np.dtype('<f4')


class DatasetTooSmallError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class MultimodalDataset(object):
    """
    Labelled samples with one feature row per modality. Sample ids are the
    join key between the server's public set and the devices' shards.
    """
    def __init__(self, ids, labels, features, classes):
        """
        :param ids: (n,) int sample ids, unique
        :param labels: (n,) int class ids
        :param features: dict modality -> (n, raw_dim) float array
        :param classes: number of classes of the task
        """
        self.ids = np.asarray(ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.features = OrderedDict(
            (m, np.asarray(x, dtype=np.float64)) for m, x in features.items())
        self.classes = int(classes)
        n = self.ids.size
        if self.labels.shape != (n,):
            raise ValueError('%i ids but labels of shape %s' % (
                n, self.labels.shape))
        for modality, x in self.features.items():
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError('Modality %s features have shape %s for %i '
                                 'samples' % (modality, x.shape, n))
        if np.unique(self.ids).size != n:
            raise ValueError('Sample ids are not unique')

    def __len__(self):
        return self.ids.size

    @property
    def modalities(self):
        return list(self.features.keys())

    def take(self, positions):
        """
        A new dataset holding the samples at the given positions.
        """
        positions = np.asarray(positions, dtype=np.int64)
        return MultimodalDataset(
            self.ids[positions], self.labels[positions],
            OrderedDict((m, x[positions]) for m, x in self.features.items()),
            self.classes)

    def restrict(self, modalities):
        """
        The same samples with only the given modalities.
        """
        missing = [m for m in modalities if m not in self.features]
        if missing:
            raise ValueError('Dataset has no modality %s' % missing)
        return MultimodalDataset(
            self.ids, self.labels,
            OrderedDict((m, x) for m, x in self.features.items()
                        if m in set(modalities)),
            self.classes)

    def inputs(self, positions=None):
        """
        dict modality -> feature rows, ready for models.forward.
        """
        if positions is None:
            return OrderedDict(self.features)
        return OrderedDict((m, x[positions]) for m, x in self.features.items())

    def __repr__(self):
        return 'MultimodalDataset(n=%i, modalities=%s, classes=%i)' % (
            len(self), self.modalities, self.classes)


class SyntheticTaskSpec(object):
    """
    z ~ N(0, I); x(m) = W_m z + b_m + noise_std * eps; label = argmax(C z).
    """
    def __init__(self, mixing, offsets, class_matrix, noise_std, sample_count):
        """
        :param mixing: dict modality -> W_m, (raw_dim, latent_dim)
        :param offsets: dict modality -> b_m, (raw_dim,)
        :param class_matrix: C, (classes, latent_dim)
        :param noise_std: >= 0
        :param sample_count: >= 0
        """
        self.mixing = OrderedDict((m, np.asarray(w, dtype=np.float64))
                                  for m, w in mixing.items())
        self.offsets = OrderedDict((m, np.asarray(offsets[m], dtype=np.float64))
                                   for m in self.mixing)
        self.class_matrix = np.asarray(class_matrix, dtype=np.float64)
        self.noise_std = float(noise_std)
        self.sample_count = int(sample_count)
        if self.class_matrix.shape[0] < 2:
            raise ValueError('A task needs >= 2 classes, got %i' %
                             self.class_matrix.shape[0])
        if self.noise_std < 0:
            raise ValueError('noise_std must be >= 0, got %s' % noise_std)
        if self.sample_count < 0:
            raise ValueError('sample_count must be >= 0, got %s' % sample_count)
        for modality, w in self.mixing.items():
            if w.shape[1] != self.latent_dim:
                raise ValueError('W_%s is %s, latent_dim is %i' % (
                    modality, w.shape, self.latent_dim))
            if self.offsets[modality].shape != (w.shape[0],):
                raise ValueError('b_%s does not match W_%s' % (
                    modality, modality))

    @classmethod
    def generate(cls, raw_dims, latent_dim, classes, noise_std, sample_count,
                 rng, orthogonal=False):
        """
        Draw the mixing matrices, offsets and class matrix.

        :param raw_dims: ordered dict modality -> raw width
        :param orthogonal: give every W_m orthonormal columns (needs
            raw_dim >= latent_dim)
        """
        mixing = OrderedDict()
        offsets = OrderedDict()
        for modality, raw in raw_dims.items():
            if orthogonal:
                if raw < latent_dim:
                    raise ValueError('Orthogonal mixing for %s needs raw width '
                                     '%i >= latent %i' % (modality, raw,
                                                          latent_dim))
                mixing[modality] = np.linalg.qr(
                    rng.standard_normal((raw, latent_dim)))[0]
            else:
                mixing[modality] = rng.standard_normal((raw, latent_dim)) / \
                    np.sqrt(latent_dim)
            offsets[modality] = 0.1 * rng.standard_normal(raw)
        class_matrix = rng.standard_normal((classes, latent_dim))
        return cls(mixing, offsets, class_matrix, noise_std, sample_count)

    @property
    def latent_dim(self):
        return self.class_matrix.shape[1]

    @property
    def classes(self):
        return self.class_matrix.shape[0]


def synth_dataset(spec, rng):
    """
    Sample an omni-modal labelled dataset from a task spec.

    :param spec: SyntheticTaskSpec
    :param rng: numpy Generator
    :return: MultimodalDataset with ids 0..n-1
    """
    n = spec.sample_count
    z = rng.standard_normal((n, spec.latent_dim))
    features = OrderedDict()
    for modality, w in spec.mixing.items():
        noise = rng.standard_normal((n, w.shape[0]))
        features[modality] = z @ w.T + spec.offsets[modality] + \
            spec.noise_std * noise
    labels = np.argmax(z @ spec.class_matrix.T, axis=1) if n else \
        np.zeros(0, dtype=np.int64)
    LOGGER.debug('Synthesised %i samples over %s' % (n, list(features)))
    return MultimodalDataset(np.arange(n), labels, features, spec.classes)


class Partition(object):
    """
    The public set D' and each device's private set D_j, all split into
    train and test.
    """
    def __init__(self, public_train, public_test, private_train, private_test):
        self.public_train = public_train
        self.public_test = public_test
        self.private_train = private_train
        self.private_test = private_test

    @property
    def n_devices(self):
        return len(self.private_train)

    def public_shard(self, modalities):
        """
        D'_j: the public training samples, same ids, only the given
        modalities.
        """
        return self.public_train.restrict(modalities)

    def all_ids(self):
        parts = [self.public_train, self.public_test] + \
            list(self.private_train) + list(self.private_test)
        return [part.ids for part in parts]


def _train_count(size):
    return (TRAIN_TENTHS * size) // 10


def minimum_samples(n_devices):
    """
    The smallest dataset partition_data accepts for N devices: at least 4N
    samples, and enough that the public part and every device part keep
    at least one training sample.

    :param n_devices: N >= 1
    """
    count = PUBLIC_FRACTION_DIVISOR * n_devices
    while True:
        n_public = count // PUBLIC_FRACTION_DIVISOR
        smallest_private = (count - n_public) // n_devices
        if _train_count(n_public) >= 1 and _train_count(smallest_private) >= 1:
            return count
        count += 1


def _split_train_test(dataset, positions):
    n_train = _train_count(positions.size)
    return dataset.take(positions[:n_train]), dataset.take(positions[n_train:])


def partition_data(dataset, n_devices, rng):
    """
    A quarter of the samples go public; the rest is split evenly (+-1)
    across devices; every part is split 90/10 train/test.

    :param dataset: MultimodalDataset
    :param n_devices: N >= 1
    :param rng: numpy Generator for the shuffle
    :return: Partition
    """
    if n_devices < 1:
        raise ValueError('n_devices must be >= 1, got %s' % n_devices)
    required = minimum_samples(n_devices)
    if len(dataset) < required:
        raise DatasetTooSmallError('%i samples cannot be partitioned over %i '
                                   'devices, need at least %i' % (
                                       len(dataset), n_devices, required))
    order = rng.permutation(len(dataset))
    n_public = len(dataset) // PUBLIC_FRACTION_DIVISOR
    public_train, public_test = _split_train_test(dataset, order[:n_public])
    private_train = []
    private_test = []
    for chunk in np.array_split(order[n_public:], n_devices):
        train, test = _split_train_test(dataset, chunk)
        private_train.append(train)
        private_test.append(test)
    LOGGER.info('Partitioned %i samples: %i public, private %s' % (
        len(dataset), n_public,
        [len(tr) + len(te) for tr, te in zip(private_train, private_test)]))
    return Partition(public_train, public_test, private_train, private_test)


def _rates(modalities, mer):
    if len(modalities) == 0:
        raise ValueError('The modality universe is empty')
    if isinstance(mer, dict):
        missing = [m for m in modalities if m not in mer]
        if missing:
            raise ValueError('No modality existing rate for %s' % missing)
        rates = np.array([mer[m] for m in modalities], dtype=np.float64)
    else:
        rates = np.full(len(modalities), float(mer))
    if np.any(rates < 0) or np.any(rates > 1):
        raise ValueError('Modality existing rates must lie in [0, 1], got %s'
                         % rates.tolist())
    return rates


def draw_modality_mask(n_devices, modalities, mer, rng):
    """
    The raw Bernoulli(rho_m) draws, (N, |M|) bool, before any device with
    no modality is repaired.
    """
    rates = _rates(modalities, mer)
    return rng.random((n_devices, len(modalities))) < rates[None, :]


def assign_modalities(n_devices, modalities, mer, rng):
    """
    Keep each (device, modality) with probability rho_m; a device left with
    nothing gets one modality drawn uniformly.

    :param n_devices: N
    :param modalities: ordered list M
    :param mer: scalar rho or dict modality -> rho_m
    :param rng: numpy Generator
    :return: list of N modality lists, each in universe order
    """
    mask = draw_modality_mask(n_devices, modalities, mer, rng)
    for dev in np.flatnonzero(~mask.any(axis=1)):
        forced = int(rng.integers(len(modalities)))
        mask[dev, forced] = True
        LOGGER.debug('Device %i drew no modality, forcing %s' % (
            dev, modalities[forced]))
    return [[m for m, keep in zip(modalities, row) if keep] for row in mask]


def load_external_dataset(path):
    """
    Load pre-extracted features described by a YAML manifest::

        classes: 4
        modalities:
          audio: {file: audio.f32, width: 12}
        samples:
          - {id: 0, label: 1, rows: {audio: 0}}

    Feature files are flat little-endian float32, row-major, relative to
    the manifest's directory. Every sample must name a row for every
    modality.

    :param path: the manifest file
    :return: MultimodalDataset
    """
    if not os.path.isfile(path):
        raise IOError('No such file %s' % path)
    with open(path, 'r') as fptr:
        try:
            manifest = yaml.safe_load(fptr)
        except yaml.YAMLError as exc:
            raise ManifestError('%s: %s' % (path, exc))
    if not isinstance(manifest, dict) or 'modalities' not in manifest or \
            'samples' not in manifest:
        raise ManifestError('%s: manifest needs modalities and samples' % path)
    base = os.path.dirname(os.path.abspath(path))
    tables = OrderedDict()
    for modality, entry in manifest['modalities'].items():
        try:
            filename = os.path.join(base, entry['file'])
            width = int(entry['width'])
        except (KeyError, TypeError, ValueError):
            raise ManifestError('%s: modality %s needs file and width' % (
                path, modality))
        flat = np.fromfile(filename, dtype=FEATURE_DTYPE)
        if width < 1 or flat.size % width:
            raise ManifestError('%s: %i floats in %s are not rows of %i' % (
                path, flat.size, filename, width))
        tables[modality] = flat.reshape(-1, width).astype(np.float64)
    ids, labels = [], []
    rows = OrderedDict((m, []) for m in tables)
    for ctr, sample in enumerate(manifest['samples']):
        try:
            ids.append(int(sample['id']))
            labels.append(int(sample['label']))
            for modality in tables:
                row = int(sample['rows'][modality])
                if not 0 <= row < tables[modality].shape[0]:
                    raise ManifestError('%s: sample %s row %i out of range for '
                                        '%s' % (path, sample['id'], row,
                                                modality))
                rows[modality].append(row)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError('%s: sample entry %i is incomplete (%s)' % (
                path, ctr, exc))
    classes = int(manifest.get('classes', max(labels) + 1 if labels else 2))
    features = OrderedDict((m, tables[m][np.asarray(rows[m], dtype=np.int64)])
                           for m in tables)
    LOGGER.info('Loaded %i external samples over %s from %s' % (
        len(ids), list(tables), path))
    return MultimodalDataset(ids, labels, features, classes)

# end
