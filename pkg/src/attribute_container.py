import logging

LOGGER = logging.getLogger(__name__)


class AttributeContainer(object):
    """
    Per-modality parts (encoder stacks, projectors) reachable as
    container.vision or container['vision'], iterated in the order they
    were added. Once added, an entry cannot be replaced.
    """
    def __init__(self, items=None):
        """
        :param items: optional iterable of (name, value) pairs to add
        """
        self._items = None
        self.clear()
        for name, value in (items or ()):
            setattr(self, name, value)

    def __getitem__(self, name):
        """
        Dictionary-style access by modality name.

        :param name: the modality
        :return: the stored part
        """
        if name not in self._items:
            raise KeyError(name)
        return self.__getattribute__(name)

    def __setattr__(self, name, value):
        if name == '_items':
            super(AttributeContainer, self).__setattr__(name, value)
            return
        if self._items is None:
            raise ValueError('Cannot add %s before the container is '
                             'initialised' % name)
        if name in self._items:
            raise AttributeError('Cannot reassign %s' % name)
        self._items.append(name)
        super(AttributeContainer, self).__setattr__(name, value)

    __setitem__ = __setattr__

    def __contains__(self, name):
        return name in self._items

    def __iter__(self):
        return (getattr(self, n) for n in self._items)

    def __len__(self):
        return len(self._items)

    def clear(self):
        self.__dict__.clear()
        self._items = []

    def names(self):
        return list(self._items)

    keys = names

    def items(self):
        return [(n, getattr(self, n)) for n in self._items]

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, ', '.join(self._items))

    __str__ = __repr__

# end
