import threading
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import contextmanager


class SerialExecutor(object):
    def __init__(self, max_workers=None):
        pass

    def map(self, fn, *iterables):
        return map(fn, *iterables)

    def shutdown(self, wait=True):
        pass


executors = {
    'serial': SerialExecutor,
    'thread': ThreadPoolExecutor,
    'process': ProcessPoolExecutor,
}

default_executor = None
_local = threading.local()


class _Task(object):
    """Marks the running thread as a pool worker so nested maps stay serial."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, item):
        _local.busy = True
        try:
            return self.fn(item)
        finally:
            _local.busy = False


@contextmanager
def use(name, max_workers=None):
    """Installs a bounded pool used by every map_ordered call inside the block."""
    global default_executor
    if name not in executors:
        raise KeyError("unknown executor '{}', expected one of {}".format(name, sorted(executors)))
    previous = default_executor
    pool = executors[name](max_workers=max_workers)
    default_executor = pool
    try:
        yield pool
    finally:
        default_executor = previous
        pool.shutdown(wait=True)


def map_ordered(fn, items):
    """Maps fn over items on the active pool; results keep the input order."""
    items = list(items)
    if default_executor is None or getattr(_local, "busy", False) or len(items) <= 1:
        return [fn(item) for item in items]
    return list(default_executor.map(_Task(fn), items))


def _square(x):
    return x*x


def _nested(n):
    return sum(map_ordered(_square, range(n)))


def test_map_ordered_keeps_order():
    assert map_ordered(_square, [3, 1, 2]) == [9, 1, 4]
    with use('thread', max_workers=2):
        assert map_ordered(_square, range(10)) == [i*i for i in range(10)]
        assert map_ordered(_nested, [2, 3, 4]) == [1, 5, 14]
    assert default_executor is None


def test_unknown_executor():
    try:
        with use('gpu'):
            pass
        assert False, "unknown executor accepted"
    except KeyError:
        pass
