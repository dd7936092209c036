import dill
from multiprocessing import Pool

from mrCore.utils import setup_log

log = setup_log("MisretPool")


def run_dill_encoded(what):
    fun, args = dill.loads(what)
    return fun(*args)


def apply_async(pool, fun, args):
    return pool.apply_async(run_dill_encoded, (dill.dumps((fun, args)),))


class WorkerPool(object):
    """
    Process pool for rollout workers. Tasks and their arguments travel
    dill-encoded, so closures and models pickle the same way.
    """

    def __init__(self, processes=2):
        self.pool = Pool(processes)
        log.debug("Started worker pool with %d processes" % processes)

    def map(self, fun, tasks):
        """
        :param fun: Function to run.
        :param tasks: List of argument tuples, one per call.
        :return: Results in task order.
        """
        handles = [apply_async(self.pool, fun, args) for args in tasks]
        return [h.get() for h in handles]

    def close(self):
        self.pool.close()
        self.pool.join()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            self.pool.terminate()
        else:
            self.close()
