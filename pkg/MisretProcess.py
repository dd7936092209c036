import time
import weakref


class RunProcess(object):
    """
    One running command. Used as a context manager, it reports
    abnormal termination and elapsed time to the app log.
    """

    app = None

    def __init__(self, descr):
        self.callbacks = {
            "done": []
        }
        self.descr = descr
        self.status = "Active"
        self.started = None
        self.finished = False

    def __enter__(self):
        self.started = time.time()
        self.app.log.info("%s ..." % self.descr)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            self.set_status("Failed")
            self.app.log.error("Abnormal termination of process: %s" % self.descr)
            self.app.log.error(exc_type)
            self.app.log.error(exc_val)
        else:
            self.set_status("Done")
            self.app.log.info("%s finished in %.1f s" % (self.descr, time.time() - self.started))

        self.done()

    def done(self):
        if self.finished:
            return
        self.finished = True
        for fcn in self.callbacks["done"]:
            fcn(self)

    def connect(self, callback, event="done"):
        if callback not in self.callbacks[event]:
            self.callbacks[event].append(callback)

    def set_status(self, status_string):
        self.status = status_string

    def status_msg(self):
        return "%s [%s]" % (self.descr, self.status)


class ProcessContainer(object):
    """
    Keeps weak references to the running RunProcess'es
    such that a forgotten process does not linger.
    """

    app = None

    def __init__(self):

        self.procs = []

    def add(self, proc):

        self.procs.append(weakref.ref(proc))

    def new(self, descr):
        proc = RunProcess(descr)

        proc.connect(self.on_done, event="done")

        self.add(proc)

        return proc

    def on_done(self, proc):
        self.remove(proc)

    def remove(self, proc):

        to_be_removed = []

        for pref in self.procs:
            if pref() == proc or pref() is None:
                to_be_removed.append(pref)

        for pref in to_be_removed:
            self.procs.remove(pref)

    def running(self):
        return [p().status_msg() for p in self.procs if p() is not None]
