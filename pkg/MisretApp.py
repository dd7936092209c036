import contextlib
import copy
import json
import logging
import os
import traceback

########################################
##      Imports part of misret        ##
########################################
from MisretCommon import LoudDict
from MisretProcess import ProcessContainer, RunProcess
from MisretPool import WorkerPool

from mrCore.checkpoint import CheckpointError
from mrCore.config import resolve_config, load_config_file, config_digest, resolve_key, ConfigError
from mrCore.lmprior import CorpusError
from mrCore.losses import NumericalError
from mrCore.trajectory import DatasetParseError
from mrCore.utils import set_level

import cliCommands


########################################
##                App                 ##
########################################
class App(object):
    """
    The main application class. Holds the command registry and the
    resolved experiment configuration of the running command.
    """

    ## Logging ##
    log = logging.getLogger('base')
    log.setLevel(logging.DEBUG)
    # log.setLevel(logging.WARNING)
    formatter = logging.Formatter('[%(levelname)s][%(threadName)s] %(message)s')
    handler = logging.StreamHandler()
    handler.setFormatter(formatter)
    if not log.handlers:
        log.addHandler(handler)

    ## Version
    version = 1.0
    version_date = "2026/10"
    version_quality = "beta"

    ## Where configs/ and share/ live
    app_home = os.path.dirname(os.path.abspath(__file__))

    class CommandErrorException(Exception):
        """
        Usage errors of a command: unknown options, bad casts,
        contradictory flags, refused overwrites.
        """
        pass

    class AcceptanceError(Exception):
        """
        A demo or check-mode run finished but did not meet its criterion.
        """
        pass

    @classmethod
    def version_string(cls):
        return f"{cls.version} {cls.version_quality} [{cls.version_date}]"

    def __init__(self):
        """
        :return: app
        :rtype: App
        """

        App.log.debug("misret v" + App.version_string() + " starting...")

        self.commands = {}
        cliCommands.register_all_commands(self, self.commands)

        RunProcess.app = self
        ProcessContainer.app = self
        self.proc_container = ProcessContainer()

        # Config sections of the running command, LoudDict per section.
        self.options = {}
        self.config = None
        self.digest = None
        self.config_path = None

    def find_file(self, path):
        """
        :param path: Config path as given. Relative paths that do not
            exist in the working directory are looked up in the app home.
        :return: Usable path.
        """
        if os.path.isabs(path) or os.path.exists(path):
            return path
        candidate = os.path.join(self.app_home, path)
        if os.path.exists(candidate):
            return candidate
        return path

    def load_config(self, path=None, overrides=None):
        """
        Loads the experiment config file into ``self.options`` and applies
        overrides on top of it. Every override is logged.

        :param path: JSON config file, or None for the defaults.
        :param overrides: List of (dotted key, value).
        :return: The resolved configuration.
        :raises ConfigError: on unknown keys or invalid values.
        """
        user = {}
        if path is not None:
            path = self.find_file(path)
            user = load_config_file(path)
            self.log.debug("Loaded config file %s" % path)
        self.config_path = path

        base = resolve_config(user)
        self.options = {}
        for section, values in base.items():
            if isinstance(values, dict):
                self.options[section] = LoudDict(values)
                self.options[section].set_change_callback(self.on_option_change(section))
            else:
                self.options[section] = values

        for dotted, value in overrides or []:
            self.set_option(dotted, value)

        self.propagate_options()
        return self.config

    def on_option_change(self, section):
        def callback(key, old, new):
            self.log.info("Override %s.%s: %r -> %r" % (section, key, old, new))
        return callback

    def set_option(self, dotted, value):
        section, key = resolve_key(self.options, dotted)
        if key is None:
            if self.options["seed"] != value:
                self.log.info("Override seed: %r -> %r" % (self.options["seed"], value))
            self.options["seed"] = value
        else:
            self.options[section][key] = value

    def propagate_options(self):
        """
        Re-resolves ``self.options`` into ``self.config`` and its digest.
        """
        plain = {s: (v.plain() if isinstance(v, LoudDict) else v) for s, v in self.options.items()}
        self.config = resolve_config(copy.deepcopy(plain))
        self.digest = config_digest(self.config)
        self.log.debug("Resolved config %s: %s" % (self.digest[:12], json.dumps(self.config, sort_keys=True)))

    def set_quiet(self, quiet):
        level = logging.WARNING if quiet else logging.DEBUG
        self.log.setLevel(level)
        set_level(level, "mrCore")

    def make_pool(self, workers):
        """
        :param workers: Number of worker processes. 0 runs in-process.
        :return: Context manager yielding a WorkerPool, or None for in-process runs.
        """
        if workers <= 0:
            return contextlib.nullcontext()
        return WorkerPool(workers)

    def display_error(self, error, error_info=None):
        """
        Logs a command failure. Expected errors show their message,
        anything else also gets the Python traceback.

        :param error: Exception or text.
        :param error_info: sys.exc_info() of the failure.
        :return: None
        """

        if isinstance(error, Exception):
            if not self.is_expected(error) and error_info is not None:
                exc_type, exc_value, exc_traceback = error_info
                trc = traceback.format_list(traceback.extract_tb(exc_traceback))
                trc_formated = []
                for a in reversed(trc):
                    trc_formated.append(a.replace("    ", " > ").replace("\n", ""))
                text = "%s\nPython traceback: %s\n%s" % (exc_value,
                                 exc_type,
                                 "\n".join(trc_formated))
            else:
                text = "%s: %s" % (type(error).__name__, error)
        else:
            text = error

        self.log.error(text)

    @staticmethod
    def is_expected(error):
        known = (App.CommandErrorException, App.AcceptanceError, ConfigError, NumericalError,
                 CheckpointError, CorpusError, DatasetParseError)
        return isinstance(error, known)

    @staticmethod
    def exit_code(error):
        """
        0 success, 1 usage and input errors, 2 numerical failure,
        3 failed acceptance check.
        """
        if isinstance(error, NumericalError):
            return 2
        if isinstance(error, App.AcceptanceError):
            return 3
        return 1

    def print_usage(self):
        names = sorted(set(c['alias'] for c in self.commands.values()))
        print("usage: misret <command> [options]\n\ncommands: %s\n\n"
              "misret help <command> shows the options of a command." % ", ".join(names))

    def exec_command(self, argv):
        """
        Runs one command line.

        :param argv: Command name followed by its arguments.
        :return: Process exit code.
        :rtype: int
        """

        if not argv or argv[0] in ("-h", "--help"):
            self.print_usage()
            return 0 if argv else 1

        name = argv[0]
        if name not in self.commands:
            self.log.error("Unknown command '%s'." % name)
            self.print_usage()
            return 1

        try:
            self.commands[name]['fcn'](*argv[1:])
        except Exception as err:
            return self.exit_code(err)
        return 0
