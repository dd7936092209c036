import abc
import os
import re
import sys
from collections import OrderedDict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

import MisretApp
from artifacts import write_json, read_json
from mrCore.config import parse_value, world_spec


class CliCommand(object):

    # misret App
    app = None

    # logger
    log = None

    # array of all command aliases, the first one is the name shown in usage
    aliases = []

    # dictionary of positional arguments, needs to be ordered
    # OrderedDict should be like OrderedDict([(key,value),(key2,value2)])
    arg_names = OrderedDict()

    # dictionary of types of options like --option-name value, needs to be ordered.
    # bool options are flags and take no value.
    option_types = OrderedDict()

    # array of mandatory arguments for current command: required = ['name']
    required = []

    # structured help for current command, args needs to be ordered
    # OrderedDict should be like OrderedDict([(key,value),(key2,value2)])
    help = {
        'main': "undefined help.",
        'args': OrderedDict(),
        'examples': []
    }

    # False for commands that never touch an experiment config (help, version)
    uses_config = True

    # config used when --config is not given, None means the built-in defaults
    default_config = None

    # --sweep support: paths.* keys written per swept value, and
    # paths.* keys read from the suffixed file when it exists
    sweepable = False
    sweep_outputs = ()
    sweep_inputs = ()

    # options every config-driven command accepts
    common_options = OrderedDict([
        ('config', str),
        ('set', str),
        ('sweep', str),
        ('quiet', bool)
    ])

    common_help = OrderedDict([
        ('config', 'Experiment config file (JSON). Defaults are used for missing keys.'),
        ('set', 'Override one config value, section.key=value. May be repeated.'),
        ('sweep', 'Run once per value: section.key=v1,v2,...'),
        ('quiet', 'Only log warnings and errors, no progress bars.')
    ])

    # options which may be given more than once
    repeatable = ('set',)

    # original incoming arguments into command
    original_args = None

    def __init__(self, app):
        self.app = app
        if self.app is None:
            raise TypeError('Expected app to be misret App instance.')
        if not isinstance(self.app, MisretApp.App):
            raise TypeError('Expected misret App, got %s.' % type(app))
        self.log = self.app.log

    def all_option_types(self):
        if not self.uses_config:
            return self.option_types
        types = OrderedDict(self.option_types)
        for key, value in self.common_options.items():
            if key == 'sweep' and not self.sweepable:
                continue
            types.setdefault(key, value)
        return types

    def raise_command_error(self, text):
        """
        Raises the usage error of the app.

        :param text: text of error
        :return: raise exception
        """

        raise self.app.CommandErrorException(text)

    def get_current_command(self):
        """
        :return: current command line without the program name
        """
        command_string = []
        command_string.append(self.aliases[0])
        if self.original_args is not None:
            for arg in self.original_args:
                command_string.append(arg)
        return " ".join(command_string)

    def get_decorated_help(self):
        """
        Decorate help for console output.

        :return: decorated help from structure
        """

        option_types = self.all_option_types()
        help_args = OrderedDict(self.help['args'])
        if self.uses_config:
            for key, text in self.common_help.items():
                if key in option_types:
                    help_args.setdefault(key, text)

        def get_decorated_command(alias_name):
            command_string = []
            for arg_key in help_args:
                command_string.append(get_decorated_argument(arg_key, help_args[arg_key], True))
            return "> misret " + alias_name + " " + " ".join(command_string)

        def get_decorated_argument(help_key, help_text, in_command=False):
            if help_key in self.arg_names:
                in_command_name = "<" + help_key + ">"
            elif help_key in option_types:
                arg_type = option_types[help_key]
                flag = "--" + help_key.replace('_', '-')
                if arg_type is bool:
                    in_command_name = flag
                else:
                    type_name = str(arg_type.__name__)
                    in_command_name = flag + " <" + type_name + ">"
            else:
                in_command_name = help_key + " <?>"

            if in_command:
                if help_key in self.required:
                    return in_command_name
                else:
                    return '[' + in_command_name + ']'
            else:
                if help_key in self.required:
                    return "\t" + in_command_name + ": " + help_text
                else:
                    return "\t[" + in_command_name + ": " + help_text + "]"

        def get_decorated_example(example_item):
            return "> " + example_item

        help_string = [self.help['main']]
        for alias in self.aliases:
            help_string.append(get_decorated_command(alias))

        for key, value in help_args.items():
            help_string.append(get_decorated_argument(key, value))

        for example in self.help['examples']:
            help_string.append(get_decorated_example(example))

        return "\n".join(help_string)

    def parse_arguments(self, args):
        """
        Pre-processes arguments to detect '--keyword value' pairs and
        '--flag' switches into dictionary and standalone parameters into list.
        Dashes in option names become underscores.

        :param args: command line arguments to parse
        :return: arguments, options
        """

        option_types = self.all_option_types()
        options = {}
        arguments = []
        name = None
        for arg in args:
            match = re.search(r'^--([a-zA-Z][\w-]*)(=(.*))?$', arg)
            if match and name is None:
                key = match.group(1).replace('-', '_')
                if match.group(2) is not None:
                    self.store_option(options, key, match.group(3))
                elif option_types.get(key) is bool:
                    options[key] = True
                else:
                    name = key
                continue

            if name is None:
                arguments.append(arg)
            else:
                self.store_option(options, name, arg)
                name = None

        if name is not None:
            self.raise_command_error("Option '--%s' expects a value." % name.replace('_', '-'))

        return arguments, options

    def store_option(self, options, key, value):
        if key in self.repeatable:
            options.setdefault(key, []).append(value)
        else:
            options[key] = value

    def check_args(self, args):
        """
        Check arguments and options for right types

        :param args: command line arguments to check
        :return: named_args, unnamed_args
        """

        arguments, options = self.parse_arguments(args)
        option_types = self.all_option_types()

        named_args = {}
        unnamed_args = []

        # check arguments
        idx = 0
        arg_names_items = list(self.arg_names.items())
        for argument in arguments:
            if len(self.arg_names) > idx:
                key, arg_type = arg_names_items[idx]
                try:
                    named_args[key] = arg_type(argument)
                except Exception as e:
                    self.raise_command_error("Cannot cast named argument '%s' to type %s with exception '%s'."
                                             % (key, arg_type.__name__, str(e)))
            else:
                unnamed_args.append(argument)
            idx += 1

        # check options
        for key in options:
            if key not in option_types:
                self.raise_command_error("Unknown parameter: --%s" % key.replace('_', '-'))
            arg_type = option_types[key]
            if arg_type is bool:
                if options[key] not in (True, "true", "false"):
                    self.raise_command_error("Flag '--%s' takes no value." % key.replace('_', '-'))
                named_args[key] = options[key] in (True, "true")
                continue
            try:
                if key in self.repeatable:
                    named_args[key] = [arg_type(v) for v in options[key]]
                else:
                    named_args[key] = arg_type(options[key])
            except Exception as e:
                self.raise_command_error("Cannot cast argument '--%s' to type '%s' with exception '%s'."
                                         % (key.replace('_', '-'), arg_type.__name__, str(e)))

        # check required arguments
        for key in self.required:
            if key not in named_args:
                self.raise_command_error("Missing required argument '%s'." % key)

        return named_args, unnamed_args

    @staticmethod
    def parse_assignment(text):
        """
        :param text: ``section.key=value``
        :return: (dotted key, value) with value parsed as a JSON literal when possible.
        """
        if '=' not in text:
            raise MisretApp.App.CommandErrorException("Expected section.key=value, got '%s'." % text)
        key, value = text.split('=', 1)
        return key.strip(), parse_value(value.strip())

    def execute_wrapper(self, *args):
        """
        Command which is called by the app when current command aliases are hit.
        Main catch(except) is implemented here.
        This method should be reimplemented only when initial checking sequence differs

        :param args: arguments passed on the command line
        :return: None, output or exception
        """

        try:
            self.log.debug("Command '%s' executed." % str(self.__class__.__name__))
            self.original_args = args
            args, unnamed_args = self.check_args(args)
            self.app.set_quiet(args.get('quiet', False))

            if not self.uses_config:
                return self.execute(args, unnamed_args)

            overrides = [self.parse_assignment(s) for s in args.get('set', [])]
            path = args.get('config', self.default_config)
            if 'sweep' in args:
                return self.run_sweep(path, overrides, args, unnamed_args)

            self.app.load_config(path, overrides)
            with self.app.proc_container.new(self.get_current_command()):
                return self.execute(args, unnamed_args)
        except Exception as unknown:
            error_info = sys.exc_info()
            self.log.error("Command '%s' failed." % self.aliases[0])
            self.app.display_error(unknown, error_info)
            raise

    @staticmethod
    def suffixed(path, suffix):
        stem, ext = os.path.splitext(path)
        return stem + suffix + ext

    def run_sweep(self, path, overrides, args, unnamed_args):
        """
        Runs the command once per swept value. Output paths get a
        ``_<key>-<value>`` suffix; a JSON summary and a plot of the
        per-value results are written next to the unsuffixed output.

        :return: Sweep summary dict.
        """
        key, raw = self.parse_assignment(args["sweep"])
        values = [parse_value(v.strip()) for v in str(raw).split(",") if v.strip()]
        if not values:
            self.raise_command_error("--sweep needs at least one value.")

        rows = []
        base_paths = None
        for value in values:
            self.app.load_config(path, overrides + [(key, value)])
            if base_paths is None:
                base_paths = dict(self.app.config["paths"])
            suffix = "_%s-%s" % (key.split('.')[-1], re.sub(r'[^\w.+-]', '_', str(value)))
            for name in self.sweep_outputs:
                self.app.set_option("paths." + name, self.suffixed(base_paths[name], suffix))
            for name in self.sweep_inputs:
                candidate = self.suffixed(base_paths[name], suffix)
                if os.path.exists(candidate):
                    self.app.set_option("paths." + name, candidate)
            self.app.propagate_options()

            with self.app.proc_container.new("%s [%s=%s]" % (self.aliases[0], key, value)):
                result = self.execute(args, unnamed_args)
            row = {"value": value}
            row.update(self.sweep_row(result))
            rows.append(row)

        summary = {"command": self.aliases[0], "key": key, "rows": rows}
        stem = self.suffixed(base_paths[self.sweep_outputs[0]], "_sweep")
        write_json(os.path.splitext(stem)[0] + ".json", summary)
        self.plot_sweep(summary, os.path.splitext(stem)[0] + ".png")
        return summary

    def sweep_row(self, result):
        """
        Scalar metrics of one sweep run, reimplemented by sweepable commands.
        """
        return {}

    @staticmethod
    def plot_sweep(summary, path):
        rows = summary["rows"]
        metrics = [k for k in rows[0] if k != "value" and not k.endswith("_std")] if rows else []
        if not metrics:
            return
        labels = [str(r["value"]) for r in rows]
        x = list(range(len(rows)))
        fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            y = [r[metric] for r in rows]
            err = [r.get(metric + "_std", 0.0) for r in rows]
            ax.errorbar(x, y, yerr=err, marker="o", capsize=3)
            ax.set_xticks(x)
            ax.set_xticklabels(labels)
            ax.set_xlabel(summary["key"])
            ax.set_ylabel(metric)
        plt.tight_layout()
        plt.savefig(path)
        plt.close(fig)

    @staticmethod
    def provenance_path(dataset_path):
        return dataset_path + ".provenance.json"

    def check_provenance(self, dataset_path):
        """
        Warns when the world the dataset was generated in differs from
        the world of the current config.
        """
        path = self.provenance_path(dataset_path)
        if not os.path.exists(path):
            self.log.warning("Dataset %s has no provenance sidecar" % dataset_path)
            return
        prov = read_json(path)
        spec = prov.get("world_spec")
        if spec is None:
            return
        current = world_spec(self.app.config)
        if spec != current:
            drift = sorted(k for k, v in current.to_dict().items() if spec.to_dict().get(k) != v)
            self.log.warning("World spec of the config differs from the dataset's in: %s" % ", ".join(drift))

    def ensure_parent(self, path):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    @abc.abstractmethod
    def execute(self, args, unnamed_args):
        """
        Direct execute of command, this method should be implemented in each descendant.
        No main catch should be implemented here.

        :param args: array of known named arguments and options
        :param unnamed_args: array of other values which were passed into command
            without --somename and we do not have them in known arg_names
        :return: None, output or exception
        """

        raise NotImplementedError("Please Implement this method")
