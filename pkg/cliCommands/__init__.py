import importlib
import pkgutil

__all__ = []


def register_all_commands(app, commands):
    """
    Static method which register all known commands.

    All modules within this directory will be scanned and the class named
    after each module will be instantiated as a command.

    :param app: misret App
    :param commands: dictionary of commands which should be modified
    :return: None
    """

    cli_modules = {}
    for loader, name, is_pkg in pkgutil.iter_modules(__path__):
        if name == 'CliCommand':
            continue
        cli_modules[name] = importlib.import_module(__name__ + '.' + name)

    for key, mod in cli_modules.items():
        class_type = getattr(mod, key)
        command_instance = class_type(app)

        for alias in command_instance.aliases:
            commands[alias] = {
                'fcn': command_instance.execute_wrapper,
                'help': command_instance.get_decorated_help(),
                'alias': command_instance.aliases[0]
            }
