from collections import OrderedDict

from cliCommands.CliCommand import CliCommand


class CliCommandHelp(CliCommand):
    """
    Prints the help of one command or of all of them.

    example:
        misret help train
    """

    # List of all command aliases
    aliases = ['help']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict([
        ('name', str)
    ])

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict()

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Shows the help of a command.",
        'args': OrderedDict([
            ('name', 'Command name. All commands when omitted.')
        ]),
        'examples': ['misret help eval']
    }

    uses_config = False

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return: The printed help text.
        """

        commands = self.app.commands
        if 'name' in args:
            if args['name'] not in commands:
                self.raise_command_error("Unknown command '%s'." % args['name'])
            text = commands[args['name']]['help']
        else:
            primary = sorted(set(c['alias'] for c in commands.values()))
            text = "\n\n".join(commands[name]['help'] for name in primary)
        print(text)
        return text
