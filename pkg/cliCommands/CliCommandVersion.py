from collections import OrderedDict

from cliCommands.CliCommand import CliCommand


class CliCommandVersion(CliCommand):
    """
    Prints the program version.

    example:

    """

    # List of all command aliases
    aliases = ['version']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict()

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict()

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Prints the program version.",
        'args': OrderedDict(),
        'examples': []
    }

    uses_config = False

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return:
        """

        text = "misret " + self.app.version_string()
        print(text)
        return text
