import sys

from multiprocessing import freeze_support
from MisretApp import App


if __name__ == '__main__':
    freeze_support()

    app = App()

    sys.exit(app.exec_command(sys.argv[1:]))
