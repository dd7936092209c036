from collections import OrderedDict

from artifacts import write_json
from cliCommands.CliCommand import CliCommand
from mrCore.config import model_config, train_config, search_config
from mrCore.evaluation import stitch_trial


class CliCommandStitchDemo(CliCommand):
    """
    Trains on the two-trajectory toy and checks that the history-length
    search stitches the better continuation onto the worse start.

    example:
        misret stitch-demo --seeds 3
    """

    # List of all command aliases
    aliases = ['stitch-demo', 'stitch_demo']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict()

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict([
        ('seeds', int)
    ])

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Runs the stitching demonstration; exits with code 3 if any seed fails.",
        'args': OrderedDict([
            ('seeds', 'Number of independent runs, seeds seed .. seed + n - 1.')
        ]),
        'examples': ['misret stitch-demo --seeds 3']
    }

    default_config = "configs/toy.json"

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return: Demo report.
        """

        n_seeds = args.get('seeds', 1)
        if n_seeds < 1:
            self.raise_command_error("--seeds must be >= 1, got %d." % n_seeds)

        cfg = self.app.config
        mcfg = model_config(cfg)
        tcfg = train_config(cfg)
        scfg = search_config(cfg)

        trials = []
        for i in range(n_seeds):
            seed = cfg["seed"] + i
            trial = stitch_trial(mcfg, tcfg, scfg, seed)
            trials.append(trial)
            for start in ("b", "a"):
                run = trial["runs"][start]
                print("seed %d: from s_%s0  T* at s_mid = %s  terminal %s  return %.2f"
                      % (seed, start, run["T_star_mid"], run["terminal"], run["return"]))
            print("seed %d: R_hat(s_mid, T=1) = %.3f  R_hat(s_mid, T=2 | B prefix) = %.3f  -> %s"
                  % (seed, trial["R_hat"]["mid_T1"], trial["R_hat"]["mid_T2_b_prefix"],
                     "pass" if trial["passed"] else "FAIL"))
            if not trial["passed"]:
                failed = [k for k, ok in trial["checks"].items() if not ok]
                self.log.warning("Seed %d failed checks: %s" % (seed, ", ".join(failed)))

        passed = sum(1 for t in trials if t["passed"])
        report = {
            "passed": passed,
            "seeds": n_seeds,
            "trials": trials,
            "config": cfg,
            "config_digest": self.app.digest
        }
        self.ensure_parent(cfg["paths"]["report"])
        write_json(cfg["paths"]["report"], report)
        print("Stitching passed on %d of %d seeds" % (passed, n_seeds))

        if passed < n_seeds:
            raise self.app.AcceptanceError("stitching failed on %d of %d seeds" % (n_seeds - passed, n_seeds))
        return report
