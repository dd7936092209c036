from collections import OrderedDict

from cliCommands.CliCommand import CliCommand
from mrCore.config import model_config
from mrCore.lmprior import load_corpus, pretrain_lm
from mrCore.model import save_model


class CliCommandPretrainLm(CliCommand):
    """
    Pretrains the backbone as a character-level language model.

    example:
        misret pretrain-lm --check
    """

    # List of all command aliases
    aliases = ['pretrain-lm', 'pretrain_lm']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict()

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict([
        ('steps', int),
        ('check', bool)
    ])

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Pretrains the LM prior on the bundled corpus and prints held-out NLL before and after.",
        'args': OrderedDict([
            ('steps', 'Number of optimizer steps, overrides train.lm_steps.'),
            ('check', 'Fail with exit code 3 unless the held-out NLL went down.')
        ]),
        'examples': ['misret pretrain-lm --steps 500 --check']
    }

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return: Pretraining report.
        """

        if 'steps' in args:
            self.app.set_option("train.lm_steps", args['steps'])
            self.app.propagate_options()

        cfg = self.app.config
        t = cfg["train"]
        path = cfg["paths"]["prior"]
        corpus = load_corpus(self.app.find_file(cfg["paths"]["corpus"]))

        model, report = pretrain_lm(model_config(cfg), corpus, t["lm_steps"], t["lm_lr"], cfg["seed"],
                                    batch=t["lm_pretrain_batch"], length=t["lm_pretrain_length"])
        self.ensure_parent(path)
        save_model(model, path, {
            "pretrain": {k: report[k] for k in ("nll_before", "nll_after", "steps")},
            "config": cfg,
            "config_digest": self.app.digest
        })

        print("Held-out NLL before: %.4f" % report["nll_before"])
        print("Held-out NLL after:  %.4f" % report["nll_after"])

        if args.get('check', False) and not report["nll_after"] < report["nll_before"]:
            raise self.app.AcceptanceError("held-out NLL did not decrease (%.4f -> %.4f)"
                                           % (report["nll_before"], report["nll_after"]))
        return report
