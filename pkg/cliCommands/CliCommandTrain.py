import os
from collections import OrderedDict

import numpy as np

from cliCommands.CliCommand import CliCommand
from mrCore.checkpoint import read_checkpoint, CheckpointError
from mrCore.config import model_config, train_config
from mrCore.lmprior import load_corpus
from mrCore.model import init_model, count_parameters
from mrCore.trainer import train
from mrCore.trajectory import load_dataset


class CliCommandTrain(CliCommand):
    """
    Trains the recommendation policy on the behaviour dataset.

    example:
        misret train --ablate-max
    """

    # List of all command aliases
    aliases = ['train']

    # Dictionary of types from the command line, needs to be ordered
    arg_names = OrderedDict()

    # Dictionary of types of options like --option-name value, needs to be ordered
    option_types = OrderedDict([
        ('ablate_lm', bool),
        ('ablate_max', bool),
        ('embed', str),
        ('freeze', str),
        ('steps', int)
    ])

    # array of mandatory arguments for current command
    required = []

    # structured help for current command, args needs to be ordered
    help = {
        'main': "Trains the policy and writes the checkpoint and the per-step loss log.",
        'args': OrderedDict([
            ('ablate_lm', 'Random backbone init, no auxiliary language loss.'),
            ('ablate_max', 'No max-return head; act on the full history.'),
            ('embed', 'Token embedder: mlp or linear.'),
            ('freeze', 'Backbone training: lora, frozen or full.'),
            ('steps', 'Number of optimizer steps, overrides train.steps.')
        ]),
        'examples': ['misret train --ablate-lm',
                     'misret train --embed linear --sweep model.T_max=5,10,15,20,25']
    }

    sweepable = True
    sweep_outputs = ('checkpoint', 'metrics')

    def variant(self, args):
        parts = []
        if args.get('ablate_lm', False):
            parts.append("no-lm")
        if args.get('ablate_max', False):
            parts.append("no-max")
        if args.get('embed') == "linear":
            parts.append("linear")
        return "+".join(parts) if parts else "full"

    def apply_flags(self, args):
        """
        Maps the command flags onto config overrides.
        """
        if args.get('ablate_lm', False):
            if args.get('freeze') in ("lora", "frozen"):
                self.raise_command_error("--ablate-lm trains a random backbone, "
                                         "it cannot be combined with --freeze %s." % args['freeze'])
            self.app.set_option("train.init_prior", False)
            self.app.set_option("train.aux_language", False)
            self.app.set_option("model.freeze_mode", "full")
        if args.get('ablate_max', False):
            self.app.set_option("train.max_head", False)
        if 'embed' in args:
            self.app.set_option("model.embed_kind", args['embed'])
        if 'freeze' in args:
            self.app.set_option("model.freeze_mode", args['freeze'])
        if 'steps' in args:
            self.app.set_option("train.steps", args['steps'])
        self.app.propagate_options()

    def language_setup(self, cfg):
        """
        :return: (prior tensors or None, LM dims for the model config, corpus or None)
        """
        t = cfg["train"]
        corpus_path = self.app.find_file(cfg["paths"]["corpus"])
        if not t["init_prior"]:
            if not t["aux_language"]:
                return None, {"lm_vocab": 0}, None
            corpus = load_corpus(corpus_path)
            return None, {"lm_vocab": corpus.n_symbols}, corpus

        prior_path = cfg["paths"]["prior"]
        if not os.path.isfile(prior_path):
            raise CheckpointError("prior checkpoint not found: %s (run pretrain-lm first or pass --ablate-lm)"
                                  % prior_path)
        header, tensors = read_checkpoint(prior_path)
        dims = {"lm_vocab": header["cfg"]["lm_vocab"], "lm_context": header["cfg"]["lm_context"]}
        corpus = None
        if t["aux_language"]:
            vocab = header.get("extra", {}).get("vocab")
            if not vocab:
                raise CheckpointError("prior checkpoint %s carries no vocabulary" % prior_path)
            corpus = load_corpus(corpus_path, vocab=list(vocab))
        return tensors, dims, corpus

    def execute(self, args, unnamed_args):
        """

        :param args:
        :param unnamed_args:
        :return: Training summary.
        """

        self.apply_flags(args)
        cfg = self.app.config
        paths = cfg["paths"]

        ds = load_dataset(paths["dataset"])
        self.check_provenance(paths["dataset"])

        prior, lm_dims, corpus = self.language_setup(cfg)
        mcfg = model_config(cfg, state_dim=ds.state_dim, n_items=ds.catalog_size,
                            return_bins=tuple(ds.return_bins), rtg_scale=ds.rtg_scale, **lm_dims)
        model = init_model(mcfg, prior, cfg["seed"])

        report = count_parameters(model)
        variant = self.variant(args)
        print("Variant %s: %d parameters, %d trainable (%.2f%%), %d LoRA, trainable groups: %s"
              % (variant, report["total"], report["trainable"], 100.0 * report["trainable"] / report["total"],
                 report["lora"], ", ".join(report["trainable_groups"])))

        tcfg = train_config(cfg)
        extra = {
            "variant": variant,
            "max_head": tcfg.max_head,
            "config": cfg,
            "config_digest": self.app.digest
        }
        self.ensure_parent(paths["checkpoint"])
        self.ensure_parent(paths["metrics"])
        model, metrics = train(model, ds, corpus, tcfg, metrics_path=paths["metrics"],
                               checkpoint_path=paths["checkpoint"], config_digest=self.app.digest,
                               extra=extra)

        summary = {"variant": variant, "parameters": report, "steps": len(metrics)}
        if metrics:
            summary["L_total"] = metrics[-1]["L_total"]
            summary["L_total_std"] = self.loss_spread(metrics)
            print("Final L_total %.4f after %d steps, checkpoint %s" % (summary["L_total"], len(metrics),
                                                                        paths["checkpoint"]))
        return summary

    @staticmethod
    def loss_spread(metrics, first=1000, last=5000):
        """
        Std of L_total over steps first..last, or over the second half of
        a shorter run.
        """
        values = [m["L_total"] for m in metrics if first <= m["step"] <= last]
        if len(values) < 2:
            values = [m["L_total"] for m in metrics[len(metrics) // 2:]]
        return float(np.std(values)) if values else 0.0

    def sweep_row(self, result):
        return {"L_total": result.get("L_total", float("nan")),
                "L_total_std": result.get("L_total_std", float("nan"))}
